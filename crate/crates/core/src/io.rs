//! On-disk formats: JSON Lines sequence files and the dataset manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{ControlSignal, FrameRecord, HeadPose, Layout, MotionFrame};
use crate::synth::Sequence;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes to JSON");
    write_text(path, &(text + "\n"))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).expect("record serializes to JSON");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        kind => Error::io(path, std::io::Error::other(format!("csv: {kind:?}"))),
    }
}

/// Writes a header row and data rows.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.as_ref()).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses one JSONL line; `line` is 1-based and only used for the error.
pub fn parse_record(text: &str, path: &Path, line: usize) -> Result<FrameRecord> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })
}

/// Reads every non-blank line of a sequence file.
pub fn read_records(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, path, i + 1)?);
    }
    Ok(out)
}

/// Ground truth and observation of every frame, one record per frame.
pub fn sequence_records(seq: &Sequence, obs: &[ControlSignal]) -> Result<Vec<FrameRecord>> {
    if seq.len() != obs.len() {
        return Err(Error::LengthMismatch(seq.len(), obs.len()));
    }
    Ok(seq
        .poses
        .iter()
        .zip(obs)
        .enumerate()
        .map(|(t, (p, o))| FrameRecord::new(t as i64, Some(p.pose.clone()), o))
        .collect())
}

/// Rebuilds a sequence and its observations from records that all carry a
/// ground-truth pose. Heads come from the observation.
pub fn records_to_sequence(
    records: &[FrameRecord],
    layout: Layout,
    frame_rate: f64,
    path: &Path,
) -> Result<(Sequence, Vec<ControlSignal>)> {
    let mut poses = Vec::with_capacity(records.len());
    let mut heads: Vec<HeadPose> = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let pose = r.pose_world.clone().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "missing pose_world".into(),
        })?;
        if pose.len() != layout.dim() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("pose_world has {} components, layout needs {}", pose.len(), layout.dim()),
            });
        }
        poses.push(MotionFrame::new(pose));
        heads.push(r.head);
    }
    let obs = records.iter().map(FrameRecord::control).collect();
    let seq = Sequence {
        layout,
        frame_rate,
        poses,
        heads,
        spectrum: None,
    };
    Ok((seq, obs))
}

/// Index of a generated dataset. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub frame_rate: f64,
    pub interior_joints: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.interior_joints)
    }

    fn resolve(manifest: &Path, files: &[String]) -> Vec<PathBuf> {
        let base = manifest.parent().unwrap_or(Path::new(""));
        files.iter().map(|f| base.join(f)).collect()
    }

    /// Loads the sequences of one split; `limit` of 0 loads all.
    pub fn load_split(&self, manifest: &Path, test: bool, limit: usize) -> Result<Vec<(Sequence, Vec<ControlSignal>)>> {
        let files = Self::resolve(manifest, if test { &self.test } else { &self.train });
        let take = if limit == 0 { files.len() } else { limit.min(files.len()) };
        files[..take]
            .iter()
            .map(|p| records_to_sequence(&read_records(p)?, self.layout(), self.frame_rate, p))
            .collect()
    }
}
