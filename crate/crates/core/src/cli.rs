//! Command-line pipelines: synth | train | stream | eval | compare.
//!
//! Every command resolves the configuration (defaults, then `--config`, then
//! flags), validates it before doing any work, and writes the resolved
//! config and its hash into its output directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{checksum, load_checkpoint, save_checkpoint};
use crate::config::Config;
use crate::denoiser::DenoiserModel;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::evaluation::{compare_modes, noisy_case, EvalMeta, EvalReport, Mode, ModeModels, SequenceScore, TestCase};
use crate::io::{create, sequence_records, write_csv, write_json, write_jsonl, write_text, Manifest};
use crate::motion::FrameRecord;
use crate::online::{FrameSource, OnlineStream};
use crate::rng::{domain, substream};
use crate::svg::line_plot;
use crate::synth::{extract_observations, generate_split};
use crate::training::{span_means, write_log_csv, MaskMode, TrainingSet, Trainer};

/// Frames buffered between the input reader and the engine.
const STREAM_QUEUE: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "causalmotion", version, about = "Streaming causal-diffusion motion reconstruction")]
pub struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy train/test dataset and its manifest.
    Synth,
    /// Train a denoiser on a dataset manifest.
    Train(TrainArgs),
    /// Reconstruct a stream of observations, one JSON line per frame.
    Stream(StreamArgs),
    /// Score one reconstruction mode on the test split.
    Eval(EvalArgs),
    /// Score several modes side by side and plot their traces.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Train with noisy, K*-gated observation anchors.
    #[arg(long)]
    pub noise_robust: bool,
    /// Train the full-window model used by offline evaluation.
    #[arg(long)]
    pub offline: bool,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL observations; stdin when absent or `-`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long = "h")]
    pub history: Option<usize>,
    #[arg(long = "f")]
    pub horizon: Option<usize>,
    #[arg(long = "K")]
    pub max_level: Option<usize>,
    /// Denoiser evaluations per tick.
    #[arg(long)]
    pub dk_passes: Option<usize>,
    #[arg(long)]
    pub stab_n: Option<usize>,
    #[arg(long)]
    pub noise_robust: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "online")]
    pub mode: Mode,
    /// Full-window model for `offline_fullwindow`.
    #[arg(long)]
    pub offline_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated modes; defaults to `eval.modes`.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<Mode>>,
    /// Full-window model for `offline_fullwindow`.
    #[arg(long)]
    pub offline_checkpoint: Option<PathBuf>,
}

impl clap::builder::ValueParserFactory for Mode {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Mode>().map_err(|e| e.to_string()))
    }
}

/// Single-line machine-readable error.
pub fn error_json(code: &str, message: &str) -> String {
    serde_json::json!({ "error": { "code": code, "message": message } }).to_string()
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &Config) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_text(&out.join("config.hash"), &format!("{}\n", cfg.hash()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => command_synth(&cfg, out).map(drop),
        Command::Train(a) => {
            if let Some(steps) = a.steps {
                cfg.train.steps = steps;
            }
            cfg.train.noise_robust.enabled |= a.noise_robust;
            if a.offline {
                cfg.train.mask_mode = MaskMode::Offline;
            }
            command_train(&cfg, &a.manifest, out)
        }
        Command::Stream(a) => {
            for (v, engine, train) in [
                (a.history, &mut cfg.engine.history, &mut cfg.train.history),
                (a.horizon, &mut cfg.engine.horizon, &mut cfg.train.horizon),
                (a.max_level, &mut cfg.engine.max_level, &mut cfg.train.max_level),
            ] {
                if let Some(v) = v {
                    *engine = v;
                    *train = v;
                }
            }
            if let Some(p) = a.dk_passes {
                cfg.engine.refine_passes = p;
            }
            if let Some(n) = a.stab_n {
                cfg.engine.stab_n = n;
            }
            cfg.engine.noise_robust |= a.noise_robust;
            command_stream(&cfg, &a.checkpoint, a.input.as_deref(), out).map(drop)
        }
        Command::Eval(a) => {
            cfg.eval.modes = vec![a.mode];
            command_eval(&cfg, &a.checkpoint, a.offline_checkpoint.as_deref(), &a.manifest, out, false).map(drop)
        }
        Command::Compare(a) => {
            if let Some(m) = &a.modes {
                cfg.eval.modes = m.clone();
            }
            command_eval(&cfg, &a.checkpoint, a.offline_checkpoint.as_deref(), &a.manifest, out, true).map(drop)
        }
    }
}

pub fn command_synth(cfg: &Config, out: &Path) -> Result<Manifest> {
    prepare_out(out, cfg)?;
    let s = &cfg.synth;
    let (train, test) = generate_split(s)?;
    let write_split = |name: &str, seqs: &[crate::synth::Sequence], offset: u64| -> Result<Vec<String>> {
        seqs.iter()
            .enumerate()
            .map(|(i, seq)| {
                let obs = extract_observations(seq, s, &mut substream(s.seed, domain::OBSERVE, offset + i as u64));
                let rel = format!("{name}/{i:05}.jsonl");
                write_jsonl(&out.join(&rel), &sequence_records(seq, &obs)?)?;
                Ok(rel)
            })
            .collect()
    };
    // Train observations draw from a disjoint range of observation streams.
    let test_files = write_split("test", &test, 0)?;
    let train_files = write_split("train", &train, 1 << 32)?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        frame_rate: s.frame_rate,
        interior_joints: s.interior_joints,
        train: train_files,
        test: test_files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn command_train(cfg: &Config, manifest_path: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let manifest = Manifest::load(manifest_path)?;
    let seqs: Vec<_> = manifest.load_split(manifest_path, false, 0)?.into_iter().map(|(s, _)| s).collect();
    let set = TrainingSet::from_sequences(&seqs, &cfg.synth)?;
    let mut trainer = Trainer::new(cfg.train.clone(), set)?;
    let steps = cfg.train.steps;
    let log = trainer.run(|r| {
        if r.step % 100 == 0 || r.step + 1 == steps {
            eprintln!("step {} loss {:.5} {:.1}s", r.step, r.loss, r.wall_s);
        }
    })?;
    write_log_csv(&out.join("train_log.csv"), &log)?;
    let sched = trainer.schedule().clone();
    let model = trainer.into_model()?;
    let tail = span_means(&log, log.len().clamp(1, 500));
    let echo = serde_json::json!({
        "config_hash": cfg.hash(),
        "manifest_hash": manifest.config_hash,
        "train": cfg.train,
        "final_loss_mean": tail.last(),
    });
    save_checkpoint(&model, &sched, echo, &out.join("model.ckpt"))
}

fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", checksum(&bytes)))
}

pub fn command_stream(cfg: &Config, checkpoint: &Path, input: Option<&Path>, out: &Path) -> Result<u64> {
    prepare_out(out, cfg)?;
    let (model, sched, _) = load_checkpoint(checkpoint)?;
    let mut source = OnlineStream::new(model, sched, cfg.engine)?;

    let frames_path = out.join("frames.jsonl");
    let timing_path = out.join("timing.csv");
    let mut frames = create(&frames_path)?;
    let mut timing = csv::Writer::from_writer(create(&timing_path)?);
    let csv_err = |e| crate::io::csv_error(&timing_path, e);
    timing.write_record(["t", "evals", "wallclock_s"]).map_err(csv_err)?;

    let label = input.filter(|p| *p != Path::new("-")).map(Path::to_path_buf);
    let reader: Box<dyn BufRead + Send> = match &label {
        Some(p) => Box::new(BufReader::new(fs::File::open(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufReader::new(std::io::stdin())),
    };
    let path = label.unwrap_or_else(|| PathBuf::from("<stdin>"));
    let (tx, rx) = sync_channel::<Result<FrameRecord>>(STREAM_QUEUE);
    let reader_path = path.clone();
    let reader_thread = thread::spawn(move || {
        for (i, line) in reader.lines().enumerate() {
            let item = match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => crate::io::parse_record(&l, &reader_path, i + 1),
                Err(e) => Err(Error::io(&reader_path, e)),
            };
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                break;
            }
        }
    });

    let mut count = 0u64;
    for item in rx {
        let rec = item?;
        let obs = rec.control();
        let before = source.evals();
        let start = Instant::now();
        let frame = source.push(&obs)?;
        let wall = start.elapsed().as_secs_f64();
        let emitted = FrameRecord::new(rec.t, Some(frame.pose), &obs);
        serde_json::to_writer(&mut frames, &emitted).expect("record serializes to JSON");
        frames.write_all(b"\n").map_err(|e| Error::io(&frames_path, e))?;
        frames.flush().map_err(|e| Error::io(&frames_path, e))?;
        timing
            .write_record([rec.t.to_string(), (source.evals() - before).to_string(), format!("{wall:.6}")])
            .map_err(csv_err)?;
        count += 1;
    }
    reader_thread.join().expect("input reader does not panic");
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    Ok(count)
}

const SCORE_HEADER: [&str; 8] = ["mpjpe", "head_pe", "wrist_pe", "pj", "auj", "evals_per_frame", "tick_s", "sequences"];

fn score_fields(s: &SequenceScore) -> Vec<String> {
    [s.mpjpe, s.head_pe, s.wrist_pe, s.pj, s.auj, s.evals_per_frame, s.tick_s]
        .iter()
        .map(|v| v.to_string())
        .chain([s.sequence.to_string()])
        .collect()
}

fn load_cases(cfg: &Config, manifest_path: &Path) -> Result<Vec<TestCase>> {
    let manifest = Manifest::load(manifest_path)?;
    let split = manifest.load_split(manifest_path, true, cfg.eval.max_sequences)?;
    Ok(split
        .into_iter()
        .enumerate()
        .map(|(i, (seq, obs))| noisy_case(i, seq.poses, &obs, cfg.eval.noise_level, cfg.engine.seed))
        .collect())
}

/// Evaluates `cfg.eval.modes`. With `table` the output is a per-mode
/// comparison plus plots; otherwise per-sequence scores of each mode.
pub fn command_eval(
    cfg: &Config,
    checkpoint: &Path,
    offline_checkpoint: Option<&Path>,
    manifest_path: &Path,
    out: &Path,
    table: bool,
) -> Result<Vec<EvalReport>> {
    prepare_out(out, cfg)?;
    let (causal, sched, _) = load_checkpoint(checkpoint)?;
    let offline: Option<(DenoiserModel, DiffusionSchedule)> = offline_checkpoint
        .map(|p| load_checkpoint(p).map(|(m, s, _)| (m, s)))
        .transpose()?;
    let cases = load_cases(cfg, manifest_path)?;
    if cases.is_empty() {
        return Err(Error::TooShort { need: 1, got: 0 });
    }
    let meta = EvalMeta {
        config_hash: cfg.hash(),
        seed: cfg.engine.seed,
        checkpoint_id: checkpoint_id(checkpoint)?,
        frame_rate: cfg.synth.frame_rate,
    };
    let models = ModeModels {
        causal: &causal,
        offline: offline.as_ref().map(|(m, _)| m),
        sched: &sched,
    };
    let reports = compare_modes(models, &cfg.eval.modes, &cfg.engine, &cases, &meta)?;

    let mut header = vec!["mode"];
    header.extend(SCORE_HEADER);
    header.extend(["config_hash", "seed", "checkpoint_id"]);
    if table {
        let rows: Vec<Vec<String>> = reports
            .iter()
            .map(|r| {
                let mut row = vec![r.mode.as_str().to_string()];
                row.extend(score_fields(&r.aggregate));
                row.extend([r.config_hash.clone(), r.seed.to_string(), r.checkpoint_id.clone()]);
                row
            })
            .collect();
        write_csv(&out.join("compare.csv"), &header, &rows)?;
        write_json(&out.join("summary.json"), &reports)?;
        if cfg.eval.plots {
            write_plots(out, &reports)?;
        }
    } else {
        for r in &reports {
            header[0] = "sequence";
            let rows: Vec<Vec<String>> = r
                .sequences
                .iter()
                .map(|s| {
                    let mut row = vec![s.sequence.to_string()];
                    row.extend(score_fields(s));
                    row.extend([r.config_hash.clone(), r.seed.to_string(), r.checkpoint_id.clone()]);
                    row
                })
                .collect();
            write_csv(&out.join(format!("eval_{}.csv", r.mode.as_str())), &header, &rows)?;
            write_json(&out.join(format!("eval_{}.json", r.mode.as_str())), r)?;
        }
    }
    Ok(reports)
}

fn write_plots(out: &Path, reports: &[EvalReport]) -> Result<()> {
    let traces: Vec<(&str, &(Vec<f64>, Vec<f64>))> = reports
        .iter()
        .filter_map(|r| r.traces.as_ref().map(|t| (r.mode.as_str(), t)))
        .collect();
    let err: Vec<(&str, &[f64])> = traces.iter().map(|(m, t)| (*m, t.0.as_slice())).collect();
    let jerk: Vec<(&str, &[f64])> = traces.iter().map(|(m, t)| (*m, t.1.as_slice())).collect();
    write_text(&out.join("error_trace.svg"), &line_plot("Per-frame joint error, test sequence 0", "m", &err))?;
    write_text(&out.join("jerk_trace.svg"), &line_plot("Mean joint jerk, test sequence 0", "m/s^3", &jerk))
}
