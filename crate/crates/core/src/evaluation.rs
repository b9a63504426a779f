//! Reconstruction modes and the harness that scores them on a test set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserModel};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::metrics::{jerk_metrics, jerk_trace, mpjpe, per_frame_error, JointSubset};
use crate::motion::{decanonicalize, AugmentedWindow, ControlSignal, Layout, MotionFrame};
use crate::online::{collect, EngineConfig, OnlineStream, ResampleEngine, StreamOutput, TickStats};
use crate::rng::{domain, normal_vec, substream};
use crate::synth::{corrupt_observations, extract_observations, Sequence, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Online,
    OnlineNoStab,
    OfflineFullwindow,
    ResampleBaseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Online, Mode::OnlineNoStab, Mode::OfflineFullwindow, Mode::ResampleBaseline];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Online => "online",
            Mode::OnlineNoStab => "online_no_stab",
            Mode::OfflineFullwindow => "offline_fullwindow",
            Mode::ResampleBaseline => "resample_baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(vec![format!("eval.modes: unknown mode {s:?}")]))
    }
}

/// Non-overlapping windows denoised from pure noise with every frame's
/// observation injected; the last window is aligned to the sequence end and
/// short sequences are padded with their final observation.
pub fn run_offline<D: Denoiser>(denoiser: &D, sched: &DiffusionSchedule, cfg: &EngineConfig, obs: &[ControlSignal]) -> Result<StreamOutput> {
    cfg.validate()?;
    if obs.is_empty() {
        return Ok(StreamOutput::default());
    }
    let layout = denoiser.layout();
    let d = layout.dim();
    let n = denoiser.window_len();
    let k = cfg.max_level;
    let dk = cfg.delta_k()?;
    let norm = denoiser.normalizer();
    let gate = |level: usize| !cfg.noise_robust || level >= cfg.k_star;

    let mut padded = obs.to_vec();
    while padded.len() < n {
        padded.push(*obs.last().unwrap());
    }
    let mut starts: Vec<usize> = (0..padded.len() / n).map(|w| w * n).collect();
    if padded.len() % n != 0 {
        starts.push(padded.len() - n);
    }
    let mut out = StreamOutput::default();
    for (w, &start) in starts.iter().enumerate() {
        let t0 = Instant::now();
        let mut rng = substream(cfg.seed, domain::OFFLINE, w as u64);
        let anchors = padded[start..start + n]
            .iter()
            .map(|o| o.canonical_anchor(&layout).map(|(p, m)| (norm.normalize(&p.pose), m)))
            .collect::<Result<Vec<_>>>()?;
        let mut latents: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d)).collect();
        let inject = |latents: &mut [Vec<f64>], level: usize| {
            if gate(level) {
                for (x, (a, m)) in latents.iter_mut().zip(&anchors) {
                    for (i, &b) in m.bits.iter().enumerate() {
                        if b {
                            x[i] = a[i];
                        }
                    }
                }
            }
        };
        let mut level = k;
        let mut evals = 0u64;
        while level > 0 {
            inject(&mut latents, level);
            let rows = latents
                .iter()
                .zip(&anchors)
                .map(|(x, (_, m))| {
                    let mut row = x.clone();
                    row.extend(m.bits.iter().map(|&b| if b && gate(level) { 1.0 } else { 0.0 }));
                    row
                })
                .collect();
            let aug = AugmentedWindow {
                rows,
                levels: vec![level; n],
                context: None,
            };
            let x0 = denoiser.predict_x0(&aug, start as i64 + cfg.history as i64)?;
            evals += 1;
            for (x, p) in latents.iter_mut().zip(&x0) {
                *x = sched.reverse_jump(x, p, level, level - dk)?;
            }
            level -= dk;
        }
        inject(&mut latents, 0);
        let emitted_before = out.frames.len();
        let first_new = emitted_before.saturating_sub(start);
        let last = (start + n).min(obs.len());
        let new_frames = last.saturating_sub(start + first_new);
        let wall = t0.elapsed().as_secs_f64();
        for i in first_new..first_new + new_frames {
            let o = &padded[start + i];
            let canonical = MotionFrame::new(norm.denormalize(&latents[i]));
            let mut world = decanonicalize(&canonical, &o.head)?;
            if gate(0) {
                if let Some(p) = o.wrist_left {
                    Layout::set_joint(&mut world.pose, Layout::WRIST_LEFT, p);
                }
                if let Some(p) = o.wrist_right {
                    Layout::set_joint(&mut world.pose, Layout::WRIST_RIGHT, p);
                }
            }
            out.frames.push(world);
            // The window's cost is booked on the first frame it emits.
            out.ticks.push(TickStats {
                t: (start + i) as i64,
                evals: if i == first_new { evals } else { 0 },
                wall_s: if i == first_new { wall } else { 0.0 },
            });
        }
    }
    Ok(out)
}

/// One test sequence with its pinned observations.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub truth: Vec<MotionFrame>,
    pub obs: Vec<ControlSignal>,
}

/// Extracts observations from each sequence on its own stream and applies
/// observation noise of level `noise_level`.
pub fn make_cases(seqs: &[Sequence], observe: &SynthConfig, noise_level: f64, seed: u64) -> Vec<TestCase> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let clean = extract_observations(s, observe, &mut substream(seed, domain::OBSERVE, i as u64));
            noisy_case(i, s.poses.clone(), &clean, noise_level, seed)
        })
        .collect()
}

/// Test case `index` from clean observations, corrupted on its own stream.
pub fn noisy_case(index: usize, truth: Vec<MotionFrame>, clean: &[ControlSignal], noise_level: f64, seed: u64) -> TestCase {
    let mut rng = substream(seed, domain::CORRUPT, index as u64);
    let obs = clean.iter().map(|c| corrupt_observations(c, noise_level, &mut rng)).collect();
    TestCase { truth, obs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub sequence: usize,
    pub mpjpe: f64,
    pub head_pe: f64,
    pub wrist_pe: f64,
    pub pj: f64,
    pub auj: f64,
    pub evals_per_frame: f64,
    pub tick_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub aggregate: SequenceScore,
    pub sequences: Vec<SequenceScore>,
    /// Per-frame error and jerk traces of the first sequence, for plotting.
    #[serde(skip)]
    pub traces: Option<(Vec<f64>, Vec<f64>)>,
}

/// Scores one reconstruction; the first `skip` frames are excluded.
pub fn score(index: usize, pred: &StreamOutput, truth: &[MotionFrame], frame_rate: f64, skip: usize) -> Result<SequenceScore> {
    let (pj, auj) = jerk_metrics(&pred.frames[skip..], frame_rate)?;
    let frames = pred.ticks.len().max(1) as f64;
    Ok(SequenceScore {
        sequence: index,
        mpjpe: mpjpe(&pred.frames, truth, JointSubset::All, skip)?,
        head_pe: mpjpe(&pred.frames, truth, JointSubset::Head, skip)?,
        wrist_pe: mpjpe(&pred.frames, truth, JointSubset::Wrists, skip)?,
        pj,
        auj,
        evals_per_frame: pred.ticks.iter().map(|t| t.evals).sum::<u64>() as f64 / frames,
        tick_s: pred.ticks.iter().map(|t| t.wall_s).sum::<f64>() / frames,
    })
}

fn mean_score(scores: &[SequenceScore]) -> SequenceScore {
    let n = scores.len().max(1) as f64;
    let avg = |f: fn(&SequenceScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    SequenceScore {
        sequence: scores.len(),
        mpjpe: avg(|s| s.mpjpe),
        head_pe: avg(|s| s.head_pe),
        wrist_pe: avg(|s| s.wrist_pe),
        pj: avg(|s| s.pj),
        auj: avg(|s| s.auj),
        evals_per_frame: avg(|s| s.evals_per_frame),
        tick_s: avg(|s| s.tick_s),
    }
}

/// Models used by [`compare_modes`]. Offline mode prefers a model trained
/// with every frame observed and falls back to the causal one.
#[derive(Clone, Copy)]
pub struct ModeModels<'a> {
    pub causal: &'a DenoiserModel,
    pub offline: Option<&'a DenoiserModel>,
    pub sched: &'a DiffusionSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMeta {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub frame_rate: f64,
}

pub fn reconstruct(models: ModeModels, mode: Mode, engine: &EngineConfig, case: &TestCase) -> Result<StreamOutput> {
    let sched = models.sched.clone();
    match mode {
        Mode::Online => collect(&mut OnlineStream::new(models.causal, sched, *engine)?, case.obs.iter().copied()),
        Mode::OnlineNoStab => {
            let cfg = EngineConfig { stab_n: 0, ..*engine };
            collect(&mut OnlineStream::new(models.causal, sched, cfg)?, case.obs.iter().copied())
        }
        Mode::ResampleBaseline => collect(&mut ResampleEngine::new(models.causal, sched, *engine)?, case.obs.iter().copied()),
        Mode::OfflineFullwindow => run_offline(models.offline.unwrap_or(models.causal), &sched, engine, &case.obs),
    }
}

pub fn evaluate_mode(models: ModeModels, mode: Mode, engine: &EngineConfig, cases: &[TestCase], meta: &EvalMeta) -> Result<EvalReport> {
    let skip = engine.history;
    let mut scores = Vec::with_capacity(cases.len());
    let mut traces = None;
    for (i, case) in cases.iter().enumerate() {
        let out = reconstruct(models, mode, engine, case)?;
        scores.push(score(i, &out, &case.truth, meta.frame_rate, skip)?);
        if i == 0 {
            traces = Some((
                per_frame_error(&out.frames, &case.truth, JointSubset::All)?,
                jerk_trace(&out.frames, meta.frame_rate)?,
            ));
        }
    }
    Ok(EvalReport {
        mode,
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        checkpoint_id: meta.checkpoint_id.clone(),
        aggregate: mean_score(&scores),
        sequences: scores,
        traces,
    })
}

pub fn compare_modes(models: ModeModels, modes: &[Mode], engine: &EngineConfig, cases: &[TestCase], meta: &EvalMeta) -> Result<Vec<EvalReport>> {
    modes
        .iter()
        .map(|&m| evaluate_mode(models, m, engine, cases, meta))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ModelConfig, Normalizer, OracleDenoiser};
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::synth::generate_split;

    fn cases(n: usize, frames: usize) -> (Vec<Sequence>, Vec<TestCase>, SynthConfig) {
        let cfg = SynthConfig { frames, train_sequences: 0, test_sequences: n, ..Default::default() };
        let (_, test) = generate_split(&cfg).unwrap();
        let c = make_cases(&test, &cfg, 0.0, 1);
        (test, c, cfg)
    }

    #[test]
    fn offline_with_oracle_is_exact_for_any_length() {
        let engine = EngineConfig::default();
        let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
        for frames in [7, 25, 60, 100] {
            let (seqs, cases, _) = cases(1, frames);
            let canon = seqs[0].canonical_frames().unwrap();
            let oracle = OracleDenoiser::new(seqs[0].layout, 5, 19, Normalizer::fit(canon.iter(), 21), &canon);
            let out = run_offline(&oracle, &sched, &engine, &cases[0].obs).unwrap();
            assert_eq!(out.frames.len(), frames);
            // The oracle is queried with the window's own offset, so each
            // window reproduces its slice of the truth.
            assert!(mpjpe(&out.frames, &cases[0].truth, JointSubset::All, 0).unwrap() < 1e-6);
            let windows = frames.div_ceil(25) as u64;
            assert_eq!(out.ticks.iter().map(|t| t.evals).sum::<u64>(), 20 * windows);
        }
    }

    #[test]
    fn reports_are_reproducible_and_complete() {
        let (_, cases, _) = cases(2, 40);
        let model = DenoiserModel::new(
            &ModelConfig { width: 16, blocks: 1, heads: 2, ..Default::default() },
            Layout::default(),
            5,
            19,
            100,
            Normalizer::identity(21),
            0,
        )
        .unwrap();
        let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let models = ModeModels { causal: &model, offline: None, sched: &sched };
        let meta = EvalMeta { config_hash: "abc".into(), seed: 0, checkpoint_id: "m".into(), frame_rate: 10.0 };
        let engine = EngineConfig::default();
        let a = compare_modes(models, &Mode::ALL, &engine, &cases, &meta).unwrap();
        let b = compare_modes(models, &Mode::ALL, &engine, &cases, &meta).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sequences.iter().map(|s| s.mpjpe).collect::<Vec<_>>(), y.sequences.iter().map(|s| s.mpjpe).collect::<Vec<_>>());
            let s = &x.aggregate;
            for v in [s.mpjpe, s.head_pe, s.wrist_pe, s.pj, s.auj, s.evals_per_frame, s.tick_s] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
        let online = a[0].aggregate.evals_per_frame;
        let resample = a[3].aggregate.evals_per_frame;
        // Bootstrap cost aside, every online tick costs one evaluation.
        let per_tick: f64 = (40.0 - 1.0 + 20.0) / 40.0;
        assert!((online - per_tick).abs() < 1e-12);
        assert_eq!(resample, 20.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }
}
