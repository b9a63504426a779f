//! Frame-wise noise-corruption training: every frame of a window gets its own
//! level, observed components are overwritten with their anchors, and the
//! network regresses the clean window under an L2 loss.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserModel, ModelConfig, Normalizer};
use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::error::{check_dim, Error, Result};
use crate::motion::{ControlSignal, HeadPose, Layout, MotionFrame, VisibilityMask};
use crate::nn::{Adam, AdamConfig, Batch, Transformer};
use crate::rng::{domain, normal_vec, substream};
use crate::synth::{corrupt_observations, local_visible, Sequence, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseRobustConfig {
    pub enabled: bool,
    /// Observation noise level `l` applied to training anchors.
    pub level: f64,
    /// Anchoring is applied only while a frame's level is `>= k_star`.
    pub k_star: usize,
}

impl Default for NoiseRobustConfig {
    fn default() -> Self {
        NoiseRobustConfig {
            enabled: false,
            level: 2.0,
            k_star: 3,
        }
    }
}

/// Which frames carry anchors during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Past frames fully anchored, current frame through the observation,
    /// future unobserved; independent level per frame.
    Causal,
    /// Every frame anchored through its own observation; one level per window.
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_level: usize,
    pub history: usize,
    pub horizon: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub optimizer: AdamConfig,
    pub model: ModelConfig,
    pub noise_robust: NoiseRobustConfig,
    /// Forward-corrupts history anchors to this level when nonzero.
    pub history_corrupt_n: usize,
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_level: 100,
            history: 5,
            horizon: 19,
            batch_size: 32,
            steps: 5000,
            seed: 0,
            schedule: ScheduleKind::Cosine,
            optimizer: AdamConfig::default(),
            model: ModelConfig::default(),
            noise_robust: NoiseRobustConfig::default(),
            history_corrupt_n: 0,
            mask_mode: MaskMode::Causal,
        }
    }
}

impl TrainConfig {
    pub fn window(&self) -> usize {
        self.history + 1 + self.horizon
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_level < 2 {
            v.push(format!("train.max_level: must be >= 2, got {}", self.max_level));
        }
        if self.noise_robust.k_star > self.max_level {
            v.push(format!(
                "train.noise_robust.k_star: must lie in [0, {}], got {}",
                self.max_level, self.noise_robust.k_star
            ));
        }
        if !(self.noise_robust.level >= 0.0) {
            v.push(format!("train.noise_robust.level: must be >= 0, got {}", self.noise_robust.level));
        }
        if self.history_corrupt_n > self.max_level {
            v.push(format!(
                "train.history_corrupt_n: must be <= {}, got {}",
                self.max_level, self.history_corrupt_n
            ));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size: must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            v.push(format!("train.optimizer: need lr >= 0, betas in [0, 1), eps > 0, got {o:?}"));
        }
        if let Err(e) = self.model.hyper(Layout::default(), self.history, self.horizon).validate() {
            v.push(format!("train.model: {e}"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

/// Independent uniform levels on `{0, .., K}` for every window slot.
pub fn sample_noise_levels(rng: &mut impl Rng, history: usize, horizon: usize, max_level: usize) -> Vec<usize> {
    (0..history + 1 + horizon)
        .map(|_| rng.random_range(0..=max_level))
        .collect()
}

/// Past frames fully observed, the current frame through the head and visible
/// wrists, future frames unobserved.
pub fn build_training_masks(layout: &Layout, history: usize, horizon: usize, vis_left: bool, vis_right: bool) -> Vec<VisibilityMask> {
    let mut masks = vec![layout.full_mask(); history];
    masks.push(layout.observation_mask(vis_left, vis_right));
    masks.extend(std::iter::repeat_n(layout.empty_mask(), horizon));
    masks
}

fn inject_slices(x0: &[f64], x_k: &[f64], b: &VisibilityMask) -> Result<Vec<f64>> {
    check_dim(x0.len(), x_k.len())?;
    check_dim(x0.len(), b.dim())?;
    Ok(x0
        .iter()
        .zip(x_k)
        .zip(&b.bits)
        .map(|((a, x), &m)| if m { *a } else { *x })
        .collect())
}

/// `b ⊙ x0 + (1 - b) ⊙ x_k`, evaluated as a selection so anchored components
/// are copied bit-exactly.
pub fn causal_inject(x0: &MotionFrame, x_k: &MotionFrame, b: &VisibilityMask) -> Result<MotionFrame> {
    inject_slices(&x0.pose, &x_k.pose, b).map(MotionFrame::new)
}

/// Anchors with a noisy observation only while `k >= k_star`.
pub fn noise_robust_inject(anchor_noisy: &MotionFrame, x_k: &MotionFrame, b: &VisibilityMask, k: usize, k_star: usize) -> Result<MotionFrame> {
    check_dim(anchor_noisy.dim(), x_k.dim())?;
    check_dim(x_k.dim(), b.dim())?;
    if k >= k_star {
        causal_inject(anchor_noisy, x_k, b)
    } else {
        Ok(x_k.clone())
    }
}

/// Canonical training motion plus what is needed to simulate observations.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub canonical: Vec<Vec<f64>>,
    pub heads: Vec<HeadPose>,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub layout: Layout,
    pub normalizer: Normalizer,
    /// Field of view and dropout used to resample visibility per window.
    pub observe: SynthConfig,
    pub sequences: Vec<TrainSequence>,
}

impl TrainingSet {
    pub fn from_sequences(seqs: &[Sequence], observe: &SynthConfig) -> Result<Self> {
        let layout = seqs.first().map(|s| s.layout).unwrap_or_else(|| observe.layout());
        let mut sequences = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.layout != layout {
                return Err(Error::ShapeMismatch("training sequences use different layouts".into()));
            }
            sequences.push(TrainSequence {
                canonical: s.canonical_frames()?.into_iter().map(|f| f.pose).collect(),
                heads: s.heads.clone(),
            });
        }
        let normalizer = Normalizer::fit(
            sequences
                .iter()
                .flat_map(|s| s.canonical.iter())
                .map(|p| MotionFrame::new(p.clone()))
                .collect::<Vec<_>>()
                .iter(),
            layout.dim(),
        );
        Ok(TrainingSet {
            layout,
            normalizer,
            observe: observe.clone(),
            sequences,
        })
    }

    /// Observation of frame `i` of sequence `s` with freshly drawn visibility.
    pub fn observe(&self, s: usize, i: usize, rng: &mut impl Rng) -> ControlSignal {
        let seq = &self.sequences[s];
        let head = seq.heads[i];
        let mut wrist = |j: usize| {
            let local = Layout::joint(&seq.canonical[i], j);
            let vis = local_visible(local, &self.observe, rng);
            vis.then(|| head.to_world(local))
        };
        let wrist_left = wrist(Layout::WRIST_LEFT);
        let wrist_right = wrist(Layout::WRIST_RIGHT);
        ControlSignal {
            head,
            wrist_left,
            wrist_right,
        }
    }
}

/// Flattened network inputs and targets for a batch of windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub size: usize,
    pub input: Vec<f32>,
    pub levels: Vec<usize>,
    pub target: Vec<f32>,
}

/// One training window in normalized canonical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub injected: Vec<Vec<f64>>,
    pub masks: Vec<VisibilityMask>,
    pub levels: Vec<usize>,
    pub target: Vec<Vec<f64>>,
}

/// Draws a window position, levels, visibility and noise, then applies the
/// configured injection.
pub fn sample_window(set: &TrainingSet, cfg: &TrainConfig, sched: &DiffusionSchedule, rng: &mut impl Rng) -> Result<TrainWindow> {
    let n = cfg.window();
    let (h, f) = (cfg.history, cfg.horizon);
    let d = set.layout.dim();
    let si = rng.random_range(0..set.sequences.len());
    let len = set.sequences[si].canonical.len();
    if len < n {
        return Err(Error::TooShort { need: n, got: len });
    }
    let start = rng.random_range(0..=len - n);
    let mut levels = match cfg.mask_mode {
        MaskMode::Causal => sample_noise_levels(rng, h, f, cfg.max_level),
        MaskMode::Offline => vec![rng.random_range(0..=cfg.max_level); n],
    };
    let nr = cfg.noise_robust;
    let mut injected = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let fi = start + i;
        let x0 = MotionFrame::new(set.normalizer.normalize(&set.sequences[si].canonical[fi]));
        let observed = cfg.mask_mode == MaskMode::Offline || i == h;
        let is_history = cfg.mask_mode == MaskMode::Causal && i < h;
        let mut anchor = x0.clone();
        let mask = if is_history {
            if cfg.history_corrupt_n > 0 {
                levels[i] = cfg.history_corrupt_n;
                anchor = MotionFrame::new(sched.forward_corrupt(&x0.pose, levels[i], &normal_vec(rng, d))?);
            }
            set.layout.full_mask()
        } else if observed {
            let mut obs = set.observe(si, fi, rng);
            if nr.enabled {
                obs = corrupt_observations(&obs, nr.level, rng);
            }
            let (pose, mask) = obs.canonical_anchor(&set.layout)?;
            anchor = MotionFrame::new(set.normalizer.normalize(&pose.pose));
            mask
        } else {
            set.layout.empty_mask()
        };
        let x_k = MotionFrame::new(sched.forward_corrupt(&x0.pose, levels[i], &normal_vec(rng, d))?);
        let value = if observed && nr.enabled {
            noise_robust_inject(&anchor, &x_k, &mask, levels[i], nr.k_star)?
        } else {
            causal_inject(&anchor, &x_k, &mask)?
        };
        injected.push(value.pose);
        masks.push(mask);
        target.push(x0.pose);
    }
    Ok(TrainWindow {
        injected,
        masks,
        levels,
        target,
    })
}

impl TrainBatch {
    pub fn push(&mut self, w: &TrainWindow) {
        for (x, m) in w.injected.iter().zip(&w.masks) {
            self.input.extend(x.iter().map(|&v| v as f32));
            self.input.extend(m.bits.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
        self.levels.extend_from_slice(&w.levels);
        for t in &w.target {
            self.target.extend(t.iter().map(|&v| v as f32));
        }
        self.size += 1;
    }
}

pub fn sample_batch(set: &TrainingSet, cfg: &TrainConfig, sched: &DiffusionSchedule, rng: &mut impl Rng) -> Result<TrainBatch> {
    let mut batch = TrainBatch::default();
    for _ in 0..cfg.batch_size {
        batch.push(&sample_window(set, cfg, sched, rng)?);
    }
    Ok(batch)
}

/// One optimizer update on `batch`; returns the batch loss before the update.
pub fn train_step(net: &mut Transformer<f32>, adam: &mut Adam<f32>, batch: &TrainBatch, step: usize) -> Result<f64> {
    let b = Batch {
        size: batch.size,
        input: &batch.input,
        levels: &batch.levels,
        context: None,
    };
    let (loss, grads) = net.loss_and_grad(&b, &batch.target);
    if !loss.is_finite() || !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::Divergence { step });
    }
    adam.update(&mut net.params, &grads);
    Ok(loss as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_s: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    set: TrainingSet,
    sched: DiffusionSchedule,
    net: Transformer<f32>,
    adam: Adam<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, set: TrainingSet) -> Result<Self> {
        cfg.validate()?;
        if set.sequences.is_empty() {
            return Err(Error::InvalidConfig(vec!["train: empty training set".into()]));
        }
        let sched = make_schedule(cfg.max_level, cfg.schedule)?;
        let init_seed = substream(cfg.seed, domain::MODEL_INIT, 0).next_u64();
        let model = DenoiserModel::new(
            &cfg.model,
            set.layout,
            cfg.history,
            cfg.horizon,
            cfg.max_level,
            set.normalizer.clone(),
            init_seed,
        )?;
        let net = model.into_net();
        let adam = Adam::new(cfg.optimizer, net.num_params());
        Ok(Trainer {
            cfg,
            set,
            sched,
            net,
            adam,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.set
    }

    pub fn net(&self) -> &Transformer<f32> {
        &self.net
    }

    /// Batch for step `step`, drawn from its own stream.
    pub fn batch_for(&self, step: usize) -> Result<TrainBatch> {
        let mut rng = substream(self.cfg.seed, domain::TRAIN_DATA, step as u64);
        sample_batch(&self.set, &self.cfg, &self.sched, &mut rng)
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batch_for(self.step)?;
        let loss = train_step(&mut self.net, &mut self.adam, &batch, self.step)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining configured steps, reporting each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let t0 = Instant::now();
        let mut log = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let step = self.step;
            let loss = self.step()?;
            let rec = StepRecord {
                step,
                loss,
                wall_s: t0.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    pub fn into_model(self) -> Result<DenoiserModel> {
        DenoiserModel::from_net(
            self.net,
            self.set.layout,
            self.cfg.history,
            self.cfg.horizon,
            self.cfg.max_level,
            self.set.normalizer,
        )
    }
}

pub fn write_log_csv(path: &Path, log: &[StepRecord]) -> Result<()> {
    let rows: Vec<[String; 3]> = log
        .iter()
        .map(|r| [r.step.to_string(), r.loss.to_string(), format!("{:.6}", r.wall_s)])
        .collect();
    crate::io::write_csv(path, &["step", "loss", "wallclock_s"], &rows)
}

/// Means of consecutive non-overlapping spans of `span` losses.
pub fn span_means(log: &[StepRecord], span: usize) -> Vec<f64> {
    log.chunks_exact(span)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / span as f64)
        .collect()
}
