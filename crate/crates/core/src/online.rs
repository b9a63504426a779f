//! Streaming reconstruction: a rolling window of latents whose levels grow
//! with temporal distance. Each tick shifts the window, anchors history and
//! the new observation, and refines every frame by one level step so the
//! current frame reaches level 0 and is emitted.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Normalizer};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::motion::{decanonicalize, AugmentedWindow, ControlSignal, Layout, MotionFrame, VisibilityMask};
use crate::rng::{domain, normal_vec, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub history: usize,
    pub horizon: usize,
    pub max_level: usize,
    /// Denoiser evaluations per tick; each covers `Δk / refine_passes` levels.
    pub refine_passes: usize,
    /// Stabilization level `n` re-injected into clean history before refining.
    pub stab_n: usize,
    pub noise_robust: bool,
    pub k_star: usize,
    /// Stochasticity of the reverse jumps; 0 is deterministic.
    pub sampler_eta: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            history: 5,
            horizon: 19,
            max_level: 100,
            refine_passes: 1,
            stab_n: 2,
            noise_robust: false,
            k_star: 3,
            sampler_eta: 0.0,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn window(&self) -> usize {
        self.history + 1 + self.horizon
    }

    /// Level step per tick, `K / (f + 1)`.
    pub fn delta_k(&self) -> Result<usize> {
        let levels = future_noise_schedule(self.horizon, self.max_level)?;
        Ok(levels.get(1).copied().unwrap_or(self.max_level))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self.delta_k() {
            Err(e) => v.push(format!("engine.horizon: {e}")),
            Ok(dk) => {
                if self.refine_passes == 0 || dk % self.refine_passes != 0 {
                    v.push(format!(
                        "engine.refine_passes: must be a positive divisor of the level step {dk}, got {}",
                        self.refine_passes
                    ));
                }
            }
        }
        if self.stab_n > self.max_level {
            v.push(format!("engine.stab_n: must be <= {}, got {}", self.max_level, self.stab_n));
        }
        if self.k_star > self.max_level {
            v.push(format!("engine.k_star: must be <= {}, got {}", self.max_level, self.k_star));
        }
        if !(self.sampler_eta >= 0.0 && self.sampler_eta <= 1.0) {
            v.push(format!("engine.sampler_eta: must lie in [0, 1], got {}", self.sampler_eta));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            return Ok(());
        }
        // A bad horizon keeps its own error kind.
        if let Err(e @ Error::InvalidHorizon(_)) = self.delta_k() {
            return Err(e);
        }
        Err(Error::InvalidConfig(v))
    }

    /// Levels every completed tick leaves behind: `h + 1` zeros, then the
    /// future schedule without its leading zero.
    pub fn canonical_levels(&self) -> Result<Vec<usize>> {
        let future = future_noise_schedule(self.horizon, self.max_level)?;
        let mut levels = vec![0; self.history];
        levels.extend(future);
        Ok(levels)
    }
}

/// `[0, Δk, 2Δk, .., fΔk]` with `Δk = K / (f + 1)`; requires `(f + 1) | K`.
pub fn future_noise_schedule(horizon: usize, max_level: usize) -> Result<Vec<usize>> {
    let slots = horizon + 1;
    if max_level == 0 || max_level % slots != 0 {
        return Err(Error::InvalidHorizon(format!(
            "f + 1 = {slots} must divide K = {max_level}"
        )));
    }
    let dk = max_level / slots;
    Ok((0..slots).map(|i| i * dk).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickStats {
    pub t: i64,
    pub evals: u64,
    pub wall_s: f64,
}

/// One stream's rolling state. Latents are normalized canonical poses.
pub struct StreamEngine<D> {
    cfg: EngineConfig,
    denoiser: D,
    sched: DiffusionSchedule,
    layout: Layout,
    canonical: Vec<usize>,
    latents: Vec<Vec<f64>>,
    levels: Vec<usize>,
    /// Emitted frames for the `h` most recent past offsets, oldest first.
    anchors: VecDeque<Vec<f64>>,
    t: i64,
    evals: u64,
}

/// Current-frame anchor in normalized canonical coordinates.
struct Anchor {
    pose: Vec<f64>,
    mask: VisibilityMask,
}

impl<D: Denoiser> StreamEngine<D> {
    /// Draws the initial buffer, denoises it to the canonical schedule with
    /// the first observation injected, and returns the first emitted frame.
    pub fn init(denoiser: D, sched: DiffusionSchedule, cfg: EngineConfig, first: &ControlSignal) -> Result<(Self, MotionFrame)> {
        cfg.validate()?;
        if sched.max_level() != cfg.max_level {
            return Err(Error::InvalidConfig(vec![format!(
                "engine.max_level: schedule has K = {}, engine configured with {}",
                sched.max_level(),
                cfg.max_level
            )]));
        }
        if denoiser.history() != cfg.history || denoiser.horizon() != cfg.horizon {
            return Err(Error::ShapeMismatch(format!(
                "model window (h={}, f={}) differs from engine (h={}, f={})",
                denoiser.history(),
                denoiser.horizon(),
                cfg.history,
                cfg.horizon
            )));
        }
        let layout = denoiser.layout();
        let d = layout.dim();
        let n = cfg.window();
        let mut rng = substream(cfg.seed, domain::ENGINE_INIT, 0);
        let mut engine = StreamEngine {
            canonical: cfg.canonical_levels()?,
            cfg,
            denoiser,
            sched,
            layout,
            latents: (0..n).map(|_| normal_vec(&mut rng, d)).collect(),
            levels: vec![cfg.max_level; n],
            anchors: VecDeque::with_capacity(cfg.history + 1),
            t: 0,
            evals: 0,
        };
        let anchor = engine.anchor(first)?;
        let sub = engine.cfg.delta_k()? / engine.cfg.refine_passes;
        let target = engine.canonical.clone();
        while engine.levels != target {
            engine.inject_current(&anchor);
            let masks = engine.masks(&anchor);
            let x0 = engine.predict(&engine.latents.clone(), &engine.levels.clone(), &masks, None)?;
            for i in 0..n {
                if engine.levels[i] > target[i] {
                    let to = engine.levels[i].saturating_sub(sub).max(target[i]);
                    engine.jump(i, &x0[i], to, &mut rng)?;
                }
            }
        }
        engine.inject_current(&anchor);
        // The generated prefix stands in for history that was never observed.
        let h = engine.cfg.history;
        engine.anchors.extend(engine.latents[..h].iter().cloned());
        let out = engine.emit(first, &anchor)?;
        Ok((engine, out))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    /// Absolute index of the most recently emitted frame.
    pub fn time(&self) -> i64 {
        self.t
    }

    pub fn evals(&self) -> u64 {
        self.evals
    }

    pub fn denoiser(&self) -> &D {
        &self.denoiser
    }

    fn anchor(&self, obs: &ControlSignal) -> Result<Anchor> {
        let (pose, mask) = obs.canonical_anchor(&self.layout)?;
        Ok(Anchor {
            pose: self.denoiser.normalizer().normalize(&pose.pose),
            mask,
        })
    }

    fn gate_open(&self, level: usize) -> bool {
        !self.cfg.noise_robust || level >= self.cfg.k_star
    }

    fn inject_current(&mut self, anchor: &Anchor) {
        let h = self.cfg.history;
        if !self.gate_open(self.levels[h]) {
            return;
        }
        for (i, &bit) in anchor.mask.bits.iter().enumerate() {
            if bit {
                self.latents[h][i] = anchor.pose[i];
            }
        }
    }

    /// Masks fed alongside the latents: history anchored once it exists, the
    /// current frame while its gate is open, the future never.
    fn masks(&self, anchor: &Anchor) -> Vec<VisibilityMask> {
        let h = self.cfg.history;
        (0..self.cfg.window())
            .map(|i| {
                if i < h && !self.anchors.is_empty() {
                    self.layout.full_mask()
                } else if i == h && self.gate_open(self.levels[h]) {
                    anchor.mask.clone()
                } else {
                    self.layout.empty_mask()
                }
            })
            .collect()
    }

    fn predict(&mut self, latents: &[Vec<f64>], levels: &[usize], masks: &[VisibilityMask], context: Option<&[Vec<f64>]>) -> Result<Vec<Vec<f64>>> {
        let rows = latents
            .iter()
            .zip(masks)
            .map(|(x, m)| {
                let mut row = Vec::with_capacity(2 * x.len());
                row.extend_from_slice(x);
                row.extend(m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        let aug = AugmentedWindow {
            rows,
            levels: levels.to_vec(),
            context: context.map(|c| c.to_vec()),
        };
        self.evals += 1;
        self.denoiser.predict_x0(&aug, self.t)
    }

    fn jump(&mut self, i: usize, x0: &[f64], to: usize, rng: &mut impl Rng) -> Result<()> {
        let from = self.levels[i];
        let next = if self.cfg.sampler_eta > 0.0 && to > 0 {
            let z = normal_vec(rng, x0.len());
            self.sched
                .reverse_jump_eta(&self.latents[i], x0, from, to, self.cfg.sampler_eta, Some(&z))?
        } else {
            self.sched.reverse_jump(&self.latents[i], x0, from, to)?
        };
        self.latents[i] = next;
        self.levels[i] = to;
        Ok(())
    }

    fn emit(&mut self, obs: &ControlSignal, anchor: &Anchor) -> Result<MotionFrame> {
        let h = self.cfg.history;
        let world = to_world(self.denoiser.normalizer(), &self.latents[h], obs, &anchor.mask, self.gate_open(0))?;
        self.anchors.push_back(self.latents[h].clone());
        while self.anchors.len() > h {
            self.anchors.pop_front();
        }
        Ok(world)
    }

    /// Consumes the next observation and emits its reconstructed frame.
    pub fn tick(&mut self, obs: &ControlSignal, context: Option<&[Vec<f64>]>) -> Result<MotionFrame> {
        if self.levels != self.canonical {
            return Err(Error::CorruptEngineState(format!(
                "levels {:?} differ from the schedule {:?}",
                self.levels, self.canonical
            )));
        }
        let n = self.cfg.window();
        let d = self.layout.dim();
        self.t += 1;
        let mut rng = substream(self.cfg.seed, domain::ENGINE_TICK, self.t as u64);

        // Shift: the oldest slot leaves, fresh noise enters at level K.
        self.latents.remove(0);
        self.levels.remove(0);
        self.latents.push(normal_vec(&mut rng, d));
        self.levels.push(self.cfg.max_level);

        let anchor = self.anchor(obs)?;
        let sub = self.cfg.delta_k()? / self.cfg.refine_passes;
        for _ in 0..self.cfg.refine_passes {
            // History is re-anchored on emitted frames, then stabilized.
            for (i, a) in self.anchors.iter().enumerate() {
                self.latents[i].clone_from(a);
            }
            self.inject_current(&anchor);
            let masks = self.masks(&anchor);
            let mut fed = self.latents.clone();
            let mut fed_levels = self.levels.clone();
            let stab = self.cfg.stab_n;
            for i in 0..n {
                if self.levels[i] == 0 && stab > 0 {
                    fed[i] = self.sched.inject_noise(&fed[i], stab, &normal_vec(&mut rng, d))?;
                    fed_levels[i] = stab;
                }
            }
            let x0 = self.predict(&fed, &fed_levels, &masks, context)?;
            for i in 0..n {
                if self.levels[i] > 0 {
                    let to = self.levels[i] - sub;
                    self.jump(i, &x0[i], to, &mut rng)?;
                } else if stab > 0 {
                    // n -> 0 lands on the prediction.
                    self.latents[i] = self.sched.reverse_jump(&fed[i], &x0[i], stab, 0)?;
                }
            }
        }
        self.inject_current(&anchor);
        debug_assert_eq!(self.levels, self.canonical);
        self.emit(obs, &anchor)
    }
}

/// Maps a normalized canonical latent to world space under the observed head.
/// With `anchored`, visible wrists are reported as observed.
fn to_world(norm: &Normalizer, latent: &[f64], obs: &ControlSignal, mask: &VisibilityMask, anchored: bool) -> Result<MotionFrame> {
    let canonical = MotionFrame::new(norm.denormalize(latent));
    let mut world = decanonicalize(&canonical, &obs.head)?;
    if anchored {
        if let (true, Some(w)) = (mask.bits[3 * Layout::WRIST_LEFT], obs.wrist_left) {
            Layout::set_joint(&mut world.pose, Layout::WRIST_LEFT, w);
        }
        if let (true, Some(w)) = (mask.bits[3 * Layout::WRIST_RIGHT], obs.wrist_right) {
            Layout::set_joint(&mut world.pose, Layout::WRIST_RIGHT, w);
        }
    }
    Ok(world)
}

/// Emitted frames with per-tick instrumentation. The first entry covers the
/// bootstrap.
#[derive(Debug, Clone, Default)]
pub struct StreamOutput {
    pub frames: Vec<MotionFrame>,
    pub ticks: Vec<TickStats>,
}

/// Anything that turns one observation into one emitted frame.
pub trait FrameSource {
    fn push(&mut self, obs: &ControlSignal) -> Result<MotionFrame>;
    fn evals(&self) -> u64;
}

/// Lazily initialised [`StreamEngine`]: the first observation bootstraps it.
pub struct OnlineStream<D> {
    pending: Option<(D, DiffusionSchedule, EngineConfig)>,
    engine: Option<StreamEngine<D>>,
}

impl<D: Denoiser> OnlineStream<D> {
    pub fn new(denoiser: D, sched: DiffusionSchedule, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OnlineStream {
            pending: Some((denoiser, sched, cfg)),
            engine: None,
        })
    }

    pub fn engine(&self) -> Option<&StreamEngine<D>> {
        self.engine.as_ref()
    }
}

impl<D: Denoiser> FrameSource for OnlineStream<D> {
    fn push(&mut self, obs: &ControlSignal) -> Result<MotionFrame> {
        match &mut self.engine {
            Some(e) => e.tick(obs, None),
            None => {
                let (d, s, c) = self.pending.take().expect("stream not initialised");
                let (engine, frame) = StreamEngine::init(d, s, c, obs)?;
                self.engine = Some(engine);
                Ok(frame)
            }
        }
    }

    fn evals(&self) -> u64 {
        self.engine.as_ref().map_or(0, |e| e.evals())
    }
}

/// Drives a source over observations, handing each frame to `sink` as it is
/// produced.
pub fn drive<S: FrameSource>(
    source: &mut S,
    obs: impl IntoIterator<Item = ControlSignal>,
    mut sink: impl FnMut(&MotionFrame, &TickStats) -> Result<()>,
) -> Result<()> {
    for (t, o) in obs.into_iter().enumerate() {
        let before = source.evals();
        let t0 = Instant::now();
        let frame = source.push(&o)?;
        let stats = TickStats {
            t: t as i64,
            evals: source.evals() - before,
            wall_s: t0.elapsed().as_secs_f64(),
        };
        sink(&frame, &stats)?;
    }
    Ok(())
}

/// Runs the online engine over a whole observation sequence.
pub fn run_stream<D: Denoiser>(
    denoiser: D,
    sched: DiffusionSchedule,
    cfg: EngineConfig,
    obs: impl IntoIterator<Item = ControlSignal>,
) -> Result<StreamOutput> {
    let mut stream = OnlineStream::new(denoiser, sched, cfg)?;
    collect(&mut stream, obs)
}

pub fn collect<S: FrameSource>(source: &mut S, obs: impl IntoIterator<Item = ControlSignal>) -> Result<StreamOutput> {
    let mut out = StreamOutput::default();
    drive(source, obs, |f, s| {
        out.frames.push(f.clone());
        out.ticks.push(*s);
        Ok(())
    })?;
    Ok(out)
}

/// Compute baseline: every tick denoises a fresh window from pure noise in
/// `f + 1` passes, anchored on previously emitted frames and the current
/// observation.
pub struct ResampleEngine<D> {
    cfg: EngineConfig,
    denoiser: D,
    sched: DiffusionSchedule,
    layout: Layout,
    anchors: VecDeque<Vec<f64>>,
    t: i64,
    evals: u64,
}

impl<D: Denoiser> ResampleEngine<D> {
    pub fn new(denoiser: D, sched: DiffusionSchedule, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if denoiser.history() != cfg.history || denoiser.horizon() != cfg.horizon || sched.max_level() != cfg.max_level {
            return Err(Error::ShapeMismatch("model, schedule and engine disagree on h, f or K".into()));
        }
        Ok(ResampleEngine {
            layout: denoiser.layout(),
            cfg,
            denoiser,
            sched,
            anchors: VecDeque::new(),
            t: 0,
            evals: 0,
        })
    }
}

impl<D: Denoiser> FrameSource for ResampleEngine<D> {
    fn push(&mut self, obs: &ControlSignal) -> Result<MotionFrame> {
        let h = self.cfg.history;
        let n = self.cfg.window();
        let d = self.layout.dim();
        let k = self.cfg.max_level;
        let dk = self.cfg.delta_k()?;
        let mut rng = substream(self.cfg.seed, domain::RESAMPLE, self.t as u64);
        let (pose, obs_mask) = obs.canonical_anchor(&self.layout)?;
        let anchor = self.denoiser.normalizer().normalize(&pose.pose);
        let gate = |level: usize| !self.cfg.noise_robust || level >= self.cfg.k_star;

        // Slot i < h holds offset i - h; the newest anchors fill the last slots.
        let missing = h - self.anchors.len();
        let mut latents: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d)).collect();
        let mut levels = vec![k; n];
        let mut masks = vec![self.layout.empty_mask(); n];
        for (j, a) in self.anchors.iter().enumerate() {
            latents[missing + j].clone_from(a);
            levels[missing + j] = 0;
            masks[missing + j] = self.layout.full_mask();
        }
        let inject = |x: &mut Vec<f64>, level: usize| {
            if gate(level) {
                for (i, &b) in obs_mask.bits.iter().enumerate() {
                    if b {
                        x[i] = anchor[i];
                    }
                }
            }
        };
        for _ in 0..k / dk {
            inject(&mut latents[h], levels[h]);
            masks[h] = if gate(levels[h]) { obs_mask.clone() } else { self.layout.empty_mask() };
            let rows = latents
                .iter()
                .zip(&masks)
                .map(|(x, m)| {
                    let mut row = x.clone();
                    row.extend(m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                    row
                })
                .collect();
            let aug = AugmentedWindow {
                rows,
                levels: levels.clone(),
                context: None,
            };
            self.evals += 1;
            let x0 = self.denoiser.predict_x0(&aug, self.t)?;
            for i in 0..n {
                if levels[i] > 0 {
                    latents[i] = self.sched.reverse_jump(&latents[i], &x0[i], levels[i], levels[i] - dk)?;
                    levels[i] -= dk;
                }
            }
        }
        inject(&mut latents[h], 0);
        let world = to_world(self.denoiser.normalizer(), &latents[h], obs, &obs_mask, gate(0))?;
        self.anchors.push_back(latents[h].clone());
        while self.anchors.len() > h {
            self.anchors.pop_front();
        }
        self.t += 1;
        Ok(world)
    }

    fn evals(&self) -> u64 {
        self.evals
    }
}

impl<D: Denoiser> FrameSource for StreamEngine<D> {
    fn push(&mut self, obs: &ControlSignal) -> Result<MotionFrame> {
        self.tick(obs, None)
    }

    fn evals(&self) -> u64 {
        self.evals
    }
}
