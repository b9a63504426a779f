//! Dataset-free toy motion: a head walking along a smooth path, a small
//! articulated body attached to it, and an egocentric observation simulator.
//!
//! Body motion relative to the head is a sum of sinusoids per arm. Interior
//! joints follow fixed linear combinations of the two arm signals, so every
//! joint is a band-limited signal with an analytic jerk bound and the latent
//! joints stay (mostly) recoverable from the wrists.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{canonicalize, wrap_angle, ControlSignal, HeadPose, Layout, MotionFrame};
use crate::rng::{domain, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Frames per sequence.
    pub frames: usize,
    pub frame_rate: f64,
    pub interior_joints: usize,
    /// Harmonics per arm signal.
    pub harmonics: usize,
    /// Arm harmonic frequency band, Hz.
    pub freq_band: [f64; 2],
    /// Per-axis harmonic amplitude band, meters.
    pub amp_band: [f64; 2],
    /// Walking speed band, m/s.
    pub walk_speed: [f64; 2],
    /// Field-of-view half angle around the forward axis, radians.
    pub fov_half_angle: f64,
    /// Probability that a wrist inside the field of view is still dropped.
    pub dropout: f64,
    /// Observation noise level `l` (`l` cm, `l` degrees).
    pub noise_level: f64,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            frames: 200,
            frame_rate: 10.0,
            interior_joints: 4,
            harmonics: 2,
            freq_band: [0.1, 0.5],
            amp_band: [0.01, 0.03],
            walk_speed: [0.4, 1.0],
            fov_half_angle: 0.7,
            dropout: 0.1,
            noise_level: 0.0,
            train_sequences: 2000,
            test_sequences: 200,
        }
    }
}

// Head path: forward-velocity wobble and vertical bob.
const VEL_HARMONICS: usize = 2;
const VEL_AMP_BAND: [f64; 2] = [0.05, 0.15];
const VEL_FREQ_BAND: [f64; 2] = [0.05, 0.2];
const BOB_AMP: f64 = 0.02;
const BOB_FREQ_BAND: [f64; 2] = [1.0, 2.0];
const HEAD_HEIGHT: f64 = 1.6;
const LIMB_TOLERANCE: f64 = 0.2;

impl SynthConfig {
    pub fn layout(&self) -> Layout {
        Layout::new(self.interior_joints)
    }

    /// Every violated constraint, prefixed with its key.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let nyquist = self.frame_rate / 2.0;
        if !(self.frame_rate > 0.0) {
            v.push(format!("synth.frame_rate: must be positive, got {}", self.frame_rate));
        }
        if self.frames == 0 {
            v.push("synth.frames: must be >= 1".into());
        }
        if self.interior_joints > SKELETON.len() {
            v.push(format!(
                "synth.interior_joints: at most {} supported, got {}",
                SKELETON.len(),
                self.interior_joints
            ));
        }
        let [flo, fhi] = self.freq_band;
        if !(flo > 0.0 && flo <= fhi) {
            v.push(format!("synth.freq_band: need 0 < lo <= hi, got {:?}", self.freq_band));
        }
        if !(fhi < nyquist) || !(BOB_FREQ_BAND[1] < nyquist) {
            v.push(format!(
                "synth.freq_band: upper limit {fhi} Hz (and head bob {} Hz) must be below Nyquist {nyquist} Hz",
                BOB_FREQ_BAND[1]
            ));
        }
        let [alo, ahi] = self.amp_band;
        if !(alo >= 0.0 && alo <= ahi && ahi.is_finite()) {
            v.push(format!("synth.amp_band: need 0 <= lo <= hi, got {:?}", self.amp_band));
        }
        let [slo, shi] = self.walk_speed;
        let wobble = VEL_HARMONICS as f64 * VEL_AMP_BAND[1];
        if !(slo > wobble && slo <= shi) {
            v.push(format!(
                "synth.walk_speed: need {wobble} < lo <= hi so heading stays defined, got {:?}",
                self.walk_speed
            ));
        }
        if !(0.0..=PI).contains(&self.fov_half_angle) {
            v.push(format!("synth.fov_half_angle: must lie in [0, pi], got {}", self.fov_half_angle));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            v.push(format!("synth.dropout: must lie in [0, 1], got {}", self.dropout));
        }
        if !(self.noise_level >= 0.0) {
            v.push(format!("synth.noise_level: must be >= 0, got {}", self.noise_level));
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

struct JointDef {
    rest: [f64; 3],
    parent: Option<usize>,
    /// Gains on the (left, right) arm signals.
    coef: [f64; 2],
}

const HEAD_DEF: JointDef = JointDef { rest: [0.0; 3], parent: None, coef: [0.0, 0.0] };

// Interior joints in layout order: chest, pelvis, elbows, knees, ankles.
// Parents refer to layout joint indices (0 head, 1/2 wrists, 3.. interior).
const SKELETON: [JointDef; 8] = [
    JointDef { rest: [0.0, -0.30, -0.05], parent: Some(0), coef: [0.1, 0.1] },
    JointDef { rest: [0.0, -0.75, -0.05], parent: Some(3), coef: [0.05, 0.05] },
    JointDef { rest: [-0.22, -0.40, 0.12], parent: Some(3), coef: [0.5, 0.0] },
    JointDef { rest: [0.22, -0.40, 0.12], parent: Some(3), coef: [0.0, 0.5] },
    JointDef { rest: [-0.10, -1.20, 0.0], parent: Some(4), coef: [0.025, 0.025] },
    JointDef { rest: [0.10, -1.20, 0.0], parent: Some(4), coef: [0.025, 0.025] },
    JointDef { rest: [-0.10, -1.60, -0.05], parent: Some(7), coef: [0.015, 0.015] },
    JointDef { rest: [0.10, -1.60, -0.05], parent: Some(8), coef: [0.015, 0.015] },
];

fn joint_def(layout: &Layout, joint: usize) -> JointDef {
    match joint {
        0 => HEAD_DEF,
        1 | 2 => {
            let side = joint - 1;
            let elbow = 5 + side;
            let parent = if layout.joints() > elbow { elbow } else { 0 };
            let x = if side == 0 { -0.18 } else { 0.18 };
            let mut coef = [0.0; 2];
            coef[side] = 1.0;
            JointDef { rest: [x, -0.30, 0.49], parent: Some(parent), coef }
        }
        j => {
            let d = &SKELETON[j - 3];
            JointDef { rest: d.rest, parent: d.parent, coef: d.coef }
        }
    }
}

/// One sinusoidal component: per-axis amplitude and phase at a shared frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Harmonic {
    pub freq_hz: f64,
    pub amp: [f64; 3],
    pub phase: [f64; 3],
}

impl Harmonic {
    fn omega(&self) -> f64 {
        TAU * self.freq_hz
    }

    fn eval(&self, t: f64) -> [f64; 3] {
        let w = self.omega();
        [0, 1, 2].map(|a| self.amp[a] * (w * t + self.phase[a]).sin())
    }
}

/// Generating parameters of a sequence's body motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub arms: [Vec<Harmonic>; 2],
    /// Per joint: rest offset in the head frame and arm gains.
    pub rest: Vec<[f64; 3]>,
    pub coef: Vec<[f64; 2]>,
    pub parents: Vec<Option<usize>>,
}

impl Spectrum {
    /// Head-frame perturbation of `joint` at time `t` seconds.
    pub fn perturbation(&self, joint: usize, t: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (side, arm) in self.arms.iter().enumerate() {
            let c = self.coef[joint][side];
            if c == 0.0 {
                continue;
            }
            for h in arm {
                let v = h.eval(t);
                for a in 0..3 {
                    out[a] += c * v[a];
                }
            }
        }
        out
    }

    pub fn canonical_joint(&self, joint: usize, t: f64) -> [f64; 3] {
        let p = self.perturbation(joint, t);
        [0, 1, 2].map(|a| self.rest[joint][a] + p[a])
    }

    /// Upper bound on `|d^3/dt^3|` of one axis of a joint's head-frame position.
    pub fn jerk_bound(&self, joint: usize, axis: usize) -> f64 {
        self.arms
            .iter()
            .enumerate()
            .map(|(side, arm)| {
                self.coef[joint][side].abs()
                    * arm.iter().map(|h| h.amp[axis] * h.omega().powi(3)).sum::<f64>()
            })
            .sum()
    }

    /// Worst-case norm of the joint-minus-parent perturbation.
    fn limb_slack(&self, joint: usize, parent: usize) -> f64 {
        self.arms
            .iter()
            .enumerate()
            .map(|(side, arm)| {
                let dc = (self.coef[joint][side] - self.coef[parent][side]).abs();
                let axis_max = [0, 1, 2].map(|a| arm.iter().map(|h| h.amp[a]).sum::<f64>());
                dc * axis_max.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .sum()
    }
}

/// World-frame motion with the head trajectory it is attached to.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub layout: Layout,
    pub frame_rate: f64,
    pub poses: Vec<MotionFrame>,
    pub heads: Vec<HeadPose>,
    /// Present for generated sequences; absent when loaded from disk.
    pub spectrum: Option<Spectrum>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn canonical(&self, i: usize) -> Result<MotionFrame> {
        canonicalize(&self.poses[i], &self.heads[i])
    }

    pub fn canonical_frames(&self) -> Result<Vec<MotionFrame>> {
        (0..self.len()).map(|i| self.canonical(i)).collect()
    }

    /// Distance from each joint to its parent divided by the rest distance.
    pub fn limb_ratios(&self, i: usize) -> Vec<f64> {
        let Some(spec) = &self.spectrum else {
            return Vec::new();
        };
        let pose = &self.poses[i].pose;
        (0..self.layout.joints())
            .filter_map(|j| spec.parents[j].map(|p| (j, p)))
            .map(|(j, p)| {
                let d = dist(Layout::joint(pose, j), Layout::joint(pose, p));
                d / dist(spec.rest[j], spec.rest[p])
            })
            .collect()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn uniform(rng: &mut impl Rng, band: [f64; 2]) -> f64 {
    if band[1] > band[0] {
        rng.random_range(band[0]..band[1])
    } else {
        band[0]
    }
}

fn sample_spectrum(cfg: &SynthConfig, rng: &mut impl Rng) -> Spectrum {
    let layout = cfg.layout();
    let defs: Vec<JointDef> = (0..layout.joints()).map(|j| joint_def(&layout, j)).collect();
    let mut arms: [Vec<Harmonic>; 2] = [0, 1].map(|_| {
        (0..cfg.harmonics)
            .map(|_| Harmonic {
                freq_hz: uniform(rng, cfg.freq_band),
                amp: [0, 1, 2].map(|_| uniform(rng, cfg.amp_band)),
                phase: [0, 1, 2].map(|_| rng.random_range(0.0..TAU)),
            })
            .collect()
    });
    let mut spec = Spectrum {
        arms: arms.clone(),
        rest: defs.iter().map(|d| d.rest).collect(),
        coef: defs.iter().map(|d| d.coef).collect(),
        parents: defs.iter().map(|d| d.parent).collect(),
    };
    // Shrink amplitudes until no limb can leave its length tolerance.
    let mut scale: f64 = 1.0;
    for j in 0..layout.joints() {
        if let Some(p) = spec.parents[j] {
            let slack = spec.limb_slack(j, p);
            let allowed = 0.95 * LIMB_TOLERANCE * dist(spec.rest[j], spec.rest[p]);
            if slack > allowed {
                scale = scale.min(allowed / slack);
            }
        }
    }
    if scale < 1.0 {
        for arm in arms.iter_mut() {
            for h in arm.iter_mut() {
                h.amp = h.amp.map(|a| a * scale);
            }
        }
        spec.arms = arms;
    }
    spec
}

struct HeadPath {
    origin: [f64; 2],
    v0: [f64; 2],
    wobble: Vec<(f64, f64, f64, [f64; 2])>,
    bob_freq: f64,
    bob_phase: f64,
}

impl HeadPath {
    fn sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let speed = uniform(rng, cfg.walk_speed);
        let dir = rng.random_range(-PI..PI);
        let wobble = (0..VEL_HARMONICS)
            .map(|_| {
                let a = rng.random_range(-PI..PI);
                (
                    uniform(rng, VEL_AMP_BAND),
                    uniform(rng, VEL_FREQ_BAND),
                    rng.random_range(0.0..TAU),
                    [a.sin(), a.cos()],
                )
            })
            .collect();
        HeadPath {
            origin: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
            v0: [speed * dir.sin(), speed * dir.cos()],
            wobble,
            bob_freq: uniform(rng, BOB_FREQ_BAND),
            bob_phase: rng.random_range(0.0..TAU),
        }
    }

    fn velocity(&self, t: f64) -> [f64; 2] {
        let mut v = self.v0;
        for &(amp, freq, phase, d) in &self.wobble {
            let s = amp * (TAU * freq * t + phase).sin();
            v[0] += s * d[0];
            v[1] += s * d[1];
        }
        v
    }

    /// Closed-form integral of the velocity.
    fn pose(&self, t: f64) -> HeadPose {
        let mut xz = [self.origin[0] + self.v0[0] * t, self.origin[1] + self.v0[1] * t];
        for &(amp, freq, phase, d) in &self.wobble {
            let w = TAU * freq;
            let s = amp / w * (phase.cos() - (w * t + phase).cos());
            xz[0] += s * d[0];
            xz[1] += s * d[1];
        }
        let y = HEAD_HEIGHT + BOB_AMP * (TAU * self.bob_freq * t + self.bob_phase).sin();
        let v = self.velocity(t);
        HeadPose::new([xz[0], y, xz[1]], wrap_angle(v[0].atan2(v[1])))
    }
}

/// Generates one world-frame sequence.
pub fn generate_sequence(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Sequence> {
    cfg.validate()?;
    let layout = cfg.layout();
    let spectrum = sample_spectrum(cfg, rng);
    let path = HeadPath::sample(cfg, rng);
    let mut poses = Vec::with_capacity(cfg.frames);
    let mut heads = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let t = i as f64 / cfg.frame_rate;
        let head = path.pose(t);
        let mut pose = vec![0.0; layout.dim()];
        Layout::set_joint(&mut pose, Layout::HEAD, head.position);
        for j in 1..layout.joints() {
            Layout::set_joint(&mut pose, j, head.to_world(spectrum.canonical_joint(j, t)));
        }
        poses.push(MotionFrame::new(pose));
        heads.push(head);
    }
    let seq = Sequence {
        layout,
        frame_rate: cfg.frame_rate,
        poses,
        heads,
        spectrum: Some(spectrum),
    };
    for i in 0..seq.len() {
        let bad = seq
            .limb_ratios(i)
            .into_iter()
            .find(|r| (r - 1.0).abs() > LIMB_TOLERANCE);
        assert!(bad.is_none(), "limb length constraint violated at frame {i}: {bad:?}");
    }
    Ok(seq)
}

/// Train and test splits generated from independent per-sequence streams.
pub fn generate_split(cfg: &SynthConfig) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    cfg.validate()?;
    let make = |dom: u64, n: usize| {
        (0..n)
            .map(|i| generate_sequence(cfg, &mut substream(cfg.seed, dom, i as u64)))
            .collect::<Result<Vec<_>>>()
    };
    Ok((
        make(domain::SYNTH_TRAIN, cfg.train_sequences)?,
        make(domain::SYNTH_TEST, cfg.test_sequences)?,
    ))
}

/// Angle between a head-frame point and the forward (`+z`) axis.
pub fn off_axis_angle(local: [f64; 3]) -> f64 {
    let lateral = (local[0] * local[0] + local[1] * local[1]).sqrt();
    lateral.atan2(local[2])
}

/// Whether a wrist is seen at this frame: inside the field of view and not
/// dropped. Always consumes exactly one uniform draw.
pub fn wrist_visible(head: &HeadPose, wrist: [f64; 3], cfg: &SynthConfig, rng: &mut impl Rng) -> bool {
    local_visible(head.to_local(wrist), cfg, rng)
}

/// [`wrist_visible`] for a point already in the head frame.
pub fn local_visible(local: [f64; 3], cfg: &SynthConfig, rng: &mut impl Rng) -> bool {
    let keep = rng.random::<f64>() >= cfg.dropout;
    off_axis_angle(local) < cfg.fov_half_angle && keep
}

pub fn observe_frame(pose_world: &MotionFrame, head: &HeadPose, cfg: &SynthConfig, rng: &mut impl Rng) -> ControlSignal {
    let wl = Layout::joint(&pose_world.pose, Layout::WRIST_LEFT);
    let wr = Layout::joint(&pose_world.pose, Layout::WRIST_RIGHT);
    let vis_l = wrist_visible(head, wl, cfg, rng);
    let vis_r = wrist_visible(head, wr, cfg, rng);
    ControlSignal {
        head: *head,
        wrist_left: vis_l.then_some(wl),
        wrist_right: vis_r.then_some(wr),
    }
}

/// Head pose copied exactly; wrists reported only when visible.
pub fn extract_observations(seq: &Sequence, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<ControlSignal> {
    seq.poses
        .iter()
        .zip(&seq.heads)
        .map(|(pose, head)| observe_frame(pose, head, cfg, rng))
        .collect()
}

/// Adds zero-mean Gaussian noise: `l` cm per translational axis and `l`
/// degrees on the heading. Hidden wrists stay hidden.
pub fn corrupt_observations(c: &ControlSignal, level: f64, rng: &mut impl Rng) -> ControlSignal {
    if level == 0.0 {
        return *c;
    }
    let trans = Normal::new(0.0, 0.01 * level).unwrap();
    let rot = Normal::new(0.0, level.to_radians()).unwrap();
    let mut jitter = |p: [f64; 3]| p.map(|v| v + trans.sample(rng));
    let position = jitter(c.head.position);
    let wl = jitter(c.wrist_left.unwrap_or_default());
    let wr = jitter(c.wrist_right.unwrap_or_default());
    let yaw = wrap_angle(c.head.yaw + rot.sample(rng));
    ControlSignal {
        head: HeadPose::new(position, yaw),
        wrist_left: c.wrist_left.map(|_| wl),
        wrist_right: c.wrist_right.map(|_| wr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_amplitude_means_rigid_body() {
        let cfg = SynthConfig { amp_band: [0.0, 0.0], frames: 50, ..Default::default() };
        let seq = generate_sequence(&cfg, &mut rng(1)).unwrap();
        let first = seq.canonical(0).unwrap();
        for i in 1..seq.len() {
            let c = seq.canonical(i).unwrap();
            for (a, b) in c.pose.iter().zip(&first.pose) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { frames: 100, ..Default::default() };
        let a = generate_sequence(&cfg, &mut rng(5)).unwrap();
        let b = generate_sequence(&cfg, &mut rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_head_is_exactly_zero() {
        let seq = generate_sequence(&SynthConfig::default(), &mut rng(2)).unwrap();
        for i in 0..seq.len() {
            let c = seq.canonical(i).unwrap();
            assert!(c.pose[..3].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn nyquist_violation_is_an_error() {
        let cfg = SynthConfig { freq_band: [0.1, 5.0], ..Default::default() };
        let err = generate_sequence(&cfg, &mut rng(0)).unwrap_err();
        assert!(err.to_string().contains("Nyquist"));
    }

    #[test]
    fn third_difference_respects_analytic_bound() {
        let cfg = SynthConfig { frames: 2000, ..Default::default() };
        let seq = generate_sequence(&cfg, &mut rng(3)).unwrap();
        let spec = seq.spectrum.as_ref().unwrap();
        let canon = seq.canonical_frames().unwrap();
        let fps3 = cfg.frame_rate.powi(3);
        for j in 0..seq.layout.joints() {
            for a in 0..3 {
                let c = 3 * j + a;
                let max = canon
                    .windows(4)
                    .map(|w| (w[3].pose[c] - 3.0 * w[2].pose[c] + 3.0 * w[1].pose[c] - w[0].pose[c]).abs() * fps3)
                    .fold(0.0, f64::max);
                let bound = spec.jerk_bound(j, a);
                assert!(max <= bound + 1e-9, "joint {j} axis {a}: {max} > {bound}");
            }
        }
    }

    #[test]
    fn limb_lengths_hold_even_for_large_amplitudes() {
        let cfg = SynthConfig { amp_band: [0.1, 0.2], frames: 300, ..Default::default() };
        let seq = generate_sequence(&cfg, &mut rng(4)).unwrap();
        for i in 0..seq.len() {
            assert!(seq.limb_ratios(i).iter().all(|r| (r - 1.0).abs() <= LIMB_TOLERANCE));
        }
    }

    #[test]
    fn distinct_seeds_are_weakly_correlated() {
        let cfg = SynthConfig { frames: 400, ..Default::default() };
        let a = generate_sequence(&cfg, &mut rng(10)).unwrap();
        let b = generate_sequence(&cfg, &mut rng(11)).unwrap();
        let signal = |s: &Sequence| -> Vec<f64> {
            let c = s.canonical_frames().unwrap();
            let n = c.len() as f64;
            (3..s.layout.dim())
                .flat_map(|k| {
                    let mean = c.iter().map(|f| f.pose[k]).sum::<f64>() / n;
                    c.iter().map(move |f| f.pose[k] - mean).collect::<Vec<_>>()
                })
                .collect()
        };
        let (x, y) = (signal(&a), signal(&b));
        let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
        let ncc = dot / (x.iter().map(|v| v * v).sum::<f64>() * y.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(ncc.abs() < 0.5, "ncc {ncc}");
    }

    #[test]
    fn full_and_empty_field_of_view() {
        let base = SynthConfig { frames: 300, dropout: 0.0, ..Default::default() };
        let seq = generate_sequence(&base, &mut rng(6)).unwrap();
        let wide = SynthConfig { fov_half_angle: PI, ..base.clone() };
        let obs = extract_observations(&seq, &wide, &mut rng(7));
        assert!(obs.iter().all(|o| o.vis_left() && o.vis_right()));
        let blind = SynthConfig { fov_half_angle: 0.0, ..base };
        let obs = extract_observations(&seq, &blind, &mut rng(7));
        assert!(obs.iter().all(|o| !o.vis_left() && !o.vis_right()));
        for (o, h) in obs.iter().zip(&seq.heads) {
            assert_eq!(o.head, *h);
        }
    }

    #[test]
    fn visibility_rate_matches_geometry_times_keep_probability() {
        // One frame per independently drawn sequence keeps the 10^4 visibility
        // draws independent. Random phases make frame 0 a uniform time sample.
        let cfg = SynthConfig { frames: 1, dropout: 0.1, ..Default::default() };
        let n = 10_000;
        let mut seen = 0usize;
        for s in 0..n {
            let seq = generate_sequence(&cfg, &mut rng(100_000 + s)).unwrap();
            let obs = extract_observations(&seq, &cfg, &mut rng(200_000 + s));
            seen += obs[0].vis_left() as usize;
        }
        // Geometric fraction by rejection sampling over fresh spectra and times.
        let m = 20_000;
        let mut hits = 0usize;
        let mut r = rng(7);
        for _ in 0..m {
            let spec = sample_spectrum(&cfg, &mut r);
            let t = r.random_range(0.0..100.0);
            if off_axis_angle(spec.canonical_joint(Layout::WRIST_LEFT, t)) < cfg.fov_half_angle {
                hits += 1;
            }
        }
        let geo = hits as f64 / m as f64;
        let keep = 1.0 - cfg.dropout;
        let expected = geo * keep;
        let rate = seen as f64 / n as f64;
        let sigma = (expected * (1.0 - expected) / n as f64 + keep * keep * geo * (1.0 - geo) / m as f64).sqrt();
        assert!((rate - expected).abs() < 3.0 * sigma, "rate {rate} expected {expected} sigma {sigma}");
        assert!(geo > 0.2 && geo < 1.0, "wrists should leave the field of view at times: {geo}");
    }

    #[test]
    fn corruption_noise_levels() {
        let c = ControlSignal {
            head: HeadPose::new([1.0, 1.6, 2.0], 0.5),
            wrist_left: Some([0.5, 1.2, 2.3]),
            wrist_right: None,
        };
        assert_eq!(corrupt_observations(&c, 0.0, &mut rng(0)), c);
        let mut r = rng(9);
        let n = 100_000;
        let (mut sx, mut sxx, mut sy, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let o = corrupt_observations(&c, 2.0, &mut r);
            assert!(o.wrist_right.is_none() && o.vis_left());
            let dx = o.wrist_left.unwrap()[0] - 0.5;
            let dy = wrap_angle(o.head.yaw - 0.5);
            sx += dx;
            sxx += dx * dx;
            sy += dy;
            syy += dy * dy;
        }
        let nf = n as f64;
        let sd_t = (sxx / nf - (sx / nf).powi(2)).sqrt();
        let sd_r = (syy / nf - (sy / nf).powi(2)).sqrt();
        // Std of a sample std is sigma / sqrt(2(N-1)).
        let tol = |s: f64| 3.0 * s / (2.0 * (nf - 1.0)).sqrt();
        assert!((sd_t - 0.02).abs() < tol(0.02), "translation std {sd_t}");
        let yaw_sd = 2.0f64.to_radians();
        assert!((sd_r - yaw_sd).abs() < tol(yaw_sd), "yaw std {sd_r}");
    }

    #[test]
    fn split_is_reproducible_and_disjoint() {
        let cfg = SynthConfig { frames: 20, train_sequences: 3, test_sequences: 2, ..Default::default() };
        let (tr, te) = generate_split(&cfg).unwrap();
        assert_eq!((tr.len(), te.len()), (3, 2));
        assert_eq!(generate_split(&cfg).unwrap().0, tr);
        assert_ne!(tr[0], te[0]);
    }
}
