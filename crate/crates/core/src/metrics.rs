//! Reconstruction and smoothness metrics, plus a black-box causality probe.
//!
//! Jerk is the third finite difference of joint positions scaled by
//! `frame_rate^3`. Per frame we take the mean over joints of its magnitude;
//! peak jerk (PJ) is the maximum of that trace and the area under it (AUJ) is
//! its sum times the frame period.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{ControlSignal, Layout, MotionFrame};
use crate::online::FrameSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointSubset {
    All,
    Head,
    Wrists,
}

impl JointSubset {
    fn joints(&self, layout_joints: usize) -> Vec<usize> {
        match self {
            JointSubset::All => (0..layout_joints).collect(),
            JointSubset::Head => vec![Layout::HEAD],
            JointSubset::Wrists => vec![Layout::WRIST_LEFT, Layout::WRIST_RIGHT],
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-frame mean joint position error.
pub fn per_frame_error(pred: &[MotionFrame], gt: &[MotionFrame], subset: JointSubset) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            if p.dim() != g.dim() || p.dim() % 3 != 0 {
                return Err(Error::DimensionMismatch {
                    expected: g.dim(),
                    got: p.dim(),
                });
            }
            let joints = subset.joints(p.dim() / 3);
            let sum: f64 = joints
                .iter()
                .map(|&j| dist(Layout::joint(&p.pose, j), Layout::joint(&g.pose, j)))
                .sum();
            Ok(sum / joints.len() as f64)
        })
        .collect()
}

/// Mean per-joint position error in meters over frames `skip..`.
pub fn mpjpe(pred: &[MotionFrame], gt: &[MotionFrame], subset: JointSubset, skip: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() <= skip {
        return Err(Error::TooShort {
            need: skip + 1,
            got: pred.len(),
        });
    }
    let errs = per_frame_error(&pred[skip..], &gt[skip..], subset)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Mean-over-joints jerk magnitude for frames `3..`.
pub fn jerk_trace(frames: &[MotionFrame], frame_rate: f64) -> Result<Vec<f64>> {
    if frames.len() < 4 {
        return Err(Error::TooShort {
            need: 4,
            got: frames.len(),
        });
    }
    let scale = frame_rate.powi(3);
    let joints = frames[0].dim() / 3;
    Ok(frames
        .windows(4)
        .map(|w| {
            let sum: f64 = (0..joints)
                .map(|j| {
                    let r = Layout::joint_range(j);
                    r.map(|c| {
                        let d = w[3].pose[c] - 3.0 * w[2].pose[c] + 3.0 * w[1].pose[c] - w[0].pose[c];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
                })
                .sum();
            sum / joints as f64 * scale
        })
        .collect())
}

/// `(PJ, AUJ)`.
pub fn jerk_metrics(frames: &[MotionFrame], frame_rate: f64) -> Result<(f64, f64)> {
    let trace = jerk_trace(frames, frame_rate)?;
    let pj = trace.iter().copied().fold(0.0, f64::max);
    let auj = trace.iter().sum::<f64>() / frame_rate;
    Ok((pj, auj))
}

/// RMS over frames and joints of each joint's head-frame distance from its
/// own per-sequence mean position.
pub fn rms_motion_amplitude(sequences: &[Vec<MotionFrame>]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for seq in sequences {
        let Some(first) = seq.first() else { continue };
        let dim = first.dim();
        let mut mean = vec![0.0; dim];
        for f in seq {
            for (m, v) in mean.iter_mut().zip(&f.pose) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= seq.len() as f64);
        for f in seq {
            for j in 0..dim / 3 {
                let r = Layout::joint_range(j);
                se += r.map(|c| (f.pose[c] - mean[c]).powi(2)).sum::<f64>();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (se / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    pub passed: bool,
    /// First emitted index whose frames differ, if any.
    pub first_divergent: Option<usize>,
}

/// Runs two fresh sources on the same observations, except that `perturb` is
/// applied to every observation after `t_star`. Passes when every frame up to
/// and including `t_star` is bit-identical.
pub fn causality_probe<S: FrameSource>(
    make: impl Fn() -> Result<S>,
    obs: &[ControlSignal],
    t_star: usize,
    perturb: impl Fn(usize, &mut ControlSignal),
) -> Result<ProbeResult> {
    if t_star >= obs.len() {
        return Err(Error::TooShort {
            need: t_star + 1,
            got: obs.len(),
        });
    }
    let mut changed = obs.to_vec();
    for (t, o) in changed.iter_mut().enumerate().skip(t_star + 1) {
        perturb(t, o);
    }
    let a = crate::online::collect(&mut make()?, obs.iter().copied())?;
    let b = crate::online::collect(&mut make()?, changed)?;
    let first_divergent = a
        .frames
        .iter()
        .zip(&b.frames)
        .position(|(x, y)| x.pose.iter().zip(&y.pose).any(|(p, q)| p.to_bits() != q.to_bits()));
    Ok(ProbeResult {
        passed: first_divergent.is_none_or(|i| i > t_star),
        first_divergent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(n: usize, joints: usize, f: impl Fn(f64, usize) -> [f64; 3], fps: f64) -> Vec<MotionFrame> {
        (0..n)
            .map(|i| {
                let t = i as f64 / fps;
                MotionFrame::new((0..joints).flat_map(|j| f(t, j)).collect())
            })
            .collect()
    }

    #[test]
    fn identical_and_translated() {
        let gt = traj(20, 7, |t, j| [t, j as f64, t * t], 10.0);
        assert_eq!(mpjpe(&gt, &gt, JointSubset::All, 0).unwrap(), 0.0);
        let d = [0.03, -0.04, 0.0];
        let moved: Vec<MotionFrame> = gt
            .iter()
            .map(|f| MotionFrame::new(f.pose.iter().enumerate().map(|(i, v)| v + d[i % 3]).collect()))
            .collect();
        for subset in [JointSubset::All, JointSubset::Head, JointSubset::Wrists] {
            assert!((mpjpe(&moved, &gt, subset, 3).unwrap() - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn random_perturbation_against_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = traj(30, 7, |t, j| [t.sin(), j as f64, t], 10.0);
        let pred: Vec<MotionFrame> = gt
            .iter()
            .map(|f| MotionFrame::new(f.pose.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect()))
            .collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for (p, g) in pred.iter().zip(&gt).skip(5) {
            for j in 0..7 {
                let mut s = 0.0;
                for a in 0..3 {
                    s += (p.pose[3 * j + a] - g.pose[3 * j + a]).powi(2);
                }
                total += s.sqrt();
                count += 1.0;
            }
        }
        assert!((mpjpe(&pred, &gt, JointSubset::All, 5).unwrap() - total / count).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = traj(5, 3, |t, _| [t; 3], 10.0);
        assert!(matches!(mpjpe(&a, &a[..4], JointSubset::All, 0), Err(Error::LengthMismatch(5, 4))));
        assert!(matches!(mpjpe(&a, &a, JointSubset::All, 5), Err(Error::TooShort { .. })));
        assert!(matches!(jerk_metrics(&a[..3], 10.0), Err(Error::TooShort { need: 4, got: 3 })));
    }

    #[test]
    fn polynomial_motion_has_no_jerk() {
        let vel = traj(50, 4, |t, j| [0.3 * t, -t + j as f64, 2.0], 10.0);
        let (pj, auj) = jerk_metrics(&vel, 10.0).unwrap();
        assert!(pj < 1e-9 && auj < 1e-9);
        let acc = traj(50, 4, |t, _| [0.5 * t * t, -0.2 * t * t + t, 1.0], 10.0);
        let (pj, auj) = jerk_metrics(&acc, 10.0).unwrap();
        assert!(pj < 1e-9 && auj < 1e-9, "{pj} {auj}");
    }

    fn sine_pj(amp: f64, omega: f64, fps: f64, n: usize) -> f64 {
        let frames = traj(n, 1, |t, _| [amp * (omega * t).sin(), 0.0, 0.0], fps);
        jerk_metrics(&frames, fps).unwrap().0
    }

    #[test]
    fn sinusoid_peak_jerk_matches_discrete_oracle() {
        // The backward third difference of A sin(w t) ending at frame i is
        // -A (2 sin(w dt / 2))^3 cos(w (i - 3/2) dt).
        let (amp, fps, n) = (0.2, 10.0, 4000);
        let dt = 1.0 / fps;
        for frac in [0.01, 0.05, 0.1, 0.15, 0.2] {
            let omega = frac * std::f64::consts::TAU * fps;
            let gain = amp * (2.0 * (omega * dt / 2.0).sin() / dt).powi(3);
            let peak = (3..n)
                .map(|i| (omega * (i as f64 - 1.5) * dt).cos().abs())
                .fold(0.0, f64::max);
            let pj = sine_pj(amp, omega, fps, n);
            assert!((pj - gain * peak).abs() <= 1e-6 * gain, "frac {frac}: {pj} vs {}", gain * peak);
        }
    }

    #[test]
    fn sinusoid_peak_jerk_approaches_analytic_value() {
        // Slight detuning lets the sample phases sweep the whole period.
        let (amp, fps) = (0.2, 10.0);
        for frac in [0.02, 0.05, 0.08, 0.1] {
            let omega = frac * std::f64::consts::TAU * fps * (1.0 - 1e-3 * 2f64.sqrt());
            let analytic = amp * omega.powi(3);
            let pj = sine_pj(amp, omega, fps, 4000);
            assert!((pj - analytic).abs() <= 0.05 * analytic, "frac {frac}: {pj} vs {analytic}");
        }
    }

    proptest! {
        #[test]
        fn jerk_ignores_affine_motion(
            shift in proptest::array::uniform3(-5.0f64..5.0),
            vel in proptest::array::uniform3(-2.0f64..2.0),
            acc in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let base = traj(40, 3, |t, j| [(t * (j + 1) as f64).sin(), (2.0 * t).cos(), t.sin() * 0.3], 10.0);
            let moved: Vec<MotionFrame> = base
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let t = i as f64 / 10.0;
                    MotionFrame::new(f.pose.iter().enumerate().map(|(c, v)| {
                        let a = c % 3;
                        v + shift[a] + vel[a] * t + 0.5 * acc[a] * t * t
                    }).collect())
                })
                .collect();
            let (p0, a0) = jerk_metrics(&base, 10.0).unwrap();
            let (p1, a1) = jerk_metrics(&moved, 10.0).unwrap();
            prop_assert!((p0 - p1).abs() < 1e-6 * (1.0 + p0));
            prop_assert!((a0 - a1).abs() < 1e-6 * (1.0 + a0));
        }
    }

    #[test]
    fn amplitude_of_rigid_motion_is_zero() {
        let rigid = traj(10, 3, |_, j| [j as f64, 1.0, 2.0], 10.0);
        assert_eq!(rms_motion_amplitude(&[rigid]), 0.0);
        // +/- a along one axis on one of two joints: RMS over joints is a / sqrt(2).
        let osc = traj(10, 2, |t, j| if j == 0 { [if (t * 10.0).round() as i64 % 2 == 0 { 0.1 } else { -0.1 }, 0.0, 0.0] } else { [0.0; 3] }, 10.0);
        assert!((rms_motion_amplitude(&[osc]) - 0.1 / 2f64.sqrt()).abs() < 1e-12);
    }
}
