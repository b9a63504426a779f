//! Discrete-time diffusion algebra with per-frame levels.
//!
//! Every operation takes its Gaussian draws explicitly; nothing here owns an RNG.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn code(&self) -> u32 {
        match self {
            ScheduleKind::Cosine => 0,
            ScheduleKind::Linear => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::Cosine),
            1 => Some(ScheduleKind::Linear),
            _ => None,
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidSchedule(format!("unknown kind {other:?}"))),
        }
    }
}

const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients for levels `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus: Vec<f64>,
}

/// Builds the schedule for `k_max` levels.
pub fn make_schedule(k_max: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if k_max < 2 {
        return Err(Error::InvalidSchedule(format!("K must be >= 2, got {k_max}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            // Nichol & Dhariwal offset; betas clipped so the last level keeps
            // a strictly positive alpha_bar.
            let s = 0.008;
            let f = |k: usize| {
                let x = (k as f64 / k_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=k_max)
                .map(|k| (1.0 - f(k) / f(k - 1)).clamp(1e-8, MAX_BETA))
                .collect()
        }
        ScheduleKind::Linear => {
            // DDPM's 1e-4..0.02 over 1000 steps, rescaled to K steps.
            let scale = 1000.0 / k_max as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..k_max)
                .map(|i| {
                    let t = i as f64 / (k_max - 1) as f64;
                    (lo + t * (hi - lo)).clamp(1e-8, MAX_BETA)
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(k_max + 1);
    alpha_bar.push(1.0);
    for b in &betas {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    DiffusionSchedule::from_alpha_bar(kind, alpha_bar)
}

impl DiffusionSchedule {
    fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule("alpha_bar[0] must be 1".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule("alpha_bar not strictly decreasing".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidSchedule("alpha_bar outside (0, 1]".into()));
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(DiffusionSchedule {
            kind,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Maximum level `K`.
    pub fn max_level(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn signal(&self, k: usize) -> f64 {
        self.sqrt_alpha_bar[k]
    }

    pub fn noise(&self, k: usize) -> f64 {
        self.sqrt_one_minus[k]
    }

    fn check_level(&self, k: usize) -> Result<()> {
        if k > self.max_level() {
            return Err(Error::LevelOutOfRange {
                level: k,
                max: self.max_level(),
            });
        }
        Ok(())
    }

    /// `x_k = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps`.
    pub fn forward_corrupt(&self, x0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), eps.len())?;
        self.check_level(k)?;
        if k == 0 {
            return Ok(x0.to_vec());
        }
        let (a, b) = (self.signal(k), self.noise(k));
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Re-noises a clean latent to level `n`. Same algebra as
    /// [`forward_corrupt`](Self::forward_corrupt); used for history stabilization.
    pub fn inject_noise(&self, x: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.forward_corrupt(x, n, eps)
    }

    /// Deterministic jump from level `k` to `k_target < k` given an x0
    /// prediction: the implied noise is re-used at the target level.
    pub fn reverse_jump(
        &self,
        x_k: &[f64],
        x0_pred: &[f64],
        k: usize,
        k_target: usize,
    ) -> Result<Vec<f64>> {
        self.reverse_jump_eta(x_k, x0_pred, k, k_target, 0.0, None)
    }

    /// Generalised jump with stochasticity `eta` (0 = deterministic). `z`
    /// supplies the fresh Gaussian draw and is required when `eta > 0`.
    pub fn reverse_jump_eta(
        &self,
        x_k: &[f64],
        x0_pred: &[f64],
        k: usize,
        k_target: usize,
        eta: f64,
        z: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        check_dim(x_k.len(), x0_pred.len())?;
        self.check_level(k)?;
        if k_target >= k {
            return Err(Error::NonContractiveJump {
                from: k,
                to: k_target,
            });
        }
        if k_target == 0 {
            return Ok(x0_pred.to_vec());
        }
        let (ab_k, ab_t) = (self.alpha_bar[k], self.alpha_bar[k_target]);
        let sigma = if eta > 0.0 {
            eta * ((1.0 - ab_t) / (1.0 - ab_k)).sqrt() * (1.0 - ab_k / ab_t).sqrt()
        } else {
            0.0
        };
        let dir = (1.0 - ab_t - sigma * sigma).max(0.0).sqrt();
        let (sa_k, sn_k, sa_t) = (self.signal(k), self.noise(k), self.signal(k_target));
        let mut out: Vec<f64> = x_k
            .iter()
            .zip(x0_pred)
            .map(|(x, x0)| {
                let eps_hat = (x - sa_k * x0) / sn_k;
                sa_t * x0 + dir * eps_hat
            })
            .collect();
        if sigma > 0.0 {
            let z = z.ok_or_else(|| Error::InvalidSchedule("eta > 0 needs a noise draw".into()))?;
            check_dim(out.len(), z.len())?;
            for (o, zi) in out.iter_mut().zip(z) {
                *o += sigma * zi;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn schedule_shapes_and_invariants() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert_eq!(s.alpha_bar().len(), 101);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[100] <= 1e-4 && s.alpha_bar()[100] > 0.0);

        let lin = make_schedule(100, ScheduleKind::Linear).unwrap();
        assert!(lin.alpha_bar()[100] <= 1e-4);
        assert_eq!(make_schedule(2, ScheduleKind::Linear).unwrap().alpha_bar().len(), 3);
        assert_eq!(make_schedule(2, ScheduleKind::Cosine).unwrap().alpha_bar().len(), 3);
    }

    #[test]
    fn schedule_rejects_small_k() {
        for k in [0, 1] {
            let err = make_schedule(k, ScheduleKind::Cosine).unwrap_err();
            assert!(err.to_string().contains("invalid schedule"));
        }
    }

    #[test]
    fn schedule_is_deterministic() {
        assert_eq!(
            make_schedule(50, ScheduleKind::Linear).unwrap(),
            make_schedule(50, ScheduleKind::Linear).unwrap()
        );
    }

    #[test]
    fn level_zero_is_identity_and_level_k_is_noise() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = normal_vec(&mut rng, 16);
        let eps = normal_vec(&mut rng, 16);
        assert_eq!(s.forward_corrupt(&x0, 0, &eps).unwrap(), x0);
        let xk = s.forward_corrupt(&vec![0.0; 16], 100, &eps).unwrap();
        for (a, e) in xk.iter().zip(&eps) {
            assert!((a - s.noise(100) * e).abs() < 1e-15);
            assert!((a - e).abs() < 1e-3 * e.abs().max(1.0));
        }
    }

    #[test]
    fn corrupt_errors() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        assert!(matches!(
            s.forward_corrupt(&[0.0; 3], 1, &[0.0; 2]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            s.forward_corrupt(&[0.0; 3], 11, &[0.0; 3]),
            Err(Error::LevelOutOfRange { .. })
        ));
        assert!(matches!(
            s.reverse_jump(&[0.0; 3], &[0.0; 3], 5, 5),
            Err(Error::NonContractiveJump { .. })
        ));
    }

    #[test]
    fn corrupt_variance_monte_carlo() {
        // Per-component variance of x_k around sqrt(ab) x0 must be 1 - ab.
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = [0.3, -1.2];
        let draws = 100_000;
        for k in [1usize, 10, 50, 99] {
            let mut sum = [0.0; 2];
            let mut sq = [0.0; 2];
            for _ in 0..draws {
                let eps = normal_vec(&mut rng, 2);
                let xk = s.forward_corrupt(&x0, k, &eps).unwrap();
                for i in 0..2 {
                    sum[i] += xk[i];
                    sq[i] += xk[i] * xk[i];
                }
            }
            let expected = 1.0 - s.alpha_bar()[k];
            for i in 0..2 {
                let mean = sum[i] / draws as f64;
                let var = sq[i] / draws as f64 - mean * mean;
                // Sample variance of a Gaussian has std sigma^2 sqrt(2/(N-1)).
                let tol = 3.0 * expected * (2.0 / (draws - 1) as f64).sqrt();
                assert!((var - expected).abs() < tol, "k={k} var={var} expected={expected}");
            }
        }
    }

    #[test]
    fn inject_noise_msd_monte_carlo() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dim = 21;
        let draws = 20_000;
        // Zero-mean x so the deviation is pure noise: E|x_n - x|^2 = (1 - ab_n) dim.
        let x = vec![0.0; dim];
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for _ in 0..draws {
            let eps = normal_vec(&mut rng, dim);
            let xn = s.inject_noise(&x, 2, &eps).unwrap();
            let d: f64 = xn.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            total += d;
            total_sq += d * d;
        }
        let mean = total / draws as f64;
        let sd = (total_sq / draws as f64 - mean * mean).sqrt();
        let expected = (1.0 - s.alpha_bar()[2]) * dim as f64;
        assert!((mean - expected).abs() < 3.0 * sd / (draws as f64).sqrt());
        let unchanged = s.inject_noise(&[1.0, 2.0], 0, &[5.0, 5.0]).unwrap();
        assert_eq!(unchanged, vec![1.0, 2.0]);
    }

    #[test]
    fn oracle_jump_recovers_forward_corruption() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let x0 = normal_vec(&mut rng, 8);
            let eps = normal_vec(&mut rng, 8);
            let k = rand::Rng::random_range(&mut rng, 1..=100);
            let kt = rand::Rng::random_range(&mut rng, 0..k);
            let xk = s.forward_corrupt(&x0, k, &eps).unwrap();
            assert_eq!(s.reverse_jump(&xk, &x0, k, 0).unwrap(), x0);
            let jumped = s.reverse_jump(&xk, &x0, k, kt).unwrap();
            let direct = s.forward_corrupt(&x0, kt, &eps).unwrap();
            for (a, b) in jumped.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9, "k={k} kt={kt}");
            }
        }
    }

    #[test]
    fn chained_jumps_compose() {
        let s = make_schedule(100, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let xk = normal_vec(&mut rng, 6);
            let x0 = normal_vec(&mut rng, 6);
            let k = rand::Rng::random_range(&mut rng, 3..=100);
            let k1 = rand::Rng::random_range(&mut rng, 2..k);
            let k0 = rand::Rng::random_range(&mut rng, 1..k1);
            let two = s
                .reverse_jump(&s.reverse_jump(&xk, &x0, k, k1).unwrap(), &x0, k1, k0)
                .unwrap();
            let one = s.reverse_jump(&xk, &x0, k, k0).unwrap();
            for (a, b) in two.iter().zip(&one) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inject_then_jump_cancels() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = normal_vec(&mut rng, 10);
        let eps = normal_vec(&mut rng, 10);
        let noised = s.inject_noise(&x, 2, &eps).unwrap();
        assert_eq!(s.reverse_jump(&noised, &x, 2, 0).unwrap(), x);
    }

    #[test]
    fn eta_zero_matches_deterministic_and_eta_needs_noise() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let xk = [0.5, -0.5];
        let x0 = [0.1, 0.2];
        assert_eq!(
            s.reverse_jump_eta(&xk, &x0, 40, 20, 0.0, None).unwrap(),
            s.reverse_jump(&xk, &x0, 40, 20).unwrap()
        );
        assert!(s.reverse_jump_eta(&xk, &x0, 40, 20, 1.0, None).is_err());
        assert!(s
            .reverse_jump_eta(&xk, &x0, 40, 20, 1.0, Some(&[0.3, 0.3]))
            .is_ok());
    }

    proptest! {
        #[test]
        fn forward_corrupt_is_linear(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            e1 in proptest::collection::vec(-3.0f64..3.0, 4),
            e2 in proptest::collection::vec(-3.0f64..3.0, 4),
            k in 0usize..=100,
            c in -2.0f64..2.0,
        ) {
            let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
            let lhs = s.forward_corrupt(
                &a.iter().zip(&b).map(|(x, y)| x + c * y).collect::<Vec<_>>(),
                k,
                &e1.iter().zip(&e2).map(|(x, y)| x + c * y).collect::<Vec<_>>(),
            ).unwrap();
            let ra = s.forward_corrupt(&a, k, &e1).unwrap();
            let rb = s.forward_corrupt(&b, k, &e2).unwrap();
            for i in 0..4 {
                prop_assert!((lhs[i] - (ra[i] + c * rb[i])).abs() < 1e-9);
            }
        }
    }
}
