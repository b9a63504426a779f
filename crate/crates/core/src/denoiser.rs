//! The x0-prediction network behind a small trait, so the streaming engine can
//! also run against an oracle that returns ground truth.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::motion::{AugmentedWindow, Layout, MotionFrame};
use crate::nn::{Batch, Hyper, Transformer};

/// Per-component affine map into the space the network works in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over canonical frames. Constant components get unit scale.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a MotionFrame>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for f in frames {
            for (i, v) in f.pose.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var.sqrt() > 1e-9 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Anything that maps a mask-augmented window to clean poses, in normalized
/// canonical coordinates.
pub trait Denoiser {
    fn layout(&self) -> Layout;
    fn history(&self) -> usize;
    fn horizon(&self) -> usize;
    fn normalizer(&self) -> &Normalizer;

    /// `t` is the absolute frame index of offset 0. Learned models ignore it.
    fn predict_x0(&self, aug: &AugmentedWindow, t: i64) -> Result<Vec<Vec<f64>>>;

    fn window_len(&self) -> usize {
        self.history() + 1 + self.horizon()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn layout(&self) -> Layout {
        (**self).layout()
    }
    fn history(&self) -> usize {
        (**self).history()
    }
    fn horizon(&self) -> usize {
        (**self).horizon()
    }
    fn normalizer(&self) -> &Normalizer {
        (**self).normalizer()
    }
    fn predict_x0(&self, aug: &AugmentedWindow, t: i64) -> Result<Vec<Vec<f64>>> {
        (**self).predict_x0(aug, t)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn layout(&self) -> Layout {
        (**self).layout()
    }
    fn history(&self) -> usize {
        (**self).history()
    }
    fn horizon(&self) -> usize {
        (**self).horizon()
    }
    fn normalizer(&self) -> &Normalizer {
        (**self).normalizer()
    }
    fn predict_x0(&self, aug: &AugmentedWindow, t: i64) -> Result<Vec<Vec<f64>>> {
        (**self).predict_x0(aug, t)
    }
}

/// Network hyperparameters that users choose; the rest follows from the
/// layout and window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub cross_attention: bool,
    pub context_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 128,
            blocks: 4,
            heads: 4,
            ffn_mult: 2,
            cross_attention: false,
            context_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self, layout: Layout, history: usize, horizon: usize) -> Hyper {
        Hyper {
            pose_dim: layout.dim(),
            width: self.width,
            blocks: self.blocks,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            window: history + 1 + horizon,
            context_dim: self.context_dim,
            // One context row per past or current frame.
            context_rows: history + 1,
            cross_attention: self.cross_attention,
        }
    }
}

/// Trained (or freshly initialised) network plus everything needed to feed it.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    net: Transformer<f32>,
    layout: Layout,
    history: usize,
    horizon: usize,
    max_level: usize,
    normalizer: Normalizer,
}

impl DenoiserModel {
    pub fn new(
        cfg: &ModelConfig,
        layout: Layout,
        history: usize,
        horizon: usize,
        max_level: usize,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        let hyper = cfg.hyper(layout, history, horizon);
        let net = Transformer::new(hyper, seed).map_err(|e| Error::InvalidConfig(vec![format!("model: {e}")]))?;
        Self::from_net(net, layout, history, horizon, max_level, normalizer)
    }

    pub fn from_net(
        net: Transformer<f32>,
        layout: Layout,
        history: usize,
        horizon: usize,
        max_level: usize,
        normalizer: Normalizer,
    ) -> Result<Self> {
        let hp = net.hyper();
        check_dim(layout.dim(), hp.pose_dim)?;
        check_dim(layout.dim(), normalizer.dim())?;
        if hp.window != history + 1 + horizon {
            return Err(Error::ShapeMismatch(format!(
                "network window {} does not match h + 1 + f = {}",
                hp.window,
                history + 1 + horizon
            )));
        }
        if !net.all_finite() {
            return Err(Error::CorruptModel("non-finite parameter".into()));
        }
        Ok(DenoiserModel {
            net,
            layout,
            history,
            horizon,
            max_level,
            normalizer,
        })
    }

    pub fn net(&self) -> &Transformer<f32> {
        &self.net
    }

    pub fn into_net(self) -> Transformer<f32> {
        self.net
    }

    pub fn hyper(&self) -> &Hyper {
        self.net.hyper()
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Encodes one window into the network's flat f32 input buffers.
    pub fn encode(&self, aug: &AugmentedWindow, input: &mut Vec<f32>, levels: &mut Vec<usize>, context: &mut Vec<f32>) -> Result<()> {
        let hp = self.net.hyper();
        if aug.len() != hp.window {
            return Err(Error::ShapeMismatch(format!(
                "window has {} frames, model expects {}",
                aug.len(),
                hp.window
            )));
        }
        if aug.levels.len() != hp.window {
            return Err(Error::ShapeMismatch(format!(
                "{} levels for {} frames",
                aug.levels.len(),
                hp.window
            )));
        }
        for row in &aug.rows {
            check_dim(hp.input_dim(), row.len())?;
            input.extend(row.iter().map(|&v| v as f32));
        }
        for &k in &aug.levels {
            if k > self.max_level {
                return Err(Error::LevelOutOfRange {
                    level: k,
                    max: self.max_level,
                });
            }
            levels.push(k);
        }
        if hp.cross_attention {
            let rows = hp.context_rows;
            match &aug.context {
                Some(ctx) => {
                    if ctx.len() != rows {
                        return Err(Error::ShapeMismatch(format!(
                            "context has {} rows, model expects {rows}",
                            ctx.len()
                        )));
                    }
                    for r in ctx {
                        check_dim(hp.context_dim, r.len())?;
                        context.extend(r.iter().map(|&v| v as f32));
                    }
                }
                None => context.extend(std::iter::repeat_n(0.0, rows * hp.context_dim)),
            }
        }
        Ok(())
    }

    /// Runs several windows through one batched forward pass.
    pub fn predict_batch(&self, augs: &[AugmentedWindow]) -> Result<Vec<Vec<Vec<f64>>>> {
        let hp = *self.net.hyper();
        let mut input = Vec::with_capacity(augs.len() * hp.window * hp.input_dim());
        let mut levels = Vec::with_capacity(augs.len() * hp.window);
        let mut context = Vec::new();
        for aug in augs {
            self.encode(aug, &mut input, &mut levels, &mut context)?;
        }
        let batch = Batch {
            size: augs.len(),
            input: &input,
            levels: &levels,
            context: hp.cross_attention.then_some(context.as_slice()),
        };
        let (out, _) = self.net.forward(&batch);
        let d = hp.pose_dim;
        Ok(out
            .chunks_exact(hp.window * d)
            .map(|w| w.chunks_exact(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
            .collect())
    }
}

impl Denoiser for DenoiserModel {
    fn layout(&self) -> Layout {
        self.layout
    }

    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    fn predict_x0(&self, aug: &AugmentedWindow, _t: i64) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict_batch(std::slice::from_ref(aug))?.remove(0))
    }
}

/// Returns the ground-truth window around `t`, clamping indices to the
/// sequence. Used to test the engine's bookkeeping independently of learning.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    layout: Layout,
    history: usize,
    horizon: usize,
    normalizer: Normalizer,
    /// Normalized canonical ground truth, one row per frame.
    truth: Vec<Vec<f64>>,
}

impl OracleDenoiser {
    pub fn new(layout: Layout, history: usize, horizon: usize, normalizer: Normalizer, canonical: &[MotionFrame]) -> Self {
        let truth = canonical.iter().map(|f| normalizer.normalize(&f.pose)).collect();
        OracleDenoiser {
            layout,
            history,
            horizon,
            normalizer,
            truth,
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn layout(&self) -> Layout {
        self.layout
    }

    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    fn predict_x0(&self, aug: &AugmentedWindow, t: i64) -> Result<Vec<Vec<f64>>> {
        if aug.len() != self.window_len() {
            return Err(Error::ShapeMismatch(format!(
                "window has {} frames, oracle expects {}",
                aug.len(),
                self.window_len()
            )));
        }
        let last = self.truth.len() as i64 - 1;
        Ok((0..aug.len())
            .map(|i| {
                let idx = (t - self.history as i64 + i as i64).clamp(0, last);
                self.truth[idx as usize].clone()
            })
            .collect())
    }
}
