//! Bidirectional temporal transformer over a fixed-length window, with
//! per-position noise-level embeddings and an optional cross-attention block
//! over a context matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    attention_backward, attention_forward, gelu_backward, gelu_forward, AttnShape, LayerNorm,
    Linear, NormCache, Operand,
};
use super::tensor::Real;

/// Network shape. `window` is the number of positions (`h + 1 + f`);
/// `context_rows` is the number of context vectors per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub pose_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub window: usize,
    pub context_dim: usize,
    pub context_rows: usize,
    pub cross_attention: bool,
}

impl Hyper {
    pub fn input_dim(&self) -> usize {
        2 * self.pose_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.width % 2 != 0 {
            return Err("width must be even for the level embedding".into());
        }
        if self.pose_dim == 0 || self.window == 0 || self.ffn_mult == 0 {
            return Err("pose_dim, window and ffn_mult must be positive".into());
        }
        if self.cross_attention && (self.context_dim == 0 || self.context_rows == 0) {
            return Err("cross attention needs context_dim > 0 and context_rows > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Cross {
    ln: LayerNorm,
    q: Linear,
    kv: Linear,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Index {
    input: Linear,
    pos: usize,
    level: Linear,
    blocks: Vec<Block>,
    cross: Option<Cross>,
    final_norm: LayerNorm,
    output: Linear,
}

/// Name and shape of one parameter tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
struct Registry {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let len: usize = shape.iter().product();
        self.entries.push(ParamEntry {
            name,
            shape,
            offset,
        });
        self.total += len;
        offset
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.add(format!("{name}.w"), vec![din, dout]);
        let b = self.add(format!("{name}.b"), vec![dout]);
        Linear { w, b, din, dout }
    }

    fn norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let g = self.add(format!("{name}.g"), vec![dim]);
        let b = self.add(format!("{name}.b"), vec![dim]);
        LayerNorm { g, b, dim }
    }
}

fn build_index(hp: &Hyper) -> (Index, Vec<ParamEntry>, usize) {
    let w = hp.width;
    let mut reg = Registry::default();
    let input = reg.linear("in", hp.input_dim(), w);
    let pos = reg.add("pos".into(), vec![hp.window, w]);
    let level = reg.linear("lvl", w, w);
    let blocks = (0..hp.blocks)
        .map(|l| Block {
            ln1: reg.norm(&format!("b{l}.ln1"), w),
            qkv: reg.linear(&format!("b{l}.qkv"), w, 3 * w),
            proj: reg.linear(&format!("b{l}.o"), w, w),
            ln2: reg.norm(&format!("b{l}.ln2"), w),
            ff1: reg.linear(&format!("b{l}.ff1"), w, hp.ffn_mult * w),
            ff2: reg.linear(&format!("b{l}.ff2"), hp.ffn_mult * w, w),
        })
        .collect();
    let cross = hp.cross_attention.then(|| Cross {
        ln: reg.norm("x.ln", w),
        q: reg.linear("x.q", w, w),
        kv: reg.linear("x.kv", hp.context_dim, 2 * w),
        proj: reg.linear("x.o", w, w),
    });
    let final_norm = reg.norm("lnf", w);
    let output = reg.linear("out", w, hp.pose_dim);
    let index = Index {
        input,
        pos,
        level,
        blocks,
        cross,
        final_norm,
        output,
    };
    (index, reg.entries, reg.total)
}

/// Fixed sinusoidal embedding of a diffusion level.
pub fn level_embedding<T: Real>(level: usize, width: usize, out: &mut [T]) {
    let half = width / 2;
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        let arg = level as f64 * freq;
        out[2 * i] = T::of(arg.sin());
        out[2 * i + 1] = T::of(arg.cos());
    }
}

/// Network inputs for a batch of windows, flattened row-major.
pub struct Batch<'a, T> {
    pub size: usize,
    /// `size * window x 2D`.
    pub input: &'a [T],
    /// `size * window`.
    pub levels: &'a [usize],
    /// `size * context_rows x context_dim`; zeros when absent.
    pub context: Option<&'a [T]>,
}

struct BlockCache<T> {
    n1: NormCache<T>,
    a1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    n2: NormCache<T>,
    a2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

struct CrossCache<T> {
    n: NormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    ctx: Vec<T>,
    kv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
}

pub struct ForwardCache<T> {
    rows: usize,
    size: usize,
    input: Vec<T>,
    level_emb: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    cross: Option<CrossCache<T>>,
    nf: NormCache<T>,
    af: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Transformer<T> {
    hyper: Hyper,
    index: Index,
    entries: Vec<ParamEntry>,
    pub params: Vec<T>,
}

impl<T: Real> Transformer<T> {
    /// Randomly initialised network; deterministic in `seed`.
    pub fn new(hyper: Hyper, seed: u64) -> Result<Self, String> {
        hyper.validate()?;
        let (index, entries, total) = build_index(&hyper);
        let mut params = vec![T::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &entries {
            let slot = &mut params[e.offset..e.offset + e.len()];
            let name = e.name.as_str();
            if name.ends_with(".g") {
                slot.fill(T::one());
            } else if name.ends_with(".b") {
                // zero
            } else {
                let std = if name == "pos" {
                    0.02
                } else if name == "out.w" {
                    0.5 / (e.shape[0] as f64).sqrt()
                } else {
                    1.0 / (e.shape[0] as f64).sqrt()
                };
                let dist = Normal::new(0.0, std).unwrap();
                for v in slot.iter_mut() {
                    *v = T::of(dist.sample(&mut rng));
                }
            }
        }
        Ok(Transformer {
            hyper,
            index,
            entries,
            params,
        })
    }

    /// Rebuilds a network from stored tensors, checking names and shapes.
    pub fn from_tensors(hyper: Hyper, tensors: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self, String> {
        hyper.validate()?;
        let (index, entries, total) = build_index(&hyper);
        if tensors.len() != entries.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                entries.len(),
                tensors.len()
            ));
        }
        let mut params = Vec::with_capacity(total);
        for (entry, (name, shape, data)) in entries.iter().zip(tensors) {
            if entry.name != name || entry.shape != shape || data.len() != entry.len() {
                return Err(format!(
                    "tensor {name:?} {shape:?} does not match expected {:?} {:?}",
                    entry.name, entry.shape
                ));
            }
            params.extend(data);
        }
        Ok(Transformer {
            hyper,
            index,
            entries,
            params,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            hyper: self.hyper,
            index: self.index.clone(),
            entries: self.entries.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::of(v.to_f64().unwrap()))
                .collect(),
        }
    }

    fn attn_shape(&self, size: usize) -> AttnShape {
        AttnShape {
            batch: size,
            heads: self.hyper.heads,
            head_dim: self.hyper.width / self.hyper.heads,
        }
    }

    /// Forward pass; returns `size * window x pose_dim` predictions.
    pub fn forward(&self, batch: &Batch<T>) -> (Vec<T>, ForwardCache<T>) {
        let hp = &self.hyper;
        let p = &self.params;
        let w = hp.width;
        let n = hp.window;
        let rows = batch.size * n;
        assert_eq!(batch.input.len(), rows * hp.input_dim(), "input shape");
        assert_eq!(batch.levels.len(), rows, "levels shape");

        let mut level_emb = vec![T::zero(); rows * w];
        for (r, &k) in batch.levels.iter().enumerate() {
            level_embedding(k, w, &mut level_emb[r * w..(r + 1) * w]);
        }
        let mut h = self.index.input.forward(p, batch.input, rows);
        let lvl = self.index.level.forward(p, &level_emb, rows);
        let pos = &p[self.index.pos..self.index.pos + n * w];
        for (r, (hr, lr)) in h.chunks_exact_mut(w).zip(lvl.chunks_exact(w)).enumerate() {
            let pr = &pos[(r % n) * w..(r % n + 1) * w];
            for i in 0..w {
                hr[i] += lr[i] + pr[i];
            }
        }

        let shape = self.attn_shape(batch.size);
        let self_q = Operand { stride: 3 * w, offset: 0, n };
        let self_k = Operand { stride: 3 * w, offset: w, n };
        let self_v = Operand { stride: 3 * w, offset: 2 * w, n };
        let mut blocks = Vec::with_capacity(hp.blocks);
        for blk in &self.index.blocks {
            let (a1, n1) = blk.ln1.forward(p, &h);
            let qkv = blk.qkv.forward(p, &a1, rows);
            let (att, probs) = attention_forward(&shape, &qkv, self_q, &qkv, self_k, self_v);
            let o = blk.proj.forward(p, &att, rows);
            for (hv, ov) in h.iter_mut().zip(&o) {
                *hv += *ov;
            }
            let (a2, n2) = blk.ln2.forward(p, &h);
            let u = blk.ff1.forward(p, &a2, rows);
            let g = gelu_forward(&u);
            let m = blk.ff2.forward(p, &g, rows);
            for (hv, mv) in h.iter_mut().zip(&m) {
                *hv += *mv;
            }
            blocks.push(BlockCache {
                n1,
                a1,
                qkv,
                probs,
                att,
                n2,
                a2,
                u,
                g,
            });
        }

        let cross = self.index.cross.as_ref().map(|cx| {
            let crow = batch.size * hp.context_rows;
            let ctx = match batch.context {
                Some(c) => {
                    assert_eq!(c.len(), crow * hp.context_dim, "context shape");
                    c.to_vec()
                }
                None => vec![T::zero(); crow * hp.context_dim],
            };
            let (a, nc) = cx.ln.forward(p, &h);
            let q = cx.q.forward(p, &a, rows);
            let kv = cx.kv.forward(p, &ctx, crow);
            let (att, probs) = attention_forward(
                &shape,
                &q,
                Operand { stride: w, offset: 0, n },
                &kv,
                Operand { stride: 2 * w, offset: 0, n: hp.context_rows },
                Operand { stride: 2 * w, offset: w, n: hp.context_rows },
            );
            let o = cx.proj.forward(p, &att, rows);
            for (hv, ov) in h.iter_mut().zip(&o) {
                *hv += *ov;
            }
            CrossCache {
                n: nc,
                a,
                q,
                ctx,
                kv,
                probs,
                att,
            }
        });

        let (af, nf) = self.index.final_norm.forward(p, &h);
        let out = self.index.output.forward(p, &af, rows);
        let cache = ForwardCache {
            rows,
            size: batch.size,
            input: batch.input.to_vec(),
            level_emb,
            blocks,
            cross,
            nf,
            af,
        };
        (out, cache)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the predictions) into `grads`,
    /// which must have the same length as `params`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &[T], grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        let hp = &self.hyper;
        let p = &self.params;
        let w = hp.width;
        let n = hp.window;
        let rows = cache.rows;
        let shape = self.attn_shape(cache.size);

        let daf = self
            .index
            .output
            .backward(p, grads, &cache.af, d_out, rows, true)
            .unwrap();
        let mut dh = self.index.final_norm.backward(p, grads, &cache.nf, &daf);

        if let (Some(cx), Some(cc)) = (&self.index.cross, &cache.cross) {
            let crow = cache.size * hp.context_rows;
            let datt = cx.proj.backward(p, grads, &cc.att, &dh, rows, true).unwrap();
            let mut dq = vec![T::zero(); cc.q.len()];
            let mut dkv = vec![T::zero(); cc.kv.len()];
            attention_backward(
                &shape,
                &datt,
                &cc.probs,
                &cc.q,
                Operand { stride: w, offset: 0, n },
                &cc.kv,
                Operand { stride: 2 * w, offset: 0, n: hp.context_rows },
                Operand { stride: 2 * w, offset: w, n: hp.context_rows },
                &mut dq,
                &mut dkv,
            );
            cx.kv.backward(p, grads, &cc.ctx, &dkv, crow, false);
            let da = cx.q.backward(p, grads, &cc.a, &dq, rows, true).unwrap();
            let dres = cx.ln.backward(p, grads, &cc.n, &da);
            for (d, r) in dh.iter_mut().zip(&dres) {
                *d += *r;
            }
        }

        let self_q = Operand { stride: 3 * w, offset: 0, n };
        let self_k = Operand { stride: 3 * w, offset: w, n };
        let self_v = Operand { stride: 3 * w, offset: 2 * w, n };
        for (blk, bc) in self.index.blocks.iter().zip(&cache.blocks).rev() {
            let dg = blk.ff2.backward(p, grads, &bc.g, &dh, rows, true).unwrap();
            let du = gelu_backward(&bc.u, &dg);
            let da2 = blk.ff1.backward(p, grads, &bc.a2, &du, rows, true).unwrap();
            let dres = blk.ln2.backward(p, grads, &bc.n2, &da2);
            for (d, r) in dh.iter_mut().zip(&dres) {
                *d += *r;
            }

            let datt = blk.proj.backward(p, grads, &bc.att, &dh, rows, true).unwrap();
            let mut dq = vec![T::zero(); bc.qkv.len()];
            let mut dkv = vec![T::zero(); bc.qkv.len()];
            attention_backward(
                &shape, &datt, &bc.probs, &bc.qkv, self_q, &bc.qkv, self_k, self_v, &mut dq,
                &mut dkv,
            );
            for (a, b) in dq.iter_mut().zip(&dkv) {
                *a += *b;
            }
            let da1 = blk.qkv.backward(p, grads, &bc.a1, &dq, rows, true).unwrap();
            let dres = blk.ln1.backward(p, grads, &bc.n1, &da1);
            for (d, r) in dh.iter_mut().zip(&dres) {
                *d += *r;
            }
        }

        for (r, row) in dh.chunks_exact(w).enumerate() {
            let slot = self.index.pos + (r % n) * w;
            for (g, d) in grads[slot..slot + w].iter_mut().zip(row) {
                *g += *d;
            }
        }
        self.index
            .level
            .backward(p, grads, &cache.level_emb, &dh, rows, false);
        self.index
            .input
            .backward(p, grads, &cache.input, &dh, rows, false);
    }

    /// Mean squared error against `target` and its gradient w.r.t. the
    /// predictions.
    pub fn mse(pred: &[T], target: &[T]) -> (T, Vec<T>) {
        assert_eq!(pred.len(), target.len());
        let inv = T::one() / T::of(pred.len() as f64);
        let mut loss = T::zero();
        let grad = pred
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = *p - *t;
                loss += d * d;
                T::of(2.0) * d * inv
            })
            .collect();
        (loss * inv, grad)
    }

    /// Loss and parameter gradient for one batch.
    pub fn loss_and_grad(&self, batch: &Batch<T>, target: &[T]) -> (T, Vec<T>) {
        let (pred, cache) = self.forward(batch);
        let (loss, d_out) = Self::mse(&pred, target);
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward(&cache, &d_out, &mut grads);
        (loss, grads)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(cross: bool) -> Hyper {
        Hyper {
            pose_dim: 4,
            width: 8,
            blocks: 1,
            heads: 2,
            ffn_mult: 2,
            window: 4,
            context_dim: if cross { 3 } else { 0 },
            context_rows: if cross { 2 } else { 0 },
            cross_attention: cross,
        }
    }

    fn random_batch(hp: &Hyper, size: usize, seed: u64) -> (Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = size * hp.window;
        let input = (0..rows * hp.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let levels = (0..rows).map(|_| rng.random_range(0..=100)).collect();
        let target = (0..rows * hp.pose_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ctx = (0..size * hp.context_rows * hp.context_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        (input, levels, target, ctx)
    }

    /// Central finite differences against the analytic gradient.
    fn gradient_check(cross: bool) {
        let hp = tiny(cross);
        let mut net = Transformer::<f64>::new(hp, 5).unwrap();
        // Give biases and gains non-trivial values so every path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in net.params.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let (input, levels, target, ctx) = random_batch(&hp, 2, 17);
        let batch = Batch {
            size: 2,
            input: &input,
            levels: &levels,
            context: cross.then_some(&ctx[..]),
        };
        let (_, grads) = net.loss_and_grad(&batch, &target);
        let step = 1e-4;
        let mut ok = 0usize;
        let mut checked = 0usize;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + step;
            let (lp, _) = Transformer::mse(&net.forward(&batch).0, &target);
            net.params[i] = orig - step;
            let (lm, _) = Transformer::mse(&net.forward(&batch).0, &target);
            net.params[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let an = grads[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            checked += 1;
            if (fd - an).abs() / denom < 1e-3 || (fd - an).abs() < 1e-9 {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.95 * checked as f64,
            "only {ok}/{checked} coordinates within tolerance"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(false);
    }

    #[test]
    fn gradients_match_finite_differences_with_cross_attention() {
        gradient_check(true);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let hp = tiny(false);
        let net = Transformer::<f32>::new(hp, 1).unwrap();
        let input = vec![0.3f32; hp.window * hp.input_dim()];
        let levels = vec![7usize; hp.window];
        let batch = Batch {
            size: 1,
            input: &input,
            levels: &levels,
            context: None,
        };
        let (a, _) = net.forward(&batch);
        let (b, _) = net.forward(&batch);
        assert_eq!(a.len(), hp.window * hp.pose_dim);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn batched_forward_matches_single() {
        let hp = tiny(true);
        let net = Transformer::<f64>::new(hp, 3).unwrap();
        let (input, levels, _, ctx) = random_batch(&hp, 3, 4);
        let (all, _) = net.forward(&Batch {
            size: 3,
            input: &input,
            levels: &levels,
            context: Some(&ctx),
        });
        let rin = hp.window * hp.input_dim();
        let rout = hp.window * hp.pose_dim;
        let rctx = hp.context_rows * hp.context_dim;
        for b in 0..3 {
            let (one, _) = net.forward(&Batch {
                size: 1,
                input: &input[b * rin..(b + 1) * rin],
                levels: &levels[b * hp.window..(b + 1) * hp.window],
                context: Some(&ctx[b * rctx..(b + 1) * rctx]),
            });
            for (x, y) in one.iter().zip(&all[b * rout..(b + 1) * rout]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_hyper_is_rejected() {
        let mut hp = tiny(false);
        hp.heads = 3;
        assert!(Transformer::<f32>::new(hp, 0).is_err());
        let mut hp = tiny(false);
        hp.cross_attention = true;
        assert!(Transformer::<f32>::new(hp, 0).is_err());
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let hp = tiny(false);
        let net = Transformer::<f32>::new(hp, 2).unwrap();
        let tensors: Vec<_> = net
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), net.params[e.offset..e.offset + e.len()].to_vec()))
            .collect();
        let back = Transformer::from_tensors(hp, tensors.clone()).unwrap();
        assert_eq!(back.params, net.params);
        let mut bad = tensors;
        bad[0].1 = vec![1, 1];
        assert!(Transformer::<f32>::from_tensors(hp, bad).is_err());
    }
}
