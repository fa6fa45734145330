//! Two patch encoders (semantic and depth) fused by cross-attention, with a
//! linear per-pixel head over four sigmoid channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{
    attention_backward_parts, attention_forward_parts, cross_backward_parts, cross_forward_parts,
    init_weight, AttentionBlockToy, AttentionCache, CrossAttentionFusion, CrossCache, CrossWeights,
};
use super::data::{SyntheticLandmarkSample, NUM_CLASSES};
use super::loss::{hybrid_loss_with_grad, HybridWeights};
use super::Products;
use crate::error::{Error, Result};
use crate::galore::ParamSpec;
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub loss: HybridWeights,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            model_dim: 64,
            heads: 4,
            loss: HybridWeights::default(),
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model dim {} must be a positive multiple of head count {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

// encoder layout from its base index: embed, embed bias, qkv, proj
const SEM_EMBED: usize = 0;
const SEM_QKV: usize = 2;
const SEM_PROJ: usize = 3;
const DEP_EMBED: usize = 4;
const DEP_QKV: usize = 6;
const DEP_PROJ: usize = 7;
const FUS_Q: usize = 8;
const FUS_K: usize = 9;
const FUS_V: usize = 10;
const FUS_O: usize = 11;
const DEC_W: usize = 12;
const DEC_B: usize = 13;

const NAMES: [&str; 14] = [
    "semantic.embed",
    "semantic.embed_bias",
    "semantic.attn.qkv",
    "semantic.attn.proj",
    "depth.embed",
    "depth.embed_bias",
    "depth.attn.qkv",
    "depth.attn.proj",
    "fusion.wq",
    "fusion.wk",
    "fusion.wv",
    "fusion.wo",
    "decoder.weight",
    "decoder.bias",
];

/// Dual-branch toy segmenter. Parameters are kept as an ordered list that
/// lines up with [`DualEncoderToy::param_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderToy {
    config: ToyModelConfig,
    params: Vec<DenseMatrix>,
}

struct EncoderCache {
    patches: DenseMatrix,
    hidden: DenseMatrix,
    attn: AttentionCache,
}

struct ForwardCache {
    sem: EncoderCache,
    dep: EncoderCache,
    cross: CrossCache,
    fused: DenseMatrix,
    prob: DenseMatrix,
}

fn add_row_bias(x: &mut DenseMatrix, bias: &DenseMatrix) {
    for i in 0..x.rows() {
        for (v, b) in x.row_mut(i).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
}

fn column_sums(x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, x.cols());
    for i in 0..x.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

/// 3×3 box blur with edge clamping; stands in for a depth cue.
fn box_blur(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let y = (i as i64 + di).clamp(0, n as i64 - 1) as usize;
                    let x = (j as i64 + dj).clamp(0, n as i64 - 1) as usize;
                    acc += img[y * n + x];
                }
            }
            out[i * n + j] = acc / 9.0;
        }
    }
    out
}

impl DualEncoderToy {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let pp = config.patch * config.patch;
        let out = NUM_CLASSES * pp;
        let params = vec![
            init_weight(d, pp, &mut rng),
            DenseMatrix::zeros(1, d),
            init_weight(3 * d, d, &mut rng),
            init_weight(d, d, &mut rng),
            init_weight(d, pp, &mut rng),
            DenseMatrix::zeros(1, d),
            init_weight(3 * d, d, &mut rng),
            init_weight(d, d, &mut rng),
            init_weight(d, d, &mut rng),
            init_weight(d, d, &mut rng),
            init_weight(d, d, &mut rng),
            init_weight(d, d, &mut rng),
            init_weight(out, d, &mut rng),
            DenseMatrix::zeros(1, out),
        ];
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Only the self-attention `qkv`/`proj` weights are projectable.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        NAMES
            .iter()
            .zip(&self.params)
            .enumerate()
            .map(|(i, (n, p))| {
                ParamSpec::new(
                    *n,
                    p.shape(),
                    matches!(i, SEM_QKV | SEM_PROJ | DEP_QKV | DEP_PROJ),
                )
            })
            .collect()
    }

    pub fn params(&self) -> &[DenseMatrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.params
    }

    pub fn semantic_attention(&self) -> AttentionBlockToy {
        AttentionBlockToy {
            qkv_weight: self.params[SEM_QKV].clone(),
            proj_weight: self.params[SEM_PROJ].clone(),
            head_count: self.config.heads,
            model_dim: self.config.model_dim,
        }
    }

    pub fn depth_attention(&self) -> AttentionBlockToy {
        AttentionBlockToy {
            qkv_weight: self.params[DEP_QKV].clone(),
            proj_weight: self.params[DEP_PROJ].clone(),
            head_count: self.config.heads,
            model_dim: self.config.model_dim,
        }
    }

    /// Depth features are the query; semantic features are key and value.
    pub fn fusion(&self) -> CrossAttentionFusion {
        CrossAttentionFusion {
            wq: self.params[FUS_Q].clone(),
            wk: self.params[FUS_K].clone(),
            wv: self.params[FUS_V].clone(),
            wo: self.params[FUS_O].clone(),
            head_count: self.config.heads,
        }
    }

    pub fn output_channels(&self) -> usize {
        NUM_CLASSES
    }

    fn patchify(&self, img: &[f64]) -> DenseMatrix {
        let (n, p) = (self.config.image_size, self.config.patch);
        let side = n / p;
        DenseMatrix::from_fn(side * side, p * p, |l, k| {
            let (pi, pj) = (l / side, l % side);
            let (di, dj) = (k / p, k % p);
            img[(pi * p + di) * n + pj * p + dj]
        })
    }

    /// Map a token-layout `L×(C·p²)` matrix to channel-major `C×H×W`.
    fn to_grid(&self, x: &DenseMatrix) -> Vec<f64> {
        let (n, p) = (self.config.image_size, self.config.patch);
        let side = n / p;
        let pp = p * p;
        let mut out = vec![0.0; NUM_CLASSES * n * n];
        for l in 0..x.rows() {
            let (pi, pj) = (l / side, l % side);
            for (col, &v) in x.row(l).iter().enumerate() {
                let (c, k) = (col / pp, col % pp);
                let (di, dj) = (k / p, k % p);
                out[c * n * n + (pi * p + di) * n + pj * p + dj] = v;
            }
        }
        out
    }

    fn grid_matrix(&self, g: &[f64]) -> DenseMatrix {
        let (n, p) = (self.config.image_size, self.config.patch);
        let side = n / p;
        let pp = p * p;
        DenseMatrix::from_fn(side * side, NUM_CLASSES * pp, |l, col| {
            let (pi, pj) = (l / side, l % side);
            let (c, k) = (col / pp, col % pp);
            let (di, dj) = (k / p, k % p);
            g[c * n * n + (pi * p + di) * n + pj * p + dj]
        })
    }

    fn encode(&self, img: &[f64], base: usize) -> Result<(DenseMatrix, EncoderCache)> {
        let patches = self.patchify(img);
        let mut hidden = patches.mmt(&self.params[base]);
        add_row_bias(&mut hidden, &self.params[base + 1]);
        hidden = hidden.map(f64::tanh);
        let (a, attn) = attention_forward_parts(
            &self.params[base + 2],
            &self.params[base + 3],
            self.config.heads,
            &hidden,
        )?;
        let mut out = hidden.clone();
        out.axpy(1.0, &a)?;
        Ok((
            out,
            EncoderCache {
                patches,
                hidden,
                attn,
            },
        ))
    }

    fn encode_backward(
        &self,
        c: &EncoderCache,
        d_out: &DenseMatrix,
        base: usize,
        grads: &mut [DenseMatrix],
    ) {
        let ag = attention_backward_parts(
            &self.params[base + 2],
            &self.params[base + 3],
            &c.attn,
            d_out,
        );
        let mut dh = d_out.clone();
        dh.axpy(1.0, &ag.input).expect("same shape");
        let dpre = DenseMatrix::from_fn(dh.rows(), dh.cols(), |i, j| {
            let h = c.hidden.get(i, j);
            dh.get(i, j) * (1.0 - h * h)
        });
        grads[base]
            .axpy(1.0, &dpre.tmm(&c.patches))
            .expect("same shape");
        grads[base + 1]
            .axpy(1.0, &column_sums(&dpre))
            .expect("same shape");
        grads[base + 2]
            .axpy(1.0, &ag.qkv_weight)
            .expect("same shape");
        grads[base + 3]
            .axpy(1.0, &ag.proj_weight)
            .expect("same shape");
    }

    fn cross_weights(&self) -> CrossWeights<'_> {
        CrossWeights {
            wq: &self.params[FUS_Q],
            wk: &self.params[FUS_K],
            wv: &self.params[FUS_V],
            wo: &self.params[FUS_O],
        }
    }

    fn check_sample(&self, s: &SyntheticLandmarkSample) -> Result<()> {
        let n = self.config.image_size;
        if s.height != n || s.width != n || s.image.len() != n * n || s.labels.len() != n * n {
            return Err(Error::dim(
                "DualEncoderToy",
                format!("{n}x{n} sample"),
                format!("{}x{}", s.height, s.width),
            ));
        }
        Ok(())
    }

    fn forward_cached(&self, s: &SyntheticLandmarkSample) -> Result<ForwardCache> {
        self.check_sample(s)?;
        let (f_sem, sem) = self.encode(&s.image, SEM_EMBED)?;
        let (f_dep, dep) = self.encode(&box_blur(&s.image, self.config.image_size), DEP_EMBED)?;
        let (c, cross) =
            cross_forward_parts(self.cross_weights(), self.config.heads, &f_dep, &f_sem)?;
        let mut fused = f_dep;
        fused.axpy(1.0, &c)?;
        let mut logits = fused.mmt(&self.params[DEC_W]);
        add_row_bias(&mut logits, &self.params[DEC_B]);
        let prob = logits.map(|z| 1.0 / (1.0 + (-z).exp()));
        Ok(ForwardCache {
            sem,
            dep,
            cross,
            fused,
            prob,
        })
    }

    /// Per-channel probabilities, channel-major `4×H×W`.
    pub fn predict(&self, s: &SyntheticLandmarkSample) -> Result<Vec<f64>> {
        Ok(self.to_grid(&self.forward_cached(s)?.prob))
    }

    /// Mean hybrid loss over `batch`.
    pub fn loss(&self, batch: &[&SyntheticLandmarkSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            let pred = self.predict(s)?;
            total += super::loss::hybrid_loss(&pred, &s.one_hot(), NUM_CLASSES, self.config.loss)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean hybrid loss over `batch` and its gradient for every parameter.
    pub fn loss_and_grad(
        &self,
        batch: &[&SyntheticLandmarkSample],
    ) -> Result<(f64, Vec<DenseMatrix>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grads: Vec<DenseMatrix> = self
            .params
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for s in batch {
            let c = self.forward_cached(s)?;
            let (l, dpred) = hybrid_loss_with_grad(
                &self.to_grid(&c.prob),
                &s.one_hot(),
                NUM_CLASSES,
                self.config.loss,
            )?;
            total += l;
            let dprob = self.grid_matrix(&dpred);
            let dlogits = DenseMatrix::from_fn(dprob.rows(), dprob.cols(), |i, j| {
                let p = c.prob.get(i, j);
                inv * dprob.get(i, j) * p * (1.0 - p)
            });
            grads[DEC_W].axpy(1.0, &dlogits.tmm(&c.fused))?;
            grads[DEC_B].axpy(1.0, &column_sums(&dlogits))?;
            let d_fused = dlogits.mm(&self.params[DEC_W]);
            let cg = cross_backward_parts(self.cross_weights(), &c.cross, &d_fused);
            grads[FUS_Q].axpy(1.0, &cg.wq)?;
            grads[FUS_K].axpy(1.0, &cg.wk)?;
            grads[FUS_V].axpy(1.0, &cg.wv)?;
            grads[FUS_O].axpy(1.0, &cg.wo)?;
            let mut d_dep = d_fused;
            d_dep.axpy(1.0, &cg.query_in)?;
            self.encode_backward(&c.dep, &d_dep, DEP_EMBED, &mut grads);
            self.encode_backward(&c.sem, &cg.kv_in, SEM_EMBED, &mut grads);
        }
        Ok((total * inv, grads))
    }

    /// Mean soft Dice coefficient over the landmark channels 1..4.
    pub fn mean_dice(&self, samples: &[SyntheticLandmarkSample]) -> Result<f64> {
        let mut acc = 0.0;
        for s in samples {
            let pred = self.predict(s)?;
            let t = s.one_hot();
            let px = s.height * s.width;
            let fg_pred = pred[px..].to_vec();
            let fg_t = t[px..].to_vec();
            acc += 1.0 - super::loss::dice_loss(&fg_pred, &fg_t, NUM_CLASSES - 1)?;
        }
        Ok(acc / samples.len().max(1) as f64)
    }
}
