//! Multi-head softmax attention with hand-written reverse mode.
//!
//! Tokens are rows. A linear layer with weight `W (out×in)` maps `X (L×in)`
//! to `X·Wᵀ`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Products;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub(crate) fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn softmax_rows(s: &mut DenseMatrix) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Saved activations of one multi-head attention evaluation.
#[derive(Debug, Clone)]
pub(crate) struct MhaCache {
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    attn: Vec<DenseMatrix>,
    heads: usize,
}

/// `concat_h softmax(Q_h K_hᵀ/√d_h) V_h` for row-token `Q (Lq×d)`, `K, V (Lk×d)`.
pub(crate) fn mha_forward(
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    heads: usize,
) -> (DenseMatrix, MhaCache) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DenseMatrix::zeros(q.rows(), d);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let mut s = q.column_block(a, b).mmt(&k.column_block(a, b));
        s.scale(scale);
        softmax_rows(&mut s);
        out.set_column_block(a, &s.mm(&v.column_block(a, b)));
        attn.push(s);
    }
    (
        out,
        MhaCache {
            q,
            k,
            v,
            attn,
            heads,
        },
    )
}

/// Gradients with respect to `Q`, `K`, `V` given the output gradient.
pub(crate) fn mha_backward(
    c: &MhaCache,
    d_out: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let d = c.q.cols();
    let dh = d / c.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = DenseMatrix::zeros(c.q.rows(), d);
    let mut dk = DenseMatrix::zeros(c.k.rows(), d);
    let mut dv = DenseMatrix::zeros(c.v.rows(), d);
    for (h, a_mat) in c.attn.iter().enumerate() {
        let (a, b) = (h * dh, (h + 1) * dh);
        let d_o = d_out.column_block(a, b);
        let vh = c.v.column_block(a, b);
        dv.set_column_block(a, &a_mat.tmm(&d_o));
        let mut ds = d_o.mmt(&vh);
        for i in 0..ds.rows() {
            let ar = a_mat.row(i);
            let row = ds.row_mut(i);
            let dot: f64 = row.iter().zip(ar).map(|(x, y)| x * y).sum();
            for (x, &p) in row.iter_mut().zip(ar) {
                *x = p * (*x - dot) * scale;
            }
        }
        dq.set_column_block(a, &ds.mm(&c.k.column_block(a, b)));
        dk.set_column_block(a, &ds.tmm(&c.q.column_block(a, b)));
    }
    (dq, dk, dv)
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "model dim {d} must be a positive multiple of head count {heads}"
        )));
    }
    Ok(())
}

fn check_tokens(context: &'static str, x: &DenseMatrix, dim: usize) -> Result<()> {
    if x.cols() != dim || x.rows() == 0 {
        return Err(Error::dim(
            context,
            format!("L×{dim} with L ≥ 1"),
            format!("{}×{}", x.rows(), x.cols()),
        ));
    }
    x.ensure_finite(context)
}

/// Self-attention block with fused `qkv (3d×d)` and output `proj (d×d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockToy {
    pub qkv_weight: DenseMatrix,
    pub proj_weight: DenseMatrix,
    pub head_count: usize,
    pub model_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: DenseMatrix,
    concat: DenseMatrix,
    mha: MhaCache,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub qkv_weight: DenseMatrix,
    pub proj_weight: DenseMatrix,
    pub input: DenseMatrix,
}

impl AttentionBlockToy {
    pub fn new<R: Rng + ?Sized>(model_dim: usize, head_count: usize, rng: &mut R) -> Result<Self> {
        check_heads(model_dim, head_count)?;
        Ok(Self {
            qkv_weight: init_weight(3 * model_dim, model_dim, rng),
            proj_weight: init_weight(model_dim, model_dim, rng),
            head_count,
            model_dim,
        })
    }

    pub fn from_weights(
        qkv_weight: DenseMatrix,
        proj_weight: DenseMatrix,
        head_count: usize,
    ) -> Result<Self> {
        let d = proj_weight.rows();
        check_heads(d, head_count)?;
        if qkv_weight.shape() != (3 * d, d) || proj_weight.shape() != (d, d) {
            return Err(Error::dim(
                "AttentionBlockToy",
                format!("qkv {}×{d}, proj {d}×{d}", 3 * d),
                format!(
                    "qkv {:?}, proj {:?}",
                    qkv_weight.shape(),
                    proj_weight.shape()
                ),
            ));
        }
        Ok(Self {
            qkv_weight,
            proj_weight,
            head_count,
            model_dim: d,
        })
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &DenseMatrix) -> Result<(DenseMatrix, AttentionCache)> {
        attention_forward_parts(&self.qkv_weight, &self.proj_weight, self.head_count, x)
    }

    pub fn backward(&self, cache: &AttentionCache, d_out: &DenseMatrix) -> AttentionGrads {
        attention_backward_parts(&self.qkv_weight, &self.proj_weight, cache, d_out)
    }
}

pub(crate) fn attention_forward_parts(
    qkv: &DenseMatrix,
    proj: &DenseMatrix,
    heads: usize,
    x: &DenseMatrix,
) -> Result<(DenseMatrix, AttentionCache)> {
    let d = proj.rows();
    check_tokens("attention_forward", x, d)?;
    let fused = x.mmt(qkv);
    let (q, k, v) = (
        fused.column_block(0, d),
        fused.column_block(d, 2 * d),
        fused.column_block(2 * d, 3 * d),
    );
    let (concat, mha) = mha_forward(q, k, v, heads);
    let y = concat.mmt(proj);
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            concat,
            mha,
        },
    ))
}

pub(crate) fn attention_backward_parts(
    qkv: &DenseMatrix,
    proj: &DenseMatrix,
    c: &AttentionCache,
    d_out: &DenseMatrix,
) -> AttentionGrads {
    let d = proj.rows();
    let d_proj = d_out.tmm(&c.concat);
    let d_concat = d_out.mm(proj);
    let (dq, dk, dv) = mha_backward(&c.mha, &d_concat);
    let mut d_fused = DenseMatrix::zeros(c.x.rows(), 3 * d);
    d_fused.set_column_block(0, &dq);
    d_fused.set_column_block(d, &dk);
    d_fused.set_column_block(2 * d, &dv);
    AttentionGrads {
        qkv_weight: d_fused.tmm(&c.x),
        proj_weight: d_proj,
        input: d_fused.mm(qkv),
    }
}

/// Multi-head self-attention: split `x·qkvᵀ` into Q, K, V, attend, project.
pub fn attention_forward(block: &AttentionBlockToy, x: &DenseMatrix) -> Result<DenseMatrix> {
    block.forward(x)
}

/// Cross-attention where one stream supplies queries and the other keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionFusion {
    /// `d×d_query`
    pub wq: DenseMatrix,
    /// `d×d_kv`
    pub wk: DenseMatrix,
    /// `d×d_kv`
    pub wv: DenseMatrix,
    /// `d_query×d`
    pub wo: DenseMatrix,
    pub head_count: usize,
}

#[derive(Debug, Clone)]
pub struct CrossCache {
    query_in: DenseMatrix,
    kv_in: DenseMatrix,
    concat: DenseMatrix,
    mha: MhaCache,
}

#[derive(Debug, Clone)]
pub struct CrossGrads {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub query_in: DenseMatrix,
    pub kv_in: DenseMatrix,
}

impl CrossAttentionFusion {
    pub fn new<R: Rng + ?Sized>(
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(model_dim, head_count)?;
        Ok(Self {
            wq: init_weight(model_dim, query_dim, rng),
            wk: init_weight(model_dim, kv_dim, rng),
            wv: init_weight(model_dim, kv_dim, rng),
            wo: init_weight(query_dim, model_dim, rng),
            head_count,
        })
    }

    pub fn query_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn kv_dim(&self) -> usize {
        self.wk.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        check_heads(d, self.head_count)?;
        let ok = self.wk.rows() == d
            && self.wv.shape() == self.wk.shape()
            && self.wo.shape() == (self.query_dim(), d);
        if !ok {
            return Err(Error::dim(
                "CrossAttentionFusion",
                "wq d×dq, wk/wv d×dkv, wo dq×d".to_string(),
                format!(
                    "wq {:?}, wk {:?}, wv {:?}, wo {:?}",
                    self.wq.shape(),
                    self.wk.shape(),
                    self.wv.shape(),
                    self.wo.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward_cached(
        &self,
        query_in: &DenseMatrix,
        kv_in: &DenseMatrix,
    ) -> Result<(DenseMatrix, CrossCache)> {
        self.validate()?;
        cross_forward_parts(self.weights(), self.head_count, query_in, kv_in)
    }

    pub fn backward(&self, c: &CrossCache, d_out: &DenseMatrix) -> CrossGrads {
        cross_backward_parts(self.weights(), c, d_out)
    }

    fn weights(&self) -> CrossWeights<'_> {
        CrossWeights {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            wo: &self.wo,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct CrossWeights<'a> {
    pub wq: &'a DenseMatrix,
    pub wk: &'a DenseMatrix,
    pub wv: &'a DenseMatrix,
    pub wo: &'a DenseMatrix,
}

pub(crate) fn cross_forward_parts(
    w: CrossWeights<'_>,
    heads: usize,
    query_in: &DenseMatrix,
    kv_in: &DenseMatrix,
) -> Result<(DenseMatrix, CrossCache)> {
    check_tokens("cross_attention_forward (query)", query_in, w.wq.cols())?;
    check_tokens("cross_attention_forward (key/value)", kv_in, w.wk.cols())?;
    let q = query_in.mmt(w.wq);
    let k = kv_in.mmt(w.wk);
    let v = kv_in.mmt(w.wv);
    let (concat, mha) = mha_forward(q, k, v, heads);
    let y = concat.mmt(w.wo);
    Ok((
        y,
        CrossCache {
            query_in: query_in.clone(),
            kv_in: kv_in.clone(),
            concat,
            mha,
        },
    ))
}

pub(crate) fn cross_backward_parts(
    w: CrossWeights<'_>,
    c: &CrossCache,
    d_out: &DenseMatrix,
) -> CrossGrads {
    let d_wo = d_out.tmm(&c.concat);
    let d_concat = d_out.mm(w.wo);
    let (dq, dk, dv) = mha_backward(&c.mha, &d_concat);
    let mut kv_in = dk.mm(w.wk);
    kv_in.axpy(1.0, &dv.mm(w.wv)).expect("same shape");
    CrossGrads {
        wq: dq.tmm(&c.query_in),
        wk: dk.tmm(&c.kv_in),
        wv: dv.tmm(&c.kv_in),
        wo: d_wo,
        query_in: dq.mm(w.wq),
        kv_in,
    }
}

/// `attention(Q = F_q·W_qᵀ, K = F_kv·W_kᵀ, V = F_kv·W_vᵀ)·W_oᵀ`.
pub fn cross_attention_forward(
    fusion: &CrossAttentionFusion,
    query_features: &DenseMatrix,
    kv_features: &DenseMatrix,
) -> Result<DenseMatrix> {
    fusion
        .forward_cached(query_features, kv_features)
        .map(|(y, _)| y)
}
