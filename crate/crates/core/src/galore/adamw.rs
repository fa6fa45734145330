use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Hyperparameters of the element-wise Adam rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "adam parameters out of range: {self:?}"
            )))
        }
    }
}

/// Update both moments with `g` and overwrite `g` with the bias-corrected
/// Adam direction `m̂ / (√v̂ + ε)`. `t` is the 1-based step number.
pub(crate) fn adam_direction_in_place(
    moment1: &mut [f64],
    moment2: &mut [f64],
    g: &mut [f64],
    t: u64,
    p: &AdamParams,
) {
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - p.beta1.powi(t);
    let c2 = 1.0 - p.beta2.powi(t);
    for ((m, v), x) in moment1.iter_mut().zip(moment2.iter_mut()).zip(g.iter_mut()) {
        *m = p.beta1 * *m + (1.0 - p.beta1) * *x;
        *v = p.beta2 * *v + (1.0 - p.beta2) * *x * *x;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *x = m_hat / (v_hat.sqrt() + p.eps);
    }
}

/// `w ← w − lr·d − lr·λ·w`, decay taken on the pre-update weight.
pub(crate) fn apply_update(weight: &mut [f64], direction: &[f64], lr: f64, weight_decay: f64) {
    for (w, d) in weight.iter_mut().zip(direction) {
        let decay = lr * weight_decay * *w;
        *w = *w - lr * d - decay;
    }
}

/// Full-matrix AdamW state: two moments the size of the parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullAdamState {
    pub moment1: DenseMatrix,
    pub moment2: DenseMatrix,
    pub step: u64,
}

impl FullAdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            moment1: DenseMatrix::zeros(rows, cols),
            moment2: DenseMatrix::zeros(rows, cols),
            step: 0,
        }
    }

    /// Scalars held as optimizer state.
    pub fn state_scalars(&self) -> usize {
        self.moment1.len() + self.moment2.len()
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
pub fn full_adamw_step(
    weight: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut FullAdamState,
    lr: f64,
    params: &AdamParams,
    weight_decay: f64,
) -> Result<()> {
    if weight.shape() != grad.shape() || state.moment1.shape() != grad.shape() {
        return Err(Error::dim(
            "full_adamw_step",
            format!("{:?}", weight.shape()),
            format!(
                "grad {:?}, moments {:?}",
                grad.shape(),
                state.moment1.shape()
            ),
        ));
    }
    grad.ensure_finite("gradient")?;
    weight.ensure_finite("weight")?;
    if !lr.is_finite() || !weight_decay.is_finite() {
        return Err(Error::NonFinite {
            what: "learning rate or weight decay".into(),
        });
    }
    let mut dir = grad.clone().into_vec();
    adam_direction_in_place(
        state.moment1.as_mut_slice(),
        state.moment2.as_mut_slice(),
        &mut dir,
        state.step + 1,
        params,
    );
    apply_update(weight.as_mut_slice(), &dir, lr, weight_decay);
    state.step += 1;
    Ok(())
}
