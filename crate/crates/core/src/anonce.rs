//! Contrastive over-cluster loss between per-position features and the
//! prototype bank, with exact analytic gradients.
//!
//! For a feature `z` with positive set `P` (its `n_pos` nearest prototypes)
//! the per-position term is
//!
//! ```text
//! ℓ_k  = −max(‖z − p_k‖ − r, 0) / τ
//! loss = −log Σ_{k∈P} e^{ℓ_k} + log Σ_k e^{ℓ_k}
//! ```
//!
//! and the frame loss is the mean over all `H·W` positions. The positive set
//! is chosen before differentiation and held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{check_n_pos, rank_by_distance, PrototypeBank};
use crate::tensor::{Matrix, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature.
    pub tau: f64,
    /// Distance margin below which a prototype counts as matched.
    pub r: f64,
    pub n_pos: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            r: 1e-5,
            n_pos: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("r must be >= 0, got {}", self.r)));
        }
        check_n_pos(self.n_pos, k)
    }
}

/// `max(d − r, 0)`
#[inline]
pub fn margin_dist(d: f64, r: f64) -> f64 {
    (d - r).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `∂loss/∂z`, same shape as the features.
    pub grad_z: Tensor3,
    /// `∂loss/∂P`, `K × D`.
    pub grad_p: Matrix,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss and gradients for one frame of features against the bank.
pub fn anonce_loss(z: &Tensor3, bank: &PrototypeBank, cfg: &LossConfig) -> Result<LossOutput> {
    let (d, h, w) = z.shape();
    let k = bank.k();
    if d != bank.dim() {
        return Err(Error::Dimension(format!(
            "features have {d} channels, bank has {}",
            bank.dim()
        )));
    }
    cfg.validate(k)?;
    let n = h * w;
    if n == 0 {
        return Err(Error::EmptyShape("feature grid".into()));
    }
    let inv_n = 1.0 / n as f64;
    let inv_tau = 1.0 / cfg.tau;

    let protos: Vec<Vec<f64>> = bank
        .protos
        .iter_rows()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();

    let mut total = 0.0f64;
    let mut grad_z = vec![0.0f32; d * n];
    let mut grad_p = vec![0.0f64; k * d];
    let mut x = vec![0.0f32; d];
    let mut diffs = vec![0.0f64; k * d];
    let mut dists = vec![0.0f64; k];
    let mut logits = vec![0.0f64; k];
    let mut is_pos = vec![false; k];

    for p in 0..n {
        z.gather(p, &mut x);
        for (kk, proto) in protos.iter().enumerate() {
            let row = &mut diffs[kk * d..(kk + 1) * d];
            let mut s = 0.0;
            for ((dst, &zi), &pi) in row.iter_mut().zip(&x).zip(proto) {
                let v = f64::from(zi) - pi;
                *dst = v;
                s += v * v;
            }
            dists[kk] = s.sqrt();
            logits[kk] = -margin_dist(dists[kk], cfg.r) * inv_tau;
        }
        is_pos.fill(false);
        for &i in &rank_by_distance(&dists)[..cfg.n_pos] {
            is_pos[i] = true;
        }

        let lse_all = log_sum_exp(logits.iter().copied());
        let lse_pos = log_sum_exp((0..k).filter(|&i| is_pos[i]).map(|i| logits[i]));
        let loss = lse_all - lse_pos;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                context: format!("loss at position ({}, {})", p / w, p % w),
            });
        }
        total += loss;

        // ∂loss/∂ℓ_k = softmax_all(k) − [k∈P]·softmax_pos(k)
        for kk in 0..k {
            let mut coeff = (logits[kk] - lse_all).exp();
            if is_pos[kk] {
                coeff -= (logits[kk] - lse_pos).exp();
            }
            let dist = dists[kk];
            // Zero sub-gradient where the margin clips or the distance vanishes.
            if dist <= cfg.r || dist == 0.0 {
                continue;
            }
            // ∂ℓ/∂z = −(z − p)/(τ·‖z − p‖)
            let g = -coeff * inv_tau / dist * inv_n;
            let diff = &diffs[kk * d..(kk + 1) * d];
            for c in 0..d {
                let v = g * diff[c];
                grad_z[c * n + p] += v as f32;
                grad_p[kk * d + c] -= v;
            }
        }
    }
    let loss = total * inv_n;
    let grad_z = Tensor3::from_vec(d, h, w, grad_z)?;
    let grad_p = Matrix::from_vec(k, d, grad_p.into_iter().map(|v| v as f32).collect())?;
    if !grad_z.is_finite() || !grad_p.is_finite() {
        return Err(Error::Numerical {
            context: "AnoNCE gradient".into(),
        });
    }
    Ok(LossOutput {
        loss,
        grad_z,
        grad_p,
    })
}
