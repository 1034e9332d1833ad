//! Anomaly scoring against a (snapshot of the) prototype bank.
//!
//! Per position the match score is the distance to the nearest prototype,
//! `S = min_k ‖z − p_k‖`, and the anomaly score reweights it by how
//! unambiguous that match is:
//!
//! ```text
//! A = e^{−S} / Σ_k e^{−‖z − p_k‖} · S
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::PrototypeBank;
use crate::resample::bilinear;
use crate::tensor::{Matrix, Tensor3};

/// How a score map is collapsed to one image-level score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImageAggregation {
    Max,
    /// Mean of the highest `q` fraction of positions.
    TopMean { q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    pub aggregation: ImageAggregation,
    /// Gaussian smoothing of the anomaly map, σ in grid cells. Off when unset.
    pub smoothing_sigma: Option<f64>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            aggregation: ImageAggregation::Max,
            smoothing_sigma: None,
        }
    }
}

impl ScoreOptions {
    pub fn validate(&self) -> Result<()> {
        if let ImageAggregation::TopMean { q } = self.aggregation {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("top-mean fraction must lie in (0, 1], got {q}")));
            }
        }
        if let Some(s) = self.smoothing_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("smoothing sigma must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// Match scores, `H × W`.
    pub s: Matrix,
    /// Anomaly scores, `H × W`.
    pub a: Matrix,
    pub image_score: f32,
    /// `a` resized to mask resolution.
    pub upsampled: Option<Matrix>,
}

fn check_shapes(z: &Tensor3, bank: &PrototypeBank) -> Result<()> {
    if z.channels() != bank.dim() {
        return Err(Error::Dimension(format!(
            "features have {} channels, bank has {}",
            z.channels(),
            bank.dim()
        )));
    }
    Ok(())
}

/// Visits every position with its distances to all prototypes.
fn for_each_position(z: &Tensor3, bank: &PrototypeBank, mut f: impl FnMut(usize, &[f64])) {
    let n = z.positions();
    let k = bank.k();
    // Squared distances laid out `[k][p]`, accumulated one channel plane at
    // a time so the inner loop runs over contiguous memory.
    let mut dist2 = vec![0.0f64; k * n];
    for (c, plane) in z.as_slice().chunks_exact(n).enumerate() {
        for (ki, row) in dist2.chunks_exact_mut(n).enumerate() {
            let centre = f64::from(bank.protos.get(ki, c));
            for (acc, &v) in row.iter_mut().zip(plane) {
                let diff = f64::from(v) - centre;
                *acc += diff * diff;
            }
        }
    }
    let mut dists = vec![0.0f64; k];
    for p in 0..n {
        for (ki, dst) in dists.iter_mut().enumerate() {
            *dst = dist2[ki * n + p].sqrt();
        }
        f(p, &dists);
    }
}

/// `S(i, j) = min_k ‖z(i, j) − p_k‖`
pub fn match_score(z: &Tensor3, bank: &PrototypeBank) -> Result<Matrix> {
    check_shapes(z, bank)?;
    let mut s = Matrix::zeros(z.height(), z.width());
    for_each_position(z, bank, |p, dists| {
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        s.as_mut_slice()[p] = min as f32;
    });
    Ok(s)
}

/// Full score map; `image_score` uses `opts.aggregation` over `a` (after
/// optional smoothing).
pub fn anomaly_map(z: &Tensor3, bank: &PrototypeBank, opts: &ScoreOptions) -> Result<ScoreMap> {
    check_shapes(z, bank)?;
    let (h, w) = (z.height(), z.width());
    let mut s = Matrix::zeros(h, w);
    let mut a = Matrix::zeros(h, w);
    let mut bad = None;
    for_each_position(z, bank, |p, dists| {
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        // e^{−S} / Σ e^{−d_k} = 1 / Σ e^{−(d_k − S)}; every exponent is ≤ 0.
        let denom: f64 = dists.iter().map(|&d| (-(d - min)).exp()).sum();
        let weight = 1.0 / denom;
        let score = weight * min;
        if !score.is_finite() && bad.is_none() {
            bad = Some(p);
        }
        s.as_mut_slice()[p] = min as f32;
        a.as_mut_slice()[p] = score as f32;
    });
    if let Some(p) = bad {
        return Err(Error::Numerical {
            context: format!("anomaly score at ({}, {})", p / w, p % w),
        });
    }
    if let Some(sigma) = opts.smoothing_sigma {
        a = gaussian_blur(&a, sigma);
    }
    let image_score = aggregate(&a, opts.aggregation);
    Ok(ScoreMap {
        s,
        a,
        image_score,
        upsampled: None,
    })
}

pub fn aggregate(a: &Matrix, how: ImageAggregation) -> f32 {
    match how {
        ImageAggregation::Max => a.max(),
        ImageAggregation::TopMean { q } => {
            let mut v: Vec<f32> = a.as_slice().to_vec();
            v.sort_by(|x, y| y.total_cmp(x));
            let take = ((v.len() as f64 * q).ceil() as usize).clamp(1, v.len());
            (v[..take].iter().map(|&x| f64::from(x)).sum::<f64>() / take as f64) as f32
        }
    }
}

/// Bilinear resize of a score grid to mask resolution.
pub fn upsample_scores(a: &Matrix, out_h: usize, out_w: usize) -> Result<Matrix> {
    if out_h < a.rows() || out_w < a.cols() {
        return Err(Error::Dimension(format!(
            "cannot upsample {}x{} to smaller {out_h}x{out_w}",
            a.rows(),
            a.cols()
        )));
    }
    Matrix::from_vec(
        out_h,
        out_w,
        bilinear(a.as_slice(), a.rows(), a.cols(), out_h, out_w),
    )
}

impl ScoreMap {
    /// Attaches the map resized to `(out_h, out_w)`.
    pub fn upsample_to(&mut self, out_h: usize, out_w: usize) -> Result<&Matrix> {
        let up = upsample_scores(&self.a, out_h, out_w)?;
        Ok(self.upsampled.insert(up))
    }
}

/// Separable Gaussian blur, kernel truncated at 4σ, edges reflected.
pub fn gaussian_blur(m: &Matrix, sigma: f64) -> Matrix {
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut i = i.rem_euclid(period);
        if i >= n {
            i = period - i;
        }
        i as usize
    };
    let (h, w) = (m.rows(), m.cols());
    let mut tmp = Matrix::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - radius, w);
                acc += k * f64::from(m.get(i, jj));
            }
            tmp.set(i, j, acc as f32);
        }
    }
    let mut out = Matrix::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - radius, h);
                acc += k * f64::from(tmp.get(ii, j));
            }
            out.set(i, j, acc as f32);
        }
    }
    out
}
