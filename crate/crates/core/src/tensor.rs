//! Dense `f32` storage plus the two kernels the rest of the engine leans on:
//! row orthonormalization and Lloyd's k-means.
//!
//! Values are stored in 32-bit floats; every reduction accumulates in 64-bit.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Gram matrix `M·Mᵀ`, accumulated in `f64`.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| (0..self.rows).map(|j| dot(self.row(i), self.row(j))).collect())
            .collect()
    }

    /// Builds a matrix from a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Channel-major `d × h × w` tensor: element `(c, i, j)` lives at
/// `c·h·w + i·w + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Self {
            d,
            h,
            w,
            data: vec![0.0; d * h * w],
        }
    }

    pub fn from_vec(d: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != d * h * w {
            return Err(Error::Dimension(format!(
                "{d}x{h}x{w} tensor needs {} values, got {}",
                d * h * w,
                data.len()
            )));
        }
        Ok(Self { d, h, w, data })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    /// `(d, h, w)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    /// Number of spatial positions `h·w`.
    #[inline]
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.h + i) * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        self.data[(c * self.h + i) * self.w + j] = v;
    }

    /// The `h·w` plane of channel `c`.
    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies the feature vector at flat position `p = i·w + j` into `out`.
    #[inline]
    pub fn gather(&self, p: usize, out: &mut [f32]) {
        let n = self.h * self.w;
        for (c, o) in out.iter_mut().enumerate().take(self.d) {
            *o = self.data[c * n + p];
        }
    }

    pub fn vector_at(&self, i: usize, j: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.d];
        self.gather(i * self.w + j, &mut v);
        v
    }

    /// Reshapes to an `(h·w) × d` matrix of per-position feature vectors.
    pub fn to_points(&self) -> Matrix {
        let n = self.positions();
        let mut out = Matrix::zeros(n, self.d);
        for c in 0..self.d {
            for (p, &v) in self.plane(c).iter().enumerate() {
                out.data[p * self.d + c] = v;
            }
        }
        out
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

#[inline]
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// `k` orthonormal rows in `R^d`: Gaussian noise orthogonalized by modified
/// Gram–Schmidt with a second re-orthogonalization pass. The result equals
/// the `Q` factor of a thin QR factorization of the noise (up to row signs).
pub fn orthonormal_rows(seed: u64, k: usize, d: usize) -> Result<Matrix> {
    if k == 0 || d == 0 {
        return Err(Error::EmptyShape(format!("orthonormal_rows({k}, {d})")));
    }
    if k > d {
        return Err(Error::Dimension(format!(
            "cannot build {k} orthonormal vectors in R^{d}"
        )));
    }
    let mut rng = rng::rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    while q.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm0 = norm(&v);
        for _pass in 0..2 {
            for u in &q {
                let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let n = norm(&v);
        // Redraw if the sample was (numerically) inside the current span.
        if n <= 1e-8 * norm0.max(1.0) {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        q.push(v);
    }
    let mut data = Vec::with_capacity(k * d);
    for row in q {
        data.extend(row.into_iter().map(|x| x as f32));
    }
    Matrix::from_vec(k, d, data)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct Clustering {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, recorded after every
    /// assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Index of the nearest row of `centroids` to `x`; ties go to the lower index.
pub fn nearest(x: &[f32], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when an assignment step changes no label or after `max_iter`
/// assignment steps. A cluster left empty by an update is re-seeded at the
/// point farthest from its current centroid.
pub fn kmeans(points: &Matrix, k: usize, max_iter: usize, seed: u64) -> Result<Clustering> {
    let n = points.rows();
    if k == 0 || max_iter == 0 {
        return Err(Error::Config(format!(
            "kmeans needs k >= 1 and max_iter >= 1 (k={k}, max_iter={max_iter})"
        )));
    }
    if n < k {
        return Err(Error::InsufficientPoints { needed: k, got: n });
    }
    let d = points.cols();
    let mut rng = rng::rng(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);

    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0f64; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, x) in points.iter_rows().enumerate() {
            let (c, dist) = nearest(x, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = dist;
        }
        objective.push(dists.iter().sum());
        if !changed {
            break;
        }

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, x) in points.iter_rows().enumerate() {
            let c = labels[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *dst = (s * inv) as f32;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point from its own (freshly updated) centroid.
            let far = (0..n)
                .map(|i| (i, sq_dist(points.row(i), centroids.row(labels[i]))))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            let p = points.row(far).to_vec();
            centroids.row_mut(c).copy_from_slice(&p);
        }
    }
    Ok(Clustering {
        centroids,
        labels,
        objective,
        iterations,
    })
}

fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut best: Vec<f64> = points
        .iter_rows()
        .map(|x| sq_dist(x, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // All remaining mass is zero: every point coincides with a seed.
            rng.random_range(0..n)
        };
        let p = points.row(pick).to_vec();
        centroids.row_mut(c).copy_from_slice(&p);
        for (b, x) in best.iter_mut().zip(points.iter_rows()) {
            *b = b.min(sq_dist(x, &p));
        }
    }
    centroids
}

/// All-pairs Euclidean distances between the rows of `a` and `b`.
pub fn pairwise_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "pairwise_dist: {} vs {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, x) in a.iter_rows().enumerate() {
        for (j, y) in b.iter_rows().enumerate() {
            out.set(i, j, euclidean(x, y) as f32);
        }
    }
    Ok(out)
}
