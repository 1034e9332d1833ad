//! The prototype memory bank: `K` learnable vectors in feature space.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng;
use crate::tensor::{euclidean, kmeans, nearest, orthonormal_rows, Matrix, Tensor3};

/// Lloyd iterations for the single-image initialization and the 2-means
/// splits of the rebalancing update.
const KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `K × D`
    pub protos: Matrix,
    /// Group sizes from the latest rebalancing pass.
    pub counts: Vec<usize>,
    pub state: AdamState,
}

impl PrototypeBank {
    pub fn from_protos(protos: Matrix) -> Result<Self> {
        if protos.rows() == 0 || protos.cols() == 0 {
            return Err(Error::EmptyShape("prototype bank".into()));
        }
        if !protos.is_finite() {
            return Err(Error::Numerical {
                context: "prototype bank".into(),
            });
        }
        Ok(Self {
            counts: vec![0; protos.rows()],
            state: AdamState::new(protos.rows() * protos.cols()),
            protos,
        })
    }

    /// Orthonormal rows from QR of Gaussian noise.
    pub fn init_decoupled_noise(k: usize, d: usize, seed: u64) -> Result<Self> {
        Self::from_protos(orthonormal_rows(seed, k, d)?)
    }

    /// I.i.d. standard normal rows, not orthogonalized.
    pub fn init_random_noise(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::EmptyShape(format!("random bank {k}x{d}")));
        }
        let mut r = rng::rng(seed);
        let v = (0..k * d).map(|_| StandardNormal.sample(&mut r)).collect();
        Self::from_protos(Matrix::from_vec(k, d, v)?)
    }

    /// k-means centroids of the per-position features of one frame.
    pub fn init_single_image(z0: &Tensor3, k: usize, seed: u64) -> Result<Self> {
        let points = z0.to_points();
        if points.rows() < k {
            return Err(Error::InsufficientPoints {
                needed: k,
                got: points.rows(),
            });
        }
        let c = kmeans(&points, k, KMEANS_ITERS, seed)?;
        Self::from_protos(c.centroids)
    }

    pub fn k(&self) -> usize {
        self.protos.rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    /// Prototypes plus both Adam moments.
    pub fn stored_floats(&self) -> usize {
        3 * self.k() * self.dim()
    }

    pub fn apply_gradient(&mut self, grad: &Matrix, hyper: &AdamHyper) -> Result<()> {
        if grad.rows() != self.k() || grad.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "prototype gradient {}x{} for a {}x{} bank",
                grad.rows(),
                grad.cols(),
                self.k(),
                self.dim()
            )));
        }
        adam_step(
            self.protos.as_mut_slice(),
            grad.as_slice(),
            &mut self.state,
            hyper,
        )
    }

    /// Hash of the prototype bits, counts and step counter.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.k().hash(&mut h);
        self.dim().hash(&mut h);
        for v in self.protos.as_slice() {
            v.to_bits().hash(&mut h);
        }
        self.counts.hash(&mut h);
        self.state.step.hash(&mut h);
        h.finish()
    }

    pub fn sidecar(&self) -> BankSidecar {
        BankSidecar {
            k: self.k(),
            d: self.dim(),
            counts: self.counts.clone(),
            step_count: self.state.step,
        }
    }
}

/// JSON sidecar written next to a bank checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSidecar {
    pub k: usize,
    pub d: usize,
    pub counts: Vec<usize>,
    pub step_count: u64,
}

/// Positive / negative split of the prototype indices for one feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosNeg {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Ranks indices by distance, ties broken by the lower index.
pub(crate) fn rank_by_distance(dists: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order
}

pub(crate) fn check_n_pos(n_pos: usize, k: usize) -> Result<()> {
    if n_pos == 0 || n_pos >= k {
        return Err(Error::Config(format!(
            "n_pos must satisfy 1 <= n_pos < K (n_pos={n_pos}, K={k})"
        )));
    }
    Ok(())
}

/// The `n_pos` nearest prototypes are positives, the rest negatives. Both
/// lists are in ascending index order.
pub fn assign_pos_neg(z: &[f32], bank: &PrototypeBank, n_pos: usize) -> Result<PosNeg> {
    check_n_pos(n_pos, bank.k())?;
    if z.len() != bank.dim() {
        return Err(Error::Dimension(format!(
            "feature of {} for a {}-dim bank",
            z.len(),
            bank.dim()
        )));
    }
    let dists: Vec<f64> = bank.protos.iter_rows().map(|p| euclidean(z, p)).collect();
    let order = rank_by_distance(&dists);
    let mut positives = order[..n_pos].to_vec();
    let mut negatives = order[n_pos..].to_vec();
    positives.sort_unstable();
    negatives.sort_unstable();
    Ok(PosNeg {
        positives,
        negatives,
    })
}

/// What a rebalancing pass did.
#[derive(Debug, Clone, PartialEq)]
pub struct Rebalance {
    /// Final group of each position.
    pub labels: Vec<usize>,
    /// `(deficient, largest)` pairs in the order they were merged and split.
    pub merges: Vec<(usize, usize)>,
}

/// Feature-enhanced update: reassign the frame's features to their nearest
/// prototypes, move every non-empty prototype to its group centroid, then
/// repeatedly merge the smallest under-filled group into the largest one and
/// split the union in two with 2-means.
///
/// A group is under-filled when it holds fewer than
/// `ceil(min_frac · H·W / K)` features. If a 2-means split leaves one side
/// under-filled, the boundary features closest to the other side are moved
/// across until both halves reach the floor.
pub fn feature_enhanced_update(
    bank: &mut PrototypeBank,
    z: &Tensor3,
    min_frac: f64,
    seed: u64,
) -> Result<Rebalance> {
    if !(min_frac > 0.0 && min_frac < 1.0) {
        return Err(Error::Config(format!("min_frac must lie in (0, 1), got {min_frac}")));
    }
    let k = bank.k();
    if z.channels() != bank.dim() {
        return Err(Error::Dimension(format!(
            "features have {} channels, bank has {}",
            z.channels(),
            bank.dim()
        )));
    }
    let points = z.to_points();
    let n = points.rows();
    if n < 2 * k {
        return Err(Error::InsufficientPoints {
            needed: 2 * k,
            got: n,
        });
    }
    let floor = (min_frac * n as f64 / k as f64).ceil() as usize;

    let mut labels: Vec<usize> = points
        .iter_rows()
        .map(|x| nearest(x, &bank.protos).0)
        .collect();
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if !members.is_empty() {
            set_centroid(&mut bank.protos, c, &points, &members);
        }
    }

    let mut merges = Vec::new();
    let mut round = 0u64;
    loop {
        let sizes = group_sizes(&labels, k);
        let Some(small) = (0..k)
            .filter(|&c| sizes[c] < floor)
            .min_by_key(|&c| (sizes[c], c))
        else {
            break;
        };
        let large = (0..k)
            .max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))
            .expect("k >= 1");
        let members: Vec<usize> = (0..n)
            .filter(|&i| labels[i] == small || labels[i] == large)
            .collect();
        if members.len() < 2 * floor {
            return Err(Error::Config(format!(
                "min_frac {min_frac} is too large to rebalance {n} features into {k} groups"
            )));
        }
        let subset = points.select_rows(&members);
        let split = kmeans(
            &subset,
            2,
            KMEANS_ITERS,
            rng::derive_seed(seed, &[round]),
        )?;
        let sides = balance_split(&subset, &split.centroids, split.labels, floor);
        for (&i, &side) in members.iter().zip(&sides) {
            labels[i] = if side == 0 { small } else { large };
        }
        for c in [small, large] {
            let group: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            set_centroid(&mut bank.protos, c, &points, &group);
        }
        // Both touched groups now meet the floor and no other group changed,
        // so this loop runs at most K times.
        merges.push((small, large));
        round += 1;
    }
    bank.counts = group_sizes(&labels, k);
    Ok(Rebalance { labels, merges })
}

fn group_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut s = vec![0; k];
    for &l in labels {
        s[l] += 1;
    }
    s
}

fn set_centroid(protos: &mut Matrix, c: usize, points: &Matrix, members: &[usize]) {
    let d = points.cols();
    let mut acc = vec![0.0f64; d];
    for &i in members {
        for (a, &v) in acc.iter_mut().zip(points.row(i)) {
            *a += f64::from(v);
        }
    }
    let inv = 1.0 / members.len() as f64;
    for (dst, a) in protos.row_mut(c).iter_mut().zip(&acc) {
        *dst = (a * inv) as f32;
    }
}

/// Moves points from the bigger side of a 2-way split to the smaller one,
/// cheapest first, until both sides hold at least `floor` points.
fn balance_split(points: &Matrix, centroids: &Matrix, mut sides: Vec<usize>, floor: usize) -> Vec<usize> {
    let count = |s: &[usize], side: usize| s.iter().filter(|&&x| x == side).count();
    for short in 0..2 {
        let have = count(&sides, short);
        if have >= floor {
            continue;
        }
        let long = 1 - short;
        let mut movable: Vec<(f64, usize)> = sides
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == long)
            .map(|(i, _)| {
                let x = points.row(i);
                (
                    euclidean(x, centroids.row(short)) - euclidean(x, centroids.row(long)),
                    i,
                )
            })
            .collect();
        movable.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in movable.iter().take(floor - have) {
            sides[i] = short;
        }
    }
    sides
}
