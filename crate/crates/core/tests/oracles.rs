//! Independent 64-bit reference implementations checked against the crate.

use lemo_core::anonce::{anonce_loss, LossConfig};
use lemo_core::memory::{assign_pos_neg, PrototypeBank};
use lemo_core::scorer::{anomaly_map, ScoreOptions};
use lemo_core::{Matrix, Tensor3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loss of one frame with a fixed positive set per position, all in f64.
/// `z` is position-major (`n × d`), `p` is `k × d`.
fn reference_loss(z: &[f64], p: &[f64], n: usize, d: usize, k: usize, pos: &[Vec<usize>], cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let dist: f64 = (0..d).map(|c| (z[i * d + c] - p[j * d + c]).powi(2)).sum::<f64>().sqrt();
                -(dist - cfg.r).max(0.0) / cfg.tau
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let all: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let posi: f64 = pos[i].iter().map(|&j| (logits[j] - m).exp()).sum();
        total += -(posi / all).ln();
    }
    total / n as f64
}

struct Instance {
    z: Tensor3,
    bank: PrototypeBank,
    cfg: LossConfig,
}

fn instance(seed: u64) -> Instance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = r.random_range(4..=16);
    let h = r.random_range(2..=4);
    let w = r.random_range(2..=4);
    let k = r.random_range(3..=10);
    let z: Vec<f32> = (0..d * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    let p: Vec<f32> = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
    Instance {
        z: Tensor3::from_vec(d, h, w, z).unwrap(),
        bank: PrototypeBank::from_protos(Matrix::from_vec(k, d, p).unwrap()).unwrap(),
        cfg: LossConfig {
            n_pos: r.random_range(1..k),
            ..LossConfig::default()
        },
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Central-difference gradients of the reference loss, perturbation `h`.
fn finite_differences(inst: &Instance, h: f64) -> (Vec<f64>, Vec<f64>) {
    let (d, hh, ww) = inst.z.shape();
    let n = hh * ww;
    let k = inst.bank.k();
    let mut z: Vec<f64> = Vec::with_capacity(n * d);
    let mut buf = vec![0.0f32; d];
    let mut pos = Vec::with_capacity(n);
    for i in 0..n {
        inst.z.gather(i, &mut buf);
        z.extend(buf.iter().map(|&v| f64::from(v)));
        pos.push(assign_pos_neg(&buf, &inst.bank, inst.cfg.n_pos).unwrap().positives);
    }
    let mut p: Vec<f64> = inst.bank.protos.as_slice().iter().map(|&v| f64::from(v)).collect();
    let mut gz = vec![0.0; n * d];
    for idx in 0..n * d {
        let orig = z[idx];
        z[idx] = orig + h;
        let up = reference_loss(&z, &p, n, d, k, &pos, &inst.cfg);
        z[idx] = orig - h;
        let down = reference_loss(&z, &p, n, d, k, &pos, &inst.cfg);
        z[idx] = orig;
        gz[idx] = (up - down) / (2.0 * h);
    }
    let mut gp = vec![0.0; k * d];
    for idx in 0..k * d {
        let orig = p[idx];
        p[idx] = orig + h;
        let up = reference_loss(&z, &p, n, d, k, &pos, &inst.cfg);
        p[idx] = orig - h;
        let down = reference_loss(&z, &p, n, d, k, &pos, &inst.cfg);
        p[idx] = orig;
        gp[idx] = (up - down) / (2.0 * h);
    }
    (gz, gp)
}

/// Analytic gradient of `z` reordered to position-major.
fn analytic_grad_z(g: &Tensor3) -> Vec<f64> {
    let (d, h, w) = g.shape();
    let mut out = Vec::with_capacity(d * h * w);
    let mut buf = vec![0.0f32; d];
    for i in 0..h * w {
        g.gather(i, &mut buf);
        out.extend(buf.iter().map(|&v| f64::from(v)));
    }
    out
}

#[test]
fn loss_gradients_match_central_differences() {
    for seed in 0..24 {
        let inst = instance(seed);
        let out = anonce_loss(&inst.z, &inst.bank, &inst.cfg).unwrap();
        let (fd_z, fd_p) = finite_differences(&inst, 1e-3);
        let ez = rel_err(&analytic_grad_z(&out.grad_z), &fd_z);
        let gp: Vec<f64> = out.grad_p.as_slice().iter().map(|&v| f64::from(v)).collect();
        let ep = rel_err(&gp, &fd_p);
        assert!(ez <= 1e-4 && ep <= 1e-4, "seed {seed}: grad_z err {ez:e}, grad_p err {ep:e}");
    }
}

#[test]
fn loss_value_matches_reference() {
    for seed in 100..120 {
        let inst = instance(seed);
        let out = anonce_loss(&inst.z, &inst.bank, &inst.cfg).unwrap();
        let (d, h, w) = inst.z.shape();
        let n = h * w;
        let mut z = Vec::new();
        let mut pos = Vec::new();
        let mut buf = vec![0.0f32; d];
        for i in 0..n {
            inst.z.gather(i, &mut buf);
            z.extend(buf.iter().map(|&v| f64::from(v)));
            pos.push(assign_pos_neg(&buf, &inst.bank, inst.cfg.n_pos).unwrap().positives);
        }
        let p: Vec<f64> = inst.bank.protos.as_slice().iter().map(|&v| f64::from(v)).collect();
        let want = reference_loss(&z, &p, n, d, inst.bank.k(), &pos, &inst.cfg);
        assert!((out.loss - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", out.loss);
    }
}

/// Direct evaluation of the match and anomaly scores, no stabilization.
fn reference_scores(z: &Tensor3, bank: &PrototypeBank) -> (Vec<f64>, Vec<f64>) {
    let (d, h, w) = z.shape();
    let (mut s, mut a) = (Vec::new(), Vec::new());
    for i in 0..h * w {
        let dists: Vec<f64> = (0..bank.k())
            .map(|k| {
                (0..d)
                    .map(|c| {
                        let diff = f64::from(z.as_slice()[c * h * w + i]) - f64::from(bank.protos.get(k, c));
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let denom: f64 = dists.iter().map(|d| (-d).exp()).sum();
        s.push(min);
        a.push((-min).exp() / denom * min);
    }
    (s, a)
}

#[test]
fn anomaly_map_matches_direct_evaluation() {
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (d, h, w, k) = (r.random_range(2..=16), r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=10));
        let p: Vec<f32> = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let bank = PrototypeBank::from_protos(Matrix::from_vec(k, d, p).unwrap()).unwrap();
        let mut z = Tensor3::from_vec(d, h, w, (0..d * h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        // Pin the first position onto a prototype.
        let pin = r.random_range(0..k);
        for c in 0..d {
            z.set(c, 0, 0, bank.protos.get(pin, c));
        }
        let map = anomaly_map(&z, &bank, &ScoreOptions::default()).unwrap();
        let (s, a) = reference_scores(&z, &bank);
        for i in 0..h * w {
            assert!((f64::from(map.s.as_slice()[i]) - s[i]).abs() <= 1e-6, "seed {seed} S[{i}]");
            assert!((f64::from(map.a.as_slice()[i]) - a[i]).abs() <= 1e-6, "seed {seed} A[{i}]");
            if map.s.as_slice()[i] == 0.0 {
                assert_eq!(map.a.as_slice()[i], 0.0);
            }
        }
        assert_eq!(map.s.as_slice()[0], 0.0);
        assert_eq!(map.a.as_slice()[0], 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_finite(seed in any::<u64>()) {
        let inst = instance(seed);
        let out = anonce_loss(&inst.z, &inst.bank, &inst.cfg).unwrap();
        prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
    }

    #[test]
    fn anomaly_score_never_exceeds_match_score(seed in any::<u64>()) {
        let inst = instance(seed);
        let map = anomaly_map(&inst.z, &inst.bank, &ScoreOptions::default()).unwrap();
        for (a, s) in map.a.as_slice().iter().zip(map.s.as_slice()) {
            prop_assert!(*a >= 0.0 && a <= s);
        }
    }
}
