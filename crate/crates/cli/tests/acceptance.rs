//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line with its
//! measured values and runtime; the process fails if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use lemo_cli::commands::report_metrics;
use lemo_cli::{cmd_bench, cmd_run, BenchArgs, RunArgs};
use lemo_core::anonce::{anonce_loss, LossConfig};
use lemo_core::engine::{Engine, EngineConfig, EvalOptions, InitStrategy, UpdateStrategy};
use lemo_core::experiments::{run_ablation_grid, run_drift_experiment, run_protocol, DriftMode, SyntheticProtocol};
use lemo_core::memory::{assign_pos_neg, feature_enhanced_update, PrototypeBank};
use lemo_core::metrics::auroc;
use lemo_core::rng::rng;
use lemo_core::scorer::{anomaly_map, ScoreOptions};
use lemo_core::synth::{DriftKind, DriftSpec, SynthConfig, SynthSource};
use lemo_core::{Matrix, StreamFrame, Tensor3};
use rand::Rng;

// Allocation accounting, per thread so concurrent work elsewhere in the
// process does not leak into a measurement.

struct Counting;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn track(delta: isize) {
    let _ = LIVE.try_with(|l| {
        let now = l.get() + delta;
        l.set(now);
        let _ = PEAK.try_with(|p| p.set(p.get().max(now)));
    });
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            track(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            track(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        track(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            track(new_size as isize - layout.size() as isize);
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn live_bytes() -> isize {
    LIVE.with(Cell::get)
}

/// Restarts peak tracking from the current live level.
fn reset_peak() {
    PEAK.with(|p| p.set(live_bytes()));
}

fn peak_bytes() -> isize {
    PEAK.with(Cell::get)
}

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// Gradient check.

/// Loss of one frame with fixed positive sets, all in f64. `z` is
/// position-major `n × d`, `p` is `k × d`.
fn reference_loss(z: &[f64], p: &[f64], dims: (usize, usize, usize), pos: &[Vec<usize>], cfg: &LossConfig) -> f64 {
    let (n, d, k) = dims;
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let dist = (0..d).map(|c| (z[i * d + c] - p[j * d + c]).powi(2)).sum::<f64>().sqrt();
                -(dist - cfg.r).max(0.0) / cfg.tau
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let all: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let hit: f64 = pos[i].iter().map(|&j| (logits[j] - m).exp()).sum();
        total -= (hit / all).ln();
    }
    total / n as f64
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn position_major(t: &Tensor3) -> Vec<f64> {
    let d = t.channels();
    let mut buf = vec![0.0f32; d];
    let mut out = Vec::with_capacity(t.as_slice().len());
    for i in 0..t.positions() {
        t.gather(i, &mut buf);
        out.extend(buf.iter().map(|&v| f64::from(v)));
    }
    out
}

fn gradient_check() -> Check {
    const INSTANCES: u64 = 24;
    const H: f64 = 1e-3;
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (d, hh, ww, k) = (
            r.random_range(4..=16),
            r.random_range(2..=4),
            r.random_range(2..=4),
            r.random_range(3..=10),
        );
        let z = Tensor3::from_vec(d, hh, ww, (0..d * hh * ww).map(|_| r.random_range(-1.0..1.0)).collect())
            .map_err(fail)?;
        let bank = PrototypeBank::from_protos(
            Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect()).map_err(fail)?,
        )
        .map_err(fail)?;
        let cfg = LossConfig {
            n_pos: r.random_range(1..k),
            ..LossConfig::default()
        };
        let out = anonce_loss(&z, &bank, &cfg).map_err(fail)?;

        let n = hh * ww;
        let mut zs = position_major(&z);
        let mut buf = vec![0.0f32; d];
        let pos: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                z.gather(i, &mut buf);
                assign_pos_neg(&buf, &bank, cfg.n_pos).map(|pn| pn.positives)
            })
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        let mut ps: Vec<f64> = bank.protos.as_slice().iter().map(|&v| f64::from(v)).collect();
        let dims = (n, d, k);
        let central = |buf: &mut Vec<f64>, idx: usize, eval: &dyn Fn(&[f64]) -> f64| {
            let orig = buf[idx];
            buf[idx] = orig + H;
            let up = eval(buf);
            buf[idx] = orig - H;
            let down = eval(buf);
            buf[idx] = orig;
            (up - down) / (2.0 * H)
        };
        let fd_z: Vec<f64> = (0..n * d)
            .map(|i| {
                let ps = ps.clone();
                central(&mut zs, i, &|zz| reference_loss(zz, &ps, dims, &pos, &cfg))
            })
            .collect();
        let fd_p: Vec<f64> = (0..k * d)
            .map(|i| {
                let zz = zs.clone();
                central(&mut ps, i, &|pp| reference_loss(&zz, pp, dims, &pos, &cfg))
            })
            .collect();
        let gz = position_major(&out.grad_z);
        let gp: Vec<f64> = out.grad_p.as_slice().iter().map(|&v| f64::from(v)).collect();
        worst = worst.max(rel_err(&gz, &fd_z)).max(rel_err(&gp, &fd_p));
    }
    ensure(worst <= 1e-4, format!("{INSTANCES} instances, max rel err {worst:.2e} (<= 1e-4)"))
}

fn orthogonal_init() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let bank = PrototypeBank::init_decoupled_noise(10, 1792, seed).map_err(fail)?;
        for (i, row) in bank.protos.gram().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
    }
    ensure(worst <= 1e-5, format!("50 seeds K=10 D=1792, max |PP^T - I| {worst:.2e} (<= 1e-5)"))
}

fn anomaly_map_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut zero_hits = 0;
    for seed in 0..20u64 {
        let mut r = rng(10_000 + seed);
        let (d, h, w, k) = (
            r.random_range(2..=16),
            r.random_range(1..=6),
            r.random_range(1..=6),
            r.random_range(1..=10),
        );
        let protos = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect()).map_err(fail)?;
        let bank = PrototypeBank::from_protos(protos).map_err(fail)?;
        let mut z = Tensor3::from_vec(d, h, w, (0..d * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
            .map_err(fail)?;
        let pin = r.random_range(0..k);
        for c in 0..d {
            z.set(c, 0, 0, bank.protos.get(pin, c));
        }
        let map = anomaly_map(&z, &bank, &ScoreOptions::default()).map_err(fail)?;
        let n = h * w;
        for i in 0..n {
            let mut dists = Vec::with_capacity(k);
            for j in 0..k {
                let mut acc = 0.0f64;
                for c in 0..d {
                    let diff = f64::from(z.as_slice()[c * n + i]) - f64::from(bank.protos.get(j, c));
                    acc += diff * diff;
                }
                dists.push(acc.sqrt());
            }
            let s = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let denom: f64 = dists.iter().map(|v| (-v).exp()).sum();
            let a = (-s).exp() / denom * s;
            let (got_s, got_a) = (map.s.as_slice()[i], map.a.as_slice()[i]);
            worst = worst.max((f64::from(got_s) - s).abs()).max((f64::from(got_a) - a).abs());
            if got_s == 0.0 {
                if got_a != 0.0 {
                    return Err(format!("seed {seed}: A = {got_a} where S = 0"));
                }
                zero_hits += 1;
            }
        }
    }
    ensure(
        worst <= 1e-6 && zero_hits >= 20,
        format!("20 instances, max abs err {worst:.2e} (<= 1e-6), A = 0 at all {zero_hits} zero-S positions"),
    )
}

fn auroc_oracle() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut r = rng(20_000 + seed);
        let n = r.random_range(2..=300);
        // Few distinct levels for most instances, so ties dominate.
        let levels = if seed % 4 == 3 { 1_000_000 } else { r.random_range(1..=6) };
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| f64::from(r.random_range(0..levels) + if l { r.random_range(0..2) } else { 0 }))
            .collect();
        let got = auroc(&scores, &labels).map_err(fail)?;
        let (mut wins, mut pairs) = (0.0f64, 0.0f64);
        for (sp, _) in scores.iter().zip(&labels).filter(|(_, &l)| l) {
            for (sn, _) in scores.iter().zip(&labels).filter(|(_, &l)| !l) {
                pairs += 1.0;
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((got - wins / pairs).abs());
    }
    ensure(worst <= 1e-9, format!("100 instances, max abs err {worst:.2e} (<= 1e-9)"))
}

fn rebalancing_invariants() -> Check {
    const K: usize = 10;
    const HW: usize = 196;
    const MIN_FRAC: f64 = 0.2;
    let floor = MIN_FRAC * HW as f64 / K as f64;
    let mut worst_centroid = 0.0f64;
    let mut smallest = usize::MAX;
    let mut merges = 0;
    for seed in 0..100u64 {
        let mut r = rng(30_000 + seed);
        let d = 8;
        // A few tight clusters of uneven size leave most prototypes starved.
        let n_clusters = r.random_range(1..=4);
        let centres: Vec<Vec<f32>> = (0..n_clusters)
            .map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let mut z = Tensor3::zeros(d, 14, 14);
        for p in 0..HW {
            let c = &centres[r.random_range(0..n_clusters)];
            for (ch, &mu) in c.iter().enumerate() {
                z.set(ch, p / 14, p % 14, mu + r.random_range(-0.3..0.3));
            }
        }
        let mut bank = PrototypeBank::init_random_noise(K, d, seed).map_err(fail)?;
        let out = feature_enhanced_update(&mut bank, &z, MIN_FRAC, seed).map_err(fail)?;
        let total: usize = bank.counts.iter().sum();
        if total != HW {
            return Err(format!("seed {seed}: counts sum to {total}"));
        }
        let min = *bank.counts.iter().min().expect("K >= 1");
        if (min as f64) < floor {
            return Err(format!("seed {seed}: group of {min} below {floor}"));
        }
        smallest = smallest.min(min);
        merges += out.merges.len();
        let touched: Vec<usize> = out.merges.iter().flat_map(|&(a, b)| [a, b]).collect();
        let points = z.to_points();
        for c in (0..K).filter(|c| !touched.contains(c)) {
            let members: Vec<usize> = (0..HW).filter(|&i| out.labels[i] == c).collect();
            for ch in 0..d {
                let mean = members.iter().map(|&i| f64::from(points.get(i, ch))).sum::<f64>() / members.len() as f64;
                worst_centroid = worst_centroid.max((f64::from(bank.protos.get(c, ch)) - mean).abs());
            }
        }
    }
    ensure(
        worst_centroid <= 1e-5 && merges > 0,
        format!(
            "100 frames, smallest group {smallest} (>= {floor:.1}), counts sum to {HW}, {merges} merges, \
             untouched centroid err {worst_centroid:.2e} (<= 1e-5)"
        ),
    )
}

fn online_learning() -> Check {
    let protocol = SyntheticProtocol::default();
    let s = protocol.synth;
    if s.n_modes != 5 || (s.anomaly_shift - 4.0 * s.noise_sigma).abs() > 1e-12 || protocol.train_frames != 300 {
        return Err("default protocol is not the 300-frame, 5-mode, 4-sigma setting".into());
    }
    let cfg = EngineConfig {
        init: InitStrategy::DecoupledNoise,
        update: UpdateStrategy::Learning,
        ..EngineConfig::default()
    };
    let report = run_protocol(cfg, &protocol, &EvalOptions::default()).map_err(fail)?;
    let fin = report.final_eval.map(|e| e.i_auroc).ok_or("no final evaluation")?;
    let limit = protocol.train_frames * 2 / 5;
    let reach = report.frames_to_reach(0.90);
    let detail = format!(
        "final I-AUROC {fin:.4} (>= 0.95), reaches 0.90 at frame {} (<= {limit})",
        reach.map_or("never".into(), |n| n.to_string())
    );
    ensure(fin >= 0.95 && reach.is_some_and(|n| n <= limit), detail)
}

fn drift_adaptation() -> Check {
    let protocol = SyntheticProtocol::default();
    let drift = DriftSpec {
        kind: DriftKind::Brightness,
        magnitude: 0.5 * protocol.synth.noise_sigma,
        onset_frame: 150,
    };
    let cfg = EngineConfig::default();
    let eval = EvalOptions::default();
    let online = run_drift_experiment(cfg, &protocol, drift, DriftMode::Online, &eval).map_err(fail)?;
    let offline = run_drift_experiment(cfg, &protocol, drift, DriftMode::Offline, &eval).map_err(fail)?;
    let (on, off) = (online.drifted.i_auroc, offline.drifted.i_auroc);
    let degradation = online.clean.i_auroc - on;
    ensure(
        on >= off && degradation <= 0.05,
        format!("online {on:.4} >= offline {off:.4}, online degradation {degradation:+.4} (<= 0.05)"),
    )
}

fn ablation_ordering() -> Check {
    let grid = run_ablation_grid(EngineConfig::default(), &SyntheticProtocol::default()).map_err(fail)?;
    let margin = |u| grid.i_auroc(InitStrategy::DecoupledNoise, u) - grid.i_auroc(InitStrategy::Noise, u);
    let margins: Vec<(UpdateStrategy, f64)> = UpdateStrategy::ALL.iter().map(|&u| (u, margin(u))).collect();
    let all_nonneg = margins.iter().all(|&(_, m)| m >= 0.0);
    let (ml, mf) = (margin(UpdateStrategy::Learning), margin(UpdateStrategy::FeatureEnhanced));
    let listed: Vec<String> = margins.iter().map(|(u, m)| format!("{}={m:+.4}", u.name())).collect();
    ensure(
        all_nonneg && mf < ml,
        format!(
            "decoupled - noise margins [{}] all >= 0, feature_enhanced {mf:+.4} < learning {ml:+.4}",
            listed.join(", ")
        ),
    )
}

fn frame_bytes(f: &StreamFrame) -> usize {
    let floats: usize = f.scales.iter().map(|s| s.as_slice().len()).sum::<usize>()
        + f.mask.as_ref().map_or(0, |m| m.as_slice().len());
    floats * std::mem::size_of::<f32>() + f.scales.capacity() * std::mem::size_of::<Tensor3>()
}

fn memory_bound() -> Check {
    const FRAMES: usize = 1000;
    // Allocator bookkeeping for the handful of live buffers in the engine.
    const SLACK: usize = 1024;
    let src = SynthSource::new(SynthConfig::default()).map_err(fail)?;
    let cfg = EngineConfig {
        update: UpdateStrategy::FeatureEnhanced,
        ..EngineConfig::default()
    };
    let base = live_bytes();
    let mut engine = Engine::bootstrap(cfg, src.config().d_raw, None).map_err(fail)?;
    let retained = engine.retained_bytes();
    let (k, d) = (cfg.k, cfg.d_out);
    let d_in = src.config().d_raw + 2;
    let formula = (3 * k * d + 3 * (d * d_in + d)) * 4 + k * std::mem::size_of::<usize>();
    if retained != formula {
        return Err(format!("retained {retained} B differs from 3KD + 3(adapter) floats = {formula} B"));
    }
    let mut settled = None;
    let mut worst_held = 0usize;
    let mut first_peak = 0isize;
    let mut last_peak = 0isize;
    for i in 0..FRAMES {
        let frame = src.frame(i, false);
        let fb = frame_bytes(&frame);
        reset_peak();
        engine.train_step(&frame).map_err(fail)?;
        let held = (live_bytes() - base) as usize;
        let peak = peak_bytes() - base;
        if held > retained + fb + SLACK {
            return Err(format!("step {i}: {held} B live > {retained} + frame {fb} + {SLACK} B"));
        }
        worst_held = worst_held.max(held - fb);
        if i < 100 {
            first_peak = first_peak.max(peak);
        }
        if i >= FRAMES - 100 {
            last_peak = last_peak.max(peak);
        }
        drop(frame);
        let after = live_bytes() - base;
        match settled {
            None => settled = Some(after),
            Some(s) if s != after => return Err(format!("step {i}: live state moved from {s} B to {after} B")),
            _ => {}
        }
    }
    ensure(
        last_peak <= first_peak,
        format!(
            "{FRAMES} frames, live state {} B = bound {retained} B + {} B bookkeeping, \
             per-step transient peak {last_peak} B (first 100 steps {first_peak} B)",
            worst_held,
            worst_held.saturating_sub(retained)
        ),
    )
}

fn write_empty_config(dir: &Path) -> Result<std::path::PathBuf, String> {
    let path = dir.join("config.json");
    fs::write(&path, "{}\n").map_err(fail)?;
    Ok(path)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let config = write_empty_config(tmp.path())?;
    let run = |name: &str| {
        cmd_run(&RunArgs {
            config: config.clone(),
            out: Some(tmp.path().join(name)),
            ..RunArgs::default()
        })
        .map_err(fail)
    };
    let (a, b) = (run("a")?, run("b")?);
    if report_metrics(&a.report) != report_metrics(&b.report) {
        return Err("report metrics differ".into());
    }
    let read = |o: &lemo_cli::commands::RunOutcome| fs::read(o.out_dir.join("bank.lemo")).map_err(fail);
    let (ba, bb) = (read(&a)?, read(&b)?);
    let metrics = |o: &lemo_cli::commands::RunOutcome| -> Result<serde_json::Value, String> {
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(o.out_dir.join("report.json")).map_err(fail)?).map_err(fail)?;
        Ok(v["metrics"].clone())
    };
    ensure(
        ba == bb && metrics(&a)? == metrics(&b)?,
        format!("report metrics equal, bank checkpoints {} B bitwise equal", ba.len()),
    )
}

fn bench_format() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let config = write_empty_config(tmp.path())?;
    let (dir, row) = cmd_bench(&BenchArgs {
        config,
        overrides: Vec::new(),
        out: Some(tmp.path().join("bench")),
        frames: 200,
        reps: 3,
    })
    .map_err(fail)?;
    let table = fs::read_to_string(dir.join("bench.txt")).map_err(fail)?;
    let headers = ["TPS [img/s]", "TPI [ms/img]", "Encoder [ms]", "Detection [ms]"];
    let fields_ok = headers.iter().all(|h| table.contains(h))
        && [row.tps, row.tpi_ms, row.encoder_ms, row.detect_ms].iter().all(|v| v.is_finite() && *v > 0.0);
    ensure(
        fields_ok && row.detect_ms < row.encoder_ms,
        format!(
            "TPS {:.1}, TPI {:.3} ms, encoder {:.3} ms, detection {:.3} ms (< encoder) at K=10 D=272",
            row.tps, row.tpi_ms, row.encoder_ms, row.detect_ms
        ),
    )
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "gradient correctness", budget: secs(10), run: gradient_check },
        Criterion { name: "orthogonal init", budget: secs(5), run: orthogonal_init },
        Criterion { name: "anomaly map oracle", budget: secs(60), run: anomaly_map_oracle },
        Criterion { name: "auroc oracle", budget: secs(60), run: auroc_oracle },
        Criterion { name: "rebalancing invariants", budget: secs(60), run: rebalancing_invariants },
        Criterion { name: "synthetic online learning", budget: secs(120), run: online_learning },
        Criterion { name: "drift adaptation", budget: secs(180), run: drift_adaptation },
        Criterion { name: "ablation ordering", budget: secs(600), run: ablation_ordering },
        Criterion { name: "one-pass memory bound", budget: secs(300), run: memory_bound },
        Criterion { name: "determinism", budget: secs(120), run: determinism },
        Criterion { name: "bench format", budget: secs(120), run: bench_format },
    ];
    // Listing mode used by `cargo test -- --list`.
    if std::env::args().any(|a| a == "--list") {
        for c in &criteria {
            println!("{}: test", c.name);
        }
        return;
    }
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        let line = format!(
            "{} {:<26} {:>7.2}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64()
        );
        println!("{line}");
    }
    println!("\nacceptance summary: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
