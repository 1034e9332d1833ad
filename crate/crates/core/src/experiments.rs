//! Synthetic-stream experiments: the init × update ablation grid and the
//! offline/online drift comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{run_stream, Engine, EngineConfig, EvalOptions, InitStrategy, StreamReport, UpdateStrategy};
use crate::error::{Error, Result};
use crate::frame::StreamFrame;
use crate::metrics::EvalResult;
use crate::rng::{derive_seed, tag};
use crate::synth::{apply_drift, DriftSpec, SynthConfig, SynthSource};

/// Training stream plus held-out test set drawn from one synthetic source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProtocol {
    pub synth: SynthConfig,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Share of anomalous frames in the test set.
    pub anomaly_ratio: f64,
    /// First frame index of the test set, kept disjoint from the stream.
    pub test_offset: usize,
}

impl Default for SyntheticProtocol {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_frames: 300,
            test_frames: 60,
            anomaly_ratio: 0.5,
            test_offset: 1_000_000,
        }
    }
}

impl SyntheticProtocol {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.train_frames == 0 {
            return Err(Error::Config("train_frames must be >= 1".into()));
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            return Err(Error::Config(format!(
                "anomaly_ratio must lie in (0, 1), got {}",
                self.anomaly_ratio
            )));
        }
        let n_anom = self.n_anomalous();
        if n_anom == 0 || n_anom == self.test_frames {
            return Err(Error::Config(format!(
                "test set of {} frames at ratio {} lacks a class",
                self.test_frames, self.anomaly_ratio
            )));
        }
        if self.test_offset < self.train_frames {
            return Err(Error::Config("test_offset overlaps the training stream".into()));
        }
        Ok(())
    }

    fn is_anomalous(&self, i: usize) -> bool {
        // Spreads anomalies evenly through the test set.
        ((i + 1) as f64 * self.anomaly_ratio).floor() > (i as f64 * self.anomaly_ratio).floor()
    }

    fn n_anomalous(&self) -> usize {
        (0..self.test_frames).filter(|&i| self.is_anomalous(i)).count()
    }

    pub fn source(&self) -> Result<SynthSource> {
        SynthSource::new(self.synth)
    }

    /// Normal training frames, drifted from the onset when `drift` is set.
    pub fn train_stream<'a>(
        &self,
        source: &'a SynthSource,
        drift: Option<DriftSpec>,
    ) -> impl Iterator<Item = Result<StreamFrame>> + 'a {
        (0..self.train_frames).map(move |i| {
            let f = source.frame(i, false);
            Ok(match &drift {
                Some(d) => apply_drift(f, d, i),
                None => f,
            })
        })
    }

    /// Labeled test frames with masks. Under drift every test frame counts
    /// as past the onset.
    pub fn test_set(&self, source: &SynthSource, drift: Option<DriftSpec>) -> Vec<StreamFrame> {
        (0..self.test_frames)
            .map(|i| {
                let idx = self.test_offset + i;
                let f = source.frame(idx, self.is_anomalous(i));
                match &drift {
                    Some(d) => drift_test_frame(f, d),
                    None => f,
                }
            })
            .collect()
    }
}

/// One run of the engine over a protocol: stream, checkpoints, final metrics.
pub fn run_protocol(
    cfg: EngineConfig,
    protocol: &SyntheticProtocol,
    eval: &EvalOptions,
) -> Result<StreamReport> {
    protocol.validate()?;
    let source = protocol.source()?;
    let test = protocol.test_set(&source, None);
    run_stream(cfg, protocol.train_stream(&source, None), Some((&test, eval))).map(|(r, _)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub init: InitStrategy,
    pub update: UpdateStrategy,
    pub i_auroc: f64,
    pub initial_bank_hash: u64,
    pub final_bank_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Row-major over [`InitStrategy::ALL`] × [`UpdateStrategy::ALL`].
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn get(&self, init: InitStrategy, update: UpdateStrategy) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| c.init == init && c.update == update)
            .expect("grid covers every pair")
    }

    pub fn i_auroc(&self, init: InitStrategy, update: UpdateStrategy) -> f64 {
        self.get(init, update).i_auroc
    }

    /// Rows per init strategy, one column per update strategy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("init");
        for u in UpdateStrategy::ALL {
            out.push(',');
            out.push_str(u.name());
        }
        out.push('\n');
        for i in InitStrategy::ALL {
            out.push_str(i.name());
            for u in UpdateStrategy::ALL {
                let _ = write!(out, ",{:.6}", self.i_auroc(i, u));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16}", "init \\ update");
        for u in UpdateStrategy::ALL {
            let _ = write!(out, " {:>16}", u.name());
        }
        out.push('\n');
        for i in InitStrategy::ALL {
            let _ = write!(out, "{:<16}", i.name());
            for u in UpdateStrategy::ALL {
                let _ = write!(out, " {:>16.3}", self.i_auroc(i, u));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs all nine init/update combinations on the protocol's stream and test
/// set with identical seeds.
pub fn run_ablation_grid(base: EngineConfig, protocol: &SyntheticProtocol) -> Result<AblationGrid> {
    protocol.validate()?;
    let source = protocol.source()?;
    let test = protocol.test_set(&source, None);
    run_ablation_grid_on(base, || protocol.train_stream(&source, None), &test)
}

/// Grid over any replayable stream: `make_stream` must yield the same frames
/// on every call. Cells run on one thread each.
pub fn run_ablation_grid_on<S, I>(base: EngineConfig, make_stream: S, test: &[StreamFrame]) -> Result<AblationGrid>
where
    S: Fn() -> I + Sync,
    I: Iterator<Item = Result<StreamFrame>>,
{
    let first = make_stream()
        .next()
        .ok_or_else(|| Error::Validation("empty frame stream".into()))??;
    let eval = EvalOptions {
        pixel_metrics: false,
        ..EvalOptions::default()
    };
    let pairs: Vec<(InitStrategy, UpdateStrategy)> = InitStrategy::ALL
        .iter()
        .flat_map(|&i| UpdateStrategy::ALL.iter().map(move |&u| (i, u)))
        .collect();
    let results: Vec<Result<AblationCell>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|&(init, update)| {
                let (make_stream, first, eval) = (&make_stream, &first, &eval);
                s.spawn(move || {
                    let cfg = EngineConfig {
                        init,
                        update,
                        // Only the terminal checkpoint is needed.
                        detect_every: usize::MAX,
                        ..base
                    };
                    let initial = Engine::bootstrap(cfg, first.raw_channels(), Some(first))?;
                    let (report, _) = run_stream(cfg, make_stream(), Some((test, eval)))?;
                    Ok(AblationCell {
                        init,
                        update,
                        i_auroc: report.final_eval.expect("eval set given").i_auroc,
                        initial_bank_hash: initial.state().bank.content_hash(),
                        final_bank_hash: report.bank_hash,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    Ok(AblationGrid {
        cells: results.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Train on the clean frames before the onset, then freeze.
    Offline,
    /// Keep training through the drifted part of the stream.
    Online,
}

impl DriftMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Offline => "offline",
            Self::Online => "online",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftOutcome {
    pub mode: DriftMode,
    pub drift: DriftSpec,
    /// Same protocol with the drift switched off.
    pub clean: EvalResult,
    pub drifted: EvalResult,
}

impl DriftOutcome {
    /// `drifted − clean` image AUROC.
    pub fn delta(&self) -> f64 {
        self.drifted.i_auroc - self.clean.i_auroc
    }

    /// One `value/delta` row per metric.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>16}\n", "metric", "clean", "drifted/delta");
        let mut row = |name: &str, c: Option<f64>, d: Option<f64>| {
            if let (Some(c), Some(d)) = (c, d) {
                let _ = writeln!(out, "{name:<10} {c:>8.3} {:>16}", format!("{d:.3}/{:+.3}", d - c));
            }
        };
        row("I-AUROC", Some(self.clean.i_auroc), Some(self.drifted.i_auroc));
        row("P-AUROC", self.clean.p_auroc, self.drifted.p_auroc);
        row("P-AUPRO", self.clean.p_aupro, self.drifted.p_aupro);
        out
    }
}

/// Drift as seen by a frame of the held-out set, which always lies past the
/// onset.
pub fn drift_test_frame(frame: StreamFrame, drift: &DriftSpec) -> StreamFrame {
    let idx = frame.frame_idx.max(drift.onset_frame);
    apply_drift(frame, drift, idx)
}

fn drift_eval<S, I>(
    cfg: EngineConfig,
    make_stream: &S,
    test: &[StreamFrame],
    drift: &DriftSpec,
    mode: DriftMode,
    eval: &EvalOptions,
) -> Result<EvalResult>
where
    S: Fn() -> I,
    I: Iterator<Item = Result<StreamFrame>>,
{
    let test: Vec<StreamFrame> = test.iter().cloned().map(|f| drift_test_frame(f, drift)).collect();
    let frames: Box<dyn Iterator<Item = Result<StreamFrame>>> = match mode {
        DriftMode::Online => {
            let drift = *drift;
            Box::new(
                make_stream()
                    .enumerate()
                    .map(move |(pos, f)| f.map(|f| apply_drift(f, &drift, pos))),
            )
        }
        DriftMode::Offline => Box::new(make_stream().take(drift.onset_frame)),
    };
    let (_, engine) = run_stream(cfg, frames, None)?;
    engine.evaluate(&test, eval)
}

/// Runs `mode` once on the drifted protocol and once with zero magnitude.
pub fn run_drift_experiment(
    cfg: EngineConfig,
    protocol: &SyntheticProtocol,
    drift: DriftSpec,
    mode: DriftMode,
    eval: &EvalOptions,
) -> Result<DriftOutcome> {
    protocol.validate()?;
    if drift.onset_frame > protocol.train_frames {
        return Err(Error::Config(format!(
            "drift onset {} is past the {}-frame stream",
            drift.onset_frame, protocol.train_frames
        )));
    }
    let source = protocol.source()?;
    let test = protocol.test_set(&source, None);
    run_drift_experiment_on(cfg, || protocol.train_stream(&source, None), &test, drift, mode, eval)
}

/// Drift comparison over any replayable clean stream. Drift is applied by
/// stream position; the clean test set is drifted as a whole.
pub fn run_drift_experiment_on<S, I>(
    cfg: EngineConfig,
    make_stream: S,
    test: &[StreamFrame],
    drift: DriftSpec,
    mode: DriftMode,
    eval: &EvalOptions,
) -> Result<DriftOutcome>
where
    S: Fn() -> I,
    I: Iterator<Item = Result<StreamFrame>>,
{
    drift.validate()?;
    if drift.onset_frame == 0 && mode == DriftMode::Offline {
        return Err(Error::Config("offline mode needs a clean warm-up (onset_frame >= 1)".into()));
    }
    let clean_spec = DriftSpec {
        magnitude: 0.0,
        ..drift
    };
    let clean = drift_eval(cfg, &make_stream, test, &clean_spec, mode, eval)?;
    let drifted = if drift.magnitude == 0.0 {
        clean
    } else {
        drift_eval(cfg, &make_stream, test, &drift, mode, eval)?
    };
    Ok(DriftOutcome {
        mode,
        drift,
        clean,
        drifted,
    })
}

/// Seed for repetition `rep` of a benchmark run.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &[tag("repetition"), rep as u64])
}
