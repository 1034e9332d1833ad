//! The `run`, `ablate`, `drift` and `bench` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lemo_core::engine::{detect_with, Timing};
use lemo_core::experiments::{
    run_ablation_grid_on, run_drift_experiment_on, AblationGrid, DriftMode, DriftOutcome, SyntheticProtocol,
};
use lemo_core::synth::estimate_feature_std;
use lemo_core::{
    load_manifest, run_stream, write_tensor, DriftKind, DriftSpec, Manifest, StreamFrame, StreamReport, SynthSource,
    TensorData,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, SourceConfig};
use crate::error::{CliError, Result};

/// Frames sampled when estimating the feature scale of a manifest stream.
const STD_SAMPLE_FRAMES: usize = 20;

/// A resolved frame source that can be replayed from the start.
enum Data {
    Synth {
        protocol: SyntheticProtocol,
        source: SynthSource,
    },
    Manifest(Manifest),
}

type FrameIter<'a> = Box<dyn Iterator<Item = lemo_core::Result<StreamFrame>> + 'a>;

impl Data {
    fn open(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.source {
            SourceConfig::Synth(p) => Data::Synth {
                protocol: *p,
                source: p.source()?,
            },
            SourceConfig::Manifest(path) => Data::Manifest(load_manifest(path, cfg.eval.pixel_metrics)?),
        })
    }

    fn train_len(&self) -> usize {
        match self {
            Data::Synth { protocol, .. } => protocol.train_frames,
            Data::Manifest(m) => m.train_indices().len(),
        }
    }

    fn stream(&self) -> FrameIter<'_> {
        match self {
            Data::Synth { protocol, source } => Box::new(protocol.train_stream(source, None)),
            Data::Manifest(m) => Box::new(m.train_indices().into_iter().map(move |i| m.load_frame(i))),
        }
    }

    /// The training stream repeated until it yields `n` frames.
    fn cycled(&self, n: usize) -> FrameIter<'_> {
        match self {
            Data::Synth { source, .. } => Box::new((0..n).map(move |i| Ok(source.frame(i, false)))),
            Data::Manifest(m) => {
                let idx = m.train_indices();
                Box::new((0..n).map(move |i| m.load_frame(idx[i % idx.len()])))
            }
        }
    }

    fn test_set(&self) -> Result<Vec<StreamFrame>> {
        Ok(match self {
            Data::Synth { protocol, source } => protocol.test_set(source, None),
            Data::Manifest(m) => m
                .test_indices()
                .into_iter()
                .map(|i| m.load_frame(i))
                .collect::<lemo_core::Result<_>>()?,
        })
    }

    fn feature_std(&self) -> Result<f64> {
        Ok(match self {
            Data::Synth { protocol, .. } => protocol.synth.feature_std(),
            Data::Manifest(_) => {
                let sample = self
                    .stream()
                    .take(STD_SAMPLE_FRAMES)
                    .collect::<lemo_core::Result<Vec<_>>>()?;
                estimate_feature_std(&sample)
            }
        })
    }
}

fn require_train(data: &Data) -> Result<()> {
    if data.train_len() == 0 {
        return Err(CliError::Config("the source has no train-stream frames".into()));
    }
    Ok(())
}

/// Test frames with both labels present, as the image metrics require.
fn require_labeled_test(test: &[StreamFrame]) -> Result<()> {
    if test.is_empty() {
        return Err(CliError::Config("the source has no test split".into()));
    }
    let anomalous = test.iter().filter(|f| f.label.is_anomalous()).count();
    if anomalous == 0 || anomalous == test.len() {
        return Err(CliError::Config("the test split needs normal and anomalous frames".into()));
    }
    Ok(())
}

/// `--out`, else `out_dir` from the config, else `runs/<unix seconds>`.
fn out_dir(cli: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match (cli, &cfg.out_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            PathBuf::from("runs").join(secs.to_string())
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::output(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(lemo_core::Error::from)?;
    write_text(path, &(text + "\n"))
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    /// Also write the anomaly map of every test frame.
    pub save_maps: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub report: StreamReport,
}

/// The reproducible part of a run report.
pub fn report_metrics(report: &StreamReport) -> Value {
    let losses: Vec<f64> = report.frames.iter().map(|f| f.loss).collect();
    let scores: Vec<f32> = report.frames.iter().map(|f| f.image_score).collect();
    json!({
        "n_frames": report.frames.len(),
        "final_eval": report.final_eval,
        "curve": report.curve,
        "bank_hash": format!("{:016x}", report.bank_hash),
        "losses": losses,
        "stream_scores": scores,
    })
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let data = Data::open(&cfg)?;
    require_train(&data)?;
    let test = data.test_set()?;
    let eval = if test.is_empty() { None } else { Some((test.as_slice(), &cfg.eval)) };
    if eval.is_some() {
        require_labeled_test(&test)?;
    }
    let dir = out_dir(args.out.as_deref(), &cfg)?;
    let (report, engine) = run_stream(cfg.engine, data.stream(), eval)?;

    write_json(
        &dir.join("report.json"),
        &json!({
            "config": cfg.to_value(),
            "metrics": report_metrics(&report),
            "timing": report.timing,
            "frames": report.frames,
        }),
    )?;
    let mut curve = String::from("frame_idx,i_auroc\n");
    for p in &report.curve {
        let _ = writeln!(curve, "{},{:.9}", p.frames_seen, p.i_auroc);
    }
    write_text(&dir.join("curve.csv"), &curve)?;

    let bank = &engine.state().bank;
    write_tensor(dir.join("bank.lemo"), &TensorData::Matrix(bank.protos.clone()))?;
    write_json(
        &dir.join("bank.json"),
        &json!({ "sidecar": bank.sidecar(), "hash": format!("{:016x}", bank.content_hash()) }),
    )?;

    if args.save_maps {
        let maps = dir.join("maps");
        fs::create_dir_all(&maps).map_err(|e| CliError::output(&maps, e))?;
        for (i, frame) in test.iter().enumerate() {
            let (mut map, _) = detect_with(engine.state(), frame, &cfg.engine.score)?;
            let grid = match &frame.mask {
                Some(m) => map.upsample_to(m.rows(), m.cols())?.clone(),
                None => map.a,
            };
            write_tensor(maps.join(format!("test_{i:04}.lemo")), &TensorData::Matrix(grid))?;
        }
    }

    println!("frames      {}", report.frames.len());
    if let Some(e) = &report.final_eval {
        println!("I-AUROC     {:.4}", e.i_auroc);
        if let Some(v) = e.p_auroc {
            println!("P-AUROC     {v:.4}");
        }
        if let Some(v) = e.p_aupro {
            println!("P-AUPRO     {v:.4}");
        }
    }
    println!("TPS         {:.3} img/s", report.timing.tps);
    println!("output      {}", dir.display());
    Ok(RunOutcome { out_dir: dir, report })
}

#[derive(Debug, Clone, Default)]
pub struct AblateArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(PathBuf, AblationGrid)> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let data = Data::open(&cfg)?;
    require_train(&data)?;
    let test = data.test_set()?;
    require_labeled_test(&test)?;
    let dir = out_dir(args.out.as_deref(), &cfg)?;
    let grid = run_ablation_grid_on(cfg.engine, || data.stream(), &test)?;
    write_text(&dir.join("ablation.csv"), &grid.to_csv())?;
    write_text(&dir.join("ablation.txt"), &grid.to_table())?;
    write_json(&dir.join("ablation.json"), &grid)?;
    print!("{}", grid.to_table());
    Ok((dir, grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Offline,
    Online,
    Both,
}

impl ModeArg {
    fn modes(self) -> &'static [DriftMode] {
        match self {
            Self::Offline => &[DriftMode::Offline],
            Self::Online => &[DriftMode::Online],
            Self::Both => &[DriftMode::Offline, DriftMode::Online],
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriftArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub kind: DriftKind,
    /// Absolute magnitude. Defaults to half the feature standard deviation.
    pub magnitude: Option<f64>,
    pub mode: ModeArg,
    /// Stream position where drift starts. Defaults to mid-stream.
    pub onset: Option<usize>,
}

pub fn cmd_drift(args: &DriftArgs) -> Result<(PathBuf, Vec<DriftOutcome>)> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let data = Data::open(&cfg)?;
    require_train(&data)?;
    let test = data.test_set()?;
    require_labeled_test(&test)?;
    let magnitude = match args.magnitude {
        Some(m) => m,
        None => 0.5 * data.feature_std()?,
    };
    let onset = args.onset.unwrap_or(data.train_len() / 2);
    if onset > data.train_len() {
        return Err(CliError::Config(format!(
            "onset {onset} is past the {}-frame stream",
            data.train_len()
        )));
    }
    let drift = DriftSpec {
        kind: args.kind,
        magnitude,
        onset_frame: onset,
    };
    let dir = out_dir(args.out.as_deref(), &cfg)?;
    let mut outcomes = Vec::new();
    let mut text = String::new();
    for &mode in args.mode.modes() {
        let o = run_drift_experiment_on(cfg.engine, || data.stream(), &test, drift, mode, &cfg.eval)?;
        let _ = writeln!(
            text,
            "{} drift {:?} magnitude {:.4} onset {}",
            mode.name(),
            drift.kind,
            drift.magnitude,
            drift.onset_frame
        );
        text.push_str(&o.to_table());
        text.push('\n');
        outcomes.push(o);
    }
    write_text(&dir.join("drift.txt"), &text)?;
    write_json(&dir.join("drift.json"), &outcomes)?;
    print!("{text}");
    Ok((dir, outcomes))
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub frames: usize,
    pub reps: usize,
}

/// Mean timings over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tps: f64,
    pub tpi_ms: f64,
    pub encoder_ms: f64,
    pub detect_ms: f64,
    pub reps: usize,
    pub frames: usize,
}

impl BenchRow {
    pub fn mean(runs: &[Timing], frames: usize) -> Self {
        let n = runs.len() as f64;
        let avg = |f: fn(&Timing) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            tps: avg(|t| t.tps),
            tpi_ms: avg(|t| t.tpi_ms),
            encoder_ms: avg(|t| t.encoder_ms.unwrap_or(0.0)),
            detect_ms: avg(|t| t.detect_ms),
            reps: runs.len(),
            frames,
        }
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:<8} {:>12} {:>13} {:>13} {:>15}\n{:<8} {:>12.3} {:>13.3} {:>13.3} {:>15.3}\n",
            "Method",
            "TPS [img/s]",
            "TPI [ms/img]",
            "Encoder [ms]",
            "Detection [ms]",
            "lemo",
            self.tps,
            self.tpi_ms,
            self.encoder_ms,
            self.detect_ms
        )
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(PathBuf, BenchRow)> {
    if args.frames == 0 || args.reps == 0 {
        return Err(CliError::Config("--frames and --reps must be >= 1".into()));
    }
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let data = Data::open(&cfg)?;
    require_train(&data)?;
    let dir = out_dir(args.out.as_deref(), &cfg)?;
    let runs = (0..args.reps)
        .map(|_| run_stream(cfg.engine, data.cycled(args.frames), None).map(|(r, _)| r.timing))
        .collect::<lemo_core::Result<Vec<_>>>()?;
    let row = BenchRow::mean(&runs, args.frames);
    write_text(&dir.join("bench.txt"), &row.to_table())?;
    write_json(&dir.join("bench.json"), &json!({ "mean": row, "runs": runs }))?;
    print!("{}", row.to_table());
    Ok((dir, row))
}
