//! The online loop: one training round and one detection per incoming frame.
//!
//! Model state lives behind an `Arc`. Training mutates it through
//! `Arc::make_mut`, so a reader holding a [`Engine::snapshot`] keeps seeing
//! the bank it started with while the writer moves on.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{prepare_input, project_backward, project_forward, AdapterParams};
use crate::anonce::{anonce_loss, LossConfig};
use crate::error::{Error, Result};
use crate::frame::{Label, StreamFrame};
use crate::memory::{feature_enhanced_update, PrototypeBank};
use crate::metrics::{auroc, auroc_f32, aupro, EvalResult, DEFAULT_FPR_LIMIT};
use crate::optim::AdamHyper;
use crate::rng::{derive_seed, tag};
use crate::scorer::{anomaly_map, ScoreMap, ScoreOptions};
use crate::tensor::{Matrix, Tensor3};

/// Frames at the head of a stream left out of the timing means.
pub const TIMING_WARMUP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    SingleImage,
    Noise,
    DecoupledNoise,
}

impl InitStrategy {
    pub const ALL: [Self; 3] = [Self::SingleImage, Self::Noise, Self::DecoupledNoise];

    pub fn name(self) -> &'static str {
        match self {
            Self::SingleImage => "single_image",
            Self::Noise => "noise",
            Self::DecoupledNoise => "decoupled_noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStrategy {
    /// Bank frozen after initialization.
    None,
    /// Bank trained jointly with the adapter.
    Learning,
    /// Learning plus per-frame group rebalancing.
    FeatureEnhanced,
}

impl UpdateStrategy {
    pub const ALL: [Self; 3] = [Self::None, Self::Learning, Self::FeatureEnhanced];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Learning => "learning",
            Self::FeatureEnhanced => "feature_enhanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub init: InitStrategy,
    pub update: UpdateStrategy,
    pub loss: LossConfig,
    pub adam: AdamHyper,
    /// Number of prototypes.
    pub k: usize,
    /// Adapted feature dimension.
    pub d_out: usize,
    /// Minimum group share for the rebalancing update.
    pub min_frac: f64,
    pub seed: u64,
    /// Frames between convergence checkpoints.
    pub detect_every: usize,
    /// Frames between rebalancing passes under the feature-enhanced update.
    pub rebalance_every: usize,
    pub score: ScoreOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            init: InitStrategy::DecoupledNoise,
            update: UpdateStrategy::Learning,
            loss: LossConfig::default(),
            adam: AdamHyper::default(),
            k: 10,
            d_out: 272,
            min_frac: 0.2,
            seed: 0,
            detect_every: 10,
            rebalance_every: 1,
            score: ScoreOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_out == 0 {
            return Err(Error::Config(format!("k and d_out must be >= 1 (k={}, d_out={})", self.k, self.d_out)));
        }
        if self.init == InitStrategy::DecoupledNoise && self.k > self.d_out {
            return Err(Error::Config(format!(
                "decoupled init needs k <= d_out (k={}, d_out={})",
                self.k, self.d_out
            )));
        }
        self.loss.validate(self.k)?;
        self.adam.validate()?;
        self.score.validate()?;
        if !(self.min_frac > 0.0 && self.min_frac < 1.0) {
            return Err(Error::Config(format!("min_frac must lie in (0, 1), got {}", self.min_frac)));
        }
        if self.detect_every == 0 || self.rebalance_every == 0 {
            return Err(Error::Config("detect_every and rebalance_every must be >= 1".into()));
        }
        Ok(())
    }

    fn subseed(&self, name: &str) -> u64 {
        derive_seed(self.seed, &[tag(name)])
    }
}

/// Everything the engine learns: the projection and the prototype bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub adapter: AdapterParams,
    pub bank: PrototypeBank,
}

impl ModelState {
    /// Bytes held by parameters and optimizer moments.
    pub fn retained_bytes(&self) -> usize {
        let floats = self.adapter.stored_floats() + self.bank.stored_floats();
        floats * std::mem::size_of::<f32>() + self.bank.counts.len() * std::mem::size_of::<usize>()
    }

    pub fn encode(&self, frame: &StreamFrame) -> Result<Tensor3> {
        project_forward(&prepare_input(&frame.scales)?, &self.adapter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub frame_idx: usize,
    pub loss: f64,
    pub train_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectTiming {
    /// Fuse plus projection.
    pub encode_ms: f64,
    /// Scoring against the bank.
    pub score_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn tag_frame(e: Error, frame_idx: usize) -> Error {
    match e {
        Error::Numerical { context } => Error::Numerical {
            context: format!("frame {frame_idx}: {context}"),
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    state: Arc<ModelState>,
    steps: usize,
}

impl Engine {
    /// Initializes adapter and bank. Single-image initialization clusters the
    /// features of `first_frame` after the fresh adapter.
    pub fn bootstrap(cfg: EngineConfig, raw_channels: usize, first_frame: Option<&StreamFrame>) -> Result<Self> {
        cfg.validate()?;
        if raw_channels == 0 {
            return Err(Error::Config("raw feature channels must be >= 1".into()));
        }
        // Two coordinate channels are appended to the fused input.
        let adapter = AdapterParams::init(raw_channels + 2, cfg.d_out, cfg.subseed("adapter"))?;
        let bank_seed = cfg.subseed("bank");
        let bank = match cfg.init {
            InitStrategy::DecoupledNoise => PrototypeBank::init_decoupled_noise(cfg.k, cfg.d_out, bank_seed)?,
            InitStrategy::Noise => PrototypeBank::init_random_noise(cfg.k, cfg.d_out, bank_seed)?,
            InitStrategy::SingleImage => {
                let frame = first_frame
                    .ok_or_else(|| Error::Config("single_image init needs a first frame".into()))?;
                if frame.label == Label::Anomalous {
                    return Err(Error::Config(
                        "single_image init needs a normal first frame".into(),
                    ));
                }
                if frame.raw_channels() != raw_channels {
                    return Err(Error::Dimension(format!(
                        "first frame has {} channels, expected {raw_channels}",
                        frame.raw_channels()
                    )));
                }
                let z0 = project_forward(&prepare_input(&frame.scales)?, &adapter)?;
                PrototypeBank::init_single_image(&z0, cfg.k, bank_seed)?
            }
        };
        Ok(Self {
            cfg,
            state: Arc::new(ModelState { adapter, bank }),
            steps: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Immutable view of the current model for concurrent readers.
    pub fn snapshot(&self) -> Arc<ModelState> {
        Arc::clone(&self.state)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Bytes of learned state plus optimizer moments.
    pub fn retained_bytes(&self) -> usize {
        self.state.retained_bytes()
    }

    /// One optimization round on a frame, treated as normal.
    pub fn train_step(&mut self, frame: &StreamFrame) -> Result<StepMetrics> {
        let start = Instant::now();
        let idx = frame.frame_idx;
        let cfg = self.cfg;
        let rebalance_seed = derive_seed(cfg.seed, &[tag("rebalance"), self.steps as u64]);
        let rebalance = cfg.update == UpdateStrategy::FeatureEnhanced && self.steps.is_multiple_of(cfg.rebalance_every);

        let state = Arc::make_mut(&mut self.state);
        let t = prepare_input(&frame.scales)?;
        let z = project_forward(&t, &state.adapter)?;
        let out = anonce_loss(&z, &state.bank, &cfg.loss).map_err(|e| tag_frame(e, idx))?;
        drop(z);
        let grads = project_backward(&t, &out.grad_z, &state.adapter)?;
        state.adapter.apply_gradients(&grads, &cfg.adam).map_err(|e| tag_frame(e, idx))?;
        if cfg.update != UpdateStrategy::None {
            state
                .bank
                .apply_gradient(&out.grad_p, &cfg.adam.without_decay())
                .map_err(|e| tag_frame(e, idx))?;
        }
        if rebalance {
            let z = project_forward(&t, &state.adapter)?;
            feature_enhanced_update(&mut state.bank, &z, cfg.min_frac, rebalance_seed)
                .map_err(|e| tag_frame(e, idx))?;
        }
        self.steps += 1;
        Ok(StepMetrics {
            frame_idx: idx,
            loss: out.loss,
            train_ms: ms_since(start),
        })
    }

    /// Scores a frame against the current snapshot without touching state.
    pub fn detect(&self, frame: &StreamFrame) -> Result<ScoreMap> {
        detect_with(&self.state, frame, &self.cfg.score).map(|(m, _)| m)
    }

    pub fn detect_timed(&self, frame: &StreamFrame) -> Result<(ScoreMap, DetectTiming)> {
        detect_with(&self.state, frame, &self.cfg.score)
    }

    pub fn evaluate(&self, frames: &[StreamFrame], opts: &EvalOptions) -> Result<EvalResult> {
        evaluate(&self.state, frames, &self.cfg.score, opts)
    }
}

/// Scores one frame against a model snapshot.
pub fn detect_with(state: &ModelState, frame: &StreamFrame, opts: &ScoreOptions) -> Result<(ScoreMap, DetectTiming)> {
    let t0 = Instant::now();
    let z = state.encode(frame)?;
    let encode_ms = ms_since(t0);
    let t1 = Instant::now();
    let map = anomaly_map(&z, &state.bank, opts).map_err(|e| tag_frame(e, frame.frame_idx))?;
    let score_ms = ms_since(t1);
    Ok((map, DetectTiming { encode_ms, score_ms }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Compute pixel metrics when every evaluation frame carries a mask.
    pub pixel_metrics: bool,
    pub fpr_limit: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pixel_metrics: true,
            fpr_limit: DEFAULT_FPR_LIMIT,
        }
    }
}

/// Image scores of a labeled set under one snapshot.
pub fn image_scores(state: &ModelState, frames: &[StreamFrame], opts: &ScoreOptions) -> Result<Vec<f64>> {
    frames
        .iter()
        .map(|f| detect_with(state, f, opts).map(|(m, _)| f64::from(m.image_score)))
        .collect()
}

fn image_labels(frames: &[StreamFrame]) -> Result<Vec<bool>> {
    frames
        .iter()
        .map(|f| match f.label {
            Label::Unlabeled => Err(Error::Validation(format!(
                "evaluation frame {} is unlabeled",
                f.frame_idx
            ))),
            l => Ok(l.is_anomalous()),
        })
        .collect()
}

/// Image-level AUROC of a snapshot on a labeled set.
pub fn image_auroc(state: &ModelState, frames: &[StreamFrame], opts: &ScoreOptions) -> Result<f64> {
    let labels = image_labels(frames)?;
    auroc(&image_scores(state, frames, opts)?, &labels)
}

/// Image and (when masks allow) pixel metrics of a snapshot.
pub fn evaluate(
    state: &ModelState,
    frames: &[StreamFrame],
    score: &ScoreOptions,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let labels = image_labels(frames)?;
    let with_pixels = opts.pixel_metrics && !frames.is_empty() && frames.iter().all(|f| f.mask.is_some());
    let mut scores = Vec::with_capacity(frames.len());
    let mut maps: Vec<Matrix> = Vec::new();
    let mut masks: Vec<Matrix> = Vec::new();
    for f in frames {
        let (mut map, _) = detect_with(state, f, score)?;
        scores.push(f64::from(map.image_score));
        if with_pixels {
            let mask = f.mask.as_ref().expect("checked above");
            map.upsample_to(mask.rows(), mask.cols())?;
            maps.push(map.upsampled.take().expect("just upsampled"));
            masks.push(mask.clone());
        }
    }
    let i_auroc = auroc(&scores, &labels)?;
    let (mut p_auroc, mut p_aupro, mut n_pixels) = (None, None, 0);
    if with_pixels {
        let pix_scores: Vec<f32> = maps.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        let pix_labels: Vec<bool> = masks.iter().flat_map(|m| m.as_slice().iter().map(|&v| v > 0.5)).collect();
        n_pixels = pix_scores.len();
        // Pixel metrics are skipped, not failed, when no pixel is anomalous.
        p_auroc = match auroc_f32(&pix_scores, &pix_labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        p_aupro = match aupro(&maps, &masks, opts.fpr_limit) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(EvalResult {
        i_auroc,
        p_auroc,
        p_aupro,
        n_images: frames.len(),
        n_pixels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_idx: usize,
    pub loss: f64,
    pub train_ms: f64,
    pub detect_ms: f64,
    pub image_score: f32,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Frames per second over one full round.
    pub tps: f64,
    /// Milliseconds per frame for one full round (train plus detect).
    pub tpi_ms: f64,
    /// Mean fuse plus projection time.
    pub encoder_ms: Option<f64>,
    /// Mean scoring time.
    pub detect_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Frames consumed when the checkpoint was taken.
    pub frames_seen: usize,
    pub i_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub frames: Vec<FrameRecord>,
    pub timing: Timing,
    pub curve: Vec<CurvePoint>,
    pub final_eval: Option<EvalResult>,
    pub bank_hash: u64,
}

impl StreamReport {
    /// Frames consumed when the curve first reached `level`.
    pub fn frames_to_reach(&self, level: f64) -> Option<usize> {
        self.curve.iter().find(|p| p.i_auroc >= level).map(|p| p.frames_seen)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Single pass over `source`: every frame is trained on, then scored. Every
/// `detect_every` frames (and once at the end) the current snapshot is
/// evaluated on `eval_set`. Returns the report and the final engine.
pub fn run_stream<I>(
    cfg: EngineConfig,
    source: I,
    eval_set: Option<(&[StreamFrame], &EvalOptions)>,
) -> Result<(StreamReport, Engine)>
where
    I: IntoIterator<Item = Result<StreamFrame>>,
{
    cfg.validate()?;
    let mut source = source.into_iter().peekable();
    let mut engine = match source.peek() {
        None => return Err(Error::Validation("empty frame stream".into())),
        Some(Err(_)) => return Err(source.next().expect("peeked").expect_err("peeked error")),
        Some(Ok(first)) => Engine::bootstrap(cfg, first.raw_channels(), Some(first))?,
    };

    let mut records = Vec::new();
    let mut encode_ms = Vec::new();
    let mut curve = Vec::new();
    let mut seen = 0;
    for frame in source {
        let frame = frame?;
        let start = Instant::now();
        let step = engine.train_step(&frame)?;
        let (map, timing) = engine.detect_timed(&frame)?;
        let round_ms = ms_since(start);
        seen += 1;
        records.push((
            FrameRecord {
                frame_idx: frame.frame_idx,
                loss: step.loss,
                train_ms: step.train_ms,
                detect_ms: timing.score_ms,
                image_score: map.image_score,
                label: frame.label,
            },
            round_ms,
        ));
        encode_ms.push(timing.encode_ms);
        if let Some((set, _)) = eval_set {
            if seen % cfg.detect_every == 0 {
                curve.push(CurvePoint {
                    frames_seen: seen,
                    i_auroc: image_auroc(engine.state(), set, &cfg.score)?,
                });
            }
        }
    }
    let final_eval = match eval_set {
        Some((set, opts)) => {
            if seen % cfg.detect_every != 0 {
                curve.push(CurvePoint {
                    frames_seen: seen,
                    i_auroc: image_auroc(engine.state(), set, &cfg.score)?,
                });
            }
            Some(engine.evaluate(set, opts)?)
        }
        None => None,
    };

    let skip = if records.len() > TIMING_WARMUP { TIMING_WARMUP } else { 0 };
    let tpi_ms = mean(records[skip..].iter().map(|r| r.1));
    let timing = Timing {
        tps: 1e3 / tpi_ms,
        tpi_ms,
        encoder_ms: Some(mean(encode_ms[skip..].iter().copied())),
        detect_ms: mean(records[skip..].iter().map(|r| r.0.detect_ms)),
    };
    let report = StreamReport {
        frames: records.into_iter().map(|r| r.0).collect(),
        timing,
        curve,
        final_eval,
        bank_hash: engine.state().bank.content_hash(),
    };
    Ok((report, engine))
}
