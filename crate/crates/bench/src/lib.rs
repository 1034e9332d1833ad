//! Shared inputs for the hot-path benchmarks: one synthetic frame, a model
//! warmed up on a short stream and the frame's projected features.

use lemo_core::adapter::{prepare_input, project_forward};
use lemo_core::{Engine, EngineConfig, Result, StreamFrame, SynthConfig, SynthSource, Tensor3};

/// Frames streamed through the engine before measuring.
pub const WARMUP_FRAMES: usize = 20;

pub struct Fixture {
    pub engine: Engine,
    pub frame: StreamFrame,
    /// Fused input with coordinate channels.
    pub input: Tensor3,
    /// Projected features of `frame`.
    pub features: Tensor3,
}

impl Fixture {
    /// Engine with `k` prototypes of width `d_out` on the default generator.
    pub fn new(k: usize, d_out: usize) -> Result<Self> {
        let src = SynthSource::new(SynthConfig::default())?;
        let cfg = EngineConfig {
            k,
            d_out,
            ..EngineConfig::default()
        };
        let mut engine = Engine::bootstrap(cfg, src.config().d_raw, None)?;
        for i in 0..WARMUP_FRAMES {
            engine.train_step(&src.frame(i, false))?;
        }
        let frame = src.frame(WARMUP_FRAMES, true);
        let input = prepare_input(&frame.scales)?;
        let features = project_forward(&input, &engine.state().adapter)?;
        Ok(Self {
            engine,
            frame,
            input,
            features,
        })
    }
}
