//! Composable pipelines for time-series models: an encoder, a patch
//! transformer backbone, an optional LoRA adapter and a decoder, each
//! swappable at runtime and trained selectively.
//!
//! ```rust
//! use tsfm_kit::prelude::*;
//! use tsfm_kit::rng::gaussian;
//!
//! // Series are [batch, channels, length]; the default backbone takes
//! // up to 64 samples in patches of 16 and embeds them in 32 dimensions.
//! let backbone = Backbone::new(BackboneConfig::default())?;
//! let mut pipeline = Pipeline::new(backbone);
//!
//! let decoder = MlpDecoder::new(MlpDecoderConfig {
//!     input_dim: 32,
//!     output_dim: 1,
//!     hidden_dim: 16,
//!     seed: 0,
//! })?;
//! pipeline.add_decoder(decoder, true)?;
//!
//! let batches: Vec<TimeSeriesBatch> = (0..4)
//!     .map(|i| {
//!         let x = gaussian([8, 1, 64], 1.0, &[i]);
//!         let y = gaussian([8, 1], 1.0, &[100 + i]);
//!         TimeSeriesBatch::with_targets(x, Targets::Real(y))
//!     })
//!     .collect::<Result<_>>()?;
//!
//! let task = TaskConfig { epochs: 2, ..TaskConfig::new(Task::Regression) };
//! let report = pipeline.train(&batches, &["decoder"], &task)?;
//! assert_eq!(report.epoch_losses.len(), 2);
//!
//! let (targets, predictions) = pipeline.predict(&batches, &task)?;
//! assert_eq!(predictions.len(), 32);
//! assert!(targets.is_some());
//! # Ok::<(), tsfm_kit::Error>(())
//! ```
//!
//! The guide in `book/` covers each part in more depth.

pub mod adapters;
pub mod backbone;
pub mod batch;
pub mod component;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod decoders;
pub mod metrics;
pub mod pipeline;
pub mod bench;

pub use error::{Error, Result};

/// The types most programs need.
pub mod prelude {
    pub use crate::adapters::{LoraAdapter, LoraConfig};
    pub use crate::backbone::{Backbone, BackboneConfig};
    pub use crate::batch::{EmbeddingTensor, Targets, TimeSeriesBatch};
    pub use crate::component::{Component, ComponentKind, PartSet, Pass};
    pub use crate::decoders::{
        Decoder, DecoderMode, KnnConfig, KnnDecoder, LogisticConfig, LogisticDecoder, MlpDecoder, MlpDecoderConfig,
        RidgeConfig, RidgeDecoder, SvmConfig, SvmDecoder,
    };
    pub use crate::encoders::{
        Encoder, IdentityEncoder, InputSpec, LinearChannelCombiner, LinearChannelCombinerConfig, WindowConfig,
        WindowEncoder,
    };
    pub use crate::error::{Error, Result};
    pub use crate::metrics::{MetricsCollector, Phase, RunMetrics};
    pub use crate::pipeline::{LossKind, Pipeline, Predictions, Task, TaskConfig, TrainReport};
    pub use crate::tensor::Tensor;
}
