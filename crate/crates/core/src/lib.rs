//! Few-shot presentation attack detection with prototypical networks.
//!
//! The toolkit embeds feature vectors with a small trainable MLP, classifies
//! queries by softmax over negated distances to per-class prototypes, trains
//! episodically with AdamW, and scores results with ISO/IEC 30107-3 metrics
//! (APCER, BPCER, EER, BPCER@AP, DET curves).
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the 64-bit instantiation used by the command-line tool.

pub mod data;
pub mod embedding;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod protonet;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use data::{Dataset, Label, NormalizationStats, Sample, SplitSpec};
pub use embedding::{Activation, EmbeddingConfig, ForwardCache, Layer, MlpParameters};
pub use episodes::{Episode, EpisodeSpec, ExtensionSpec, ExtensionSummary};
pub use error::{Error, Result};
pub use metrics::{CountryReport, DetCurve, DetPoint, PadReport, ScoreSet};
pub use optim::{AdamWParams, OptimizerState};
pub use protonet::{ClassPosterior, DistanceMetric, PrototypeSet};
pub use scalar::Scalar;
pub use synthetic::{CountrySpec, SyntheticSpec};
pub use trainer::{EvalOptions, Evaluation, TrainConfig, TrainHistory};

pub type Sample64 = Sample<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Mlp64 = MlpParameters<f64>;
pub type Mlp32 = MlpParameters<f32>;
pub type Episode64 = Episode<f64>;
pub type ScoreSet64 = ScoreSet<f64>;
pub type DetCurve64 = DetCurve<f64>;
pub type PrototypeSet64 = PrototypeSet<f64>;
pub type Evaluation64 = Evaluation<f64>;
