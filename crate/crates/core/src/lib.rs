//! Adversarial cross-modal text-to-video retrieval.
//!
//! Clip image and text features are fused into a video feature, text and video are
//! mapped into a common space trained against a modality discriminator, and clips are
//! ranked against text queries by cosine similarity.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod training;

pub use dataio::{synth_generate, Dataset, SampleRecord, SynthConfig};
pub use error::{Error, Result};
pub use eval::{evaluate_retrieval, map_at_k, EvalReport, QueryRanking};
pub use losses::LabelDistribution;
pub use model::{init_model, AblationMode, FfacrModel, FusionVariant, ModelDims};
pub use numerics::DenseMatrix;
pub use retrieval::{build_index, search, RankedResult, SemanticIndex};
pub use training::{train, TrainConfig, TrainError, TrainHistory, TrainOutcome};
