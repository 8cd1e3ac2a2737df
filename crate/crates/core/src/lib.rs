//! Two-stage unsupervised pre-training for Transformer encoder-decoder
//! speech recognizers.
//!
//! The pipeline has three training stages:
//!
//! 1. **Acoustic pre-training**: the encoder reads feature sequences in which
//!    a few random chunks were zeroed (or left intact), and a linear head
//!    predicts the original frames of those chunks under a masked MSE loss.
//!    The head is then discarded and the encoder weights become `M0`.
//! 2. **Linguistic pre-training**: the full encoder-decoder, encoder
//!    initialized from `M0`, is trained with label-smoothed cross-entropy on
//!    (text, synthesized speech) pairs. The averaged final checkpoints become
//!    `M1`.
//! 3. **Post-training**: `M1` with a freshly initialized softmax layer is
//!    fine-tuned on in-domain paired data.
//!
//! Everything needed to run and evaluate that pipeline lives here: the
//! feature [`frontend`], chunk [`mask`]ing, the [`nnet`] model with exact
//! reverse-mode gradients, the [`synthvoice`] text-to-feature generator,
//! [`train`]ing, beam-search [`decode`]ing and error-rate [`score`]ing.
//! [`pipeline`] chains the stages into the scratch-vs-pretrained ablation.

pub mod decode;
pub mod error;
pub mod frontend;
pub mod mask;
pub mod nnet;
pub mod pipeline;
pub mod rng;
pub mod score;
pub mod synthvoice;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use frontend::{FeatureMatrix, Manifest, SpeakerStats, UtteranceRecord, Waveform};
pub use mask::{MaskChunk, MaskConfig, MaskPlan};
pub use nnet::{Gradients, ModelConfig, ModelParams};
pub use train::{Checkpoint, Stage, StageArtifacts, TrainConfig};
pub use vocab::Vocab;
