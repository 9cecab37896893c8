//! Encoder-decoder transformer with tag-prefix and additive-intervention
//! conditioning, decoding, and checkpoint I/O.

mod checkpoint;
mod config;
mod decode;
mod transformer;

pub use checkpoint::{write_atomic, Checkpoint, Provenance};
pub use config::{Conditioning, ModelConfig, Preset};
pub use decode::{DecodeConfig, Strategy};
pub use transformer::{mask_label, prepend_tag, Batch, Encoded, EncodedExample, TransformerModel, INTERVENTION_PARAM};
