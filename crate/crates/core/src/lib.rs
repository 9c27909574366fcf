//! Retrieval-based conversational entity search.

mod binio;
pub mod booking;
pub mod dialogue;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod featurizer;
pub mod index;
pub mod intent;
pub mod multilingual;
pub mod nn;
pub mod photo;
pub mod scalar;
pub mod synth;

pub use encoding::{score, Encoding};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder = encoder::DualEncoder<f32>;
pub type EncoderModel = encoder::EncoderModel<f32>;
pub type Index = index::ResponseIndex<f32>;
pub type PhotoHead = photo::PhotoHead<f32>;
pub type IntentSet = intent::IntentSet<f32>;
pub type Engine = dialogue::Engine<f32>;
pub type Deployment = dialogue::Deployment<f32>;

pub type Encoder64 = encoder::DualEncoder<f64>;
pub type Index64 = index::ResponseIndex<f64>;
pub type Engine64 = dialogue::Engine<f64>;
