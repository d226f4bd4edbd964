//! Discrete speech units: feature extraction, pitch tracking, k-means
//! quantization, bitstream coding, vocoding, probing and unit language
//! models.

mod binio;
pub mod audio;
pub mod codec;
pub mod error;
pub mod features;
pub mod lm;
pub mod pipeline;
pub mod pitch;
pub mod probing;
pub mod quantizer;
pub mod streams;
pub mod synth;
pub mod vocoder;

pub use audio::{read_wav, resample, write_wav, Waveform};
pub use error::{Category, Error, Result};
pub use features::{FeatureConfig, FeatureKind, FeatureSequence, Fingerprint};
pub use pitch::{NormalizedPitch, PitchConfig, PitchTrack};
pub use quantizer::{Codebook, KMeansConfig, UnitSequence};
pub use streams::EncodedUtterance;
pub use vocoder::SynthesisConfig;
pub use lm::NGramModel;
pub use probing::{Probe, ProbeTable};
pub use codec::{Bitstream, BitrateReport, UnigramModel};
pub use pipeline::{Manifest, ManifestRecord, NormalizationMode, PipelineConfig};
