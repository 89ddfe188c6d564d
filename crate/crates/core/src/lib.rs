//! Music-driven image animation: a two-stage latent diffusion model that
//! animates a reference image to a pose mask, a caption and a music track.

pub mod audio;
pub mod beats;
pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod frame;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod unet;

pub use audio::Waveform;
pub use candle_core::DType;
pub use beats::{extract_beats, BeatVector};
pub use codec::{decode, encode, CodecConfig};
pub use conditioning::{BeatEmbedding, MusicEmbedding, TextEmbedding, Vocab};
pub use diffusion::{ConditionBundle, EpsModel, NoiseSchedule};
pub use error::{Error, Result};
pub use frame::{Image, PoseMask};
pub use model::{DanceModel, Stage};
pub use nn::{ParamGroup, ParamStore};
pub use temporal::MotionContext;
pub use tensor::LatentTensor;
pub use unet::{ReferenceFeatures, Topology};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use dataset::{build_dataset, ClipSpec, MotionType, TripletManifest, VideoClip};
pub use generate::{generate_video, GenerateConfig, Generation};
pub use metrics::MetricReport;
pub use train::{train_stage1, train_stage2};
