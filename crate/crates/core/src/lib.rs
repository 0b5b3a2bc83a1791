//! Virtual imaging trial toolkit for myocardial perfusion SPECT: phantom
//! generation, projection, OSEM reconstruction, denoising, fidelity metrics,
//! channelized Hotelling observer analysis and study orchestration.

pub mod denoise;
pub mod eigen;
pub mod error;
pub mod imaging;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod observer;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod rng;
pub mod roc;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;
pub use volume::Volume3D;

pub type Volume = Volume3D<f64>;
pub type VolumeF32 = Volume3D<f32>;
pub type Projections = imaging::ProjectionSet<f64>;
pub type Roi = observer::RoiImage<f64>;
pub type Features = observer::FeatureVector<f64>;
pub type Channels = observer::ChannelMatrix<f64>;
pub type Stats = observer::EnsembleStats<f64>;
