//! Spatial beam RSRP prediction over multipath power profiles.
//!
//! The crate combines four pieces:
//!
//! - a physics core (`geom`, `array`, `channel`, `whitebox`) that turns a
//!   multipath conditional power profile into closed-form beam RSRP
//!   statistics, validated against a Monte Carlo estimator;
//! - a synthetic site generator and map store (`synthenv`, `ckm`) standing in
//!   for ray-traced data, with the classic inverse-distance baselines;
//! - a minimal reverse-mode tensor engine (`tensor`) and the neural field
//!   model (`nbf`) that predicts profiles from user position;
//! - the losses and training procedures (`train`): end-to-end regression
//!   through the fixed physics head, set-matched pretraining and calibration.
//!
//! All numerics are generic over the [`num::Real`] scalar (f32/f64); the
//! aliases at the crate root pin the reference f64 instantiation used by the
//! CLI and the file formats.

pub mod array;
pub mod channel;
pub mod ckm;
pub mod geom;
pub mod nbf;
pub mod num;
pub mod synthenv;
pub mod tensor;
pub mod train;
pub mod whitebox;

pub use num::Real;

/// f64 3-D vector.
pub type Vec3 = geom::Vec3<f64>;
/// f64 panel orientation.
pub type PanelOrientation = geom::PanelOrientation<f64>;
/// f64 element pattern config.
pub type ErpConfig = geom::ErpConfig<f64>;
/// f64 panel/array config.
pub type ArrayConfig = array::ArrayConfig<f64>;
/// f64 DFT beam.
pub type BeamSpec = array::BeamSpec<f64>;
/// f64 single-path entry.
pub type ScpEntry = channel::ScpEntry<f64>;
/// f64 multipath profile.
pub type Mcpp = channel::Mcpp<f64>;
/// f64 RSRP statistics.
pub type RsrpStats = whitebox::RsrpStats<f64>;
