//! Optical communication over event-camera streams.
//!
//! A blinking LED is tracked as an elliptical blob by a geometry-aware UKF
//! whose semi-axes live in log space and whose orientation lives on the
//! circle; events near the tracked blob are integrated into a decaying
//! polarity signal and decoded with a two-threshold comparator.
//!
//! The numeric kernels ([`geometry`], [`gaukf`], [`ekf_baseline`]) are generic
//! over [`Real`]; the aliases below pin them to `f64`, which is what the
//! pipeline and CLI use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ekf_baseline;
pub mod events;
pub mod gaukf;
pub mod geometry;
pub mod modem;
pub mod pipeline;
pub mod scalar;
pub mod simulate;
pub mod spatial_filter;

pub use events::{Event, EventPacket, Polarity, SensorSize};
pub use scalar::Real;

pub type Ellipse = geometry::Ellipse<f64>;
pub type Spd2 = geometry::Spd2<f64>;
pub type WeightedStats = geometry::WeightedStats<f64>;
pub type BlobState = gaukf::BlobState<f64>;
pub type FilterBelief = gaukf::FilterBelief<f64>;
pub type UkfParams = gaukf::UkfParams<f64>;
pub type Measurement = gaukf::Measurement<f64>;
pub type EkfState = ekf_baseline::EkfState<f64>;
pub type EkfParams = ekf_baseline::EkfParams<f64>;

pub type Ellipse32 = geometry::Ellipse<f32>;
pub type FilterBelief32 = gaukf::FilterBelief<f32>;
pub type UkfParams32 = gaukf::UkfParams<f32>;
