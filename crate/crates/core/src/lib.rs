//! Discrete-time spiking network simulator with stochastic volatile
//! memristive synapses.
//!
//! Models are generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`, with a few `f32` variants for the
//! per-device types.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assoc;
pub mod calib;
pub mod device;
pub mod engine;
pub mod neuron;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod storerecall;
pub mod wmnet;

pub use device::{DeviceError, DeviceState, SWITCHING_TABLE};
pub use rng::{Purpose, SimRng};
pub use scalar::Scalar;

pub type DeviceParams = device::DeviceParams<f64>;
pub type SwitchCdfParams = device::SwitchCdfParams<f64>;
pub type SwitchTable = device::SwitchTable<f64>;
pub type Drive = device::Drive<f64>;
pub type DeviceParamsF32 = device::DeviceParams<f32>;
pub type SwitchCdfParamsF32 = device::SwitchCdfParams<f32>;

pub type SwitchObservation = calib::SwitchObservation<f64>;
pub type LognormalFit = calib::LognormalFit<f64>;

pub type LifParams = neuron::LifParams<f64>;
pub type LifState = neuron::LifState<f64>;
pub type LifParamsF32 = neuron::LifParams<f32>;

pub type NetworkSpec = engine::NetworkSpec<f64>;
pub type Network = engine::Network<f64>;
pub type NetworkF32 = engine::Network<f32>;

pub type SrConfig = storerecall::SrConfig<f64>;
pub type WmSpec = wmnet::WmSpec<f64>;
pub type AssocSpec = assoc::AssocSpec<f64>;
