//! Electrode-level battery state and health estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`ocp`], [`params`], [`model`]: the electrode-level equivalent-circuit
//!   model and its parameter packs.
//! - [`truth`]: synthetic ground truth (aged cells, drive profiles, noisy
//!   measurements).
//! - [`spkf`]: the interconnected sigma-point Kalman filter over both
//!   electrodes.
//! - [`awtls`]: recursive electrode-capacity regression.
//! - [`esoh`]: stoichiometric-window solver and its Newton kernel.
//! - [`health`]: degradation modes and SOH.
//! - [`characterization`]: HPPC-based fitting of half-cell tables.
//! - [`pipeline`] and [`io`]: the streaming estimation pipeline and file formats.

// `!(x > 0.0)` style checks are kept because they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod awtls;
pub mod characterization;
pub mod error;
pub mod esoh;
pub mod health;
pub mod io;
pub mod model;
pub mod ocp;
pub mod params;
pub mod pipeline;
pub mod spkf;
pub mod truth;

pub use error::{Error, Result};
pub use model::{cell_voltage, electrode_potential, step_state, EecmState, ElectrodeState};
pub use ocp::{Electrode, OcpCurve};
pub use params::{
    capacity_from_geometry, EsohParams, HalfCellParamTable, ParamPack, RcElements, Windows, FARADAY,
};
