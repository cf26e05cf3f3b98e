//! Simulation of polarization BB84 at 850 nm over few-mode passive optical
//! distribution networks.

pub mod coexistence;
pub mod modal_optics;
pub mod odn_model;
pub mod postproc;
pub mod qkd_link;
pub mod rng;
pub mod runner;

pub use modal_optics::{Basis, JonesVector, ModalState, SpatialMode, TransferOperator};
pub use odn_model::{DriftParams, DriftProfile, ElementSpec, OdnTopology};
pub use postproc::{PostprocConfig, TrialReport};
pub use qkd_link::{DetectionEvent, Detector, DetectorConfig, EncoderConfig, SymbolRecord, SymbolStream};
