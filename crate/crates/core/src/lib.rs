//! Core of the probekit telemetry framework: experiment model, plugins,
//! scheduling, chunk storage, package building, log viewing and the energy
//! simulator.

pub mod builder;
pub mod canonical;
pub mod clock;
pub mod energysim;
pub mod fsutil;
pub mod model;
pub mod plugin_kit;
pub mod scheduler;
pub mod storage;
pub mod viewer;

/// Energy simulator instantiated on `f64`.
pub type EnergyParams = energysim::EnergyParams<f64>;
pub type EnergyReport = energysim::EnergyReport<f64>;
pub type EnergyScenario = energysim::Scenario<f64>;
pub type EnergyLoad = energysim::Load<f64>;
pub type EnergyComparison = energysim::Comparison<f64>;

/// Single-precision variants.
pub type EnergyParamsF32 = energysim::EnergyParams<f32>;
pub type EnergyReportF32 = energysim::EnergyReport<f32>;
