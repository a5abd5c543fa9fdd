//! Numerical laboratory for small-data Vlasov-Poisson dynamics in the
//! unstable trapping potential `-|x|^2/2`.

pub mod acceptance;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod history;
pub mod kinetic;
pub mod linear;
pub mod modfields;
pub mod poisson;
pub mod quadrature;
pub mod trapped;
pub mod vfalgebra;

pub use domain::{grid_scale, validate_config, DecaySeries, PhasePoint, SimConfig};
pub use error::{Error, Result};
pub use grid::GridField;
