//! Log-space mechanics of transformer hidden-state trajectories.
//!
//! Hidden states `h_t` with realized-token probabilities `p_t` are treated as
//! a particle with kinetic term `K = ln(|v|^2 / 2)` and potential
//! `V = -ln p`. The crate computes per-step mechanics and summary statistics,
//! checks the discrete Euler-Lagrange equations and the conservation bracket,
//! steers hidden states toward target tokens along `grad ln p`, probes
//! attractor boundaries between consecutive states, and ships a small seeded
//! transformer plus the LTRJ v1 interchange format.

pub mod attractor;
pub mod error;
pub mod head;
pub mod linalg;
pub mod ltrj;
pub mod mechanics;
pub mod model;
pub mod report;
pub mod steering;
pub mod trajectory;
pub mod variational;

pub use error::{Error, Result};
pub use head::{head_probs, UnembeddingHead};
pub use mechanics::{step_mechanics, summarize, trajectory_mechanics};
pub use report::{emit_report, ReportFormat};
pub use steering::{steer, SteerParams, SteerResult};
pub use trajectory::{MechanicsSummary, StepMechanics, Trajectory};
pub use variational::SignConvention;
