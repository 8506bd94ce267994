//! Active observation completion: an agent that selects a short sequence of
//! glimpses over a viewgrid, reconstructs the unobserved views, and is trained
//! by actor-critic policy gradients with optional sidekick guidance that
//! exploits full observability at training time.
//!
//! The crate is organized around the experiment pipeline:
//!
//! * [`grid`] — viewgrid indexing, the discrete action space, camera dynamics.
//! * [`worlds`] — procedural scene/object generators and the VGRD file format.
//! * [`autodiff`] — a small reverse-mode tape over `ndarray` tensors.
//! * [`net`] — the SENSE/FUSE/AGGREGATE/DECODE/ACT agent with a value head.
//! * [`train`] — losses, rewards, the two-phase training loop, evaluation.
//! * [`sidekick`] — reward and demonstration sidekicks plus their schedules.
//! * [`baselines`] — non-learned glimpse policies used for comparison.
//! * [`transfer`] — downstream task heads and the model-A/model-B protocol.
//! * [`config`] / [`pipeline`] — experiment configuration and stage orchestration.

pub mod autodiff;
pub mod error;
pub mod grid;
pub mod baselines;
pub mod net;
pub mod rng;
pub mod sidekick;
pub mod train;
pub mod transfer;
pub mod worlds;

pub use error::Error;
pub use grid::{Action, ActionSpace, Proprioception, ViewPos, Viewgrid};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
