//! Open quantum system trajectories, master equations and decoherent histories.

pub mod error;
pub mod hilbert;
pub mod lindblad;
pub mod unravel;
pub mod photodetect;
pub mod histories;
pub mod rng;

pub use error::{Error, Result};
pub use hilbert::{CompositeSpace, Ket, Operator, C64};
pub use lindblad::{BlockDensity, DensityMatrix, LindbladModel, SplitLindbladModel};
