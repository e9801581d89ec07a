//! Multimodal flow matching for periodic crystals.
//!
//! One trained model covers three generation tasks, selected at inference time
//! by a trajectory in a two-dimensional flow-time plane: de novo generation
//! (atom types and structure jointly), structure prediction given a
//! composition, and atom type generation given a structure. Atom types evolve
//! through a masked continuous-time Markov chain; fractional coordinates flow
//! along torus geodesics; lattice lengths and angles flow along straight
//! lines. A symmetry-aware canonical atom ordering plus hierarchical orbit
//! permutation augmentation supplies the crystallographic prior.

pub mod crystal;
pub mod elements;
pub mod error;
pub mod flow;
pub mod lattice;
pub mod model;
pub mod rngutil;
pub mod sample;
pub mod symmetry;
pub mod torus;

pub use crystal::Crystal;
pub use error::{Error, Result};
pub use lattice::{LatticeMatrix, LatticeParams};
