//! Determined blind source separation with AuxIVA.
//!
//! Demixing matrices are updated by iterative source steering (ISS) or, for
//! two sources, by the pairwise generalized-eigenvector update (IP2). The
//! per-source surrogate weights come from a classical prior (Laplace,
//! time-varying Gauss) or from a GLU network trained by differentiating a
//! permutation-invariant separation loss through unrolled ISS iterations.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod glu;
pub mod iva;
pub mod mixsim;
pub mod numerics;
pub mod post;
pub mod source_models;
pub mod stft;
pub mod train;
pub mod unroll;
pub mod wav;

pub use error::{Error, Result};
