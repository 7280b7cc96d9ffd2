//! Steady states of driven-dissipative Bose-Hubbard lattices in two
//! dimensions, computed with the corner-space renormalization method.
//!
//! The lattice is built up by repeatedly merging smaller clusters whose
//! steady-state density matrices are already known. At each merge the
//! tensor-product space of the two children is truncated to the `M` pairs
//! of density-matrix eigenvectors with the largest joint probability (the
//! "corner" of the Hilbert space). The Lindblad master equation is then
//! solved inside the corner, either by direct time integration of the
//! density matrix or by Monte Carlo wavefunction sampling, and the
//! procedure repeats until the target lattice is reached. Accuracy is
//! controlled by increasing `M` until the observables converge.
//!
//! Modules mirror the stages of the pipeline:
//!
//! - [`numerics`]: dense/sparse complex matrices, Hermitian
//!   eigendecomposition, Kronecker products, RK4 stepping.
//! - [`lattice`]: square-lattice geometry, bond enumeration, merge
//!   scheduling.
//! - [`model`]: Fock-space operators and the rotating-frame Bose-Hubbard
//!   Hamiltonian with single-boson loss.
//! - [`steadystate`]: direct Lindblad integration and an exact Liouvillian
//!   null-space solver for small systems.
//! - [`trajectories`]: Monte Carlo wavefunction solver with reproducible
//!   parallel sampling.
//! - [`corner`]: density-matrix diagonalization, top-M pair selection,
//!   cluster merging, and the convergence-in-M driver.
//! - [`observables`]: populations, coherences, correlation functions, and
//!   probability spectra.
//! - [`meanfield`]: self-consistent Gutzwiller baseline.
//! - [`cli`]: experiment configuration, presets, and CSV/JSON output.

pub mod cli;
pub mod corner;
pub mod lattice;
pub mod meanfield;
pub mod model;
pub mod numerics;
pub mod observables;
pub mod steadystate;
pub mod trajectories;




pub use numerics::{ComplexDense, ComplexSparse, EigenDecomposition};

