//! Probability-flow solver for Fokker–Planck equations.
//!
//! A Fokker–Planck equation is reduced to a deterministic transport with an
//! effective drift `μ* = μ − D∇log p − ∇·D`. Along its characteristics the
//! log-density obeys `d log p/dt = −∇·μ*`, so a neural log-density can be
//! trained by matching the ODE prediction, and evaluated at any point by
//! solving the same ODE.
//!
//! * [`diffengine`]: reverse-mode tape and second-order jets.
//! * [`networks`]: log-density models and checkpoints.
//! * [`fpcore`]: problem definitions and the augmented characteristic dynamics.
//! * [`odesolve`]: fixed-step and adaptive integrators.
//! * [`training`]: Adam and the two training loops.
//! * [`benchmarks`]: reference problems, analytic solutions and a particle simulator.

pub mod benchmarks;
pub mod diffengine;
pub mod error;
pub mod fpcore;
pub mod networks;
pub mod odesolve;
pub mod training;

pub use diffengine::{Bindings, Gradients, Graph, Jet, JetOrder, Tensor, VariableSet};
pub use error::{Error, Result};
