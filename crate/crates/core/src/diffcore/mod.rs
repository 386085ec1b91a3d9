//! Differentiable array engine: tensors, the reverse-mode tape, the
//! transforms and layers built on it, Adam and a finite-difference checker.

mod dft;
mod gradcheck;
mod graph;
pub mod nn;
mod noise;
mod params;
mod tensor;

pub use dft::{dft, dft_var, highpass_keeps, highpass_mask, idft, idft_real_var, ComplexSpectrum, SpectrumVar};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Segments, Var};
pub use noise::Noise;
pub use params::{AdamConfig, Bound, GradMap, ParameterStore};
pub use tensor::Tensor;
