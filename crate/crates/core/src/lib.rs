//! Adversarial training with entropic regularization.
//!
//! The training-time adversary is a Langevin chain sampling high-loss points
//! near each clean batch from the Gibbs density
//! `exp(L(x') - (γ/2)‖x' - x‖²)`. The crate bundles the chain, the trainers
//! that use it (plus SGD, Entropy-SGD and PGD adversarial training
//! baselines), evaluation attacks, randomized smoothing, and numerical
//! oracles for checking all of it.
//!
//! ```
//! use atent::{models, Tensor};
//!
//! let params = models::build_mlp(&[2, 8, 2], 7).unwrap();
//! let x = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
//! assert_eq!(models::forward_logits(&params, &x).unwrap().shape(), &[1, 2]);
//! ```

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod models;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod smoothing;
pub mod tensor;
pub mod verify;

pub use error::{AtentError, Result};
pub use models::{Architecture, Batch, GradTarget, ModelParams};
pub use tensor::Tensor;
