//! Learns the distribution of visual transformations present in an image
//! dataset by adversarial training of a parameterized transformation
//! generator, builds the complementary distribution, samples non-conflicting
//! transformation instances for self-supervised pretext tasks, and evaluates
//! the conflict effect with a small pretext-training + linear-probe harness.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode AD over dense f64 tensors, with second-order
//!   support on the critic op set (needed by the gradient penalty).
//! - [`transforms`]: differentiable affine warps (matrix, grid, bilinear
//!   sampling), anti-artifact center crop, and color transforms.
//! - [`networks`]: mapping network (generator), critic, pretext encoder,
//!   deterministic initialization, checkpoint format.
//! - [`estimator`]: the WGAN-GP training loop fitting the mapping network.
//! - [`distribution`]: per-parameter histograms, complement construction,
//!   inverse transform sampling, policy building.
//! - [`data`]: synthetic shape datasets with known ground truth, IDX I/O,
//!   reference-subset selection.
//! - [`pretext`]: pretext-task construction, encoder training, linear probe.

pub mod autodiff;
pub mod data;
pub mod distribution;
pub mod estimator;
pub mod networks;
pub mod pretext;
pub mod rng;
pub mod tensor;
pub mod transforms;

pub use tensor::Tensor;
