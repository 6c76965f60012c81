//! Layer zoo with hand-written backward passes, the network container,
//! losses, optimizers and checkpoint IO.

pub mod checkpoint;
pub mod graph;
pub mod layer;
pub mod loss;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use graph::{prefixed, Grads, NetworkGraph};
pub use layer::{BnGrad, Layer, Mode};
pub use loss::{cross_entropy, softmax};
pub use optim::{Adam, StepLrSchedule};

/// Convolution (3×3 unless `kernel` says otherwise) followed by BN and ReLU.
pub fn conv_bn_relu<R: rand::Rng + ?Sized>(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    rng: &mut R,
) -> Vec<Layer> {
    vec![
        Layer::conv(c_in, c_out, kernel, stride, kernel / 2, rng),
        Layer::batch_norm(c_out),
        Layer::relu(),
    ]
}
