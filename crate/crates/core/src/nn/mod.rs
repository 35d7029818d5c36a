//! A small fully connected network with hand-written backpropagation, data
//! loading, and a training loop that hooks every weight matrix up to the
//! configured optimizer.

mod data;
mod mlp;
mod train;

pub use data::{
    load_idx, load_mnist, mnist_dir_from_env, synthetic_blobs, write_idx_images, write_idx_labels, Dataset,
    SyntheticSpec, MNIST_CLASSES, MNIST_FILES,
};
pub use mlp::{softmax, Activation, ForwardCache, MlpModel};
pub use train::{train, train_with, StepView, TrainConfig, TrainOutcome, DIVERGENCE_LOSS};
