//! Minimal dense-tensor neural framework: convolution variants, batch
//! normalization, ReLU6, fully connected layers, softmax cross-entropy,
//! reverse-mode gradients, Adam, FLOPs accounting, and checkpoints.

pub mod checkpoint;
pub mod flops;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;
