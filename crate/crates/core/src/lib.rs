//! Layer-wise closed-form training of convolutional networks.
//!
//! Every conv layer is fit by ridge regression from im2col patches onto a
//! random Gaussian encoding of the labels; the final dense layer regresses
//! onto the one-hot labels directly. Nothing is trained by gradient descent.

pub mod data;
pub mod encoding;
pub mod error;
pub mod im2col;
pub mod linalg;
pub mod model_io;
pub mod network;
pub mod ridge;
pub mod tensor;
pub mod trainer;

pub use error::{AcnnlError, Result};
pub use network::{build_cnn, build_cnn5, LayerSpec, NetworkSpec, TrainedNetwork};
pub use tensor::{Mat, Tensor3};
