//! A small reverse-mode network library: dense, 3D (transposed) convolution,
//! batch norm and pointwise layers composed into [`Sequential`] networks.

mod adam;
mod checkpoint;
mod conv;
mod gemm;
mod layers;
mod loss;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_params, encode_params, read_params, write_params, PARAMS_MAGIC};
pub use conv::ConvGeometry;
pub use layers::{ForwardCache, LayerSpec, Mode, Params, Sequential, INIT_STD};
pub use loss::{bce_loss, BCE_CLAMP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("invalid layer {layer}: {detail}")]
    InvalidLayer { layer: usize, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("forward cache was already consumed by a backward pass")]
    StaleCache,
    #[error("{0}")]
    Internal(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated parameter file: {0}")]
    Truncated(String),
    #[error("unsupported parameter file version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
