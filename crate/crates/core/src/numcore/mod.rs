//! Dense tensors, differentiable layers, symmetric eigendecomposition and Adam.

mod adam;
mod eig;
pub mod gradcheck;
mod layers;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use eig::{sym_eig, SymEigen, JACOBI_MAX_SWEEPS, JACOBI_TOLERANCE};
pub use layers::{
    conv1d_backward, conv1d_forward, matmul_backward, sigmoid, Conv1d, ConvCache, ConvGeometry,
    DepthwiseConv1d, DiffLayer, GlobalLayerNorm, Linear, MeanAxis, NormCache, Relu, Sigmoid,
    Softmax,
};
pub use tensor::{ParamSet, Tensor};
pub(crate) use tensor::{gemm, MatRef};
