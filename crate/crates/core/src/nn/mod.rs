//! Minimal reverse-mode tensor engine: exactly the 3D layers, losses and
//! optimizer the two segmentation networks require, in f64 throughout.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod layers;

pub use adam::Adam;
pub use graph::{BnMode, ConvSpec, Graph, Shape, Tensor, BCE_EPS};
pub use layers::{
    check_compatible, BatchNorm3d, Conv3d, ConvBnRelu, ParamId, ParamSet, Parameter, Session,
    TransposedConv3d,
};
