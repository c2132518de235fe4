//! Tensor kernels without autodiff bookkeeping.

pub mod conv;
pub mod index;
pub mod mode;

pub use conv::ConvGeom;
pub use index::IndexMap;
pub use mode::mode_n_product;
