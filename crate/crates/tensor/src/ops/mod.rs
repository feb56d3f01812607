mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod reduce;
mod shape;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use elementwise::BinaryOp;
pub use norm::{NormMode, BN_EPS, BN_MOMENTUM};
pub use pool::stripe_bounds;
