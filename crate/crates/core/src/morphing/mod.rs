//! Flow fields, differentiable bilinear warping, the similarity losses and
//! the registration network.

mod flow;
mod loss;
mod regnet;
mod warp;

pub use flow::{scale_flow, FlowField, MorphScale, CANONICAL_ETAS};
pub use loss::{ig_loss, morph_loss, ncc_loss, NCC_EPS};
pub use regnet::{RegNet, RegNetConfig};
pub use warp::{warp, warp_batch};
