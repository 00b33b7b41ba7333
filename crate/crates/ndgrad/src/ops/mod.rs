pub mod attention;
pub mod conv;
pub mod dropout;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod rnn;
pub mod shape;
pub mod softmax;

pub use attention::{scaled_dot_attention, AttentionParams};
pub use conv::{conv1d, conv2d, dilated_conv1d_same, dilated_conv2d_same, Conv2dSpec};
pub use dropout::dropout;
pub use rnn::{gru_step, GruParams};
pub use shape::concat;
