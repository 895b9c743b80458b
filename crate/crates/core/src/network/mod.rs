//! The camera-model network: a constrained residual filter bank, five valid
//! convolution blocks, twelve skip blocks, a single-channel bottleneck and
//! three fully connected layers.
//!
//! ```text
//! 72x72x3 -> rf 5x5x3x64 (valid, no bias) -> 68x68x64
//!         -> 5 x [conv 3x3 valid, bn, relu] -> 58x58x19
//!         -> 12 x [sub1 = relu(bn(conv)); relu(sub1 + bn(conv(sub1)))] -> 58x58x19
//!         -> bottleneck 3x3x19x1 valid -> 56x56 pre-feature
//!         -> fc1 75 -> dropout(0.8) -> relu -> fc2 100 (features) -> fc3 classes
//! ```

mod checkpoint;
mod forward;
mod loss;
mod params;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, FORMAT_VERSION,
};
pub use forward::{
    build_graph, check_patches, forward, update_running_stats, ForwardOutputs, Graph, BN_MOMENTUM,
    KEEP_PROB,
};
pub use loss::{
    rf_penalty, total_loss, weight_norm, L2Scope, LossConfig, LossTerms, LossValues, RfMode,
};
pub use params::{
    parameter_specs, ConvBn, Fc, Layout, ModelParams, Param, ParamKind, FC1, FEATURES, PATCH,
    PRE_FEATURE, RF_FILTERS, RF_SIZE,
};
