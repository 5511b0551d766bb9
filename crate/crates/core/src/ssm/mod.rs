//! State-space kernels: discretisation, selective scan and the Mamba block.

mod block;
mod discretize;
pub mod scan;

pub use block::{
    a_bar_is_contractive, input_params, mamba_block, mamba_stack, BlockConfig, MambaBlockParams,
    SsmParams, LAYER_NORM_EPS,
};
pub use discretize::{discretize, SMALL_A_THRESHOLD};
pub use scan::{selective_scan_chunked, selective_scan_seq, ScanDims};
