//! The TrV encoder: configuration, parameter layout, initialisation, forward
//! pass and analytic size accounting.

mod config;
mod count;
mod forward;
mod init;
mod layout;


pub use config::{
    ablation_rows, ffn_hidden_dim, AblationRow, FfnType, InitScheme, NormScheme, PosEmbed,
    TrVConfig, LN_EPS,
};
pub use count::{count_macs, count_params, ffn_param_count};
pub use forward::{
    block_drop_rates, drop_path, drop_path_factor, mlp_ffn, swiglu_ffn, Mode, Model,
    PositionContext,
};
pub use init::{init_params, init_xavier_normal, trunc_normal, xavier_std, TOKEN_INIT_STD};
pub use layout::{BlockIdx, FfnIdx, LinearIdx, LnIdx, ModelLayout, ParamKind, ParamSpec};
