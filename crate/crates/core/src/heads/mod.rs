//! Prediction heads: WA-TGP, WA-TT and DT over per-layer encoder features
//! plus a per-ear audiogram, with one parameter set shared by both ears.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::{head_from_bytes, head_to_bytes, load_head, save_head, ValueWidth};
pub use config::{Arch, HeadConfig, LayerMode, DIM_GRID};
pub use model::{
    build_graph, forward_dt, forward_wa_tgp, forward_wa_tt, head_forward, init_head, init_head_with_dims,
    pooling_for, predict_prepared, Head, HeadDims, Pooling, Prepared,
};
