//! Parameterized building blocks: plain and multi-kernel ("mix") convolution
//! blocks, their recurrent-residual counterparts, and the additive attention
//! gate.

mod blocks;
mod params;

pub use blocks::{
    split_filters, AttentionGate, Block, BlockKind, BlockSpec, ConvLayer, ConvStage, NormLayer,
    DEFAULT_RECURRENCE_STEPS,
};
pub use params::{BnId, Initializer, Param, ParamId, ParamStore, Session};
