//! Multi-head self-attention, area attention, the position perceiver, the
//! attention MLP, and the raw kernels (naive, area, tiled online-softmax).

mod config;
mod kernels;
mod layer;

pub use config::{AreaPartition, AttentionConfig, PartitionAxis};
pub use kernels::{
    area_attention_kernel, attention_cost, naive_attention, tiled_attention, tiled_attention_heads, KernelStats,
};
pub use layer::{ABlock, AreaAttention, AttentionMlp, PERCEIVER_KERNEL};

#[cfg(test)]
mod tests;
