//! Three-branch network: plain (no skips), residual and dense branches,
//! fused by channel concatenation and 1x1 compression, with a linear head.

mod blocks;
mod config;
mod network;
mod params;

pub use blocks::{
    ConvBn, ConvBnCache, DenseBlock, DenseBranch, Layer, PlainBlock, ResidualBlock, ResidualUnit,
};
pub use config::{
    BlockKind, BlockSpec, DenseBranchSpec, NetworkConfig, StageSpec, DESK64_WIDTHS,
    PAPER224_WIDTHS,
};
pub use network::{build_network, forward_network, predict, ForwardPass, Network, Stage};
pub use params::{ParamKind, ParameterSet, Parameters};

#[cfg(test)]
mod tests;
