//! Network layers: dual-statistics batch norm and the conv backbone.

mod bn;
mod net;

pub use bn::{instance_stats, BoundAffine, DualBnLayer, GlobalStats, InstanceStats, BN_EPS, BN_MOMENTUM};
pub use net::{AlphaSource, BoundNet, ConvBlock, ForwardOutput, NetConfig, NormMode, SmallConvNet};
