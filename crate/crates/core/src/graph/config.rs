use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv_output_dim, Padding, BN_EPSILON, BN_MOMENTUM, DEFAULT_DROPOUT};

/// Number of convolution layers the canonical architecture must contain.
pub const MEDNET_CONV_LAYERS: usize = 44;
pub const MEDNET_BLOCKS: usize = 8;
pub const MEDNET_CONNECTIONS: usize = 12;
pub const BRANCH_KERNELS: [usize; 4] = [1, 3, 5, 7];

/// Gray-scale (1 channel) or color (3 channel) model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gray,
    Color,
}

impl Variant {
    pub fn channels(self) -> usize {
        match self {
            Variant::Gray => 1,
            Variant::Color => 3,
        }
    }

    pub fn from_channels(channels: usize) -> Option<Self> {
        match channels {
            1 => Some(Variant::Gray),
            3 => Some(Variant::Color),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Gray => "gray",
            Variant::Color => "color",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grey" => Ok(Variant::Gray),
            "color" | "colour" => Ok(Variant::Color),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?} (expected gray or color)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConv {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub per_branch_channels: usize,
    pub stride: usize,
    #[serde(default = "default_branch_kernels")]
    pub branch_kernels: Vec<usize>,
}

fn default_branch_kernels() -> Vec<usize> {
    BRANCH_KERNELS.to_vec()
}

impl BlockSpec {
    pub fn new(per_branch_channels: usize, stride: usize) -> Self {
        BlockSpec { per_branch_channels, stride, branch_kernels: default_branch_kernels() }
    }

    pub fn out_channels(&self) -> usize {
        self.per_branch_channels * self.branch_kernels.len()
    }
}

/// Where a connection starts: the stem output or the (merged) output of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Stem,
    Block(usize),
}

impl Endpoint {
    /// 0 for the stem, `k` for block `k`.
    pub fn index(self) -> usize {
        match self {
            Endpoint::Stem => 0,
            Endpoint::Block(k) => k,
        }
    }

    pub fn label(self) -> String {
        match self {
            Endpoint::Stem => "stem".into(),
            Endpoint::Block(k) => format!("block{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Identity,
    Conv1x1,
}

/// A skip edge merged by addition into the output of block `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub from: Endpoint,
    pub to: usize,
    pub projection: Projection,
}

impl Connection {
    /// Short connections bypass exactly one block.
    pub fn is_short(&self) -> bool {
        self.from.index() + 1 == self.to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedNetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub stem: Vec<StemConv>,
    pub blocks: Vec<BlockSpec>,
    pub connections: Vec<Connection>,
    pub fc1_width: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_epsilon() -> f64 {
    BN_EPSILON
}

fn default_bn_momentum() -> f64 {
    BN_MOMENTUM
}

/// Eight short connections (one per block) plus four long ones.
pub fn canonical_connections() -> Vec<Connection> {
    let mut out: Vec<Connection> = (1..=MEDNET_BLOCKS)
        .map(|k| Connection {
            from: if k == 1 { Endpoint::Stem } else { Endpoint::Block(k - 1) },
            to: k,
            projection: if k <= 2 { Projection::Identity } else { Projection::Conv1x1 },
        })
        .collect();
    for (from, to) in [(Endpoint::Stem, 2), (Endpoint::Block(2), 4), (Endpoint::Block(4), 6), (Endpoint::Block(6), 8)] {
        out.push(Connection { from, to, projection: Projection::Conv1x1 });
    }
    out
}

impl MedNetConfig {
    /// The canonical 64×64 architecture.
    pub fn canonical(variant: Variant, num_classes: usize) -> Self {
        MedNetConfig {
            input_h: 64,
            input_w: 64,
            input_channels: variant.channels(),
            num_classes,
            stem: vec![
                StemConv { kernel: 3, stride: 2, out_channels: 32 },
                StemConv { kernel: 5, stride: 2, out_channels: 64 },
            ],
            blocks: [(16, 1), (16, 1), (32, 2), (32, 1), (48, 2), (48, 1), (64, 2), (64, 1)]
                .into_iter()
                .map(|(c, s)| BlockSpec::new(c, s))
                .collect(),
            connections: canonical_connections(),
            fc1_width: 256,
            dropout_rate: DEFAULT_DROPOUT,
            bn_epsilon: BN_EPSILON,
            bn_momentum: BN_MOMENTUM,
        }
    }

    /// Canonical wiring and widths at a different input resolution.
    pub fn canonical_with_input(variant: Variant, num_classes: usize, size: usize) -> Self {
        MedNetConfig { input_h: size, input_w: size, ..Self::canonical(variant, num_classes) }
    }

    /// Same topology (all 44 convolutions) with a handful of channels per
    /// layer and a 16×16 input; small enough for float64 gradient checks.
    pub fn tiny(variant: Variant, num_classes: usize) -> Self {
        MedNetConfig {
            input_h: 16,
            input_w: 16,
            stem: vec![
                StemConv { kernel: 3, stride: 2, out_channels: 4 },
                StemConv { kernel: 5, stride: 2, out_channels: 8 },
            ],
            blocks: [(2, 1), (2, 1), (3, 2), (3, 1), (3, 2), (3, 1), (4, 2), (4, 1)]
                .into_iter()
                .map(|(c, s)| BlockSpec::new(c, s))
                .collect(),
            fc1_width: 8,
            ..Self::canonical(variant, num_classes)
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::from_channels(self.input_channels)
    }

    pub fn stem_out_channels(&self) -> usize {
        self.stem.last().map_or(self.input_channels, |s| s.out_channels)
    }

    /// Channels produced at an endpoint.
    pub fn endpoint_channels(&self, e: Endpoint) -> usize {
        match e {
            Endpoint::Stem => self.stem_out_channels(),
            Endpoint::Block(k) => self.blocks[k - 1].out_channels(),
        }
    }

    /// Spatial size `(h, w)` produced at an endpoint.
    pub fn endpoint_size(&self, e: Endpoint) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.input_h, self.input_w);
        for s in &self.stem {
            h = conv_output_dim(h, s.kernel, s.stride, Padding::Same)?.0;
            w = conv_output_dim(w, s.kernel, s.stride, Padding::Same)?.0;
        }
        for b in &self.blocks[..e.index()] {
            h = h.div_ceil(b.stride);
            w = w.div_ceil(b.stride);
        }
        Ok((h, w))
    }

    /// Product of block strides between a connection's endpoints.
    pub fn connection_stride(&self, c: &Connection) -> usize {
        self.blocks[c.from.index()..c.to].iter().map(|b| b.stride).product()
    }

    /// Stem + branch + projection convolutions.
    pub fn conv_count(&self) -> usize {
        let branches: usize = self.blocks.iter().map(|b| b.branch_kernels.len()).sum();
        let projections = self.connections.iter().filter(|c| c.projection == Projection::Conv1x1).count();
        self.stem.len() + branches + projections
    }

    /// Structural checks needed for the wiring to be well formed (endpoint
    /// ranges, acyclicity, shape compatibility). Does not enforce the
    /// canonical counts; see [`MedNetConfig::validate`].
    pub fn validate_wiring(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must be in [0,1), got {}", self.dropout_rate));
        }
        if self.fc1_width == 0 || self.input_channels == 0 || self.input_h == 0 || self.input_w == 0 {
            return bad("widths and input size must be positive".into());
        }
        for s in &self.stem {
            if s.kernel == 0 || s.stride == 0 || s.out_channels == 0 {
                return bad(format!("invalid stem conv {s:?}"));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.stride == 0 || b.per_branch_channels == 0 || b.branch_kernels.is_empty() {
                return bad(format!("invalid block {}: {b:?}", i + 1));
            }
        }
        for c in &self.connections {
            if c.to == 0 || c.to > self.blocks.len() {
                return bad(format!("connection into nonexistent block {}", c.to));
            }
            if c.from.index() >= c.to {
                return bad(format!("connection {} -> block{} does not point forward", c.from.label(), c.to));
            }
            let src_c = self.endpoint_channels(c.from);
            let dst_c = self.endpoint_channels(Endpoint::Block(c.to));
            let (sh, sw) = self.endpoint_size(c.from)?;
            let (dh, dw) = self.endpoint_size(Endpoint::Block(c.to))?;
            match c.projection {
                Projection::Identity => {
                    if (sh, sw, src_c) != (dh, dw, dst_c) {
                        return bad(format!(
                            "identity connection {} -> block{} joins {sh}×{sw}×{src_c} onto {dh}×{dw}×{dst_c}",
                            c.from.label(),
                            c.to
                        ));
                    }
                }
                Projection::Conv1x1 => {
                    let s = self.connection_stride(c);
                    if (sh.div_ceil(s), sw.div_ceil(s)) != (dh, dw) {
                        return bad(format!("projection {} -> block{} cannot match spatial size", c.from.label(), c.to));
                    }
                }
            }
        }
        Ok(())
    }

    /// Full MedNet invariants: 8 blocks of {1,3,5,7} branches, 12 connections,
    /// exactly 44 convolutions, no 1×1 stem kernel, gray or color input.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if Variant::from_channels(self.input_channels).is_none() {
            return bad(format!("input_channels must be 1 (gray) or 3 (color), got {}", self.input_channels));
        }
        if self.input_h < 32 || self.input_w < 32 || !self.input_h.is_multiple_of(16) || !self.input_w.is_multiple_of(16) {
            return bad(format!(
                "input size must be at least 32 and divisible by 16, got {}×{}",
                self.input_h, self.input_w
            ));
        }
        if self.stem.len() != 2 {
            return bad(format!("stem must have exactly 2 convolutions, got {}", self.stem.len()));
        }
        for s in &self.stem {
            if s.kernel == 1 {
                return bad("stem convolutions must not use 1×1 kernels".into());
            }
            if !BRANCH_KERNELS.contains(&s.kernel) {
                return bad(format!("stem kernel {} outside {{3,5,7}}", s.kernel));
            }
        }
        if self.blocks.len() != MEDNET_BLOCKS {
            return bad(format!("expected {MEDNET_BLOCKS} parallel blocks, got {}", self.blocks.len()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let mut kernels = b.branch_kernels.clone();
            kernels.sort_unstable();
            if kernels != BRANCH_KERNELS {
                return bad(format!("block {} branch kernels {:?} must be exactly {{1,3,5,7}}", i + 1, b.branch_kernels));
            }
        }
        if self.connections.len() != MEDNET_CONNECTIONS {
            return bad(format!("expected {MEDNET_CONNECTIONS} connections, got {}", self.connections.len()));
        }
        let convs = self.conv_count();
        if convs != MEDNET_CONV_LAYERS {
            return bad(format!("architecture has {convs} convolution layers, expected {MEDNET_CONV_LAYERS}"));
        }
        self.validate_wiring()
    }
}
