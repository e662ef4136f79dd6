//! Declarative MobileFaceNet layer tables and their expansion into concrete
//! layer geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Full convolution + BN + PReLU.
    Conv,
    /// Depthwise convolution + BN + PReLU.
    Dwconv,
    /// 1×1 expansion, depthwise 3×3, 1×1 linear projection.
    Bottleneck,
    /// Global depthwise convolution + BN (no activation).
    Gdconv,
    /// 1×1 convolution to the embedding width + BN (no activation).
    LinearConv,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Conv => "conv",
            StageKind::Dwconv => "dwconv",
            StageKind::Bottleneck => "bottleneck",
            StageKind::Gdconv => "gdconv",
            StageKind::LinearConv => "linear_conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => StageKind::Conv,
            "dwconv" => StageKind::Dwconv,
            "bottleneck" => StageKind::Bottleneck,
            "gdconv" => StageKind::Gdconv,
            "linear_conv" => StageKind::LinearConv,
            _ => return None,
        })
    }
}

/// One row of the layer table.
///
/// `kernel` is the spatial kernel of `conv`/`dwconv` stages; for `gdconv`,
/// 0 means "whatever spatial extent reaches this stage" and any other value
/// must match that extent exactly. `channels` is ignored by `gdconv` (it keeps
/// its input width) and by `linear_conv` (it always emits `embedding_dim`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub expansion: usize,
    pub channels: usize,
    pub repeat: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl StageSpec {
    pub fn conv(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind: StageKind::Conv,
            expansion: 1,
            channels,
            repeat: 1,
            stride,
            kernel,
        }
    }

    pub fn dwconv(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind: StageKind::Dwconv,
            ..Self::conv(channels, kernel, stride)
        }
    }

    pub fn bottleneck(expansion: usize, channels: usize, repeat: usize, stride: usize) -> Self {
        Self {
            kind: StageKind::Bottleneck,
            expansion,
            channels,
            repeat,
            stride,
            kernel: 3,
        }
    }

    pub fn gdconv(kernel: usize) -> Self {
        Self {
            kind: StageKind::Gdconv,
            ..Self::conv(0, kernel, 1)
        }
    }

    pub fn linear_conv() -> Self {
        Self {
            kind: StageKind::LinearConv,
            ..Self::conv(0, 1, 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: (usize, usize),
    pub embedding_dim: usize,
    pub width_mult: f64,
    pub channel_round: usize,
    pub stage_table: Vec<StageSpec>,
    /// Unscaled output widths, one per stage, replacing `channels · width_mult`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_override: Option<Vec<usize>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::mobilefacenet()
    }
}

/// The MobileFaceNet table with a 512-d embedding.
pub fn mobilefacenet_table() -> Vec<StageSpec> {
    vec![
        StageSpec::conv(64, 3, 2),
        StageSpec::dwconv(64, 3, 1),
        StageSpec::bottleneck(2, 64, 5, 2),
        StageSpec::bottleneck(4, 128, 1, 2),
        StageSpec::bottleneck(2, 128, 6, 1),
        StageSpec::bottleneck(4, 128, 1, 2),
        StageSpec::bottleneck(2, 128, 2, 1),
        StageSpec::conv(512, 1, 1),
        StageSpec::gdconv(0),
        StageSpec::linear_conv(),
    ]
}

impl ArchConfig {
    pub fn mobilefacenet() -> Self {
        Self {
            input_size: (112, 112),
            embedding_dim: 512,
            width_mult: 1.0,
            channel_round: 8,
            stage_table: mobilefacenet_table(),
            channel_override: None,
        }
    }

    /// MobileFaceNet with every convolution widened ×2 (embedding stays 512).
    pub fn mmobilefacenet() -> Self {
        Self {
            width_mult: 2.0,
            ..Self::mobilefacenet()
        }
    }

    pub fn with_width(mut self, width_mult: f64) -> Self {
        self.width_mult = width_mult;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = (size, size);
        self
    }

    /// Channel count for a stage after width scaling (or override).
    pub fn stage_channels(&self, stage: usize) -> usize {
        if let Some(c) = self.channel_override.as_ref().and_then(|o| o.get(stage)) {
            return *c;
        }
        self.scale_channels(self.stage_table[stage].channels)
    }

    /// `round_to_multiple(base · width_mult, channel_round)`, at least one multiple.
    pub fn scale_channels(&self, base: usize) -> usize {
        let r = self.channel_round as f64;
        let scaled = base as f64 * self.width_mult;
        let rounded = ((scaled / r).round() * r) as usize;
        rounded.max(self.channel_round)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input size must be positive".into());
        }
        if self.embedding_dim == 0 || self.channel_round == 0 {
            return bad("embedding_dim and channel_round must be positive".into());
        }
        if !(self.width_mult.is_finite() && self.width_mult > 0.0) {
            return bad(format!(
                "width_mult must be positive, got {}",
                self.width_mult
            ));
        }
        if self.stage_table.is_empty() {
            return bad("stage table is empty".into());
        }
        if let Some(o) = &self.channel_override {
            if o.len() != self.stage_table.len() || o.contains(&0) {
                return bad(format!(
                    "channel override needs {} positive entries",
                    self.stage_table.len()
                ));
            }
        }
        for (i, s) in self.stage_table.iter().enumerate() {
            if s.repeat == 0 || s.stride == 0 || s.expansion == 0 {
                return bad(format!(
                    "stage {i}: repeat, stride and expansion must be positive"
                ));
            }
            let needs_channels = matches!(
                s.kind,
                StageKind::Conv | StageKind::Dwconv | StageKind::Bottleneck
            );
            if needs_channels && s.channels == 0 {
                return bad(format!("stage {i}: zero channels"));
            }
            if matches!(s.kind, StageKind::Conv | StageKind::Dwconv) && s.kernel == 0 {
                return bad(format!("stage {i}: zero kernel"));
            }
        }
        if self.stage_table.last().map(|s| s.kind) != Some(StageKind::LinearConv) {
            return bad("stage table must end with a linear_conv embedding layer".into());
        }
        Ok(())
    }

    /// Expands the table into concrete layers, checking channel and spatial consistency.
    pub fn plan(&self) -> Result<Vec<BlockPlan>> {
        self.validate()?;
        let mut blocks = Vec::new();
        let mut c = 3;
        let (mut h, mut w) = self.input_size;
        let shrink = |spec: &ConvSpec, h: usize, w: usize, stage: usize| {
            spec.output_hw(h, w).map_err(|_| {
                Error::InvalidConfig(format!(
                    "stage {stage}: {h}x{w} feature map too small for stride {}",
                    spec.stride
                ))
            })
        };
        for (i, s) in self.stage_table.iter().enumerate() {
            match s.kind {
                StageKind::Conv | StageKind::Dwconv => {
                    let out = self.stage_channels(i);
                    let spec = if s.kind == StageKind::Conv {
                        ConvSpec::new(c, out, s.kernel, s.stride)
                    } else {
                        if out != c {
                            return Err(Error::InvalidConfig(format!(
                                "stage {i}: depthwise stage cannot change width {c} -> {out}"
                            )));
                        }
                        ConvSpec::depthwise(c, s.kernel, s.stride)
                    };
                    for r in 0..s.repeat {
                        let spec = if r == 0 {
                            spec
                        } else {
                            ConvSpec {
                                in_channels: out,
                                stride: 1,
                                groups: if s.kind == StageKind::Dwconv { out } else { 1 },
                                ..spec
                            }
                        };
                        blocks.push(BlockPlan::Unit(UnitPlan {
                            spec,
                            act: true,
                            input_hw: (h, w),
                        }));
                        (h, w) = shrink(&spec, h, w, i)?;
                    }
                    c = out;
                }
                StageKind::Bottleneck => {
                    let out = self.stage_channels(i);
                    for r in 0..s.repeat {
                        let stride = if r == 0 { s.stride } else { 1 };
                        let hidden = c * s.expansion;
                        let expand = ConvSpec::new(c, hidden, 1, 1);
                        let depthwise = ConvSpec::depthwise(hidden, s.kernel, stride);
                        let project = ConvSpec::new(hidden, out, 1, 1);
                        let input_hw = (h, w);
                        (h, w) = shrink(&depthwise, h, w, i)?;
                        blocks.push(BlockPlan::Bottleneck {
                            expand: UnitPlan {
                                spec: expand,
                                act: true,
                                input_hw,
                            },
                            depthwise: UnitPlan {
                                spec: depthwise,
                                act: true,
                                input_hw,
                            },
                            project: UnitPlan {
                                spec: project,
                                act: false,
                                input_hw: (h, w),
                            },
                            residual: stride == 1 && c == out,
                        });
                        c = out;
                    }
                }
                StageKind::Gdconv => {
                    if h != w {
                        return Err(Error::InvalidConfig(format!(
                            "stage {i}: global depthwise conv needs a square map, got {h}x{w}"
                        )));
                    }
                    if s.kernel != 0 && s.kernel != h {
                        return Err(Error::InvalidConfig(format!(
                            "stage {i}: strides reduce the input to {h}x{w}, not the {k}x{k} gdconv kernel",
                            k = s.kernel
                        )));
                    }
                    let spec = ConvSpec::depthwise(c, h, 1).with_padding(0);
                    blocks.push(BlockPlan::Unit(UnitPlan {
                        spec,
                        act: false,
                        input_hw: (h, w),
                    }));
                    (h, w) = (1, 1);
                }
                StageKind::LinearConv => {
                    let spec = ConvSpec::new(c, self.embedding_dim, 1, 1);
                    blocks.push(BlockPlan::Unit(UnitPlan {
                        spec,
                        act: false,
                        input_hw: (h, w),
                    }));
                    c = self.embedding_dim;
                }
            }
        }
        if (h, w) != (1, 1) {
            return Err(Error::InvalidConfig(format!(
                "layer table leaves a {h}x{w} map; strides must reduce the input to the gdconv kernel"
            )));
        }
        debug_assert_eq!(c, self.embedding_dim);
        Ok(blocks)
    }
}

/// A conv → BN (→ PReLU) unit with its input resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitPlan {
    pub spec: ConvSpec,
    pub act: bool,
    pub input_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockPlan {
    Unit(UnitPlan),
    Bottleneck {
        expand: UnitPlan,
        depthwise: UnitPlan,
        project: UnitPlan,
        residual: bool,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_scaling_keeps_embedding() {
        let a = ArchConfig::mmobilefacenet();
        assert_eq!(a.stage_channels(0), 128);
        assert_eq!(a.stage_channels(7), 1024);
        let plan = a.plan().unwrap();
        match plan.last().unwrap() {
            BlockPlan::Unit(u) => assert_eq!(u.spec.out_channels, 512),
            _ => panic!("last block must be the linear conv"),
        }
        assert_eq!(
            ArchConfig::mobilefacenet()
                .with_width(0.25)
                .scale_channels(64),
            16
        );
        assert_eq!(
            ArchConfig::mobilefacenet()
                .with_width(0.3)
                .scale_channels(64),
            16
        );
    }

    #[test]
    fn baseline_reaches_seven_by_seven() {
        let plan = ArchConfig::mobilefacenet().plan().unwrap();
        let gd = plan
            .iter()
            .find_map(|b| match b {
                BlockPlan::Unit(u) if u.spec.is_depthwise() && u.spec.kernel.0 > 3 => Some(*u),
                _ => None,
            })
            .unwrap();
        assert_eq!(gd.spec.kernel, (7, 7));
        assert_eq!(gd.input_hw, (7, 7));
    }

    #[test]
    fn rejects_mismatched_gdconv_kernel() {
        let mut a = ArchConfig::mobilefacenet().with_input_size(56);
        a.stage_table[8] = StageSpec::gdconv(7);
        assert!(matches!(a.plan(), Err(Error::InvalidConfig(_))));
        a.stage_table[8] = StageSpec::gdconv(4);
        assert!(a.plan().is_ok());
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut a = ArchConfig::mobilefacenet();
        a.width_mult = 0.0;
        assert!(a.plan().is_err());
        let mut a = ArchConfig::mobilefacenet();
        a.stage_table.clear();
        assert!(a.plan().is_err());
        let mut a = ArchConfig::mobilefacenet();
        a.stage_table.remove(8);
        assert!(matches!(a.plan(), Err(Error::InvalidConfig(_))));
        let mut a = ArchConfig::mobilefacenet();
        a.embedding_dim = 0;
        assert!(a.plan().is_err());
    }
}
