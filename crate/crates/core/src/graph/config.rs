use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two conv+ReLU layers, then 2x2 max pooling.
    PlainSmall,
    /// Three conv+ReLU layers, then 2x2 max pooling.
    PlainLarge,
    /// Two shape-preserving residual units.
    ResidualSmall,
    /// Residual unit, strided conv (halves H and W), residual unit.
    ResidualLarge,
    /// Densely connected conv-BN-ReLU layers.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Dense only.
    pub dense_layers: Option<usize>,
    /// Dense only.
    pub growth: Option<usize>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            dense_layers: None,
            growth: None,
        }
    }

    pub fn dense(stem: usize, layers: usize, growth: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Dense,
            in_channels: stem,
            out_channels: stem + layers * growth,
            dense_layers: Some(layers),
            growth: Some(growth),
        }
    }

    fn validate(&self, at: &str) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("{at}: channel counts must be positive")));
        }
        let dense_fields = self.dense_layers.is_some() || self.growth.is_some();
        match self.kind {
            BlockKind::Dense => {
                let (Some(l), Some(g)) = (self.dense_layers, self.growth) else {
                    return Err(Error::config(format!("{at}: dense block needs layers and growth")));
                };
                if l == 0 || g == 0 {
                    return Err(Error::config(format!("{at}: dense layers and growth must be positive")));
                }
                if self.out_channels != self.in_channels + l * g {
                    return Err(Error::config(format!(
                        "{at}: dense output {} != {} + {l} * {g}",
                        self.out_channels, self.in_channels
                    )));
                }
            }
            _ if dense_fields => {
                return Err(Error::config(format!(
                    "{at}: layers/growth only apply to dense blocks"
                )))
            }
            BlockKind::ResidualSmall if self.in_channels != self.out_channels => {
                return Err(Error::config(format!(
                    "{at}: small residual block needs in_channels == out_channels for the identity skip, got {} -> {}",
                    self.in_channels, self.out_channels
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One plain/residual pair operating at the same depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub plain: BlockSpec,
    pub residual: BlockSpec,
}

/// Dense branch: stem conv at input resolution, one max-pool per stage,
/// the dense block, then a 1x1 compression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseBranchSpec {
    pub stem: usize,
    pub block: BlockSpec,
    pub compress_to: usize,
}

/// Three-branch network topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// `paper224`, `desk64`, or a user label for overridden configs.
    pub preset: String,
    /// `(C, H, W)`.
    pub input_dims: (usize, usize, usize),
    pub stages: Vec<StageSpec>,
    /// One entry per fused stage (stages 2 ..= n-1); the fused output feeds
    /// both branches of the following stage.
    pub compression_channels: Vec<usize>,
    pub dense_branch: DenseBranchSpec,
    pub num_classes: usize,
}

pub const PAPER224_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const DESK64_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl NetworkConfig {
    /// 224x224 RGB input, widths 64/128/256/512.
    pub fn paper224(num_classes: usize) -> Result<Self> {
        Self::from_widths("paper224", (3, 224, 224), &PAPER224_WIDTHS, None, num_classes)
    }

    /// 64x64 RGB input, widths 8/16/32/64.
    pub fn desk64(num_classes: usize) -> Result<Self> {
        Self::from_widths("desk64", (3, 64, 64), &DESK64_WIDTHS, None, num_classes)
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "paper224" => Self::paper224(num_classes),
            "desk64" => Self::desk64(num_classes),
            other => Err(Error::config(format!(
                "unknown preset {other:?}, expected paper224 or desk64"
            ))),
        }
    }

    /// Builds the stage plan from per-stage widths. The first half of the
    /// stages (rounded up) use the small blocks, the rest the large ones.
    /// Compression widths default to the width of each fused stage; the dense
    /// branch uses the first width as stem, `L = 4` layers growing by a
    /// quarter of the last width, and compresses to the last width.
    pub fn from_widths(
        preset: &str,
        input_dims: (usize, usize, usize),
        widths: &[usize],
        compression: Option<&[usize]>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = widths.len();
        if n == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        let fused = n.saturating_sub(2);
        let compression: Vec<usize> = match compression {
            Some(c) => c.to_vec(),
            None => widths[1..1 + fused].to_vec(),
        };
        if compression.len() != fused {
            return Err(Error::config(format!(
                "{} stages need {fused} compression widths, got {}",
                n,
                compression.len()
            )));
        }
        let small = n.div_ceil(2);
        let mut stages = Vec::with_capacity(n);
        for (s, &w) in widths.iter().enumerate() {
            let (plain_in, residual_in) = match s {
                0 => (input_dims.0, input_dims.0),
                1 => (widths[0], widths[0]),
                _ => (compression[s - 2], compression[s - 2]),
            };
            let (pk, rk) = if s < small {
                (BlockKind::PlainSmall, BlockKind::ResidualSmall)
            } else {
                (BlockKind::PlainLarge, BlockKind::ResidualLarge)
            };
            let residual = match rk {
                BlockKind::ResidualSmall => BlockSpec::new(rk, w, w),
                _ => BlockSpec::new(rk, residual_in, w),
            };
            stages.push(StageSpec {
                plain: BlockSpec::new(pk, plain_in, w),
                residual,
            });
        }
        let last = widths[n - 1];
        let cfg = NetworkConfig {
            preset: preset.to_string(),
            input_dims,
            stages,
            compression_channels: compression,
            dense_branch: DenseBranchSpec {
                stem: widths[0],
                block: BlockSpec::dense(widths[0], 4, (last / 4).max(1)),
                compress_to: last,
            },
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial dims after all stages.
    pub fn final_hw(&self) -> (usize, usize) {
        let f = 1 << self.stages.len();
        (self.input_dims.1 / f, self.input_dims.2 / f)
    }

    /// Channels of the final `[dense; residual; plain]` concatenation.
    pub fn final_channels(&self) -> [usize; 3] {
        let last = self.stages.last().expect("validated config has stages");
        [
            self.dense_branch.compress_to,
            last.residual.out_channels,
            last.plain.out_channels,
        ]
    }

    /// Width of the flattened feature vector entering the head.
    pub fn head_inputs(&self) -> usize {
        let (h, w) = self.final_hw();
        self.final_channels().iter().sum::<usize>() * h * w
    }

    /// Channels entering stage `s` (0-based) on the plain and residual side.
    fn stage_inputs(&self, s: usize) -> (usize, usize) {
        match s {
            0 => (self.input_dims.0, self.input_dims.0),
            1 => (
                self.stages[0].plain.out_channels,
                self.stages[0].residual.out_channels,
            ),
            _ => (self.compression_channels[s - 2], self.compression_channels[s - 2]),
        }
    }

    /// Checks every structural constraint, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_dims;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input dims {:?} must be positive", self.input_dims)));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let n = self.stages.len();
        if n == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        let f = 1usize << n;
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by 2^{n} = {f}"
            )));
        }
        if self.compression_channels.len() != n.saturating_sub(2) {
            return Err(Error::config(format!(
                "{} stages need {} compression widths, got {}",
                n,
                n.saturating_sub(2),
                self.compression_channels.len()
            )));
        }
        if self.compression_channels.contains(&0) {
            return Err(Error::config("compression widths must be positive"));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            let at = format!("stage{}", s + 1);
            stage.plain.validate(&format!("{at}.plain"))?;
            stage.residual.validate(&format!("{at}.residual"))?;
            if !matches!(stage.plain.kind, BlockKind::PlainSmall | BlockKind::PlainLarge) {
                return Err(Error::config(format!("{at}.plain must be a plain block")));
            }
            if !matches!(
                stage.residual.kind,
                BlockKind::ResidualSmall | BlockKind::ResidualLarge
            ) {
                return Err(Error::config(format!("{at}.residual must be a residual block")));
            }
            let (pin, rin) = self.stage_inputs(s);
            if stage.plain.in_channels != pin {
                return Err(Error::config(format!(
                    "{at}.plain expects {} input channels but receives {pin}",
                    stage.plain.in_channels
                )));
            }
            if stage.residual.kind == BlockKind::ResidualLarge && stage.residual.in_channels != rin {
                return Err(Error::config(format!(
                    "{at}.residual expects {} input channels but receives {rin}",
                    stage.residual.in_channels
                )));
            }
            if stage.plain.out_channels != stage.residual.out_channels {
                return Err(Error::config(format!(
                    "{at}: plain and residual widths differ ({} vs {})",
                    stage.plain.out_channels, stage.residual.out_channels
                )));
            }
        }
        let d = &self.dense_branch;
        d.block.validate("dense.block")?;
        if d.block.kind != BlockKind::Dense {
            return Err(Error::config("dense.block must be a dense block"));
        }
        if d.stem == 0 || d.block.in_channels != d.stem {
            return Err(Error::config(format!(
                "dense.block expects {} channels but the stem produces {}",
                d.block.in_channels, d.stem
            )));
        }
        if d.compress_to == 0 {
            return Err(Error::config("dense.compress width must be positive"));
        }
        Ok(())
    }
}
