use crate::attention::AttentionSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand by `expansion`.
    Bottleneck { expansion: usize },
}

impl BlockKind {
    pub fn out_channels(self, width: usize) -> usize {
        match self {
            BlockKind::Basic => width,
            BlockKind::Bottleneck { expansion } => width * expansion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    /// Inner width; a bottleneck stage outputs `channels × expansion`.
    pub channels: usize,
    /// Stride of the stage's first block.
    pub stride: usize,
}

/// What a shared recurrent unit does at a block the mask switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskPolicy {
    /// The block is skipped entirely; the state does not move.
    #[default]
    Freeze,
    /// The unit still steps on the block's descriptor, but its map is not
    /// applied.
    Advance,
}

impl MaskPolicy {
    pub fn name(self) -> &'static str {
        match self {
            MaskPolicy::Freeze => "freeze",
            MaskPolicy::Advance => "advance",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    pub block_kind: BlockKind,
    pub stem_channels: usize,
    pub attention: AttentionSpec,
    /// Per stage, per block: whether attention runs there.
    pub attention_block_mask: Option<Vec<Vec<bool>>>,
    /// Per stage: whether the stage carries attention at all.
    pub attention_stage_mask: Option<Vec<bool>>,
    pub mask_policy: MaskPolicy,
    pub use_skip: bool,
    pub use_batchnorm: bool,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
}

pub const NAMED_CONFIGS: &[&str] = &[
    "resnet83",
    "resnet164",
    "resnet245",
    "resnet407",
    "resnet56-basic",
    "tiny-dia",
];

impl NetworkConfig {
    fn cifar(block_kind: BlockKind, blocks: usize, widths: [usize; 3], stem: usize, classes: usize) -> Self {
        let strides = [1, 2, 2];
        NetworkConfig {
            stages: widths
                .iter()
                .zip(strides)
                .map(|(&channels, stride)| StageConfig {
                    blocks,
                    channels,
                    stride,
                })
                .collect(),
            block_kind,
            stem_channels: stem,
            attention: AttentionSpec::none(),
            attention_block_mask: None,
            attention_stage_mask: None,
            mask_policy: MaskPolicy::Freeze,
            use_skip: true,
            use_batchnorm: true,
            num_classes: classes,
            input_shape: [3, 32, 32],
        }
    }

    /// A named architecture, with attention switched off.
    pub fn named(name: &str) -> Result<Self> {
        let bottleneck = BlockKind::Bottleneck { expansion: 4 };
        let cfg = match name {
            "resnet83" => Self::cifar(bottleneck, 9, [16, 32, 64], 16, 100),
            "resnet164" => Self::cifar(bottleneck, 18, [16, 32, 64], 16, 100),
            "resnet245" => Self::cifar(bottleneck, 27, [16, 32, 64], 16, 100),
            "resnet407" => Self::cifar(bottleneck, 45, [16, 32, 64], 16, 100),
            "resnet56-basic" => Self::cifar(BlockKind::Basic, 9, [16, 32, 64], 16, 100),
            "tiny-dia" => Self::cifar(BlockKind::Basic, 3, [8, 16, 32], 8, 4),
            other => {
                return Err(Error::config(format!(
                    "unknown architecture '{other}' (known: {})",
                    NAMED_CONFIGS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn with_attention(mut self, attention: AttentionSpec) -> Self {
        self.attention = attention;
        self
    }

    /// Same stages with `blocks` blocks each.
    pub fn with_blocks_per_stage(mut self, blocks: usize) -> Self {
        for s in &mut self.stages {
            s.blocks = blocks;
        }
        self
    }

    /// Output width of stage `i`.
    pub fn stage_width(&self, i: usize) -> usize {
        self.block_kind.out_channels(self.stages[i].channels)
    }

    pub fn stage_enabled(&self, i: usize) -> bool {
        self.attention_stage_mask.as_ref().map_or(true, |m| m[i])
    }

    pub fn block_mask(&self, i: usize) -> Vec<bool> {
        match &self.attention_block_mask {
            Some(m) => m[i].clone(),
            None => vec![true; self.stages[i].blocks],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("network needs at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return Err(Error::config(format!("stage {i}: blocks, channels and stride must be positive")));
            }
        }
        if self.stem_channels == 0 || self.num_classes == 0 || self.input_shape.contains(&0) {
            return Err(Error::config("stem channels, classes and input shape must be positive"));
        }
        if let BlockKind::Bottleneck { expansion: 0 } = self.block_kind {
            return Err(Error::config("bottleneck expansion must be positive"));
        }
        if let Some(m) = &self.attention_stage_mask {
            if m.len() != self.stages.len() {
                return Err(Error::config(format!(
                    "attention stage mask has {} entries for {} stages",
                    m.len(),
                    self.stages.len()
                )));
            }
        }
        if let Some(m) = &self.attention_block_mask {
            if m.len() != self.stages.len() {
                return Err(Error::config(format!(
                    "attention block mask has {} stages, network has {}",
                    m.len(),
                    self.stages.len()
                )));
            }
            for (i, (row, s)) in m.iter().zip(&self.stages).enumerate() {
                if row.len() != s.blocks {
                    return Err(Error::config(format!(
                        "attention block mask for stage {i} has {} entries for {} blocks",
                        row.len(),
                        s.blocks
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_configs_resolve() {
        for name in NAMED_CONFIGS {
            NetworkConfig::named(name).unwrap().validate().unwrap();
        }
        assert!(matches!(NetworkConfig::named("resnet9000"), Err(Error::Config(_))));
    }

    #[test]
    fn bottleneck_widths() {
        let c = NetworkConfig::named("resnet164").unwrap();
        let widths: Vec<_> = (0..3).map(|i| c.stage_width(i)).collect();
        assert_eq!(widths, vec![64, 128, 256]);
        let blocks: usize = c.stages.iter().map(|s| s.blocks).sum();
        // three layers per block plus stem and head
        assert_eq!(3 * blocks + 2, 164);
    }
}
