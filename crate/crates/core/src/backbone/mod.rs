//! Pre-activation residual networks with configurable channel attention.

mod config;
mod gradcheck;
mod keys;

pub use config::{BlockKind, MaskPolicy, NetworkConfig, StageConfig, NAMED_CONFIGS};
pub use gradcheck::{check_gradients, CoordinateCheck, GradcheckConfig, GradcheckReport};
pub use keys::{format_shape, network_from_keys, parse_bool, parse_shape, parse_usize, KeySpec, MODEL_KEYS};

use std::collections::BTreeSet;

use crate::attention::{AttentionStep, AttentionUnit, DiaState, Sharing};
use crate::error::{Error, Result};
use crate::nn::{count_weights, Layer, LayerKind, ParamBudget, ParamId, ParamStore, Session};
use crate::rng;
use crate::tensor::{Tensor, Var};

const BACKBONE_STREAM: u64 = 1;
const ATTENTION_STREAM: u64 = 2;

/// One residual block: `a = f(x)` plus an optional projection shortcut.
#[derive(Clone, Debug)]
pub struct Block {
    /// `(norm, conv)` pairs in application order; norms are absent without
    /// batch normalization.
    pub layers: Vec<(Option<Layer>, Layer)>,
    pub shortcut: Option<Layer>,
    pub out_channels: usize,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        kind: BlockKind,
        in_ch: usize,
        width: usize,
        stride: usize,
        use_bn: bool,
    ) -> Result<Self> {
        let conv = |k, i, o, s| LayerKind::Conv2d {
            in_ch: i,
            out_ch: o,
            kernel: k,
            stride: s,
            bias: false,
        };
        let plan: Vec<LayerKind> = match kind {
            BlockKind::Basic => vec![conv(3, in_ch, width, stride), conv(3, width, width, 1)],
            BlockKind::Bottleneck { expansion } => vec![
                conv(1, in_ch, width, 1),
                conv(3, width, width, stride),
                conv(1, width, width * expansion, 1),
            ],
        };
        let out_channels = kind.out_channels(width);
        let mut layers = Vec::with_capacity(plan.len());
        for (k, lk) in plan.into_iter().enumerate() {
            let LayerKind::Conv2d { in_ch: c, .. } = lk else { unreachable!() };
            let bn = if use_bn {
                Some(Layer::new(store, rng, &format!("{name}.bn{}", k + 1), LayerKind::BatchNorm { channels: c })?)
            } else {
                None
            };
            let cv = Layer::new(store, rng, &format!("{name}.conv{}", k + 1), lk)?;
            layers.push((bn, cv));
        }
        let shortcut = if stride != 1 || in_ch != out_channels {
            Some(Layer::new(store, rng, &format!("{name}.shortcut"), conv(1, in_ch, out_channels, stride))?)
        } else {
            None
        };
        Ok(Block {
            layers,
            shortcut,
            out_channels,
        })
    }

    /// Residual branch and shortcut value. The projection shortcut, when
    /// present, reads the pre-activated input.
    fn forward(&self, s: &mut Session<'_>, x: Var, want_shortcut: bool) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        let mut shortcut = None;
        for (k, (bn, conv)) in self.layers.iter().enumerate() {
            let z = match bn {
                Some(bn) => bn.forward(s, h)?,
                None => h,
            };
            let z = s.graph.relu(z)?;
            if k == 0 && want_shortcut {
                shortcut = Some(match &self.shortcut {
                    Some(p) => p.forward(s, z)?,
                    None => x,
                });
            }
            h = conv.forward(s, z)?;
        }
        Ok((h, shortcut))
    }

    fn all_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers
            .iter()
            .flat_map(|(bn, cv)| bn.iter().chain(std::iter::once(cv)))
            .chain(self.shortcut.iter())
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<Block>,
    /// One entry under sharing, one per block otherwise (`None` where a mask
    /// removes the unit).
    pub units: Vec<Option<AttentionUnit>>,
    pub sharing: Sharing,
    pub block_mask: Vec<bool>,
    pub width: usize,
}

impl Stage {
    pub fn unit_for(&self, block: usize) -> Option<&AttentionUnit> {
        match self.sharing {
            Sharing::SharedPerStage => self.units.first().and_then(|u| u.as_ref()),
            Sharing::PerBlock => self.units.get(block).and_then(|u| u.as_ref()),
        }
    }

    /// Distinct attention parameters of the stage.
    pub fn attention_param_ids(&self) -> BTreeSet<ParamId> {
        self.units.iter().flatten().flat_map(|u| u.param_ids()).collect()
    }
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub stage_outputs: Vec<Var>,
    /// Per stage, per block: descriptor and map where attention was applied.
    pub attention: Vec<Vec<Option<AttentionStep>>>,
}

/// A built network. Owns its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub stem: Layer,
    pub stages: Vec<Stage>,
    pub final_bn: Option<Layer>,
    pub head: Layer,
    /// Debug hook: replace every attention map by ones.
    pub force_unit_attention: bool,
}

/// Build `config`, initializing parameters deterministically from `seed`.
/// Backbone and attention weights come from separate streams, so the
/// backbone is identical whatever attention is configured.
pub fn build(config: &NetworkConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut brng = rng::derived(seed, BACKBONE_STREAM);
    let mut arng = rng::derived(seed, ATTENTION_STREAM);
    let use_bn = config.use_batchnorm;

    let stem = Layer::new(
        &mut store,
        &mut brng,
        "stem",
        LayerKind::Conv2d {
            in_ch: config.input_shape[0],
            out_ch: config.stem_channels,
            kernel: 3,
            stride: 1,
            bias: false,
        },
    )?;
    let mut in_ch = config.stem_channels;
    let mut stages = Vec::with_capacity(config.stages.len());
    for (i, sc) in config.stages.iter().enumerate() {
        let mut blocks = Vec::with_capacity(sc.blocks);
        for j in 0..sc.blocks {
            let stride = if j == 0 { sc.stride } else { 1 };
            let name = format!("stage{i}.block{j}");
            let b = Block::new(&mut store, &mut brng, &name, config.block_kind, in_ch, sc.channels, stride, use_bn)?;
            in_ch = b.out_channels;
            blocks.push(b);
        }
        stages.push(Stage {
            blocks,
            units: Vec::new(),
            sharing: config.attention.sharing,
            block_mask: config.block_mask(i),
            width: in_ch,
        });
    }
    let final_bn = if use_bn {
        Some(Layer::new(&mut store, &mut brng, "final_bn", LayerKind::BatchNorm { channels: in_ch })?)
    } else {
        None
    };
    let head = Layer::new(
        &mut store,
        &mut brng,
        "head",
        LayerKind::FullyConnected {
            inputs: in_ch,
            outputs: config.num_classes,
            bias: true,
        },
    )?;

    let kind = config.attention.kind;
    for (i, stage) in stages.iter_mut().enumerate() {
        if !config.stage_enabled(i) {
            continue;
        }
        match stage.sharing {
            Sharing::SharedPerStage => {
                let u = AttentionUnit::new(&mut store, &mut arng, &format!("stage{i}.attn"), &kind, stage.width)?;
                stage.units.push(u);
            }
            Sharing::PerBlock => {
                for j in 0..stage.blocks.len() {
                    let u = if stage.block_mask[j] {
                        AttentionUnit::new(&mut store, &mut arng, &format!("stage{i}.block{j}.attn"), &kind, stage.width)?
                    } else {
                        None
                    };
                    stage.units.push(u);
                }
            }
        }
    }

    Ok(Model {
        config: config.clone(),
        store,
        stem,
        stages,
        final_bn,
        head,
        force_unit_attention: false,
    })
}

impl Model {
    /// A fresh forward session over this model's parameters.
    pub fn session(&self, train: bool, track_grads: bool) -> Session<'_> {
        Session::new(&self.store, train, track_grads)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<ForwardOutput> {
        let shape = s.graph.shape(x).to_vec();
        let want = &self.config.input_shape;
        if shape.len() != 4 || shape[1..] != want[..] {
            let mut expect = vec![shape.first().copied().unwrap_or(0)];
            expect.extend_from_slice(want);
            return Err(Error::shape("forward", &shape, &expect));
        }
        let batch = shape[0];
        let use_skip = self.config.use_skip;
        let mut x = self.stem.forward(s, x)?;
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut attention = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut state: Option<DiaState> = None;
            let mut steps = Vec::with_capacity(stage.blocks.len());
            for (j, block) in stage.blocks.iter().enumerate() {
                let (a, shortcut) = block.forward(s, x, use_skip)?;
                let mut step = None;
                let r = match stage.unit_for(j) {
                    Some(unit) if stage.block_mask[j] => {
                        let y = s.graph.global_avg_pool(a)?;
                        let h = if self.force_unit_attention {
                            s.graph.constant(Tensor::ones(&[batch, stage.width]))
                        } else {
                            unit.process(s, y, &mut state)?
                        };
                        step = Some(AttentionStep { y, h });
                        s.graph.channelwise_mul(a, h)?
                    }
                    Some(unit) => {
                        let advance = self.config.mask_policy == MaskPolicy::Advance;
                        if advance && unit.is_recurrent() && !self.force_unit_attention {
                            let y = s.graph.global_avg_pool(a)?;
                            unit.process(s, y, &mut state)?;
                        }
                        a
                    }
                    None => a,
                };
                x = match shortcut {
                    Some(sc) => s.graph.add(sc, r)?,
                    None => r,
                };
                steps.push(step);
            }
            stage_outputs.push(x);
            attention.push(steps);
        }
        let z = match &self.final_bn {
            Some(bn) => bn.forward(s, x)?,
            None => x,
        };
        let z = s.graph.relu(z)?;
        let pooled = s.graph.global_avg_pool(z)?;
        let logits = self.head.forward(s, pooled)?;
        Ok(ForwardOutput {
            logits,
            stage_outputs,
            attention,
        })
    }

    /// Logits for a batch of images in eval mode, without gradients.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut s = self.session(false, false);
        let x = s.graph.constant(images.clone());
        let out = self.forward(&mut s, x)?;
        Ok(s.graph.value(out.logits).clone())
    }

    /// Every backbone layer (stem, blocks, final norm, head), in build order.
    pub fn backbone_layers(&self) -> Vec<(String, &Layer)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (i, st) in self.stages.iter().enumerate() {
            for b in &st.blocks {
                out.extend(b.all_layers().map(|l| (format!("stage{i}.blocks"), l)));
            }
        }
        out.extend(self.final_bn.iter().map(|l| ("head".to_string(), l)));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn attention_layers(&self) -> Vec<(String, &Layer)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            for u in st.units.iter().flatten() {
                out.extend(u.layers().into_iter().map(|l| (format!("stage{i}.attention"), l)));
            }
        }
        out
    }

    /// Parameter tally by component: `stem`, `stage{i}.blocks`,
    /// `stage{i}.attention`, `head`.
    pub fn budget(&self) -> ParamBudget {
        let mut layers = self.backbone_layers();
        layers.extend(self.attention_layers());
        count_weights(&self.store, layers.iter().map(|(n, l)| (n.as_str(), *l)))
    }

    /// Distinct attention parameter ids across the network.
    pub fn attention_param_ids(&self) -> BTreeSet<ParamId> {
        self.stages.iter().flat_map(|s| s.attention_param_ids()).collect()
    }

    /// Number of attention maps one forward pass produces per sample.
    pub fn attention_sites(&self) -> usize {
        self.stages
            .iter()
            .map(|st| (0..st.blocks.len()).filter(|&j| st.unit_for(j).is_some() && st.block_mask[j]).count())
            .sum()
    }
}
