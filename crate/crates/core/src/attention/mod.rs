//! Channel self-attention modules.
//!
//! Every module splits into extraction (global average pooling of the
//! residual-branch output `a_t`), processing (pooled descriptor to an
//! attention map `h_t`) and recalibration (`a_t ⊗ h_t`). SE and ECA process
//! each block independently; the DIA unit runs one LSTM, with state, over
//! every block of a stage.

mod eca;
mod lstm;
mod se;

pub use eca::EcaModule;
pub use lstm::{dia_lstm_step, CellVariant, DiaCell, DiaState, LstmCell, LstmCellConfig, OutputActivation};
pub use se::SeModule;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Layer, ParamId, ParamStore, Session};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamKind {
    None,
    Se { reduction: usize },
    Eca { kernel: usize },
    DiaLstm(LstmCellConfig),
}

impl SamKind {
    pub fn is_none(&self) -> bool {
        matches!(self, SamKind::None)
    }

    /// Closed-form weight-only count of one unit at width `n`.
    pub fn weight_count(&self, n: usize) -> usize {
        match *self {
            SamKind::None => 0,
            SamKind::Se { reduction } => 2 * n * (n / reduction),
            SamKind::Eca { kernel } => kernel,
            SamKind::DiaLstm(cfg) => cfg.weight_count(n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Sharing {
    /// One unit per block.
    PerBlock,
    /// One unit per stage, reused by every block.
    #[default]
    SharedPerStage,
}

impl Sharing {
    pub fn name(self) -> &'static str {
        match self {
            Sharing::PerBlock => "per-block",
            Sharing::SharedPerStage => "shared",
        }
    }
}

/// Attention kind plus placement policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub kind: SamKind,
    pub sharing: Sharing,
}

impl AttentionSpec {
    pub fn none() -> Self {
        AttentionSpec {
            kind: SamKind::None,
            sharing: Sharing::SharedPerStage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, SamKind::DiaLstm(_)) && self.sharing == Sharing::PerBlock {
            return Err(Error::config("DIA-LSTM attention must be shared per stage"));
        }
        Ok(())
    }
}

/// An instantiated attention module.
#[derive(Clone, Debug)]
pub enum AttentionUnit {
    Se(SeModule),
    Eca(EcaModule),
    Dia(DiaCell),
}

impl AttentionUnit {
    /// `None` for [`SamKind::None`].
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kind: &SamKind, n: usize) -> Result<Option<Self>> {
        Ok(match *kind {
            SamKind::None => None,
            SamKind::Se { reduction } => Some(AttentionUnit::Se(SeModule::new(store, rng, name, n, reduction)?)),
            SamKind::Eca { kernel } => Some(AttentionUnit::Eca(EcaModule::new(store, rng, name, n, kernel)?)),
            SamKind::DiaLstm(cfg) => Some(AttentionUnit::Dia(DiaCell::new(store, rng, name, cfg, n)?)),
        })
    }

    pub fn width(&self) -> usize {
        match self {
            AttentionUnit::Se(m) => m.width(),
            AttentionUnit::Eca(m) => m.width(),
            AttentionUnit::Dia(c) => c.width(),
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            AttentionUnit::Se(m) => m.layers(),
            AttentionUnit::Eca(m) => m.layers(),
            AttentionUnit::Dia(c) => c.layers(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers().iter().flat_map(|l| l.params()).collect()
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, AttentionUnit::Dia(_))
    }

    /// Processing phase on `y[B,N]`. A recurrent unit reads and advances
    /// `state`, starting from zeros when it is empty.
    pub fn process(&self, s: &mut Session<'_>, y: Var, state: &mut Option<DiaState>) -> Result<Var> {
        match self {
            AttentionUnit::Se(m) => m.process(s, y),
            AttentionUnit::Eca(m) => m.process(s, y),
            AttentionUnit::Dia(cell) => {
                let current = match state.take() {
                    Some(st) => st,
                    None => {
                        let batch = s.graph.shape(y).first().copied().unwrap_or(0);
                        cell.zero_state(s, batch)
                    }
                };
                let (h, next) = cell.step(s, y, &current)?;
                *state = Some(next);
                Ok(h)
            }
        }
    }
}

/// Pooled descriptor and attention map of one block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStep {
    pub y: Var,
    pub h: Var,
}

/// A residual branch `a_t = f(x_t)`.
pub type Branch<'f> = &'f dyn Fn(&mut Session<'_>, Var) -> Result<Var>;

/// Run a stage under one shared DIA cell: for each block,
/// `a = f(x)`, `h = LSTM(GAP(a))`, `x ← x + a ⊗ h` (or `a ⊗ h` without the
/// skip). State starts at zero.
pub fn dia_apply(
    s: &mut Session<'_>,
    cell: &DiaCell,
    blocks: &[Branch<'_>],
    x0: Var,
    use_skip: bool,
) -> Result<(Var, Vec<AttentionStep>)> {
    let shape = s.graph.shape(x0).to_vec();
    if shape.len() < 3 || shape[1] != cell.width() {
        return Err(Error::shape("dia_apply", &shape, &[shape.first().copied().unwrap_or(0), cell.width()]));
    }
    let mut state = cell.zero_state(s, shape[0]);
    let mut x = x0;
    let mut steps = Vec::with_capacity(blocks.len());
    for f in blocks {
        let a = f(s, x)?;
        let y = s.graph.global_avg_pool(a)?;
        let (h, next) = cell.step(s, y, &state)?;
        state = next;
        let r = s.graph.channelwise_mul(a, h)?;
        x = if use_skip { s.graph.add(x, r)? } else { r };
        steps.push(AttentionStep { y, h });
    }
    Ok((x, steps))
}
