//! LSTM cells used as the shared attention processor.
//!
//! Three wirings, all mapping `(y_t, h_{t-1}, c_{t-1}) → (h_t, c_t)` at
//! channel width N:
//!
//! * `Standard`: four gate maps on `y` and four on `h`, each N→N (8N² weights).
//! * `Modified`: `y` and `h` first pass through their own N→N/r reduction
//!   plus ReLU; the eight gate maps are N/r→N (10N²/r weights).
//! * `Light`: each stream passes through an N→N grouped map with r groups
//!   plus ReLU, then one element-wise affine map per gate
//!   (2N²/r + 16N weights).
//!
//! The output is `h_t = o ⊙ act(c_t)`, with `act` defaulting to a sigmoid so
//! attention values stay inside (0, 1).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{check_divides, Layer, LayerKind, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    Tanh,
    Relu,
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Sigmoid => "sigmoid",
            OutputActivation::Tanh => "tanh",
            OutputActivation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(OutputActivation::Sigmoid),
            "tanh" => Ok(OutputActivation::Tanh),
            "relu" => Ok(OutputActivation::Relu),
            other => Err(Error::config(format!("unknown output activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellVariant {
    Standard,
    Modified { reduction: usize },
    Light { reduction: usize },
}

impl CellVariant {
    pub fn name(self) -> &'static str {
        match self {
            CellVariant::Standard => "standard",
            CellVariant::Modified { .. } => "modified",
            CellVariant::Light { .. } => "light",
        }
    }

    pub fn reduction(self) -> Option<usize> {
        match self {
            CellVariant::Standard => None,
            CellVariant::Modified { reduction } | CellVariant::Light { reduction } => Some(reduction),
        }
    }
}

/// Cell wiring, independent of the channel width it is instantiated at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCellConfig {
    pub variant: CellVariant,
    pub output_activation: OutputActivation,
    /// Cells stacked so that cell k's `h` is cell k+1's input.
    pub stack_depth: usize,
}

impl LstmCellConfig {
    pub fn new(variant: CellVariant) -> Self {
        LstmCellConfig {
            variant,
            output_activation: OutputActivation::Sigmoid,
            stack_depth: 1,
        }
    }

    pub fn modified(reduction: usize) -> Self {
        Self::new(CellVariant::Modified { reduction })
    }

    pub fn light(reduction: usize) -> Self {
        Self::new(CellVariant::Light { reduction })
    }

    pub fn standard() -> Self {
        Self::new(CellVariant::Standard)
    }

    pub fn with_activation(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn with_stack_depth(mut self, depth: usize) -> Self {
        self.stack_depth = depth;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.stack_depth == 0 {
            return Err(Error::config("stack depth must be at least 1"));
        }
        if n == 0 {
            return Err(Error::config("cell width must be positive"));
        }
        if let Some(r) = self.variant.reduction() {
            check_divides(&format!("reduction ratio for width {n}"), n, r)?;
        }
        Ok(())
    }

    /// Closed-form weight-only count at width `n`, summed over the stack.
    pub fn weight_count(&self, n: usize) -> usize {
        let per_cell = match self.variant {
            CellVariant::Standard => 8 * n * n,
            CellVariant::Modified { reduction } => 10 * n * n / reduction,
            CellVariant::Light { reduction } => 2 * n * n / reduction + 16 * n,
        };
        self.stack_depth * per_cell
    }
}

/// `(h, c)` of every stacked cell, as graph values.
#[derive(Clone, Debug)]
pub struct DiaState {
    pub layers: Vec<(Var, Var)>,
}

impl DiaState {
    /// Final cell's hidden state.
    pub fn h(&self) -> Var {
        self.layers.last().expect("non-empty stack").0
    }

    pub fn c(&self) -> Var {
        self.layers.last().expect("non-empty stack").1
    }
}

const GATES: [&str; 4] = ["input", "forget", "candidate", "output"];
const FORGET: usize = 1;
const CANDIDATE: usize = 2;

#[derive(Clone, Debug)]
struct GateMaps {
    from_input: Layer,
    from_hidden: Layer,
}

/// One cell of the stack.
#[derive(Clone, Debug)]
pub struct LstmCell {
    n: usize,
    reduce_input: Option<Layer>,
    reduce_hidden: Option<Layer>,
    gates: Vec<GateMaps>,
}

impl LstmCell {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &LstmCellConfig, n: usize) -> Result<Self> {
        let fc = |inputs, outputs, bias| LayerKind::FullyConnected { inputs, outputs, bias };
        let (reduce, gate_in, gate_hidden): (Option<LayerKind>, LayerKind, LayerKind) = match cfg.variant {
            CellVariant::Standard => (None, fc(n, n, true), fc(n, n, false)),
            CellVariant::Modified { reduction } => {
                let m = n / reduction;
                (Some(fc(n, m, true)), fc(m, n, true), fc(m, n, false))
            }
            CellVariant::Light { reduction } => (
                Some(LayerKind::GroupedLinear {
                    n,
                    groups: reduction,
                    bias: true,
                }),
                LayerKind::ElementwiseAffine { n },
                LayerKind::ElementwiseAffine { n },
            ),
        };
        let reduce_input = reduce
            .map(|k| Layer::new(store, rng, &format!("{name}.reduce_input"), k))
            .transpose()?;
        let reduce_hidden = reduce
            .map(|k| Layer::new(store, rng, &format!("{name}.reduce_hidden"), k))
            .transpose()?;
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            let from_input = Layer::new(store, rng, &format!("{name}.{gate}.from_input"), gate_in)?;
            let from_hidden = Layer::new(store, rng, &format!("{name}.{gate}.from_hidden"), gate_hidden)?;
            gates.push(GateMaps { from_input, from_hidden });
        }
        // forget-gate bias starts at one
        let forget_bias = gates[FORGET].from_input.bias.expect("gate bias");
        store.param_mut(forget_bias).value = Tensor::ones(&[n]);
        Ok(LstmCell {
            n,
            reduce_input,
            reduce_hidden,
            gates,
        })
    }

    fn layers(&self) -> Vec<&Layer> {
        let mut out: Vec<&Layer> = self.reduce_input.iter().chain(self.reduce_hidden.iter()).collect();
        for g in &self.gates {
            out.push(&g.from_input);
            out.push(&g.from_hidden);
        }
        out
    }

    fn step(&self, s: &mut Session<'_>, act: OutputActivation, y: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let y_in = match &self.reduce_input {
            Some(l) => {
                let r = l.forward(s, y)?;
                s.graph.relu(r)?
            }
            None => y,
        };
        let h_in = match &self.reduce_hidden {
            Some(l) => {
                let r = l.forward(s, h)?;
                s.graph.relu(r)?
            }
            None => h,
        };
        let mut acts = Vec::with_capacity(4);
        for (k, maps) in self.gates.iter().enumerate() {
            let a = maps.from_input.forward(s, y_in)?;
            let b = maps.from_hidden.forward(s, h_in)?;
            let pre = s.graph.add(a, b)?;
            acts.push(if k == CANDIDATE {
                s.graph.tanh(pre)?
            } else {
                s.graph.sigmoid(pre)?
            });
        }
        let (i, f, g, o) = (acts[0], acts[1], acts[2], acts[3]);
        let keep = s.graph.mul(f, c)?;
        let write = s.graph.mul(i, g)?;
        let c_new = s.graph.add(keep, write)?;
        let squashed = match act {
            OutputActivation::Sigmoid => s.graph.sigmoid(c_new)?,
            OutputActivation::Tanh => s.graph.tanh(c_new)?,
            OutputActivation::Relu => s.graph.relu(c_new)?,
        };
        let h_new = s.graph.mul(o, squashed)?;
        Ok((h_new, c_new))
    }
}

/// A stack of LSTM cells sharing one configuration; the attention processor
/// of a DIA unit.
#[derive(Clone, Debug)]
pub struct DiaCell {
    config: LstmCellConfig,
    n: usize,
    cells: Vec<LstmCell>,
}

impl DiaCell {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, config: LstmCellConfig, n: usize) -> Result<Self> {
        config.validate(n)?;
        let cells = (0..config.stack_depth)
            .map(|k| {
                let cell_name = if config.stack_depth == 1 {
                    name.to_string()
                } else {
                    format!("{name}.cell{k}")
                };
                LstmCell::new(store, rng, &cell_name, &config, n)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiaCell { config, n, cells })
    }

    pub fn config(&self) -> &LstmCellConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> Vec<&Layer> {
        self.cells.iter().flat_map(|c| c.layers()).collect()
    }

    /// All-zero `(h, c)` for every stacked cell.
    pub fn zero_state(&self, s: &mut Session<'_>, batch: usize) -> DiaState {
        let layers = self
            .cells
            .iter()
            .map(|c| {
                let h = s.graph.constant(Tensor::zeros(&[batch, c.n]));
                let cc = s.graph.constant(Tensor::zeros(&[batch, c.n]));
                (h, cc)
            })
            .collect();
        DiaState { layers }
    }

    /// One recurrence step on `y[B,N]`. Returns the attention map `h_t` (the
    /// last cell's hidden state) and the advanced state.
    pub fn step(&self, s: &mut Session<'_>, y: Var, state: &DiaState) -> Result<(Var, DiaState)> {
        let shape = s.graph.shape(y).to_vec();
        if shape.len() != 2 || shape[1] != self.n {
            return Err(Error::shape("dia_lstm_step", &shape, &[shape.first().copied().unwrap_or(0), self.n]));
        }
        if state.layers.len() != self.cells.len() {
            return Err(Error::shape("dia_lstm_step", &[state.layers.len()], &[self.cells.len()]));
        }
        let mut input = y;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, &(h, c)) in self.cells.iter().zip(&state.layers) {
            if s.graph.shape(h) != shape.as_slice() || s.graph.shape(c) != shape.as_slice() {
                return Err(Error::shape("dia_lstm_step", s.graph.shape(h), &shape));
            }
            let (h_new, c_new) = cell.step(s, self.config.output_activation, input, h, c)?;
            next.push((h_new, c_new));
            input = h_new;
        }
        Ok((input, DiaState { layers: next }))
    }
}

/// Free-function form of [`DiaCell::step`].
pub fn dia_lstm_step(s: &mut Session<'_>, cell: &DiaCell, y: Var, state: &DiaState) -> Result<(Var, DiaState)> {
    cell.step(s, y, state)
}
