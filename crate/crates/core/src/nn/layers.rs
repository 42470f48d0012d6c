use rand_chacha::ChaCha8Rng;

use super::{check_divides, uniform, BnUpdate, BufferId, ParamId, ParamRole, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, ConvSpec, Tensor, Var};

/// Layer variants and their hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected { inputs: usize, outputs: usize, bias: bool },
    GroupedLinear { n: usize, groups: usize, bias: bool },
    ElementwiseAffine { n: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool },
    /// Odd-width 1-D convolution across the channel axis, no bias.
    ChannelConv1d { kernel: usize },
    BatchNorm { channels: usize },
}

impl LayerKind {
    /// Weight-only count: biases and normalization affine terms excluded;
    /// both halves of an element-wise affine map are included.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerKind::FullyConnected { inputs, outputs, .. } => inputs * outputs,
            LayerKind::GroupedLinear { n, groups, .. } => n * n / groups,
            LayerKind::ElementwiseAffine { n } => 2 * n,
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => in_ch * out_ch * kernel * kernel,
            LayerKind::ChannelConv1d { kernel } => kernel,
            LayerKind::BatchNorm { .. } => 0,
        }
    }

    /// Biases plus normalization affine terms.
    pub fn extra_count(&self) -> usize {
        match *self {
            LayerKind::FullyConnected { outputs, bias, .. } => bias as usize * outputs,
            LayerKind::GroupedLinear { n, bias, .. } => bias as usize * n,
            LayerKind::Conv2d { out_ch, bias, .. } => bias as usize * out_ch,
            LayerKind::BatchNorm { channels } => 2 * channels,
            LayerKind::ElementwiseAffine { .. } | LayerKind::ChannelConv1d { .. } => 0,
        }
    }

    /// Every learnable scalar.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.extra_count()
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::GroupedLinear { n, groups, .. } => check_divides("grouped linear groups", n, groups),
            LayerKind::ChannelConv1d { kernel } if kernel % 2 == 0 => {
                Err(Error::config(format!("channel conv kernel must be odd, got {kernel}")))
            }
            LayerKind::Conv2d { kernel, stride, .. } if kernel == 0 || stride == 0 => {
                Err(Error::config("conv kernel and stride must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// A parameterized layer. Holds parameter handles only; values live in the
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Option<ParamId>,
    pub bias: Option<ParamId>,
    running: Option<(BufferId, BufferId)>,
}

impl Layer {
    /// Allocate and initialize: convolutions use `U(±√(6/fan_in))`, linear
    /// maps `U(±1/√fan_in)`, biases zero, affine and batch-norm scale one
    /// with zero shift.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kind: LayerKind) -> Result<Self> {
        kind.validate()?;
        let mut running = None;
        let (weight, bias) = match kind {
            LayerKind::FullyConnected { inputs, outputs, bias } => {
                let w = uniform(rng, &[outputs, inputs], 1.0 / (inputs as f64).sqrt());
                let w = store.add(format!("{name}.weight"), w, ParamRole::Weight);
                let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), ParamRole::Bias));
                (Some(w), b)
            }
            LayerKind::GroupedLinear { n, groups, bias } => {
                let bs = n / groups;
                let w = uniform(rng, &[groups, bs, bs], 1.0 / (bs as f64).sqrt());
                let w = store.add(format!("{name}.weight"), w, ParamRole::Weight);
                let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[n]), ParamRole::Bias));
                (Some(w), b)
            }
            LayerKind::ElementwiseAffine { n } => {
                let w = store.add(format!("{name}.scale"), Tensor::ones(&[n]), ParamRole::Weight);
                let b = store.add(format!("{name}.shift"), Tensor::zeros(&[n]), ParamRole::Weight);
                (Some(w), Some(b))
            }
            LayerKind::Conv2d { in_ch, out_ch, kernel, bias, .. } => {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let w = uniform(rng, &[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt());
                let w = store.add(format!("{name}.weight"), w, ParamRole::Weight);
                let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamRole::Bias));
                (Some(w), b)
            }
            LayerKind::ChannelConv1d { kernel } => {
                let w = uniform(rng, &[kernel], 1.0 / (kernel as f64).sqrt());
                (Some(store.add(format!("{name}.weight"), w, ParamRole::Weight)), None)
            }
            LayerKind::BatchNorm { channels } => {
                let g = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamRole::NormAffine);
                let b = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamRole::NormAffine);
                running = Some((
                    store.add_buffer(format!("{name}.running_mean"), vec![0.0; channels]),
                    store.add_buffer(format!("{name}.running_var"), vec![1.0; channels]),
                ));
                (Some(g), Some(b))
            }
        };
        Ok(Layer {
            name: name.to_string(),
            kind,
            weight,
            bias,
            running,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.weight.into_iter().chain(self.bias).collect()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = self.weight.map(|id| s.param(id));
        let b = self.bias.map(|id| s.param(id));
        match self.kind {
            LayerKind::FullyConnected { .. } => s.graph.linear(x, w.expect("weight"), b),
            LayerKind::GroupedLinear { groups, .. } => s.graph.grouped_linear(x, w.expect("weight"), b, groups),
            LayerKind::ElementwiseAffine { .. } => {
                s.graph.elementwise_affine(x, w.expect("scale"), b.expect("shift"))
            }
            LayerKind::Conv2d { stride, .. } => {
                let y = s.graph.conv2d(x, w.expect("weight"), ConvSpec { stride })?;
                match b {
                    Some(b) => s.graph.add_channel_bias(y, b),
                    None => Ok(y),
                }
            }
            LayerKind::ChannelConv1d { .. } => s.graph.conv1d_channels(x, w.expect("weight")),
            LayerKind::BatchNorm { .. } => {
                let (mean_id, var_id) = self.running.expect("running stats");
                let (gamma, beta) = (w.expect("gamma"), b.expect("beta"));
                if s.is_train() {
                    let (y, stats) = s.graph.batch_norm(x, gamma, beta, BatchNormMode::Train)?;
                    s.push_bn_update(BnUpdate {
                        mean: mean_id,
                        var: var_id,
                        stats: stats.expect("train stats"),
                    });
                    Ok(y)
                } else {
                    let store = s.store();
                    let mode = BatchNormMode::Eval {
                        mean: store.buffer(mean_id),
                        var: store.buffer(var_id),
                    };
                    Ok(s.graph.batch_norm(x, gamma, beta, mode)?.0)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Graph;

    fn build(kind: LayerKind) -> (ParamStore, Layer) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(7);
        let layer = Layer::new(&mut store, &mut r, "l", kind).unwrap();
        (store, layer)
    }

    fn run(store: &ParamStore, layer: &Layer, x: Tensor) -> Tensor {
        let mut s = Session::new(store, false, false);
        let xv = s.graph.constant(x);
        let y = layer.forward(&mut s, xv).unwrap();
        s.graph.value(y).clone()
    }

    #[test]
    fn affine_identity_and_constant() {
        let (mut store, layer) = build(LayerKind::ElementwiseAffine { n: 2 });
        let x = Tensor::new(&[1, 2], vec![0.7, -3.0]).unwrap();
        assert_eq!(run(&store, &layer, x.clone()).data(), x.data());

        store.param_mut(layer.weight.unwrap()).value = Tensor::zeros(&[2]);
        store.param_mut(layer.bias.unwrap()).value = Tensor::vector(&[4.0, 4.0]);
        assert_eq!(run(&store, &layer, x).data(), &[4.0, 4.0]);

        store.param_mut(layer.weight.unwrap()).value = Tensor::vector(&[2.0, 3.0]);
        store.param_mut(layer.bias.unwrap()).value = Tensor::vector(&[1.0, -1.0]);
        let ones = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(run(&store, &layer, ones).data(), &[3.0, 2.0]);
    }

    #[test]
    fn affine_length_mismatch() {
        let (store, layer) = build(LayerKind::ElementwiseAffine { n: 3 });
        let mut s = Session::new(&store, false, false);
        let x = s.graph.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(layer.forward(&mut s, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn grouped_one_group_equals_dense() {
        let (store, grouped) = build(LayerKind::GroupedLinear { n: 4, groups: 1, bias: false });
        let x = Tensor::new(&[2, 4], vec![0.1, -0.2, 0.3, 0.4, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let y = run(&store, &grouped, x.clone());
        let mut g = Graph::new();
        let xv = g.constant(x);
        let w = store.param(grouped.weight.unwrap()).value.clone().reshape(&[4, 4]).unwrap();
        let wv = g.constant(w);
        let dense = g.linear(xv, wv, None).unwrap();
        assert_eq!(y.data(), g.value(dense).data());
    }

    #[test]
    fn grouped_identity_blocks() {
        let (mut store, layer) = build(LayerKind::GroupedLinear { n: 3, groups: 3, bias: false });
        store.param_mut(layer.weight.unwrap()).value = Tensor::ones(&[3, 1, 1]);
        let x = Tensor::new(&[1, 3], vec![5.0, -6.0, 7.0]).unwrap();
        assert_eq!(run(&store, &layer, x.clone()).data(), x.data());
    }

    #[test]
    fn grouped_matches_assembled_block_diagonal() {
        let (store, layer) = build(LayerKind::GroupedLinear { n: 4, groups: 2, bias: true });
        let x = Tensor::new(&[1, 4], vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let y = run(&store, &layer, x.clone());
        // explicit 4×4 block-diagonal matrix
        let blocks = store.param(layer.weight.unwrap()).value.data().to_vec();
        let mut dense = [[0.0; 4]; 4];
        for g in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    dense[g * 2 + j][g * 2 + i] = blocks[(g * 2 + j) * 2 + i];
                }
            }
        }
        for (r, row) in dense.iter().enumerate() {
            let expect: f64 = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((y.data()[r] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn grouped_divisibility_is_config_error() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        let err = Layer::new(&mut store, &mut r, "g", LayerKind::GroupedLinear { n: 6, groups: 4, bias: false });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn counts_match_buffer_lengths() {
        let kinds = [
            LayerKind::FullyConnected { inputs: 5, outputs: 3, bias: true },
            LayerKind::FullyConnected { inputs: 5, outputs: 3, bias: false },
            LayerKind::GroupedLinear { n: 8, groups: 4, bias: true },
            LayerKind::ElementwiseAffine { n: 6 },
            LayerKind::Conv2d { in_ch: 3, out_ch: 4, kernel: 3, stride: 1, bias: false },
            LayerKind::Conv2d { in_ch: 3, out_ch: 4, kernel: 1, stride: 2, bias: true },
            LayerKind::ChannelConv1d { kernel: 5 },
            LayerKind::BatchNorm { channels: 7 },
        ];
        for kind in kinds {
            let (store, layer) = build(kind);
            let total: usize = layer.params().iter().map(|&p| store.param(p).value.numel()).sum();
            assert_eq!(total, kind.param_count(), "{kind:?}");
            let weights: usize = layer
                .params()
                .iter()
                .filter(|&&p| store.param(p).role == ParamRole::Weight)
                .map(|&p| store.param(p).value.numel())
                .sum();
            assert_eq!(weights, kind.weight_count(), "{kind:?}");
        }
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let (mut store, layer) = build(LayerKind::BatchNorm { channels: 1 });
        let (m, v) = layer.running.unwrap();
        store.buffer_mut(m)[0] = 2.0;
        store.buffer_mut(v)[0] = 9.0 - crate::tensor::BN_EPS;
        let x = Tensor::new(&[3, 1, 1, 1], vec![2.0, 5.0, -1.0]).unwrap();
        let a = run(&store, &layer, x.clone());
        let b = run(&store, &layer, x);
        assert_eq!(a, b);
        for (y, e) in a.data().iter().zip([0.0, 1.0, -1.0]) {
            assert!((y - e).abs() < 1e-12);
        }
    }
}
