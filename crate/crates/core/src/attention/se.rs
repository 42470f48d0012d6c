use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{check_divides, Layer, LayerKind, ParamStore, Session};
use crate::tensor::Var;

/// Squeeze-and-excitation: `σ(FC₂(relu(FC₁(GAP(a)))))`.
#[derive(Clone, Debug)]
pub struct SeModule {
    n: usize,
    pub fc1: Layer,
    pub fc2: Layer,
}

impl SeModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize, reduction: usize) -> Result<Self> {
        check_divides(&format!("SE reduction for width {n}"), n, reduction)?;
        let m = n / reduction;
        let fc1 = Layer::new(
            store,
            rng,
            &format!("{name}.fc1"),
            LayerKind::FullyConnected {
                inputs: n,
                outputs: m,
                bias: true,
            },
        )?;
        let fc2 = Layer::new(
            store,
            rng,
            &format!("{name}.fc2"),
            LayerKind::FullyConnected {
                inputs: m,
                outputs: n,
                bias: true,
            },
        )?;
        Ok(SeModule { n, fc1, fc2 })
    }

    pub fn width(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.fc1, &self.fc2]
    }

    /// Processing phase on a pooled descriptor `y[B,N]`.
    pub fn process(&self, s: &mut Session<'_>, y: Var) -> Result<Var> {
        let z = self.fc1.forward(s, y)?;
        let z = s.graph.relu(z)?;
        let z = self.fc2.forward(s, z)?;
        s.graph.sigmoid(z)
    }

    /// Attention map `[B,N]` for a feature map `[B,N,H,W]`.
    pub fn forward(&self, s: &mut Session<'_>, a: Var) -> Result<Var> {
        check_channels(s, "se_forward", a, self.n)?;
        let y = s.graph.global_avg_pool(a)?;
        self.process(s, y)
    }
}

pub(crate) fn check_channels(s: &Session<'_>, op: &'static str, a: Var, n: usize) -> Result<()> {
    let shape = s.graph.shape(a);
    if shape.len() < 3 || shape[1] != n {
        let mut want = shape.to_vec();
        if want.len() > 1 {
            want[1] = n;
        }
        return Err(Error::shape(op, shape, &want));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn feature_map(b: usize, n: usize, hw: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        crate::nn::uniform(&mut r, &[b, n, hw, hw], 2.0)
    }

    #[test]
    fn zero_weights_give_half() {
        let mut store = ParamStore::new();
        let se = SeModule::new(&mut store, &mut rng::seeded(0), "se", 8, 2).unwrap();
        for id in se.fc1.params().into_iter().chain(se.fc2.params()) {
            let shape = store.param(id).value.shape().to_vec();
            store.param_mut(id).value = Tensor::zeros(&shape);
        }
        let mut s = Session::new(&store, false, false);
        let a = s.graph.constant(feature_map(2, 8, 3, 1));
        let h = se.forward(&mut s, a).unwrap();
        assert_eq!(s.graph.value(h).data(), &[0.5; 16]);
    }

    #[test]
    fn constant_input_ignores_spatial_extent() {
        let mut store = ParamStore::new();
        let se = SeModule::new(&mut store, &mut rng::seeded(0), "se", 4, 2).unwrap();
        let per_channel = [0.3, -1.2, 2.0, 0.0];
        let mut outs = Vec::new();
        for hw in [1, 2, 5] {
            let data: Vec<f64> = per_channel.iter().flat_map(|&c| vec![c; hw * hw]).collect();
            let mut s = Session::new(&store, false, false);
            let a = s.graph.constant(Tensor::new(&[1, 4, hw, hw], data).unwrap());
            let h = se.forward(&mut s, a).unwrap();
            outs.push(s.graph.value(h).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn matches_dense_matrix_oracle() {
        let n = 8;
        let mut store = ParamStore::new();
        let se = SeModule::new(&mut store, &mut rng::seeded(5), "se", n, 4).unwrap();
        for id in [se.fc1.bias.unwrap(), se.fc2.bias.unwrap()] {
            let len = store.param(id).value.numel();
            store.param_mut(id).value = crate::nn::uniform(&mut rng::seeded(id.index() as u64), &[len], 0.5);
        }
        let x = feature_map(1, n, 2, 9);
        let mut s = Session::new(&store, false, false);
        let a = s.graph.constant(x.clone());
        let h = se.forward(&mut s, a).unwrap();
        let got = s.graph.value(h).data().to_vec();

        let gap: Vec<f64> = x.data().chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
        let dense = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(o, bo)| bo + (0..v.len()).map(|i| w[o * v.len() + i] * v[i]).sum::<f64>())
                .collect()
        };
        let p = |id| store.param(id).value.data().to_vec();
        let z: Vec<f64> = dense(&p(se.fc1.weight.unwrap()), &p(se.fc1.bias.unwrap()), &gap)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let want: Vec<f64> = dense(&p(se.fc2.weight.unwrap()), &p(se.fc2.bias.unwrap()), &z)
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut store = ParamStore::new();
        let se = SeModule::new(&mut store, &mut rng::seeded(0), "se", 8, 2).unwrap();
        let mut s = Session::new(&store, false, false);
        let a = s.graph.constant(feature_map(1, 4, 2, 0));
        assert!(matches!(se.forward(&mut s, a), Err(Error::Shape { .. })));
    }
}
