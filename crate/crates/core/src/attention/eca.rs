use rand_chacha::ChaCha8Rng;

use super::se::check_channels;
use crate::error::Result;
use crate::nn::{Layer, LayerKind, ParamStore, Session};
use crate::tensor::Var;

/// Efficient channel attention: `σ(conv1d(GAP(a), k))`, zero padded.
#[derive(Clone, Debug)]
pub struct EcaModule {
    n: usize,
    pub conv: Layer,
}

impl EcaModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize, kernel: usize) -> Result<Self> {
        let conv = Layer::new(store, rng, &format!("{name}.conv"), LayerKind::ChannelConv1d { kernel })?;
        Ok(EcaModule { n, conv })
    }

    pub fn width(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> Vec<&Layer> {
        vec![&self.conv]
    }

    pub fn process(&self, s: &mut Session<'_>, y: Var) -> Result<Var> {
        let z = self.conv.forward(s, y)?;
        s.graph.sigmoid(z)
    }

    pub fn forward(&self, s: &mut Session<'_>, a: Var) -> Result<Var> {
        check_channels(s, "eca_forward", a, self.n)?;
        let y = s.graph.global_avg_pool(a)?;
        self.process(s, y)
    }
}
