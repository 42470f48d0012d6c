use rand::seq::index::sample;

use super::Model;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{relative_error, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Parameter coordinates to probe.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Times the step is divided by 10 when a difference straddles a ReLU
    /// kink.
    pub refinements: usize,
    /// Test hook: scale the backward seed, corrupting every gradient.
    pub fault: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            samples: 64,
            step: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            refinements: 2,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step of the reported difference.
    pub step: f64,
    /// Every step tried crossed a kink; the coordinate is not compared.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    /// Worst relative error over coordinates away from kinks.
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| !c.kink)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.coordinates.iter().filter(|c| c.kink).count()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

struct Eval {
    loss: f64,
    grads: Vec<Vec<f64>>,
    signature: u64,
}

fn loss(model: &Model, images: &Tensor, labels: &[usize], track: bool, fault: Option<f64>) -> Result<Eval> {
    let mut s = model.session(true, track);
    let x = s.graph.constant(images.clone());
    let out = model.forward(&mut s, x)?;
    let l = s.graph.softmax_cross_entropy(out.logits, labels)?;
    let mut eval = Eval {
        loss: s.graph.value(l).item(),
        grads: Vec::new(),
        signature: s.graph.relu_signature(),
    };
    if track {
        if let Some(f) = fault {
            s.graph.inject_backward_fault(f);
        }
        s.graph.backward(l)?;
        eval.grads = s.param_grads();
    }
    Ok(eval)
}

/// Backward gradients against central differences of the training-mode
/// loss on `cfg.samples` random parameter coordinates. A difference whose
/// two evaluations take a different ReLU branch than the base point is
/// retried with a smaller step.
pub fn check_gradients(model: &mut Model, images: &Tensor, labels: &[usize], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) || !(cfg.tolerance >= 0.0) {
        return Err(Error::config("gradcheck step must be positive and tolerance non-negative"));
    }
    let total = model.store.numel();
    if cfg.samples > total {
        return Err(Error::config(format!(
            "gradcheck asks for {} coordinates, the model has {total}",
            cfg.samples
        )));
    }
    let mut coordinates = Vec::with_capacity(cfg.samples);
    if cfg.samples == 0 {
        return Ok(GradcheckReport {
            coordinates,
            tolerance: cfg.tolerance,
        });
    }
    let base = loss(model, images, labels, true, cfg.fault)?;
    let mut picks = sample(&mut rng::derived(cfg.seed, 0x6C), total, cfg.samples).into_vec();
    picks.sort_unstable();
    let sizes: Vec<usize> = model.store.params().iter().map(|p| p.value.numel()).collect();
    let ids: Vec<_> = model.store.ids().collect();
    for flat in picks {
        let (mut p, mut idx) = (0, flat);
        while idx >= sizes[p] {
            idx -= sizes[p];
            p += 1;
        }
        let orig = model.store.param(ids[p]).value.data()[idx];
        let mut step = cfg.step;
        let (numeric, kink) = loop {
            let mut at = |v: f64| -> Result<Eval> {
                model.store.param_mut(ids[p]).value.data_mut()[idx] = v;
                loss(model, images, labels, false, None)
            };
            let plus = at(orig + step);
            let minus = at(orig - step);
            model.store.param_mut(ids[p]).value.data_mut()[idx] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus.loss - minus.loss) / (2.0 * step);
            let smooth = plus.signature == base.signature && minus.signature == base.signature;
            if smooth || step <= cfg.step * 0.1f64.powi(cfg.refinements as i32) * 1.5 {
                break (numeric, !smooth);
            }
            step *= 0.1;
        };
        let analytic = base.grads[p][idx];
        coordinates.push(CoordinateCheck {
            param: model.store.param(ids[p]).name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            step,
            kink,
        });
    }
    Ok(GradcheckReport {
        coordinates,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionSpec, LstmCellConfig, SamKind, Sharing};
    use crate::backbone::{build, NetworkConfig};
    use crate::train::{synth_generate, SynthSpec};

    fn setup() -> (Model, Tensor, Vec<usize>) {
        let mut cfg = NetworkConfig::named("tiny-dia")
            .unwrap()
            .with_blocks_per_stage(2)
            .with_attention(AttentionSpec {
                kind: SamKind::DiaLstm(LstmCellConfig::modified(2)),
                sharing: Sharing::SharedPerStage,
            });
        cfg.stages.truncate(2);
        cfg.input_shape = [3, 8, 8];
        let data = synth_generate(&SynthSpec {
            classes: 4,
            count: 2,
            height: 8,
            width: 8,
            seed: 0,
        })
        .unwrap();
        let (x, y) = data.batch(&[0, 1], None);
        (build(&cfg, 0).unwrap(), x, y)
    }

    #[test]
    fn passes_and_restores_parameters() {
        let (mut m, x, y) = setup();
        let before: Vec<_> = m.store.params().iter().map(|p| p.value.clone()).collect();
        let cfg = GradcheckConfig {
            samples: 16,
            ..Default::default()
        };
        let r = check_gradients(&mut m, &x, &y, &cfg).unwrap();
        assert_eq!(r.coordinates.len(), 16);
        assert!(r.passed(), "{}", r.max_rel_error());
        for (p, b) in m.store.params().iter().zip(&before) {
            assert_eq!(&p.value, b);
        }
    }

    #[test]
    fn zero_samples_is_vacuous() {
        let (mut m, x, y) = setup();
        let cfg = GradcheckConfig {
            samples: 0,
            ..Default::default()
        };
        let r = check_gradients(&mut m, &x, &y, &cfg).unwrap();
        assert!(r.coordinates.is_empty() && r.passed());
    }

    #[test]
    fn corrupted_backward_fails() {
        let (mut m, x, y) = setup();
        let cfg = GradcheckConfig {
            samples: 8,
            fault: Some(1.5),
            ..Default::default()
        };
        let r = check_gradients(&mut m, &x, &y, &cfg).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error() - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn relu_signature_tracks_branches() {
        use crate::tensor::Graph;
        let sig = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(v));
            g.relu(x).unwrap();
            g.relu_signature()
        };
        assert_eq!(sig(&[1.0, -2.0]), sig(&[3.0, -0.5]));
        assert_ne!(sig(&[1.0, -2.0]), sig(&[1.0, 2.0]));
    }
}
