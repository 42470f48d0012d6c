use std::collections::BTreeSet;

use super::{Layer, ParamRole, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCount {
    pub name: String,
    /// Weight-only count (the closed-form figure).
    pub weights: usize,
    /// Biases and normalization affine terms.
    pub extra: usize,
}

impl ComponentCount {
    pub fn total(&self) -> usize {
        self.weights + self.extra
    }
}

/// Parameter tally split by component, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamBudget {
    pub components: Vec<ComponentCount>,
}

impl ParamBudget {
    pub fn weight_total(&self) -> usize {
        self.components.iter().map(|c| c.weights).sum()
    }

    pub fn extra_total(&self) -> usize {
        self.components.iter().map(|c| c.extra).sum()
    }

    pub fn total(&self) -> usize {
        self.weight_total() + self.extra_total()
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCount> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Sum over components whose name starts with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ComponentCount {
        let mut out = ComponentCount {
            name: prefix.to_string(),
            weights: 0,
            extra: 0,
        };
        for c in self.components.iter().filter(|c| c.name.starts_with(prefix)) {
            out.weights += c.weights;
            out.extra += c.extra;
        }
        out
    }
}

/// Count parameters by enumerating the buffers the layers reference. A
/// parameter referenced from several positions is counted once, under the
/// first component that mentions it.
pub fn count_weights<'a, I>(store: &ParamStore, layers: I) -> ParamBudget
where
    I: IntoIterator<Item = (&'a str, &'a Layer)>,
{
    let mut seen = BTreeSet::new();
    let mut budget = ParamBudget::default();
    for (component, layer) in layers {
        let idx = match budget.components.iter().position(|c| c.name == component) {
            Some(i) => i,
            None => {
                budget.components.push(ComponentCount {
                    name: component.to_string(),
                    weights: 0,
                    extra: 0,
                });
                budget.components.len() - 1
            }
        };
        for id in layer.params() {
            if !seen.insert(id) {
                continue;
            }
            let p = store.param(id);
            match p.role {
                ParamRole::Weight => budget.components[idx].weights += p.value.numel(),
                ParamRole::Bias | ParamRole::NormAffine => budget.components[idx].extra += p.value.numel(),
            }
        }
    }
    budget
}
