use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

/// Features tried at each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSubsample {
    /// `max(1, floor(sqrt(d)))`.
    Sqrt,
    All,
    Count(usize),
}

impl FeatureSubsample {
    pub fn name(self) -> String {
        match self {
            FeatureSubsample::Sqrt => "sqrt".into(),
            FeatureSubsample::All => "all".into(),
            FeatureSubsample::Count(k) => k.to_string(),
        }
    }

    /// `sqrt`, `all` or a positive count.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sqrt" => Some(FeatureSubsample::Sqrt),
            "all" => Some(FeatureSubsample::All),
            _ => s.parse().ok().filter(|&k| k > 0).map(FeatureSubsample::Count),
        }
    }

    fn resolve(self, d: usize) -> usize {
        match self {
            FeatureSubsample::Sqrt => ((d as f64).sqrt().floor() as usize).max(1),
            FeatureSubsample::All => d,
            FeatureSubsample::Count(k) => k.clamp(1, d.max(1)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub feature_subsample: FeatureSubsample,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 8,
            min_samples_leaf: 2,
            feature_subsample: FeatureSubsample::All,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 {
            return Err(Error::config("forest needs at least one tree and min_samples_leaf >= 1"));
        }
        if self.feature_subsample == FeatureSubsample::Count(0) {
            return Err(Error::config("feature subsample must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Axis-aligned regression tree, nodes in preorder.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Row-major sample matrix.
#[derive(Clone, Copy, Debug)]
pub struct Matrix<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> Matrix<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", &[data.len()], &[rows, cols]));
        }
        Ok(Matrix { data, rows, cols })
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

struct Builder<'a> {
    x: Matrix<'a>,
    y: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn sse(y: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    (mean, idx.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum())
}

impl Builder<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (mean, parent) = sse(self.y, &idx);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_samples_leaf || parent <= 0.0 {
            return me;
        }
        let Some(best) = self.best_split(&idx, parent) else {
            return me;
        };
        self.importance[best.feature] += best.gain;
        let left = self.grow(best.left, depth + 1);
        let right = self.grow(best.right, depth + 1);
        self.nodes[me] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        me
    }

    fn best_split(&mut self, idx: &[usize], parent: f64) -> Option<BestSplit> {
        let features = sample(&mut self.rng, self.x.cols, self.mtry);
        let min_leaf = self.cfg.min_samples_leaf;
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<(usize, usize, f64)> = None;
        let mut order = idx.to_vec();
        let x = self.x;
        let sort = |order: &mut Vec<usize>, f: usize| {
            order.sort_by(|&a, &b| x.at(a, f).total_cmp(&x.at(b, f)).then(a.cmp(&b)));
        };
        for f in features.iter() {
            sort(&mut order, f);
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.y[order[k]];
                let nl = k + 1;
                if nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                if self.x.at(order[k], f) == self.x.at(order[k + 1], f) {
                    continue;
                }
                let right_sum = total - left_sum;
                // Maximising this proxy maximises the SSE reduction.
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64;
                if best.as_ref().map_or(true, |b| score > b.2) {
                    best = Some((f, k, score));
                }
            }
        }
        let (feature, k, _) = best?;
        sort(&mut order, feature);
        let threshold = 0.5 * (self.x.at(order[k], feature) + self.x.at(order[k + 1], feature));
        let (left, right) = (order[..=k].to_vec(), order[k + 1..].to_vec());
        let gain = parent - sse(self.y, &left).1 - sse(self.y, &right).1;
        Some(BestSplit {
            feature,
            threshold,
            gain: gain.max(0.0),
            left,
            right,
        })
    }
}

/// Bagged regression trees with variance-reduction splits.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
    /// Total SSE reduction per feature, summed over trees.
    pub raw_importance: Vec<f64>,
}

const FOREST_STREAM: u64 = 0xF0;

impl RandomForest {
    pub fn fit(x: Matrix<'_>, y: &[f64], cfg: &ForestConfig) -> Result<Self> {
        cfg.validate()?;
        if y.len() != x.rows {
            return Err(Error::shape("forest_fit", &[x.rows], &[y.len()]));
        }
        if x.rows == 0 || x.cols == 0 {
            return Err(Error::Data("forest needs at least one sample and one feature".into()));
        }
        if x.data.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Data("forest inputs must be finite".into()));
        }
        let mtry = cfg.feature_subsample.resolve(x.cols);
        let grown: Vec<(Tree, Vec<f64>)> = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::derived(cfg.seed, FOREST_STREAM);
                rng.set_stream(t as u64);
                let boot: Vec<usize> = (0..x.rows).map(|_| rng.gen_range(0..x.rows)).collect();
                let mut b = Builder {
                    x,
                    y,
                    cfg,
                    mtry,
                    rng,
                    nodes: Vec::new(),
                    importance: vec![0.0; x.cols],
                };
                b.grow(boot, 0);
                (Tree { nodes: b.nodes }, b.importance)
            })
            .collect();
        let mut raw_importance = vec![0.0; x.cols];
        let mut trees = Vec::with_capacity(grown.len());
        for (tree, imp) in grown {
            for (a, b) in raw_importance.iter_mut().zip(&imp) {
                *a += b;
            }
            trees.push(tree);
        }
        Ok(RandomForest {
            config: *cfg,
            trees,
            raw_importance,
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Importance normalised to sum 1; `None` when no split was made.
    pub fn importance(&self) -> Option<Vec<f64>> {
        let total: f64 = self.raw_importance.iter().sum();
        (total > 0.0).then(|| self.raw_importance.iter().map(|v| v / total).collect())
    }
}
