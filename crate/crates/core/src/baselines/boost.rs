use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub max_trees: usize,
    pub depth: usize,
    pub shrinkage: f64,
    pub folds: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self { max_trees: 200, depth: 2, shrinkage: 0.1, folds: 5, lambda: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(f64),
}

/// Regression tree; node 0 is the root. Samples with `x[feature] <= threshold`
/// go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

/// Gradient-boosted trees under logistic loss. Scores are log-odds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub base_score: f64,
    pub shrinkage: f64,
    pub trees: Vec<RegressionTree>,
    pub feature_names: Vec<String>,
}

impl BoostedEnsemble {
    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_names.len() {
            return Err(Error::InvalidArgument(format!(
                "ensemble expects {} features, got {}",
                self.feature_names.len(),
                x.len()
            )));
        }
        Ok(self.base_score + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(x)?))
    }
}

/// Log-odds score of `x` under `model`.
pub fn ensemble_score(model: &BoostedEnsemble, x: &[f64]) -> Result<f64> {
    model.score(x)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn log_loss(margin: f64, y: f64) -> f64 {
    // ln(1 + e^m) - y m, computed stably.
    let softplus = if margin > 0.0 { margin + (-margin).exp().ln_1p() } else { margin.exp().ln_1p() };
    softplus - y * margin
}

struct Fitter<'a> {
    x: &'a [Vec<f64>],
    lambda: f64,
    features: usize,
}

impl Fitter<'_> {
    fn leaf(&self, idx: &[usize], g: &[f64], h: &[f64]) -> f64 {
        let (gs, hs) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
        -gs / (hs + self.lambda)
    }

    fn grow(&self, nodes: &mut Vec<TreeNode>, idx: Vec<usize>, g: &[f64], h: &[f64], depth: usize) -> usize {
        let me = nodes.len();
        nodes.push(TreeNode::Leaf(self.leaf(&idx, g, h)));
        if depth == 0 || idx.len() < 2 {
            return me;
        }
        let (gt, ht) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
        let parent = gt * gt / (ht + self.lambda);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.clone();
        for f in 0..self.features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..order.len() - 1 {
                let (i, j) = (order[w], order[w + 1]);
                gl += g[i];
                hl += h[i];
                let (xi, xj) = (self.x[i][f], self.x[j][f]);
                if xi == xj {
                    continue;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                let gain = gl * gl / (hl + self.lambda) + gr * gr / (hr + self.lambda) - parent;
                if gain > best.map_or(1e-12, |b| b.0) {
                    best = Some((gain, f, xi + (xj - xi) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return me };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.x[i][feature] <= threshold);
        let left = self.grow(nodes, l, g, h, depth - 1);
        let right = self.grow(nodes, r, g, h, depth - 1);
        nodes[me] = TreeNode::Split { feature, threshold, left, right };
        me
    }
}

fn prior(y: &[f64]) -> f64 {
    let pos = y.iter().sum::<f64>();
    let neg = y.len() as f64 - pos;
    ((pos + 0.5) / (neg + 0.5)).ln()
}

/// Boosts `rounds` trees, calling `each` after every round with the model
/// so far.
fn boost(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    rounds: usize,
    cfg: &BoostConfig,
    features: usize,
    mut each: impl FnMut(&[RegressionTree], f64),
) -> (f64, Vec<RegressionTree>) {
    let sub_y: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let base = prior(&sub_y);
    let fitter = Fitter { x, lambda: cfg.lambda, features };
    let mut margin = vec![base; x.len()];
    let mut g = vec![0.0; x.len()];
    let mut h = vec![0.0; x.len()];
    let mut trees = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        for &i in rows {
            let p = sigmoid(margin[i]);
            g[i] = p - y[i];
            h[i] = (p * (1.0 - p)).max(1e-12);
        }
        let mut nodes = Vec::new();
        fitter.grow(&mut nodes, rows.to_vec(), &g, &h, cfg.depth);
        let tree = RegressionTree { nodes };
        for &i in rows {
            margin[i] += cfg.shrinkage * tree.predict(&x[i]);
        }
        trees.push(tree);
        each(&trees, base);
    }
    (base, trees)
}

/// Fits a boosted ensemble on `features` (one row per example) against
/// binary `targets`, choosing the tree count by k-fold cross-validated log
/// loss.
pub fn train_boosted_ensemble(
    features: &[Vec<f64>],
    targets: &[bool],
    names: &[&str],
    config: &BoostConfig,
) -> Result<BoostedEnsemble> {
    let width = names.len();
    if width == 0 {
        return Err(Error::InvalidArgument("boosted ensemble needs at least one feature".into()));
    }
    if features.len() != targets.len() || features.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("feature rows and targets disagree in size".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features must be finite".into()));
    }
    if config.folds < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least two folds".into()));
    }
    let feature_names = names.iter().map(|s| s.to_string()).collect();
    let y: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 || positives == targets.len() {
        log::warn!("boosted ensemble trained on a single class; returning a constant model");
        return Ok(BoostedEnsemble { base_score: prior(&y), shrinkage: config.shrinkage, trees: Vec::new(), feature_names });
    }
    let trees = select_tree_count(features, &y, config, width);
    let all: Vec<usize> = (0..features.len()).collect();
    let (base, trees) = boost(features, &y, &all, trees, config, width, |_, _| {});
    Ok(BoostedEnsemble { base_score: base, shrinkage: config.shrinkage, trees, feature_names })
}

fn select_tree_count(x: &[Vec<f64>], y: &[f64], cfg: &BoostConfig, width: usize) -> usize {
    let folds = cfg.folds.min(x.len());
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    // held_out[r] = summed validation loss with r trees.
    let mut held_out = vec![0.0; cfg.max_trees + 1];
    for fold in 0..folds {
        let test: Vec<usize> = order.iter().copied().skip(fold).step_by(folds).collect();
        let train: Vec<usize> = order.iter().copied().enumerate().filter(|(k, _)| k % folds != fold).map(|(_, i)| i).collect();
        let sub_y: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let base = prior(&sub_y);
        let mut margins = vec![base; test.len()];
        held_out[0] += test.iter().zip(&margins).map(|(&i, &m)| log_loss(m, y[i])).sum::<f64>();
        let mut round = 0;
        boost(x, y, &train, cfg.max_trees, cfg, width, |trees, _| {
            round += 1;
            let t = trees.last().expect("a tree was just added");
            let mut loss = 0.0;
            for (m, &i) in margins.iter_mut().zip(&test) {
                *m += cfg.shrinkage * t.predict(&x[i]);
                loss += log_loss(*m, y[i]);
            }
            held_out[round] += loss;
        });
    }
    let mut best = 0;
    for (r, &l) in held_out.iter().enumerate() {
        if l < held_out[best] {
            best = r;
        }
    }
    best
}

/// Mean logistic loss of `model` over the rows.
pub fn ensemble_log_loss(model: &BoostedEnsemble, features: &[Vec<f64>], targets: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &t) in features.iter().zip(targets) {
        total += log_loss(model.score(x)?, if t { 1.0 } else { 0.0 });
    }
    Ok(total / features.len().max(1) as f64)
}
