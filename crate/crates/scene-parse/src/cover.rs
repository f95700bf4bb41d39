//! Component classification and the optimal cover. A two-layer network
//! maps each segment descriptor to a class distribution whose entropy is
//! the segment's impurity cost; a single top-down pass then picks, for
//! every pixel, the cheapest component on its path to the root. The union
//! of those components covers the image and minimizes the summed cost.

use crate::dataset::{LabelMap, VOID_LABEL};
use crate::descriptor::{flatten_descriptor, pool_component};
use crate::error::{Error, Result};
use crate::loss::{kl_divergence, softmax, ClassDistribution};
use crate::seghier::SegTree;
use crate::volume::FeatureVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-layer classifier d = softmax(W2 tanh(W1 x + b1)); no output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityClassifier {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// hidden x input, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// classes x hidden, row-major.
    pub w2: Vec<f64>,
}

impl PurityClassifier {
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
        }
    }

    pub fn random(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clf = Self::zeros(input_dim, hidden, classes);
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        for w in &mut clf.w1 {
            *w = rng.random_range(-bound1..bound1);
        }
        for b in &mut clf.b1 {
            *b = rng.random_range(-bound1..bound1);
        }
        let bound2 = 1.0 / (hidden as f64).sqrt();
        for w in &mut clf.w2 {
            *w = rng.random_range(-bound2..bound2);
        }
        clf
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
                let pre: f64 =
                    self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                pre.tanh()
            })
            .collect()
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|a| {
                let row = &self.w2[a * self.hidden..(a + 1) * self.hidden];
                row.iter().zip(hidden).map(|(w, h)| w * h).sum()
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} classifier params, got {}",
                self.param_count(),
                src.len()
            )));
        }
        let (a, rest) = src.split_at(self.w1.len());
        let (b, c) = rest.split_at(self.b1.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        Ok(())
    }

    /// KL(target || prediction) for one descriptor, plus gradients for all
    /// parameters, appended into `grads` (same layout as `write_params`).
    pub fn kl_loss_and_grad(
        &self,
        x: &[f64],
        target: &ClassDistribution,
        grads: &mut [f64],
    ) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "descriptor length {} != classifier input {}",
                x.len(),
                self.input_dim
            )));
        }
        let hidden = self.hidden_activations(x);
        let logits = self.logits(&hidden);
        let pred = softmax(&logits)?;
        let loss = kl_divergence(target, &pred)?;

        // d loss / d logit_a = pred_a - target_a
        let dy: Vec<f64> = pred
            .probs()
            .iter()
            .zip(target.probs())
            .map(|(p, t)| p - t)
            .collect();
        let (gw1, rest) = grads.split_at_mut(self.w1.len());
        let (gb1, gw2) = rest.split_at_mut(self.b1.len());
        let mut dh = vec![0.0; self.hidden];
        for a in 0..self.classes {
            let row = &self.w2[a * self.hidden..(a + 1) * self.hidden];
            let grow = &mut gw2[a * self.hidden..(a + 1) * self.hidden];
            for h in 0..self.hidden {
                grow[h] += dy[a] * hidden[h];
                dh[h] += dy[a] * row[h];
            }
        }
        for h in 0..self.hidden {
            let dpre = dh[h] * (1.0 - hidden[h] * hidden[h]);
            gb1[h] += dpre;
            let grow = &mut gw1[h * self.input_dim..(h + 1) * self.input_dim];
            for (g, v) in grow.iter_mut().zip(x) {
                *g += dpre * v;
            }
        }
        Ok(loss)
    }

    /// SGD update; weight decay applies to the two matrices, not the bias.
    pub fn sgd_update(&mut self, grads: &[f64], lr: f64, weight_decay: f64) {
        let (gw1, rest) = grads.split_at(self.w1.len());
        let (gb1, gw2) = rest.split_at(self.b1.len());
        for (w, g) in self.w1.iter_mut().zip(gw1) {
            *w -= lr * (g + weight_decay * *w);
        }
        for (b, g) in self.b1.iter_mut().zip(gb1) {
            *b -= lr * g;
        }
        for (w, g) in self.w2.iter_mut().zip(gw2) {
            *w -= lr * (g + weight_decay * *w);
        }
    }
}

/// Forward pass of the two-layer classifier.
pub fn classify_component(x: &[f64], clf: &PurityClassifier) -> Result<ClassDistribution> {
    if x.len() != clf.input_dim {
        return Err(Error::shape(format!(
            "descriptor length {} != classifier input {}",
            x.len(),
            clf.input_dim
        )));
    }
    let hidden = clf.hidden_activations(x);
    softmax(&clf.logits(&hidden))
}

/// Impurity of a class distribution: its entropy, in [0, ln N_c].
pub fn purity_cost(dist: &ClassDistribution) -> f64 {
    dist.entropy()
}

/// Per-pixel choice of covering component plus the distinct cover set.
#[derive(Debug, Clone)]
pub struct CoverResult {
    /// For each pixel, the chosen node id.
    pub chosen: Vec<u32>,
    /// Distinct chosen nodes, ascending.
    pub cover_set: Vec<u32>,
    pub total_cost: f64,
}

/// For every pixel, picks the minimal-cost component on the path from its
/// smallest surviving component to the root, in one top-down pass. Ties
/// prefer the deeper node.
pub fn optimal_cover(tree: &SegTree) -> Result<CoverResult> {
    if tree.candidates().count() == 0 {
        return Err(Error::Empty("tree has no internal nodes to cover with".into()));
    }
    for id in tree.candidates() {
        if tree.nodes[id as usize].cost.is_none() {
            return Err(Error::MissingCost(id as usize));
        }
    }
    let mut chosen = vec![u32::MAX; tree.leaf_count as usize];
    let mut total = 0.0;
    // stack carries the running (min cost, node) along the root-to-leaf path
    let mut stack: Vec<(u32, f64, u32)> = Vec::new();
    let root_cost = tree.nodes[tree.root as usize].cost.unwrap();
    stack.push((tree.root, root_cost, tree.root));
    while let Some((id, best_cost, best_node)) = stack.pop() {
        if tree.is_leaf(id) {
            chosen[id as usize] = best_node;
            total += best_cost;
            continue;
        }
        for &c in &tree.nodes[id as usize].children {
            if tree.is_leaf(c) {
                chosen[c as usize] = best_node;
                total += best_cost;
            } else {
                let cost = tree.nodes[c as usize].cost.unwrap();
                // <= keeps the deeper node on ties
                if cost <= best_cost {
                    stack.push((c, cost, c));
                } else {
                    stack.push((c, best_cost, best_node));
                }
            }
        }
    }
    let mut cover_set: Vec<u32> = chosen.clone();
    cover_set.sort_unstable();
    cover_set.dedup();
    Ok(CoverResult {
        chosen,
        cover_set,
        total_cost: total,
    })
}

/// Labels every pixel with the argmax class of its chosen component's
/// distribution (ties to the lowest class index).
pub fn label_image(tree: &SegTree, cover: &CoverResult, width: usize) -> Result<LabelMap> {
    let n = cover.chosen.len();
    let mut node_label = std::collections::HashMap::new();
    for &id in &cover.cover_set {
        let dist = tree.nodes[id as usize]
            .dist
            .as_ref()
            .ok_or(Error::MissingDistribution(id as usize))?;
        node_label.insert(id, dist.argmax() as u8);
    }
    let labels: Vec<u8> = cover.chosen.iter().map(|id| node_label[id]).collect();
    LabelMap::new(width, n / width, labels)
}

/// Attaches ground-truth costs to every candidate: the entropy of the
/// label histogram over the component's non-void pixels. Components with
/// no labeled pixels get the maximal cost. Diagnostic path for exercising
/// the cover independently of the classifier.
pub fn assign_oracle_costs(tree: &mut SegTree, truth: &LabelMap, n_classes: usize) {
    let max_cost = (n_classes as f64).ln();
    for id in tree.candidates().collect::<Vec<_>>() {
        let mut counts = vec![0u64; n_classes];
        for &p in tree.pixels_of(id) {
            let l = truth.labels()[p as usize];
            if l != VOID_LABEL {
                counts[l as usize] += 1;
            }
        }
        match ClassDistribution::from_counts(&counts) {
            Ok(dist) => {
                tree.set_cost(id, purity_cost(&dist));
                tree.set_dist(id, dist);
            }
            Err(_) => tree.set_cost(id, max_cost),
        }
    }
}

/// One training component: a flattened descriptor and its target label
/// histogram.
pub struct Stage2Example {
    pub descriptor: Vec<f64>,
    pub target: ClassDistribution,
}

/// Builds stage-2 training examples from one image's tree, feature map and
/// ground truth: every candidate component whose pixels carry at least one
/// label yields (descriptor, normalized label histogram).
pub fn stage2_examples(
    features: &FeatureVolume,
    tree: &SegTree,
    truth: &LabelMap,
    n_classes: usize,
    grid: usize,
) -> Result<Vec<Stage2Example>> {
    let mut out = Vec::new();
    for id in tree.candidates() {
        let mut counts = vec![0u64; n_classes];
        for &p in tree.pixels_of(id) {
            let l = truth.labels()[p as usize];
            if l != VOID_LABEL {
                counts[l as usize] += 1;
            }
        }
        let Ok(target) = ClassDistribution::from_counts(&counts) else {
            continue; // unlabeled component
        };
        let desc = pool_component(features, tree, id, grid)?;
        out.push(Stage2Example {
            descriptor: flatten_descriptor(&desc),
            target,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Stage2Options {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            hidden: 32,
            epochs: 30,
            lr: 0.05,
            // ten times the stage-1 default; the classifier wants more
            // regularization than the feature extractor
            weight_decay: 1e-6,
            seed: 7,
        }
    }
}

/// Trains the purity classifier by SGD on the KL divergence between the
/// true per-component label histograms and its predictions. Returns the
/// classifier and the mean loss per epoch.
pub fn train_stage2(
    examples: &[Stage2Example],
    n_classes: usize,
    opts: &Stage2Options,
) -> Result<(PurityClassifier, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Empty("no stage-2 training components".into()));
    }
    let input_dim = examples[0].descriptor.len();
    let mut clf = PurityClassifier::random(input_dim, opts.hidden, n_classes, opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_c0de);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut grads = vec![0.0; clf.param_count()];
    for _ in 0..opts.epochs {
        for i in 0..order.len() {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for &i in &order {
            let ex = &examples[i];
            grads.fill(0.0);
            loss_sum += clf.kl_loss_and_grad(&ex.descriptor, &ex.target, &mut grads)?;
            clf.sgd_update(&grads, opts.lr, opts.weight_decay);
        }
        epoch_losses.push(loss_sum / order.len() as f64);
    }
    Ok((clf, epoch_losses))
}
