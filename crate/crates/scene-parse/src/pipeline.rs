//! End-to-end inference: either the stage-1 baseline (per-pixel argmax of
//! the linear head) or the full segment-cover labeling, both from the same
//! model bundle.

use crate::cover::{classify_component, label_image, optimal_cover, purity_cost};
use crate::dataset::LabelMap;
use crate::descriptor::{flatten_descriptor, pool_component};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::msnet::{extract_features, gather_feature};
use crate::seghier::{build_merge_tree, build_pixel_graph, remove_small, volume_filter};
use crate::volume::FeatureVolume;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Per-pixel argmax of the stage-1 linear head.
    Baseline,
    /// Segment-cover labeling over the merge-tree hierarchy.
    Cover,
}

pub struct ParseOutput {
    pub labels: LabelMap,
    /// Optional per-pixel class distributions, `n_classes x H x W`.
    pub dist: Option<FeatureVolume>,
    pub millis: f64,
}

/// Labels one image. `min_component` overrides the bundle's stored value
/// when given.
pub fn parse_image(
    bundle: &ModelBundle,
    image: &FeatureVolume,
    mode: ParseMode,
    min_component: Option<u32>,
    want_dist: bool,
) -> Result<ParseOutput> {
    let start = Instant::now();
    let (h, w) = (image.height(), image.width());
    let n_classes = bundle.n_classes;
    let features = extract_features(image, &bundle.params, &bundle.net_config)?;

    let (labels, dist) = match mode {
        ParseMode::Baseline => {
            let linear = bundle
                .linear
                .as_ref()
                .ok_or_else(|| Error::invalid("model has no stage-1 linear head"))?;
            let mut labels = LabelMap::filled(w, h, 0);
            let mut dist = want_dist.then(|| FeatureVolume::zeros(n_classes, h, w));
            let mut x = vec![0.0; bundle.net_config.feature_dim()];
            for y in 0..h {
                for px in 0..w {
                    gather_feature(&features.native, &bundle.net_config, y, px, &mut x);
                    let pred = linear.predict(&x)?;
                    labels.set(y, px, pred.argmax() as u8);
                    if let Some(d) = dist.as_mut() {
                        for (c, &p) in pred.probs().iter().enumerate() {
                            d.set(c, y, px, p);
                        }
                    }
                }
            }
            (labels, dist)
        }
        ParseMode::Cover => {
            let clf = bundle
                .classifier
                .as_ref()
                .ok_or_else(|| Error::invalid("model has no purity classifier"))?;
            let min_px = min_component.unwrap_or(bundle.min_component);
            let graph = build_pixel_graph(image);
            let mut tree = remove_small(&volume_filter(&build_merge_tree(&graph)), min_px);
            for id in tree.candidates().collect::<Vec<_>>() {
                let desc = pool_component(&features.full, &tree, id, bundle.grid)?;
                let pred = classify_component(&flatten_descriptor(&desc), clf)?;
                tree.set_cost(id, purity_cost(&pred));
                tree.set_dist(id, pred);
            }
            let cover = optimal_cover(&tree)?;
            let labels = label_image(&tree, &cover, w)?;
            let dist = if want_dist {
                let mut d = FeatureVolume::zeros(n_classes, h, w);
                for (pixel, &node) in cover.chosen.iter().enumerate() {
                    let probs = tree.nodes[node as usize].dist.as_ref().unwrap().probs();
                    let (y, x) = (pixel / w, pixel % w);
                    for (c, &p) in probs.iter().enumerate() {
                        d.set(c, y, x, p);
                    }
                }
                Some(d)
            } else {
                None
            };
            (labels, dist)
        }
    };
    Ok(ParseOutput {
        labels,
        dist,
        millis: start.elapsed().as_secs_f64() * 1e3,
    })
}
