//! Deliberately naive reference implementations used to cross-check the
//! fast paths. Everything here trades speed for obviousness and stays
//! independent of the code it validates; `selftest` and the test suites
//! compare against these on seeded random instances.

use crate::nn::FilterBank;
use crate::seghier::SegTree;
use crate::volume::FeatureVolume;

/// Nested-loop cross-correlation with zero padding.
pub fn conv_reference(input: &FeatureVolume, bank: &FilterBank, pad: usize) -> FeatureVolume {
    let (_, h, w) = input.shape();
    let k = bank.kernel_size();
    let out_h = h + 2 * pad - k + 1;
    let out_w = w + 2 * pad - k + 1;
    let mut out = FeatureVolume::zeros(bank.out_channels(), out_h, out_w);
    for p in 0..bank.out_channels() {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bank.biases()[p];
                for (ci, &(cp, q)) in bank.connections().iter().enumerate() {
                    if cp != p {
                        continue;
                    }
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = oy as isize + ky as isize - pad as isize;
                            let x = ox as isize + kx as isize - pad as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            acc += bank.weights()[ci][ky * k + kx]
                                * input.at(q, y as usize, x as usize);
                        }
                    }
                }
                out.set(p, oy, ox, acc);
            }
        }
    }
    out
}

/// Nested-loop 2x2 max over blocks, ceil-halved dims.
pub fn maxpool_reference(input: &FeatureVolume) -> FeatureVolume {
    let (c, h, w) = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = FeatureVolume::zeros(c, oh, ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for y in oy * 2..(oy * 2 + 2).min(h) {
                    for x in ox * 2..(ox * 2 + 2).min(w) {
                        best = best.max(input.at(ch, y, x));
                    }
                }
                out.set(ch, oy, ox, best);
            }
        }
    }
    out
}

/// MST edge-weight multiset by textbook Prim with an O(V^2) scan.
pub fn mst_weights_prim(n_vertices: usize, edges: &[(u32, u32, f64)]) -> Vec<f64> {
    if n_vertices == 0 {
        return Vec::new();
    }
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_vertices];
    for &(a, b, w) in edges {
        adj[a as usize].push((b, w));
        adj[b as usize].push((a, w));
    }
    let mut in_tree = vec![false; n_vertices];
    let mut best = vec![f64::INFINITY; n_vertices];
    in_tree[0] = true;
    for &(v, w) in &adj[0] {
        best[v as usize] = best[v as usize].min(w);
    }
    let mut weights = Vec::with_capacity(n_vertices - 1);
    for _ in 1..n_vertices {
        let mut pick = usize::MAX;
        for v in 0..n_vertices {
            if !in_tree[v] && (pick == usize::MAX || best[v] < best[pick]) {
                pick = v;
            }
        }
        weights.push(best[pick]);
        in_tree[pick] = true;
        for &(v, w) in &adj[pick] {
            if !in_tree[v as usize] && w < best[v as usize] {
                best[v as usize] = w;
            }
        }
    }
    weights
}

/// For each leaf, walks the explicit leaf-to-root path and returns the
/// minimal-cost internal node, preferring the deeper node on ties, along
/// with the summed optimum.
pub fn cover_reference(tree: &SegTree) -> (Vec<u32>, f64) {
    let mut choice = vec![u32::MAX; tree.leaf_count as usize];
    let mut total = 0.0;
    for leaf in 0..tree.leaf_count {
        let mut best_cost = f64::INFINITY;
        let mut best_node = u32::MAX;
        let mut cur = tree.nodes[leaf as usize].parent;
        while let Some(id) = cur {
            let cost = tree.nodes[id as usize]
                .cost
                .expect("cover_reference needs costs on all internal nodes");
            // walking bottom-up: strictly-better ancestors only, so ties
            // keep the deeper node
            if cost < best_cost {
                best_cost = cost;
                best_node = id;
            }
            cur = tree.nodes[id as usize].parent;
        }
        choice[leaf as usize] = best_node;
        total += best_cost;
    }
    (choice, total)
}

/// Nested-loop elastic max pooling: iterates every (pixel, cell) pair of
/// the component's bounding box grid and takes channelwise maxima; empty
/// cells stay zero. Cell r spans box rows floor(r*h/G)..floor((r+1)*h/G)-1,
/// likewise for columns.
pub fn pool_reference(
    features: &FeatureVolume,
    pixels: &[u32],
    grid: usize,
) -> Vec<f64> {
    let (channels, _, width) = features.shape();
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &p in pixels {
        let y = p as usize / width;
        let x = p as usize % width;
        y0 = y0.min(y);
        x0 = x0.min(x);
        y1 = y1.max(y);
        x1 = x1.max(x);
    }
    let bh = y1 - y0 + 1;
    let bw = x1 - x0 + 1;
    let mut out = vec![0.0f64; grid * grid * channels];
    for r in 0..grid {
        let ry0 = r * bh / grid;
        let ry1 = (r + 1) * bh / grid;
        for c in 0..grid {
            let cx0 = c * bw / grid;
            let cx1 = (c + 1) * bw / grid;
            for d in 0..channels {
                let mut best = f64::NEG_INFINITY;
                let mut any = false;
                for &p in pixels {
                    let y = p as usize / width - y0;
                    let x = p as usize % width - x0;
                    if y >= ry0 && y < ry1 && x >= cx0 && x < cx1 {
                        best = best.max(features.at(d, y + y0, x + x0));
                        any = true;
                    }
                }
                out[(r * grid + c) * channels + d] = if any { best } else { 0.0 };
            }
        }
    }
    out
}
