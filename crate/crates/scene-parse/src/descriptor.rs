//! Fixed-size segment descriptors: the component's pixels mask the dense
//! feature map (suppressing everything outside the segment), then a G x G
//! grid spanning the component's bounding box takes channelwise maxima per
//! cell. The result is the same size for every segment, whatever its shape.

use crate::error::{Error, Result};
use crate::seghier::SegTree;
use crate::volume::FeatureVolume;

#[derive(Debug, Clone)]
pub struct SegmentDescriptor {
    /// G x G x D values, row-major in (cell row, cell col, channel) order.
    grid: Vec<f64>,
    grid_size: usize,
    channels: usize,
    pub node: u32,
    /// (y0, x0, y1, x1) inclusive bounding box of the component.
    pub bbox: (usize, usize, usize, usize),
}

impl SegmentDescriptor {
    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let d = self.channels;
        let start = (row * self.grid_size + col) * d;
        &self.grid[start..start + d]
    }

    pub fn values(&self) -> &[f64] {
        &self.grid
    }
}

#[inline]
fn cell_of(offset: usize, extent: usize, grid: usize) -> usize {
    // largest r with floor(r*extent/grid) <= offset
    ((offset + 1) * grid - 1) / extent
}

/// Max-pools the feature vectors of the pixels that fall both in the
/// component and in each grid cell; cells without component pixels stay
/// zero.
pub fn pool_component(
    features: &FeatureVolume,
    tree: &SegTree,
    node: u32,
    grid: usize,
) -> Result<SegmentDescriptor> {
    if node as usize >= tree.len() {
        return Err(Error::invalid(format!(
            "node {node} out of range for tree of {}",
            tree.len()
        )));
    }
    if grid == 0 {
        return Err(Error::invalid("grid size must be at least 1"));
    }
    let pixels = tree.pixels_of(node);
    if pixels.is_empty() {
        return Err(Error::Empty(format!("component {node} has no pixels")));
    }
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
    let mut occupied = vec![false; grid * grid];
    for &p in pixels {
        let y = p as usize / width;
        let x = p as usize % width;
        let r = cell_of(y - y0, bh, grid);
        let c = cell_of(x - x0, bw, grid);
        let cell = r * grid + c;
        let dst = &mut out[cell * channels..(cell + 1) * channels];
        if occupied[cell] {
            for (d, ch) in dst.iter_mut().zip(0..channels) {
                let v = features.at(ch, y, x);
                if v > *d {
                    *d = v;
                }
            }
        } else {
            occupied[cell] = true;
            for (d, ch) in dst.iter_mut().zip(0..channels) {
                *d = features.at(ch, y, x);
            }
        }
    }
    Ok(SegmentDescriptor {
        grid: out,
        grid_size: grid,
        channels,
        node,
        bbox: (y0, x0, y1, x1),
    })
}

/// Row-major (cell row, cell col, channel) flattening, length G^2 * D.
pub fn flatten_descriptor(desc: &SegmentDescriptor) -> Vec<f64> {
    desc.grid.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::pool_reference;
    use crate::seghier::{build_merge_tree, build_pixel_graph};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(c: usize, h: usize, w: usize, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVolume::from_vec(c, h, w, data).unwrap()
    }

    fn positive_volume(c: usize, h: usize, w: usize, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(0.1..1.0)).collect();
        FeatureVolume::from_vec(c, h, w, data).unwrap()
    }

    fn full_image_tree(h: usize, w: usize) -> SegTree {
        let img = FeatureVolume::zeros(1, h, w);
        build_merge_tree(&build_pixel_graph(&img))
    }

    #[test]
    fn whole_image_grid_one_is_global_max() {
        let features = random_volume(4, 6, 6, 51);
        let tree = full_image_tree(6, 6);
        let desc = pool_component(&features, &tree, tree.root, 1).unwrap();
        for ch in 0..4 {
            let global = features
                .channel(ch)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(desc.cell(0, 0)[ch], global);
        }
    }

    #[test]
    fn single_pixel_component_returns_its_vector() {
        let features = random_volume(3, 4, 4, 52);
        let tree = full_image_tree(4, 4);
        // leaf 5 = pixel (1,1)
        let desc = pool_component(&features, &tree, 5, 1).unwrap();
        assert_eq!(desc.cell(0, 0), features.pixel_vector(1, 1).as_slice());
    }

    #[test]
    fn matches_nested_loop_oracle_on_random_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let features = random_volume(5, 12, 12, 54);
        for _ in 0..30 {
            // grow a random connected blob
            let mut pixels = vec![rng.random_range(0..144u32)];
            while pixels.len() < rng.random_range(2..40) {
                let seed = pixels[rng.random_range(0..pixels.len())];
                let (y, x) = (seed / 12, seed % 12);
                let (ny, nx) = match rng.random_range(0..4) {
                    0 if y > 0 => (y - 1, x),
                    1 if y < 11 => (y + 1, x),
                    2 if x > 0 => (y, x - 1),
                    _ if x < 11 => (y, x + 1),
                    _ => (y, x),
                };
                let np = ny * 12 + nx;
                if !pixels.contains(&np) {
                    pixels.push(np);
                }
            }
            let grid = rng.random_range(1..=4);
            // descriptors pool tree components; emulate by building a fake
            // single-node tree whose root owns exactly these pixels
            let mut leaf_order: Vec<u32> = pixels.clone();
            leaf_order.sort_unstable();
            let reference = pool_reference(&features, &pixels, grid);
            let via_tree = {
                // smallest tree containing the blob: merge blob leaves in a
                // chain, then attach the rest
                let all: Vec<u32> = (0..144).collect();
                let rest: Vec<u32> = all.iter().cloned().filter(|p| !pixels.contains(p)).collect();
                let mut merges = Vec::new();
                let mut cur = leaf_order[0];
                let mut next_id = 144u32;
                for &p in &leaf_order[1..] {
                    merges.push((cur, p, 1.0));
                    cur = next_id;
                    next_id += 1;
                }
                let blob_node = cur;
                let mut outer = blob_node;
                for &p in &rest {
                    merges.push((outer, p, 2.0));
                    outer = next_id;
                    next_id += 1;
                }
                let tree = SegTree::from_merges(144, &merges).unwrap();
                pool_component(&features, &tree, blob_node, grid).unwrap()
            };
            assert_eq!(via_tree.values(), reference.as_slice());
        }
    }

    #[test]
    fn flatten_lengths() {
        let features = random_volume(768, 4, 4, 55);
        let tree = full_image_tree(4, 4);
        let desc = pool_component(&features, &tree, tree.root, 3).unwrap();
        assert_eq!(flatten_descriptor(&desc).len(), 6912);

        let features = random_volume(4, 3, 3, 56);
        let tree = full_image_tree(3, 3);
        let desc = pool_component(&features, &tree, tree.root, 1).unwrap();
        let flat = flatten_descriptor(&desc);
        assert_eq!(flat.len(), 4);
        assert_eq!(flat.as_slice(), desc.cell(0, 0));
    }

    #[test]
    fn growing_a_component_never_decreases_entries() {
        // growth with a pinned bounding box (cells stay aligned) and
        // nonnegative features (empty cells report zero): every descriptor
        // entry must be non-decreasing as pixels join. Start from the four
        // corners, then absorb the remaining pixels one at a time.
        let features = positive_volume(3, 8, 8, 57);
        let corners = [0u32, 7, 56, 63];
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let mut rest: Vec<u32> = (0..64u32).filter(|p| !corners.contains(p)).collect();
        for i in 0..rest.len() {
            let j = rng.random_range(i..rest.len());
            rest.swap(i, j);
        }
        let mut merges = vec![(corners[0], corners[1], 1.0)];
        let mut cur = 64u32;
        let mut next_id = 65u32;
        for &p in corners[2..].iter().chain(&rest) {
            merges.push((cur, p, 1.0));
            cur = next_id;
            next_id += 1;
        }
        let tree = SegTree::from_merges(64, &merges).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for node in (67..127).step_by(5) {
            let desc = pool_component(&features, &tree, node, 3).unwrap();
            let flat = flatten_descriptor(&desc);
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&flat) {
                    assert!(b >= a, "pooling must be monotone under growth");
                }
            }
            prev = Some(flat);
        }
    }

    #[test]
    fn outside_pixels_never_leak_into_descriptor() {
        let features = random_volume(3, 6, 6, 58);
        let tree = full_image_tree(6, 6);
        // take some mid-level component
        let node = tree
            .candidates()
            .find(|&id| {
                let a = tree.nodes[id as usize].area;
                (4..=18).contains(&a)
            })
            .unwrap();
        let desc = pool_component(&features, &tree, node, 2).unwrap();

        let inside: std::collections::HashSet<u32> =
            tree.pixels_of(node).iter().cloned().collect();
        let mut perturbed = features.clone();
        for p in 0..36u32 {
            if !inside.contains(&p) {
                let (y, x) = (p as usize / 6, p as usize % 6);
                for ch in 0..3 {
                    let v = perturbed.at(ch, y, x);
                    perturbed.set(ch, y, x, v + 100.0);
                }
            }
        }
        let desc2 = pool_component(&perturbed, &tree, node, 2).unwrap();
        assert_eq!(desc.values(), desc2.values());
    }

    #[test]
    fn block_upsampled_component_gives_identical_descriptor() {
        // box dims divisible by G keep cell boundaries aligned under 2x
        // block upsampling, so nearest upsampling and max pooling commute
        let features = random_volume(2, 6, 6, 59);
        let tree = full_image_tree(6, 6);
        let desc = pool_component(&features, &tree, tree.root, 3).unwrap();

        let mut up = FeatureVolume::zeros(2, 12, 12);
        for ch in 0..2 {
            for y in 0..12 {
                for x in 0..12 {
                    up.set(ch, y, x, features.at(ch, y / 2, x / 2));
                }
            }
        }
        let up_tree = full_image_tree(12, 12);
        let up_desc = pool_component(&up, &up_tree, up_tree.root, 3).unwrap();
        assert_eq!(desc.values(), up_desc.values());
    }

    #[test]
    fn node_out_of_range_rejected() {
        let features = random_volume(1, 2, 2, 60);
        let tree = full_image_tree(2, 2);
        assert!(pool_component(&features, &tree, 99, 1).is_err());
        assert!(pool_component(&features, &tree, tree.root, 0).is_err());
    }
}
