//! Segmentation hierarchy: a 4-connected pixel dissimilarity graph, the
//! binary merge tree obtained by processing edges in minimum-spanning-tree
//! order, volume-criterion reweighting, and removal of small components.
//!
//! Leaves are pixels (ids `0..W*H`); internal nodes are created in merge
//! order, so children always precede parents, which keeps single ascending
//! passes valid after every transformation.

use crate::error::{Error, Result};
use crate::loss::ClassDistribution;
use crate::volume::FeatureVolume;

/// 4-neighbor pixel graph with nonnegative dissimilarity weights.
#[derive(Debug, Clone)]
pub struct PixelGraph {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct SegNode {
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub altitude: f64,
    pub area: u32,
    /// Contiguous (start, len) range into the tree's leaf ordering.
    pub extent: (u32, u32),
    pub cost: Option<f64>,
    pub dist: Option<ClassDistribution>,
}

impl SegNode {
    fn leaf(pixel_area: u32) -> Self {
        SegNode {
            parent: None,
            children: Vec::new(),
            altitude: 0.0,
            area: pixel_area,
            extent: (0, 0),
            cost: None,
            dist: None,
        }
    }
}

/// Merge tree over pixel regions. Nodes `0..leaf_count` are the pixels in
/// row-major order; the remaining nodes are merges, children before
/// parents.
#[derive(Debug, Clone)]
pub struct SegTree {
    pub nodes: Vec<SegNode>,
    pub leaf_count: u32,
    pub root: u32,
    /// Permutation of pixel ids: each node's extent indexes into this.
    pub leaf_order: Vec<u32>,
}

impl SegTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_leaf(&self, id: u32) -> bool {
        id < self.leaf_count
    }

    /// Internal (non-pixel) node ids; these are the candidate components.
    pub fn candidates(&self) -> impl Iterator<Item = u32> + '_ {
        self.leaf_count..self.nodes.len() as u32
    }

    /// Pixel ids covered by a node.
    pub fn pixels_of(&self, id: u32) -> &[u32] {
        let (start, len) = self.nodes[id as usize].extent;
        &self.leaf_order[start as usize..(start + len) as usize]
    }

    pub fn set_cost(&mut self, id: u32, cost: f64) {
        self.nodes[id as usize].cost = Some(cost);
    }

    pub fn set_dist(&mut self, id: u32, dist: ClassDistribution) {
        self.nodes[id as usize].dist = Some(dist);
    }

    /// Builds a tree from an explicit merge sequence. `merges` lists
    /// (node_a, node_b, altitude) where ids reference leaves
    /// `0..leaf_count` or earlier merges offset by `leaf_count`. Used by
    /// tests and tools that need hand-crafted hierarchies.
    pub fn from_merges(leaf_count: u32, merges: &[(u32, u32, f64)]) -> Result<Self> {
        let total = leaf_count as usize + merges.len();
        let mut nodes: Vec<SegNode> = (0..leaf_count).map(|_| SegNode::leaf(1)).collect();
        for &(a, b, altitude) in merges {
            let id = nodes.len() as u32;
            for child in [a, b] {
                if child >= id {
                    return Err(Error::invalid(format!(
                        "merge references node {child} before it exists"
                    )));
                }
                if nodes[child as usize].parent.is_some() {
                    return Err(Error::invalid(format!(
                        "node {child} merged twice"
                    )));
                }
                nodes[child as usize].parent = Some(id);
            }
            let area = nodes[a as usize].area + nodes[b as usize].area;
            nodes.push(SegNode {
                parent: None,
                children: vec![a, b],
                altitude,
                area,
                extent: (0, 0),
                cost: None,
                dist: None,
            });
        }
        let roots: Vec<u32> = (0..total as u32)
            .filter(|&i| nodes[i as usize].parent.is_none())
            .collect();
        if roots.len() != 1 {
            return Err(Error::invalid(format!(
                "merge sequence leaves {} roots",
                roots.len()
            )));
        }
        let mut tree = SegTree {
            nodes,
            leaf_count,
            root: roots[0],
            leaf_order: Vec::new(),
        };
        tree.rebuild_extents();
        Ok(tree)
    }

    /// Recomputes the leaf ordering and every node's extent by an
    /// iterative depth-first traversal (trees can be thousands deep).
    fn rebuild_extents(&mut self) {
        let n = self.nodes.len();
        self.leaf_order.clear();
        self.leaf_order.reserve(self.leaf_count as usize);
        let mut start = vec![0u32; n];
        let mut stack: Vec<(u32, bool)> = vec![(self.root, false)];
        while let Some((id, done)) = stack.pop() {
            if done {
                let s = start[id as usize];
                self.nodes[id as usize].extent = (s, self.leaf_order.len() as u32 - s);
                continue;
            }
            start[id as usize] = self.leaf_order.len() as u32;
            if self.is_leaf(id) {
                self.leaf_order.push(id);
                self.nodes[id as usize].extent = (start[id as usize], 1);
                continue;
            }
            stack.push((id, true));
            // push in reverse so children are visited in stored order
            for &c in self.nodes[id as usize].children.iter().rev() {
                stack.push((c, false));
            }
        }
    }

    /// One `id parent altitude area` line per node.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let parent = node
                .parent
                .map(|p| p.to_string())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{} {} {} {}\n", id, parent, node.altitude, node.area));
        }
        out
    }
}

/// Builds the 4-neighbor graph; edge weight is the Euclidean distance
/// between the two pixels' color vectors on the raw image.
pub fn build_pixel_graph(image: &FeatureVolume) -> PixelGraph {
    let (c, h, w) = image.shape();
    let mut edges = Vec::with_capacity(2 * w * h - w - h);
    let dist = |ya: usize, xa: usize, yb: usize, xb: usize| -> f64 {
        let mut acc = 0.0;
        for ch in 0..c {
            let d = image.at(ch, ya, xa) - image.at(ch, yb, xb);
            acc += d * d;
        }
        acc.sqrt()
    };
    for y in 0..h {
        for x in 0..w {
            let a = (y * w + x) as u32;
            if x + 1 < w {
                edges.push((a, a + 1, dist(y, x, y, x + 1)));
            }
            if y + 1 < h {
                edges.push((a, a + w as u32, dist(y, x, y + 1, x)));
            }
        }
    }
    PixelGraph {
        width: w,
        height: h,
        edges,
    }
}

struct UnionFind {
    parent: Vec<u32>,
    /// Tree node currently representing each set root.
    node: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            node: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }
}

/// Kruskal region merging: edges processed stable-sorted by (weight,
/// index); each union creates an internal node at the edge's weight.
pub fn build_merge_tree(graph: &PixelGraph) -> SegTree {
    let n_leaves = graph.width * graph.height;
    let mut order: Vec<u32> = (0..graph.edges.len() as u32).collect();
    order.sort_by(|&a, &b| {
        graph.edges[a as usize]
            .2
            .partial_cmp(&graph.edges[b as usize].2)
            .expect("edge weights must not be NaN")
            .then(a.cmp(&b))
    });

    let mut nodes: Vec<SegNode> = (0..n_leaves).map(|_| SegNode::leaf(1)).collect();
    let mut uf = UnionFind::new(n_leaves);
    for &ei in &order {
        let (a, b, weight) = graph.edges[ei as usize];
        let ra = uf.find(a);
        let rb = uf.find(b);
        if ra == rb {
            continue;
        }
        let na = uf.node[ra as usize];
        let nb = uf.node[rb as usize];
        let id = nodes.len() as u32;
        nodes[na as usize].parent = Some(id);
        nodes[nb as usize].parent = Some(id);
        let area = nodes[na as usize].area + nodes[nb as usize].area;
        nodes.push(SegNode {
            parent: None,
            children: vec![na, nb],
            altitude: weight,
            area,
            extent: (0, 0),
            cost: None,
            dist: None,
        });
        uf.parent[rb as usize] = ra;
        uf.node[ra as usize] = id;
    }

    let root = nodes.len() as u32 - 1;
    let mut tree = SegTree {
        nodes,
        leaf_count: n_leaves as u32,
        root: if n_leaves == 1 { 0 } else { root },
        leaf_order: Vec::new(),
    };
    tree.rebuild_extents();
    tree
}

/// Replaces each merge altitude by `attr(tree, node)`, then restores
/// monotonicity by propagating the running max from children to parents.
pub fn attribute_filter(tree: &SegTree, attr: impl Fn(&SegTree, u32) -> f64) -> SegTree {
    let mut out = tree.clone();
    for id in tree.leaf_count..tree.nodes.len() as u32 {
        out.nodes[id as usize].altitude = attr(tree, id);
    }
    // children precede parents, so one ascending pass suffices
    for id in tree.leaf_count as usize..tree.nodes.len() {
        let max_child = out.nodes[id]
            .children
            .iter()
            .map(|&c| out.nodes[c as usize].altitude)
            .fold(0.0f64, f64::max);
        if out.nodes[id].altitude < max_child {
            out.nodes[id].altitude = max_child;
        }
    }
    out
}

/// The volume criterion: attribute = min(child areas) * altitude.
pub fn volume_filter(tree: &SegTree) -> SegTree {
    attribute_filter(tree, |t, id| {
        let node = &t.nodes[id as usize];
        let min_child_area = node
            .children
            .iter()
            .map(|&c| t.nodes[c as usize].area)
            .min()
            .unwrap_or(0);
        min_child_area as f64 * node.altitude
    })
}

/// Fuses every internal node smaller than `min_pixels` into its parent.
/// Leaves always remain (reattached to their smallest surviving ancestor)
/// but are never candidate components. The root always survives, so
/// `min_pixels` above the image area collapses the tree to the root.
pub fn remove_small(tree: &SegTree, min_pixels: u32) -> SegTree {
    let n = tree.nodes.len();
    let keep = |id: u32| -> bool {
        tree.is_leaf(id) || id == tree.root || tree.nodes[id as usize].area >= min_pixels
    };

    // map old ids to new: leaves keep their ids, surviving internals are
    // renumbered in original (merge) order
    let mut remap = vec![u32::MAX; n];
    let mut next = tree.leaf_count;
    for id in 0..n as u32 {
        if tree.is_leaf(id) {
            remap[id as usize] = id;
        } else if keep(id) {
            remap[id as usize] = next;
            next += 1;
        }
    }

    let mut nodes: Vec<SegNode> = Vec::with_capacity(next as usize);
    for id in 0..n as u32 {
        if remap[id as usize] == u32::MAX {
            continue;
        }
        let old = &tree.nodes[id as usize];
        // nearest surviving proper ancestor
        let mut p = old.parent;
        while let Some(pid) = p {
            if keep(pid) {
                break;
            }
            p = tree.nodes[pid as usize].parent;
        }
        nodes.push(SegNode {
            parent: p.map(|pid| remap[pid as usize]),
            children: Vec::new(),
            altitude: old.altitude,
            area: old.area,
            extent: old.extent,
            cost: old.cost,
            dist: old.dist.clone(),
        });
    }
    for id in 0..nodes.len() as u32 {
        if let Some(p) = nodes[id as usize].parent {
            nodes[p as usize].children.push(id);
        }
    }
    let root = remap[tree.root as usize];
    SegTree {
        nodes,
        leaf_count: tree.leaf_count,
        root,
        leaf_order: tree.leaf_order.clone(),
    }
}
