//! Affinity-based soft-mask refinement.
//!
//! A 4-connected grid graph over a guidance plane carries squared
//! channel-distance edge weights. Filtering a mask through the minimum
//! spanning tree of that graph averages values with weights that decay
//! with the maximum edge weight on the tree path (long-range, edge-aware),
//! while a local Gaussian pass over kernel windows handles fine detail.
//! Cascading local blocks and blending each block with its input yields
//! the refined soft pseudo masks.

use crate::config::AffinityConfig;
use crate::dataset::{FeaturePyramid, Plane};
use crate::error::{Error, Result};
use crate::geometry::BitMask;

/// One 4-connected edge between row-major nodes `a < b`.
#[derive(Debug, Clone, Copy)]
pub struct GridEdge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

/// 4-connected planar graph with squared-distance edge weights.
#[derive(Debug, Clone)]
pub struct GridGraph {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<GridEdge>,
}

impl GridGraph {
    pub fn nodes(&self) -> usize {
        self.width * self.height
    }

    /// Build from a guidance plane; the weight between neighbors is the
    /// squared Euclidean distance of their channel vectors. Edges are
    /// generated node-major, right neighbor before down neighbor, which
    /// fixes the tie order downstream.
    pub fn from_plane(plane: &Plane) -> GridGraph {
        let (h, w) = (plane.height, plane.width);
        let mut edges = Vec::with_capacity(h * (w - 1) + w * (h - 1));
        let dist2 = |y0: usize, x0: usize, y1: usize, x1: usize| -> f64 {
            (0..plane.channels)
                .map(|c| {
                    let d = plane.get(c, y0, x0) - plane.get(c, y1, x1);
                    d * d
                })
                .sum()
        };
        for y in 0..h {
            for x in 0..w {
                let id = (y * w + x) as u32;
                if x + 1 < w {
                    edges.push(GridEdge { a: id, b: id + 1, weight: dist2(y, x, y, x + 1) });
                }
                if y + 1 < h {
                    edges.push(GridEdge { a: id, b: id + w as u32, weight: dist2(y, x, y + 1, x) });
                }
            }
        }
        GridGraph { width: w, height: h, edges }
    }

    /// Same-weight grid, useful in tests.
    pub fn uniform(width: usize, height: usize, weight: f64) -> GridGraph {
        let mut g = GridGraph::from_plane(&Plane::zeros(1, height, width));
        for e in &mut g.edges {
            e.weight = weight;
        }
        g
    }
}

/// Rooted spanning tree supporting max-edge-on-path queries.
#[derive(Debug, Clone)]
pub struct SpanningTree {
    pub nodes: usize,
    pub root: u32,
    /// Parent of each node; the root points at itself.
    pub parent: Vec<u32>,
    /// Weight of the edge to the parent (0 for the root).
    pub parent_weight: Vec<f64>,
    pub depth: Vec<u32>,
    /// Adjacency of the undirected tree.
    pub adjacency: Vec<Vec<(u32, f64)>>,
    /// Total weight, for cross-checks.
    pub total_weight: f64,
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n as u32).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Less => self.parent[ra as usize] = rb,
            std::cmp::Ordering::Greater => self.parent[rb as usize] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb as usize] = ra;
                self.rank[ra as usize] += 1;
            }
        }
        true
    }
}

/// Kruskal minimum spanning tree. Equal weights resolve in edge-generation
/// order (node-major, right before down) via a stable sort.
pub fn build_mst(graph: &GridGraph) -> SpanningTree {
    let n = graph.nodes();
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    order.sort_by(|&a, &b| {
        graph.edges[a]
            .weight
            .partial_cmp(&graph.edges[b].weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut dsu = DisjointSet::new(n);
    let mut adjacency: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut total_weight = 0.0;
    let mut accepted = 0usize;
    for &ei in &order {
        let e = graph.edges[ei];
        if dsu.union(e.a, e.b) {
            adjacency[e.a as usize].push((e.b, e.weight));
            adjacency[e.b as usize].push((e.a, e.weight));
            total_weight += e.weight;
            accepted += 1;
            if accepted + 1 == n {
                break;
            }
        }
    }

    // Root at node 0, breadth-first.
    let mut parent = vec![u32::MAX; n];
    let mut parent_weight = vec![0.0; n];
    let mut depth = vec![0u32; n];
    let mut queue = std::collections::VecDeque::new();
    parent[0] = 0;
    queue.push_back(0u32);
    while let Some(u) = queue.pop_front() {
        for &(v, w) in &adjacency[u as usize] {
            if parent[v as usize] == u32::MAX {
                parent[v as usize] = u;
                parent_weight[v as usize] = w;
                depth[v as usize] = depth[u as usize] + 1;
                queue.push_back(v);
            }
        }
    }

    SpanningTree { nodes: n, root: 0, parent, parent_weight, depth, adjacency, total_weight }
}

/// Maximum edge weight on the unique tree path between `i` and `j`;
/// 0 when `i == j`.
pub fn max_edge_on_path(tree: &SpanningTree, i: u32, j: u32) -> f64 {
    let mut a = i;
    let mut b = j;
    let mut max_w: f64 = 0.0;
    while tree.depth[a as usize] > tree.depth[b as usize] {
        max_w = max_w.max(tree.parent_weight[a as usize]);
        a = tree.parent[a as usize];
    }
    while tree.depth[b as usize] > tree.depth[a as usize] {
        max_w = max_w.max(tree.parent_weight[b as usize]);
        b = tree.parent[b as usize];
    }
    while a != b {
        max_w = max_w.max(tree.parent_weight[a as usize]);
        max_w = max_w.max(tree.parent_weight[b as usize]);
        a = tree.parent[a as usize];
        b = tree.parent[b as usize];
    }
    max_w
}

/// Tree-filter a value vector: each output is the affinity-weighted mean
/// of all values, with pair affinity `exp(-max_edge_on_path / bandwidth^2)`.
/// The self term enters both sums with affinity 1 unless
/// `literal_normalizer` excludes it from both.
pub fn tree_filter(
    tree: &SpanningTree,
    phi: &[f64],
    bandwidth: f64,
    literal_normalizer: bool,
) -> Vec<f64> {
    assert_eq!(phi.len(), tree.nodes);
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let n = tree.nodes;
    let mut out = vec![0.0; n];
    // Reused traversal scratch: max edge weight from the current root.
    let mut max_from_root = vec![0.0f64; n];
    let mut visited = vec![false; n];
    let mut stack: Vec<u32> = Vec::with_capacity(n);

    for root in 0..n {
        for v in visited.iter_mut() {
            *v = false;
        }
        max_from_root[root] = 0.0;
        visited[root] = true;
        stack.push(root as u32);
        let mut num = if literal_normalizer { 0.0 } else { phi[root] };
        let mut den = if literal_normalizer { 0.0 } else { 1.0 };
        while let Some(u) = stack.pop() {
            for &(v, w) in &tree.adjacency[u as usize] {
                let vi = v as usize;
                if visited[vi] {
                    continue;
                }
                visited[vi] = true;
                let m = max_from_root[u as usize].max(w);
                max_from_root[vi] = m;
                let psi = (-m * inv_bw2).exp();
                num += phi[vi] * psi;
                den += psi;
                stack.push(v);
            }
        }
        out[root] = if den > 0.0 { num / den } else { phi[root] };
    }
    out
}

/// Local Gaussian filtering over truncated kernel windows. Affinity between
/// pixels is `exp(-|g_i - g_j|^2 / bandwidth^2)` on the guidance plane.
pub fn local_filter(
    guidance: &Plane,
    phi: &[f64],
    kernel: usize,
    bandwidth: f64,
    literal_normalizer: bool,
) -> Vec<f64> {
    let (h, w) = (guidance.height, guidance.width);
    assert_eq!(phi.len(), h * w);
    assert!(kernel % 2 == 1, "kernel must be odd");
    let r = kernel / 2;
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r + 1).min(h);
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let mut num = 0.0;
            let mut den = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    if literal_normalizer && yy == y && xx == x {
                        continue;
                    }
                    let mut d2 = 0.0;
                    for c in 0..guidance.channels {
                        let d = guidance.get(c, y, x) - guidance.get(c, yy, xx);
                        d2 += d * d;
                    }
                    let psi = (-d2 * inv_bw2).exp();
                    num += phi[yy * w + xx] * psi;
                    den += psi;
                }
            }
            out[y * w + x] = if den > 0.0 { num / den } else { phi[y * w + x] };
        }
    }
    out
}

/// Iterate `blocks` filtering passes, blending each block output with its
/// input: `next = lambda * block(input) + (1 - lambda) * input`.
pub fn cascade_refine<F>(phi0: &[f64], blocks: usize, lambda: f64, mut block: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut current = phi0.to_vec();
    for _ in 0..blocks {
        let filtered = block(&current);
        for (c, f) in current.iter_mut().zip(&filtered) {
            *c = lambda * f + (1.0 - lambda) * *c;
        }
    }
    current
}

/// Align-corners-false bilinear resampling to `(target_h, target_w)`.
pub fn resample_bilinear(plane: &Plane, target_h: usize, target_w: usize) -> Result<Plane> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Dimension("resample_bilinear: zero target".to_string()));
    }
    if plane.height == target_h && plane.width == target_w {
        return Ok(plane.clone());
    }
    let mut out = Plane::zeros(plane.channels, target_h, target_w);
    let scale_y = plane.height as f64 / target_h as f64;
    let scale_x = plane.width as f64 / target_w as f64;
    for y in 0..target_h {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (plane.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(plane.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..target_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (plane.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(plane.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..plane.channels {
                let v00 = plane.get(c, y0, x0);
                let v01 = plane.get(c, y0, x1);
                let v10 = plane.get(c, y1, x0);
                let v11 = plane.get(c, y1, x1);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Product of refining one soft mask.
#[derive(Debug, Clone)]
pub struct RefinedMasks {
    /// Image-plane refinement.
    pub image: Vec<f64>,
    /// Semantic-plane refinement, averaged across pyramid levels; `None`
    /// when no pyramid was supplied.
    pub semantic: Option<Vec<f64>>,
}

fn refine_on_plane(
    mask: &[f64],
    guidance: &Plane,
    global_bandwidth: f64,
    local_bandwidth: f64,
    kernel: usize,
    lambda: f64,
    cfg: &AffinityConfig,
) -> Vec<f64> {
    let graph = GridGraph::from_plane(guidance);
    let tree = build_mst(&graph);
    let global = tree_filter(&tree, mask, global_bandwidth, cfg.literal_normalizer);
    cascade_refine(&global, cfg.cascade_blocks, lambda, |phi| {
        local_filter(guidance, phi, kernel, local_bandwidth, cfg.literal_normalizer)
    })
}

/// Refine a soft mask on the image plane and, when a pyramid is present,
/// on each semantic level (then averaged). Guidance planes are resampled
/// to the mask resolution first; each path applies one global tree filter
/// followed by the cascade of local blocks.
pub fn refine_mask(
    mask: &[f64],
    mask_h: usize,
    mask_w: usize,
    image: &Plane,
    pyramid: Option<&FeaturePyramid>,
    cfg: &AffinityConfig,
) -> Result<RefinedMasks> {
    if mask.len() != mask_h * mask_w {
        return Err(Error::Dimension("refine_mask: mask size mismatch".to_string()));
    }
    let image_plane = resample_bilinear(image, mask_h, mask_w)?;
    let refined_image = refine_on_plane(
        mask,
        &image_plane,
        cfg.zeta_g,
        cfg.zeta_l,
        cfg.kernel_for_level(0),
        cfg.lambda_i,
        cfg,
    );

    let semantic = match pyramid {
        Some(p) if !p.levels.is_empty() => {
            let mut acc = vec![0.0; mask.len()];
            for (li, level) in p.levels.iter().enumerate() {
                let plane = resample_bilinear(level, mask_h, mask_w)?;
                let refined = refine_on_plane(
                    mask,
                    &plane,
                    cfg.sigma_g,
                    cfg.sigma_l,
                    cfg.kernel_for_level(li),
                    cfg.lambda_s,
                    cfg,
                );
                for (a, v) in acc.iter_mut().zip(&refined) {
                    *a += v / p.levels.len() as f64;
                }
            }
            Some(acc)
        }
        _ => None,
    };

    Ok(RefinedMasks { image: refined_image, semantic })
}

/// Affinity-loss report.
#[derive(Debug, Clone)]
pub struct AffinityLoss {
    pub value: f64,
    /// Foreground pixel count of the supervision mask.
    pub region: usize,
    /// True when the supervision mask was empty and the loss defaulted
    /// to 0.
    pub degenerate: bool,
}

/// Mean absolute discrepancy between the refined masks and the label
/// plane, normalized by the supervision mask's foreground area. A missing
/// semantic mask contributes nothing.
pub fn affinity_loss(
    refined_image: &[f64],
    refined_semantic: Option<&[f64]>,
    labels: &[f64],
    supervise: &BitMask,
) -> Result<AffinityLoss> {
    if refined_image.len() != labels.len() || labels.len() != supervise.bits.len() {
        return Err(Error::Dimension("affinity_loss: size mismatch".to_string()));
    }
    if let Some(s) = refined_semantic {
        if s.len() != labels.len() {
            return Err(Error::Dimension("affinity_loss: semantic size mismatch".to_string()));
        }
    }
    let region = supervise.count();
    if region == 0 {
        return Ok(AffinityLoss { value: 0.0, region: 0, degenerate: true });
    }
    let mut total = 0.0;
    for i in 0..labels.len() {
        total += (refined_image[i] - labels[i]).abs();
        if let Some(s) = refined_semantic {
            total += (s[i] - labels[i]).abs();
        }
    }
    Ok(AffinityLoss { value: total / region as f64, region, degenerate: false })
}
