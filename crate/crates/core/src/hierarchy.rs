//! Hierarchical k-means label trees over scene point clouds.
//!
//! A [`LabelTree`] partitions the training scene coordinates coarse to fine.
//! Every pixel gets one label per level ([`LabelPath`]); level-0 labels index
//! the (possibly merged) first level directly, deeper labels are local to the
//! parent node's children. The network regresses offsets from the finest
//! cluster center, so [`regression_target`] and [`reconstruct`] are inverses.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SceneCoordinate;

/// Lloyd iteration cap.
pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Inputs of at most 16 points with at most this many partitions into `k`
/// clusters are solved exactly after Lloyd.
pub const EXACT_PARTITION_LIMIT: u64 = 4096;

/// Stored cluster centers are snapped to multiples of this many meters
/// (2^-30 m, about 1 nm). Offsets between lattice points are then exactly
/// representable, so [`reconstruct`] inverts [`regression_target`] bit for bit
/// on lattice coordinates (see [`quantize`]).
pub const COORD_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("point set is empty")]
    EmptyInput,
    #[error("k = {k} exceeds the number of distinct points ({distinct})")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("invalid branching factors {0:?}")]
    InvalidBranching(Vec<usize>),
    #[error("label {label} at level {level} out of range (valid: 0..{count})")]
    LabelOutOfRange { level: usize, label: usize, count: usize },
    #[error("path has {got} labels, tree has {expected} levels")]
    PathLength { expected: usize, got: usize },
    #[error("trees cannot be merged: {0}")]
    IncompatibleTrees(String),
    #[error("malformed tree file: {0}")]
    Format(String),
    #[error("malformed point file: {0}")]
    PointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rounds each component to the nearest multiple of [`COORD_QUANTUM`].
pub fn quantize(p: &Vector3<f64>) -> Vector3<f64> {
    p.map(|v| (v / COORD_QUANTUM).round() * COORD_QUANTUM)
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Vec<Vector3<f64>>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// SSE of each assignment step, in order.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(centers: &[Vector3<f64>], p: &Vector3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn cmp_points(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

pub fn distinct_count(points: &[Vector3<f64>]) -> usize {
    let mut sorted: Vec<_> = points.to_vec();
    sorted.sort_by(cmp_points);
    sorted.dedup_by(|a, b| cmp_points(a, b) == Ordering::Equal);
    sorted.len()
}

fn kmeans_pp_init(points: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        // Points already chosen have zero weight, so centers stay distinct.
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        let c = points[pick.expect("k <= distinct points")];
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min((p - c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Runs until the assignment is a fixed point of both Lloyd steps and
/// single-point transfers, or for [`MAX_LLOYD_ITERATIONS`] assignment steps.
/// Empty clusters are reseeded at the point farthest from its center.
/// Tiny inputs with at most [`EXACT_PARTITION_LIMIT`] partitions are then
/// replaced by the exact optimum when Lloyd missed it.
pub fn kmeans_fit(points: &[Vector3<f64>], k: usize, seed: u64) -> Result<KMeansResult, HierarchyError> {
    if points.is_empty() {
        return Err(HierarchyError::EmptyInput);
    }
    if k == 0 {
        return Err(HierarchyError::ZeroClusters);
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(HierarchyError::TooManyClusters { k, distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_init(points, k, &mut rng);
    let n = points.len();
    let mut assignments = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centers, p);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dist[i] = d;
            sse += d;
        }
        sse_history.push(sse);
        if !changed {
            if hartigan_pass(points, &mut assignments, k) == 0 {
                converged = true;
                break;
            }
            centers = cluster_means(points, &assignments, k);
            continue;
        }
        repair_empty_clusters(k, &mut assignments, &mut dist, &mut centers, points);
        centers = cluster_means(points, &assignments, k);
    }

    let mut sse = partition_sse(points, &assignments, &centers);
    if n <= 16 && partition_count(n, k) <= EXACT_PARTITION_LIMIT {
        let (best, best_sse) = best_partition(points, k);
        if best_sse < sse {
            assignments = best;
            centers = cluster_means(points, &assignments, k);
            sse = partition_sse(points, &assignments, &centers);
            sse_history.push(sse);
        }
    }
    Ok(KMeansResult { centers, assignments, sse, sse_history, iterations, converged })
}

fn partition_sse(points: &[Vector3<f64>], assignments: &[usize], centers: &[Vector3<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| (p - centers[a]).norm_squared()).sum()
}

/// Stirling number of the second kind, saturating.
fn partition_count(n: usize, k: usize) -> u64 {
    let mut row = vec![0u64; k + 1];
    row[0] = 1;
    for i in 1..=n {
        for j in (1..=k.min(i)).rev() {
            row[j] = (j as u64).saturating_mul(row[j]).saturating_add(row[j - 1]);
        }
        row[0] = 0;
    }
    row[k]
}

/// Lowest-SSE partition into exactly `k` non-empty clusters, by enumerating
/// restricted growth strings. First minimum wins.
fn best_partition(points: &[Vector3<f64>], k: usize) -> (Vec<usize>, f64) {
    fn walk(points: &[Vector3<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut (Vec<usize>, f64)) {
        let i = labels.len();
        if i == points.len() {
            if used == k {
                let centers = cluster_means(points, labels, k);
                let sse = partition_sse(points, labels, &centers);
                if sse < best.1 {
                    *best = (labels.clone(), sse);
                }
            }
            return;
        }
        if k - used > points.len() - i {
            return;
        }
        for c in 0..=used.min(k - 1) {
            labels.push(c);
            walk(points, k, labels, used.max(c + 1), best);
            labels.pop();
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    walk(points, k, &mut Vec::with_capacity(points.len()), 0, &mut best);
    best
}

/// Single-point transfers that lower the SSE once cluster means are updated
/// (Hartigan's criterion). Lloyd fixed points can still admit such moves; the
/// caller re-runs Lloyd afterwards. Returns the number of moved points.
fn hartigan_pass(points: &[Vector3<f64>], assignments: &mut [usize], k: usize) -> usize {
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments.iter()) {
        sums[a] += p;
        counts[a] += 1;
    }
    let mut moved = 0;
    for (i, p) in points.iter().enumerate() {
        let a = assignments[i];
        if counts[a] < 2 {
            continue;
        }
        let na = counts[a] as f64;
        let leave = na / (na - 1.0) * (p - sums[a] / na).norm_squared();
        let mut best = (a, leave * (1.0 - 1e-12));
        for b in (0..k).filter(|&b| b != a) {
            let nb = counts[b] as f64;
            let join = if counts[b] == 0 { 0.0 } else { nb / (nb + 1.0) * (p - sums[b] / nb).norm_squared() };
            if join < best.1 {
                best = (b, join);
            }
        }
        if best.0 != a {
            let b = best.0;
            sums[a] -= p;
            counts[a] -= 1;
            sums[b] += p;
            counts[b] += 1;
            assignments[i] = b;
            moved += 1;
        }
    }
    moved
}

fn repair_empty_clusters(
    k: usize,
    assignments: &mut [usize],
    dist: &mut [f64],
    centers: &mut [Vector3<f64>],
    points: &[Vector3<f64>],
) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..points.len() {
            if counts[assignments[i]] < 2 {
                continue;
            }
            if far.map_or(true, |f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        counts[assignments[i]] -= 1;
        assignments[i] = j;
        counts[j] = 1;
        dist[i] = 0.0;
        centers[j] = points[i];
    }
}

fn cluster_means(points: &[Vector3<f64>], assignments: &[usize], k: usize) -> Vec<Vector3<f64>> {
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sums[a] += p;
        counts[a] += 1;
    }
    sums.into_iter().zip(counts).map(|(s, c)| s / c.max(1) as f64).collect()
}

/// Best of `restarts` k-means runs (lowest SSE, earliest run on ties).
pub fn kmeans_fit_best(
    points: &[Vector3<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeansResult, HierarchyError> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans_fit(points, k, mix_seed(seed, r as u64))?;
        if best.as_ref().map_or(true, |b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub center: Vector3<f64>,
    pub parent: Option<usize>,
    /// Label of this node: its index among the parent's children, or its
    /// level-0 index for first-level nodes.
    pub label: usize,
    pub children: Vec<usize>,
    /// Number of training points assigned to the node.
    pub count: usize,
    /// Largest distance from an assigned training point to the center.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelTree {
    branching: Vec<usize>,
    levels: Vec<Vec<TreeNode>>,
    region_offsets: Vec<usize>,
}

/// One label per tree level, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelPath(pub Vec<usize>);

impl LabelPath {
    pub fn labels(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct TreeBuildOptions {
    pub seed: u64,
    pub restarts: usize,
}

impl Default for TreeBuildOptions {
    fn default() -> Self {
        Self { seed: 0, restarts: 1 }
    }
}

impl LabelTree {
    /// Builds the hierarchy: k-means over all points at level 0, then an
    /// independent k-means inside each cluster for every further level.
    pub fn build(points: &[Vector3<f64>], branching: &[usize], opts: &TreeBuildOptions) -> Result<Self, HierarchyError> {
        if points.is_empty() {
            return Err(HierarchyError::EmptyInput);
        }
        if branching.is_empty() || branching.contains(&0) {
            return Err(HierarchyError::InvalidBranching(branching.to_vec()));
        }
        let mut levels: Vec<Vec<TreeNode>> = Vec::with_capacity(branching.len());
        // (node index at current level, member point indices)
        let mut groups: Vec<(Option<usize>, Vec<usize>)> = vec![(None, (0..points.len()).collect())];
        for (level, &b) in branching.iter().enumerate() {
            let mut nodes = Vec::new();
            let mut next_groups = Vec::new();
            for (group_idx, (parent, members)) in groups.iter().enumerate() {
                let subset: Vec<Vector3<f64>> = members.iter().map(|&i| points[i]).collect();
                let k = b.min(distinct_count(&subset));
                let seed = mix_seed(opts.seed, ((level as u64) << 32) | group_idx as u64);
                let fit = kmeans_fit_best(&subset, k, seed, opts.restarts)?;
                let mut child_members = vec![Vec::new(); k];
                for (&m, &a) in members.iter().zip(&fit.assignments) {
                    child_members[a].push(m);
                }
                for (c, member_idx) in child_members.into_iter().enumerate() {
                    let center = quantize(&fit.centers[c]);
                    let radius = member_idx.iter().map(|&i| (points[i] - center).norm()).fold(0.0, f64::max);
                    let node_index = nodes.len();
                    let label = if level == 0 { node_index } else { c };
                    nodes.push(TreeNode {
                        center,
                        parent: *parent,
                        label,
                        children: Vec::new(),
                        count: member_idx.len(),
                        radius,
                    });
                    if let Some(p) = parent {
                        levels[level - 1][*p].children.push(node_index);
                    }
                    next_groups.push((Some(node_index), member_idx));
                }
            }
            levels.push(nodes);
            groups = next_groups;
        }
        Ok(Self { branching: branching.to_vec(), levels, region_offsets: vec![0] })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn branching(&self) -> &[usize] {
        &self.branching
    }

    pub fn region_offsets(&self) -> &[usize] {
        &self.region_offsets
    }

    pub fn level(&self, level: usize) -> &[TreeNode] {
        &self.levels[level]
    }

    pub fn leaves(&self) -> &[TreeNode] {
        self.levels.last().unwrap()
    }

    /// Size of each level's label space: the number of first-level nodes for
    /// level 0, the nominal branching factor below it.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = self.branching.clone();
        counts[0] = self.levels[0].len();
        counts
    }

    /// Greedy constrained descent: nearest first-level center, then the
    /// nearest child of the chosen node at every further level. Ties go to
    /// the lowest label.
    pub fn assign(&self, y: &SceneCoordinate) -> LabelPath {
        self.assign_with_leaf(y).0
    }

    /// Path and leaf index of the greedy descent.
    pub fn assign_with_leaf(&self, y: &SceneCoordinate) -> (LabelPath, usize) {
        let mut labels = Vec::with_capacity(self.depth());
        let first: Vec<usize> = (0..self.levels[0].len()).collect();
        let mut candidates: &[usize] = &first;
        let mut node = 0;
        for level in 0..self.depth() {
            let mut best = (candidates[0], f64::INFINITY);
            for &c in candidates {
                let d = (y - self.levels[level][c].center).norm_squared();
                if d < best.1 {
                    best = (c, d);
                }
            }
            node = best.0;
            labels.push(self.levels[level][node].label);
            candidates = &self.levels[level][node].children;
        }
        (LabelPath(labels), node)
    }

    /// Leaf node index addressed by `path`.
    pub fn leaf_index(&self, path: &LabelPath) -> Result<usize, HierarchyError> {
        let labels = path.labels();
        if labels.len() != self.depth() {
            return Err(HierarchyError::PathLength { expected: self.depth(), got: labels.len() });
        }
        let n0 = self.levels[0].len();
        if labels[0] >= n0 {
            return Err(HierarchyError::LabelOutOfRange { level: 0, label: labels[0], count: n0 });
        }
        let mut node = labels[0];
        for (level, &label) in labels.iter().enumerate().skip(1) {
            let children = &self.levels[level - 1][node].children;
            match children.get(label) {
                Some(&c) => node = c,
                None => {
                    return Err(HierarchyError::LabelOutOfRange {
                        level,
                        label,
                        count: children.len(),
                    })
                }
            }
        }
        Ok(node)
    }

    pub fn leaf_center(&self, path: &LabelPath) -> Result<Vector3<f64>, HierarchyError> {
        Ok(self.leaves()[self.leaf_index(path)?].center)
    }

    /// Concatenates the first-level label spaces of several trees. Each
    /// input tree's first-level labels are shifted by its region offset;
    /// deeper levels keep their local labels.
    pub fn merge(trees: &[LabelTree]) -> Result<LabelTree, HierarchyError> {
        let first = trees.first().ok_or(HierarchyError::EmptyInput)?;
        for t in trees {
            if t.branching != first.branching {
                return Err(HierarchyError::IncompatibleTrees(format!(
                    "branching {:?} vs {:?}",
                    t.branching, first.branching
                )));
            }
        }
        let depth = first.depth();
        let mut levels: Vec<Vec<TreeNode>> = vec![Vec::new(); depth];
        let mut region_offsets = Vec::new();
        for t in trees {
            let shifts: Vec<usize> = levels.iter().map(|l| l.len()).collect();
            let base = shifts[0];
            region_offsets.extend(t.region_offsets.iter().map(|o| o + base));
            for (level, nodes) in t.levels.iter().enumerate() {
                for n in nodes {
                    let mut n = n.clone();
                    if level == 0 {
                        n.label += base;
                    } else {
                        n.parent = n.parent.map(|p| p + shifts[level - 1]);
                    }
                    if level + 1 < depth {
                        for c in &mut n.children {
                            *c += shifts[level + 1];
                        }
                    }
                    levels[level].push(n);
                }
            }
        }
        Ok(LabelTree { branching: first.branching.clone(), levels, region_offsets })
    }

    pub fn to_json(&self) -> Result<String, HierarchyError> {
        Ok(serde_json::to_string_pretty(&TreeFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, HierarchyError> {
        let file: TreeFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HierarchyError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HierarchyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `y - leaf center`, where the leaf is the one `assign` picks for `y`.
pub fn regression_target(tree: &LabelTree, y: &SceneCoordinate) -> Vector3<f64> {
    let (_, leaf) = tree.assign_with_leaf(y);
    y - tree.leaves()[leaf].center
}

/// Leaf center plus offset. A zero offset gives the classification-only
/// prediction.
pub fn reconstruct(tree: &LabelTree, path: &LabelPath, offset: &Vector3<f64>) -> Result<SceneCoordinate, HierarchyError> {
    Ok(tree.leaf_center(path)? + offset)
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    levels: usize,
    branching: Vec<usize>,
    region_offsets: Vec<usize>,
    nodes: Vec<LevelFile>,
}

#[derive(Serialize, Deserialize)]
struct LevelFile {
    /// Flat x, y, z triplets in meters.
    centers: Vec<f64>,
    /// Parent node index at the previous level, -1 at level 0.
    parents: Vec<i64>,
    labels: Vec<usize>,
    counts: Vec<usize>,
    radii: Vec<f64>,
}

impl From<&LabelTree> for TreeFile {
    fn from(t: &LabelTree) -> Self {
        TreeFile {
            levels: t.depth(),
            branching: t.branching.clone(),
            region_offsets: t.region_offsets.clone(),
            nodes: t
                .levels
                .iter()
                .map(|nodes| LevelFile {
                    centers: nodes.iter().flat_map(|n| n.center.iter().copied().collect::<Vec<_>>()).collect(),
                    parents: nodes.iter().map(|n| n.parent.map_or(-1, |p| p as i64)).collect(),
                    labels: nodes.iter().map(|n| n.label).collect(),
                    counts: nodes.iter().map(|n| n.count).collect(),
                    radii: nodes.iter().map(|n| n.radius).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<TreeFile> for LabelTree {
    type Error = HierarchyError;

    fn try_from(f: TreeFile) -> Result<Self, Self::Error> {
        let bad = |m: String| HierarchyError::Format(m);
        if f.levels != f.branching.len() || f.levels != f.nodes.len() || f.levels == 0 {
            return Err(bad("level count does not match branching/nodes".into()));
        }
        let mut levels: Vec<Vec<TreeNode>> = Vec::with_capacity(f.levels);
        for (level, lf) in f.nodes.into_iter().enumerate() {
            let n = lf.labels.len();
            if lf.centers.len() != 3 * n || lf.parents.len() != n || lf.counts.len() != n || lf.radii.len() != n {
                return Err(bad(format!("inconsistent array lengths at level {level}")));
            }
            let mut nodes = Vec::with_capacity(n);
            for i in 0..n {
                let parent = match (level, lf.parents[i]) {
                    (0, -1) => None,
                    (0, p) => return Err(bad(format!("level-0 node {i} has parent {p}"))),
                    (_, p) if p < 0 || p as usize >= levels[level - 1].len() => {
                        return Err(bad(format!("node {i} at level {level} has invalid parent {p}")))
                    }
                    (_, p) => Some(p as usize),
                };
                if let Some(p) = parent {
                    let siblings: &mut Vec<usize> = &mut levels[level - 1][p].children;
                    if lf.labels[i] != siblings.len() {
                        return Err(bad(format!("node {i} at level {level}: labels must be contiguous per parent")));
                    }
                    siblings.push(i);
                } else if lf.labels[i] != i {
                    return Err(bad(format!("level-0 node {i} has label {}", lf.labels[i])));
                }
                nodes.push(TreeNode {
                    center: Vector3::new(lf.centers[3 * i], lf.centers[3 * i + 1], lf.centers[3 * i + 2]),
                    parent,
                    label: lf.labels[i],
                    children: Vec::new(),
                    count: lf.counts[i],
                    radius: lf.radii[i],
                });
            }
            levels.push(nodes);
        }
        Ok(LabelTree { branching: f.branching, levels, region_offsets: f.region_offsets })
    }
}

/// Reads an ASCII PLY (`x y z [...]` vertex properties) or a plain
/// whitespace-separated xyz file, one point per line.
pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<Vector3<f64>>, HierarchyError> {
    parse_points(&std::fs::read_to_string(path)?)
}

pub fn parse_points(text: &str) -> Result<Vec<Vector3<f64>>, HierarchyError> {
    let bad = |m: String| HierarchyError::PointFormat(m);
    let mut lines = text.lines();
    let mut vertex_count = None;
    let mut body: Vec<&str> = Vec::new();
    if text.starts_with("ply") {
        for line in lines.by_ref() {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => return Err(bad(format!("unsupported PLY format {fmt}"))),
                ["element", "vertex", n] => {
                    vertex_count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?)
                }
                ["end_header"] => break,
                _ => {}
            }
        }
        let n = vertex_count.ok_or_else(|| bad("PLY header lacks a vertex element".into()))?;
        body.extend(lines.by_ref().take(n));
        if body.len() != n {
            return Err(bad(format!("expected {n} vertices, found {}", body.len())));
        }
    } else {
        body.extend(lines.filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#')));
    }
    body.iter()
        .enumerate()
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split_whitespace()
                .take(3)
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
            if v.len() < 3 {
                return Err(bad(format!("line {}: expected x y z", i + 1)));
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        })
        .collect()
}
