//! The latent mapper: a bijection between unlabeled sample ids and their
//! latent points, plus exact k-nearest-neighbor retrieval.
//!
//! Results are always identical to a full scan ordered by (squared L2
//! distance, id). The partitioned index only changes how many exact distances
//! are computed: points are projected onto the leading principal directions
//! and organized in a kd-tree whose boxes, together with the norm of the
//! residual outside the projection, give a lower bound on every distance.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderStack, LatentPoint};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    /// Plain scan over every live point.
    Flat,
    /// Projected kd-tree with exact lower-bound pruning.
    Partitioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    pub index: IndexKind,
    pub leaf_size: usize,
    /// Upper bound on the number of projected coordinates.
    pub max_projected_dims: usize,
    /// Smallest number of principal directions capturing this share of the
    /// variance is used (capped by `max_projected_dims`).
    pub captured_variance: f64,
    /// Points used to estimate the covariance.
    pub covariance_sample: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            index: IndexKind::Partitioned,
            leaf_size: 32,
            max_projected_dims: 16,
            captured_variance: 0.999,
            covariance_sample: 20_000,
        }
    }
}

/// Exact bit pattern of a vector quantized to `f32`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VecKey(Vec<u32>);

impl VecKey {
    pub fn of(values: &[f64]) -> Self {
        VecKey(values.iter().map(|v| (*v as f32).to_bits()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub dist2: f64,
}

impl Neighbor {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

/// Squared Euclidean distance, accumulated left to right.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let t = a[i] - b[i];
        s += t * t;
    }
    s
}

const LEAF: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Node {
    start: usize,
    end: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    rmin: f64,
    rmax: f64,
    left: u32,
    right: u32,
}

#[derive(Clone, Debug)]
struct ProjectedTree {
    mean: Vec<f64>,
    /// `r x dim` orthonormal rows.
    basis: Vec<f64>,
    r: usize,
    /// Slot-major projected coordinates.
    proj: Vec<f64>,
    resid: Vec<f64>,
    nodes: Vec<Node>,
    radius2: f64,
}

impl ProjectedTree {
    fn project(&self, x: &[f64], y: &mut [f64]) -> (f64, f64) {
        let d = self.mean.len();
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = crate::decoder::dot(&self.basis[k * d..(k + 1) * d], &centered);
        }
        let mut resid = centered.clone();
        for (k, yk) in y.iter().enumerate() {
            crate::decoder::axpy(-yk, &self.basis[k * d..(k + 1) * d], &mut resid);
        }
        let norm2: f64 = centered.iter().map(|v| v * v).sum();
        (resid.iter().map(|v| v * v).sum::<f64>().sqrt(), norm2)
    }

    fn node_bound(&self, node: &Node, y: &[f64], rho: f64) -> f64 {
        let mut s = 0.0;
        for j in 0..self.r {
            let v = y[j];
            let gap = if v < node.lo[j] {
                node.lo[j] - v
            } else if v > node.hi[j] {
                v - node.hi[j]
            } else {
                0.0
            };
            s += gap * gap;
        }
        let rg = if rho < node.rmin {
            node.rmin - rho
        } else if rho > node.rmax {
            rho - node.rmax
        } else {
            0.0
        };
        s + rg * rg
    }
}

#[derive(Clone, Debug)]
pub struct LatentMapper {
    version: u64,
    dim: usize,
    ids: Vec<u32>,
    vectors: Vec<f64>,
    alive: Vec<bool>,
    live: usize,
    forward: HashMap<u32, usize>,
    inverse: HashMap<VecKey, Vec<u32>>,
    tree: Option<ProjectedTree>,
    build_micros: u64,
}

/// Distances computed by the last query batch; used by cost accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub distance_evals: u64,
    pub nodes_visited: u64,
}

#[derive(PartialEq)]
struct Pending(f64, u32);

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap and we want the smallest bound.
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl LatentMapper {
    /// Encodes every id at the stack's current version and indexes it.
    pub fn build(stack: &EncoderStack<'_>, ids: &[u32], config: &MapperConfig) -> Result<Self> {
        let started = Instant::now();
        let dim = stack.dim();
        let mut vectors = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let p = stack.encode(id)?;
            vectors.extend_from_slice(&p.values);
        }
        let mut mapper = Self::from_vectors(stack.version(), dim, ids.to_vec(), vectors, config)?;
        mapper.build_micros = started.elapsed().as_micros() as u64;
        Ok(mapper)
    }

    /// Indexes precomputed latent vectors (row-major, one per id).
    pub fn from_vectors(
        version: u64,
        dim: usize,
        ids: Vec<u32>,
        vectors: Vec<f64>,
        config: &MapperConfig,
    ) -> Result<Self> {
        if vectors.len() != ids.len() * dim {
            return Err(Error::Shape {
                expected: ids.len() * dim,
                got: vectors.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent vector".into()));
        }
        let started = Instant::now();
        let (ids, vectors, tree) = match config.index {
            IndexKind::Partitioned if !ids.is_empty() => {
                let (tree, perm) = build_tree(dim, &vectors, config);
                let ids: Vec<u32> = perm.iter().map(|&p| ids[p]).collect();
                let mut sorted = Vec::with_capacity(vectors.len());
                for &p in &perm {
                    sorted.extend_from_slice(&vectors[p * dim..(p + 1) * dim]);
                }
                (ids, sorted, Some(tree))
            }
            _ => (ids, vectors, None),
        };
        let mut forward = HashMap::with_capacity(ids.len());
        let mut inverse: HashMap<VecKey, Vec<u32>> = HashMap::with_capacity(ids.len());
        for (slot, &id) in ids.iter().enumerate() {
            if forward.insert(id, slot).is_some() {
                return Err(Error::Invariant(format!("id {id} indexed twice")));
            }
            inverse
                .entry(VecKey::of(&vectors[slot * dim..(slot + 1) * dim]))
                .or_default()
                .push(id);
        }
        for v in inverse.values_mut() {
            v.sort_unstable();
        }
        let n = ids.len();
        Ok(LatentMapper {
            version,
            dim,
            ids,
            vectors,
            alive: vec![true; n],
            live: n,
            forward,
            inverse,
            tree,
            build_micros: started.elapsed().as_micros() as u64,
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn build_micros(&self) -> u64 {
        self.build_micros
    }

    /// Number of projected coordinates used by the partitioned index.
    pub fn projected_dims(&self) -> Option<usize> {
        self.tree.as_ref().map(|t| t.r)
    }

    pub fn is_fresh(&self, encoder_version: u64) -> bool {
        self.version == encoder_version
    }

    pub fn contains(&self, id: u32) -> bool {
        self.forward.contains_key(&id)
    }

    /// Live ids in ascending order.
    pub fn ids(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.forward.keys().copied().collect();
        out.sort_unstable();
        out
    }

    /// `M(s)`: the indexed latent point of a live id.
    pub fn get(&self, id: u32) -> Option<LatentPoint> {
        self.vector(id).map(|v| LatentPoint {
            version: self.version,
            values: v.to_vec(),
        })
    }

    pub fn vector(&self, id: u32) -> Option<&[f64]> {
        self.forward
            .get(&id)
            .map(|&s| &self.vectors[s * self.dim..(s + 1) * self.dim])
    }

    /// `M⁻¹(x)`: the live id whose latent point is exactly `x`. Exact
    /// duplicates resolve to the smallest id.
    pub fn inverse(&self, values: &[f64]) -> Option<u32> {
        self.inverse.get(&VecKey::of(values))?.iter().copied().find(|id| {
            self.vector(*id)
                .is_some_and(|v| v.iter().zip(values).all(|(a, b)| a == b))
        })
    }

    /// Drops ids from the mapper. Absent ids are ignored with a warning.
    pub fn remove(&mut self, ids: &[u32]) -> usize {
        let mut removed = 0;
        for &id in ids {
            match self.forward.remove(&id) {
                Some(slot) => {
                    self.alive[slot] = false;
                    self.live -= 1;
                    removed += 1;
                    let key = VecKey::of(&self.vectors[slot * self.dim..(slot + 1) * self.dim]);
                    if let Some(list) = self.inverse.get_mut(&key) {
                        list.retain(|&x| x != id);
                        if list.is_empty() {
                            self.inverse.remove(&key);
                        }
                    }
                }
                None => warn!("mapper remove: id {id} not present"),
            }
        }
        removed
    }

    /// The `k` nearest live ids of every query, by (distance, id).
    pub fn query_knn(
        &self,
        encoder_version: u64,
        queries: &[&[f64]],
        k: usize,
    ) -> Result<Vec<Vec<u32>>> {
        Ok(self
            .query_knn_with_distances(encoder_version, queries, k)?
            .0
            .into_iter()
            .map(|ns| ns.into_iter().map(|n| n.id).collect())
            .collect())
    }

    pub fn query_knn_with_distances(
        &self,
        encoder_version: u64,
        queries: &[&[f64]],
        k: usize,
    ) -> Result<(Vec<Vec<Neighbor>>, QueryStats)> {
        if !self.is_fresh(encoder_version) {
            return Err(Error::Stale {
                built: self.version,
                current: encoder_version,
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut stats = QueryStats::default();
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            if q.len() != self.dim {
                return Err(Error::Shape {
                    expected: self.dim,
                    got: q.len(),
                });
            }
            let k = k.min(self.live);
            let found = if k == 0 {
                Vec::new()
            } else {
                match &self.tree {
                    Some(tree) => self.search_tree(tree, q, k, &mut stats),
                    None => self.search_flat(q, k, &mut stats),
                }
            };
            out.push(found);
        }
        Ok((out, stats))
    }

    fn offer(heap: &mut BinaryHeap<Neighbor>, k: usize, n: Neighbor) {
        if heap.len() < k {
            heap.push(n);
        } else if n < *heap.peek().unwrap() {
            heap.pop();
            heap.push(n);
        }
    }

    fn search_flat(&self, q: &[f64], k: usize, stats: &mut QueryStats) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for (slot, &id) in self.ids.iter().enumerate() {
            if !self.alive[slot] {
                continue;
            }
            let d2 = squared_distance(q, &self.vectors[slot * self.dim..(slot + 1) * self.dim]);
            stats.distance_evals += 1;
            Self::offer(&mut heap, k, Neighbor { id, dist2: d2 });
        }
        heap.into_sorted_vec()
    }

    fn search_tree(
        &self,
        tree: &ProjectedTree,
        q: &[f64],
        k: usize,
        stats: &mut QueryStats,
    ) -> Vec<Neighbor> {
        let d = self.dim;
        let r = tree.r;
        let mut y = vec![0.0; r];
        let (rho, qnorm2) = tree.project(q, &mut y);
        // Covers rounding in the projected bounds.
        let slack = 1e-9 * (qnorm2 + tree.radius2) + 1e-300;
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut pending = BinaryHeap::new();
        pending.push(Pending(tree.node_bound(&tree.nodes[0], &y, rho), 0));
        while let Some(Pending(bound, ni)) = pending.pop() {
            if heap.len() == k && bound - slack > heap.peek().map_or(f64::INFINITY, |n: &Neighbor| n.dist2) {
                break;
            }
            stats.nodes_visited += 1;
            let node = &tree.nodes[ni as usize];
            if node.left == LEAF {
                for slot in node.start..node.end {
                    if !self.alive[slot] {
                        continue;
                    }
                    if heap.len() == k {
                        let yp = &tree.proj[slot * r..(slot + 1) * r];
                        let mut lb = squared_distance(&y, yp);
                        let rg = rho - tree.resid[slot];
                        lb += rg * rg;
                        if lb - slack > heap.peek().unwrap().dist2 {
                            continue;
                        }
                    }
                    let d2 = squared_distance(q, &self.vectors[slot * d..(slot + 1) * d]);
                    stats.distance_evals += 1;
                    Self::offer(
                        &mut heap,
                        k,
                        Neighbor {
                            id: self.ids[slot],
                            dist2: d2,
                        },
                    );
                }
            } else {
                for child in [node.left, node.right] {
                    let b = tree.node_bound(&tree.nodes[child as usize], &y, rho);
                    pending.push(Pending(b, child));
                }
            }
        }
        heap.into_sorted_vec()
    }
}

fn build_tree(dim: usize, vectors: &[f64], config: &MapperConfig) -> (ProjectedTree, Vec<usize>) {
    let n = vectors.len() / dim;
    let mut mean = vec![0.0; dim];
    for x in vectors.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let stride = (n / config.covariance_sample.max(1)).max(1);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut used = 0usize;
    let mut centered = vec![0.0; dim];
    for x in vectors.chunks_exact(dim).step_by(stride) {
        for j in 0..dim {
            centered[j] = x[j] - mean[j];
        }
        for a in 0..dim {
            let ca = centered[a];
            for b in a..dim {
                cov[(a, b)] += ca * centered[b];
            }
        }
        used += 1;
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / used as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let cap = config.max_projected_dims.clamp(1, dim);
    let mut r = cap;
    if total > 0.0 {
        let mut acc = 0.0;
        for (i, &o) in order.iter().enumerate().take(cap) {
            acc += eig.eigenvalues[o].max(0.0);
            if acc >= config.captured_variance * total {
                r = i + 1;
                break;
            }
        }
    } else {
        r = 1;
    }
    let mut basis = Vec::with_capacity(r * dim);
    for &o in order.iter().take(r) {
        basis.extend(eig.eigenvectors.column(o).iter());
    }
    let mut tree = ProjectedTree {
        mean,
        basis,
        r,
        proj: vec![0.0; n * r],
        resid: vec![0.0; n],
        nodes: Vec::new(),
        radius2: 0.0,
    };
    for (i, x) in vectors.chunks_exact(dim).enumerate() {
        let mut y = vec![0.0; r];
        let (rho, norm2) = tree.project(x, &mut y);
        tree.proj[i * r..(i + 1) * r].copy_from_slice(&y);
        tree.resid[i] = rho;
        tree.radius2 = tree.radius2.max(norm2);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    split(&mut tree, &mut perm, 0, n, config.leaf_size.max(1));
    // Reorder per-slot arrays to leaf order.
    let proj: Vec<f64> = perm
        .iter()
        .flat_map(|&p| tree.proj[p * r..(p + 1) * r].to_vec())
        .collect();
    let resid: Vec<f64> = perm.iter().map(|&p| tree.resid[p]).collect();
    tree.proj = proj;
    tree.resid = resid;
    (tree, perm)
}

fn split(tree: &mut ProjectedTree, perm: &mut [usize], start: usize, end: usize, leaf: usize) -> u32 {
    let r = tree.r;
    let mut lo = vec![f64::INFINITY; r];
    let mut hi = vec![f64::NEG_INFINITY; r];
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &p in &perm[start..end] {
        let y = &tree.proj[p * r..(p + 1) * r];
        for j in 0..r {
            lo[j] = lo[j].min(y[j]);
            hi[j] = hi[j].max(y[j]);
        }
        rmin = rmin.min(tree.resid[p]);
        rmax = rmax.max(tree.resid[p]);
    }
    let id = tree.nodes.len() as u32;
    let axis = (0..r)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let spread = hi[axis] - lo[axis];
    tree.nodes.push(Node {
        start,
        end,
        lo,
        hi,
        rmin,
        rmax,
        left: LEAF,
        right: LEAF,
    });
    if end - start <= leaf || spread <= 0.0 {
        return id;
    }
    let mid = start + (end - start) / 2;
    {
        let proj = &tree.proj;
        perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            proj[a * r + axis]
                .total_cmp(&proj[b * r + axis])
                .then(a.cmp(&b))
        });
    }
    let left = split(tree, perm, start, mid, leaf);
    let right = split(tree, perm, mid, end, leaf);
    let node = &mut tree.nodes[id as usize];
    node.left = left;
    node.right = right;
    id
}
