//! Point clouds and their k-nearest-neighbour graphs.
//!
//! Neighbour search uses a small kd-tree. Directed KNN edges carry
//! inverse-distance weights; the adjacency used downstream is the
//! symmetrised `max(A, A^T)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// A set of `n` distinct points in `dim` dimensions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates do not split into {dim}-dimensional points",
                coords.len()
            )));
        }
        if coords.len() / dim < 2 {
            return Err(Error::DegenerateGeometry("fewer than two points".into()));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::DegenerateGeometry(format!(
                "point {} has a non-finite coordinate",
                i / dim
            )));
        }
        Ok(PointCloud { dim, coords })
    }

    pub fn from_points_2d(points: &[[f64; 2]]) -> Result<Self> {
        PointCloud::new(2, points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dist2(&self, a: usize, b: usize) -> f64 {
        self.point(a)
            .iter()
            .zip(self.point(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }

    /// Points reordered so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        let coords = perm.iter().flat_map(|&p| self.point(p).to_vec()).collect();
        PointCloud {
            dim: self.dim,
            coords,
        }
    }
}

/// Weighted undirected graph over a point cloud.
#[derive(Clone, Debug)]
pub struct Graph {
    points: PointCloud,
    k_neighbors: usize,
    knn_edges: Vec<(usize, usize, f64)>,
    adjacency: CsrMatrix,
}

impl Graph {
    /// Graph from explicit weighted edges, symmetrised with `max`. Used for
    /// hand-built graphs; `k_neighbors` is reported as 0.
    pub fn from_weighted_edges(points: PointCloud, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = points.len();
        for &(u, v, w) in edges {
            if u >= n || v >= n || u == v {
                return Err(Error::ShapeMismatch(format!("edge ({u},{v}) invalid for n={n}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::DegenerateGeometry(format!(
                    "edge ({u},{v}) has weight {w}"
                )));
            }
        }
        let adjacency = symmetrize(n, edges)?;
        Ok(Graph {
            points,
            k_neighbors: 0,
            knn_edges: edges.to_vec(),
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    pub fn k_neighbors(&self) -> usize {
        self.k_neighbors
    }

    /// Directed KNN edges `(u, v, 1/dist)` before symmetrisation.
    pub fn knn_edges(&self) -> &[(usize, usize, f64)] {
        &self.knn_edges
    }

    /// Symmetrised adjacency `A`.
    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    /// Sorted neighbour lists of the directed KNN relation.
    pub fn knn_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n()];
        for &(u, v, _) in &self.knn_edges {
            out[u].push(v);
        }
        out
    }

    /// Connected component label per node and the component count.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = count;
            let mut stack = vec![s];
            while let Some(u) = stack.pop() {
                for &v in self.adjacency.row(u).0 {
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn is_connected(&self) -> bool {
        self.components().1 == 1
    }
}

fn symmetrize(n: usize, edges: &[(usize, usize, f64)]) -> Result<CsrMatrix> {
    let mut both: Vec<(usize, usize, f64)> = edges
        .iter()
        .flat_map(|&(u, v, w)| [(u, v, w), (v, u, w)])
        .collect();
    both.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(b.2.total_cmp(&a.2)));
    // first of each (u, v) run is the max weight
    both.dedup_by(|later, earlier| later.0 == earlier.0 && later.1 == earlier.1);
    CsrMatrix::from_triplets(n, n, &both)
}

/// Builds the KNN graph with inverse-distance weights. Ties in distance are
/// broken by the lower node index.
pub fn build_knn_graph(points: &PointCloud, k: usize) -> Result<Graph> {
    let n = points.len();
    if k < 1 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    let tree = KdTree::build(points);
    let mut knn_edges = Vec::with_capacity(n * k);
    for u in 0..n {
        let nbrs = tree.nearest(points, u, k);
        if let Some(&(d2, v)) = nbrs.first() {
            if d2 == 0.0 {
                return Err(Error::DegenerateGeometry(format!(
                    "points {u} and {v} coincide"
                )));
            }
        }
        for (d2, v) in nbrs {
            knn_edges.push((u, v, 1.0 / d2.sqrt()));
        }
    }
    let adjacency = symmetrize(n, &knn_edges)?;
    Ok(Graph {
        points: points.clone(),
        k_neighbors: k,
        knn_edges,
        adjacency,
    })
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const LEAF_SIZE: usize = 8;

enum KdNode {
    Leaf(Vec<usize>),
    Split {
        axis: usize,
        value: f64,
        left: Box<KdNode>,
        right: Box<KdNode>,
    },
}

struct KdTree {
    root: KdNode,
}

impl KdTree {
    fn build(points: &PointCloud) -> Self {
        let idx: Vec<usize> = (0..points.len()).collect();
        KdTree {
            root: Self::build_node(points, idx),
        }
    }

    fn build_node(points: &PointCloud, mut idx: Vec<usize>) -> KdNode {
        if idx.len() <= LEAF_SIZE {
            return KdNode::Leaf(idx);
        }
        // widest axis
        let axis = (0..points.dim())
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        let c = points.point(i)[ax];
                        (lo.min(c), hi.max(c))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap_or(0);
        idx.sort_by(|&a, &b| points.point(a)[axis].total_cmp(&points.point(b)[axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let value = points.point(idx[mid])[axis];
        let right = idx.split_off(mid);
        KdNode::Split {
            axis,
            value,
            left: Box::new(Self::build_node(points, idx)),
            right: Box::new(Self::build_node(points, right)),
        }
    }

    /// `k` nearest other points of `query`, as `(dist^2, index)` ascending.
    fn nearest(&self, points: &PointCloud, query: usize, k: usize) -> Vec<(f64, usize)> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        Self::search(&self.root, points, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.d2, c.idx)).collect()
    }

    fn search(
        node: &KdNode,
        points: &PointCloud,
        query: usize,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match node {
            KdNode::Leaf(idx) => {
                for &i in idx {
                    if i == query {
                        continue;
                    }
                    let cand = Candidate {
                        d2: points.dist2(query, i),
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = points.point(query)[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                Self::search(near, points, query, k, heap);
                let worst = heap.peek().map_or(f64::INFINITY, |c| c.d2);
                // `<=` keeps equal-distance candidates reachable for tie-breaking
                if heap.len() < k || diff * diff <= worst {
                    Self::search(far, points, query, k, heap);
                }
            }
        }
    }
}
