//! A k-d tree over weighted unique points supporting tie-aware k-nearest
//! queries.
//!
//! Exactly coincident points are merged at build time into one stored point
//! with summed weight, and queries count distinct distance *values* rather
//! than samples. This makes every derived quantity invariant under
//! duplicating the whole sample set, which is the contract the density
//! estimator relies on; for continuous data (almost surely distinct
//! distances) it coincides with the ordinary k-th-neighbor query.

use std::collections::BTreeMap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Result of a distinct-distance k-nearest query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinctKnn {
    /// The k-th smallest distinct distance (or largest available when fewer
    /// than k distinct values exist).
    pub radius: f64,
    /// Total weight of stored points at distance ≤ `radius`.
    pub weight_within: u64,
    /// Number of distinct distance values found (≤ k).
    pub distinct_found: usize,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dims: usize,
    /// Unique points, flattened, permuted during build.
    coords: Vec<f64>,
    weights: Vec<u64>,
    total_weight: u64,
    nodes: Vec<Node>,
    root: usize,
}

impl KdTree {
    /// Builds a tree from `points` (flattened, `dims` values per point),
    /// each with weight 1. Coincident points are merged.
    pub fn build(dims: usize, points: &[f64]) -> KdTree {
        let n = points.len() / dims;
        KdTree::build_weighted(dims, points, &vec![1u64; n])
    }

    /// Builds a tree from weighted points. All coordinates must be finite.
    pub fn build_weighted(dims: usize, points: &[f64], weights: &[u64]) -> KdTree {
        assert!(dims > 0, "dims must be positive");
        assert_eq!(points.len() % dims, 0, "flat point array length mismatch");
        let n = points.len() / dims;
        assert_eq!(weights.len(), n);
        assert!(
            points.iter().all(|v| v.is_finite()),
            "points must be finite"
        );

        // deterministic dedup: lexicographic sort, then merge equal runs
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let pa = &points[a * dims..(a + 1) * dims];
            let pb = &points[b * dims..(b + 1) * dims];
            pa.partial_cmp(pb).expect("finite coordinates")
        });
        let mut coords: Vec<f64> = Vec::new();
        let mut merged: Vec<u64> = Vec::new();
        for &idx in &order {
            let p = &points[idx * dims..(idx + 1) * dims];
            let same_as_last = merged
                .last()
                .is_some_and(|_| &coords[coords.len() - dims..] == p);
            if same_as_last {
                *merged.last_mut().unwrap() += weights[idx];
            } else {
                coords.extend_from_slice(p);
                merged.push(weights[idx]);
            }
        }
        let total_weight = merged.iter().sum();

        let unique = merged.len();
        let mut tree = KdTree {
            dims,
            coords,
            weights: merged,
            total_weight,
            nodes: Vec::new(),
            root: 0,
        };
        if unique > 0 {
            let mut index: Vec<usize> = (0..unique).collect();
            tree.root = tree.build_node(&mut index, 0, unique);
            // apply the final permutation so leaves hold contiguous ranges
            let mut new_coords = Vec::with_capacity(tree.coords.len());
            let mut new_weights = Vec::with_capacity(unique);
            for &i in &index {
                new_coords.extend_from_slice(&tree.coords[i * dims..(i + 1) * dims]);
                new_weights.push(tree.weights[i]);
            }
            tree.coords = new_coords;
            tree.weights = new_weights;
        }
        tree
    }

    fn build_node(&mut self, index: &mut [usize], offset: usize, len: usize) -> usize {
        debug_assert_eq!(index.len(), len);
        // widest-spread dimension; a zero spread means all points coincide
        let mut split_dim = 0usize;
        let mut best_spread = -1.0f64;
        for d in 0..self.dims {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in index.iter() {
                let v = self.coords[i * self.dims + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let spread = hi - lo;
            if spread > best_spread {
                best_spread = spread;
                split_dim = d;
            }
        }
        if len <= LEAF_SIZE || best_spread <= 0.0 {
            self.nodes.push(Node::Leaf { start: offset, end: offset + len });
            return self.nodes.len() - 1;
        }

        let mid = len / 2;
        let dims = self.dims;
        let coords = &self.coords;
        index.select_nth_unstable_by(mid, |&a, &b| {
            coords[a * dims + split_dim]
                .partial_cmp(&coords[b * dims + split_dim])
                .expect("finite coordinates")
        });
        let split_value = self.coords[index[mid] * dims + split_dim];

        let (left_slice, right_slice) = index.split_at_mut(mid);
        let left = self.build_node(left_slice, offset, mid);
        let right = self.build_node(right_slice, offset + mid, len - mid);
        self.nodes.push(Node::Split { dim: split_dim, value: split_value, left, right });
        self.nodes.len() - 1
    }

    pub fn total_weight(&self) -> u64 {
        self.total_weight
    }

    pub fn unique_points(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn dist_sq(&self, i: usize, query: &[f64]) -> f64 {
        let start = i * self.dims;
        query
            .iter()
            .zip(&self.coords[start..start + self.dims])
            .map(|(q, p)| (p - q) * (p - q))
            .sum()
    }

    /// Finds the k smallest distinct distance values from `query` to stored
    /// points, with the total weight at distance ≤ the k-th value.
    pub fn query_distinct(&self, query: &[f64], k: usize) -> Option<DistinctKnn> {
        assert_eq!(query.len(), self.dims);
        assert!(k >= 1, "k must be at least 1");
        if self.is_empty() {
            return None;
        }
        // keys are bit patterns of squared distances (monotone for d² ≥ 0)
        let mut found: BTreeMap<u64, u64> = BTreeMap::new();
        self.search(self.root, query, k, &mut found);
        let &max_key = found.keys().next_back().expect("non-empty tree");
        Some(DistinctKnn {
            radius: f64::from_bits(max_key).sqrt(),
            weight_within: found.values().sum(),
            distinct_found: found.len(),
        })
    }

    fn search(&self, node: usize, query: &[f64], k: usize, found: &mut BTreeMap<u64, u64>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in *start..*end {
                    let key = self.dist_sq(i, query).to_bits();
                    let w = self.weights[i];
                    if let Some(slot) = found.get_mut(&key) {
                        *slot += w;
                    } else if found.len() < k {
                        found.insert(key, w);
                    } else {
                        let &max_key = found.keys().next_back().unwrap();
                        if key < max_key {
                            found.insert(key, w);
                            found.remove(&max_key);
                        }
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[*dim] - value;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, query, k, found);
                let plane_sq = diff * diff;
                let must_visit = if found.len() < k {
                    true
                } else {
                    let &max_key = found.keys().next_back().unwrap();
                    plane_sq <= f64::from_bits(max_key)
                };
                if must_visit {
                    self.search(far, query, k, found);
                }
            }
        }
    }

    /// Smallest positive distance between any two stored points (duplicate
    /// samples collapse to one point, so this is the smallest resolvable
    /// scale). `None` when fewer than two distinct locations exist.
    pub fn min_positive_pair_distance(&self) -> Option<f64> {
        if self.unique_points() < 2 {
            return None;
        }
        let mut best = f64::INFINITY;
        for i in 0..self.unique_points() {
            let q: Vec<f64> = self.coords[i * self.dims..(i + 1) * self.dims].to_vec();
            if let Some(knn) = self.query_distinct(&q, 2) {
                if knn.distinct_found == 2 && knn.radius > 0.0 {
                    best = best.min(knn.radius);
                }
            }
        }
        best.is_finite().then_some(best)
    }
}
