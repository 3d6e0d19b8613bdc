//! Exact k-nearest-neighbour mean distances over 2-D points.

use rayon::prelude::*;

use crate::ingest::Point;

const LEAF_SIZE: usize = 8;

/// Mean distance from one point to its nearest other points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnMean {
    /// Arithmetic mean of the neighbour distances; `0.0` when `neighbors == 0`.
    pub distance: f64,
    /// Neighbours actually used: `min(k, n - 1)`.
    pub neighbors: usize,
}

impl KnnMean {
    /// No other point exists, so there is no geometry to adapt to.
    pub fn is_isolated(&self) -> bool {
        self.neighbors == 0
    }
}

/// Implicit 2-D kd-tree: a permutation of point indices where every internal
/// segment is split at its median along the axis of its depth.
pub struct KdTree<'a> {
    points: &'a [Point],
    perm: Vec<usize>,
}

#[inline]
fn coord(p: &Point, axis: usize) -> f64 {
    if axis == 0 {
        p.x
    } else {
        p.y
    }
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    dx * dx + dy * dy
}

/// Sorted buffer of the `k` smallest squared distances seen so far.
struct Best {
    k: usize,
    d2: Vec<f64>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            d2: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.d2.len() == self.k
    }

    fn worst(&self) -> f64 {
        *self.d2.last().unwrap_or(&f64::INFINITY)
    }

    fn offer(&mut self, d2: f64) {
        if self.full() && d2 >= self.worst() {
            return;
        }
        let pos = self.d2.partition_point(|&v| v <= d2);
        self.d2.insert(pos, d2);
        self.d2.truncate(self.k);
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        Self::build_rec(points, &mut perm, 0);
        Self { points, perm }
    }

    fn build_rec(points: &[Point], seg: &mut [usize], depth: usize) {
        if seg.len() <= LEAF_SIZE {
            return;
        }
        let axis = depth % 2;
        let mid = seg.len() / 2;
        seg.select_nth_unstable_by(mid, |&a, &b| {
            coord(&points[a], axis).total_cmp(&coord(&points[b], axis))
        });
        let (lo, rest) = seg.split_at_mut(mid);
        Self::build_rec(points, lo, depth + 1);
        Self::build_rec(points, &mut rest[1..], depth + 1);
    }

    /// Squared distances to the `k` nearest points other than `points[query]`,
    /// ascending.
    pub fn nearest_others(&self, query: usize, k: usize) -> Vec<f64> {
        let mut best = Best::new(k);
        if k > 0 {
            self.search(0, self.perm.len(), 0, query, &mut best);
        }
        best.d2
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, query: usize, best: &mut Best) {
        let q = &self.points[query];
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                if i != query {
                    best.offer(dist2(q, &self.points[i]));
                }
            }
            return;
        }
        let axis = depth % 2;
        let mid = lo + (hi - lo) / 2;
        let pivot_idx = self.perm[mid];
        let pivot = &self.points[pivot_idx];
        if pivot_idx != query {
            best.offer(dist2(q, pivot));
        }
        let diff = coord(q, axis) - coord(pivot, axis);
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, query, best);
        if !best.full() || diff * diff <= best.worst() {
            self.search(far.0, far.1, depth + 1, query, best);
        }
    }
}

/// For every point, the mean Euclidean distance to its `k` nearest other
/// points (fewer when the set is small). Coincident points count as
/// neighbours at distance zero. A lone point gets distance `0.0` and
/// `neighbors == 0`; callers substitute their own fallback.
///
/// # Panics
///
/// If `k == 0`.
pub fn knn_mean_distance(points: &[Point], k: usize) -> Vec<KnnMean> {
    assert!(k >= 1, "knn_mean_distance needs k >= 1");
    let n = points.len();
    let m = k.min(n.saturating_sub(1));
    if m == 0 {
        return vec![
            KnnMean {
                distance: 0.0,
                neighbors: 0
            };
            n
        ];
    }
    let tree = KdTree::build(points);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let d2 = tree.nearest_others(i, m);
            debug_assert_eq!(d2.len(), m);
            let total: f64 = d2.iter().map(|v| v.sqrt()).sum();
            KnnMean {
                distance: total / m as f64,
                neighbors: m,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn three_four_five() {
        let r = knn_mean_distance(&pts(&[(0.0, 0.0), (3.0, 4.0)]), 1);
        assert_eq!(r.iter().map(|m| m.distance).collect::<Vec<_>>(), vec![5.0, 5.0]);
    }

    #[test]
    fn right_triangle_k2() {
        let r = knn_mean_distance(&pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]), 2);
        let expect = (1.0 + 2f64.sqrt()) / 2.0;
        assert_eq!(r[0].distance, 1.0);
        assert!((r[1].distance - expect).abs() < 1e-15);
        assert!((r[2].distance - expect).abs() < 1e-15);
        assert!((expect - 1.2071067811865475).abs() < 1e-15);
    }

    #[test]
    fn fewer_than_k_uses_all_others() {
        let r = knn_mean_distance(&pts(&[(0.0, 0.0), (3.0, 4.0)]), 5);
        assert_eq!(
            r[0],
            KnnMean {
                distance: 5.0,
                neighbors: 1
            }
        );
    }

    #[test]
    fn single_and_empty() {
        let r = knn_mean_distance(&pts(&[(2.0, 2.0)]), 3);
        assert!(r[0].is_isolated());
        assert!(knn_mean_distance(&[], 3).is_empty());
    }

    #[test]
    fn coincident_points_are_neighbours() {
        let r = knn_mean_distance(&pts(&[(1.0, 1.0), (1.0, 1.0), (9.0, 1.0)]), 1);
        assert_eq!(r[0].distance, 0.0);
        assert_eq!(r[1].distance, 0.0);
        assert_eq!(r[2].distance, 8.0);
    }

    #[test]
    fn large_set_leaves_and_splits() {
        // grid exercises many equal coordinates along both axes
        let mut v = Vec::new();
        for i in 0..40 {
            for j in 0..30 {
                v.push(Point::new(i as f64, j as f64 * 2.0));
            }
        }
        let r = knn_mean_distance(&v, 4);
        // interior grid point: neighbours at 1, 1, 2, 2
        let interior = 10 * 30 + 10;
        assert_eq!(r[interior].distance, 1.5);
    }
}
