use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact kd-tree over 2D or 3D points.
///
/// Point slots are reordered internally; every query reports original indices.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<[f64; 3]>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

/// Result of a k-nearest-neighbour query.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    /// Original indices sorted by ascending distance, ties by lower index.
    pub indices: Vec<usize>,
    pub dist2: Vec<f64>,
    /// `true` when more neighbours were requested than the tree holds.
    pub truncated: bool,
}

#[inline]
fn dist2(dim: usize, a: &[f64; 3], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..dim {
        let d = a[c] - b[c];
        s += d * d;
    }
    s
}

/// Squared Euclidean distance on the first `dim` coordinates, summed in axis
/// order (the same arithmetic the tree uses, so oracles compare bit-exactly).
pub fn squared_distance(dim: usize, a: &[f64; 3], b: &[f64]) -> f64 {
    dist2(dim, a, b)
}

impl KdTree {
    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::build(coords.to_vec(), 3)
    }

    pub fn from_xy(coords: &[[f64; 2]]) -> Result<Self> {
        Self::build(coords.iter().map(|p| [p[0], p[1], 0.0]).collect(), 2)
    }

    /// Builds over `points`, using only the first `dim` coordinates.
    pub fn build(points: Vec<[f64; 3]>, dim: usize) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::invalid(format!(
                "kd-tree dimension {dim} not in {{2, 3}}"
            )));
        }
        if points.is_empty() {
            return Err(Error::Empty("kd-tree needs at least one point".into()));
        }
        if let Some(i) = points
            .iter()
            .position(|p| p[..dim].iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                what: "kd-tree coordinate".into(),
                index: i,
            });
        }
        let n = points.len();
        let mut tree = KdTree {
            dim,
            points,
            ids: (0..n).collect(),
            nodes: Vec::new(),
        };
        tree.split(0, n);
        let (points, ids) = tree.ids.iter().map(|&i| (tree.points[i], i)).unzip();
        tree.points = points;
        tree.ids = ids;
        Ok(tree)
    }

    // Recursively partitions ids[start..end]; points stay in input order until
    // the final gather in `build`.
    fn split(&mut self, start: usize, end: usize) -> usize {
        let at = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return at;
        }
        let axis = (0..self.dim)
            .map(|a| {
                let (lo, hi) = self.ids[start..end]
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(self.points[i][a]), hi.max(self.points[i][a]))
                    });
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0;
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.ids[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.ids[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[at] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        at
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Exact `k` nearest neighbours of `query` (only the first `dim` entries are read).
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Knn> {
        if k == 0 {
            return Err(Error::invalid("knn: k must be at least 1"));
        }
        if query.len() < self.dim {
            return Err(Error::invalid(format!(
                "knn: query has {} coordinates, tree has {}",
                query.len(),
                self.dim
            )));
        }
        let kk = k.min(self.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(kk + 1);
        self.search(0, query, kk, &mut best);
        let (dist2, indices) = best.into_iter().unzip();
        Ok(Knn {
            indices,
            dist2,
            truncated: k > self.len(),
        })
    }

    pub fn nearest(&self, query: &[f64]) -> usize {
        let mut best = Vec::with_capacity(2);
        self.search(0, query, 1, &mut best);
        best[0].1
    }

    fn search(&self, node: usize, q: &[f64], kk: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let key = (dist2(self.dim, &self.points[slot], q), self.ids[slot]);
                    let full = best.len() == kk;
                    if full && !lex_less(key, best[kk - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|&b| lex_less(b, key));
                    best.insert(pos, key);
                    if best.len() > kk {
                        best.pop();
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, kk, best);
                if best.len() < kk || diff * diff <= best[kk - 1].0 {
                    self.search(far, q, kk, best);
                }
            }
        }
    }

    /// Flat `[queries.len(), min(k, len)]` neighbour table plus its row width.
    pub fn knn_table(&self, queries: &[[f64; 3]], k: usize) -> Result<(Vec<usize>, usize)> {
        let kk = k.min(self.len());
        let mut table = Vec::with_capacity(queries.len() * kk);
        for q in queries {
            table.extend(self.knn(q, k)?.indices);
        }
        Ok((table, kk))
    }
}

#[inline]
fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}
