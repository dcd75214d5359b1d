//! Scalar (SSA), offset (OSA) and vector (VSA) self-attention over local kNN
//! neighbourhoods or the whole point set.
//!
//! Every call can report the multiplies spent in the attention core (score
//! computation plus weighted aggregation; the Q/K/V projections are excluded)
//! to an [`OpCounter`]. Local attention spends `2 * n * k * d`, global
//! attention `2 * n * n * d`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::KdTree;
use crate::numcore::{Graph, Relation, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Ssa,
    Osa,
    Vsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighborhood {
    Local { k: usize },
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Only read by VSA.
    pub beta: Relation,
    pub neighborhood: Neighborhood,
    /// Adds a learned map of `p_i - p_j` to the relation and the values (VSA only).
    pub pos_encoding: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Vsa,
            beta: Relation::Subtraction,
            neighborhood: Neighborhood::Local { k: 16 },
            pos_encoding: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Neighborhood::Local { k: 0 } = self.neighborhood {
            return Err(Error::invalid("attention neighbourhood needs k >= 1"));
        }
        Ok(())
    }
}

/// Accumulates attention-core multiplies; shareable across threads.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> u64 {
        self.0.swap(0, Ordering::Relaxed)
    }
}

/// Query/key/value projections (no bias) plus the optional position map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_p: Option<Tensor>,
}

/// Uniform Glorot initialisation for a `[fan_in, fan_out]` map.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive extents")
}

impl AttentionParams {
    pub fn init(d_in: usize, d: usize, pos_encoding: bool, rng: &mut impl Rng) -> Result<Self> {
        if d_in == 0 || d == 0 {
            return Err(Error::invalid(format!("attention widths {d_in} -> {d}")));
        }
        Ok(AttentionParams {
            w_q: glorot(d_in, d, rng),
            w_k: glorot(d_in, d, rng),
            w_v: glorot(d_in, d, rng),
            w_p: pos_encoding.then(|| glorot(3, d, rng)),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[1]
    }

    /// Registers the projections on `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_q: g.param(self.w_q.clone()),
            w_k: g.param(self.w_k.clone()),
            w_v: g.param(self.w_v.clone()),
            w_p: self.w_p.as_ref().map(|p| g.param(p.clone())),
        }
    }

    pub fn insert_into(&self, prefix: &str, set: &mut BTreeMap<String, Tensor>) {
        set.insert(format!("{prefix}.wq"), self.w_q.clone());
        set.insert(format!("{prefix}.wk"), self.w_k.clone());
        set.insert(format!("{prefix}.wv"), self.w_v.clone());
        if let Some(p) = &self.w_p {
            set.insert(format!("{prefix}.wp"), p.clone());
        }
    }
}

/// Attention projections already on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_p: Option<Var>,
}

impl AttentionVars {
    /// Looks the projections up by the names written by [`AttentionParams::insert_into`].
    pub fn lookup(vars: &BTreeMap<String, Var>, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            vars.get(&format!("{prefix}.{s}"))
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing parameter {prefix}.{s}")))
        };
        Ok(AttentionVars {
            w_q: get("wq")?,
            w_k: get("wk")?,
            w_v: get("wv")?,
            w_p: vars.get(&format!("{prefix}.wp")).copied(),
        })
    }
}

/// Row-major `[n, kk]` neighbour table.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub idx: Arc<[usize]>,
    pub kk: usize,
}

impl Neighbors {
    /// `k` nearest neighbours of every point (itself included), nearest first.
    pub fn knn(coords: &[[f64; 3]], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("knn: k must be at least 1"));
        }
        let tree = KdTree::from_xyz(coords)?;
        let (idx, kk) = tree.knn_table(coords, k)?;
        Ok(Neighbors {
            idx: idx.into(),
            kk,
        })
    }

    /// Every point attends to all `n` points in index order.
    pub fn dense(n: usize) -> Self {
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
        Neighbors {
            idx: idx.into(),
            kk: n,
        }
    }

    pub fn rows(&self) -> usize {
        self.idx.len() / self.kk.max(1)
    }

    /// `[n * kk, 3]` offsets `p_i - p_j`.
    pub fn offsets(&self, coords: &[[f64; 3]]) -> Tensor {
        let mut data = Vec::with_capacity(self.idx.len() * 3);
        for (slot, &j) in self.idx.iter().enumerate() {
            let i = slot / self.kk;
            data.extend((0..3).map(|a| coords[i][a] - coords[j][a]));
        }
        Tensor::new(&[self.idx.len(), 3], data).expect("non-empty table")
    }
}

/// Elementwise `q - k`, `q + k` or `q * k`.
pub fn relational(g: &mut Graph, beta: Relation, q: Var, k: Var) -> Result<Var> {
    if g.shape(q) != g.shape(k) {
        return Err(Error::ShapeMismatch {
            op: "relational",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    match beta {
        Relation::Subtraction => g.sub(q, k),
        Relation::Summation => g.add(q, k),
        Relation::Hadamard => g.hadamard(q, k),
    }
}

fn count(counter: Option<&OpCounter>, n: usize, kk: usize, d: usize) {
    if let Some(c) = counter {
        c.add(2 * (n * kk * d) as u64);
    }
}

fn project(g: &mut Graph, f: Var, p: &AttentionVars) -> Result<(Var, Var, Var, usize)> {
    let q = g.matmul(f, p.w_q)?;
    let k = g.matmul(f, p.w_k)?;
    let v = g.matmul(f, p.w_v)?;
    let d = g.shape(q)[1];
    Ok((q, k, v, d))
}

fn check_input(g: &Graph, f: Var, p: &AttentionVars, op: &'static str) -> Result<usize> {
    let s = g.shape(f);
    if s.len() != 2 || s[1] != g.shape(p.w_q)[0] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: g.shape(p.w_q).to_vec(),
        });
    }
    Ok(s[0])
}

/// Dense scalar attention: `softmax(Q K^T / sqrt(d)) V` over all rows.
pub fn ssa(
    g: &mut Graph,
    f_in: Var,
    p: &AttentionVars,
    counter: Option<&OpCounter>,
) -> Result<Var> {
    let n = check_input(g, f_in, p, "ssa")?;
    let (q, k, v, d) = project(g, f_in, p)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let a = g.softmax_lastdim(scaled)?;
    count(counter, n, n, d);
    g.matmul(a, v)
}

/// `F_in - ssa(F_in)`; needs `d_in == d`.
pub fn osa(
    g: &mut Graph,
    f_in: Var,
    p: &AttentionVars,
    counter: Option<&OpCounter>,
) -> Result<Var> {
    let (d_in, d) = (g.shape(p.w_q)[0], g.shape(p.w_q)[1]);
    if d_in != d {
        return Err(Error::invalid(format!(
            "osa needs d_in == d, got {d_in} and {d}"
        )));
    }
    let s = ssa(g, f_in, p, counter)?;
    g.sub(f_in, s)
}

/// Vector attention of every row over its neighbourhood; the softmax runs
/// independently per channel over the `kk` neighbours.
pub fn vsa(
    g: &mut Graph,
    f_in: Var,
    nb: &Neighbors,
    beta: Relation,
    pos: Option<Var>,
    p: &AttentionVars,
    counter: Option<&OpCounter>,
) -> Result<Var> {
    let n = check_input(g, f_in, p, "vsa")?;
    if nb.kk == 0 {
        return Err(Error::EmptyAxis("vsa"));
    }
    let (q, k, v, d) = project(g, f_in, p)?;
    let pos = match (pos, p.w_p) {
        (Some(off), Some(wp)) => Some(g.matmul(off, wp)?),
        _ => None,
    };
    count(counter, n, nb.kk, d);
    g.vector_attention(
        q,
        k,
        v,
        pos,
        nb.idx.clone(),
        nb.kk,
        beta,
        1.0 / (d as f64).sqrt(),
    )
}

/// The configured kind over a prepared neighbour table.
///
/// `offsets` (`[n * kk, 3]`, see [`Neighbors::offsets`]) is read only when
/// position encoding is enabled.
pub fn attend(
    g: &mut Graph,
    f_in: Var,
    nb: &Neighbors,
    offsets: Option<Var>,
    cfg: &AttentionConfig,
    p: &AttentionVars,
    counter: Option<&OpCounter>,
) -> Result<Var> {
    let n = check_input(g, f_in, p, "attend")?;
    if nb.rows() != n {
        return Err(Error::invalid(format!(
            "neighbour table has {} rows for {n} points",
            nb.rows()
        )));
    }
    let scale_d = g.shape(p.w_q)[1];
    match cfg.kind {
        AttentionKind::Vsa => vsa(g, f_in, nb, cfg.beta, offsets, p, counter),
        AttentionKind::Ssa | AttentionKind::Osa => {
            let (q, k, v, d) = project(g, f_in, p)?;
            count(counter, n, nb.kk, d);
            let s = g.scalar_attention(
                q,
                k,
                v,
                nb.idx.clone(),
                nb.kk,
                1.0 / (scale_d as f64).sqrt(),
            )?;
            if cfg.kind == AttentionKind::Osa {
                if g.shape(f_in) != g.shape(s) {
                    return Err(Error::invalid("osa needs d_in == d"));
                }
                g.sub(f_in, s)
            } else {
                Ok(s)
            }
        }
    }
}

fn offsets_var(
    g: &mut Graph,
    cfg: &AttentionConfig,
    nb: &Neighbors,
    coords: &[[f64; 3]],
) -> Option<Var> {
    (cfg.pos_encoding && cfg.kind == AttentionKind::Vsa).then(|| g.constant(nb.offsets(coords)))
}

/// Attention restricted to each point's `k` nearest neighbours in `coords`.
pub fn local_attention(
    g: &mut Graph,
    coords: &[[f64; 3]],
    feats: Var,
    cfg: &AttentionConfig,
    p: &AttentionVars,
    counter: Option<&OpCounter>,
) -> Result<Var> {
    let Neighborhood::Local { k } = cfg.neighborhood else {
        return Err(Error::invalid(
            "local_attention needs a local neighbourhood",
        ));
    };
    if coords.len() != g.shape(feats)[0] {
        return Err(Error::invalid(format!(
            "{} coordinates for {} feature rows",
            coords.len(),
            g.shape(feats)[0]
        )));
    }
    let nb = Neighbors::knn(coords, k)?;
    let off = offsets_var(g, cfg, &nb, coords);
    attend(g, feats, &nb, off, cfg, p, counter)
}

/// Attention over every point. `coords` are needed only for position encoding.
pub fn global_attention(
    g: &mut Graph,
    coords: Option<&[[f64; 3]]>,
    feats: Var,
    cfg: &AttentionConfig,
    p: &AttentionVars,
    counter: Option<&OpCounter>,
) -> Result<Var> {
    if cfg.neighborhood != Neighborhood::Global {
        return Err(Error::invalid(
            "global_attention needs the global neighbourhood",
        ));
    }
    match cfg.kind {
        AttentionKind::Ssa => ssa(g, feats, p, counter),
        AttentionKind::Osa => osa(g, feats, p, counter),
        AttentionKind::Vsa => {
            let n = g.shape(feats)[0];
            let nb = Neighbors::dense(n);
            let off = match coords {
                Some(c) => offsets_var(g, cfg, &nb, c),
                None if cfg.pos_encoding => {
                    return Err(Error::invalid("position encoding needs coordinates"))
                }
                None => None,
            };
            attend(g, feats, &nb, off, cfg, p, counter)
        }
    }
}

/// One row of the local-attention coverage table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub points: usize,
    /// Original-resolution points reachable by one neighbourhood.
    pub coverage: usize,
    /// `coverage / n_input` as an exact fraction `(num, den)` in lowest terms.
    pub fraction: (usize, usize),
}

impl Coverage {
    pub fn percentage(&self) -> f64 {
        self.fraction.0 as f64 / self.fraction.1 as f64
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stage `s` (1-based) has `n_input / 2^(s-1)` points and covers `k * 2^(s-1)` of the input.
pub fn coverage_table(n_input: usize, k: usize, stages: usize) -> Result<Vec<Coverage>> {
    if stages == 0 || k == 0 || n_input == 0 {
        return Err(Error::invalid(
            "coverage_table needs positive n_input, k and stages",
        ));
    }
    let top = 1usize
        .checked_shl((stages - 1) as u32)
        .filter(|t| *t <= n_input)
        .ok_or_else(|| Error::invalid(format!("{stages} stages do not fit {n_input} points")))?;
    if !n_input.is_multiple_of(top) {
        return Err(Error::invalid(format!(
            "n_input {n_input} is not divisible by 2^{}",
            stages - 1
        )));
    }
    Ok((0..stages)
        .map(|s| {
            let f = 1usize << s;
            let coverage = k * f;
            let g = gcd(coverage, n_input);
            Coverage {
                points: n_input / f,
                coverage,
                fraction: (coverage / g, n_input / g),
            }
        })
        .collect())
}
