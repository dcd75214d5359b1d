use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Backbone, ClassicFusion};
use crate::attention::{
    attend, AttentionConfig, AttentionKind, AttentionVars, Neighborhood, Neighbors,
};
use crate::error::{Error, Result};
use crate::geom::KdTree;
use crate::numcore::{Graph, Relation, Var};

/// Parameters bound to a graph, by name.
pub type VarMap = BTreeMap<String, Var>;

pub(crate) fn lookup(vars: &VarMap, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

/// `x W + b` with `{prefix}.w` and `{prefix}.b`.
pub fn linear(g: &mut Graph, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let w = lookup(vars, &format!("{prefix}.w"))?;
    let b = lookup(vars, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `max_j (W [f_j - f_i || f_i] + b)` over each row's neighbours.
pub fn edge_core(
    g: &mut Graph,
    vars: &VarMap,
    prefix: &str,
    x: Var,
    nb: &Neighbors,
) -> Result<Var> {
    let n = g.shape(x)[0];
    if nb.rows() != n {
        return Err(Error::invalid(format!(
            "neighbour table has {} rows for {n} points",
            nb.rows()
        )));
    }
    let centre: Arc<[usize]> = (0..n).flat_map(|i| std::iter::repeat_n(i, nb.kk)).collect();
    let xj = g.gather_rows(x, nb.idx.clone())?;
    let xi = g.gather_rows(x, centre)?;
    let diff = g.sub(xj, xi)?;
    let cat = g.concat_channels(diff, xi)?;
    let h = linear(g, vars, prefix, cat)?;
    let d = g.shape(h)[1];
    let h = g.reshape(h, &[n, nb.kk, d])?;
    g.reduce_max(h, 1)
}

/// Pre-norm residual layer `x + relu(out(core(LN(x))))` where `core` is the
/// configured backbone.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    g: &mut Graph,
    vars: &VarMap,
    prefix: &str,
    x: Var,
    nb: &Neighbors,
    offsets: Option<Var>,
    backbone: Backbone,
    kind: AttentionKind,
    beta: Relation,
) -> Result<Var> {
    let h = g.layer_norm(x);
    let core = match backbone {
        Backbone::VsaTransformer => {
            let cfg = AttentionConfig {
                kind,
                beta,
                neighborhood: Neighborhood::Local { k: nb.kk },
                pos_encoding: offsets.is_some(),
            };
            let p = AttentionVars::lookup(vars, &format!("{prefix}.attn"))?;
            attend(g, h, nb, offsets, &cfg, &p, None)?
        }
        Backbone::PointwiseMlp => {
            let y = linear(g, vars, &format!("{prefix}.mlp"), h)?;
            g.relu(y)
        }
        Backbone::EdgeGraph => edge_core(g, vars, &format!("{prefix}.edge"), h, nb)?,
    };
    let o = linear(g, vars, &format!("{prefix}.out"), core)?;
    let o = g.relu(o);
    g.add(x, o)
}

/// One direction of cross-point attention: queries from the receiving branch,
/// keys and values from the other.
#[derive(Debug, Clone, Copy)]
pub struct CpaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub gamma: Var,
}

impl CpaVars {
    pub fn lookup(vars: &VarMap, prefix: &str) -> Result<Self> {
        let get = |s: &str| lookup(vars, &format!("{prefix}.{s}"));
        Ok(CpaVars {
            w_q: get("wq")?,
            w_k: get("wk")?,
            w_v: get("wv")?,
            w_o: get("wo")?,
            gamma: get("gamma")?,
        })
    }
}

/// `F_a + gamma * (softmax(Q_a K_b^T / sqrt(d_e)) V_b) W_o`, restricted to the
/// neighbourhoods in `nb` (use [`Neighbors::dense`] for the full product).
pub fn cross_point_attention(
    g: &mut Graph,
    fa: Var,
    fb: Var,
    nb: &Neighbors,
    p: &CpaVars,
) -> Result<Var> {
    if g.shape(fa) != g.shape(fb) {
        return Err(Error::ShapeMismatch {
            op: "cross_point_attention",
            lhs: g.shape(fa).to_vec(),
            rhs: g.shape(fb).to_vec(),
        });
    }
    if nb.rows() != g.shape(fa)[0] {
        return Err(Error::invalid(format!(
            "neighbour table has {} rows for {} points",
            nb.rows(),
            g.shape(fa)[0]
        )));
    }
    let q = g.matmul(fa, p.w_q)?;
    let k = g.matmul(fb, p.w_k)?;
    let v = g.matmul(fb, p.w_v)?;
    let d_e = g.shape(q)[1];
    let a = g.scalar_attention(q, k, v, nb.idx.clone(), nb.kk, 1.0 / (d_e as f64).sqrt())?;
    let f = g.matmul(a, p.w_o)?;
    let f = g.scale_by(f, p.gamma)?;
    g.add(fa, f)
}

/// `CPA(F_L, F_HS) + CPA(F_HS, F_L)`.
pub fn fuse_bidirectional(
    g: &mut Graph,
    f_l: Var,
    f_hs: Var,
    nb: &Neighbors,
    l_from_hs: &CpaVars,
    hs_from_l: &CpaVars,
) -> Result<Var> {
    let a = cross_point_attention(g, f_l, f_hs, nb, l_from_hs)?;
    let b = cross_point_attention(g, f_hs, f_l, nb, hs_from_l)?;
    g.add(a, b)
}

pub fn fuse_classic(g: &mut Graph, kind: ClassicFusion, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "fuse_classic",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    match kind {
        ClassicFusion::Sum => g.add(a, b),
        ClassicFusion::Concat => g.concat_channels(a, b),
        ClassicFusion::Average => {
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
        ClassicFusion::Max => g.maximum(a, b),
    }
}

/// Inverse-distance weights from each fine point to its nearest coarse points.
#[derive(Debug, Clone, PartialEq)]
pub struct IdwTable {
    pub idx: Arc<[usize]>,
    pub w: Arc<[f64]>,
    pub kk: usize,
}

/// Weights `1/d` over the 3 nearest coarse points, normalised to sum to 1.
/// A fine point that coincides with a coarse point takes that point's
/// feature outright.
pub fn idw_table(coarse: &[[f64; 3]], fine: &[[f64; 3]]) -> Result<IdwTable> {
    if coarse.is_empty() {
        return Err(Error::Empty(
            "decoder interpolation from an empty coarse set".into(),
        ));
    }
    let tree = KdTree::from_xyz(coarse)?;
    let kk = coarse.len().min(3);
    let mut idx = Vec::with_capacity(fine.len() * kk);
    let mut w = Vec::with_capacity(fine.len() * kk);
    for p in fine {
        let nn = tree.knn(p, kk)?;
        idx.extend_from_slice(&nn.indices);
        if nn.dist2[0] == 0.0 {
            w.push(1.0);
            w.extend(std::iter::repeat_n(0.0, kk - 1));
        } else {
            let inv: Vec<f64> = nn.dist2.iter().map(|d2| 1.0 / d2.sqrt()).collect();
            let total: f64 = inv.iter().sum();
            w.extend(inv.iter().map(|v| v / total));
        }
    }
    Ok(IdwTable {
        idx: idx.into(),
        w: w.into(),
        kk,
    })
}

/// Interpolate coarse features onto the fine points, append the skip
/// features and map to the stage width with `relu(linear)`.
pub fn decoder_block(
    g: &mut Graph,
    vars: &VarMap,
    prefix: &str,
    coarse_feats: Var,
    table: &IdwTable,
    skip: Var,
) -> Result<Var> {
    let up = g.weighted_gather(coarse_feats, table.idx.clone(), table.w.clone(), table.kk)?;
    let cat = g.concat_channels(up, skip)?;
    let y = linear(g, vars, prefix, cat)?;
    Ok(g.relu(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn cpa_identity(g: &mut Graph, d: usize, gamma: f64) -> CpaVars {
        CpaVars {
            w_q: g.constant(Tensor::eye(d)),
            w_k: g.constant(Tensor::eye(d)),
            w_v: g.constant(Tensor::eye(d)),
            w_o: g.constant(Tensor::eye(d)),
            gamma: g.constant(Tensor::scalar(gamma)),
        }
    }

    #[test]
    fn cpa_single_point_adds_other_branch() {
        let mut g = Graph::new();
        let p = cpa_identity(&mut g, 2, 1.0);
        let a = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 2], vec![-3.0, 0.5]).unwrap());
        let out = cross_point_attention(&mut g, a, b, &Neighbors::dense(1), &p).unwrap();
        assert_eq!(g.value(out).data(), &[-2.0, 2.5]);
    }

    #[test]
    fn cpa_gamma_zero_is_identity() {
        let mut g = Graph::new();
        let p = cpa_identity(&mut g, 2, 0.0);
        let a = g.constant(Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let b = g.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let out = cross_point_attention(&mut g, a, b, &Neighbors::dense(2), &p).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn classic_fusions() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.0, 5.0]));
        let b = g.constant(Tensor::vector(&[3.0, 2.0]));
        let s = fuse_classic(&mut g, ClassicFusion::Sum, a, b).unwrap();
        let m = fuse_classic(&mut g, ClassicFusion::Max, a, b).unwrap();
        let c = fuse_classic(&mut g, ClassicFusion::Concat, a, b).unwrap();
        let v = fuse_classic(&mut g, ClassicFusion::Average, a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 7.0]);
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        assert_eq!(g.shape(c), &[4]);
        assert_eq!(g.value(v).data(), &[2.0, 3.5]);
    }

    #[test]
    fn idw_coincident_point_takes_coarse_feature() {
        let coarse = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let t = idw_table(&coarse, &[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.idx[0], 1);
        assert_eq!(&t.w[..], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn idw_hand_weights() {
        // distances 1, 2 and 4 -> weights proportional to 4 : 2 : 1
        let coarse = [
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 4.0],
            [9.0, 9.0, 9.0],
        ];
        let t = idw_table(&coarse, &[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(&t.idx[..], &[0, 1, 2]);
        let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (w, e) in t.w.iter().zip(expect) {
            assert!((w - e).abs() < 1e-15);
        }
    }

    #[test]
    fn idw_uniform_features_are_preserved() {
        let coarse = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 0.0, 1.0]];
        let t = idw_table(&coarse, &[[0.3, 0.4, 0.1], [5.0, 5.0, 5.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 2], 0.7));
        let up = g
            .weighted_gather(x, t.idx.clone(), t.w.clone(), t.kk)
            .unwrap();
        assert!(g.value(up).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn edge_core_self_only_is_pointwise() {
        let mut g = Graph::new();
        let mut vars = VarMap::new();
        let w = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        vars.insert("e.w".into(), g.constant(w.clone()));
        vars.insert("e.b".into(), g.constant(Tensor::vector(&[0.1, 0.0, -0.1])));
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let nb = Neighbors {
            idx: vec![0, 1].into(),
            kk: 1,
        };
        let out = edge_core(&mut g, &vars, "e", x, &nb).unwrap();
        let zeros = g.constant(Tensor::zeros(&[2, 2]));
        let cat = g.concat_channels(zeros, x).unwrap();
        let expect = linear(&mut g, &vars, "e", cat).unwrap();
        assert_eq!(g.value(out), g.value(expect));
    }
}
