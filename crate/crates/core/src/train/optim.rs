use crate::error::{Error, Result};
use crate::fuse_io::ParamSet;
use crate::numcore::Tensor;

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: ParamSet = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters missing from `grads` get a
/// zero gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                index: i,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + state.eps);
            p.data_mut()[i] -= step;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::vector(&[v]));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut s = OptimState::new(&p);
        adam_step(&mut p, &single(2.0), &mut s, 1e-3).unwrap();
        let expect = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((p["w"].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = single(0.25);
        let mut s = OptimState::new(&p);
        adam_step(&mut p, &single(0.0), &mut s, 1e-3).unwrap();
        assert_eq!(p["w"].data()[0], 0.25);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = single(0.25);
        let mut s = OptimState::new(&p);
        assert!(adam_step(&mut p, &single(f64::NAN), &mut s, 1e-3).is_err());
        assert_eq!((p["w"].data()[0], s.step), (0.25, 0));
    }
}
