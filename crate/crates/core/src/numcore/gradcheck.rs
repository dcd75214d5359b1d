use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences at every coordinate of every input.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_subset(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_input` evenly spaced
/// coordinates of each input.
pub fn grad_check_subset<F>(
    mut f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            index: 0,
        });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    drop(g);

    let mut eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        input: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, t) in inputs.iter().enumerate() {
        let len = t.len();
        let stride = len.div_ceil(per_input.min(len)).max(1);
        for coord in (0..len).step_by(stride) {
            let orig = t.data()[coord];
            probe[which].data_mut()[coord] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("perturbed loss for input {which}"),
                    index: coord,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[coord];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.coords_checked == 1 {
                report.max_relative_error = err;
                report.input = which;
                report.coord = coord;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |g, v| {
                let sq = g.hadamard(v[0], v[0])?;
                g.reduce_sum(sq, None)
            },
            &[Tensor::vector(&[3.0])],
            1e-6,
        )
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_relative_error < 1e-8);
    }

    #[test]
    fn rejects_large_eps() {
        let r = grad_check(
            |g, v| g.reduce_sum(v[0], None),
            &[Tensor::vector(&[1.0])],
            0.1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn reports_non_finite_coordinate() {
        // ln of a tiny value overflows once perturbed below zero through max.
        let r = grad_check(
            |g, v| {
                let s = g.softmax_lastdim(v[0])?;
                let w = g.constant(Tensor::vector(&[f64::INFINITY, 0.0]));
                let p = g.hadamard(s, w)?;
                g.reduce_sum(p, None)
            },
            &[Tensor::vector(&[0.0, 0.0])],
            1e-6,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
