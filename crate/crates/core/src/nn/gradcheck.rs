use crate::error::{Error, Result};
use crate::graph::{Graph, Ops, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error: gradients smaller than this are
/// compared on an absolute scale of `GRAD_CHECK_FLOOR`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `build` against central finite
/// differences with step `eps`, in double precision.
///
/// `build` receives one variable per input and returns the function value;
/// non-scalar results are reduced by summation. The relative error of an
/// element is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let mut out = build(&mut g, &vars)?;
        if g.value(&out).len() != 1 {
            out = g.sum(out)?;
        }
        let v = g.value(&out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradient check objective is {v}")));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = evaluate(inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = scalar_of(evaluate(&probe)?);
            probe[i].data_mut()[j] = orig - eps;
            let minus = scalar_of(evaluate(&probe)?);
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient {i}[{j}] is {a}")));
            }
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

fn scalar_of((g, _, out): (Graph<f64>, Vec<Var>, Var)) -> f64 {
    g.value(&out).data()[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Op;

    struct Square;

    impl Op<f64> for Square {
        fn name(&self) -> &'static str {
            "square"
        }

        fn forward(&mut self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].map(|v| v * v))
        }

        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad: &Tensor<f64>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<f64>>>> {
            let x = inputs[0];
            Ok(vec![Some(Tensor::from_fn(x.shape(), |i| 2.0 * x.data()[i] * grad.data()[i]))])
        }
    }

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).sin());
        let r = grad_check(|g, v| g.apply(Square, &[&v[0]]), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink_passes() {
        // inputs kept at |x| > 1e-3
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.5, 0.01, 2.0]).unwrap();
        let r = grad_check(|g, v| g.relu(&v[0]), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        struct Wrong;
        impl Op<f64> for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn forward(&mut self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
                Ok(inputs[0].map(|v| v * v))
            }
            fn backward(
                &self,
                inputs: &[&Tensor<f64>],
                _o: &Tensor<f64>,
                _g: &Tensor<f64>,
                _n: &[bool],
            ) -> Result<Vec<Option<Tensor<f64>>>> {
                Ok(vec![Some(inputs[0].clone())])
            }
        }
        let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let r = grad_check(|g, v| g.apply(Wrong, &[&v[0]]), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0]), &[x], 1e-5).is_err());
    }
}
