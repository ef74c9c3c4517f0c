use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Op;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_char: f64,
    pub lambda_tv: f64,
    pub char_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 1.0,
            w_char: 0.1,
            lambda_tv: 2.0e-3,
            char_eps: 1.0e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_mse, self.w_char, self.lambda_tv, self.char_eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub mse: f64,
    pub char: f64,
    pub tv: f64,
}

fn check<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Dimension("loss of an empty tensor".into()));
    }
    let s = pred.shape();
    let (h, w) = match s.len() {
        0 => (1, 1),
        1 => (1, s[0]),
        _ => (s[s.len() - 2], s[s.len() - 1]),
    };
    Ok((pred.len() / (h * w), h, w))
}

/// Anisotropic total variation: mean |horizontal difference| plus mean
/// |vertical difference|, each over its valid positions (zero if none).
fn tv_terms<T: Real>(p: &[T], planes: usize, h: usize, w: usize, mut visit: impl FnMut(usize, usize, T, T)) -> f64 {
    let cx = planes * h * (w.saturating_sub(1));
    let cy = planes * h.saturating_sub(1) * w;
    let (sx, sy) = (
        if cx > 0 { 1.0 / cx as f64 } else { 0.0 },
        if cy > 0 { 1.0 / cy as f64 } else { 0.0 },
    );
    let (tx, ty) = (T::from_f64_lossy(sx), T::from_f64_lossy(sy));
    let mut total = 0.0;
    for plane in 0..planes {
        let base = plane * h * w;
        for r in 0..h {
            for c in 0..w {
                let i = base + r * w + c;
                if c + 1 < w {
                    let d = p[i + 1] - p[i];
                    total += d.abs().to_f64_lossy() * sx;
                    visit(i + 1, i, d, tx);
                }
                if r + 1 < h {
                    let d = p[i + w] - p[i];
                    total += d.abs().to_f64_lossy() * sy;
                    visit(i + w, i, d, ty);
                }
            }
        }
    }
    total
}

/// All loss components, accumulated in double precision.
pub fn loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, w: &LossWeights) -> Result<LossComponents> {
    let (planes, h, wd) = check(pred, gt)?;
    let n = pred.len() as f64;
    let eps2 = w.char_eps * w.char_eps;
    let (mut mse, mut chr) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let d = (p - g).to_f64_lossy();
        mse += d * d;
        chr += (d * d + eps2).sqrt();
    }
    let (mse, chr) = (mse / n, chr / n);
    let tv = tv_terms(pred.data(), planes, h, wd, |_, _, _, _| {});
    Ok(LossComponents {
        total: w.w_mse * mse + w.w_char * chr + w.lambda_tv * tv,
        mse,
        char: chr,
        tv,
    })
}

/// Scalar composite loss. Inputs: `prediction, target`.
pub struct CompositeLoss {
    pub weights: LossWeights,
}

impl<T: Real> Op<T> for CompositeLoss {
    fn name(&self) -> &'static str {
        "composite_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [pred, gt] = inputs else {
            return Err(Error::Dimension("loss takes (prediction, target)".into()));
        };
        let c = loss(pred, gt, &self.weights)?;
        Ok(Tensor::scalar(T::from_f64(c.total).unwrap_or_else(T::nan)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (pred, gt) = (inputs[0], inputs[1]);
        let (planes, h, w) = check(pred, gt)?;
        let g0 = grad.data()[0];
        let n = T::from_usize(pred.len()).expect("length");
        let wm = T::from_f64_lossy(self.weights.w_mse);
        let wc = T::from_f64_lossy(self.weights.w_char);
        let eps2 = T::from_f64_lossy(self.weights.char_eps * self.weights.char_eps);
        let two = T::from_f64_lossy(2.0);
        let fit: Vec<T> = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| {
                let d = p - g;
                (wm * two * d + wc * d / (d * d + eps2).sqrt()) / n
            })
            .collect();
        let mut dpred = fit.clone();
        let lt = T::from_f64_lossy(self.weights.lambda_tv);
        tv_terms(pred.data(), planes, h, w, |hi, lo, d, scale| {
            let s = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            dpred[hi] += lt * scale * s;
            dpred[lo] -= lt * scale * s;
        });
        let dp = needs[0].then(|| Tensor::from_fn(pred.shape(), |i| dpred[i] * g0));
        let dg = needs[1].then(|| Tensor::from_fn(gt.shape(), |i| -fit[i] * g0));
        Ok(vec![dp, dg])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Ops};
    use crate::nn::grad_check;

    #[test]
    fn identical_constant_frames() {
        let x = Tensor::full(&[1, 3, 4, 5], 0.3f64);
        let c = loss(&x, &x, &LossWeights::default()).unwrap();
        assert_eq!((c.mse, c.tv), (0.0, 0.0));
        assert!((c.char - 1e-3).abs() < 1e-15);
        assert!((c.total - 0.1 * 1e-3).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_closed_form() {
        let p = Tensor::full(&[1, 1, 1, 1], 1.0f64);
        let g = Tensor::zeros(&[1, 1, 1, 1]);
        let c = loss(&p, &g, &LossWeights::default()).unwrap();
        let char_ref = (1.0f64 + 1e-6).sqrt();
        assert_eq!(c.mse, 1.0);
        assert_eq!(c.tv, 0.0);
        assert!((c.char - char_ref).abs() < 1e-15);
        assert!((c.total - (1.0 + 0.1 * char_ref)).abs() < 1e-15);
    }

    #[test]
    fn tv_of_a_ramp() {
        // Row ramp 0, 1, 2 in each of 2 rows: mean |dx| = 1, mean |dy| = 0.
        let p = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0f64, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let c = loss(&p, &p, &LossWeights::default()).unwrap();
        assert_eq!(c.tv, 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i as f64) * 0.618).sin() * 0.5 + 0.5);
        let g = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i as f64) * 1.414).cos() * 0.5 + 0.5);
        let r = grad_check(
            |gr: &mut Graph<f64>, v| gr.apply(CompositeLoss { weights: LossWeights::default() }, &[&v[0], &v[1]]),
            &[p, g],
            1e-7,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn shape_mismatch_and_bad_weights() {
        let a = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 3, 2, 3]);
        assert!(loss(&a, &b, &LossWeights::default()).is_err());
        assert!(LossWeights { w_char: -1.0, ..Default::default() }.validate().is_err());
    }
}
