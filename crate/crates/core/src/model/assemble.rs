use crate::degrade::{CfaPattern, FieldParity};
use crate::error::{Error, Result};
use crate::graph::Op;
use crate::real::Real;
use crate::tensor::Tensor;

/// Interleaves a known field with an estimated one along rows.
/// Inputs: `known, estimated`, both `N×C×h×w`; output `N×C×2h×w`.
pub struct WeaveRows {
    pub known: FieldParity,
}

impl<T: Real> Op<T> for WeaveRows {
    fn name(&self) -> &'static str {
        "weave_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [known, est] = inputs else {
            return Err(Error::Dimension("weave takes (known, estimated)".into()));
        };
        if known.shape() != est.shape() {
            return Err(Error::shape(known.shape(), est.shape()));
        }
        let (n, c, h, w) = known.dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, w]);
        let k_off = self.known.first_row();
        let planes = out.data_mut().chunks_mut(2 * h * w);
        for (p, dst) in planes.enumerate() {
            for r in 0..h {
                let src = p * h * w + r * w;
                dst[(2 * r + k_off) * w..(2 * r + k_off + 1) * w].copy_from_slice(&known.data()[src..src + w]);
                dst[(2 * r + 1 - k_off) * w..(2 * r + 2 - k_off) * w].copy_from_slice(&est.data()[src..src + w]);
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (_, _, h, w) = inputs[0].dims4()?;
        let k_off = self.known.first_row();
        let split = |offset: usize| {
            let mut g = Tensor::zeros(inputs[0].shape());
            for (p, src) in grad.data().chunks(2 * h * w).enumerate() {
                for r in 0..h {
                    let dst = p * h * w + r * w;
                    g.data_mut()[dst..dst + w].copy_from_slice(&src[(2 * r + offset) * w..(2 * r + offset + 1) * w]);
                }
            }
            g
        };
        Ok(vec![needs[0].then(|| split(k_off)), needs[1].then(|| split(1 - k_off))])
    }
}

/// Replaces the CFA-observed samples of a prediction with the observed values.
/// Inputs: `prediction, mosaic`, both `N×3×H×W`.
pub struct CfaOverwrite {
    pub pattern: CfaPattern,
}

impl CfaOverwrite {
    fn observed(&self, shape: &[usize]) -> Result<Vec<bool>> {
        let (n, c, h, w) = match *shape {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Dimension(format!("expected N×3×H×W, got {shape:?}"))),
        };
        if c != 3 {
            return Err(Error::Dimension(format!("CFA frames need 3 channels, got {c}")));
        }
        let mut mask = vec![false; n * c * h * w];
        for b in 0..n {
            for r in 0..h {
                for col in 0..w {
                    let ch = self.pattern.channel_at(r, col);
                    mask[((b * 3 + ch) * h + r) * w + col] = true;
                }
            }
        }
        Ok(mask)
    }
}

impl<T: Real> Op<T> for CfaOverwrite {
    fn name(&self) -> &'static str {
        "cfa_overwrite"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [pred, mosaic] = inputs else {
            return Err(Error::Dimension("cfa overwrite takes (prediction, mosaic)".into()));
        };
        if pred.shape() != mosaic.shape() {
            return Err(Error::shape(pred.shape(), mosaic.shape()));
        }
        let mask = self.observed(pred.shape())?;
        Ok(Tensor::from_fn(pred.shape(), |i| {
            if mask[i] {
                mosaic.data()[i]
            } else {
                pred.data()[i]
            }
        }))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mask = self.observed(inputs[0].shape())?;
        let pick = |keep_observed: bool| {
            Tensor::from_fn(grad.shape(), |i| {
                if mask[i] == keep_observed {
                    grad.data()[i]
                } else {
                    T::zero()
                }
            })
        };
        Ok(vec![needs[0].then(|| pick(false)), needs[1].then(|| pick(true))])
    }
}
