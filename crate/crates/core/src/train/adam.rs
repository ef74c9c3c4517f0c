use crate::error::{Error, Result};
use crate::model::{OptimizerState, ParamSet};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn from_state(params: &ParamSet, state: OptimizerState, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let fits = |ts: &[Tensor<f32>]| {
            ts.len() == params.len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(&state.m) || !fits(&state.v) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        Ok(Adam {
            beta1,
            beta2,
            eps,
            state,
        })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// One update. A missing gradient counts as zero, so moments still decay.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.state.m)
            .zip(&mut self.state.v)
        {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(p.shape(), g.shape()));
                }
            }
            let gd = g.as_ref().map(|g| g.data());
            for (i, ((pi, mi), vi)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .enumerate()
            {
                let gi = gd.map_or(0.0, |d| d[i]);
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ParamSet {
        ParamSet::new(vec!["p".into()], vec![Tensor::full(&[1], v)]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps).
        let mut p = one(1.0);
        let mut opt = Adam::new(&p, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &[Some(Tensor::full(&[1], 0.5))], 0.1).unwrap();
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.tensors()[0].data()[0] as f64 - expect).abs() < 1e-6);
        assert_eq!(opt.state().step, 1);
    }

    #[test]
    fn missing_gradient_keeps_parameter_until_moment_exists() {
        let mut p = one(2.0);
        let mut opt = Adam::new(&p, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &[None], 0.1).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = one(3.0);
        let mut opt = Adam::new(&p, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let x = p.tensors()[0].data()[0];
            opt.step(&mut p, &[Some(Tensor::full(&[1], 2.0 * (x - 1.0)))], 0.01).unwrap();
        }
        assert!((p.tensors()[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![Some(Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = vec![Some(Tensor::from_vec(&[2], vec![0.3f32, 0.4]).unwrap())];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3, 0.4]);
    }
}
