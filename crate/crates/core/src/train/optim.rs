use super::TrainError;
use crate::model::Param;

/// `initial · gamma^⌊epoch/step⌋`.
pub fn scheduler_lr(initial: f64, epoch: usize, step: usize, gamma: f64) -> f64 {
    initial * gamma.powi((epoch / step.max(1)) as i32)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>], lr: f64) -> Result<(), TrainError> {
        let sizes_match = params.len() == self.m.len()
            && grads.len() == self.m.len()
            && params.iter().zip(grads).zip(&self.m).all(|((p, g), m)| p.value.len() == g.len() && g.len() == m.len());
        if !sizes_match {
            return Err(TrainError::OptimizerShape {
                expected: self.m.len(),
                found: grads.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn param(v: f64) -> Vec<Param> {
        vec![Param { name: "w".into(), value: Tensor::vector(vec![v]) }]
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(scheduler_lr(1e-3, 0, 200, 0.25), 1e-3);
        assert!((scheduler_lr(1e-3, 200, 200, 0.25) - 2.5e-4).abs() < 1e-18);
        assert!((scheduler_lr(1e-3, 399, 200, 0.25) - 2.5e-4).abs() < 1e-18);
        assert!((scheduler_lr(1e-3, 400, 200, 0.25) - 6.25e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(0.7);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p[0].value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut p = param(1.0);
            let mut adam = Adam::new(&p);
            adam.step(&mut p, &[vec![g]], 0.01).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
            let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0].value.data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = param(1.0);
        let mut adam = Adam::new(&p);
        for _ in 0..1000 {
            let g = 2.0 * p[0].value.data()[0];
            adam.step(&mut p, &[vec![g]], 0.01).unwrap();
        }
        assert!(p[0].value.data()[0].abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = param(1.0);
        let mut adam = Adam::new(&p);
        assert!(adam.step(&mut p, &[vec![1.0, 2.0]], 0.1).is_err());
    }
}
