use super::Tensor;
use crate::{Error, Result};

/// Adam over a fixed set of named parameters. Parameters are shared handles,
/// so updates are visible to whatever model owns them.
pub struct Adam {
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            steps: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// One bias-corrected update in place. Parameters whose grad buffer is
    /// unset are skipped; a non-finite gradient aborts before any parameter
    /// is touched.
    pub fn step(&mut self) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGrad { name: name.clone() });
                }
            }
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (idx, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let mut vals = p.to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..vals.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                vals[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_values(&vals);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let p = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        p.accumulate(&[1.0, 1.0]);
        let mut adam = Adam::new(vec![("p".into(), p.clone())], 0.001);
        adam.step().unwrap();
        for v in p.to_vec() {
            assert!((v - (-0.001)).abs() < 1e-9, "step was {v}");
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_fresh_state_leaves_params_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.accumulate(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(vec![("p".into(), p.clone())], 0.01);
        adam.step().unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn identical_runs_give_bit_identical_params() {
        let run = || {
            let p = Tensor::param(&[2], vec![0.25, -0.75]).unwrap();
            let mut adam = Adam::new(vec![("p".into(), p.clone())], 0.005);
            for k in 0..10 {
                p.zero_grad();
                p.accumulate(&[0.1 * k as f64, -0.2]);
                adam.step().unwrap();
            }
            p.to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        p.accumulate(&[f64::NAN]);
        let mut adam = Adam::new(vec![("blocks.0.weight".into(), p)], 0.001);
        let err = adam.step().unwrap_err();
        assert!(err.to_string().contains("blocks.0.weight"));
    }
}
