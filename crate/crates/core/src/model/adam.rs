//! Plain Adam. No weight decay: parameters that receive a zero gradient
//! must stay bitwise unchanged, which decay would break.

use ndarray::Array2;

use super::math::Param;
use crate::error::{Error, Result};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: Vec<(String, Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: Vec::new() }
    }

    /// Applies one update from the accumulated gradients. The parameter
    /// list must be identical in names and order on every call.
    pub fn step(&mut self, params: &mut [(String, &mut Param)]) -> Result<()> {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|(n, p)| {
                    (n.clone(), Array2::zeros(p.v.raw_dim()), Array2::zeros(p.v.raw_dim()))
                })
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::Internal("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((name, m, v), (pname, p)) in self.state.iter_mut().zip(params.iter_mut()) {
            if name != pname {
                return Err(Error::Internal(format!(
                    "optimizer state mismatch: {name} vs {pname}"
                )));
            }
            ndarray::Zip::from(&mut p.v)
                .and(m)
                .and(v)
                .and(&p.g)
                .for_each(|pv, mv, vv, &gv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mhat = *mv / b1t;
                    let vhat = *vv / b2t;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(rng: &mut ChaCha8Rng) -> Param {
        Param::randn(3, 2, 0.5, rng)
    }

    #[test]
    fn zero_gradient_leaves_the_parameter_bitwise_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = param(&mut rng);
        let before: Vec<u64> = p.v.iter().map(|x| x.to_bits()).collect();
        let mut adam = Adam::new(1e-3);
        for _ in 0..3 {
            adam.step(&mut [("p".into(), &mut p)]).unwrap();
        }
        let after: Vec<u64> = p.v.iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        // With bias correction, step one is lr * g / (|g| + eps).
        let mut p = Param::zeros(1, 1);
        p.g[(0, 0)] = 0.25;
        let mut adam = Adam::new(1e-2);
        adam.step(&mut [("p".into(), &mut p)]).unwrap();
        assert!((p.v[(0, 0)] + 1e-2).abs() < 1e-6);
    }

    #[test]
    fn steps_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = param(&mut rng);
        let mut b = Param { v: a.v.clone(), g: a.g.clone() };
        let grad = Param::randn(3, 2, 1.0, &mut rng).v;
        let mut oa = Adam::new(3e-3);
        let mut ob = Adam::new(3e-3);
        for _ in 0..5 {
            a.g.assign(&grad);
            b.g.assign(&grad);
            oa.step(&mut [("p".into(), &mut a)]).unwrap();
            ob.step(&mut [("p".into(), &mut b)]).unwrap();
        }
        for (x, y) in a.v.iter().zip(b.v.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn renamed_parameters_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = param(&mut rng);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [("p".into(), &mut p)]).unwrap();
        assert!(adam.step(&mut [("q".into(), &mut p)]).is_err());
    }
}
