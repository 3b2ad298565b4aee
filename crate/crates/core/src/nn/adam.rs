use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(cfg: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if ps.len() != self.m.len() || gs.len() != ps.len() {
            return Err(Error::Shape("adam: parameter count changed".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in ps.iter_mut().enumerate() {
            let g = gs[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if p.len() != g.len() || m.len() != p.len() {
                return Err(Error::Shape(format!("adam: tensor {k} shape mismatch")));
            }
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut p = Flat(vec![0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &Flat(vec![1.0])).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + ε)
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((-p.0[0] - expected).abs() < 1e-18);
        assert!((-p.0[0] - 9.99999995e-4).abs() < 1e-11);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut p = Flat(vec![0.7, -1.2]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &Flat(vec![0.0, 0.0])).unwrap();
        assert_eq!(p.0, vec![0.7, -1.2]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Flat(vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.0[0] - 0.6).abs() < 1e-15 && (g.0[1] - 0.8).abs() < 1e-15);
        let mut g = Flat(vec![0.3, 0.4]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.0, vec![0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn first_step_moves_against_gradient(g in -1e3f64..1e3) {
            prop_assume!(g.abs() > 1e-6);
            let mut p = Flat(vec![0.0]);
            let mut st = AdamState::new(AdamConfig::default(), &p);
            st.step(&mut p, &Flat(vec![g])).unwrap();
            prop_assert_eq!(p.0[0].signum(), -g.signum());
        }
    }
}
