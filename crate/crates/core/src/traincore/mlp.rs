//! Prediction head: one tanh hidden layer, linear output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::Params;
use super::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Vec<f64>,
    u: Vec<f64>,
}

impl Mlp {
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            w1: Mat::uniform(hidden, input, 1.0 / (input as f64).sqrt(), rng),
            b1: vec![0.0; hidden],
            w2: Mat::uniform(output, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: vec![0.0; output],
        }
    }

    pub fn input(&self) -> usize {
        self.w1.cols
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut u = self.b1.clone();
        self.w1.mul_add(x, &mut u);
        u.iter_mut().for_each(|v| *v = v.tanh());
        let mut h = self.b2.clone();
        self.w2.mul_add(&u, &mut h);
        (h, MlpCache { x: x.to_vec(), u })
    }

    /// Accumulates into `grads`, returns `d x`.
    pub fn backward(&self, c: &MlpCache, dh: &[f64], grads: &mut Mlp) -> Vec<f64> {
        grads.w2.add_outer(dh, &c.u);
        grads.b2.iter_mut().zip(dh).for_each(|(g, d)| *g += d);
        let mut du = vec![0.0; c.u.len()];
        self.w2.t_mul_add(dh, &mut du);
        let da: Vec<f64> = du.iter().zip(&c.u).map(|(g, u)| g * (1.0 - u * u)).collect();
        grads.w1.add_outer(&da, &c.x);
        grads.b1.iter_mut().zip(&da).for_each(|(g, d)| *g += d);
        let mut dx = vec![0.0; c.x.len()];
        self.w1.t_mul_add(&da, &mut dx);
        dx
    }
}

impl Params for Mlp {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("w1".into(), &self.w1.data),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2.data),
            ("b2".into(), &self.b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w1".into(), &mut self.w1.data),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2.data),
            ("b2".into(), &mut self.b2),
        ]
    }
}
