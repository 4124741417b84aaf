//! GRU update operator. Input is `[h_other ‖ feat]`, hidden state is
//! `h_self`:
//!
//! ```text
//! z = σ(Wz x + Uz h + bz)
//! r = σ(Wr x + Ur h + br)
//! n = tanh(Wn x + Un (r ⊙ h) + bn)
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::Params;
use super::linalg::{sigmoid, Mat};
use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wz: Mat,
    pub uz: Mat,
    pub bz: Vec<f64>,
    pub wr: Mat,
    pub ur: Mat,
    pub br: Vec<f64>,
    pub wn: Mat,
    pub un: Mat,
    pub bn: Vec<f64>,
}

impl GruParams {
    /// `d` hidden units, `input` = width of `[h_other ‖ feat]`.
    pub fn zeros(d: usize, input: usize) -> Self {
        GruParams {
            wz: Mat::zeros(d, input),
            uz: Mat::zeros(d, d),
            bz: vec![0.0; d],
            wr: Mat::zeros(d, input),
            ur: Mat::zeros(d, d),
            br: vec![0.0; d],
            wn: Mat::zeros(d, input),
            un: Mat::zeros(d, d),
            bn: vec![0.0; d],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(d: usize, input: usize, rng: &mut R) -> Self {
        let sx = 1.0 / ((input + d) as f64).sqrt();
        GruParams {
            wz: Mat::uniform(d, input, sx, rng),
            uz: Mat::uniform(d, d, sx, rng),
            bz: vec![0.0; d],
            wr: Mat::uniform(d, input, sx, rng),
            ur: Mat::uniform(d, d, sx, rng),
            br: vec![0.0; d],
            wn: Mat::uniform(d, input, sx, rng),
            un: Mat::uniform(d, d, sx, rng),
            bn: vec![0.0; d],
        }
    }

    pub fn hidden(&self) -> usize {
        self.bz.len()
    }

    pub fn input(&self) -> usize {
        self.wz.cols
    }
}

impl Params for GruParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("wz".into(), &self.wz.data),
            ("uz".into(), &self.uz.data),
            ("bz".into(), &self.bz),
            ("wr".into(), &self.wr.data),
            ("ur".into(), &self.ur.data),
            ("br".into(), &self.br),
            ("wn".into(), &self.wn.data),
            ("un".into(), &self.un.data),
            ("bn".into(), &self.bn),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("wz".into(), &mut self.wz.data),
            ("uz".into(), &mut self.uz.data),
            ("bz".into(), &mut self.bz),
            ("wr".into(), &mut self.wr.data),
            ("ur".into(), &mut self.ur.data),
            ("br".into(), &mut self.br),
            ("wn".into(), &mut self.wn.data),
            ("un".into(), &mut self.un.data),
            ("bn".into(), &mut self.bn),
        ]
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), TrainError> {
    if expected == got {
        Ok(())
    } else {
        Err(TrainError::Dimension { what, expected, got })
    }
}

pub fn gru_update(h_self: &[f64], h_other: &[f64], feat: &[f64], theta: &GruParams) -> Result<Vec<f64>, TrainError> {
    check("h_self", theta.hidden(), h_self.len())?;
    check("[h_other ‖ feat]", theta.input(), h_other.len() + feat.len())?;
    Ok(gru_forward(h_self, h_other, feat, theta).0)
}

/// Unchecked forward for callers that already know the dimensions agree;
/// also returns the activations [`gru_backward`] needs.
pub fn gru_forward(h_self: &[f64], h_other: &[f64], feat: &[f64], p: &GruParams) -> (Vec<f64>, GruCache) {
    let d = p.hidden();
    let mut x = Vec::with_capacity(h_other.len() + feat.len());
    x.extend_from_slice(h_other);
    x.extend_from_slice(feat);

    let mut z = p.bz.clone();
    p.wz.mul_add(&x, &mut z);
    p.uz.mul_add(h_self, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = p.br.clone();
    p.wr.mul_add(&x, &mut r);
    p.ur.mul_add(h_self, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let rh: Vec<f64> = r.iter().zip(h_self).map(|(a, b)| a * b).collect();
    let mut n = p.bn.clone();
    p.wn.mul_add(&x, &mut n);
    p.un.mul_add(&rh, &mut n);
    n.iter_mut().for_each(|v| *v = v.tanh());

    let out = (0..d).map(|i| (1.0 - z[i]) * h_self[i] + z[i] * n[i]).collect();
    let cache = GruCache {
        x,
        h: h_self.to_vec(),
        z,
        r,
        n,
        rh,
    };
    (out, cache)
}

/// Accumulates parameter gradients into `grads` and returns
/// `(d h_self, d h_other, d feat)`.
pub fn gru_backward(
    p: &GruParams,
    c: &GruCache,
    dout: &[f64],
    grads: &mut GruParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = p.hidden();
    let mut dh: Vec<f64> = (0..d).map(|i| dout[i] * (1.0 - c.z[i])).collect();
    let mut dx = vec![0.0; c.x.len()];

    let da_n: Vec<f64> = (0..d).map(|i| dout[i] * c.z[i] * (1.0 - c.n[i] * c.n[i])).collect();
    grads.wn.add_outer(&da_n, &c.x);
    grads.un.add_outer(&da_n, &c.rh);
    add(&mut grads.bn, &da_n);
    p.wn.t_mul_add(&da_n, &mut dx);
    let mut drh = vec![0.0; d];
    p.un.t_mul_add(&da_n, &mut drh);
    for i in 0..d {
        dh[i] += drh[i] * c.r[i];
    }

    let da_r: Vec<f64> = (0..d).map(|i| drh[i] * c.h[i] * c.r[i] * (1.0 - c.r[i])).collect();
    grads.wr.add_outer(&da_r, &c.x);
    grads.ur.add_outer(&da_r, &c.h);
    add(&mut grads.br, &da_r);
    p.wr.t_mul_add(&da_r, &mut dx);
    p.ur.t_mul_add(&da_r, &mut dh);

    let da_z: Vec<f64> = (0..d)
        .map(|i| dout[i] * (c.n[i] - c.h[i]) * c.z[i] * (1.0 - c.z[i]))
        .collect();
    grads.wz.add_outer(&da_z, &c.x);
    grads.uz.add_outer(&da_z, &c.h);
    add(&mut grads.bz, &da_z);
    p.wz.t_mul_add(&da_z, &mut dx);
    p.uz.t_mul_add(&da_z, &mut dh);

    let dfeat = dx.split_off(d);
    (dh, dx, dfeat)
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
