//! Central finite differences against hand-written gradients.

/// Parameter containers expose their storage as named flat blocks, in a fixed
/// order, so optimizers and gradient checks can walk them generically.
pub trait Params: Clone {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, b) in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// `self += a · other`, block by block.
    fn axpy(&mut self, a: f64, other: &Self) {
        let src = other.blocks();
        for ((_, dst), (_, s)) in self.blocks_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s) {
                *d += a * x;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    fn n_scalars(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

pub const FD_EPS: f64 = 1e-5;

/// Norms below this are treated as zero gradients; central differences carry
/// roughly `1e-16 / eps` of rounding noise.
const NORM_FLOOR: f64 = 1e-6;

pub fn numeric_grad<P: Params>(p: &P, eps: f64, f: impl Fn(&P) -> f64) -> P {
    let mut out = p.zeros_like();
    let shape: Vec<usize> = p.blocks().iter().map(|(_, b)| b.len()).collect();
    let mut work = p.clone();
    for (bi, &len) in shape.iter().enumerate() {
        for i in 0..len {
            let orig = work.blocks_mut()[bi].1[i];
            work.blocks_mut()[bi].1[i] = orig + eps;
            let plus = f(&work);
            work.blocks_mut()[bi].1[i] = orig - eps;
            let minus = f(&work);
            work.blocks_mut()[bi].1[i] = orig;
            out.blocks_mut()[bi].1[i] = (plus - minus) / (2.0 * eps);
        }
    }
    out
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` for one block.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Per-block relative errors, named.
pub fn compare<P: Params>(analytic: &P, numeric: &P) -> Vec<(String, f64)> {
    analytic
        .blocks()
        .into_iter()
        .zip(numeric.blocks())
        .map(|((name, a), (_, n))| (name, relative_error(a, n)))
        .collect()
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}

/// Plain vector as a single block.
#[derive(Clone, Debug, PartialEq)]
pub struct Flat(pub Vec<f64>);

impl Params for Flat {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![("x".into(), &self.0)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("x".into(), &mut self.0)]
    }
}
