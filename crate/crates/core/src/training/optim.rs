use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u32,
}

impl<T: Real> AdamW<T> {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    /// One update of `params` with gradients `grads` at rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::dim("AdamW::step", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
                let gj = g.as_slice()[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let update = (mj / c1) / ((vj / c2).sqrt() + self.eps);
                let wj = w.as_f64();
                *w = T::from_f64_lossy(wj - lr * (update + self.weight_decay * wj));
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global Frobenius norm is at most `max_norm`
/// (no-op when `max_norm` is 0) and returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}
