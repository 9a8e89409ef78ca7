use alloc::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Adam with bias correction. Only ids passed to [`Adam::step`] are touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<'g>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (ParamId, &'g Matrix)>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (id, g) in grads {
            if !store.entry(id).kind.is_trainable() {
                return Err(Error::Training(alloc::format!(
                    "optimizer asked to update frozen tensor `{}`",
                    store.entry(id).name
                )));
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let p = store.value_mut(id);
            let it = p.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice());
            for (((p, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Matrix>, max_norm: f64) -> f64 {
    let mut grads: alloc::vec::Vec<&mut Matrix> = grads.into_iter().collect();
    let norm = libm::sqrt(grads.iter().map(|g| g.sum_squares()).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamKind};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::from_rows(&[[1.0, -1.0]]), ParamKind::Trainable, ParamGroup::Encoder).unwrap();
        let mut opt = Adam::new(0.1);
        let g = Matrix::from_rows(&[[2.0, -3.0]]);
        opt.step(&mut store, [(id, &g)]).unwrap();
        let v = store.value(id).as_slice();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_refuses_frozen() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::scalar(1.0), ParamKind::Frozen, ParamGroup::Encoder).unwrap();
        let g = Matrix::scalar(1.0);
        assert!(Adam::new(0.1).step(&mut store, [(id, &g)]).is_err());
        assert_eq!(store.value(id).as_slice(), &[1.0]);
    }

    #[test]
    fn clipping() {
        let mut a = Matrix::from_rows(&[[3.0]]);
        let mut b = Matrix::from_rows(&[[4.0]]);
        let n = clip_global_norm([&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.get(0, 0) - 0.6).abs() < 1e-12 && (b.get(0, 0) - 0.8).abs() < 1e-12);
        let mut c = Matrix::from_rows(&[[0.1]]);
        clip_global_norm([&mut c], 1.0);
        assert_eq!(c.get(0, 0), 0.1);
    }
}
