use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Per-parameter gradients in id order; `None` means zero.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

/// Mean loss and mean parameter gradient over `batch`, one tape per example.
///
/// Examples run in parallel but are reduced in batch order, so the result
/// does not depend on the thread count.
pub fn batch_gradients<T, F>(store: &ParamStore, batch: &[T], loss: F) -> Result<(f64, ParamGrads)>
where
    T: Sync,
    F: Fn(&mut Tape, &T) -> Result<Var> + Sync,
{
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::with_params(store);
            let l = loss(&mut tape, ex)?;
            let value = tape.value(l).item();
            Ok((value, tape.backward(l)?.into_param_grads(store.len())))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: ParamGrads = vec![None; store.len()];
    for (value, g) in parts {
        total += value;
        for (slot, part) in grads.iter_mut().zip(g) {
            if let Some(part) = part {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, p)| *a += p),
                    None => *slot = Some(part),
                }
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grads))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`,
    /// `None` meaning zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
