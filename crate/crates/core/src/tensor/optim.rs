use super::params::{ParamGroup, ParameterStore};
use crate::error::{CdapError, Result};
use crate::scalar::{lit, Scalar};

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, peak_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let remaining = (total_steps - warmup_steps) as f64;
    if remaining == 0.0 {
        return peak_lr;
    }
    peak_lr * (total_steps - step) as f64 / remaining
}

/// Learning rate applied to each parameter group for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            encoder: lr,
            head: lr,
        }
    }

    fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// Applies one update from the accumulated gradients, then clears them.
    ///
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step<T: Scalar>(&self, store: &mut ParameterStore<T>, rates: GroupRates) -> Result<()> {
        if let Some((_, bad)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(CdapError::Divergence {
                step: store.step as usize,
                episode: 0,
                message: format!("non-finite gradient for `{}`", bad.name),
            });
        }
        store.step += 1;
        let t = store.step as i32;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let eps = lit::<T>(self.eps);
        let decay = lit::<T>(self.weight_decay);
        for p in store.params_mut() {
            let lr = lit::<T>(rates.for_group(p.group));
            let n = p.value.len();
            let (value, grad) = (p.value.as_mut_slice(), p.grad.as_mut_slice());
            let m = p.first_moment.as_mut_slice();
            let v = p.second_moment.as_mut_slice();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * value[i]);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}
