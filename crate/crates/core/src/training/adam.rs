//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(config_err!(
                "adam needs betas in [0, 1) and eps > 0, got {:?}",
                self
            ));
        }
        Ok(())
    }
}

/// One Adam update of a single tensor at step `t >= 1`:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    param.expect_same_dims(grad)?;
    param.expect_same_dims(m)?;
    param.expect_same_dims(v)?;
    if t < 1 {
        return Err(config_err!("adam step count starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Moment estimates for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            t: 0,
            m: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            v: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
        }
    }
}

/// Advances `state` by one step and updates every tensor in `params`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(crate::error::shape_err!(
            "adam got {} params, {} grads and state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        adam_update(p, g, &mut state.m[i], &mut state.v[i], state.t, lr, cfg)?;
    }
    Ok(())
}

/// Adam over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let moments = store
            .ids()
            .map(|id| {
                store.is_trainable(id).then(|| {
                    let d = store.get(id).dims();
                    (Tensor::zeros(d), Tensor::zeros(d))
                })
            })
            .collect();
        Ok(Self { cfg, t: 0, moments })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates the parameters with gradients; trainable parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let mut by_id: Vec<Option<&Tensor>> = vec![None; self.moments.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some((m, v)) = self.moments[id.index()].as_mut() else {
                continue;
            };
            let zero;
            let g = match by_id[id.index()] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(m.dims());
                    &zero
                }
            };
            adam_update(store.get_mut(id), g, m, v, self.t, lr, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(g: f64, steps: u64, lr: f64) -> Vec<f64> {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor::zeros(&[1])];
        let mut state = AdamState::new(&[&[1]]);
        let mut deltas = Vec::new();
        for _ in 0..steps {
            let before = p[0].data()[0];
            adam_step(&mut p, &[Tensor::full(&[1], g)], &mut state, lr, &cfg).unwrap();
            deltas.push(p[0].data()[0] - before);
        }
        deltas
    }

    #[test]
    fn zero_gradient_leaves_params() {
        assert!(run(0.0, 50, 1e-3).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn first_step_is_normalized() {
        let lr = 1e-3;
        for g in [3.0, -0.02, 1e-3] {
            let d = run(g, 1, lr)[0];
            // m_hat = g and v_hat = g^2 exactly after bias correction
            let want = -lr * g / (g.abs() + 1e-8);
            assert!((d - want).abs() < 1e-15, "{d} vs {want}");
            assert!((d + lr * g.signum()).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let lr = 1e-3;
        for g in [0.5, -2.0] {
            let d = *run(g, 1000, lr).last().unwrap();
            assert!(((d.abs() - lr) / lr).abs() < 0.01);
            assert_eq!(d.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(vec![2], vec![0.3, -1.0]).unwrap(), true)
            .unwrap();
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        for _ in 0..5 {
            adam.step(&mut store, &[(id, Tensor::ones(&[2]))], 0.0)
                .unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&[&[2]]);
        let err = adam_step(
            &mut p,
            &[Tensor::zeros(&[3])],
            &mut state,
            1e-3,
            &AdamConfig::default(),
        );
        assert!(err.is_err());
    }
}
