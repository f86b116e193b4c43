//! Deterministic mini-batch training with flip augmentation and Adam.

use serde::{Deserialize, Serialize};

use crate::blocks::{apply_bn_updates, Ctx};
use crate::error::{config_err, Result};
use crate::metrics::{confusion, metrics_from_counts};
use crate::network::Network;
use crate::ops::Mode;
use crate::params::ParamId;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::adam::{Adam, AdamConfig};
use crate::training::data::Dataset;
use crate::training::loss::DICE_SMOOTH;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
    BcePlusDice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub adam: AdamConfig,
    /// Drives batch order and augmentation.
    pub seed: u64,
    /// Random horizontal and vertical flips, each with probability 0.5.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            loss: LossKind::Bce,
            adam: AdamConfig::default(),
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(config_err!("steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        // zero is allowed so that a run can exercise everything but the update
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    /// Mean hard Dice of the batch at threshold 0.5, before the update.
    pub train_dice: f64,
}

/// Flips every `[.., H, W]` plane of an `[N, C, H, W]` tensor.
pub fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Result<Tensor> {
    let [n, c, h, w] = t.dims4()?;
    let src = t.data();
    let mut out = Tensor::zeros(t.dims());
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..h {
            let sr = if vertical { h - 1 - r } else { r };
            for col in 0..w {
                let sc = if horizontal { w - 1 - col } else { col };
                dst[base + r * w + col] = src[base + sr * w + sc];
            }
        }
    }
    Ok(out)
}

/// Endless reshuffled pass over `0..len`.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws the batch for one step, applying augmentation per sample.
fn draw_batch(
    data: &Dataset,
    sampler: &mut Sampler,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::with_capacity(cfg.batch_size);
    let mut masks = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let i = sampler.next(rng);
        let (mut x, mut y) = data.batch(&[i])?;
        if cfg.augment {
            let (hf, vf) = (rng.bernoulli(0.5), rng.bernoulli(0.5));
            x = flip(&x, hf, vf)?;
            y = flip(&y, hf, vf)?;
        }
        images.push(x.index_outer(0)?);
        masks.push(y.index_outer(0)?);
    }
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Mean per-sample hard Dice of logits against `[N, 1, H, W]` masks.
pub fn batch_dice(logits: &Tensor, masks: &Tensor) -> Result<f64> {
    let n = logits.dims4()?[0];
    let mut total = 0.0;
    for k in 0..n {
        let pred = logits
            .index_outer(k)?
            .map(|z| if z >= 0.0 { 1.0 } else { 0.0 });
        total += metrics_from_counts(&confusion(&pred, &masks.index_outer(k)?)?).dice;
    }
    Ok(total / n as f64)
}

/// Loss value, logits and trainable-parameter gradients of one batch.
pub type BatchResult = (f64, Tensor, Vec<(ParamId, Tensor)>);

/// Loss value and parameter gradients for one batch in training mode. Batch
/// statistics are folded into the running averages.
pub fn loss_and_grads(
    net: &mut Network,
    images: &Tensor,
    masks: &Tensor,
    loss: LossKind,
) -> Result<BatchResult> {
    let (value, logits, grads, updates) = {
        let mut ctx = Ctx::new(&net.params, Mode::Train);
        let x = ctx.tape.leaf(images.clone());
        let z = net.record(&mut ctx, x)?;
        let mut l = ctx.tape.bce_with_logits(z, masks)?;
        if loss == LossKind::BcePlusDice {
            let d = ctx.tape.soft_dice(z, masks, DICE_SMOOTH)?;
            l = ctx.tape.add(l, d)?;
        }
        let g = ctx.tape.backward(l)?;
        let grads: Vec<(ParamId, Tensor)> = ctx
            .bound_params()
            .filter(|&(id, _)| net.params.is_trainable(id))
            .map(|(id, v)| (id, g.get_or_zeros(v, net.params.get(id))))
            .collect();
        let value = ctx.tape.value(l).item()?;
        let logits = ctx.tape.value(z).clone();
        (value, logits, grads, ctx.take_bn_updates())
    };
    apply_bn_updates(&mut net.params, &updates);
    Ok((value, logits, grads))
}

/// Trains `net` in place and returns one history entry per step.
pub fn train_loop(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryEntry>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config_err!("training data is empty"));
    }
    let [h, w] = data.image_dims().expect("non-empty");
    net.check_input(&[cfg.batch_size, 1, h, w])?;

    let mut rng = Rng::new(cfg.seed);
    let mut sampler = Sampler::new(data.len(), &mut rng);
    let mut adam = Adam::new(&net.params, cfg.adam)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (images, masks) = draw_batch(data, &mut sampler, &mut rng, cfg)?;
        let (loss, logits, grads) = loss_and_grads(net, &images, &masks, cfg.loss)?;
        if !loss.is_finite() {
            return Err(crate::error::Error::NonFinite(format!(
                "loss at step {step}"
            )));
        }
        adam.step(&mut net.params, &grads, cfg.learning_rate)?;
        history.push(HistoryEntry {
            step,
            loss,
            train_dice: batch_dice(&logits, &masks)?,
        });
    }
    Ok(history)
}

/// History as CSV with a `step,loss,train_dice` header.
pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("step,loss,train_dice\n");
    for e in history {
        out.push_str(&format!("{},{:?},{:?}\n", e.step, e.loss, e.train_dice));
    }
    out
}
