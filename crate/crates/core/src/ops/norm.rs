//! Per-channel batch normalization over `(N, H, W)`.

use crate::error::{config_err, shape_err, Error, Result};
use crate::ops::Mode;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each training update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running mean and (population) variance, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// Exponential moving average toward a batch's statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_params(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    let c = dims[1];
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_err!(
            "batchnorm over {} channels got gamma {:?}, beta {:?}",
            c,
            gamma.dims(),
            beta.dims()
        ));
    }
    if !(eps > 0.0) {
        return Err(config_err!("batchnorm eps must be > 0, got {}", eps));
    }
    Ok(dims)
}

fn normalize(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.dims4().expect("checked rank");
    let plane = h * w;
    let mut y = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (g, bt, mu, inv) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + plane {
                let xh = (x.data()[i] - mu) * inv;
                x_hat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let dims = x.dims().to_vec();
    (
        Tensor::new(dims.clone(), y).expect("same length"),
        Tensor::new(dims, x_hat).expect("same length"),
    )
}

/// Training-mode forward: normalizes with the batch's own statistics.
pub fn batchnorm2d_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnCache, BatchStats)> {
    let [n, c, h, w] = check_params(x, gamma, beta, eps)?;
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(Error::DegenerateBatch(format!(
            "training-mode batchnorm needs N*H*W >= 2, got {}",
            count
        )));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            acc += xd[base..base + plane].iter().sum::<f64>();
        }
        let mu = acc / count as f64;
        let mut sq = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            sq += xd[base..base + plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, x_hat) = normalize(x, gamma, beta, &mean, &inv_std);
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            mode: Mode::Train,
        },
        BatchStats { mean, var },
    ))
}

/// Inference-mode forward: normalizes with running statistics.
pub fn batchnorm2d_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    running: &RunningStats,
) -> Result<(Tensor, BnCache)> {
    let [_, c, _, _] = check_params(x, gamma, beta, eps)?;
    if running.mean.dims() != [c] || running.var.dims() != [c] {
        return Err(shape_err!("running stats do not cover {} channels", c));
    }
    let inv_std: Vec<f64> = running
        .var
        .data()
        .iter()
        .map(|v| 1.0 / (v + eps).sqrt())
        .collect();
    let (y, x_hat) = normalize(x, gamma, beta, running.mean.data(), &inv_std);
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            mode: Mode::Eval,
        },
    ))
}

/// Batch normalization with the running statistics as an in/out parameter:
/// training mode folds the batch statistics into `running`.
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (y, _, stats) = batchnorm2d_train(x, gamma, beta, eps)?;
            running.update(&stats.mean, &stats.var);
            Ok(y)
        }
        Mode::Eval => batchnorm2d_eval(x, gamma, beta, eps, running).map(|(y, _)| y),
    }
}

/// Gradients with respect to input, gamma and beta.
pub fn batchnorm2d_backward(
    cache: &BnCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    cache.x_hat.expect_same_dims(grad_out)?;
    let [n, c, h, w] = grad_out.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let (gd, xh) = (grad_out.data(), cache.x_hat.data());
    let mut gx = vec![0.0; grad_out.len()];
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                sum_dy += gd[i];
                sum_dy_xh += gd[i] * xh[i];
            }
        }
        g_beta[ch] = sum_dy;
        g_gamma[ch] = sum_dy_xh;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = match cache.mode {
                    Mode::Eval => scale * gd[i],
                    Mode::Train => scale * (gd[i] - sum_dy / count - xh[i] * sum_dy_xh / count),
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.dims().to_vec(), gx)?,
        Tensor::new(vec![c], g_gamma)?,
        Tensor::new(vec![c], g_beta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn channel_moments(y: &Tensor, ch: usize) -> (f64, f64) {
        let [n, _, h, w] = y.dims4().unwrap();
        let mut vals = Vec::new();
        for b in 0..n {
            for r in 0..h {
                for c in 0..w {
                    vals.push(y.at(&[b, ch, r, c]));
                }
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[4, 3, 6, 6], 3.0, &mut rng).map(|v| v + 7.0);
        let mut rs = RunningStats::new(3);
        let y = batchnorm2d(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            BN_EPS,
            Mode::Train,
            &mut rs,
        )
        .unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
        // running mean moved 10% of the way toward ~7
        assert!(rs.mean.data().iter().all(|&m| (m - 0.7).abs() < 0.1));
    }

    #[test]
    fn affine_parameters_shift_and_scale() {
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
        let mut rs = RunningStats::new(2);
        let y = batchnorm2d(
            &x,
            &Tensor::full(&[2], 2.0),
            &Tensor::full(&[2], 3.0),
            BN_EPS,
            Mode::Train,
            &mut rs,
        )
        .unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!((m - 3.0).abs() < 1e-6);
            assert!((v - 4.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.5);
        let mut rs = RunningStats::new(1);
        let y = batchnorm2d(
            &x,
            &Tensor::ones(&[1]),
            &Tensor::zeros(&[1]),
            BN_EPS,
            Mode::Train,
            &mut rs,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::full(&[1, 1, 1, 1], 3.0);
        let mut rs = RunningStats {
            mean: Tensor::full(&[1], 1.0),
            var: Tensor::full(&[1], 4.0 - BN_EPS),
        };
        let y = batchnorm2d(
            &x,
            &Tensor::ones(&[1]),
            &Tensor::zeros(&[1]),
            BN_EPS,
            Mode::Eval,
            &mut rs,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let (g, b) = (Tensor::ones(&[1]), Tensor::zeros(&[1]));
        let mut rs = RunningStats::new(1);
        assert!(matches!(
            batchnorm2d(&x, &g, &b, BN_EPS, Mode::Train, &mut rs),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            batchnorm2d(&x, &g, &b, 0.0, Mode::Eval, &mut rs),
            Err(Error::InvalidConfig(_))
        ));
    }
}
