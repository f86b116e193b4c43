//! Central-difference gradient checking and the standard operator suite.

use crate::attention::{csa_block, AttentionConfig, Correlation, Neighborhood, ProjectionWeights};
use crate::autodiff::{BnStats, Tape, Var};
use crate::blocks::{Block, ConvBlock, CsaBottomBlock, CsaUpBlock, Ctx, DownBlock, Init, UpBlock};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::ops::{ConvGeometry, Mode, RunningStats, BN_EPS};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator, so gradients near zero
    /// are judged by absolute error `rel_tol * scale_floor`.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel_tol: 1e-4,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub dims: Vec<usize>,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, scale_floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Elements whose error at the configured step was within a factor of
    /// ten of the tolerance and that were re-measured with smaller steps.
    pub refined: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub inputs: Vec<InputReport>,
    pub rel_tol: f64,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_abs_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.rel_tol
    }
}

fn scalar_of<F>(op: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = op(&mut tape, &vars)?;
    if !tape.value(y).all_finite() {
        return Err(Error::NonFinite("operation output".into()));
    }
    let s = tape.sum_all(y);
    Ok((tape, vars, s))
}

/// Compares the tape gradient of `sum(op(inputs))` with central differences
/// for every element of every input.
pub fn grad_check<F>(op: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, s) = scalar_of(&op, inputs)?;
    let grads = tape.backward(s)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x))
        .collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut report = InputReport {
            dims: inputs[i].dims().to_vec(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            refined: 0,
        };
        for j in 0..work[i].len() {
            let exact = a.data()[j];
            let mut err = element_error(&op, &mut work, (i, j), cfg.eps, exact, cfg)?;
            if !err.comfortable(cfg) {
                // A ReLU kink inside the step window spoils the central
                // difference; a kink-free smaller step settles it.
                report.refined += 1;
                let mut eps = cfg.eps;
                for _ in 0..REFINEMENTS {
                    eps /= 10.0;
                    err = err.min(element_error(&op, &mut work, (i, j), eps, exact, cfg)?);
                    if err.comfortable(cfg) {
                        break;
                    }
                }
            }
            report.max_abs_err = report.max_abs_err.max(err.abs);
            report.max_rel_err = report.max_rel_err.max(err.rel);
        }
        reports.push(report);
    }
    Ok(CheckReport {
        inputs: reports,
        rel_tol: cfg.rel_tol,
    })
}

/// Smaller steps tried for an element that fails at the configured step.
const REFINEMENTS: usize = 2;

#[derive(Clone, Copy)]
struct ElementError {
    abs: f64,
    rel: f64,
}

impl ElementError {
    /// Well inside the tolerance, so no re-measurement is needed.
    fn comfortable(&self, cfg: &GradCheckConfig) -> bool {
        self.rel < cfg.rel_tol / 10.0
    }

    fn min(self, other: Self) -> Self {
        if other.rel < self.rel || (other.rel == self.rel && other.abs < self.abs) {
            other
        } else {
            self
        }
    }
}

fn element_error<F>(
    op: &F,
    work: &mut [Tensor],
    (i, j): (usize, usize),
    eps: f64,
    exact: f64,
    cfg: &GradCheckConfig,
) -> Result<ElementError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let orig = work[i].data()[j];
    work[i].data_mut()[j] = orig + eps;
    let plus = eval_scalar(op, work);
    work[i].data_mut()[j] = orig - eps;
    let minus = eval_scalar(op, work);
    work[i].data_mut()[j] = orig;

    let numeric = (plus? - minus?) / (2.0 * eps);
    let abs = (exact - numeric).abs();
    let rel = abs / exact.abs().max(numeric.abs()).max(cfg.scale_floor);
    Ok(ElementError { abs, rel })
}

fn eval_scalar<F>(op: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, s) = scalar_of(op, inputs)?;
    tape.value(s).item()
}

/// Checks `sum(p * op(inputs))` for a fixed random `p`, so operators whose
/// plain sum is trivial (normalizations, softmax) still get a real test.
fn projected_check<F>(
    op: F,
    inputs: &[Tensor],
    rng: &mut Rng,
    cfg: &GradCheckConfig,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = op(&mut tape, &vars)?;
    let dims = tape.value(y).dims().to_vec();
    let p = Tensor::rand_uniform(&dims, -1.0, 1.0, rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| {
            let y = op(t, v)?;
            t.mul_const(y, p.clone())
        },
        inputs,
        cfg,
    )
}

/// Gradient check of a parameterized forward with respect to its input and
/// every trainable parameter in `store`.
fn params_check<F>(
    store: &ParamStore,
    x: Tensor,
    mode: Mode,
    project: Option<&mut Rng>,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Ctx<'_>, Var) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let op = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut ctx = Ctx::with_tape(std::mem::take(tape), store, mode);
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            ctx.bind(id, v);
        }
        let y = f(&mut ctx, vars[0]);
        *tape = ctx.into_tape();
        y
    };
    match project {
        Some(rng) => projected_check(op, &inputs, rng, cfg),
        None => grad_check(op, &inputs, cfg),
    }
}

/// Operator names accepted by [`run_suite`].
pub const SUITE_OPS: &[&str] = &[
    "add",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "conv2d",
    "conv2d_transpose",
    "batchnorm",
    "attention",
    "csa",
    "bce",
    "dice",
    "conv_block",
    "down_block",
    "up_block",
    "csa_up_block",
    "csa_bottom_block",
    "network",
];

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub op: &'static str,
    pub label: String,
    pub report: CheckReport,
}

fn shape_label(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Runs the gradient suite with inputs drawn from `seed`, optionally only
/// for one operator. Primitive operators are checked on two shapes each.
pub fn run_suite(seed: u64, only: Option<&str>) -> Result<Vec<SuiteCase>> {
    if let Some(name) = only {
        if !SUITE_OPS.contains(&name) {
            return Err(Error::Usage(format!(
                "unknown op {:?}; expected one of {}",
                name,
                SUITE_OPS.join(", ")
            )));
        }
    }
    let mut cases = Vec::new();
    for (i, &op) in SUITE_OPS.iter().enumerate() {
        if only.is_some_and(|o| o != op) {
            continue;
        }
        let mut rng = Rng::stream(seed, i as u64);
        for (label, report) in run_op(op, &mut rng)? {
            cases.push(SuiteCase { op, label, report });
        }
    }
    Ok(cases)
}

/// Moves values away from the ReLU kink so finite differences never
/// straddle it.
fn off_kink(t: Tensor) -> Tensor {
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn run_op(op: &str, rng: &mut Rng) -> Result<Vec<(String, CheckReport)>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    match op {
        "add" => {
            for dims in [vec![3, 4], vec![1, 2, 3, 3]] {
                let inputs = [
                    Tensor::randn(&dims, 1.0, rng),
                    Tensor::randn(&dims, 1.0, rng),
                ];
                let r = projected_check(|t, v| t.add(v[0], v[1]), &inputs, rng, &cfg)?;
                out.push((shape_label(&dims), r));
            }
        }
        "concat" => {
            for (a, b) in [([1, 2, 3, 3], [1, 1, 3, 3]), ([2, 1, 2, 4], [2, 3, 2, 4])] {
                let inputs = [Tensor::randn(&a, 1.0, rng), Tensor::randn(&b, 1.0, rng)];
                let r = projected_check(|t, v| t.concat_channels(v[0], v[1]), &inputs, rng, &cfg)?;
                out.push((format!("{}+{}", shape_label(&a), shape_label(&b)), r));
            }
        }
        "relu" | "sigmoid" => {
            for dims in [vec![7], vec![1, 2, 4, 4]] {
                let x = off_kink(Tensor::randn(&dims, 1.0, rng));
                let r = if op == "relu" {
                    projected_check(|t, v| Ok(t.relu(v[0])), &[x], rng, &cfg)?
                } else {
                    projected_check(|t, v| Ok(t.sigmoid(v[0])), &[x], rng, &cfg)?
                };
                out.push((shape_label(&dims), r));
            }
        }
        "softmax" => {
            for dims in [vec![5], vec![3, 2, 7]] {
                let x = Tensor::randn(&dims, 2.0, rng);
                let r = projected_check(|t, v| t.softmax_lastdim(v[0]), &[x], rng, &cfg)?;
                out.push((shape_label(&dims), r));
            }
        }
        "conv2d" => {
            for (x, k, s, p) in [
                ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
                ([2, 3, 6, 5], [2, 3, 3, 3], 2, 0),
            ] {
                let inputs = [
                    Tensor::randn(&x, 1.0, rng),
                    Tensor::randn(&k, 0.5, rng),
                    Tensor::randn(&[k[0]], 0.5, rng),
                ];
                let g = ConvGeometry::new(s, p);
                let r = projected_check(|t, v| t.conv2d(v[0], v[1], v[2], g), &inputs, rng, &cfg)?;
                out.push((
                    format!("{}*{}/s{}p{}", shape_label(&x), shape_label(&k), s, p),
                    r,
                ));
            }
        }
        "conv2d_transpose" => {
            for (x, k, s, p) in [
                ([1, 2, 3, 3], [2, 3, 2, 2], 2, 0),
                ([2, 2, 4, 3], [2, 1, 3, 3], 2, 1),
            ] {
                let inputs = [
                    Tensor::randn(&x, 1.0, rng),
                    Tensor::randn(&k, 0.5, rng),
                    Tensor::randn(&[k[1]], 0.5, rng),
                ];
                let g = ConvGeometry::new(s, p);
                let r = projected_check(
                    |t, v| t.conv2d_transpose(v[0], v[1], v[2], g),
                    &inputs,
                    rng,
                    &cfg,
                )?;
                out.push((
                    format!("{}*{}/s{}p{}", shape_label(&x), shape_label(&k), s, p),
                    r,
                ));
            }
        }
        "batchnorm" => {
            for dims in [[2, 3, 3, 3], [1, 2, 4, 5]] {
                let c = dims[1];
                let inputs = [
                    Tensor::randn(&dims, 2.0, rng).map(|v| v + 1.0),
                    Tensor::rand_uniform(&[c], 0.5, 1.5, rng),
                    Tensor::randn(&[c], 1.0, rng),
                ];
                let r = projected_check(
                    |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BN_EPS, BnStats::Batch)?.0),
                    &inputs,
                    rng,
                    &cfg,
                )?;
                out.push((format!("train/{}", shape_label(&dims)), r));

                let rs = RunningStats {
                    mean: Tensor::randn(&[c], 1.0, rng),
                    var: Tensor::rand_uniform(&[c], 0.5, 2.0, rng),
                };
                let r = projected_check(
                    |t, v| {
                        Ok(
                            t.batch_norm(v[0], v[1], v[2], BN_EPS, BnStats::Running(&rs))?
                                .0,
                        )
                    },
                    &inputs,
                    rng,
                    &cfg,
                )?;
                out.push((format!("eval/{}", shape_label(&dims)), r));
            }
        }
        "attention" => {
            for nb in [Neighborhood::CrissCross, Neighborhood::Full] {
                for mode in [Correlation::Covariance, Correlation::Dot] {
                    for (q, v) in [([1, 2, 3, 4], [1, 3, 3, 4]), ([2, 3, 2, 2], [2, 2, 2, 2])] {
                        let inputs = [
                            Tensor::randn(&q, 1.0, rng),
                            Tensor::randn(&q, 1.0, rng),
                            Tensor::randn(&v, 1.0, rng),
                        ];
                        let r = projected_check(
                            |t, x| t.attention(x[0], x[1], x[2], mode, nb),
                            &inputs,
                            rng,
                            &cfg,
                        )?;
                        out.push((format!("{nb}/{mode}/{}", shape_label(&q)), r));
                    }
                }
            }
        }
        "csa" => {
            for mode in [Correlation::Covariance, Correlation::Dot] {
                for (dims, loops) in [([1, 8, 4, 4], 1), ([1, 3, 2, 5], 2)] {
                    let acfg = AttentionConfig {
                        mode,
                        loops,
                        ..AttentionConfig::default()
                    };
                    let w = ProjectionWeights::init(dims[1], &acfg, rng);
                    let inputs = [
                        Tensor::randn(&dims, 1.0, rng),
                        w.wq,
                        Tensor::randn(w.bq.dims(), 0.1, rng),
                        w.wk,
                        Tensor::randn(w.bk.dims(), 0.1, rng),
                        w.wv,
                        Tensor::randn(w.bv.dims(), 0.1, rng),
                    ];
                    let r = projected_check(
                        |t, v| {
                            let vars = crate::attention::ProjectionVars {
                                wq: v[1],
                                bq: v[2],
                                wk: v[3],
                                bk: v[4],
                                wv: v[5],
                                bv: v[6],
                            };
                            csa_block(t, v[0], &vars, &acfg)
                        },
                        &inputs,
                        rng,
                        &cfg,
                    )?;
                    out.push((format!("{mode}/loops{loops}/{}", shape_label(&dims)), r));
                }
            }
        }
        "bce" | "dice" => {
            for dims in [[1, 1, 4, 4], [2, 1, 3, 3]] {
                let z = Tensor::randn(&dims, 2.0, rng);
                let target = Tensor::from_fn(&dims, |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
                let r = if op == "bce" {
                    grad_check(|t, v| t.bce_with_logits(v[0], &target), &[z], &cfg)?
                } else {
                    grad_check(
                        |t, v| t.soft_dice(v[0], &target, crate::training::loss::DICE_SMOOTH),
                        &[z],
                        &cfg,
                    )?
                };
                out.push((shape_label(&dims), r));
            }
        }
        "conv_block" | "down_block" | "up_block" | "csa_up_block" | "csa_bottom_block" => {
            let shapes: [[usize; 4]; 2] = match op {
                "conv_block" => [[1, 2, 6, 6], [2, 3, 4, 4]],
                "down_block" => [[1, 2, 4, 4], [2, 2, 6, 4]],
                "up_block" => [[1, 4, 3, 3], [2, 2, 2, 3]],
                "csa_up_block" => [[1, 4, 4, 4], [1, 2, 2, 3]],
                _ => [[1, 4, 4, 4], [2, 8, 3, 4]],
            };
            for dims in shapes {
                let c = dims[1];
                let mut store = ParamStore::new();
                let acfg = AttentionConfig::default();
                let block: Box<dyn Block> = {
                    let mut init = Init {
                        store: &mut store,
                        rng: &mut *rng,
                    };
                    match op {
                        "conv_block" => Box::new(ConvBlock::new(&mut init, "b", c)?),
                        "down_block" => Box::new(DownBlock::doubling(&mut init, "b", c)?),
                        "up_block" => Box::new(UpBlock::halving(&mut init, "b", c)?),
                        "csa_up_block" => Box::new(CsaUpBlock::halving(&mut init, "b", c, &acfg)?),
                        _ => Box::new(CsaBottomBlock::new(&mut init, "b", c, &acfg)?),
                    }
                };
                randomize_affine(&mut store, rng);
                let x = Tensor::randn(&dims, 1.0, rng);
                let r = params_check(&store, x, Mode::Train, Some(&mut *rng), &cfg, |ctx, x| {
                    block.forward(ctx, x)
                })?;
                out.push((shape_label(&dims), r));
            }
        }
        "network" => {
            let ncfg = NetworkConfig {
                levels: 2,
                base_channels: 2,
                attention_enabled: true,
                seed: rng.next_u64(),
                ..NetworkConfig::default()
            };
            let mut net = Network::build(&ncfg)?;
            randomize_affine(&mut net.params, rng);
            let x = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, rng);
            let loose = GradCheckConfig {
                rel_tol: 1e-3,
                ..cfg
            };
            let r = params_check(&net.params, x, Mode::Train, None, &loose, |ctx, x| {
                net.record(ctx, x)
            })?;
            out.push(("levels2/base2/1x1x16x16".to_string(), r));
        }
        _ => unreachable!("op names are validated by run_suite"),
    }
    Ok(out)
}

/// Perturbs the freshly initialized biases and batch-norm affine parameters
/// (all zeros or ones at init) so their gradients are exercised in a generic
/// position.
fn randomize_affine(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v = rng.uniform_range(0.5, 1.5);
            }
        } else if name.ends_with(".beta")
            || name.ends_with(".bias")
            || name.ends_with(".bq")
            || name.ends_with(".bk")
            || name.ends_with(".bv")
        {
            for v in t.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
}
