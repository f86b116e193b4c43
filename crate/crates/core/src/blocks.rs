//! Residual building blocks: plain conv block, stride-2 down block,
//! deconvolution up block, the attention-embedded variants and the skip
//! fusion block used by the network.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`] and record their forward
//! pass on the tape of a [`Ctx`].

use crate::attention::{csa_block, AttentionConfig, ProjectionVars};
use crate::autodiff::{BnStats, Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::ops::{BatchStats, ConvGeometry, Mode, RunningStats, BN_EPS};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Batch statistics a training-mode forward wants folded into the running
/// averages of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Forward-pass state: the tape, lazily bound parameter leaves and pending
/// batch-norm updates.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::with_tape(Tape::new(), store, mode)
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Makes `id` resolve to an existing tape value instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.index()] = Some(v);
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle of a parameter, creating the leaf on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.index()] = Some(v);
        v
    }

    /// Parameters that were used by the recorded forward pass.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.store
            .ids()
            .filter_map(|id| self.bound[id.index()].map(|v| (id, v)))
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let mut rs = RunningStats {
            mean: store.get(u.running_mean).clone(),
            var: store.get(u.running_var).clone(),
        };
        rs.update(&u.stats.mean, &u.stats.var);
        *store.get_mut(u.running_mean) = rs.mean;
        *store.get_mut(u.running_var) = rs.var;
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    /// Kaiming-normal kernel `[c_out, c_in, k, k]` and zero bias.
    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeometry,
    ) -> Result<Conv> {
        let std = (2.0 / (c_in * k * k).max(1) as f64).sqrt();
        let weight = Tensor::randn(&[c_out, c_in, k, k], std, self.rng);
        Ok(Conv {
            weight: self.store.add(format!("{name}.weight"), weight, true)?,
            bias: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true)?,
            geom,
            transposed: false,
        })
    }

    /// Transposed convolution with kernel `[c_in, c_out, k, k]`. Each output
    /// pixel receives `c_in * (k / stride)^2` terms, which is used as fan-in.
    pub fn deconv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeometry,
    ) -> Result<Conv> {
        let per_axis = (k / geom.stride.max(1)).max(1);
        let std = (2.0 / (c_in * per_axis * per_axis).max(1) as f64).sqrt();
        let weight = Tensor::randn(&[c_in, c_out, k, k], std, self.rng);
        Ok(Conv {
            weight: self.store.add(format!("{name}.weight"), weight, true)?,
            bias: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true)?,
            geom,
            transposed: true,
        })
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        let rs = RunningStats::new(c);
        Ok(BatchNorm {
            gamma: self
                .store
                .add(format!("{name}.gamma"), Tensor::ones(&[c]), true)?,
            beta: self
                .store
                .add(format!("{name}.beta"), Tensor::zeros(&[c]), true)?,
            running_mean: self
                .store
                .add(format!("{name}.running_mean"), rs.mean, false)?,
            running_var: self
                .store
                .add(format!("{name}.running_var"), rs.var, false)?,
        })
    }

    pub fn csa(&mut self, name: &str, d: usize, cfg: &AttentionConfig) -> Result<Csa> {
        cfg.validate()?;
        let w = crate::attention::ProjectionWeights::init(d, cfg, self.rng);
        let mut add = |suffix: &str, t: Tensor| self.store.add(format!("{name}.{suffix}"), t, true);
        Ok(Csa {
            proj: [
                add("wq", w.wq)?,
                add("bq", w.bq)?,
                add("wk", w.wk)?,
                add("bk", w.bk)?,
                add("wv", w.wv)?,
                add("bv", w.bv)?,
            ],
            cfg: *cfg,
        })
    }
}

/// Something with a recorded forward pass.
pub trait Block {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var>;

    /// Runs the block on a plain tensor, folding any batch statistics into
    /// the store's running averages.
    fn forward_tensor(&self, store: &mut ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, updates) = {
            let mut ctx = Ctx::new(store, mode);
            let xv = ctx.tape.leaf(x.clone());
            let yv = self.forward(&mut ctx, xv)?;
            (ctx.tape.value(yv).clone(), ctx.take_bn_updates())
        };
        apply_bn_updates(store, &updates);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    pub transposed: bool,
}

impl Block for Conv {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (k, b) = (ctx.param(self.weight), ctx.param(self.bias));
        if self.transposed {
            ctx.tape.conv2d_transpose(x, k, b, self.geom)
        } else {
            ctx.tape.conv2d(x, k, b, self.geom)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Block for BatchNorm {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, BN_EPS, BnStats::Batch)?;
                if let Some(stats) = stats {
                    ctx.bn_updates.push(BnUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let rs = RunningStats {
                    mean: ctx.store.get(self.running_mean).clone(),
                    var: ctx.store.get(self.running_var).clone(),
                };
                Ok(ctx
                    .tape
                    .batch_norm(x, g, b, BN_EPS, BnStats::Running(&rs))?
                    .0)
            }
        }
    }
}

/// Attention branch without residual.
#[derive(Clone, Debug)]
pub struct Csa {
    /// `wq, bq, wk, bk, wv, bv`
    pub proj: [ParamId; 6],
    pub cfg: AttentionConfig,
}

impl Csa {
    pub fn wv(&self) -> ParamId {
        self.proj[4]
    }
}

impl Block for Csa {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let p = self.proj.map(|id| ctx.param(id));
        let vars = ProjectionVars {
            wq: p[0],
            bq: p[1],
            wk: p[2],
            bk: p[3],
            wv: p[4],
            bv: p[5],
        };
        csa_block(&mut ctx.tape, x, &vars, &self.cfg)
    }
}

fn bn_relu(ctx: &mut Ctx<'_>, conv: &Conv, bn: &BatchNorm, x: Var) -> Result<Var> {
    let y = conv.forward(ctx, x)?;
    let y = bn.forward(ctx, y)?;
    Ok(ctx.tape.relu(y))
}

/// `ReLU(BN(conv(x)))` lifting the single input channel to the base width.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: init.conv(
                &format!("{name}.conv"),
                c_in,
                c_out,
                3,
                ConvGeometry::new(1, 1),
            )?,
            bn: init.bn(&format!("{name}.bn"), c_out)?,
        })
    }
}

impl Block for Stem {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        bn_relu(ctx, &self.conv, &self.bn, x)
    }
}

/// `y = ReLU(BN(conv3x3(ReLU(BN(conv3x3(x))))) + x)`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl ConvBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Result<Self> {
        let same = ConvGeometry::new(1, 1);
        Ok(Self {
            conv1: init.conv(&format!("{name}.conv1"), c, c, 3, same)?,
            bn1: init.bn(&format!("{name}.bn1"), c)?,
            conv2: init.conv(&format!("{name}.conv2"), c, c, 3, same)?,
            bn2: init.bn(&format!("{name}.bn2"), c)?,
        })
    }
}

impl Block for ConvBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = bn_relu(ctx, &self.conv1, &self.bn1, x)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let s = ctx.tape.add(h, x)?;
        Ok(ctx.tape.relu(s))
    }
}

/// Stride-2 residual block: 3x3/s2 conv, BN/ReLU, 3x3 conv, BN, plus a
/// 1x1/s2 projection shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Conv,
}

impl DownBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: init.conv(
                &format!("{name}.conv1"),
                c_in,
                c_out,
                3,
                ConvGeometry::new(2, 1),
            )?,
            bn1: init.bn(&format!("{name}.bn1"), c_out)?,
            conv2: init.conv(
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                ConvGeometry::new(1, 1),
            )?,
            bn2: init.bn(&format!("{name}.bn2"), c_out)?,
            shortcut: init.conv(
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                1,
                ConvGeometry::new(2, 0),
            )?,
        })
    }

    /// The channel-doubling variant.
    pub fn doubling(init: &mut Init<'_>, name: &str, c: usize) -> Result<Self> {
        Self::new(init, name, c, 2 * c)
    }
}

impl Block for DownBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.tape.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatialDim(format!(
                "down block needs even spatial dims, got {}x{}",
                h, w
            )));
        }
        let m = bn_relu(ctx, &self.conv1, &self.bn1, x)?;
        let m = self.conv2.forward(ctx, m)?;
        let m = self.bn2.forward(ctx, m)?;
        let s = self.shortcut.forward(ctx, x)?;
        let y = ctx.tape.add(m, s)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Upsampling residual block: 2x2/s2 deconvolution, BN/ReLU, 3x3 conv, BN,
/// plus a 2x2/s2 deconvolution shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub deconv: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Conv,
}

impl UpBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let up = ConvGeometry::new(2, 0);
        Ok(Self {
            deconv: init.deconv(&format!("{name}.deconv"), c_in, c_out, 2, up)?,
            bn1: init.bn(&format!("{name}.bn1"), c_out)?,
            conv2: init.conv(
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                ConvGeometry::new(1, 1),
            )?,
            bn2: init.bn(&format!("{name}.bn2"), c_out)?,
            shortcut: init.deconv(&format!("{name}.shortcut"), c_in, c_out, 2, up)?,
        })
    }

    /// The channel-halving variant; `c` must be even.
    pub fn halving(init: &mut Init<'_>, name: &str, c: usize) -> Result<Self> {
        if c < 2 || !c.is_multiple_of(2) {
            return Err(config_err!(
                "up block halves channels, needs an even count, got {}",
                c
            ));
        }
        Self::new(init, name, c, c / 2)
    }
}

impl Block for UpBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let m = bn_relu(ctx, &self.deconv, &self.bn1, x)?;
        let m = self.conv2.forward(ctx, m)?;
        let m = self.bn2.forward(ctx, m)?;
        let s = self.shortcut.forward(ctx, x)?;
        let y = ctx.tape.add(m, s)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Up block followed by a residual attention branch: `u + CSA(u)`.
#[derive(Clone, Debug)]
pub struct CsaUpBlock {
    pub up: UpBlock,
    pub csa: Csa,
}

impl CsaUpBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        Ok(Self {
            up: UpBlock::new(init, name, c_in, c_out)?,
            csa: init.csa(&format!("{name}.csa"), c_out, cfg)?,
        })
    }

    pub fn halving(
        init: &mut Init<'_>,
        name: &str,
        c: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        Ok(Self {
            up: UpBlock::halving(init, name, c)?,
            csa: init.csa(&format!("{name}.csa"), c / 2, cfg)?,
        })
    }
}

impl Block for CsaUpBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let u = self.up.forward(ctx, x)?;
        let a = self.csa.forward(ctx, u)?;
        ctx.tape.add(u, a)
    }
}

/// Residual attention bottom block: `x + CSA(x)`.
#[derive(Clone, Debug)]
pub struct CsaBottomBlock {
    pub csa: Csa,
}

impl CsaBottomBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            csa: init.csa(&format!("{name}.csa"), c, cfg)?,
        })
    }
}

impl Block for CsaBottomBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let a = self.csa.forward(ctx, x)?;
        ctx.tape.add(x, a)
    }
}

/// Skip fusion: concatenated features squeezed back to `c_out` channels by a
/// 1x1 conv with BN/ReLU, then refined by a conv block.
#[derive(Clone, Debug)]
pub struct FuseBlock {
    pub squeeze: Conv,
    pub bn: BatchNorm,
    pub refine: ConvBlock,
}

impl FuseBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            squeeze: init.conv(
                &format!("{name}.squeeze"),
                c_in,
                c_out,
                1,
                ConvGeometry::new(1, 0),
            )?,
            bn: init.bn(&format!("{name}.bn"), c_out)?,
            refine: ConvBlock::new(init, &format!("{name}.refine"), c_out)?,
        })
    }

    /// Concatenates `parts` along channels, in order, and fuses them.
    pub fn fuse(&self, ctx: &mut Ctx<'_>, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| shape_err!("fuse block needs at least one input"))?;
        let mut cat = first;
        for &p in rest {
            cat = ctx.tape.concat_channels(cat, p)?;
        }
        self.forward(ctx, cat)
    }
}

impl Block for FuseBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = bn_relu(ctx, &self.squeeze, &self.bn, x)?;
        self.refine.forward(ctx, h)
    }
}
