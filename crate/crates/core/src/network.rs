//! Dual-path network assembly.
//!
//! Two U-shaped passes run back to back (a W shape):
//!
//! ```text
//! stem -> enc0 -> down1..down(L-1) -> bottom -> up(L-2)..up0      (U1)
//!                                                   |
//!            d1_0 -> down1..down(L-1) -> bottom -> up(L-2)..up0   (U2) -> head
//! ```
//!
//! Each up step is fused with same-level encoder features: U1 decoders see
//! U1's encoder, U2 decoders see both U2's and U1's encoders. With attention
//! enabled every up block carries a residual attention branch and each bottom
//! conv block is followed by a residual attention block.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::Var;
use crate::blocks::{
    apply_bn_updates, Block, Conv, ConvBlock, CsaBottomBlock, CsaUpBlock, Ctx, DownBlock,
    FuseBlock, Init, Stem, UpBlock,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::ops::{ConvGeometry, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_CHANNELS: usize = 512;
pub const MIN_LEVELS: usize = 2;
pub const MAX_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub attention_enabled: bool,
    pub attention: AttentionConfig,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            attention_enabled: true,
            attention: AttentionConfig::default(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_LEVELS..=MAX_LEVELS).contains(&self.levels) {
            return Err(config_err!(
                "levels must be in {}..={}, got {}",
                MIN_LEVELS,
                MAX_LEVELS,
                self.levels
            ));
        }
        if self.base_channels < 1 {
            return Err(config_err!("base_channels must be >= 1"));
        }
        self.attention.validate()
    }

    /// Channel width at level `l`.
    pub fn width(&self, l: usize) -> usize {
        (self.base_channels << l).min(MAX_CHANNELS)
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug)]
enum Up {
    Plain(UpBlock),
    Attention(CsaUpBlock),
}

impl Up {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Up::Plain(b) => b.forward(ctx, x),
            Up::Attention(b) => b.forward(ctx, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Bottom {
    conv: ConvBlock,
    csa: Option<CsaBottomBlock>,
}

impl Bottom {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        match &self.csa {
            Some(csa) => csa.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// Encoder, bottom and decoder of one U pass. `ups[l]` and `fuses[l]`
/// produce level `l` features.
#[derive(Clone, Debug)]
struct UPass {
    downs: Vec<DownBlock>,
    bottom: Bottom,
    ups: Vec<Up>,
    fuses: Vec<FuseBlock>,
}

impl UPass {
    /// `skip_sets[l]` counts the encoder feature maps fused at level `l`.
    fn new(init: &mut Init<'_>, name: &str, cfg: &NetworkConfig, skip_sets: usize) -> Result<Self> {
        let levels = cfg.levels;
        let mut downs = Vec::new();
        for l in 1..levels {
            downs.push(DownBlock::new(
                init,
                &format!("{name}.down{l}"),
                cfg.width(l - 1),
                cfg.width(l),
            )?);
        }
        let deep = cfg.width(levels - 1);
        let bottom = Bottom {
            conv: ConvBlock::new(init, &format!("{name}.bottom"), deep)?,
            csa: if cfg.attention_enabled {
                Some(CsaBottomBlock::new(
                    init,
                    &format!("{name}.bottom"),
                    deep,
                    &cfg.attention,
                )?)
            } else {
                None
            },
        };
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        for l in 0..levels - 1 {
            let (c_in, c_out) = (cfg.width(l + 1), cfg.width(l));
            let up_name = format!("{name}.up{l}");
            ups.push(if cfg.attention_enabled {
                Up::Attention(CsaUpBlock::new(
                    init,
                    &up_name,
                    c_in,
                    c_out,
                    &cfg.attention,
                )?)
            } else {
                Up::Plain(UpBlock::new(init, &up_name, c_in, c_out)?)
            });
            fuses.push(FuseBlock::new(
                init,
                &format!("{name}.fuse{l}"),
                (1 + skip_sets) * c_out,
                c_out,
            )?);
        }
        Ok(Self {
            downs,
            bottom,
            ups,
            fuses,
        })
    }

    /// Runs the pass from full-resolution features `top`, fusing the given
    /// extra encoder features per level. Returns the encoder features and the
    /// full-resolution decoder output.
    fn forward(&self, ctx: &mut Ctx<'_>, top: Var, extra: &[Var]) -> Result<(Vec<Var>, Var)> {
        let mut enc = vec![top];
        for d in &self.downs {
            let prev = *enc.last().expect("non-empty");
            enc.push(d.forward(ctx, prev)?);
        }
        let mut cur = self.bottom.forward(ctx, *enc.last().expect("non-empty"))?;
        for l in (0..self.ups.len()).rev() {
            let up = self.ups[l].forward(ctx, cur)?;
            let mut parts = vec![up, enc[l]];
            if let Some(&e) = extra.get(l) {
                parts.push(e);
            }
            cur = self.fuses[l].fuse(ctx, &parts)?;
        }
        Ok((enc, cur))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    pub params: ParamStore,
    stem: Stem,
    enc0: ConvBlock,
    u1: UPass,
    u2: UPass,
    head: Conv,
}

impl Network {
    /// Builds the network with weights drawn from `cfg.seed`.
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let w0 = cfg.width(0);
        let stem = Stem::new(&mut init, "stem", 1, w0)?;
        let enc0 = ConvBlock::new(&mut init, "u1.enc0", w0)?;
        let u1 = UPass::new(&mut init, "u1", cfg, 1)?;
        let u2 = UPass::new(&mut init, "u2", cfg, 2)?;
        let head = init.conv("head", w0, 1, 1, ConvGeometry::new(1, 0))?;
        Ok(Self {
            config: *cfg,
            params,
            stem,
            enc0,
            u1,
            u2,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let [_, c, h, w] = match dims {
            &[n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(shape_err!(
                    "network input must be [N,1,H,W], got {:?}",
                    dims
                ))
            }
        };
        if c != 1 {
            return Err(shape_err!("network input must have 1 channel, got {}", c));
        }
        let m = self.config.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::IndivisibleSpatialDim(format!(
                "{}x{} input is not divisible by {} for {} levels",
                h, w, m, self.config.levels
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `[N,1,H,W]` images, returning logits.
    pub fn record(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        self.check_input(ctx.tape.value(image).dims())?;
        let s = self.stem.forward(ctx, image)?;
        let e0 = self.enc0.forward(ctx, s)?;
        let (enc1, d1) = self.u1.forward(ctx, e0, &[])?;
        let (_, d2) = self.u2.forward(ctx, d1, &enc1)?;
        self.head.forward(ctx, d2)
    }

    /// Logits for `image`; in training mode batch statistics are folded
    /// into the running averages.
    pub fn forward(&mut self, image: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, updates) = {
            let mut ctx = Ctx::new(&self.params, mode);
            let x = ctx.tape.leaf(image.clone());
            let y = self.record(&mut ctx, x)?;
            (ctx.tape.value(y).clone(), ctx.take_bn_updates())
        };
        apply_bn_updates(&mut self.params, &updates);
        Ok(y)
    }

    /// Eval-mode logits.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params, Mode::Eval);
        let x = ctx.tape.leaf(image.clone());
        let y = self.record(&mut ctx, x)?;
        Ok(ctx.tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cfg(levels: usize, base: usize, attention: bool) -> NetworkConfig {
        NetworkConfig {
            levels,
            base_channels: base,
            attention_enabled: attention,
            seed: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn output_matches_input_shape() {
        let mut net = Network::build(&cfg(2, 8, false)).unwrap();
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut Rng::new(1));
        assert_eq!(
            net.forward(&x, Mode::Train).unwrap().dims(),
            &[1, 1, 16, 16]
        );

        let mut net = Network::build(&cfg(3, 2, true)).unwrap();
        let x = Tensor::randn(&[2, 1, 32, 32], 1.0, &mut Rng::new(2));
        assert_eq!(net.forward(&x, Mode::Eval).unwrap().dims(), &[2, 1, 32, 32]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Network::build(&cfg(4, 1, false)).unwrap();
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 1, 20, 16])),
            Err(Error::IndivisibleSpatialDim(_))
        ));
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 2, 16, 16])),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(Network::build(&cfg(1, 8, false)).is_err());
        assert!(Network::build(&cfg(6, 8, false)).is_err());
        assert!(Network::build(&cfg(2, 0, false)).is_err());
    }

    #[test]
    fn attention_adds_only_projection_parameters() {
        let on = Network::build(&cfg(3, 4, true)).unwrap();
        let off = Network::build(&cfg(3, 4, false)).unwrap();
        let names_on: BTreeSet<&str> = on.params.names().collect();
        let names_off: BTreeSet<&str> = off.params.names().collect();
        assert!(names_off.is_subset(&names_on));
        let extra: Vec<&str> = names_on.difference(&names_off).copied().collect();
        assert!(!extra.is_empty());
        for name in &extra {
            let suffix = name.rsplit('.').next().unwrap();
            assert!(name.contains(".csa."), "{name}");
            assert!(
                ["wq", "bq", "wk", "bk", "wv", "bv"].contains(&suffix),
                "{name}"
            );
        }
        for name in &names_off {
            let a = on.params.get(on.params.find(name).unwrap()).dims();
            let b = off.params.get(off.params.find(name).unwrap()).dims();
            assert_eq!(a, b, "{name}");
        }
        assert!(on.count_parameters() > off.count_parameters());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::build(&cfg(2, 4, true)).unwrap();
        let b = Network::build(&cfg(2, 4, true)).unwrap();
        assert_eq!(a.params, b.params);
        let c = Network::build(&NetworkConfig {
            seed: 4,
            ..cfg(2, 4, true)
        })
        .unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn width_schedule_is_capped() {
        let c = NetworkConfig {
            levels: 5,
            base_channels: 64,
            ..NetworkConfig::default()
        };
        assert_eq!(
            (0..5).map(|l| c.width(l)).collect::<Vec<_>>(),
            vec![64, 128, 256, 512, 512]
        );
    }

    #[test]
    fn config_json_round_trip() {
        let c = cfg(3, 4, true);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), c);
        let partial: NetworkConfig = serde_json::from_str(r#"{"levels": 4}"#).unwrap();
        assert_eq!(partial.levels, 4);
        assert!(serde_json::from_str::<NetworkConfig>(r#"{"depth": 4}"#).is_err());
    }
}
