//! Covariance criss-cross self-attention.
//!
//! For a feature map `X: [h, w, d]`, 1x1 projections produce queries `Q`,
//! keys `K` (both `d_q` channels) and values `V` (`d` channels). Each position
//! `u = (r, c)` attends over its criss-cross set: the `h` entries of column `c`
//! followed by the `w - 1` other entries of row `r`. The score between `Q_u`
//! and a key `K_i` is either the covariance of the two vectors,
//! `sum_j (Q_u,j - mean(Q_u)) (K_i,j - mean(K_i))`, or their plain dot product.
//! Scores are softmax-normalized over the set and used to average the value
//! vectors at the same positions.
//!
//! Every map in this module is position-major (`[h, w, channels]`). The
//! network-facing entry point [`csa_block`] works on `[N, C, H, W]` tensors on
//! a [`Tape`] and converts per sample.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::ops::{softmax_in_place, ConvGeometry};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest `h * w` accepted by [`full_attention_oracle`].
pub const ORACLE_MAX_POSITIONS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    Covariance,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Row and column of each position: `h + w - 1` entries.
    #[serde(rename = "crisscross")]
    CrissCross,
    /// Every position: `h * w` entries.
    Full,
}

impl std::str::FromStr for Correlation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariance" | "cov" => Ok(Self::Covariance),
            "dot" => Ok(Self::Dot),
            other => Err(config_err!("unknown correlation mode {:?}", other)),
        }
    }
}

impl std::str::FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crisscross" | "criss-cross" => Ok(Self::CrissCross),
            "full" => Ok(Self::Full),
            other => Err(config_err!("unknown neighborhood {:?}", other)),
        }
    }
}

impl std::fmt::Display for Correlation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Covariance => "covariance",
            Self::Dot => "dot",
        })
    }
}

impl std::fmt::Display for Neighborhood {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CrissCross => "crisscross",
            Self::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub mode: Correlation,
    pub neighborhood: Neighborhood,
    /// Query/key channel reduction factor relative to the input width.
    pub reduction: usize,
    /// Number of sequential applications with shared weights.
    pub loops: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mode: Correlation::Covariance,
            neighborhood: Neighborhood::CrissCross,
            reduction: 8,
            loops: 1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction < 1 {
            return Err(config_err!("attention reduction must be >= 1"));
        }
        if self.loops < 1 {
            return Err(config_err!("attention loops must be >= 1"));
        }
        Ok(())
    }

    /// Query/key width for a `d`-channel input: `d / reduction`, but never
    /// below two channels when `d >= 2` (the covariance of a single channel
    /// is identically zero).
    pub fn key_channels(&self, d: usize) -> usize {
        (d / self.reduction.max(1)).max(d.min(2))
    }
}

/// Length of one position's attention slice.
pub fn neighborhood_len(h: usize, w: usize, nb: Neighborhood) -> usize {
    match nb {
        Neighborhood::CrissCross => h + w - 1,
        Neighborhood::Full => h * w,
    }
}

/// Stored attention-map entries for an `h x w` map.
pub fn attention_map_elements(h: usize, w: usize, nb: Neighborhood) -> u64 {
    (h as u64) * (w as u64) * neighborhood_len(h, w, nb) as u64
}

/// Flat index of the `i`-th neighbor of position `(r, c)`.
#[inline]
fn neighbor(h: usize, w: usize, r: usize, c: usize, i: usize, nb: Neighborhood) -> usize {
    match nb {
        Neighborhood::Full => i,
        Neighborhood::CrissCross => {
            if i < h {
                i * w + c
            } else {
                let j = i - h;
                let col = if j < c { j } else { j + 1 };
                r * w + col
            }
        }
    }
}

fn fill_neighbors(h: usize, w: usize, r: usize, c: usize, nb: Neighborhood, out: &mut Vec<usize>) {
    out.clear();
    out.extend((0..neighborhood_len(h, w, nb)).map(|i| neighbor(h, w, r, c, i, nb)));
}

/// Ordered criss-cross set of position `u = (row, col)`: the full column
/// top to bottom (so `u` itself sits at index `row`), then the rest of the row
/// left to right.
pub fn criss_cross_index(h: usize, w: usize, u: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let (r, c) = u;
    if r >= h || c >= w {
        return Err(Error::OutOfBounds(format!(
            "position {:?} outside {}x{} map",
            u, h, w
        )));
    }
    Ok((0..h + w - 1)
        .map(|i| {
            let p = neighbor(h, w, r, c, i, Neighborhood::CrissCross);
            (p / w, p % w)
        })
        .collect())
}

/// Gathers the channel vectors of `t: [h, w, c]` on the criss-cross set of
/// `u` into a `[c, h + w - 1]` matrix.
pub fn criss_cross_gather(t: &Tensor, u: (usize, usize)) -> Result<Tensor> {
    let [h, w, c] = t.dims3()?;
    let idx = criss_cross_index(h, w, u)?;
    let m = idx.len();
    let mut out = Tensor::zeros(&[c, m]);
    for (i, &(r, col)) in idx.iter().enumerate() {
        for ch in 0..c {
            out.set(&[ch, i], t.at(&[r, col, ch]));
        }
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Similarity score between a query and a key vector.
pub fn correlate(q: &[f64], k: &[f64], mode: Correlation) -> Result<f64> {
    if q.len() != k.len() || q.is_empty() {
        return Err(shape_err!(
            "correlate needs equal non-empty lengths, got {} and {}",
            q.len(),
            k.len()
        ));
    }
    Ok(match mode {
        Correlation::Dot => dot(q, k),
        Correlation::Covariance => dot(&centered(q), &centered(k)),
    })
}

/// Per-position mean removal over the channel axis, applied to a flat
/// position-major buffer when `mode` is covariance.
fn prepare(data: &[f64], channels: usize, mode: Correlation) -> Vec<f64> {
    match mode {
        Correlation::Dot => data.to_vec(),
        Correlation::Covariance => data.chunks(channels).flat_map(centered).collect(),
    }
}

/// Softmax-normalized attention weights, `sa: [h, w, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub sa: Tensor,
    pub neighborhood: Neighborhood,
}

impl AttentionMap {
    pub fn elements(&self) -> usize {
        self.sa.len()
    }
}

/// Scores every query against the keys on its neighborhood and normalizes
/// each slice with a softmax.
pub fn attention_map(q: &Tensor, k: &Tensor, cfg: &AttentionConfig) -> Result<AttentionMap> {
    let [h, w, dq] = q.dims3()?;
    let [hk, wk, dk] = k.dims3()?;
    if (h, w, dq) != (hk, wk, dk) || dq == 0 {
        return Err(shape_err!(
            "query {:?} and key {:?} maps disagree",
            q.dims(),
            k.dims()
        ));
    }
    let nb = cfg.neighborhood;
    let m = neighborhood_len(h, w, nb);
    let qc = prepare(q.data(), dq, cfg.mode);
    let kc = prepare(k.data(), dq, cfg.mode);
    let mut sa = vec![0.0; h * w * m];
    let mut nbrs = Vec::with_capacity(m);
    for r in 0..h {
        for c in 0..w {
            let u = r * w + c;
            fill_neighbors(h, w, r, c, nb, &mut nbrs);
            let qu = &qc[u * dq..(u + 1) * dq];
            let row = &mut sa[u * m..(u + 1) * m];
            for (slot, &n) in row.iter_mut().zip(&nbrs) {
                *slot = dot(qu, &kc[n * dq..(n + 1) * dq]);
            }
            softmax_in_place(row);
        }
    }
    Ok(AttentionMap {
        sa: Tensor::new(vec![h, w, m], sa)?,
        neighborhood: nb,
    })
}

/// `H_u = sum_i SA[u, i] * V[n_i(u)]` over the map's neighborhood.
pub fn aggregate(map: &AttentionMap, v: &Tensor) -> Result<Tensor> {
    let [h, w, d] = v.dims3()?;
    let nb = map.neighborhood;
    let m = neighborhood_len(h, w, nb);
    if map.sa.dims() != [h, w, m] {
        return Err(shape_err!(
            "attention map {:?} does not fit value map {:?}",
            map.sa.dims(),
            v.dims()
        ));
    }
    let (sa, vd) = (map.sa.data(), v.data());
    let mut out = vec![0.0; h * w * d];
    let mut nbrs = Vec::with_capacity(m);
    for r in 0..h {
        for c in 0..w {
            let u = r * w + c;
            fill_neighbors(h, w, r, c, nb, &mut nbrs);
            let hu = &mut out[u * d..(u + 1) * d];
            for (&a, &n) in sa[u * m..(u + 1) * m].iter().zip(&nbrs) {
                for (o, &x) in hu.iter_mut().zip(&vd[n * d..(n + 1) * d]) {
                    *o += a * x;
                }
            }
        }
    }
    Tensor::new(vec![h, w, d], out)
}

/// Gradients of `aggregate(attention_map(q, k), v)` with respect to `q`, `k`
/// and `v`, given the forward attention map.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    map: &AttentionMap,
    mode: Correlation,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [h, w, dq] = q.dims3()?;
    let [_, _, d] = v.dims3()?;
    grad_out.expect_same_dims(v)?;
    let nb = map.neighborhood;
    let m = neighborhood_len(h, w, nb);
    let qc = prepare(q.data(), dq, mode);
    let kc = prepare(k.data(), dq, mode);
    let (sa, vd, gd) = (map.sa.data(), v.data(), grad_out.data());
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut g_sa = vec![0.0; m];
    let mut nbrs = Vec::with_capacity(m);
    for r in 0..h {
        for c in 0..w {
            let u = r * w + c;
            fill_neighbors(h, w, r, c, nb, &mut nbrs);
            let gu = &gd[u * d..(u + 1) * d];
            let row = &sa[u * m..(u + 1) * m];
            for (i, &n) in nbrs.iter().enumerate() {
                g_sa[i] = dot(gu, &vd[n * d..(n + 1) * d]);
                for (acc, &g) in gv[n * d..(n + 1) * d].iter_mut().zip(gu) {
                    *acc += row[i] * g;
                }
            }
            let inner = dot(row, &g_sa);
            let qu = &qc[u * dq..(u + 1) * dq];
            for (i, &n) in nbrs.iter().enumerate() {
                let g_score = row[i] * (g_sa[i] - inner);
                if g_score == 0.0 {
                    continue;
                }
                let kn = &kc[n * dq..(n + 1) * dq];
                for j in 0..dq {
                    gq[u * dq + j] += g_score * kn[j];
                    gk[n * dq + j] += g_score * qu[j];
                }
            }
        }
    }
    // Centering is a symmetric projection, so it also maps the gradient.
    let gq = prepare(&gq, dq, mode);
    let gk = prepare(&gk, dq, mode);
    Ok((
        Tensor::new(q.dims().to_vec(), gq)?,
        Tensor::new(k.dims().to_vec(), gk)?,
        Tensor::new(v.dims().to_vec(), gv)?,
    ))
}

/// Query, key and value projections of one attention block. Matrices map
/// `d` input channels to `d_q`, `d_q` and `d` output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

impl ProjectionWeights {
    /// Kaiming-normal matrices and zero biases.
    pub fn init(d: usize, cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let dq = cfg.key_channels(d);
        let std = (2.0 / d as f64).sqrt();
        Self {
            wq: Tensor::randn(&[dq, d], std, rng),
            bq: Tensor::zeros(&[dq]),
            wk: Tensor::randn(&[dq, d], std, rng),
            bk: Tensor::zeros(&[dq]),
            wv: Tensor::randn(&[d, d], std, rng),
            bv: Tensor::zeros(&[d]),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.wv.dims().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let dq = self.wq.dims().first().copied().unwrap_or(0);
        let ok = self.wq.dims() == [dq, d]
            && self.wk.dims() == [dq, d]
            && self.bq.dims() == [dq]
            && self.bk.dims() == [dq]
            && self.wv.dims() == [d, d]
            && self.bv.dims() == [d]
            && dq >= 1
            && dq <= d;
        if !ok {
            return Err(shape_err!(
                "projection weights wq {:?} wk {:?} wv {:?} do not fit {} input channels",
                self.wq.dims(),
                self.wk.dims(),
                self.wv.dims(),
                d
            ));
        }
        Ok(())
    }

    /// Binds the weights as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            wq: tape.leaf(self.wq.clone()),
            bq: tape.leaf(self.bq.clone()),
            wk: tape.leaf(self.wk.clone()),
            bk: tape.leaf(self.bk.clone()),
            wv: tape.leaf(self.wv.clone()),
            bv: tape.leaf(self.bv.clone()),
        }
    }
}

/// Tape handles for the six projection tensors, matrices shaped `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

impl ProjectionVars {
    pub fn all(&self) -> [Var; 6] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv]
    }
}

fn project(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let dims = tape.value(weight).dims().to_vec();
    let kernel = tape.reshape(weight, &[dims[0], dims[1], 1, 1])?;
    tape.conv2d(x, kernel, bias, ConvGeometry::new(1, 0))
}

/// Attention block on an `[N, C, H, W]` tape value: projections, attention
/// map and aggregation, repeated `cfg.loops` times with shared weights. No
/// residual is added here.
pub fn csa_block(
    tape: &mut Tape,
    x: Var,
    w: &ProjectionVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut cur = x;
    for _ in 0..cfg.loops {
        let q = project(tape, cur, w.wq, w.bq)?;
        let k = project(tape, cur, w.wk, w.bk)?;
        let v = project(tape, cur, w.wv, w.bv)?;
        cur = tape.attention(q, k, v, cfg.mode, cfg.neighborhood)?;
    }
    Ok(cur)
}

/// Attention block on a single `[h, w, d]` map.
pub fn csa_block_forward(
    x: &Tensor,
    w: &ProjectionWeights,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let [_, _, d] = x.dims3()?;
    w.validate(d)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.hwc_to_nchw()?);
    let vars = w.bind(&mut tape);
    let out = csa_block(&mut tape, xv, &vars, cfg)?;
    tape.value(out).sample_to_hwc(0)
}

/// Quadratic self-attention over all positions, written independently of the
/// neighborhood kernels so it can serve as a reference.
pub fn full_attention_oracle(
    x: &Tensor,
    w: &ProjectionWeights,
    mode: Correlation,
) -> Result<Tensor> {
    let [h, wd, d] = x.dims3()?;
    w.validate(d)?;
    let n = h * wd;
    if n > ORACLE_MAX_POSITIONS {
        return Err(config_err!(
            "oracle limited to {} positions, got {}",
            ORACLE_MAX_POSITIONS,
            n
        ));
    }
    let linear = |weight: &Tensor, bias: &Tensor| -> Vec<Vec<f64>> {
        let out = weight.dims()[0];
        (0..n)
            .map(|p| {
                (0..out)
                    .map(|o| {
                        let mut acc = bias.data()[o];
                        for i in 0..d {
                            acc += weight.data()[o * d + i] * x.data()[p * d + i];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let q = linear(&w.wq, &w.bq);
    let k = linear(&w.wk, &w.bk);
    let v = linear(&w.wv, &w.bv);
    let mean = |a: &[f64]| a.iter().sum::<f64>() / a.len() as f64;
    let mut out = vec![0.0; n * d];
    for a in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|b| match mode {
                Correlation::Dot => q[a].iter().zip(&k[b]).map(|(x, y)| x * y).sum(),
                Correlation::Covariance => {
                    let (mq, mk) = (mean(&q[a]), mean(&k[b]));
                    q[a].iter()
                        .zip(&k[b])
                        .map(|(x, y)| (x - mq) * (y - mk))
                        .sum()
                }
            })
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (b, e) in exps.iter().enumerate() {
            let weight = e / z;
            for ch in 0..d {
                out[a * d + ch] += weight * v[b][ch];
            }
        }
    }
    Tensor::new(vec![h, wd, d], out)
}

/// Per-sample attention on `[N, C, H, W]` query/key/value tensors, returning
/// the aggregated output and each sample's attention map.
pub(crate) fn attention_nchw(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mode: Correlation,
    nb: Neighborhood,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    let [n, dq, h, w] = q.dims4()?;
    let [nk, dk, hk, wk] = k.dims4()?;
    let [nv, _, hv, wv] = v.dims4()?;
    if (n, dq, h, w) != (nk, dk, hk, wk) || (n, h, w) != (nv, hv, wv) {
        return Err(shape_err!(
            "attention inputs q {:?} k {:?} v {:?} disagree",
            q.dims(),
            k.dims(),
            v.dims()
        ));
    }
    let cfg = AttentionConfig {
        mode,
        neighborhood: nb,
        ..AttentionConfig::default()
    };
    let mut outs = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for b in 0..n {
        let map = attention_map(&q.sample_to_hwc(b)?, &k.sample_to_hwc(b)?, &cfg)?;
        outs.push(
            aggregate(&map, &v.sample_to_hwc(b)?)?
                .hwc_to_nchw()?
                .index_outer(0)?,
        );
        maps.push(map);
    }
    Ok((Tensor::stack(&outs)?, maps))
}

pub(crate) fn attention_nchw_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    maps: &[AttentionMap],
    mode: Correlation,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, _, _, _] = q.dims4()?;
    let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    for (b, map) in maps.iter().enumerate().take(n) {
        let (a, bk, c) = attention_backward(
            &q.sample_to_hwc(b)?,
            &k.sample_to_hwc(b)?,
            &v.sample_to_hwc(b)?,
            map,
            mode,
            &grad_out.sample_to_hwc(b)?,
        )?;
        gq.push(a.hwc_to_nchw()?.index_outer(0)?);
        gk.push(bk.hwc_to_nchw()?.index_outer(0)?);
        gv.push(c.hwc_to_nchw()?.index_outer(0)?);
    }
    Ok((
        Tensor::stack(&gq)?,
        Tensor::stack(&gk)?,
        Tensor::stack(&gv)?,
    ))
}
