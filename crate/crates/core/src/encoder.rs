//! Depth-aware image encoder: four-channel patch embedding, pre-norm
//! transformer blocks with low-rank adapters on the query and value
//! projections, and a depth-conditioning residual after each block's MLP.
//!
//! Token matrices on the tape are `(G·N, d)` with row `g·N + n`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::{SliceGroup, GROUP_SIZE};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, Tensor};
use crate::volumes::NUM_MODALITIES;

fn default_mlp_ratio() -> usize {
    4
}
fn default_lora_std() -> f64 {
    0.01
}
fn default_group_size() -> usize {
    GROUP_SIZE
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    #[serde(default = "default_lora_std")]
    pub lora_std: f64,
    /// Hidden width of the depth MLP; `G·4` when absent.
    #[serde(default)]
    pub depth_hidden: Option<usize>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// When false the depth-conditioning blocks are not built at all.
    #[serde(default = "default_true")]
    pub depth_condition: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// The small configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            lora_rank: 4,
            lora_std: 0.01,
            depth_hidden: None,
            group_size: GROUP_SIZE,
            depth_condition: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        NUM_MODALITIES * self.patch_size * self.patch_size
    }

    pub fn depth_hidden(&self) -> usize {
        self.depth_hidden.unwrap_or(self.group_size * 4)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        let d = self.embed_dim;
        if d == 0 || d % 4 != 0 {
            return Err(Error::Config(format!("embed dim {d} must be a positive multiple of 4")));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {} heads", self.heads)));
        }
        // Adapted weights are the d×d query and value projections.
        if self.lora_rank == 0 || self.lora_rank >= d {
            return Err(Error::Config(format!(
                "LoRA rank {} must satisfy 1 ≤ r < {d}",
                self.lora_rank
            )));
        }
        if !(self.lora_std > 0.0 && self.lora_std.is_finite()) {
            return Err(Error::Config(format!("LoRA init std {} must be > 0", self.lora_std)));
        }
        if self.group_size != GROUP_SIZE {
            return Err(Error::Config(format!(
                "group size is fixed at {GROUP_SIZE}, got {}",
                self.group_size
            )));
        }
        if self.mlp_ratio == 0 || self.depth_hidden() == 0 || self.blocks == 0 {
            return Err(Error::Config("blocks, MLP ratio and depth hidden width must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Σ_l r·(d_in + d_out) over the adapted projections.
    pub fn lora_param_count(&self) -> usize {
        let d = self.embed_dim;
        self.blocks * 2 * self.lora_rank * (d + d)
    }

    /// Layer norm plus both MLP layers, summed over blocks.
    pub fn depth_param_count(&self) -> usize {
        if !self.depth_condition {
            return 0;
        }
        let (d, g, h) = (self.embed_dim, self.group_size, self.depth_hidden());
        self.blocks * (2 * d + g * h + h + h * g + g)
    }

    pub fn patch_embed_param_count(&self) -> usize {
        self.patch_dim() * self.embed_dim + self.embed_dim + self.num_patches() * self.embed_dim
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct DepthBlock {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub norm1: Norm,
    pub attn: AttnProj,
    pub lora_q: LoraPair,
    pub lora_v: LoraPair,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub depth: Option<DepthBlock>,
}

pub(crate) fn init_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut R,
) -> Linear {
    let w = if std == 0.0 {
        Tensor::zeros(&[d_in, d_out])
    } else {
        Tensor::randn(&[d_in, d_out], std, rng)
    };
    Linear {
        w: store.insert(format!("{name}.weight"), w),
        b: store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out])),
    }
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Norm {
    Norm {
        gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[d], T::one())),
        beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d])),
    }
}

pub(crate) fn init_attn<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    d: usize,
    rng: &mut R,
) -> AttnProj {
    let std = 1.0 / (d as f64).sqrt();
    AttnProj {
        q: init_linear(store, &format!("{name}.q"), d, d, std, rng),
        k: init_linear(store, &format!("{name}.k"), d, d, std, rng),
        v: init_linear(store, &format!("{name}.v"), d, d, std, rng),
        o: init_linear(store, &format!("{name}.o"), d, d, std, rng),
    }
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound, lin: Linear, x: Var) -> Var {
    let y = tape.matmul(x, p.var(lin.w));
    tape.add_row(y, p.var(lin.b))
}

pub(crate) fn norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, n: Norm, x: Var, eps: T) -> Var {
    tape.layer_norm(x, p.var(n.gamma), p.var(n.beta), eps)
}

/// `x·θ + bias + (x·A)·B`.
pub(crate) fn adapted_linear<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    lin: Linear,
    adapter: Option<LoraPair>,
    x: Var,
) -> Var {
    let base = linear(tape, p, lin, x);
    match adapter {
        None => base,
        Some(l) => {
            let xa = tape.matmul(x, p.var(l.a));
            let delta = tape.matmul(xa, p.var(l.b));
            tape.add(base, delta)
        }
    }
}

fn block_index(rows: (usize, usize), cols: (usize, usize), width: usize) -> Arc<[usize]> {
    let (r0, nr) = rows;
    let (c0, nc) = cols;
    let mut idx = Vec::with_capacity(nr * nc);
    for i in 0..nr {
        for j in 0..nc {
            idx.push((r0 + i) * width + c0 + j);
        }
    }
    idx.into()
}

/// Scaled dot-product attention, independently within each of `groups`
/// consecutive row blocks. `q` is `(groups·nq, d)`, `k` and `v` are
/// `(groups·nk, d)`; projections are applied by the caller.
pub(crate) fn grouped_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    heads: usize,
) -> Var {
    let d = tape.shape(q)[1];
    let nq = tape.shape(q)[0] / groups;
    let nk = tape.shape(k)[0] / groups;
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut outs = Vec::with_capacity(groups * heads);
    for g in 0..groups {
        for h in 0..heads {
            let qi = tape.gather(q, block_index((g * nq, nq), (h * dh, dh), d), &[nq, dh]);
            let ki = tape.gather(k, block_index((g * nk, nk), (h * dh, dh), d), &[nk, dh]);
            let vi = tape.gather(v, block_index((g * nk, nk), (h * dh, dh), d), &[nk, dh]);
            let kt = tape.transpose(ki);
            let scores = tape.matmul(qi, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vi));
        }
    }
    let flat = tape.concat(&outs, &[groups * heads * nq * dh]);
    let mut idx = Vec::with_capacity(groups * nq * d);
    for g in 0..groups {
        for i in 0..nq {
            for h in 0..heads {
                for j in 0..dh {
                    idx.push(((g * heads + h) * nq + i) * dh + j);
                }
            }
        }
    }
    tape.gather(flat, idx.into(), &[groups * nq, d])
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub neck: Norm,
    im2col: Arc<[usize]>,
    pos_tile: Arc<[usize]>,
    unfold: Arc<[usize]>,
    fold: Arc<[usize]>,
}

impl EncoderLayout {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let patch_w = store.insert(
            "patch_embed.weight",
            Tensor::randn(&[cfg.patch_dim(), d], 1.0 / (cfg.patch_dim() as f64).sqrt(), rng),
        );
        let patch_b = store.insert("patch_embed.bias", Tensor::zeros(&[d]));
        let pos = store.insert("patch_embed.pos", Tensor::randn(&[n, d], 0.02, rng));

        let mut blocks = Vec::with_capacity(cfg.blocks);
        let hidden = cfg.mlp_hidden();
        for i in 0..cfg.blocks {
            let base = format!("base.blocks.{i}");
            let norm1 = init_norm(store, &format!("{base}.norm1"), d);
            let attn = init_attn(store, &format!("{base}.attn"), d, rng);
            let norm2 = init_norm(store, &format!("{base}.norm2"), d);
            let fc1 = init_linear(store, &format!("{base}.mlp.fc1"), d, hidden, 1.0 / (d as f64).sqrt(), rng);
            let fc2 = init_linear(store, &format!("{base}.mlp.fc2"), hidden, d, 1.0 / (hidden as f64).sqrt(), rng);
            let r = cfg.lora_rank;
            let mut lora = |proj: &str, rng: &mut R| LoraPair {
                a: store.insert(
                    format!("lora.blocks.{i}.{proj}.A"),
                    Tensor::randn(&[d, r], cfg.lora_std, rng),
                ),
                b: store.insert(format!("lora.blocks.{i}.{proj}.B"), Tensor::zeros(&[r, d])),
            };
            let lora_q = lora("q", rng);
            let lora_v = lora("v", rng);
            let depth = cfg.depth_condition.then(|| {
                let g = cfg.group_size;
                let h = cfg.depth_hidden();
                let name = format!("depth.blocks.{i}");
                DepthBlock {
                    norm: init_norm(store, &format!("{name}.norm"), d),
                    fc1: init_linear(store, &format!("{name}.fc1"), g, h, 1.0 / (g as f64).sqrt(), rng),
                    fc2: init_linear(store, &format!("{name}.fc2"), h, g, 0.0, rng),
                }
            });
            blocks.push(Block {
                norm1,
                attn,
                lora_q,
                lora_v,
                norm2,
                fc1,
                fc2,
                depth,
            });
        }
        let neck = init_norm(store, "base.neck", d);
        Self::with_params(cfg, patch_w, patch_b, pos, blocks, neck)
    }

    fn with_params(
        cfg: &EncoderConfig,
        patch_w: ParamId,
        patch_b: ParamId,
        pos: ParamId,
        blocks: Vec<Block>,
        neck: Norm,
    ) -> Self {
        let (g, m, p) = (cfg.group_size, NUM_MODALITIES, cfg.patch_size);
        let (h, w) = (cfg.image_height, cfg.image_width);
        let (gh, gw) = cfg.grid();
        let n = gh * gw;
        let d = cfg.embed_dim;

        let mut im2col = Vec::with_capacity(g * n * m * p * p);
        for gi in 0..g {
            for py in 0..gh {
                for px in 0..gw {
                    for mi in 0..m {
                        for ky in 0..p {
                            for kx in 0..p {
                                im2col.push(((gi * m + mi) * h + py * p + ky) * w + px * p + kx);
                            }
                        }
                    }
                }
            }
        }
        let pos_tile: Vec<usize> = (0..g * n * d).map(|i| i % (n * d)).collect();
        let mut unfold = Vec::with_capacity(g * n * d);
        for ni in 0..n {
            for c in 0..d {
                for gi in 0..g {
                    unfold.push((gi * n + ni) * d + c);
                }
            }
        }
        let mut fold = Vec::with_capacity(g * n * d);
        for gi in 0..g {
            for ni in 0..n {
                for c in 0..d {
                    fold.push((ni * d + c) * g + gi);
                }
            }
        }
        Self {
            patch_w,
            patch_b,
            pos,
            blocks,
            neck,
            im2col: im2col.into(),
            pos_tile: pos_tile.into(),
            unfold: unfold.into(),
            fold: fold.into(),
        }
    }

    /// `(G, M, H, W)` slices to `(G·N, d)` tokens.
    pub fn patch_embed<T: Scalar>(
        &self,
        cfg: &EncoderConfig,
        tape: &mut Tape<T>,
        p: &Bound,
        slices: Var,
    ) -> Var {
        let (g, n, d) = (cfg.group_size, cfg.num_patches(), cfg.embed_dim);
        let cols = tape.gather(slices, self.im2col.clone(), &[g * n, cfg.patch_dim()]);
        let x = tape.matmul(cols, p.var(self.patch_w));
        let x = tape.add_row(x, p.var(self.patch_b));
        let pos = tape.gather(p.var(self.pos), self.pos_tile.clone(), &[g * n, d]);
        tape.add(x, pos)
    }

    /// Residual depth branch: per-token layer norm, then an MLP over the
    /// group axis for every (spatial token, channel) pair.
    pub fn depth_condition<T: Scalar>(
        &self,
        cfg: &EncoderConfig,
        tape: &mut Tape<T>,
        p: &Bound,
        block: &DepthBlock,
        x: Var,
    ) -> Var {
        let (g, n, d) = (cfg.group_size, cfg.num_patches(), cfg.embed_dim);
        let eps = T::lit(cfg.layer_norm_eps);
        let h = norm(tape, p, block.norm, x, eps);
        let cols = tape.gather(h, self.unfold.clone(), &[n * d, g]);
        let z = linear(tape, p, block.fc1, cols);
        let z = tape.gelu(z);
        let z = linear(tape, p, block.fc2, z);
        let back = tape.gather(z, self.fold.clone(), &[g * n, d]);
        tape.add(x, back)
    }

    /// Features `(G·N, d)`. With `adapters == false` the low-rank and depth
    /// branches are skipped, giving the plain transformer.
    pub fn forward<T: Scalar>(
        &self,
        cfg: &EncoderConfig,
        tape: &mut Tape<T>,
        p: &Bound,
        slices: Var,
        adapters: bool,
    ) -> Var {
        let eps = T::lit(cfg.layer_norm_eps);
        let g = cfg.group_size;
        let mut x = self.patch_embed(cfg, tape, p, slices);
        for block in &self.blocks {
            let h = norm(tape, p, block.norm1, x, eps);
            let lq = adapters.then_some(block.lora_q);
            let lv = adapters.then_some(block.lora_v);
            let q = adapted_linear(tape, p, block.attn.q, lq, h);
            let k = linear(tape, p, block.attn.k, h);
            let v = adapted_linear(tape, p, block.attn.v, lv, h);
            let a = grouped_attention(tape, q, k, v, g, cfg.heads);
            let a = linear(tape, p, block.attn.o, a);
            x = tape.add(x, a);

            let h = norm(tape, p, block.norm2, x, eps);
            let h = linear(tape, p, block.fc1, h);
            let h = tape.gelu(h);
            let h = linear(tape, p, block.fc2, h);
            x = tape.add(x, h);

            if adapters {
                if let Some(depth) = &block.depth {
                    x = self.depth_condition(cfg, tape, p, depth, x);
                }
            }
        }
        norm(tape, p, self.neck, x, eps)
    }
}

/// Validates a slice group against the configuration.
pub(crate) fn check_group<T: Scalar>(cfg: &EncoderConfig, group: &SliceGroup<T>) -> Result<()> {
    let s = group.slices.shape();
    if s.len() != 4 || s[1] != NUM_MODALITIES {
        return Err(Error::Config(format!(
            "slice group must be (G, {NUM_MODALITIES}, H, W), got {s:?}"
        )));
    }
    if s[0] != cfg.group_size {
        return Err(Error::Config(format!(
            "group has {} slices, encoder expects {}",
            s[0], cfg.group_size
        )));
    }
    if s[2] != cfg.image_height || s[3] != cfg.image_width {
        return Err(Error::Config(format!(
            "slices are {}×{}, encoder configured for {}×{}",
            s[2], s[3], cfg.image_height, cfg.image_width
        )));
    }
    Ok(())
}

/// A low-rank adapter `Δθ = A·B` attached to a named base weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: String,
    /// `(d_in × r)`
    pub a: Tensor<T>,
    /// `(r × d_out)`
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A ~ N(0, σ)`, `B = 0`; requires `1 ≤ r < min(d_in, d_out)`.
    pub fn init<R: Rng + ?Sized>(
        target: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {rank} must satisfy 1 ≤ r < min({d_in}, {d_out})"
            )));
        }
        Ok(Self {
            target: target.into(),
            a: Tensor::randn(&[d_in, rank], std, rng),
            b: Tensor::zeros(&[rank, d_out]),
        })
    }

    pub fn from_parts(target: impl Into<String>, a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape(format!(
                "adapter factors {:?} and {:?} disagree on rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            target: target.into(),
            a,
            b,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn trainable_scalars(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `y = x·θ + (x·A)·B` for a batch of row vectors `x (n × d_in)`; `θ` is
/// `(d_in × d_out)` and is only read.
pub fn lora_forward<T: Scalar>(x: &Tensor<T>, base: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let (n, d_in) = match x.shape() {
        [n, d] => (*n, *d),
        [d] => (1, *d),
        s => return Err(Error::Shape(format!("input {s:?}"))),
    };
    let (bi, d_out) = match base.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::Shape(format!("base weight {s:?}"))),
    };
    if bi != d_in || adapter.a.shape()[0] != d_in || adapter.b.shape()[1] != d_out {
        return Err(Error::Shape(format!(
            "x {:?}, θ {:?}, A {:?}, B {:?}",
            x.shape(),
            base.shape(),
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    let r = adapter.rank();
    let mut y = vec![T::zero(); n * d_out];
    matmul_acc(x.data(), base.data(), &mut y, n, d_in, d_out);
    let mut xa = vec![T::zero(); n * r];
    matmul_acc(x.data(), adapter.a.data(), &mut xa, n, d_in, r);
    matmul_acc(&xa, adapter.b.data(), &mut y, n, r, d_out);
    Tensor::from_vec(&[n, d_out], y)
}
