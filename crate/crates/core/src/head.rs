//! Prompt encoder and mask decoder.
//!
//! The decoder runs once per slice of the group with the same prompt
//! tokens: a token→image and an image→token cross-attention layer, a
//! hypernetwork on the mask token, and pixel-shuffle upsampling back to
//! full resolution.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_term, Tape, Var};
use crate::encoder::{
    grouped_attention, init_attn, init_linear, init_norm, linear, norm, AttnProj, EncoderConfig, Linear, Norm,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::{Prompt, PromptBox};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_mask_channels() -> usize {
    8
}
fn default_mask_prior() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channels of the upsampled embedding the hypernetwork weights.
    #[serde(default = "default_mask_channels")]
    pub mask_channels: usize,
    /// Foreground probability an untrained decoder predicts everywhere.
    #[serde(default = "default_mask_prior")]
    pub mask_prior: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            mask_channels: default_mask_channels(),
            mask_prior: default_mask_prior(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_channels == 0 {
            return Err(Error::Config("mask_channels must be ≥ 1".into()));
        }
        if !(self.mask_prior > 0.0 && self.mask_prior < 1.0) {
            return Err(Error::Config(format!("mask_prior {} outside (0, 1)", self.mask_prior)));
        }
        Ok(())
    }
}

/// Dense prompt table rows.
const DENSE_INSIDE: usize = 0;
const DENSE_OUTSIDE: usize = 1;
const DENSE_NONE: usize = 2;

/// Type-embedding rows.
const TYPE_CORNER0: usize = 0;
const TYPE_CORNER1: usize = 1;
const TYPE_POINT: usize = 2;

/// Sinusoidal code of a normalized coordinate pair, `d` values:
/// `sin(ω_k x), cos(ω_k x), sin(ω_k y), cos(ω_k y)` blocks of `d/4`, with
/// `ω_k = π·2^{k/2}`.
pub fn sinusoid_code(x: f64, y: f64, d: usize) -> Vec<f64> {
    let k = d / 4;
    let mut out = vec![0.0; d];
    for i in 0..k {
        let w = PI * 2f64.powf(i as f64 / 2.0);
        out[i] = (w * x).sin();
        out[k + i] = (w * x).cos();
        out[2 * k + i] = (w * y).sin();
        out[3 * k + i] = (w * y).cos();
    }
    out
}

/// Normalized prompt coordinates: box corners are pixel edges, a point is
/// the pixel center.
pub fn prompt_coordinates(prompt: &Prompt, height: usize, width: usize) -> Vec<(f64, f64)> {
    let (h, w) = (height as f64, width as f64);
    match prompt {
        Prompt::Box(b) => vec![
            (b.x0 as f64 / w, b.y0 as f64 / h),
            (b.x1 as f64 / w, b.y1 as f64 / h),
        ],
        Prompt::Point(p) => vec![((p.x as f64 + 0.5) / w, (p.y as f64 + 0.5) / h)],
    }
}

fn check_prompt(prompt: &Prompt, height: usize, width: usize) -> Result<()> {
    match prompt {
        Prompt::Box(b) if !b.fits(height, width) => Err(Error::Invalid(format!(
            "box ({}, {})–({}, {}) outside {height}×{width} slice",
            b.x0, b.y0, b.x1, b.y1
        ))),
        Prompt::Point(p) if p.x >= width || p.y >= height => Err(Error::Invalid(format!(
            "point ({}, {}) outside {height}×{width} slice",
            p.x, p.y
        ))),
        _ => Ok(()),
    }
}

/// Prompt tokens `(k, d)`: two for a box, one for a point.
///
/// `type_embed` is the learned `(3, d)` table `[corner0, corner1, point]`.
pub fn encode_prompt<T: Scalar>(
    prompt: &Prompt,
    height: usize,
    width: usize,
    type_embed: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_prompt(prompt, height, width)?;
    let d = type_embed.shape()[1];
    let rows = prompt_type_rows(prompt);
    let mut data = Vec::with_capacity(rows.len() * d);
    for ((x, y), row) in prompt_coordinates(prompt, height, width).into_iter().zip(rows) {
        let code = sinusoid_code(x, y, d);
        let te = &type_embed.data()[row * d..(row + 1) * d];
        data.extend(code.iter().zip(te).map(|(c, t)| T::lit(*c) + *t));
    }
    Tensor::from_vec(&[data.len() / d, d], data)
}

fn prompt_type_rows(prompt: &Prompt) -> Vec<usize> {
    match prompt {
        Prompt::Box(_) => vec![TYPE_CORNER0, TYPE_CORNER1],
        Prompt::Point(_) => vec![TYPE_POINT],
    }
}

fn dense_rows(prompt: &Prompt, height: usize, width: usize) -> Vec<usize> {
    let inside = |b: &PromptBox, y: usize, x: usize| {
        if b.contains(y, x) {
            DENSE_INSIDE
        } else {
            DENSE_OUTSIDE
        }
    };
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| match prompt {
            Prompt::Box(b) => inside(b, y, x),
            Prompt::Point(_) => DENSE_NONE,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct Hyper {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayout {
    pub mask_token: ParamId,
    pub cross1: AttnProj,
    pub norm1: Norm,
    pub cross2: AttnProj,
    pub norm2: Norm,
    pub hyper: Hyper,
    pub upscale: Linear,
    pub out_bias: ParamId,
    pub type_embed: ParamId,
    pub dense: ParamId,
    image_pe: Arc<[f64]>,
    pixel_shuffle: Arc<[usize]>,
}

impl DecoderLayout {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let d = enc.embed_dim;
        let c = cfg.mask_channels;
        let p = enc.patch_size;
        let std = 1.0 / (d as f64).sqrt();
        let mask_token = store.insert("decoder.mask_token", Tensor::randn(&[1, d], 1.0, rng));
        let cross1 = init_attn(store, "decoder.cross1", d, rng);
        let norm1 = init_norm(store, "decoder.norm1", d);
        let cross2 = init_attn(store, "decoder.cross2", d, rng);
        let norm2 = init_norm(store, "decoder.norm2", d);
        let hyper = Hyper {
            fc1: init_linear(store, "decoder.hyper.fc1", d, d, std, rng),
            fc2: init_linear(store, "decoder.hyper.fc2", d, c, 0.1 * std, rng),
        };
        let upscale = init_linear(store, "decoder.upscale", d, p * p * c, std, rng);
        let prior = cfg.mask_prior;
        let out_bias = store.insert(
            "decoder.out_bias",
            Tensor::full(&[1], T::lit((prior / (1.0 - prior)).ln())),
        );
        let type_embed = store.insert("prompt.type_embed", Tensor::randn(&[3, d], 0.1, rng));
        let dense = store.insert("prompt.dense", Tensor::randn(&[3, c], 0.02, rng));
        Self::with_params(
            enc, cfg, mask_token, cross1, norm1, cross2, norm2, hyper, upscale, out_bias, type_embed, dense,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn with_params(
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        mask_token: ParamId,
        cross1: AttnProj,
        norm1: Norm,
        cross2: AttnProj,
        norm2: Norm,
        hyper: Hyper,
        upscale: Linear,
        out_bias: ParamId,
        type_embed: ParamId,
        dense: ParamId,
    ) -> Self {
        let (gh, gw) = enc.grid();
        let d = enc.embed_dim;
        let mut image_pe = Vec::with_capacity(gh * gw * d);
        for py in 0..gh {
            for px in 0..gw {
                image_pe.extend(sinusoid_code(
                    (px as f64 + 0.5) / gw as f64,
                    (py as f64 + 0.5) / gh as f64,
                    d,
                ));
            }
        }
        let (g, p, c) = (enc.group_size, enc.patch_size, cfg.mask_channels);
        let (h, w) = (enc.image_height, enc.image_width);
        let n = gh * gw;
        let mut pixel_shuffle = Vec::with_capacity(g * h * w * c);
        for gi in 0..g {
            for y in 0..h {
                for x in 0..w {
                    let ni = (y / p) * gw + x / p;
                    for ch in 0..c {
                        pixel_shuffle.push((gi * n + ni) * p * p * c + ((y % p) * p + x % p) * c + ch);
                    }
                }
            }
        }
        Self {
            mask_token,
            cross1,
            norm1,
            cross2,
            norm2,
            hyper,
            upscale,
            out_bias,
            type_embed,
            dense,
            image_pe: image_pe.into(),
            pixel_shuffle: pixel_shuffle.into(),
        }
    }

    /// Prompt tokens on the tape: constant sinusoid codes plus the learned
    /// type rows.
    pub fn prompt_tokens<T: Scalar>(
        &self,
        enc: &EncoderConfig,
        tape: &mut Tape<T>,
        p: &Bound,
        prompt: &Prompt,
    ) -> Result<Var> {
        let (h, w, d) = (enc.image_height, enc.image_width, enc.embed_dim);
        check_prompt(prompt, h, w)?;
        let coords = prompt_coordinates(prompt, h, w);
        let k = coords.len();
        let code: Vec<T> = coords
            .into_iter()
            .flat_map(|(x, y)| sinusoid_code(x, y, d))
            .map(T::lit)
            .collect();
        let code = tape.constant(Tensor::from_vec(&[k, d], code)?);
        let idx: Vec<usize> = prompt_type_rows(prompt)
            .into_iter()
            .flat_map(|r| (0..d).map(move |j| r * d + j))
            .collect();
        let types = tape.gather(p.var(self.type_embed), idx.into(), &[k, d]);
        Ok(tape.add(code, types))
    }

    fn cross_attention<T: Scalar>(
        tape: &mut Tape<T>,
        p: &Bound,
        proj: &AttnProj,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        groups: usize,
        heads: usize,
    ) -> Var {
        let q = linear(tape, p, proj.q, q_in);
        let k = linear(tape, p, proj.k, k_in);
        let v = linear(tape, p, proj.v, v_in);
        let a = grouped_attention(tape, q, k, v, groups, heads);
        linear(tape, p, proj.o, a)
    }

    /// Logits `(G, H, W)` from encoder features `(G·N, d)`.
    pub fn forward<T: Scalar>(
        &self,
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        tape: &mut Tape<T>,
        p: &Bound,
        features: Var,
        prompt: &Prompt,
    ) -> Result<Var> {
        let (g, n, d) = (enc.group_size, enc.num_patches(), enc.embed_dim);
        let (h, w, c, pp) = (enc.image_height, enc.image_width, cfg.mask_channels, enc.patch_size);
        let eps = T::lit(enc.layer_norm_eps);

        let prompt_tokens = self.prompt_tokens(enc, tape, p, prompt)?;
        let k = tape.shape(prompt_tokens)[0];
        let t = k + 1;
        let tokens = tape.concat(&[p.var(self.mask_token), prompt_tokens], &[t, d]);
        let tile: Vec<usize> = (0..g * t * d).map(|i| i % (t * d)).collect();
        let tokens = tape.gather(tokens, tile.into(), &[g * t, d]);

        let pe: Vec<T> = (0..g).flat_map(|_| self.image_pe.iter().map(|v| T::lit(*v))).collect();
        let pe = tape.constant(Tensor::from_vec(&[g * n, d], pe)?);
        let keyed = tape.add(features, pe);

        let a = Self::cross_attention(tape, p, &self.cross1, tokens, keyed, features, g, enc.heads);
        let t1 = tape.add(tokens, a);
        let t1 = norm(tape, p, self.norm1, t1, eps);

        let a = Self::cross_attention(tape, p, &self.cross2, keyed, t1, t1, g, enc.heads);
        let f1 = tape.add(features, a);
        let f1 = norm(tape, p, self.norm2, f1, eps);

        let mask_rows: Vec<usize> = (0..g).flat_map(|gi| (0..d).map(move |j| gi * t * d + j)).collect();
        let mask_tok = tape.gather(t1, mask_rows.into(), &[g, d]);
        let hw = linear(tape, p, self.hyper.fc1, mask_tok);
        let hw = tape.gelu(hw);
        let hw = linear(tape, p, self.hyper.fc2, hw);

        let up = linear(tape, p, self.upscale, f1);
        let up = tape.gelu(up);
        debug_assert_eq!(tape.shape(up), &[g * n, pp * pp * c]);
        let pix = tape.gather(up, self.pixel_shuffle.clone(), &[g * h * w, c]);

        let dense: Vec<usize> = dense_rows(prompt, h, w)
            .into_iter()
            .flat_map(|r| (0..c).map(move |ch| r * c + ch))
            .collect();
        let dense_idx: Vec<usize> = (0..g).flat_map(|_| dense.iter().copied()).collect();
        let dense = tape.gather(p.var(self.dense), dense_idx.into(), &[g * h * w, c]);
        let pix = tape.add(pix, dense);

        let spread: Vec<usize> = (0..g)
            .flat_map(|gi| (0..h * w).flat_map(move |_| (0..c).map(move |ch| gi * c + ch)))
            .collect();
        let hw = tape.gather(hw, spread.into(), &[g * h * w, c]);
        let prod = tape.mul(pix, hw);
        let ones = tape.constant(Tensor::full(&[c, 1], T::one()));
        let logits = tape.matmul(prod, ones);
        let logits = tape.add_row(logits, p.var(self.out_bias));
        Ok(tape.reshape(logits, &[g, h, w]))
    }
}

/// Mean binary cross-entropy with logits over all voxels; stable for large
/// `|z|`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty logits".into()));
    }
    let total: T = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(z, y)| bce_term(*z, *y))
        .sum();
    Ok(total / T::from_usize_lossy(logits.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::PromptPoint;

    #[test]
    fn bce_matches_naive_form() {
        let z = Tensor::from_vec(&[4], vec![-2.0f64, -0.3, 0.0, 1.7]).unwrap();
        let y = Tensor::from_vec(&[4], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let naive: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(z, y)| {
                let s = 1.0 / (1.0 + (-z).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((bce_loss(&z, &y).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        let z = Tensor::from_vec(&[2], vec![80.0f32, -80.0]).unwrap();
        let y = Tensor::from_vec(&[2], vec![0.0f32, 1.0]).unwrap();
        let l = bce_loss(&z, &y).unwrap();
        assert!(l.is_finite());
        assert!((l - 80.0).abs() < 1e-3);
    }

    #[test]
    fn bce_shape_mismatch() {
        let z = Tensor::<f32>::zeros(&[2]);
        let y = Tensor::<f32>::zeros(&[3]);
        assert!(bce_loss(&z, &y).is_err());
    }

    #[test]
    fn point_at_center_encodes_half_half() {
        let prompt = Prompt::Point(PromptPoint {
            slice_index: 0,
            x: 16,
            y: 16,
        });
        assert_eq!(prompt_coordinates(&prompt, 33, 33), vec![(0.5, 0.5)]);
        let te = Tensor::<f64>::zeros(&[3, 8]);
        let tok = encode_prompt(&prompt, 33, 33, &te).unwrap();
        assert_eq!(tok.shape(), &[1, 8]);
        let expect = sinusoid_code(0.5, 0.5, 8);
        assert!(tok.data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn box_gives_two_tokens_and_rejects_outside() {
        let te = Tensor::<f64>::zeros(&[3, 8]);
        let b = PromptBox::from_corners(0, 2, 3, 10, 12);
        let tok = encode_prompt(&Prompt::Box(b), 32, 32, &te).unwrap();
        assert_eq!(tok.shape(), &[2, 8]);
        let bad = PromptBox::from_corners(0, 2, 3, 40, 12);
        assert!(encode_prompt(&Prompt::Box(bad), 32, 32, &te).is_err());
    }

    #[test]
    fn sinusoid_values() {
        let v = sinusoid_code(0.25, 0.0, 4);
        assert!((v[0] - (PI * 0.25).sin()).abs() < 1e-15);
        assert!((v[1] - (PI * 0.25).cos()).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 1.0);
    }
}
