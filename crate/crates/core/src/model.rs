//! The full promptable segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::{check_group, EncoderConfig, EncoderLayout};
use crate::error::{Error, Result};
use crate::head::{DecoderConfig, DecoderLayout};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::sampler::{Prompt, SliceGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Seed for weight initialization.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Clone, Debug)]
pub struct GbtSam<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: EncoderLayout,
    decoder: DecoderLayout,
}

impl<T: Scalar> GbtSam<T> {
    /// Randomly initialized network; adapters start as exact no-ops.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = EncoderLayout::build(&config.encoder, &mut params, &mut rng);
        let decoder = DecoderLayout::build(&config.encoder, &config.decoder, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Element count per parameter group.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| ParamGroup::of(name).ok() == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Records the full forward pass; returns logits `(G, H, W)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        group: &SliceGroup<T>,
        prompt: &Prompt,
    ) -> Result<Var> {
        let features = self.encode_on(tape, bound, group, true)?;
        self.decoder
            .forward(&self.config.encoder, &self.config.decoder, tape, bound, features, prompt)
    }

    pub(crate) fn encode_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        group: &SliceGroup<T>,
        adapters: bool,
    ) -> Result<Var> {
        check_group(&self.config.encoder, group)?;
        let slices = tape.constant(group.slices.clone());
        Ok(self
            .encoder
            .forward(&self.config.encoder, tape, bound, slices, adapters))
    }

    /// Logits `(G, H, W)` for one group and prompt.
    pub fn predict(&self, group: &SliceGroup<T>, prompt: &Prompt) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[]);
        let out = self.forward(&mut tape, &bound, group, prompt)?;
        Ok(tape.value(out).clone())
    }

    /// Patch tokens `(G, N, d)` before the transformer blocks.
    pub fn patch_embed(&self, group: &SliceGroup<T>) -> Result<Tensor<T>> {
        let cfg = &self.config.encoder;
        check_group(cfg, group)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[]);
        let slices = tape.constant(group.slices.clone());
        let out = self.encoder.patch_embed(cfg, &mut tape, &bound, slices);
        tape.value(out)
            .clone()
            .reshape(&[cfg.group_size, cfg.num_patches(), cfg.embed_dim])
    }

    /// Encoder features `(G, N, d)`; `adapters == false` skips the low-rank
    /// and depth branches.
    pub fn encode(&self, group: &SliceGroup<T>, adapters: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[]);
        let out = self.encode_on(&mut tape, &bound, group, adapters)?;
        let cfg = &self.config.encoder;
        tape.value(out)
            .clone()
            .reshape(&[cfg.group_size, cfg.num_patches(), cfg.embed_dim])
    }

    /// Mask logits `(G, H, W)` from encoder features `(G, N, d)`.
    pub fn decode_mask(&self, features: &Tensor<T>, prompt: &Prompt) -> Result<Tensor<T>> {
        let cfg = &self.config.encoder;
        let (g, n, d) = (cfg.group_size, cfg.num_patches(), cfg.embed_dim);
        if features.shape() != [g, n, d] {
            return Err(Error::Shape(format!(
                "decoder expects ({g}, {n}, {d}) features, got {:?}",
                features.shape()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[]);
        let f = tape.constant(features.clone().reshape(&[g * n, d])?);
        let out = self
            .decoder
            .forward(cfg, &self.config.decoder, &mut tape, &bound, f, prompt)?;
        Ok(tape.value(out).clone())
    }

    /// Runs one depth-conditioning block on `(G, N, d)` tokens.
    pub fn depth_condition(&self, block: usize, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config.encoder;
        let (g, n, d) = (cfg.group_size, cfg.num_patches(), cfg.embed_dim);
        if tokens.shape() != [g, n, d] {
            return Err(Error::Shape(format!(
                "depth block expects ({g}, {n}, {d}) tokens, got {:?}",
                tokens.shape()
            )));
        }
        let depth = self
            .encoder
            .blocks
            .get(block)
            .and_then(|b| b.depth.as_ref())
            .ok_or_else(|| Error::Config(format!("no depth block {block}")))?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[]);
        let x = tape.constant(tokens.clone().reshape(&[g * n, d])?);
        let y = self.encoder.depth_condition(cfg, &mut tape, &bound, depth, x);
        tape.value(y).clone().reshape(&[g, n, d])
    }
}
