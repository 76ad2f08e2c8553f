//! Two-step fine-tuning: phase 1 trains only the four-channel patch
//! embedding, phase 2 adds the low-rank adapters and depth blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::GbtSam;
use crate::optim::{clip_global_norm, Adam};
use crate::params::{ParamGroup, ParamStore};
use crate::sampler::{
    group_targets, make_box_prompt, make_point_prompt, min_depth, select_slices, Plane, Prompt, PromptBox,
    SliceGroup, SliceMode,
};
use crate::scalar::Scalar;
use crate::volumes::{SegMask, Volume};

/// Attempts at drawing a slice group whose window contains tumor.
pub const MAX_SAMPLE_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Step1,
    Step2,
    /// Patch embedding and adapters together from the start.
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Step1 => "step1",
            Phase::Step2 => "step2",
            Phase::Joint => "joint",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::Step1 => 1,
            Phase::Step2 => 2,
            Phase::Joint => 3,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Step 1 then step 2.
    #[default]
    TwoStep,
    /// A single joint phase.
    OneStep,
    /// Step 1 only.
    PatchEmbedOnly,
}

impl TrainMode {
    /// Phases and their step counts.
    pub fn schedule(self, cfg: &TrainConfig) -> Vec<(Phase, usize)> {
        match self {
            TrainMode::TwoStep => vec![(Phase::Step1, cfg.steps_step1), (Phase::Step2, cfg.steps_step2)],
            TrainMode::OneStep => vec![(Phase::Joint, cfg.steps_step1 + cfg.steps_step2)],
            TrainMode::PatchEmbedOnly => vec![(Phase::Step1, cfg.steps_step1 + cfg.steps_step2)],
        }
    }
}

/// How prompts are produced at train and test time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PromptRegime {
    /// One point on the tumor.
    OnePoint,
    /// Boxes covering `train` / `test` fraction of the tumor pixels.
    Box { train: f64, test: f64 },
}

impl PromptRegime {
    pub fn train_coverage(self) -> Option<f64> {
        match self {
            PromptRegime::OnePoint => None,
            PromptRegime::Box { train, .. } => Some(train),
        }
    }

    pub fn test_coverage(self) -> Option<f64> {
        match self {
            PromptRegime::OnePoint => None,
            PromptRegime::Box { test, .. } => Some(test),
        }
    }
}

impl Default for PromptRegime {
    fn default() -> Self {
        PromptRegime::Box { train: 1.0, test: 1.0 }
    }
}

impl FromStr for PromptRegime {
    type Err = Error;

    /// `1p` or `BB-<train %>-<test %>`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("1p") {
            return Ok(PromptRegime::OnePoint);
        }
        let bad = || Error::Config(format!("prompt regime {s:?}: expected \"1p\" or \"BB-<p>-<p>\""));
        let rest = s.strip_prefix("BB-").or_else(|| s.strip_prefix("bb-")).ok_or_else(bad)?;
        let (a, b) = rest.split_once('-').ok_or_else(bad)?;
        let pct = |t: &str| -> Result<f64> {
            let v: f64 = t.parse().map_err(|_| bad())?;
            if v > 0.0 && v <= 100.0 {
                Ok(v / 100.0)
            } else {
                Err(bad())
            }
        };
        Ok(PromptRegime::Box {
            train: pct(a)?,
            test: pct(b)?,
        })
    }
}

impl fmt::Display for PromptRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptRegime::OnePoint => f.write_str("1p"),
            PromptRegime::Box { train, test } => {
                write!(f, "BB-{}-{}", (train * 100.0).round(), (test * 100.0).round())
            }
        }
    }
}

impl Serialize for PromptRegime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptRegime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    1.0
}
fn default_delta() -> usize {
    1
}
fn default_steps() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub mode: TrainMode,
    /// Run only this phase; `step2` then needs a phase-1 checkpoint.
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default = "default_steps")]
    pub steps_step1: usize,
    #[serde(default = "default_steps")]
    pub steps_step2: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: usize,
    #[serde(default)]
    pub slice_mode: SliceMode,
    #[serde(default)]
    pub regime: PromptRegime,
    /// Also train the mask decoder and prompt encoder in every phase.
    #[serde(default)]
    pub train_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::default(),
            phase: None,
            steps_step1: default_steps(),
            steps_step2: default_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            clip_norm: default_clip(),
            seed: 0,
            delta: default_delta(),
            slice_mode: SliceMode::default(),
            regime: PromptRegime::default(),
            train_decoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be > 0", self.clip_norm)));
        }
        if self.delta == 0 {
            return Err(Error::Config("delta must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Which parameter groups receive updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub trainable: BTreeMap<ParamGroup, bool>,
}

impl FreezePlan {
    /// Everything frozen.
    pub fn empty() -> Self {
        Self {
            trainable: ParamGroup::ALL.into_iter().map(|g| (g, false)).collect(),
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.get(&group).copied().unwrap_or(false)
    }

    /// Per-parameter flags in store order; unknown names are an error.
    pub fn mask<T: Scalar>(&self, params: &ParamStore<T>) -> Result<Vec<bool>> {
        params
            .ids()
            .map(|id| params.group(id).map(|g| self.is_trainable(g)))
            .collect()
    }
}

pub fn build_freeze_plan(phase: Phase, train_decoder: bool) -> FreezePlan {
    let mut plan = FreezePlan::empty();
    let on: &[ParamGroup] = match phase {
        Phase::Step1 => &[ParamGroup::PatchEmbed],
        Phase::Step2 | Phase::Joint => &[ParamGroup::PatchEmbed, ParamGroup::Lora, ParamGroup::Depth],
    };
    for g in on {
        plan.trainable.insert(*g, true);
    }
    if train_decoder {
        plan.trainable.insert(ParamGroup::Decoder, true);
        plan.trainable.insert(ParamGroup::Prompt, true);
    }
    plan
}

/// Element count over the trainable groups of `plan`.
pub fn count_trainable_params<T: Scalar>(params: &ParamStore<T>, plan: &FreezePlan) -> Result<usize> {
    let mut n = 0;
    for id in params.ids() {
        if plan.is_trainable(params.group(id)?) {
            n += params.get(id).len();
        }
    }
    Ok(n)
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub trainable_param_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Volumes too shallow for the slice gap, skipped.
    pub skipped_shallow: usize,
    /// Draws whose window had no tumor and were redrawn.
    pub redrawn_empty: usize,
    /// Boxes that fell back to the tight box because the coverage band
    /// could not be hit.
    pub tight_box_fallbacks: usize,
    pub trainable_param_count: usize,
}

/// A training sample: the group, its per-voxel targets and the prompt.
pub struct Sample<T> {
    pub group: SliceGroup<T>,
    pub targets: Arc<[T]>,
    pub prompt: Prompt,
}

/// Prompt from the second slice of the window, or from the union of the
/// window when that slice is empty. `None` if the window has no tumor.
pub(crate) fn window_prompt<R: Rng + ?Sized>(
    mask: &SegMask,
    indices: &[usize],
    coverage: Option<f64>,
    rng: &mut R,
    fallbacks: &mut usize,
) -> Result<Option<Prompt>> {
    let anchor = indices[1.min(indices.len() - 1)];
    let mut plane = Plane::from_mask_slice(mask, anchor);
    if plane.count() == 0 {
        plane = Plane::union_of(mask, indices);
        if plane.count() == 0 {
            return Ok(None);
        }
    }
    let prompt = match coverage {
        None => Prompt::Point(make_point_prompt(&plane, anchor, rng)?),
        Some(p) => match make_box_prompt(&plane, anchor, p, rng) {
            Ok(b) => Prompt::Box(b),
            Err(Error::CoverageNotReached { .. }) => {
                *fallbacks += 1;
                let (x0, y0, x1, y1) = plane.bounding_box().ok_or(Error::NoForeground)?;
                Prompt::Box(PromptBox {
                    slice_index: anchor,
                    x0,
                    y0,
                    x1,
                    y1,
                    achieved_coverage: 1.0,
                })
            }
            Err(e) => return Err(e),
        },
    };
    Ok(Some(prompt))
}

fn draw_sample<T: Scalar, R: Rng + ?Sized>(
    data: &[(&Volume, &SegMask)],
    cfg: &TrainConfig,
    rng: &mut R,
    summary: &mut PhaseSummary,
) -> Result<Sample<T>> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let (volume, mask) = data[rng.random_range(0..data.len())];
        let idx = select_slices(volume.dims().depth, cfg.delta, cfg.slice_mode, rng)?;
        let Some(prompt) =
            window_prompt(mask, &idx, cfg.regime.train_coverage(), rng, &mut summary.tight_box_fallbacks)?
        else {
            summary.redrawn_empty += 1;
            continue;
        };
        let group = SliceGroup::from_volume(volume, idx)?;
        let targets = group_targets(mask, &idx).into();
        return Ok(Sample { group, targets, prompt });
    }
    Err(Error::Invalid(format!(
        "no slice window with tumor after {MAX_SAMPLE_ATTEMPTS} draws"
    )))
}

/// Loss and gradients for one sample; gradients only for flagged params.
pub fn sample_gradients<T: Scalar>(
    model: &GbtSam<T>,
    trainable: &[bool],
    sample: &Sample<T>,
) -> Result<(T, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, trainable);
    let logits = model.forward(&mut tape, &bound, &sample.group, &sample.prompt)?;
    let loss = tape.bce_with_logits(logits, sample.targets.clone());
    let value = tape.value(loss).item();
    let grads = tape.backward(loss);
    let out = model
        .params()
        .ids()
        .map(|id| {
            if trainable[id.index()] {
                grads.get(bound.var(id)).map(<[T]>::to_vec)
            } else {
                None
            }
        })
        .collect();
    Ok((value, out))
}

/// Trains `model` for `steps` optimizer steps under `phase`'s freeze plan.
/// `step_offset` numbers the log records; `on_step` sees each record.
pub fn train_phase<T: Scalar>(
    model: &mut GbtSam<T>,
    data: &[(&Volume, &SegMask)],
    cfg: &TrainConfig,
    phase: Phase,
    steps: usize,
    step_offset: usize,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    let plan = build_freeze_plan(phase, cfg.train_decoder);
    let trainable = plan.mask(model.params())?;
    let mut summary = PhaseSummary {
        trainable_param_count: count_trainable_params(model.params(), &plan)?,
        ..Default::default()
    };
    let need = min_depth(cfg.delta);
    let usable: Vec<(&Volume, &SegMask)> = data
        .iter()
        .copied()
        .filter(|(v, _)| v.dims().depth >= need)
        .collect();
    summary.skipped_shallow = data.len() - usable.len();
    if summary.skipped_shallow > 0 {
        log::warn!(
            "{} volume(s) shallower than {need} slices skipped for δ={}",
            summary.skipped_shallow,
            cfg.delta
        );
    }
    if usable.is_empty() {
        return Err(Error::Invalid(format!(
            "no training volume has at least {need} slices"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.stream());
    let mut adam = Adam::new(cfg.lr);
    let scale = T::one() / T::from_usize_lossy(cfg.batch_size);
    let mut last_finite = None;
    for s in 0..steps {
        let mut acc: Vec<Option<Vec<T>>> = vec![None; trainable.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = draw_sample::<T, _>(&usable, cfg, &mut rng, &mut summary)?;
            let (l, grads) = sample_gradients(model, &trainable, &sample)?;
            loss += l.to_f64_lossy();
            for (a, g) in acc.iter_mut().zip(grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
        }
        loss /= cfg.batch_size as f64;
        let step = step_offset + s + 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                phase: phase.name().to_string(),
                loss,
                last_finite,
            });
        }
        last_finite = Some(loss);
        for g in acc.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
        clip_global_norm(&mut acc, cfg.clip_norm);
        adam.step(model.params_mut(), &acc);
        summary.losses.push(loss);
        summary.steps += 1;
        on_step(&StepRecord {
            step,
            phase,
            loss,
            lr: cfg.lr,
            trainable_param_count: summary.trainable_param_count,
        })?;
    }
    Ok(summary)
}
