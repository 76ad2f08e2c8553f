//! Dice metrics, full-volume inference and cross-domain reports.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::model::GbtSam;
use crate::sampler::{Prompt, SliceGroup, GROUP_SIZE};
use crate::scalar::Scalar;
use crate::training::{window_prompt, PromptRegime};
use crate::volumes::{Dims, DomainTag, MaskKind, SegMask, Volume};

/// `2|Y∩P| / (|Y|+|P|)` over binary masks; 1.0 when both are empty.
pub fn dice(y: &SegMask, p: &SegMask) -> Result<f64> {
    if y.kind() != MaskKind::Binary || p.kind() != MaskKind::Binary {
        return Err(Error::Invalid("dice needs binary masks".into()));
    }
    if y.dims() != p.dims() {
        return Err(Error::Shape(format!("mask dims {:?} vs {:?}", y.dims(), p.dims())));
    }
    Ok(dice_counts(y.data(), p.data()))
}

fn dice_counts(y: &[f32], p: &[f32]) -> f64 {
    let (mut inter, mut ny, mut np) = (0usize, 0usize, 0usize);
    for (a, b) in y.iter().zip(p) {
        let (a, b) = (*a != 0.0, *b != 0.0);
        ny += a as usize;
        np += b as usize;
        inter += (a && b) as usize;
    }
    if ny + np == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (ny + np) as f64
    }
}

/// Mean over the three unseen domains. Inputs must all be fractions or
/// all be percentages.
pub fn mean_unseen_dice(ds2: f64, ds3: f64, ds4: f64) -> Result<f64> {
    let v = [ds2, ds3, ds4];
    if v.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 100.0) {
        return Err(Error::Invalid(format!("Dice values {v:?} outside [0, 100]")));
    }
    let frac = v.iter().any(|x| *x > 0.0 && *x < 1.0);
    let pct = v.iter().any(|x| *x > 1.0);
    if frac && pct {
        return Err(Error::Invalid(format!("Dice values {v:?} mix [0,1] and [0,100] scales")));
    }
    Ok((ds2 + ds3 + ds4) / 3.0)
}

/// Voxels `≥ threshold` become 1.
pub fn binarize(prob: &SegMask, threshold: f64) -> Result<SegMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    if prob.kind() != MaskKind::Probability {
        return Err(Error::Invalid("binarize needs a probability mask".into()));
    }
    let t = threshold as f32;
    let data = prob.data().iter().map(|v| u8::from(*v >= t)).collect();
    SegMask::binary(prob.dims(), data)
}

/// Windows of `G` consecutive slices, stride `G`; the last one repeats
/// its final slice when `depth` is not a multiple of `G`.
pub fn inference_windows(depth: usize) -> Result<Vec<[usize; GROUP_SIZE]>> {
    if depth == 0 {
        return Err(Error::Invalid("volume has no slices".into()));
    }
    Ok((0..depth)
        .step_by(GROUP_SIZE)
        .map(|start| std::array::from_fn(|i| (start + i).min(depth - 1)))
        .collect())
}

/// Where each window's prompt comes from.
pub enum PromptSource<'a> {
    /// Derived from the ground truth with the test-time coverage of the
    /// regime; windows without tumor are predicted empty.
    GroundTruth {
        mask: &'a SegMask,
        regime: PromptRegime,
        seed: u64,
    },
    /// The same prompt for every window.
    Fixed(Prompt),
}

/// Per-voxel probabilities for the whole volume.
pub fn infer_volume<T: Scalar>(
    model: &GbtSam<T>,
    volume: &Volume,
    source: &PromptSource<'_>,
) -> Result<SegMask> {
    let dims = volume.dims();
    let windows = inference_windows(dims.depth)?;
    let plane = dims.slice_len();
    let mut out = vec![0.0f32; dims.voxels()];
    let mut rng = match source {
        PromptSource::GroundTruth { seed, .. } => ChaCha8Rng::seed_from_u64(*seed),
        PromptSource::Fixed(_) => ChaCha8Rng::seed_from_u64(0),
    };
    let mut fallbacks = 0;
    for (w, idx) in windows.iter().enumerate() {
        let prompt = match source {
            PromptSource::GroundTruth { mask, regime, .. } => {
                if mask.dims() != dims {
                    return Err(Error::Shape(format!("mask {:?} vs volume {:?}", mask.dims(), dims)));
                }
                let start = w * GROUP_SIZE;
                let real: Vec<usize> = (start..(start + GROUP_SIZE).min(dims.depth)).collect();
                window_prompt(mask, &real, regime.test_coverage(), &mut rng, &mut fallbacks)?
            }
            PromptSource::Fixed(p) => Some(*p),
        };
        let Some(prompt) = prompt else { continue };
        let group = SliceGroup::<T>::from_volume(volume, *idx)?;
        let logits = model.predict(&group, &prompt)?;
        let start = w * GROUP_SIZE;
        for (g, d) in idx.iter().enumerate() {
            if *d != start + g {
                continue;
            }
            let src = &logits.data()[g * plane..(g + 1) * plane];
            for (o, z) in out[d * plane..(d + 1) * plane].iter_mut().zip(src) {
                *o = sigmoid(*z).to_f32_lossy();
            }
        }
    }
    if fallbacks > 0 {
        log::debug!("{}: {fallbacks} window(s) used the tight box", volume.voxel_id());
    }
    SegMask::probability(dims, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDice {
    pub voxel_id: String,
    pub domain: DomainTag,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDice {
    pub domain: DomainTag,
    /// 1-based domain number.
    pub index: usize,
    /// Mean over the domain's volumes.
    pub ds: f64,
    pub std: f64,
    pub volumes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub regime: PromptRegime,
    pub threshold: f64,
    /// Label of the modality transform applied to the inputs.
    pub modalities: String,
    pub domains: Vec<DomainDice>,
    /// Present when domains 2, 3 and 4 were all evaluated.
    pub ds234: Option<f64>,
    pub volumes: Vec<VolumeDice>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl DiceReport {
    /// Aggregates per-volume scores into per-domain means and DS₂₃₄.
    pub fn from_volumes(
        regime: PromptRegime,
        threshold: f64,
        modalities: String,
        volumes: Vec<VolumeDice>,
    ) -> Result<Self> {
        let mut domains = Vec::new();
        for tag in DomainTag::ALL {
            let scores: Vec<f64> = volumes.iter().filter(|v| v.domain == tag).map(|v| v.dice).collect();
            if scores.is_empty() {
                continue;
            }
            let (ds, std) = mean_std(&scores);
            domains.push(DomainDice {
                domain: tag,
                index: tag.number(),
                ds,
                std,
                volumes: scores.len(),
            });
        }
        let mut report = Self {
            regime,
            threshold,
            modalities,
            domains,
            ds234: None,
            volumes,
        };
        report.ds234 = report.recompute_ds234()?;
        Ok(report)
    }

    pub fn domain(&self, tag: DomainTag) -> Option<&DomainDice> {
        self.domains.iter().find(|d| d.domain == tag)
    }

    /// DS₂₃₄ from the per-volume breakdown.
    pub fn recompute_ds234(&self) -> Result<Option<f64>> {
        let ds = |tag: DomainTag| -> Option<f64> {
            let s: Vec<f64> = self.volumes.iter().filter(|v| v.domain == tag).map(|v| v.dice).collect();
            (!s.is_empty()).then(|| mean_std(&s).0)
        };
        match (ds(DomainTag::Meningioma), ds(DomainTag::Pediatric), ds(DomainTag::Ssa)) {
            (Some(a), Some(b), Some(c)) => mean_unseen_dice(a, b, c).map(Some),
            _ => Ok(None),
        }
    }

    /// Mean Dice over every evaluated volume.
    pub fn mean_dice(&self) -> f64 {
        let v: Vec<f64> = self.volumes.iter().map(|v| v.dice).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            mean_std(&v).0
        }
    }

    /// Text table: one column per domain, then DS₂₃₄.
    pub fn table(&self) -> String {
        let mut head = String::from("regime      ");
        let mut row = format!("{:<12}", self.regime.to_string());
        for d in &self.domains {
            head.push_str(&format!("{:>16}", format!("DS{}", d.index)));
            row.push_str(&format!("{:>16}", format!("{:.2} ± {:.2}", 100.0 * d.ds, 100.0 * d.std)));
        }
        head.push_str(&format!("{:>10}", "DS234"));
        match self.ds234 {
            Some(v) => row.push_str(&format!("{:>10.2}", 100.0 * v)),
            None => row.push_str(&format!("{:>10}", "-")),
        }
        format!("{head}\n{row}\n")
    }
}

/// Per-domain mean ± std across reports from different seeds.
pub fn aggregate_seeds(reports: &[DiceReport]) -> Vec<(DomainTag, f64, f64)> {
    DomainTag::ALL
        .into_iter()
        .filter_map(|tag| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.domain(tag)).map(|d| d.ds).collect();
            (!v.is_empty()).then(|| {
                let (m, s) = mean_std(&v);
                (tag, m, s)
            })
        })
        .collect()
}

/// One evaluation volume with its ground truth and domain.
pub struct EvalItem<'a> {
    pub volume: &'a Volume,
    pub mask: &'a SegMask,
    pub domain: DomainTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub regime: PromptRegime,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            regime: PromptRegime::default(),
            threshold: default_threshold(),
            seed: 0,
        }
    }
}

/// Scores every item and aggregates a report.
pub fn evaluate<T: Scalar>(
    model: &GbtSam<T>,
    items: &[EvalItem<'_>],
    cfg: &EvalConfig,
    modalities: &str,
) -> Result<DiceReport> {
    let mut volumes = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let source = PromptSource::GroundTruth {
            mask: item.mask,
            regime: cfg.regime,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        let prob = infer_volume(model, item.volume, &source)?;
        let pred = binarize(&prob, cfg.threshold)?;
        volumes.push(VolumeDice {
            voxel_id: item.volume.voxel_id().to_string(),
            domain: item.domain,
            dice: dice(item.mask, &pred)?,
        });
    }
    DiceReport::from_volumes(cfg.regime, cfg.threshold, modalities.to_string(), volumes)
}

/// Empty prediction of the same shape.
pub fn empty_prediction(dims: Dims) -> SegMask {
    SegMask::zeros(dims)
}
