//! Multi-parametric MRI volumes, segmentation masks, and their persistence.
//!
//! Voxel data is stored `[modality][depth][height][width]` so that one
//! modality of one slice is a contiguous `H·W` run.

mod io;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    decode_container, encode_container, load_mask, load_volume, save_mask, save_volume,
    MaskHeader, VolumeHeader, MAGIC,
};
pub use phantom::{brain_base, generate_phantom, DomainTag, PhantomSpec, SubRegion, VisibilityProfile};

pub const NUM_MODALITIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T1")]
    T1,
    #[serde(rename = "T1c")]
    T1c,
    #[serde(rename = "T2")]
    T2,
    #[serde(rename = "T2-FLAIR")]
    Flair,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] =
        [Modality::T1, Modality::T1c, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
            Modality::Flair => "T2-FLAIR",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("flair") && *m == Modality::Flair))
            .ok_or_else(|| Error::Invalid(format!("unknown modality {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }
}

/// A 4-modality scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxel_id: String,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxel_id: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        if dims.depth == 0 || dims.height == 0 || dims.width == 0 {
            return Err(Error::Invalid(format!("empty volume dims {dims:?}")));
        }
        let expected = NUM_MODALITIES * dims.voxels();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "volume data has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            voxel_id: voxel_id.into(),
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_id(&self) -> &str {
        &self.voxel_id
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn modality(&self, m: usize) -> &[f32] {
        let n = self.dims.voxels();
        &self.data[m * n..(m + 1) * n]
    }

    fn modality_mut(&mut self, m: usize) -> &mut [f32] {
        let n = self.dims.voxels();
        &mut self.data[m * n..(m + 1) * n]
    }

    /// One modality of one slice, `H·W` values.
    pub fn slice(&self, m: usize, d: usize) -> &[f32] {
        let s = self.dims.slice_len();
        &self.modality(m)[d * s..(d + 1) * s]
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader::for_volume(self)
    }

    /// Per-modality z-score over the nonzero (foreground) voxels; background
    /// stays exactly zero.
    pub fn normalize(&self) -> Result<Volume> {
        let mut out = self.clone();
        for m in 0..NUM_MODALITIES {
            let channel = out.modality_mut(m);
            let (mut n, mut sum) = (0usize, 0.0f64);
            for v in channel.iter().filter(|v| **v != 0.0) {
                n += 1;
                sum += *v as f64;
            }
            let constant = || Error::ConstantModality {
                modality: Modality::ALL[m].name().to_string(),
            };
            if n == 0 {
                return Err(constant());
            }
            let mean = sum / n as f64;
            let var = channel
                .iter()
                .filter(|v| **v != 0.0)
                .map(|v| (*v as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            if !(std > 0.0) || !std.is_finite() {
                return Err(constant());
            }
            for v in channel.iter_mut().filter(|v| **v != 0.0) {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
        Ok(out)
    }

    /// Ablation transform over modalities.
    pub fn with_modalities(&self, transform: ModalityTransform) -> Volume {
        let mut out = self.clone();
        match transform {
            ModalityTransform::All => {}
            ModalityTransform::Replicate(keep) => {
                let src = self.modality(keep.index()).to_vec();
                for m in 0..NUM_MODALITIES {
                    out.modality_mut(m).copy_from_slice(&src);
                }
            }
            ModalityTransform::Drop(drop) => {
                out.modality_mut(drop.index()).fill(0.0);
            }
        }
        out
    }
}

/// Modality ablation applied at the data level; the channel count stays 4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModalityTransform {
    #[default]
    All,
    /// One modality copied into all four channels.
    Replicate(Modality),
    /// The named channel zeroed (three-modality case).
    Drop(Modality),
}

impl ModalityTransform {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        match s.split_once(':') {
            Some(("replicate", m)) => Ok(Self::Replicate(Modality::parse(m)?)),
            Some(("drop", m)) => Ok(Self::Drop(Modality::parse(m)?)),
            _ => Err(Error::Invalid(format!(
                "modality transform {s:?}: expected all | replicate:<m> | drop:<m>"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::All => "all".into(),
            Self::Replicate(m) => format!("replicate:{}", m.name()),
            Self::Drop(m) => format!("drop:{}", m.name()),
        }
    }
}

impl Serialize for ModalityTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ModalityTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Binary,
    Probability,
}

/// A `(D, H, W)` mask aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    dims: Dims,
    kind: MaskKind,
    data: Vec<f32>,
}

impl SegMask {
    pub fn binary(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::Invalid(format!("binary mask contains value {v}")));
        }
        Self::checked(dims, MaskKind::Binary, data.into_iter().map(f32::from).collect())
    }

    pub fn probability(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("probability {v} outside [0, 1]")));
        }
        Self::checked(dims, MaskKind::Probability, data)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            kind: MaskKind::Binary,
            data: vec![0.0; dims.voxels()],
        }
    }

    fn checked(dims: Dims, kind: MaskKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "mask has {} values, dims {dims:?} need {}",
                data.len(),
                dims.voxels()
            )));
        }
        Ok(Self { dims, kind, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, d: usize) -> &[f32] {
        let s = self.dims.slice_len();
        &self.data[d * s..(d + 1) * s]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (*v >= 0.5) as u8).collect()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v >= 0.5).count()
    }

    pub fn slice_has_foreground(&self, d: usize) -> bool {
        self.slice(d).iter().any(|v| *v >= 0.5)
    }
}
