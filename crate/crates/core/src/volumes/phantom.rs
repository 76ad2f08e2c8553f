//! Synthetic four-modality phantoms with planted ellipsoidal tumors.
//!
//! Each tumor has three concentric sub-regions. A visibility profile decides
//! which modality shows which sub-region, so that the full tumor extent only
//! appears in the union of the channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dims, Modality, SegMask, Volume, NUM_MODALITIES};
use crate::error::{Error, Result};

const MIN_RADIUS: f64 = 2.0;
const TISSUE_FLOOR: f32 = 0.05;
const BRAIN_BASE: [f32; NUM_MODALITIES] = [1.0, 0.9, 0.7, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Adult,
    Meningioma,
    Pediatric,
    Ssa,
}

impl DomainTag {
    pub const ALL: [DomainTag; 4] = [
        DomainTag::Adult,
        DomainTag::Meningioma,
        DomainTag::Pediatric,
        DomainTag::Ssa,
    ];

    /// 1-based domain number used in reports (DS₁..DS₄).
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Adult => "adult",
            DomainTag::Meningioma => "meningioma",
            DomainTag::Pediatric => "pediatric",
            DomainTag::Ssa => "ssa",
        }
    }

    /// (radius scale, contrast scale, noise scale)
    fn distribution(self) -> (f64, f32, f64) {
        match self {
            DomainTag::Adult => (1.0, 1.0, 1.0),
            DomainTag::Meningioma => (1.15, 1.2, 0.8),
            DomainTag::Pediatric => (0.8, 0.75, 1.0),
            DomainTag::Ssa => (1.0, 0.85, 1.6),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubRegion {
    Core,
    Enhancing,
    Edema,
}

impl SubRegion {
    pub const ALL: [SubRegion; 3] = [SubRegion::Core, SubRegion::Enhancing, SubRegion::Edema];

    /// Sub-region at normalized ellipsoid radius `rho ∈ [0, 1]`.
    pub fn at(rho: f64) -> SubRegion {
        if rho < 0.45 {
            SubRegion::Core
        } else if rho < 0.7 {
            SubRegion::Enhancing
        } else {
            SubRegion::Edema
        }
    }
}

/// Intensity offset added in each modality to each visible sub-region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityProfile {
    pub channels: [Vec<(SubRegion, f32)>; NUM_MODALITIES],
}

impl Default for VisibilityProfile {
    fn default() -> Self {
        Self {
            channels: [
                vec![(SubRegion::Core, -0.5)],
                vec![(SubRegion::Enhancing, 0.7)],
                vec![(SubRegion::Core, 0.6), (SubRegion::Enhancing, 0.6)],
                vec![(SubRegion::Edema, 0.7)],
            ],
        }
    }
}

impl VisibilityProfile {
    pub fn contrast(&self, m: usize, region: SubRegion) -> Option<f32> {
        self.channels[m]
            .iter()
            .find(|(r, _)| *r == region)
            .map(|(_, c)| *c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub tumor_count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    #[serde(default)]
    pub visibility: VisibilityProfile,
    pub domain: DomainTag,
    pub noise_std: f64,
    pub seed: u64,
}

/// A planted tumor in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedTumor {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl PlantedTumor {
    /// Normalized ellipsoid radius of voxel `(z, y, x)`; ≤ 1 inside.
    pub fn rho(&self, z: usize, y: usize, x: usize) -> f64 {
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl PhantomSpec {
    pub fn new(height: usize, width: usize, depth: usize, domain: DomainTag, seed: u64) -> Self {
        Self {
            height,
            width,
            depth,
            tumor_count: 1,
            radius_min: 3.0,
            radius_max: 6.0,
            visibility: VisibilityProfile::default(),
            domain,
            noise_std: 0.05,
            seed,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            depth: self.depth,
            height: self.height,
            width: self.width,
        }
    }

    pub fn voxel_id(&self) -> String {
        format!("{}-{:06}", self.domain.name(), self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config("phantom grid must be at least 1 voxel".into()));
        }
        if self.radius_min < MIN_RADIUS {
            return Err(Error::Config(format!(
                "tumor radius must be at least {MIN_RADIUS} voxels, got {}",
                self.radius_min
            )));
        }
        if self.radius_max < self.radius_min {
            return Err(Error::Config(format!(
                "radius range [{}, {}] is empty",
                self.radius_min, self.radius_max
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {}", self.noise_std)));
        }
        for region in SubRegion::ALL {
            if !(0..NUM_MODALITIES).any(|m| self.visibility.contrast(m, region).is_some()) {
                return Err(Error::Config(format!(
                    "sub-region {region:?} is visible in no modality"
                )));
            }
        }
        Ok(())
    }

    /// Tumor geometry, drawn from its own seeded stream.
    pub fn plan_tumors(&self) -> Result<Vec<PlantedTumor>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let (radius_scale, _, _) = self.domain.distribution();
        let extent = [self.depth, self.height, self.width];
        let mut tumors = Vec::with_capacity(self.tumor_count);
        for t in 0..self.tumor_count {
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for axis in 0..3 {
                let base = if self.radius_max > self.radius_min {
                    rng.random_range(self.radius_min..=self.radius_max)
                } else {
                    self.radius_min
                };
                let r = (base * radius_scale).max(MIN_RADIUS);
                let hi = extent[axis] as f64 - 1.0 - r;
                if hi < r {
                    return Err(Error::TumorDoesNotFit(format!(
                        "tumor {t} radius {r:.2} needs {} voxels along axis {axis}, grid has {}",
                        (2.0 * r).ceil() as usize + 1,
                        extent[axis]
                    )));
                }
                radii[axis] = r;
                center[axis] = if hi > r { rng.random_range(r..=hi) } else { r };
            }
            tumors.push(PlantedTumor { center, radii });
        }
        Ok(tumors)
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, SegMask)> {
    let tumors = spec.plan_tumors()?;
    let dims = spec.dims();
    let (_, contrast_scale, noise_scale) = spec.domain.distribution();
    let (d_n, h_n, w_n) = (dims.depth, dims.height, dims.width);

    // Brain: an ellipsoid filling most of the grid.
    let brain_center = [
        (d_n as f64 - 1.0) / 2.0,
        (h_n as f64 - 1.0) / 2.0,
        (w_n as f64 - 1.0) / 2.0,
    ];
    let brain_radii = [
        (0.5 * d_n as f64).max(0.5),
        (0.45 * h_n as f64).max(0.5),
        (0.45 * w_n as f64).max(0.5),
    ];
    let in_brain = |z: usize, y: usize, x: usize| {
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|i| ((p[i] - brain_center[i]) / brain_radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    };

    // Per-voxel region: None for background, Some(None) for healthy tissue,
    // Some(Some(r)) for tumor sub-region r (innermost wins across tumors).
    let mut region: Vec<Option<Option<SubRegion>>> = vec![None; dims.voxels()];
    let mut mask = vec![0u8; dims.voxels()];
    for z in 0..d_n {
        for y in 0..h_n {
            for x in 0..w_n {
                let i = (z * h_n + y) * w_n + x;
                let rho = tumors
                    .iter()
                    .map(|t| t.rho(z, y, x))
                    .fold(f64::INFINITY, f64::min);
                if rho <= 1.0 {
                    mask[i] = 1;
                    region[i] = Some(Some(SubRegion::at(rho)));
                } else if in_brain(z, y, x) {
                    region[i] = Some(None);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let noise = Normal::new(0.0, spec.noise_std * noise_scale)
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut data = vec![0.0f32; NUM_MODALITIES * dims.voxels()];
    for m in 0..NUM_MODALITIES {
        let channel = &mut data[m * dims.voxels()..(m + 1) * dims.voxels()];
        for (i, v) in channel.iter_mut().enumerate() {
            let Some(tissue) = region[i] else { continue };
            let mut value = BRAIN_BASE[m];
            if let Some(sub) = tissue {
                if let Some(c) = spec.visibility.contrast(m, sub) {
                    value += c * contrast_scale;
                }
            }
            value += noise.sample(&mut rng) as f32;
            *v = value.max(TISSUE_FLOOR);
        }
    }

    let volume = Volume::new(dims, spec.voxel_id(), data)?;
    let mask = SegMask::binary(dims, mask)?;
    Ok((volume, mask))
}

/// Base (healthy tissue) intensity of modality `m` before noise.
pub fn brain_base(m: Modality) -> f32 {
    BRAIN_BASE[m.index()]
}
