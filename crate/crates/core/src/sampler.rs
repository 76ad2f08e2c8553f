//! Slice-group selection and prompt synthesis.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::{SegMask, Volume, NUM_MODALITIES};

/// Slices per group.
pub const GROUP_SIZE: usize = 4;

/// Half-width of the accepted coverage band around the target.
pub const COVERAGE_BAND: f64 = 0.05;
pub const MAX_BOX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceMode {
    /// `{b−δ, b, b+δ, b+2δ}` around a uniform base `b`.
    #[default]
    Fixed,
    /// Four distinct uniform indices.
    Random,
}

pub fn min_depth(delta: usize) -> usize {
    3 * delta + 1
}

/// Group indices for an explicit base slice.
pub fn slices_around(depth: usize, delta: usize, base: usize) -> Result<[usize; GROUP_SIZE]> {
    check_depth(depth, delta)?;
    if base < delta || base + 2 * delta > depth - 1 {
        return Err(Error::Invalid(format!(
            "base slice {base} outside [{delta}, {}]",
            depth - 1 - 2 * delta
        )));
    }
    Ok([base - delta, base, base + delta, base + 2 * delta])
}

fn check_depth(depth: usize, delta: usize) -> Result<()> {
    if delta == 0 {
        return Err(Error::Config("slice gap δ must be at least 1".into()));
    }
    if depth < min_depth(delta) {
        return Err(Error::TooShallow {
            depth,
            delta,
            required: min_depth(delta),
        });
    }
    Ok(())
}

/// Draws the base uniformly from `[δ, D−1−2δ]` so every index is valid.
pub fn select_slices<R: Rng + ?Sized>(
    depth: usize,
    delta: usize,
    mode: SliceMode,
    rng: &mut R,
) -> Result<[usize; GROUP_SIZE]> {
    match mode {
        SliceMode::Fixed => {
            check_depth(depth, delta)?;
            let base = rng.random_range(delta..=depth - 1 - 2 * delta);
            slices_around(depth, delta, base)
        }
        SliceMode::Random => {
            if depth < GROUP_SIZE {
                return Err(Error::TooShallow {
                    depth,
                    delta: 1,
                    required: GROUP_SIZE,
                });
            }
            let mut idx = [0; GROUP_SIZE];
            for (slot, v) in idx.iter_mut().zip(sample(rng, depth, GROUP_SIZE)) {
                *slot = v;
            }
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Four slices of one volume, `(G, M, H, W)`.
#[derive(Clone, Debug)]
pub struct SliceGroup<T> {
    pub slices: Tensor<T>,
    pub depth_indices: [usize; GROUP_SIZE],
    pub voxel_id: String,
}

impl<T: Scalar> SliceGroup<T> {
    /// Indices may repeat (padded inference windows); the strict δ-spacing
    /// invariant belongs to [`select_slices`].
    pub fn from_volume(volume: &Volume, depth_indices: [usize; GROUP_SIZE]) -> Result<Self> {
        let dims = volume.dims();
        if let Some(d) = depth_indices.iter().find(|d| **d >= dims.depth) {
            return Err(Error::Invalid(format!(
                "slice {d} outside depth {}",
                dims.depth
            )));
        }
        let plane = dims.slice_len();
        let mut data = Vec::with_capacity(GROUP_SIZE * NUM_MODALITIES * plane);
        for &d in &depth_indices {
            for m in 0..NUM_MODALITIES {
                data.extend(volume.slice(m, d).iter().map(|v| T::lit(*v as f64)));
            }
        }
        let slices = Tensor::from_vec(
            &[GROUP_SIZE, NUM_MODALITIES, dims.height, dims.width],
            data,
        )?;
        Ok(Self {
            slices,
            depth_indices,
            voxel_id: volume.voxel_id().to_string(),
        })
    }

    pub fn height(&self) -> usize {
        self.slices.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.slices.shape()[3]
    }
}

/// Binary targets `(G, H, W)` for a group.
pub fn group_targets<T: Scalar>(mask: &SegMask, depth_indices: &[usize; GROUP_SIZE]) -> Vec<T> {
    depth_indices
        .iter()
        .flat_map(|&d| mask.slice(d).iter().map(|v| if *v >= 0.5 { T::one() } else { T::zero() }))
        .collect()
}

/// A binary slice mask, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Plane {
    pub fn from_mask_slice(mask: &SegMask, d: usize) -> Self {
        let dims = mask.dims();
        Self {
            height: dims.height,
            width: dims.width,
            data: mask.slice(d).iter().map(|v| (*v >= 0.5) as u8).collect(),
        }
    }

    /// Pixelwise union of several slices.
    pub fn union_of(mask: &SegMask, slices: &[usize]) -> Self {
        let mut plane = Self::from_mask_slice(mask, slices[0]);
        for &d in &slices[1..] {
            for (o, v) in plane.data.iter_mut().zip(mask.slice(d)) {
                *o |= (*v >= 0.5) as u8;
            }
        }
        plane
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    fn count_in(&self, b: &PromptBox) -> usize {
        (b.y0..b.y1)
            .map(|y| (b.x0..b.x1).filter(|&x| self.at(y, x)).count())
            .sum()
    }

    /// Tight half-open bounding box of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }
}

/// Axis-aligned half-open box on one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    pub slice_index: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Fraction of the slice's tumor pixels inside the box.
    pub achieved_coverage: f64,
}

impl PromptBox {
    /// Corners in any order; a zero-extent side is widened to one pixel.
    pub fn from_corners(slice_index: usize, xa: usize, ya: usize, xb: usize, yb: usize) -> Self {
        let (x0, x1) = (xa.min(xb), xa.max(xb));
        let (y0, y1) = (ya.min(yb), ya.max(yb));
        Self {
            slice_index,
            x0,
            y0,
            x1: x1.max(x0 + 1),
            y1: y1.max(y0 + 1),
            achieved_coverage: f64::NAN,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub slice_index: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Prompt {
    Box(PromptBox),
    Point(PromptPoint),
}

/// Box prompt covering a fraction `coverage` of the slice's tumor pixels,
/// within ±[`COVERAGE_BAND`].
pub fn make_box_prompt<R: Rng + ?Sized>(
    plane: &Plane,
    slice_index: usize,
    coverage: f64,
    rng: &mut R,
) -> Result<PromptBox> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Invalid(format!("coverage {coverage} outside (0, 1]")));
    }
    let (x0, y0, x1, y1) = plane.bounding_box().ok_or(Error::NoForeground)?;
    let total = plane.count() as f64;
    let tight = PromptBox {
        slice_index,
        x0,
        y0,
        x1,
        y1,
        achieved_coverage: 1.0,
    };
    if coverage == 1.0 {
        return Ok(tight);
    }
    let (lo, hi) = (coverage - COVERAGE_BAND, coverage + COVERAGE_BAND);
    let (w, h) = ((x1 - x0) as i64, (y1 - y0) as i64);
    for _ in 0..MAX_BOX_ATTEMPTS {
        let shrink = |rng: &mut R, extent: i64| rng.random_range(0..=extent / 2);
        let dx = rng.random_range(-(w / 4)..=w / 4);
        let dy = rng.random_range(-(h / 4)..=h / 4);
        let cx0 = x0 as i64 + shrink(rng, w) + dx;
        let cx1 = x1 as i64 - shrink(rng, w) + dx;
        let cy0 = y0 as i64 + shrink(rng, h) + dy;
        let cy1 = y1 as i64 - shrink(rng, h) + dy;
        let cx0 = cx0.clamp(0, plane.width as i64 - 1);
        let cy0 = cy0.clamp(0, plane.height as i64 - 1);
        let cx1 = cx1.clamp(cx0 + 1, plane.width as i64);
        let cy1 = cy1.clamp(cy0 + 1, plane.height as i64);
        let mut candidate = PromptBox {
            slice_index,
            x0: cx0 as usize,
            y0: cy0 as usize,
            x1: cx1 as usize,
            y1: cy1 as usize,
            achieved_coverage: 0.0,
        };
        let achieved = plane.count_in(&candidate) as f64 / total;
        if achieved >= lo && achieved <= hi {
            candidate.achieved_coverage = achieved;
            return Ok(candidate);
        }
    }
    Err(Error::CoverageNotReached {
        lo,
        hi,
        attempts: MAX_BOX_ATTEMPTS,
    })
}

/// Uniform draw over the tumor pixels of the slice.
pub fn make_point_prompt<R: Rng + ?Sized>(
    plane: &Plane,
    slice_index: usize,
    rng: &mut R,
) -> Result<PromptPoint> {
    let n = plane.count();
    if n == 0 {
        return Err(Error::NoForeground);
    }
    let k = rng.random_range(0..n);
    let flat = plane
        .data
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0)
        .nth(k)
        .map(|(i, _)| i)
        .expect("k < foreground count");
    Ok(PromptPoint {
        slice_index,
        x: flat % plane.width,
        y: flat / plane.width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Plane {
        let mut data = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    data[y * w + x] = 1;
                }
            }
        }
        Plane {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn formula_examples() {
        assert_eq!(slices_around(155, 1, 70).unwrap(), [69, 70, 71, 72]);
        assert_eq!(slices_around(155, 4, 50).unwrap(), [46, 50, 54, 58]);
    }

    #[test]
    fn shallow_volume_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = select_slices(30, 10, SliceMode::Fixed, &mut rng).unwrap_err();
        assert!(err.to_string().contains("too shallow for δ"), "{err}");
        assert!(select_slices(31, 10, SliceMode::Fixed, &mut rng).is_ok());
    }

    #[test]
    fn random_mode_distinct_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let idx = select_slices(10, 1, SliceMode::Random, &mut rng).unwrap();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx[3] < 10);
        }
    }

    #[test]
    fn full_coverage_is_tight_box() {
        let plane = disc(32, 32, 15.0, 12.0, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_box_prompt(&plane, 3, 1.0, &mut rng).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (7, 10, 18, 21));
        assert_eq!(b.achieved_coverage, 1.0);
    }

    #[test]
    fn single_pixel_tumor() {
        let mut plane = disc(8, 8, -10.0, -10.0, 1.0);
        plane.data[3 * 8 + 5] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_box_prompt(&plane, 0, 1.0, &mut rng).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (5, 3, 6, 4));
        let p = make_point_prompt(&plane, 0, &mut rng).unwrap();
        assert_eq!((p.x, p.y), (5, 3));
    }

    #[test]
    fn partial_coverage_lands_in_band() {
        let plane = disc(32, 32, 16.0, 16.0, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let b = make_box_prompt(&plane, 0, 0.75, &mut rng).unwrap();
            // Recount independently.
            let mut inside = 0;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    inside += plane.data[y * 32 + x] as usize;
                }
            }
            let cov = inside as f64 / plane.count() as f64;
            assert!((0.70..=0.80).contains(&cov), "{cov}");
            assert_eq!(cov, b.achieved_coverage);
        }
    }

    #[test]
    fn empty_slice_rejected() {
        let plane = Plane {
            height: 4,
            width: 4,
            data: vec![0; 16],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = make_box_prompt(&plane, 0, 1.0, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "no foreground for prompt");
        assert!(make_point_prompt(&plane, 0, &mut rng).is_err());
    }

    #[test]
    fn tiny_tumor_cannot_reach_band() {
        let mut plane = disc(8, 8, -10.0, -10.0, 1.0);
        plane.data[10] = 1;
        plane.data[11] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = make_box_prompt(&plane, 0, 0.75, &mut rng).unwrap_err();
        assert!(matches!(err, Error::CoverageNotReached { .. }));
    }

    #[test]
    fn point_prompt_is_seed_deterministic() {
        let plane = disc(16, 16, 8.0, 8.0, 4.0);
        let a = make_point_prompt(&plane, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_point_prompt(&plane, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn box_corners_canonicalized() {
        let b = PromptBox::from_corners(0, 9, 7, 2, 3);
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (2, 3, 9, 7));
        let d = PromptBox::from_corners(0, 4, 4, 4, 4);
        assert_eq!((d.x0, d.y0, d.x1, d.y1), (4, 4, 5, 5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn point_prompt_lands_on_tumor(bits in proptest::collection::vec(0u8..2, 1..=64), seed in any::<u64>()) {
            let width = 8;
            let height = bits.len().div_ceil(width);
            let mut data = bits.clone();
            data.resize(height * width, 0);
            let plane = Plane { height, width, data };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match make_point_prompt(&plane, 0, &mut rng) {
                Ok(p) => prop_assert!(plane.at(p.y, p.x)),
                Err(_) => prop_assert_eq!(plane.count(), 0),
            }
        }

        #[test]
        fn box_prompt_in_band_or_error(cy in 4.0f64..12.0, cx in 4.0f64..12.0, r in 1.0f64..6.0, p in 0.3f64..1.0, seed in any::<u64>()) {
            let plane = disc(16, 16, cy, cx, r);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(b) = make_box_prompt(&plane, 0, p, &mut rng) {
                prop_assert!(b.fits(16, 16));
                prop_assert!(b.achieved_coverage >= p - COVERAGE_BAND && b.achieved_coverage <= p + COVERAGE_BAND);
            }
        }

        #[test]
        fn fixed_mode_in_bounds_and_spaced(depth in 4usize..200, delta in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match select_slices(depth, delta, SliceMode::Fixed, &mut rng) {
                Ok(idx) => {
                    prop_assert!(idx[3] < depth);
                    for w in idx.windows(2) {
                        prop_assert_eq!(w[1] - w[0], delta);
                    }
                }
                Err(_) => prop_assert!(depth < 3 * delta + 1),
            }
        }
    }
}
