//! Phantom datasets on disk and in memory.
//!
//! A dataset directory holds one GBTV volume/mask pair per case and a
//! `manifest.json` listing them.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{generate_phantom, load_mask, load_volume, save_mask, save_volume, DomainTag, PhantomSpec, SegMask, Volume};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFiles {
    /// Stem of the volume pair, relative to the dataset directory.
    pub volume: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub voxel_id: String,
    pub domain: DomainTag,
    pub files: ManifestFiles,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// `count` phantoms from one spec with seeds `spec.seed, spec.seed + 1, …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomGroup {
    pub spec: PhantomSpec,
    pub count: usize,
}

impl PhantomGroup {
    pub fn specs(&self) -> impl Iterator<Item = PhantomSpec> + '_ {
        (0..self.count as u64).map(|i| PhantomSpec {
            seed: self.spec.seed + i,
            ..self.spec.clone()
        })
    }
}

pub fn expand_groups(groups: &[PhantomGroup]) -> Vec<PhantomSpec> {
    groups.iter().flat_map(PhantomGroup::specs).collect()
}

/// A case: raw or normalized volume, its mask and domain.
#[derive(Clone, Debug)]
pub struct Case {
    pub volume: Volume,
    pub mask: SegMask,
    pub domain: DomainTag,
}

/// Generates phantoms in memory.
pub fn generate_cases(specs: &[PhantomSpec]) -> Result<Vec<Case>> {
    specs
        .iter()
        .map(|s| {
            let (volume, mask) = generate_phantom(s)?;
            Ok(Case {
                volume,
                mask,
                domain: s.domain,
            })
        })
        .collect()
}

/// Writes each phantom as a volume/mask pair plus the manifest.
pub fn write_phantoms(specs: &[PhantomSpec], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for spec in specs {
        let (volume, mask) = generate_phantom(spec)?;
        let id = volume.voxel_id().to_string();
        if manifest.entries.iter().any(|e| e.voxel_id == id) {
            return Err(Error::Config(format!("duplicate voxel id {id}")));
        }
        let files = ManifestFiles {
            volume: id.clone(),
            mask: format!("{id}_mask"),
        };
        save_volume(&volume, dir.join(&files.volume))?;
        save_mask(&mask, &id, dir.join(&files.mask))?;
        manifest.entries.push(ManifestEntry {
            voxel_id: id,
            domain: spec.domain,
            files,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Loads every case of a dataset directory (raw intensities).
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let volume = load_volume(dir.join(&e.files.volume))?;
            let (mask, _) = load_mask(dir.join(&e.files.mask))?;
            if mask.dims() != volume.dims() {
                return Err(Error::Shape(format!(
                    "{}: mask {:?} vs volume {:?}",
                    e.voxel_id,
                    mask.dims(),
                    volume.dims()
                )));
            }
            Ok(Case {
                volume,
                mask,
                domain: e.domain,
            })
        })
        .collect()
}

/// Deterministic per-domain split; returns (train, holdout) indices.
/// Each domain with at least two cases keeps at least one on each side.
pub fn split_holdout(domains: &[DomainTag], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for tag in DomainTag::ALL {
        let mut idx: Vec<usize> = (0..domains.len()).filter(|i| domains[*i] == tag).collect();
        idx.shuffle(&mut rng);
        let mut k = (fraction * idx.len() as f64).round() as usize;
        if fraction > 0.0 && idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        hold.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    Ok((train, hold))
}
