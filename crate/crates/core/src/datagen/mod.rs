//! Synthetic defect images: product-line gratings crossed with per-class
//! defect overlays, split into train/test and described by a JSONL manifest.

mod manifest;
mod render;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use manifest::{
    distribution_stats, load_split, read_manifest, write_manifest, DatasetManifest, DistributionStats, ManifestHeader,
    ManifestRecord, Split, SplitData,
};
pub use render::{class_primitive, line_grating, render_sample, GrayImage, Primitive};

/// Head and rarest-tail class sizes of the full industrial dataset whose
/// shape the presets follow.
pub const REFERENCE_HEAD_COUNT: u64 = 50_127;
pub const REFERENCE_TAIL_COUNT: u64 = 7;

/// Fraction of each (class, line) cell assigned to the train split.
pub const TRAIN_FRACTION: f64 = 0.6;

/// What to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_product_lines: usize,
    /// `counts[class][line]`.
    pub counts: Vec<Vec<u64>>,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Eight classes over three product lines, 1000 normal images down to 7
    /// in the rarest defect class.
    pub fn icdefect_mini(seed: u64) -> Self {
        Self {
            num_classes: 8,
            num_product_lines: 3,
            counts: vec![
                vec![400, 350, 250],
                vec![150, 100, 50],
                vec![60, 60, 30],
                vec![40, 25, 15],
                vec![20, 12, 8],
                vec![10, 6, 4],
                vec![6, 4, 2],
                vec![4, 2, 1],
            ],
            image_size: 64,
            noise: 0.05,
            seed,
        }
    }

    /// A few dozen images for smoke tests.
    pub fn toy(seed: u64) -> Self {
        Self {
            num_classes: 3,
            num_product_lines: 2,
            counts: vec![vec![8, 6], vec![4, 3], vec![2, 2]],
            image_size: 64,
            noise: 0.05,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "icdefect-mini" => Ok(Self::icdefect_mini(seed)),
            "toy" => Ok(Self::toy(seed)),
            _ => Err(Error::invalid(format!(
                "unknown preset {name:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub const PRESETS: [&'static str; 2] = ["icdefect-mini", "toy"];

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_product_lines < 1 {
            return Err(Error::invalid("need at least two classes and one product line"));
        }
        if self.counts.len() != self.num_classes || self.counts.iter().any(|r| r.len() != self.num_product_lines) {
            return Err(Error::invalid(format!(
                "count matrix must be {} x {}",
                self.num_classes, self.num_product_lines
            )));
        }
        if let Some(c) = self.counts.iter().position(|r| r.iter().sum::<u64>() == 0) {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        if self.image_size < 4 {
            return Err(Error::invalid("image size must be at least 4"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        Ok(())
    }

    pub fn class_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 finalizer; derives independent per-record seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn record_seed(seed: u64, class_id: usize, line_id: usize, index: usize) -> u64 {
    mix(mix(mix(seed ^ class_id as u64) ^ line_id as u64) ^ index as u64)
}

/// Train/test assignment of every (class, line, index) sample.
///
/// Each cell sends `floor(0.6 n)` samples, chosen by a seeded shuffle, to
/// train. A class whose cells all round down to zero gets one sample moved
/// from its first nonempty cell.
pub fn assign_splits(spec: &DatasetSpec) -> Vec<Vec<Vec<Split>>> {
    let mut out = Vec::with_capacity(spec.num_classes);
    for (c, row) in spec.counts.iter().enumerate() {
        let mut cls = Vec::with_capacity(row.len());
        for (p, &n) in row.iter().enumerate() {
            let n = n as usize;
            let n_train = (n as f64 * TRAIN_FRACTION + 1e-9).floor() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(record_seed(spec.seed, c, p, usize::MAX)));
            let mut splits = vec![Split::Test; n];
            for &i in &order[..n_train] {
                splits[i] = Split::Train;
            }
            cls.push((splits, order));
        }
        let has_train = cls.iter().any(|(s, _)| s.contains(&Split::Train));
        if !has_train {
            if let Some((s, order)) = cls.iter_mut().find(|(s, _)| !s.is_empty()) {
                s[order[0]] = Split::Train;
            }
        }
        out.push(cls.into_iter().map(|(s, _)| s).collect());
    }
    out
}

/// Renders every sample of `spec` into `out_dir/images/`, writes
/// `manifest.jsonl` and `stats.json`, and returns both.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<(DatasetManifest, DistributionStats)> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let splits = assign_splits(spec);
    let mut records = Vec::new();
    for (c, row) in spec.counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for (i, &split) in splits[c][p].iter().enumerate().take(n as usize) {
                let img = render_sample(
                    p,
                    c,
                    spec.num_product_lines,
                    spec.num_classes,
                    record_seed(spec.seed, c, p, i),
                    spec.image_size,
                    spec.noise,
                )?;
                let rel = format!("images/c{c:02}_l{p:02}_{i:05}.png");
                fs::write(out_dir.join(&rel), img.to_png()?)?;
                records.push(ManifestRecord {
                    path: rel,
                    class_id: c,
                    product_line_id: p,
                    split,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(
        ManifestHeader {
            spec_hash: spec.hash(),
            seed: spec.seed,
            num_classes: spec.num_classes,
            num_product_lines: spec.num_product_lines,
        },
        records,
        out_dir.to_path_buf(),
    )?;
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    let stats = distribution_stats(&manifest)?;
    fs::write(out_dir.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok((manifest, stats))
}
