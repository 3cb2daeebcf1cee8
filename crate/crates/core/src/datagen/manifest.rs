use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassCountTable;

use super::render::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// First line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub spec_hash: String,
    pub seed: u64,
    pub num_classes: usize,
    pub num_product_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub class_id: usize,
    pub product_line_id: usize,
    pub split: Split,
}

/// Header plus records; `root` is the directory record paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(header: ManifestHeader, records: Vec<ManifestRecord>, root: PathBuf) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.class_id >= header.num_classes || r.product_line_id >= header.num_product_lines {
                return Err(Error::invalid(format!(
                    "record {} has class {} / line {} outside the header's {} x {}",
                    r.path, r.class_id, r.product_line_id, header.num_classes, header.num_product_lines
                )));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest path {}", r.path)));
            }
        }
        Ok(Self { header, records, root })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Per-class counts of one split (zeros allowed).
    pub fn counts(&self, split: Split) -> Vec<u64> {
        let mut c = vec![0u64; self.header.num_classes];
        for r in self.split(split) {
            c[r.class_id] += 1;
        }
        c
    }

    /// Train-split class counts; fails if any class has no train sample.
    pub fn train_class_counts(&self) -> Result<ClassCountTable> {
        ClassCountTable::new(self.counts(Split::Train))
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &manifest.header)?;
    w.write_all(b"\n")?;
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bad = |line: usize, m: String| Error::Format {
        what: "manifest",
        path: path.to_path_buf(),
        message: format!("line {line}: {m}"),
    };
    let file = fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str::<ManifestHeader>(&line).map_err(|e| bad(i + 1, e.to_string()))?);
        } else {
            records.push(serde_json::from_str::<ManifestRecord>(&line).map_err(|e| bad(i + 1, e.to_string()))?);
        }
    }
    let header = header.ok_or_else(|| bad(1, "missing header".into()))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(header, records, root).map_err(|e| bad(0, e.to_string()))
}

/// Class and (class, line) counts of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub class_counts: Vec<u64>,
    pub train_counts: Vec<u64>,
    pub test_counts: Vec<u64>,
    /// Max over min class count, over classes with at least one sample.
    pub imbalance_ratio: f64,
    /// `per_line[class][line]`.
    pub per_line: Vec<Vec<u64>>,
}

pub fn distribution_stats(manifest: &DatasetManifest) -> Result<DistributionStats> {
    if manifest.records.is_empty() {
        return Err(Error::invalid("empty manifest"));
    }
    let (c, p) = (manifest.header.num_classes, manifest.header.num_product_lines);
    let mut per_line = vec![vec![0u64; p]; c];
    for r in &manifest.records {
        per_line[r.class_id][r.product_line_id] += 1;
    }
    let class_counts: Vec<u64> = per_line.iter().map(|r| r.iter().sum()).collect();
    let present = class_counts.iter().copied().filter(|&n| n > 0);
    let max = present.clone().max().expect("nonempty");
    let min = present.min().expect("nonempty");
    Ok(DistributionStats {
        train_counts: manifest.counts(Split::Train),
        test_counts: manifest.counts(Split::Test),
        imbalance_ratio: max as f64 / min as f64,
        class_counts,
        per_line,
    })
}

/// Decoded images of one split, in manifest order.
#[derive(Debug, Clone)]
pub struct SplitData {
    /// `(N, S, S, 1)`, pixel `v` mapped to `v / 127.5 - 1`.
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub product_lines: Vec<usize>,
    pub paths: Vec<String>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<SplitData> {
    let recs: Vec<&ManifestRecord> = manifest.split(split).collect();
    let mut size = None;
    let mut data = Vec::new();
    for r in &recs {
        let path = manifest.resolve(r);
        let img = GrayImage::from_png(&fs::read(&path)?).map_err(|e| Error::Format {
            what: "image",
            path: path.clone(),
            message: e.to_string(),
        })?;
        match size {
            None => size = Some(img.size),
            Some(s) if s != img.size => {
                return Err(Error::Format {
                    what: "image",
                    path,
                    message: format!("size {} differs from {s}", img.size),
                })
            }
            _ => {}
        }
        data.extend(img.pixels.iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    let s = size.unwrap_or(0);
    Ok(SplitData {
        images: Array4::from_shape_vec((recs.len(), s, s, 1), data).expect("sizes checked"),
        labels: recs.iter().map(|r| r.class_id).collect(),
        product_lines: recs.iter().map(|r| r.product_line_id).collect(),
        paths: recs.iter().map(|r| r.path.clone()).collect(),
    })
}
