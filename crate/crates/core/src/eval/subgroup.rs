use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgroup {
    Head,
    Many,
    Medium,
    Few,
}

impl Subgroup {
    pub const ALL: [Subgroup; 4] = [Self::Head, Self::Many, Self::Medium, Self::Few];

    pub fn name(self) -> &'static str {
        match self {
            Self::Head => "head",
            Self::Many => "many",
            Self::Medium => "medium",
            Self::Few => "few",
        }
    }

    pub fn is_majority(self) -> bool {
        matches!(self, Self::Head | Self::Many)
    }
}

/// Train-count thresholds: head `> head`, many `(many, head]`, medium
/// `(medium, many]`, few `<= medium`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupSpec {
    pub head: u64,
    pub many: u64,
    pub medium: u64,
}

impl Default for SubgroupSpec {
    fn default() -> Self {
        Self::ic()
    }
}

impl SubgroupSpec {
    pub fn new(head: u64, many: u64, medium: u64) -> Result<Self> {
        if !(head > many && many > medium) {
            return Err(Error::invalid(format!(
                "subgroup thresholds must strictly decrease, got head={head}, many={many}, medium={medium}"
            )));
        }
        Ok(Self { head, many, medium })
    }

    /// Industrial protocol: `10^4 / 10^3 / 10^2`.
    pub fn ic() -> Self {
        Self { head: 10_000, many: 1_000, medium: 100 }
    }

    /// Long-tail benchmark protocol: many `> 100`, medium `20..=100`, few
    /// `< 20`, no head bin.
    pub fn imagenet() -> Self {
        Self { head: u64::MAX, many: 100, medium: 19 }
    }

    /// The `ic` protocol scaled to the `icdefect-mini` preset's train counts.
    pub fn mini() -> Self {
        Self { head: 300, many: 100, medium: 20 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ic" => Ok(Self::ic()),
            "imagenet" => Ok(Self::imagenet()),
            "mini" => Ok(Self::mini()),
            _ => Err(Error::invalid(format!(
                "unknown subgroup preset {name:?}; expected ic, imagenet or mini"
            ))),
        }
    }

    pub fn bin(&self, train_count: u64) -> Subgroup {
        if train_count > self.head {
            Subgroup::Head
        } else if train_count > self.many {
            Subgroup::Many
        } else if train_count > self.medium {
            Subgroup::Medium
        } else {
            Subgroup::Few
        }
    }
}

/// Parses `head=10000,many=1000,medium=100`, or a preset name.
impl FromStr for SubgroupSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if !s.contains('=') {
            return Self::preset(s.trim());
        }
        let (mut head, mut many, mut medium) = (None, None, None);
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got {part:?}")))?;
            let v: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("threshold {v:?} is not a nonnegative integer")))?;
            match k.trim() {
                "head" => head = Some(v),
                "many" => many = Some(v),
                "medium" => medium = Some(v),
                other => return Err(Error::invalid(format!("unknown subgroup key {other:?}"))),
            }
        }
        match (head, many, medium) {
            (Some(h), Some(m), Some(d)) => Self::new(h, m, d),
            _ => Err(Error::invalid("subgroup spec needs head, many and medium")),
        }
    }
}

impl fmt::Display for SubgroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "head={},many={},medium={}", self.head, self.many, self.medium)
    }
}

/// Correct and total test samples of one bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCount {
    pub correct: u64,
    pub total: u64,
}

impl BinCount {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, other: BinCount) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

/// Per-bin accuracies (`None` for bins without test samples) and the
/// overall micro accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAccuracy {
    pub head: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub average: f64,
    pub counts: [BinCount; 4],
    /// Bin of every class, by train count.
    pub class_bins: Vec<Subgroup>,
}

impl SubgroupAccuracy {
    pub fn get(&self, g: Subgroup) -> Option<f64> {
        match g {
            Subgroup::Head => self.head,
            Subgroup::Many => self.many,
            Subgroup::Medium => self.medium,
            Subgroup::Few => self.few,
        }
    }

    pub fn count(&self, g: Subgroup) -> BinCount {
        self.counts[g as usize]
    }
}

fn bin_counts(
    predictions: &[usize],
    labels: &[usize],
    train_counts: &[u64],
    spec: &SubgroupSpec,
) -> Result<([BinCount; 4], Vec<Subgroup>)> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no test samples"));
    }
    let bins: Vec<Subgroup> = train_counts.iter().map(|&n| spec.bin(n)).collect();
    let mut counts = [BinCount::default(); 4];
    for (&p, &y) in predictions.iter().zip(labels) {
        let g = *bins
            .get(y)
            .ok_or_else(|| Error::invalid(format!("class {y} has no train count")))?;
        let c = &mut counts[g as usize];
        c.total += 1;
        c.correct += u64::from(p == y);
    }
    Ok((counts, bins))
}

pub fn subgroup_accuracy(
    predictions: &[usize],
    labels: &[usize],
    train_counts: &[u64],
    spec: &SubgroupSpec,
) -> Result<SubgroupAccuracy> {
    let (counts, class_bins) = bin_counts(predictions, labels, train_counts, spec)?;
    let mut all = BinCount::default();
    counts.iter().for_each(|c| all.add(*c));
    Ok(SubgroupAccuracy {
        head: counts[0].accuracy(),
        many: counts[1].accuracy(),
        medium: counts[2].accuracy(),
        few: counts[3].accuracy(),
        average: all.accuracy().expect("nonempty"),
        counts,
        class_bins,
    })
}

/// Accuracy over head+many and over medium+few test samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorityMinority {
    pub majority: Option<f64>,
    pub minority: Option<f64>,
    pub majority_count: BinCount,
    pub minority_count: BinCount,
}

pub fn majority_minority(
    predictions: &[usize],
    labels: &[usize],
    train_counts: &[u64],
    spec: &SubgroupSpec,
) -> Result<MajorityMinority> {
    let (counts, _) = bin_counts(predictions, labels, train_counts, spec)?;
    let (mut maj, mut min) = (BinCount::default(), BinCount::default());
    for g in Subgroup::ALL {
        if g.is_majority() {
            maj.add(counts[g as usize]);
        } else {
            min.add(counts[g as usize]);
        }
    }
    Ok(MajorityMinority {
        majority: maj.accuracy(),
        minority: min.accuracy(),
        majority_count: maj,
        minority_count: min,
    })
}
