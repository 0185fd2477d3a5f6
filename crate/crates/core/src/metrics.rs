//! Volume-level overlap metrics, left/right split scores and cohort
//! summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{binarize, predict_ensemble, ActivationSource, SegmentOptions};
use crate::losses::dice_coefficient;
use crate::network::NetworkEnsemble;
use crate::postprocess::clean_mask;
use crate::sampling::Subject;
use crate::volumes::{LabelMask, Orientation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub cohort: String,
    pub dice_both: f64,
    pub dice_left: f64,
    pub dice_right: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn as_f64(mask: &LabelMask) -> Array3<f64> {
    mask.data().mapv(f64::from)
}

/// Ratio with the agreement convention: `0/0` is 1 when the other side of
/// the confusion matrix is also empty, otherwise 0.
fn ratio(num: u64, den: u64, agree_if_empty: bool) -> f64 {
    if den == 0 {
        if agree_if_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Scores `pred` against `truth`. Left and right are the halves of the
/// grid split at `floor(extent / 2)` along `midline_axis`; the middle
/// plane of an odd extent belongs to the right half.
pub fn evaluate_volume(
    id: &str,
    cohort: &str,
    pred: &LabelMask,
    truth: &LabelMask,
    midline_axis: usize,
) -> Result<EvalRecord> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(&truth.shape(), &pred.shape()));
    }
    if midline_axis > 2 {
        return Err(Error::InvalidArgument(format!("midline axis {midline_axis} out of range")));
    }
    let p = as_f64(pred);
    let g = as_f64(truth);
    let dice_both = dice_coefficient(p.view(), g.view())?;
    let split = p.len_of(Axis(midline_axis)) / 2;
    let half = |lo: usize, hi: usize| -> Result<f64> {
        let pv = p.slice_axis(Axis(midline_axis), (lo..hi).into());
        let gv = g.slice_axis(Axis(midline_axis), (lo..hi).into());
        dice_coefficient(pv, gv)
    };
    let extent = p.len_of(Axis(midline_axis));
    let dice_left = half(0, split)?;
    let dice_right = half(split, extent)?;

    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(truth.data().iter()) {
        match (a != 0, b != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(EvalRecord {
        id: id.to_string(),
        cohort: cohort.to_string(),
        dice_both,
        dice_left,
        dice_right,
        precision: ratio(tp, tp + fp, fn_ == 0),
        recall: ratio(tp, tp + fn_, fp == 0),
        tp,
        fp,
        fn_,
        tn,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample (n − 1) standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Result<Stat> {
        if values.is_empty() {
            return Err(Error::EmptySubset("statistics input"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Stat { mean, std })
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub group: String,
    pub n: usize,
    pub dice_both: Stat,
    pub dice_left: Stat,
    pub dice_right: Stat,
    pub precision: Stat,
    pub recall: Stat,
}

impl Summary {
    pub fn of(group: &str, records: &[&EvalRecord]) -> Result<Summary> {
        let col = |f: fn(&EvalRecord) -> f64| Stat::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
        Ok(Summary {
            group: group.to_string(),
            n: records.len(),
            dice_both: col(|r| r.dice_both)?,
            dice_left: col(|r| r.dice_left)?,
            dice_right: col(|r| r.dice_right)?,
            precision: col(|r| r.precision)?,
            recall: col(|r| r.recall)?,
        })
    }
}

/// One summary per cohort, in cohort name order.
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<Summary>> {
    if records.is_empty() {
        return Err(Error::EmptySubset("evaluation records"));
    }
    let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.cohort.as_str()).or_default().push(r);
    }
    groups.into_iter().map(|(g, rs)| Summary::of(g, &rs)).collect()
}

/// Pipe table with the columns Both, Left, Right, Precision, Recall.
pub fn format_summaries(summaries: &[Summary]) -> String {
    let mut out = String::from("| Cohort | n | Both (Dice) | Left (Dice) | Right (Dice) | Precision | Recall |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for s in summaries {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            s.group, s.n, s.dice_both, s.dice_left, s.dice_right, s.precision, s.recall
        ));
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

/// One row of a trained-on / tested-on matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainRow {
    pub trained_on: String,
    pub tested_on: String,
    pub summary: Summary,
}

pub fn format_cross_domain(rows: &[CrossDomainRow]) -> String {
    let mut out = String::from("| Trained on | Tested on | n | Both (Dice) | Left (Dice) | Right (Dice) | Precision | Recall |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let s = &r.summary;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.trained_on, r.tested_on, s.n, s.dice_both, s.dice_left, s.dice_right, s.precision, s.recall
        ));
    }
    out
}

/// Dice of one volume under one arm (a single network or the consensus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub volume: String,
    pub arm: ActivationSource,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub scores: Vec<ArmScore>,
    /// Sagittal, coronal, axial, consensus.
    pub arms: Vec<(ActivationSource, Stat)>,
}

pub const ARMS: [ActivationSource; 4] =
    [ActivationSource::Sagittal, ActivationSource::Coronal, ActivationSource::Axial, ActivationSource::Consensus];

impl ConsensusReport {
    pub fn arm(&self, arm: ActivationSource) -> Stat {
        self.arms.iter().find(|(a, _)| *a == arm).map(|(_, s)| *s).expect("every arm is summarized")
    }

    pub fn single_arm_mean(&self) -> f64 {
        Orientation::ALL.iter().map(|&o| self.arm(o.into()).mean).sum::<f64>() / 3.0
    }

    /// Long format: one row per (volume, arm).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for s in &self.scores {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn format(&self) -> String {
        let mut out = String::from("| Sagittal | Coronal | Axial | Consensus |\n|---|---|---|---|\n|");
        for arm in ARMS {
            out.push_str(&format!(" {} |", self.arm(arm)));
        }
        out.push('\n');
        out
    }
}

/// Dice of each single network (thresholded and post-processed alone) and
/// of the consensus, for every test subject.
pub fn consensus_vs_single_report(
    ensemble: &NetworkEnsemble,
    subjects: &[Subject],
    options: &SegmentOptions,
) -> Result<ConsensusReport> {
    if subjects.is_empty() {
        return Err(Error::EmptySubset("consensus report subjects"));
    }
    let mut scores = Vec::with_capacity(subjects.len() * 4);
    for s in subjects {
        let acts = predict_ensemble(ensemble, &s.volume, options.edge, options.workers)?;
        let consensus = crate::fusion::consensus(&acts[0], &acts[1], &acts[2])?;
        let truth = as_f64(&s.mask);
        for act in acts.iter().chain(std::iter::once(&consensus)) {
            let mask = clean_mask(&binarize(act, options.threshold)?, options.keep, options.connectivity);
            let dice = dice_coefficient(as_f64(&mask).view(), truth.view())?;
            scores.push(ArmScore { volume: s.id.clone(), arm: act.source, dice });
        }
    }
    let arms = ARMS
        .iter()
        .map(|&arm| {
            let values: Vec<f64> = scores.iter().filter(|s| s.arm == arm).map(|s| s.dice).collect();
            Ok((arm, Stat::of(&values)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusReport { scores, arms })
}

/// Scores a full-pipeline segmentation of every subject.
pub fn evaluate_subjects(
    ensemble: &NetworkEnsemble,
    subjects: &[Subject],
    options: &SegmentOptions,
) -> Result<Vec<EvalRecord>> {
    if subjects.is_empty() {
        return Err(Error::EmptySubset("evaluation subjects"));
    }
    subjects
        .iter()
        .map(|s| {
            let seg = crate::fusion::segment(ensemble, &s.volume, options)?;
            let cohort = s.cohort.map(|c| c.name().to_string()).unwrap_or_else(|| "unknown".into());
            evaluate_volume(&s.id, &cohort, &seg.mask, &s.mask, Orientation::Sagittal.axis())
        })
        .collect()
}

/// Splits a mask into its left and right halves along `axis`, for callers
/// that need them as separate volumes.
pub fn split_halves(mask: &LabelMask, axis: usize) -> (LabelMask, LabelMask) {
    let extent = mask.shape()[axis];
    let split = extent / 2;
    let mut left = mask.data().clone();
    let mut right = mask.data().clone();
    left.slice_axis_mut(Axis(axis), (split..extent).into()).fill(0);
    right.slice_axis_mut(Axis(axis), (0..split).into()).fill(0);
    (LabelMask::from_nonzero(&left), LabelMask::from_nonzero(&right))
}
