//! Pixel-level scoring of probability maps against binary ground truth.
//!
//! F1 and MCC are evaluated at the threshold that maximises them for each
//! image (or, in [`ThresholdMode::Global`], one threshold for the pooled
//! dataset). ROC-AUC is threshold-free. Images whose mask has a single class
//! cannot be scored and are skipped rather than counted as zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::load_image;
use crate::error::{Error, Result};
use crate::localizer::read_raw_map;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        check_len(pred.len(), gt.len())?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`, 0 for an empty denominator.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (
            self.tp as f64,
            self.fp as f64,
            self.tn as f64,
            self.fn_ as f64,
        );
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }

    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::F1 => self.f1(),
            Metric::Mcc => self.mcc(),
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "prediction has {a} pixels, ground truth {b}"
        )));
    }
    if a == 0 {
        return Err(Error::Input("empty mask".into()));
    }
    Ok(())
}

fn check_two_classes(gt: &[bool]) -> Result<(u64, u64)> {
    let pos = gt.iter().filter(|&&g| g).count() as u64;
    let neg = gt.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("ground truth has a single class".into()));
    }
    Ok((pos, neg))
}

pub fn f1_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.f1())
}

pub fn mcc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.mcc())
}

/// Score values in ascending order with positive and negative counts per
/// distinct value.
fn grouped(scores: &[f64], gt: &[bool]) -> Result<Vec<(f64, u64, u64)>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN in probability map".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let (p, n) = if gt[i] { (1, 0) } else { (0, 1) };
        match out.last_mut() {
            Some(last) if last.0 == scores[i] => {
                last.1 += p;
                last.2 += n;
            }
            _ => out.push((scores[i], p, n)),
        }
    }
    Ok(out)
}

/// Mann-Whitney AUC: the fraction of positive/negative pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], gt: &[bool]) -> Result<f64> {
    check_len(scores.len(), gt.len())?;
    let (pos, neg) = check_two_classes(gt)?;
    let mut below: u128 = 0;
    // Twice the number of correctly ordered pairs, to keep half-ties integral.
    let mut twice: u128 = 0;
    for (_, p, n) in grouped(scores, gt)? {
        twice += 2 * p as u128 * below + p as u128 * n as u128;
        below += n as u128;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    F1,
    Mcc,
}

/// Thresholds tried by the optimal search: 0, midpoints between consecutive
/// distinct scores, and 1, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut t = vec![0.0];
    t.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    t.push(1.0);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Best metric value over [`candidate_thresholds`] with prediction
/// `score >= t`, and the lowest threshold attaining it.
pub fn optimal_threshold_score(scores: &[f64], gt: &[bool], metric: Metric) -> Result<(f64, f64)> {
    check_len(scores.len(), gt.len())?;
    let (pos, neg) = check_two_classes(gt)?;
    let groups = grouped(scores, gt)?;
    // Suffix sums: positives and negatives with value >= groups[i].0.
    let mut suffix = vec![(0u64, 0u64); groups.len() + 1];
    for i in (0..groups.len()).rev() {
        suffix[i] = (suffix[i + 1].0 + groups[i].1, suffix[i + 1].1 + groups[i].2);
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in candidate_thresholds(scores) {
        let first = groups.partition_point(|g| g.0 < t);
        let (tp, fp) = suffix[first];
        let c = ConfusionCounts {
            tp,
            fp,
            tn: neg - fp,
            fn_: pos - tp,
        };
        let s = c.score(metric);
        if s > best.0 {
            best = (s, t);
        }
    }
    Ok(best)
}

pub fn confusion_at(scores: &[f64], gt: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    ConfusionCounts::from_masks(&pred, gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    PerImage,
    Global,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" | "per_image" | "perimage" => Ok(ThresholdMode::PerImage),
            "global" => Ok(ThresholdMode::Global),
            _ => Err(Error::Parameter(format!("unknown threshold mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image: String,
    pub f1: f64,
    pub mcc: f64,
    pub auc: f64,
    pub f1_threshold: f64,
    pub mcc_threshold: f64,
}

impl ScoreRecord {
    /// Scores one image with its own optimal thresholds.
    pub fn compute(image: &str, scores: &[f64], gt: &[bool]) -> Result<Self> {
        let (f1, f1_threshold) = optimal_threshold_score(scores, gt, Metric::F1)?;
        let (mcc, mcc_threshold) = optimal_threshold_score(scores, gt, Metric::Mcc)?;
        Ok(ScoreRecord {
            image: image.to_string(),
            f1,
            mcc,
            auc: roc_auc(scores, gt)?,
            f1_threshold,
            mcc_threshold,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub f1: f64,
    pub mcc: f64,
    pub auc: f64,
    pub scored: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub image: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: ThresholdMode,
    pub images: Vec<ScoreRecord>,
    pub skipped: Vec<Skipped>,
    /// Map or mask files without a counterpart, as `maps/<file>` or
    /// `masks/<file>`.
    pub unmatched: Vec<String>,
    pub summary: Summary,
}

/// Probabilities and binary ground truth for one image.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub id: String,
    pub scores: Vec<f64>,
    pub gt: Vec<bool>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores a set of images. Single-class masks are skipped with a warning.
pub fn evaluate_images(items: &[ScoredImage], mode: ThresholdMode) -> Result<Evaluation> {
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for it in items {
        check_len(it.scores.len(), it.gt.len())?;
        match check_two_classes(&it.gt) {
            Ok(_) => usable.push(it),
            Err(e) => {
                log::warn!("skipping {}: {e}", it.id);
                skipped.push(Skipped {
                    image: it.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let records: Vec<ScoreRecord> = match mode {
        ThresholdMode::PerImage => usable
            .par_iter()
            .map(|it| ScoreRecord::compute(&it.id, &it.scores, &it.gt))
            .collect::<Result<_>>()?,
        ThresholdMode::Global => {
            let scores: Vec<f64> = usable
                .iter()
                .flat_map(|it| it.scores.iter().copied())
                .collect();
            let gt: Vec<bool> = usable.iter().flat_map(|it| it.gt.iter().copied()).collect();
            let (tf, tm) = if usable.is_empty() {
                (0.5, 0.5)
            } else {
                (
                    optimal_threshold_score(&scores, &gt, Metric::F1)?.1,
                    optimal_threshold_score(&scores, &gt, Metric::Mcc)?.1,
                )
            };
            usable
                .par_iter()
                .map(|it| {
                    Ok(ScoreRecord {
                        image: it.id.clone(),
                        f1: confusion_at(&it.scores, &it.gt, tf)?.f1(),
                        mcc: confusion_at(&it.scores, &it.gt, tm)?.mcc(),
                        auc: roc_auc(&it.scores, &it.gt)?,
                        f1_threshold: tf,
                        mcc_threshold: tm,
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let summary = Summary {
        f1: mean(records.iter().map(|r| r.f1)),
        mcc: mean(records.iter().map(|r| r.mcc)),
        auc: mean(records.iter().map(|r| r.auc)),
        scored: records.len(),
        skipped: skipped.len(),
    };
    Ok(Evaluation {
        mode,
        images: records,
        skipped,
        unmatched: Vec::new(),
        summary,
    })
}

/// Reads a probability map: SRMAP1 raw files, otherwise an image scaled
/// to `[0, 1]` (channel mean for colour images).
pub fn load_map(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let is_raw = fs::read(path)
        .map(|b| b.starts_with(crate::localizer::RAW_MAGIC))
        .map_err(|e| Error::io(path, e))?;
    if is_raw {
        let (w, h, v) = read_raw_map(path)?;
        return Ok((w, h, v.into_iter().map(f64::from).collect()));
    }
    let img = load_image(path)?;
    let c = img.channels();
    let v = img
        .data()
        .chunks(c)
        .map(|px| px.iter().map(|&x| x as f64).sum::<f64>() / c as f64)
        .collect();
    Ok((img.width(), img.height(), v))
}

/// Loads a ground-truth mask and binarises it at 0.5.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, v) = load_map(path)?;
    Ok((w, h, v.into_iter().map(|x| x >= 0.5).collect()))
}

fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            // A raw map wins over a PNG of the same image.
            let raw = path.extension().is_some_and(|e| e == "srmap");
            if raw || !out.contains_key(stem) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs maps and masks by file stem and scores every pair.
pub fn evaluate_dataset(
    maps_dir: &Path,
    masks_dir: &Path,
    mode: ThresholdMode,
) -> Result<Evaluation> {
    let maps = files_by_stem(maps_dir)?;
    let masks = files_by_stem(masks_dir)?;
    let mut unmatched = Vec::new();
    let name = |p: &Path| {
        p.file_name()
            .map_or(String::new(), |n| n.to_string_lossy().into_owned())
    };
    for (stem, p) in &maps {
        if !masks.contains_key(stem) {
            log::warn!("no mask for map {}", p.display());
            unmatched.push(format!("maps/{}", name(p)));
        }
    }
    for (stem, p) in &masks {
        if !maps.contains_key(stem) {
            log::warn!("no map for mask {}", p.display());
            unmatched.push(format!("masks/{}", name(p)));
        }
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = maps
        .iter()
        .filter_map(|(s, m)| masks.get(s).map(|g| (s, m, g)))
        .collect();
    let loaded: Vec<Result<ScoredImage>> = pairs
        .par_iter()
        .map(|(stem, map, mask)| {
            let (w, h, scores) = load_map(map)?;
            let (mw, mh, gt) = load_mask(mask)?;
            if (w, h) != (mw, mh) {
                return Err(Error::Dimension(format!(
                    "map is {w}x{h}, mask is {mw}x{mh}"
                )));
            }
            Ok(ScoredImage {
                id: stem.to_string(),
                scores,
                gt,
            })
        })
        .collect();
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for ((stem, _, _), r) in pairs.iter().zip(loaded) {
        match r {
            Ok(it) => items.push(it),
            Err(e @ (Error::Io { .. } | Error::Numeric(_))) => return Err(e),
            Err(e) => {
                log::warn!("skipping {stem}: {e}");
                bad.push(Skipped {
                    image: stem.to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut eval = evaluate_images(&items, mode)?;
    eval.skipped.extend(bad);
    eval.skipped.sort_by(|a, b| a.image.cmp(&b.image));
    eval.summary.skipped = eval.skipped.len();
    eval.unmatched = unmatched;
    Ok(eval)
}

/// Plain-text table, one row per step, columns `Step | F1 | MCC | ROC-AUC`.
pub fn format_table(rows: &[(Option<usize>, &Summary)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} | {:>6} | {:>6} | {:>7}",
        "Step", "F1", "MCC", "ROC-AUC"
    );
    let _ = writeln!(s, "{:-<6}-+-{:-<6}-+-{:-<6}-+-{:-<7}", "", "", "", "");
    for (step, sum) in rows {
        let step = step.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{:>6} | {:>6.4} | {:>6.4} | {:>7.4}",
            step, sum.f1, sum.mcc, sum.auc
        );
    }
    s
}
