//! Edge-detection metrics: tolerance-matched precision and recall, ODS,
//! OIS, mean precision and mean IOU, under the Thin and Raw settings.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "binary map size");
        Self { height, width, bits }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.bits[y as usize * self.width + x as usize]
    }

    fn positives(&self) -> Vec<(usize, usize)> {
        (0..self.bits.len())
            .filter(|&i| self.bits[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

fn single_channel(m: &Tensor) -> Result<(usize, usize)> {
    let (h, w, c) = m.hwc()?;
    if c != 1 {
        return Err(Error::Geometry(format!("expected a 1-channel map, got {c} channels")));
    }
    Ok((h, w))
}

/// Positive iff `ŷ ≥ t`.
pub fn binarize(y_hat: &Tensor, t: f64) -> Result<BinaryMap> {
    let (h, w) = single_channel(y_hat)?;
    Ok(BinaryMap::new(h, w, y_hat.data().iter().map(|&v| v >= t).collect()))
}

/// Zhang-Suen thinning to a one-pixel-wide skeleton.
pub fn thin(b: &BinaryMap) -> BinaryMap {
    let mut cur = b.clone();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..cur.height as isize {
                for x in 0..cur.width as isize {
                    if !cur.at(y, x) {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let n = [
                        cur.at(y - 1, x),
                        cur.at(y - 1, x + 1),
                        cur.at(y, x + 1),
                        cur.at(y + 1, x + 1),
                        cur.at(y + 1, x),
                        cur.at(y + 1, x - 1),
                        cur.at(y, x - 1),
                        cur.at(y - 1, x - 1),
                    ];
                    let neighbours = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&neighbours) {
                        continue;
                    }
                    let transitions = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if transitions != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push(y as usize * cur.width + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                cur.bits[i] = false;
            }
        }
        if !changed {
            return cur;
        }
    }
}

/// Counts from matching one binary prediction against one ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::Add for MatchResult {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f(&self) -> f64 {
        f_measure(self.tp, self.fp, self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall; every `0/0` is `0`.
pub fn f_measure(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Largest matching distance in pixels for a diagonal-fraction tolerance.
pub fn max_distance(h: usize, w: usize, tol: f64) -> f64 {
    tol * ((h * h + w * w) as f64).sqrt()
}

/// One-to-one greedy matching in increasing distance (ties broken by
/// prediction then ground-truth raster order), up to `tol·diagonal`.
pub fn match_edges(pred: &BinaryMap, gt: &BinaryMap, tol: f64) -> Result<MatchResult> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "match_edges",
            &[gt.height, gt.width],
            &[pred.height, pred.width],
        ));
    }
    if tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let d = max_distance(pred.height, pred.width, tol);
    let d2 = d * d;
    let r = d.floor() as isize;
    let ps = pred.positives();
    let mut pairs: Vec<(u64, usize, usize)> = Vec::new();
    for (pi, &(py, px)) in ps.iter().enumerate() {
        for dy in -r..=r {
            for dx in -r..=r {
                let dist2 = (dy * dy + dx * dx) as f64;
                let (gy, gx) = (py as isize + dy, px as isize + dx);
                if dist2 <= d2 && gt.at(gy, gx) {
                    let gi = gy as usize * gt.width + gx as usize;
                    pairs.push(((dy * dy + dx * dx) as u64, pi, gi));
                }
            }
        }
    }
    pairs.sort_unstable();
    let mut pred_used = vec![false; ps.len()];
    let mut gt_used = vec![false; gt.bits.len()];
    let mut tp = 0u64;
    for (_, pi, gi) in pairs {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            tp += 1;
        }
    }
    Ok(MatchResult {
        tp,
        fp: ps.len() as u64 - tp,
        fn_: gt.count() as u64 - tp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Binarized predictions are thinned before matching.
    Thin,
    Raw,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Thin => "thin",
            Setting::Raw => "raw",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thin" => Ok(Setting::Thin),
            "raw" => Ok(Setting::Raw),
            _ => Err(Error::Config(format!("unknown setting `{s}` (thin|raw)"))),
        }
    }
}

/// Sweep thresholds `0.01, 0.02, …, 0.99`.
pub fn thresholds() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// Threshold at which mean precision and mean IOU binarize.
pub const FIXED_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub tolerance: f64,
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub mean_precision: f64,
    pub mean_iou: f64,
    pub curve: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn summary_tsv(&self) -> String {
        format!(
            "setting\ttolerance\tods\tods_threshold\tois\tmean_precision\tmean_iou\n{}\t{}\t{:.6}\t{:.2}\t{:.6}\t{:.6}\t{:.6}\n",
            self.setting,
            self.tolerance,
            self.ods,
            self.ods_threshold,
            self.ois,
            self.mean_precision,
            self.mean_iou
        )
    }
}

/// Ground truth is positive iff `y ≥ eta`.
pub fn binarize_gt(gt: &Tensor, eta: f64) -> Result<BinaryMap> {
    binarize(gt, eta)
}

fn counts_at(pred: &Tensor, gt: &BinaryMap, t: f64, setting: Setting, tol: f64) -> Result<MatchResult> {
    let mut b = binarize(pred, t)?;
    if setting == Setting::Thin {
        b = thin(&b);
    }
    match_edges(&b, gt, tol)
}

/// Per-threshold counts of one image.
pub fn image_curve(pred: &Tensor, gt: &BinaryMap, setting: Setting, tol: f64) -> Result<Vec<MatchResult>> {
    thresholds()
        .into_iter()
        .map(|t| counts_at(pred, gt, t, setting, tol))
        .collect()
}

fn check_pairs(preds: &[Tensor], gts: &[Tensor]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(Error::shape("evaluate", &[gts.len()], &[preds.len()]));
    }
    Ok(())
}

/// Dataset-level F at the best single threshold, with the full curve.
pub fn ods_from_curves(curves: &[Vec<MatchResult>]) -> (f64, f64, Vec<CurvePoint>) {
    let ts = thresholds();
    let curve: Vec<CurvePoint> = ts
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let m = curves.iter().fold(MatchResult::default(), |a, c| a + c[k]);
            CurvePoint {
                t,
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
                f: m.f(),
            }
        })
        .collect();
    let best = curve
        .iter()
        .fold(None::<&CurvePoint>, |b, p| match b {
            Some(q) if q.f >= p.f => Some(q),
            _ => Some(p),
        })
        .expect("99 thresholds");
    (best.f, best.t, curve)
}

/// Mean over images of each image's best F.
pub fn ois_from_curves(curves: &[Vec<MatchResult>]) -> f64 {
    let sum: f64 = curves
        .iter()
        .map(|c| c.iter().map(MatchResult::f).fold(0.0, f64::max))
        .sum();
    sum / curves.len() as f64
}

pub fn ods(preds: &[Tensor], gts: &[Tensor], setting: Setting, tol: f64, eta: f64) -> Result<(f64, f64, Vec<CurvePoint>)> {
    Ok(ods_from_curves(&curves(preds, gts, setting, tol, eta)?))
}

pub fn ois(preds: &[Tensor], gts: &[Tensor], setting: Setting, tol: f64, eta: f64) -> Result<f64> {
    Ok(ois_from_curves(&curves(preds, gts, setting, tol, eta)?))
}

fn curves(preds: &[Tensor], gts: &[Tensor], setting: Setting, tol: f64, eta: f64) -> Result<Vec<Vec<MatchResult>>> {
    check_pairs(preds, gts)?;
    preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| image_curve(p, &binarize_gt(g, eta)?, setting, tol))
        .collect()
}

/// Mean tolerance-matched precision and IOU at the fixed threshold, raw
/// predictions.
pub fn mean_precision_and_iou(preds: &[Tensor], gts: &[Tensor], tol: f64, eta: f64) -> Result<(f64, f64)> {
    check_pairs(preds, gts)?;
    let per: Vec<MatchResult> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| counts_at(p, &binarize_gt(g, eta)?, FIXED_THRESHOLD, Setting::Raw, tol))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(MatchResult::precision).sum::<f64>() / n,
        per.iter().map(MatchResult::iou).sum::<f64>() / n,
    ))
}

/// All metrics for a dataset of probability maps and labels.
pub fn evaluate(preds: &[Tensor], gts: &[Tensor], setting: Setting, tol: f64, eta: f64) -> Result<EvalReport> {
    let cs = curves(preds, gts, setting, tol, eta)?;
    let (ods, ods_threshold, curve) = ods_from_curves(&cs);
    let (mean_precision, mean_iou) = mean_precision_and_iou(preds, gts, tol, eta)?;
    Ok(EvalReport {
        setting,
        tolerance: tol,
        ods,
        ods_threshold,
        ois: ois_from_curves(&cs),
        mean_precision,
        mean_iou,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&str]) -> BinaryMap {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMap::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect())
    }

    #[test]
    fn binarize_uses_closed_threshold() {
        let m = Tensor::full(&[2, 2, 1], 0.5);
        assert_eq!(binarize(&m, 0.5).unwrap().count(), 4);
        assert_eq!(binarize(&m, 0.51).unwrap().count(), 0);
    }

    #[test]
    fn thin_bar_to_line() {
        // Frozen from an independent two-subiteration trace: the west end
        // loses one pixel and the east end two.
        let bar = map(&["........", ".######.", ".######.", ".######.", "........"]);
        let t = thin(&bar);
        assert_eq!(t, map(&["........", "........", "..###...", "........", "........"]));
        assert_eq!(t, thin(&t));
        let long = map(&["..........", ".########.", ".########.", ".########.", ".........."]);
        assert_eq!(
            thin(&long),
            map(&["..........", "..........", "..#####...", "..........", ".........."])
        );
        assert_eq!(thin(&BinaryMap::empty(3, 3)), BinaryMap::empty(3, 3));
    }

    #[test]
    fn identical_maps_match_fully() {
        let g = map(&["#..#", ".##.", "...."]);
        let m = match_edges(&g, &g, 0.01).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (4, 0, 0));
    }

    #[test]
    fn distant_pixel_is_unmatched() {
        let p = map(&["#.......", "........"]);
        let g = map(&["........", ".......#"]);
        let m = match_edges(&p, &g, 0.1).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn f_measure_conventions() {
        assert_eq!(f_measure(5, 0, 0), 1.0);
        assert_eq!(f_measure(1, 1, 1), 0.5);
        assert_eq!(f_measure(0, 3, 2), 0.0);
        assert_eq!(f_measure(0, 0, 0), 0.0);
        let m = MatchResult { tp: 2, fp: 1, fn_: 1 };
        assert_eq!(m.iou(), 0.5);
    }

    #[test]
    fn ois_is_mean_of_best() {
        let a = vec![MatchResult { tp: 4, fp: 1, fn_: 1 }; 99];
        let b = vec![MatchResult { tp: 3, fp: 2, fn_: 2 }; 99];
        let ois = ois_from_curves(&[a, b]);
        assert!((ois - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let g = Tensor::from_fn(&[8, 8, 1], |i| if i[0] == 3 { 1.0 } else { 0.0 });
        let r = evaluate(std::slice::from_ref(&g), std::slice::from_ref(&g), Setting::Raw, 0.0075, 0.3).unwrap();
        assert_eq!((r.ods, r.ois, r.mean_precision, r.mean_iou), (1.0, 1.0, 1.0, 1.0));
        let none = Tensor::zeros(&[8, 8, 1]);
        let (p, iou) = mean_precision_and_iou(&[none], &[g], 0.0075, 0.3).unwrap();
        assert_eq!((p, iou), (0.0, 0.0));
        assert!(matches!(evaluate(&[], &[], Setting::Raw, 0.01, 0.3), Err(Error::EmptyDataset)));
    }

    #[test]
    fn report_json_uses_fn_key() {
        let g = Tensor::from_fn(&[4, 4, 1], |i| if i[1] == 1 { 1.0 } else { 0.0 });
        let r = evaluate(std::slice::from_ref(&g), std::slice::from_ref(&g), Setting::Thin, 0.01, 0.3).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["setting"], "thin");
        assert_eq!(json["curve"].as_array().unwrap().len(), 99);
        assert!(json["curve"][0].get("fn").is_some());
    }
}
