//! Panoptic quality and mean IoU.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::decode::{PanopticMap, SemanticMap};
use crate::error::{Error, Result};

/// PQ decomposition for one category (or an average across categories).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqScore {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    /// Categories appearing in either map; those with no TP/FP/FN are absent.
    pub per_category: BTreeMap<usize, PqScore>,
    /// Unweighted means of per-category PQ, SQ and RQ; `None` when no
    /// category is defined (both maps empty).
    pub mean: Option<(f64, f64, f64)>,
}

impl PqReport {
    pub fn pq(&self) -> Option<f64> {
        self.mean.map(|m| m.0)
    }
}

/// Intersection-over-union of two segments with gt-void pixels removed from the union.
fn iou(inter: usize, pred_area: usize, gt_area: usize, pred_void: usize) -> f64 {
    let union = pred_area + gt_area - inter - pred_void;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Panoptic quality: `PQ = Σ_TP IoU / (|TP| + |FP|/2 + |FN|/2)`, with a pred/gt
/// pair of the same category matched iff IoU > 0.5 (which makes matches unique).
///
/// Void gt pixels are removed from IoU unions, and an unmatched prediction
/// lying more than half on gt void is not counted as a false positive.
pub fn pq_metric(pred: &PanopticMap, gt: &PanopticMap) -> Result<PqReport> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "pq_metric",
            format!("pred {}×{} vs gt {}×{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    pred.validate()?;
    gt.validate()?;

    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pred_void: HashMap<u32, usize> = HashMap::new();
    for (&p, &g) in pred.segment_id.iter().zip(&gt.segment_id) {
        match (p, g) {
            (0, _) => {}
            (p, 0) => *pred_void.entry(p).or_default() += 1,
            (p, g) => *inter.entry((p, g)).or_default() += 1,
        }
    }

    let pred_seg: HashMap<u32, _> = pred.segments.iter().map(|s| (s.id, s)).collect();
    let gt_seg: HashMap<u32, _> = gt.segments.iter().map(|s| (s.id, s)).collect();

    let mut iou_sum: BTreeMap<usize, f64> = BTreeMap::new();
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut matched_pred = Vec::new();
    let mut matched_gt = Vec::new();
    for (&(p, g), &n) in &inter {
        let (ps, gs) = (pred_seg[&p], gt_seg[&g]);
        if ps.category != gs.category {
            continue;
        }
        let v = iou(n, ps.area, gs.area, pred_void.get(&p).copied().unwrap_or(0));
        if v > 0.5 {
            *iou_sum.entry(gs.category).or_default() += v;
            *tp.entry(gs.category).or_default() += 1;
            matched_pred.push(p);
            matched_gt.push(g);
        }
    }

    let mut fp: BTreeMap<usize, usize> = BTreeMap::new();
    for s in pred.segments.iter().filter(|s| !matched_pred.contains(&s.id)) {
        let on_void = pred_void.get(&s.id).copied().unwrap_or(0);
        if on_void * 2 <= s.area {
            *fp.entry(s.category).or_default() += 1;
        }
    }
    let mut fn_: BTreeMap<usize, usize> = BTreeMap::new();
    for s in gt.segments.iter().filter(|s| !matched_gt.contains(&s.id)) {
        *fn_.entry(s.category).or_default() += 1;
    }

    let categories: std::collections::BTreeSet<usize> =
        tp.keys().chain(fp.keys()).chain(fn_.keys()).copied().collect();
    let per_category: BTreeMap<usize, PqScore> = categories
        .into_iter()
        .map(|c| {
            let t = tp.get(&c).copied().unwrap_or(0);
            let f = fp.get(&c).copied().unwrap_or(0);
            let n = fn_.get(&c).copied().unwrap_or(0);
            let sum = iou_sum.get(&c).copied().unwrap_or(0.0);
            let sq = if t == 0 { 0.0 } else { sum / t as f64 };
            let rq = t as f64 / (t as f64 + 0.5 * f as f64 + 0.5 * n as f64);
            let pq = sum / (t as f64 + 0.5 * f as f64 + 0.5 * n as f64);
            (c, PqScore { pq, sq, rq, tp: t, fp: f, fn_: n })
        })
        .collect();

    let mean = (!per_category.is_empty()).then(|| {
        let k = per_category.len() as f64;
        let (p, s, r) = per_category
            .values()
            .fold((0.0, 0.0, 0.0), |(p, s, r), v| (p + v.pq, s + v.sq, r + v.rq));
        (p / k, s / k, r / k)
    });
    Ok(PqReport { per_category, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU for every category present in pred or gt.
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
}

/// Mean over categories present in either map of `|pred ∩ gt| / |pred ∪ gt|`.
pub fn miou_metric(pred: &SemanticMap, gt: &SemanticMap, num_classes: usize) -> Result<MiouReport> {
    if (pred.height, pred.width) != (gt.height, gt.width) || pred.category.len() != gt.category.len() {
        return Err(Error::shape(
            "miou_metric",
            format!("pred {}×{} vs gt {}×{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    if let Some(bad) = pred.category.iter().chain(&gt.category).find(|&&c| c >= num_classes) {
        return Err(Error::config(format!("category {bad} outside [0, {num_classes})")));
    }
    let mut inter = vec![0usize; num_classes];
    let mut pred_n = vec![0usize; num_classes];
    let mut gt_n = vec![0usize; num_classes];
    for (&p, &g) in pred.category.iter().zip(&gt.category) {
        pred_n[p] += 1;
        gt_n[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class: BTreeMap<usize, f64> = (0..num_classes)
        .filter(|&c| pred_n[c] + gt_n[c] > 0)
        .map(|c| (c, inter[c] as f64 / (pred_n[c] + gt_n[c] - inter[c]) as f64))
        .collect();
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(MiouReport { per_class, miou })
}
