//! Mask-classification decoding: semantic, panoptic and instance outputs from
//! per-query mask logits (`B×Qn×H×W`) and class logits (`B×Qn×(K+1)`, last
//! slot = no-object).
//!
//! Masks enter only through their sigmoid. Ties always resolve toward the
//! smaller index (category, query, or segment).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, softmax_row, DenseTensor};

/// Per-query class scores over `K` categories plus a trailing no-object slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogits<T> {
    values: DenseTensor<T>,
}

impl<T: Scalar> ClassLogits<T> {
    pub fn new(values: DenseTensor<T>) -> Result<Self> {
        let [_, _, slots] = values.dims3("ClassLogits")?;
        if slots < 2 {
            return Err(Error::config("class logits need K >= 1 categories plus no-object"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DenseTensor<T> {
        &self.values
    }

    /// Number of real categories `K`.
    pub fn categories(&self) -> usize {
        self.values.shape()[2] - 1
    }

    /// Softmax over all `K + 1` slots for each query of image `b`.
    pub fn probabilities(&self, b: usize) -> Vec<Vec<f64>> {
        let [_, qn, slots] = self.values.dims3("ClassLogits").expect("validated rank");
        let base = b * qn * slots;
        (0..qn)
            .map(|q| {
                let row: Vec<f64> = self.values.data()[base + q * slots..base + (q + 1) * slots]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                softmax_row(&row)
            })
            .collect()
    }
}

/// Dense per-pixel category labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height·width` entries in `[0, K)`.
    pub category: Vec<usize>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, category: Vec<usize>) -> Result<Self> {
        if category.len() != height * width {
            return Err(Error::shape(
                "SemanticMap",
                format!("{height}×{width} grid needs {} labels, got {}", height * width, category.len()),
            ));
        }
        Ok(Self { height, width, category })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub category: usize,
    pub is_thing: bool,
    pub area: usize,
}

/// Segment-id grid (0 = void) plus its segment table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height·width` entries.
    pub segment_id: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticMap {
    /// Validates that every nonzero grid id has exactly one segment entry
    /// with a matching area, and that no entry is unused.
    pub fn new(height: usize, width: usize, segment_id: Vec<u32>, segments: Vec<Segment>) -> Result<Self> {
        let map = Self { height, width, segment_id, segments };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_id.len() != self.height * self.width {
            return Err(Error::shape("PanopticMap", "grid length does not match extents"));
        }
        let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in self.segment_id.iter().filter(|&&id| id != 0) {
            *areas.entry(id).or_default() += 1;
        }
        let mut seen = BTreeMap::new();
        for s in &self.segments {
            if s.id == 0 || seen.insert(s.id, ()).is_some() {
                return Err(Error::config(format!("segment id {} is void or duplicated", s.id)));
            }
            if areas.get(&s.id).copied().unwrap_or(0) != s.area {
                return Err(Error::config(format!("segment {} area does not match grid", s.id)));
            }
        }
        if areas.len() != self.segments.len() {
            return Err(Error::config("grid contains ids without segment entries"));
        }
        Ok(())
    }

    pub fn void_pixels(&self) -> usize {
        self.segment_id.iter().filter(|&&id| id == 0).count()
    }

    /// Renumbers segments 1, 2, … in order of first appearance in a
    /// row-major scan, and sorts the segment table by id.
    pub fn canonicalize(&mut self) {
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        for id in &mut self.segment_id {
            if *id != 0 {
                let next = remap.len() as u32 + 1;
                *id = *remap.entry(*id).or_insert(next);
            }
        }
        for s in &mut self.segments {
            s.id = remap[&s.id];
        }
        self.segments.sort_by_key(|s| s.id);
    }
}

/// Thresholds for panoptic merging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticConfig {
    /// Minimum class confidence for a query to be kept.
    pub class_threshold: f64,
    /// Minimum sigmoid for a pixel to belong to its winning query.
    pub mask_threshold: f64,
    /// Minimum retained-area / own-mask-area ratio for a segment to survive.
    pub overlap_threshold: f64,
    /// Minimum retained area in pixels.
    pub min_area: usize,
    /// `is_thing` per category; empty means every category is a thing.
    pub thing_categories: Vec<bool>,
}

impl Default for PanopticConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.5,
            mask_threshold: 0.5,
            overlap_threshold: 0.8,
            min_area: 0,
            thing_categories: Vec::new(),
        }
    }
}

impl PanopticConfig {
    fn validate(&self, k: usize) -> Result<()> {
        for (name, v) in [
            ("class_threshold", self.class_threshold),
            ("mask_threshold", self.mask_threshold),
            ("overlap_threshold", self.overlap_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !self.thing_categories.is_empty() && self.thing_categories.len() != k {
            return Err(Error::config(format!(
                "thing_categories has {} entries for {k} categories",
                self.thing_categories.len()
            )));
        }
        Ok(())
    }

    fn is_thing(&self, category: usize) -> bool {
        self.thing_categories.get(category).copied().unwrap_or(true)
    }
}

/// Per-image view of the mask tensor as sigmoid probabilities, `Qn × (H·W)`.
struct MaskProbs {
    pixels: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl MaskProbs {
    fn at(&self, q: usize, x: usize) -> f64 {
        self.probs[q * self.pixels + x]
    }
}

fn check_pair<T: Scalar>(op: &'static str, masks: &DenseTensor<T>, classes: &ClassLogits<T>) -> Result<[usize; 4]> {
    let dims = masks.dims4(op)?;
    let [bc, qc, _] = classes.values.dims3(op)?;
    if dims[0] != bc || dims[1] != qc {
        return Err(Error::shape(
            op,
            format!("masks {:?} vs class logits {:?} (batch/query axes)", masks.shape(), classes.values.shape()),
        ));
    }
    Ok(dims)
}

fn mask_probs<T: Scalar>(masks: &DenseTensor<T>, b: usize) -> MaskProbs {
    let [_, qn, h, w] = masks.dims4("mask_probs").expect("validated rank");
    let per = qn * h * w;
    MaskProbs {
        pixels: h * w,
        height: h,
        width: w,
        probs: masks.data()[b * per..(b + 1) * per].iter().map(|&v| sigmoid(v.as_f64())).collect(),
    }
}

/// Index of the largest value, first one on ties.
fn argmax(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    values.into_iter().enumerate().fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
}

/// Per-pixel `argmax_k Σ_q p(k|q)·σ(mask_q)` over real categories.
pub fn semantic_decode<T: Scalar>(masks: &DenseTensor<T>, classes: &ClassLogits<T>) -> Result<Vec<SemanticMap>> {
    let [batch, _, h, w] = check_pair("semantic_decode", masks, classes)?;
    let k = classes.categories();
    (0..batch)
        .map(|b| {
            let probs = classes.probabilities(b);
            let m = mask_probs(masks, b);
            let mut scores = vec![0.0; k];
            let category = (0..m.pixels)
                .map(|x| {
                    scores.iter_mut().for_each(|s| *s = 0.0);
                    for (q, p) in probs.iter().enumerate() {
                        let mp = m.at(q, x);
                        for (s, pk) in scores.iter_mut().zip(&p[..k]) {
                            *s += pk * mp;
                        }
                    }
                    argmax(scores.iter().copied()).map_or(0, |(i, _)| i)
                })
                .collect();
            SemanticMap::new(h, w, category)
        })
        .collect()
}

/// Query kept for panoptic merging.
struct Kept {
    query: usize,
    label: usize,
    score: f64,
}

fn kept_queries(probs: &[Vec<f64>], k: usize, class_threshold: f64) -> Vec<Kept> {
    probs
        .iter()
        .enumerate()
        .filter_map(|(query, p)| {
            let (label, score) = argmax(p.iter().copied())?;
            (label < k && score >= class_threshold).then_some(Kept { query, label, score })
        })
        .collect()
}

/// Mask2Former-style panoptic merging. Output ids are canonical (first-pixel
/// scan order), so results are comparable across query permutations.
pub fn panoptic_decode<T: Scalar>(
    masks: &DenseTensor<T>,
    classes: &ClassLogits<T>,
    cfg: &PanopticConfig,
) -> Result<Vec<PanopticMap>> {
    let [batch, ..] = check_pair("panoptic_decode", masks, classes)?;
    let k = classes.categories();
    cfg.validate(k)?;
    (0..batch)
        .map(|b| {
            let m = mask_probs(masks, b);
            let kept = kept_queries(&classes.probabilities(b), k, cfg.class_threshold);
            Ok(merge_panoptic(&m, &kept, cfg))
        })
        .collect()
}

fn merge_panoptic(m: &MaskProbs, kept: &[Kept], cfg: &PanopticConfig) -> PanopticMap {
    // Winning kept-query slot per pixel, or None for void.
    let owner: Vec<Option<usize>> = (0..m.pixels)
        .map(|x| {
            let (slot, _) = argmax(kept.iter().map(|c| c.score * m.at(c.query, x)))?;
            (m.at(kept[slot].query, x) >= cfg.mask_threshold).then_some(slot)
        })
        .collect();

    let mut retained = vec![0usize; kept.len()];
    for slot in owner.iter().flatten() {
        retained[*slot] += 1;
    }
    let survives: Vec<bool> = kept
        .iter()
        .zip(&retained)
        .map(|(c, &area)| {
            let own = (0..m.pixels).filter(|&x| m.at(c.query, x) >= cfg.mask_threshold).count();
            area > 0
                && area >= cfg.min_area
                && own > 0
                && area as f64 / own as f64 >= cfg.overlap_threshold
        })
        .collect();

    // Stuff categories collapse to one id each; things keep one id per query.
    let mut ids = vec![0u32; kept.len()];
    let mut stuff_ids: BTreeMap<usize, u32> = BTreeMap::new();
    let mut segments: Vec<Segment> = Vec::new();
    for (slot, c) in kept.iter().enumerate().filter(|(s, _)| survives[*s]) {
        let thing = cfg.is_thing(c.label);
        let existing = (!thing).then(|| stuff_ids.get(&c.label).copied()).flatten();
        let id = match existing {
            Some(id) => id,
            None => {
                let id = segments.len() as u32 + 1;
                segments.push(Segment { id, category: c.label, is_thing: thing, area: 0 });
                if !thing {
                    stuff_ids.insert(c.label, id);
                }
                id
            }
        };
        ids[slot] = id;
        segments[id as usize - 1].area += retained[slot];
    }

    let segment_id = owner
        .iter()
        .map(|o| o.filter(|&s| survives[s]).map_or(0, |s| ids[s]))
        .collect();
    let mut map = PanopticMap { height: m.height, width: m.width, segment_id, segments };
    map.canonicalize();
    map
}

/// Thresholds for instance decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub top_k: usize,
    pub mask_threshold: f64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self { top_k: 100, mask_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub query: usize,
    pub category: usize,
    /// Class confidence × mask quality.
    pub score: f64,
    pub height: usize,
    pub width: usize,
    /// Row-major binary mask.
    pub mask: Vec<bool>,
}

/// Mean sigmoid over the pixels at or above `threshold`; 0 for an empty mask.
pub fn mask_quality(probs: impl IntoIterator<Item = f64>, threshold: f64) -> f64 {
    let (sum, count) = probs
        .into_iter()
        .filter(|&p| p >= threshold)
        .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// One candidate per query, ranked by class confidence × mask quality.
pub fn instance_decode<T: Scalar>(
    masks: &DenseTensor<T>,
    classes: &ClassLogits<T>,
    cfg: &InstanceConfig,
) -> Result<Vec<Vec<Instance>>> {
    let [batch, ..] = check_pair("instance_decode", masks, classes)?;
    if cfg.top_k == 0 {
        return Err(Error::config("top_k must be >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.mask_threshold) {
        return Err(Error::config(format!("mask_threshold = {} outside [0, 1]", cfg.mask_threshold)));
    }
    let k = classes.categories();
    Ok((0..batch)
        .map(|b| {
            let m = mask_probs(masks, b);
            let mut ranked: Vec<Instance> = classes
                .probabilities(b)
                .iter()
                .enumerate()
                .map(|(query, p)| {
                    let (category, class_score) = argmax(p[..k].iter().copied()).expect("K >= 1");
                    let row = &m.probs[query * m.pixels..(query + 1) * m.pixels];
                    let quality = mask_quality(row.iter().copied(), cfg.mask_threshold);
                    Instance {
                        query,
                        category,
                        score: class_score * quality,
                        height: m.height,
                        width: m.width,
                        mask: row.iter().map(|&p| p >= cfg.mask_threshold).collect(),
                    }
                })
                .collect();
            // Stable sort keeps the smaller query index first on equal scores.
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
            ranked.truncate(cfg.top_k);
            ranked
        })
        .collect())
}
