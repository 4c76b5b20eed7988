//! Independent 64-bit reference implementations used by the integration
//! and acceptance suites. Nothing here calls into the library's numeric paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

use maskhead::decode::{ClassLogits, PanopticMap, Segment, SemanticMap};
use maskhead::heads::{HeadConfig, UpsampleLocation};
use maskhead::{DenseTensor, Scalar, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn half_pixel(i: usize, src: usize, dst: usize) -> f64 {
    let c = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    c.max(0.0).min((src - 1) as f64)
}

/// Closed-form bilinear sample of a row-major `h×w` plane at destination `(oy, ox)`.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, dh: usize, dw: usize, oy: usize, ox: usize) -> f64 {
    let (sy, sx) = (half_pixel(oy, h, dh), half_pixel(ox, w, dw));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |y: usize, x: usize| plane[y * w + x];
    v(y0, x0) * (1.0 - fy) * (1.0 - fx) + v(y0, x1) * (1.0 - fy) * fx + v(y1, x0) * fy * (1.0 - fx) + v(y1, x1) * fy * fx
}

/// Image-space reference: upsample each token channel on the `g×g` grid to
/// `o×o`, then dot every pixel with every query. Batch 1.
/// `tokens` is `N×C`, `mq` is `Qn×C`; returns `Qn×o×o`.
pub fn feature_head_oracle(tokens: &[f64], mq: &[f64], c: usize, g: usize, o: usize) -> Vec<f64> {
    let qn = mq.len() / c;
    let planes: Vec<Vec<f64>> = (0..c)
        .map(|ch| (0..g * g).map(|i| tokens[i * c + ch]).collect())
        .collect();
    let mut out = vec![0.0; qn * o * o];
    for oy in 0..o {
        for ox in 0..o {
            let feat: Vec<f64> = planes.iter().map(|p| bilinear_sample(p, g, g, o, o, oy, ox)).collect();
            for q in 0..qn {
                out[(q * o + oy) * o + ox] = (0..c).map(|ch| mq[q * c + ch] * feat[ch]).sum();
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel semantic marginalization. `masks` is `Qn×P`, `classes` is `Qn×(K+1)`.
pub fn semantic_oracle(masks: &[f64], classes: &[f64], qn: usize, k: usize) -> Vec<usize> {
    let p = masks.len() / qn;
    let probs: Vec<Vec<f64>> = (0..qn).map(|q| softmax(&classes[q * (k + 1)..(q + 1) * (k + 1)])).collect();
    (0..p)
        .map(|x| {
            let scores: Vec<f64> = (0..k)
                .map(|cat| (0..qn).map(|q| probs[q][cat] * sigmoid(masks[q * p + x])).sum())
                .collect();
            first_argmax(&scores)
        })
        .collect()
}

pub struct PanopticParams {
    pub class_threshold: f64,
    pub mask_threshold: f64,
    pub overlap_threshold: f64,
    pub min_area: usize,
    pub stuff: Vec<bool>,
}

impl Default for PanopticParams {
    fn default() -> Self {
        Self { class_threshold: 0.5, mask_threshold: 0.5, overlap_threshold: 0.8, min_area: 0, stuff: vec![] }
    }
}

/// Straight-line panoptic merge: returns a canonical segment-id grid and
/// `(category, is_thing, area)` per id (index = id − 1).
pub fn panoptic_oracle(
    masks: &[f64],
    classes: &[f64],
    qn: usize,
    k: usize,
    prm: &PanopticParams,
) -> (Vec<u32>, Vec<(usize, bool, usize)>) {
    let p = masks.len() / qn;
    let prob = |q: usize, x: usize| sigmoid(masks[q * p + x]);
    // kept: (query, label, score)
    let mut kept = Vec::new();
    for q in 0..qn {
        let pr = softmax(&classes[q * (k + 1)..(q + 1) * (k + 1)]);
        let label = first_argmax(&pr);
        if label < k && pr[label] >= prm.class_threshold {
            kept.push((q, label, pr[label]));
        }
    }
    let mut owner = vec![None; p];
    for (x, o) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &(q, _, s)) in kept.iter().enumerate() {
            let v = s * prob(q, x);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((slot, v));
            }
        }
        if let Some((slot, _)) = best {
            if prob(kept[slot].0, x) >= prm.mask_threshold {
                *o = Some(slot);
            }
        }
    }
    let mut keep = vec![false; kept.len()];
    let mut retained = vec![0usize; kept.len()];
    for (slot, &(q, _, _)) in kept.iter().enumerate() {
        let area = owner.iter().filter(|o| **o == Some(slot)).count();
        let own = (0..p).filter(|&x| prob(q, x) >= prm.mask_threshold).count();
        retained[slot] = area;
        keep[slot] = area > 0 && area >= prm.min_area && own > 0 && area as f64 / own as f64 >= prm.overlap_threshold;
    }
    // Provisional ids: stuff categories share one id, things one per query.
    let is_stuff = |cat: usize| prm.stuff.get(cat).copied().unwrap_or(false);
    let mut provisional = vec![0u32; kept.len()];
    let mut stuff_id: BTreeMap<usize, u32> = BTreeMap::new();
    let mut next = 1;
    let mut info: BTreeMap<u32, (usize, bool)> = BTreeMap::new();
    for slot in 0..kept.len() {
        if !keep[slot] {
            continue;
        }
        let cat = kept[slot].1;
        let id = if is_stuff(cat) {
            *stuff_id.entry(cat).or_insert_with(|| {
                next += 1;
                next - 1
            })
        } else {
            next += 1;
            next - 1
        };
        provisional[slot] = id;
        info.insert(id, (cat, !is_stuff(cat)));
    }
    let raw: Vec<u32> = owner.iter().map(|o| o.filter(|&s| keep[s]).map_or(0, |s| provisional[s])).collect();
    canonical(&raw, &info)
}

fn canonical(raw: &[u32], info: &BTreeMap<u32, (usize, bool)>) -> (Vec<u32>, Vec<(usize, bool, usize)>) {
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    let mut segs = Vec::new();
    let grid = raw
        .iter()
        .map(|&id| {
            if id == 0 {
                return 0;
            }
            let n = remap.len() as u32 + 1;
            let new = *remap.entry(id).or_insert_with(|| {
                let (c, t) = info[&id];
                segs.push((c, t, 0));
                n
            });
            segs[new as usize - 1].2 += 1;
            new
        })
        .collect();
    (grid, segs)
}

/// `(query, category, score)` ranked by class confidence × mean above-threshold sigmoid.
pub fn instance_oracle(masks: &[f64], classes: &[f64], qn: usize, k: usize, thr: f64) -> Vec<(usize, usize, f64)> {
    let p = masks.len() / qn;
    let mut v: Vec<(usize, usize, f64)> = (0..qn)
        .map(|q| {
            let pr = softmax(&classes[q * (k + 1)..(q + 1) * (k + 1)]);
            let cat = first_argmax(&pr[..k]);
            let above: Vec<f64> = (0..p).map(|x| sigmoid(masks[q * p + x])).filter(|&s| s >= thr).collect();
            let quality = if above.is_empty() { 0.0 } else { above.iter().sum::<f64>() / above.len() as f64 };
            (q, cat, pr[cat] * quality)
        })
        .collect();
    // Descending score, ascending query on ties.
    v.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    v
}

/// Builds a valid panoptic map from a raw id grid and a category per id.
pub fn panoptic_from_grid(h: usize, w: usize, grid: Vec<u32>, category_of: impl Fn(u32) -> usize) -> PanopticMap {
    let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in grid.iter().filter(|&&i| i != 0) {
        *areas.entry(id).or_default() += 1;
    }
    let segments = areas
        .into_iter()
        .map(|(id, area)| Segment { id, category: category_of(id), is_thing: true, area })
        .collect();
    PanopticMap::new(h, w, grid, segments).expect("valid map")
}

/// Per-category `(tp, fp, fn, iou_sum)` by scanning every pred/gt segment
/// pair over all pixels.
pub fn pq_brute_force(pred: &PanopticMap, gt: &PanopticMap) -> BTreeMap<usize, (usize, usize, usize, f64)> {
    let mut out: BTreeMap<usize, (usize, usize, usize, f64)> = BTreeMap::new();
    let mut pred_matched = vec![false; pred.segments.len()];
    let mut gt_matched = vec![false; gt.segments.len()];
    for (pi, ps) in pred.segments.iter().enumerate() {
        for (gi, gs) in gt.segments.iter().enumerate() {
            if ps.category != gs.category {
                continue;
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in pred.segment_id.iter().zip(&gt.segment_id) {
                let (inp, ing) = (p == ps.id, g == gs.id);
                if inp && ing {
                    inter += 1;
                }
                if ing || (inp && g != 0) {
                    union += 1;
                }
            }
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if iou > 0.5 {
                let e = out.entry(gs.category).or_default();
                e.0 += 1;
                e.3 += iou;
                pred_matched[pi] = true;
                gt_matched[gi] = true;
            }
        }
    }
    for (pi, ps) in pred.segments.iter().enumerate() {
        let on_void = pred.segment_id.iter().zip(&gt.segment_id).filter(|(&p, &g)| p == ps.id && g == 0).count();
        if !pred_matched[pi] && on_void * 2 <= ps.area {
            out.entry(ps.category).or_default().1 += 1;
        }
    }
    for (gi, gs) in gt.segments.iter().enumerate() {
        if !gt_matched[gi] {
            out.entry(gs.category).or_default().2 += 1;
        }
    }
    out
}

pub struct Case {
    pub qn: usize,
    pub c: usize,
    pub hp: usize,
    pub wp: usize,
    pub scale: usize,
    pub tokens: Vec<f64>,
    pub mq: Vec<f64>,
}

impl Case {
    pub fn draw(seed: u64) -> Self {
        let mut r = rng(seed);
        let (qn, c) = (r.random_range(1..=16), r.random_range(1..=16));
        let (hp, wp) = (r.random_range(1..=8), r.random_range(1..=8));
        let scale = if r.random_bool(0.5) { 2 } else { 4 };
        let tokens = uniform(&mut r, hp * wp * c, 1.0);
        let mq = uniform(&mut r, qn * c, 1.0);
        Self { qn, c, hp, wp, scale, tokens, mq }
    }

    /// Patch 8 with stride 4 is ×2; patch 16 with stride 4 is ×4.
    pub fn config(&self, loc: UpsampleLocation) -> HeadConfig {
        let patch = 4 * self.scale;
        HeadConfig::new(loc, 4, self.hp * patch, self.wp * patch, patch).unwrap()
    }

    pub fn tensors<T: Scalar>(&self) -> (DenseTensor<T>, DenseTensor<T>) {
        let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64(x).unwrap()).collect::<Vec<T>>();
        (
            DenseTensor::from_vec(&[1, self.hp * self.wp, self.c], cast(&self.tokens)).unwrap(),
            DenseTensor::from_vec(&[1, self.qn, self.c], cast(&self.mq)).unwrap(),
        )
    }
}

pub fn relative_deviation<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> f64 {
    let scale = b.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    a.max_abs_diff(b).unwrap() / scale
}

pub struct Scene {
    pub qn: usize,
    pub k: usize,
    pub side: usize,
    pub masks: Vec<f64>,
    pub classes: Vec<f64>,
}

impl Scene {
    /// Masks in [-4, 4] and class logits in [-3, 3] with one boosted slot per
    /// query so that most queries clear the class threshold.
    pub fn draw(seed: u64, side: usize) -> Self {
        let mut r = rng(seed);
        let (qn, k) = (r.random_range(1..=6), r.random_range(1..=4));
        let masks = uniform(&mut r, qn * side * side, 4.0);
        let mut classes = uniform(&mut r, qn * (k + 1), 3.0);
        for q in 0..qn {
            let slot = r.random_range(0..=k);
            classes[q * (k + 1) + slot] += 4.0;
        }
        Self { qn, k, side, masks, classes }
    }

    pub fn tensors(&self) -> (Tensor64, ClassLogits<f64>) {
        (
            Tensor64::from_vec(&[1, self.qn, self.side, self.side], self.masks.clone()).unwrap(),
            ClassLogits::new(Tensor64::from_vec(&[1, self.qn, self.k + 1], self.classes.clone()).unwrap()).unwrap(),
        )
    }

    pub fn permuted(&self, order: &[usize]) -> Scene {
        let p = self.side * self.side;
        let masks = order.iter().flat_map(|&q| self.masks[q * p..(q + 1) * p].to_vec()).collect();
        let classes = order.iter().flat_map(|&q| self.classes[q * (self.k + 1)..(q + 1) * (self.k + 1)].to_vec()).collect();
        Scene { masks, classes, ..*self }
    }
}

/// Seeded 4×4 and 8×8 decoder cases.
pub fn seeds() -> impl Iterator<Item = (u64, usize)> {
    (0..40).flat_map(|s| [(s, 4), (s + 100, 8)])
}

pub fn constructed_pq_case() -> (PanopticMap, PanopticMap) {
    // gt: segment 1 (category 0) is the top-left 2×2 block; segment 2
    // (category 1) is everything else.
    // pred: segment 1 (category 0) covers three cells of the block plus
    // (0,2); segment 2 (category 0) is a spurious pair in the bottom row.
    #[rustfmt::skip]
    let gt = vec![
        1, 1, 2, 2,
        1, 1, 2, 2,
        2, 2, 2, 2,
        2, 2, 2, 2,
    ];
    #[rustfmt::skip]
    let pred = vec![
        1, 1, 1, 0,
        1, 0, 0, 0,
        0, 0, 0, 0,
        0, 2, 2, 0,
    ];
    let gt = panoptic_from_grid(4, 4, gt, |id| if id == 1 { 0 } else { 1 });
    let pred = panoptic_from_grid(4, 4, pred, |_| 0);
    (pred, gt)
}

/// A blocky 8×8 gt map and a prediction with about a quarter of its
/// pixels reassigned, over 5 ids drawn into 3 categories.
pub fn random_pq_pair(seed: u64) -> (PanopticMap, PanopticMap) {
    let mut r = rng(3000 + seed);
    let side = 8;
    let cats: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
    let block: Vec<u32> = (0..4).map(|_| r.random_range(0..5)).collect();
    let gt_grid: Vec<u32> = (0..side * side).map(|i| block[(i / side / 4) * 2 + (i % side) / 4]).collect();
    let pred_grid: Vec<u32> = gt_grid.iter().map(|&g| if r.random_bool(0.25) { r.random_range(0..5) } else { g }).collect();
    let gt = panoptic_from_grid(side, side, gt_grid, |id| cats[id as usize]);
    let pred = panoptic_from_grid(side, side, pred_grid, |id| cats[(id as usize + seed as usize) % 5]);
    (pred, gt)
}

/// `(pred, gt, num_classes, expected mIoU)` worked out by hand.
pub fn miou_golden() -> Vec<(SemanticMap, SemanticMap, usize, f64)> {
    let map = |h, w, v: Vec<usize>| SemanticMap::new(h, w, v).unwrap();
    vec![
        // 2×4 stripes shifted by one column: class 0 is 2/4, class 1 is 4/6.
        (map(2, 4, vec![0, 1, 1, 1, 0, 1, 1, 1]), map(2, 4, vec![0, 0, 1, 1, 0, 0, 1, 1]), 3, (2.0 / 4.0 + 4.0 / 6.0) / 2.0),
        (map(2, 2, vec![0, 1, 2, 1]), map(2, 2, vec![0, 1, 2, 1]), 4, 1.0),
        (map(1, 4, vec![0, 0, 0, 0]), map(1, 4, vec![1, 1, 1, 1]), 2, 0.0),
    ]
}
