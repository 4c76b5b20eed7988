//! The two mask-prediction pipelines.
//!
//! Image-space: tokens → `C×Hp×Wp` feature grid → optional bilinear upsampling
//! over `C` channels → per-pixel dot product with each projected query.
//!
//! Token-space: one batched GEMM `m(Q)·Tᵀ` gives `Qn×N` token scores → reshape
//! to the patch grid → optional bilinear upsampling of the logits over `Qn`
//! channels. No `C`-channel tensor above patch resolution is ever built.
//!
//! Both heads use the same GEMM and resampling kernels, so they differ only in
//! operand sizes and stage order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{bilinear_resize, resolve_output_stride, ResamplePlan};
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_bt, scores_to_grid, tokens_to_grid, DenseTensor, OpCounter};

/// Stage labels written into [`OpCounter`] logs and cost reports.
pub mod stage {
    pub const TOKENS_TO_GRID: &str = "tokens_to_grid";
    pub const FEATURE_RESIZE: &str = "feature_resize";
    pub const SCORING: &str = "scoring";
    pub const SCORES_TO_GRID: &str = "scores_to_grid";
    pub const LOGIT_RESIZE: &str = "logit_resize";
}

/// Where spatial upsampling happens, if anywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleLocation {
    Feature,
    Logit,
    None,
}

impl UpsampleLocation {
    pub const ALL: [UpsampleLocation; 3] =
        [UpsampleLocation::Feature, UpsampleLocation::Logit, UpsampleLocation::None];

    /// The head that natively implements this location.
    pub fn head(self) -> HeadKind {
        match self {
            UpsampleLocation::Feature => HeadKind::ImageSpace,
            UpsampleLocation::Logit | UpsampleLocation::None => HeadKind::TokenSpace,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleLocation::Feature => "feature",
            UpsampleLocation::Logit => "logit",
            UpsampleLocation::None => "none",
        }
    }
}

impl fmt::Display for UpsampleLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpsampleLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(UpsampleLocation::Feature),
            "logit" => Ok(UpsampleLocation::Logit),
            "none" => Ok(UpsampleLocation::None),
            other => Err(Error::config(format!("unknown upsample location `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    ImageSpace,
    TokenSpace,
}

impl HeadKind {
    pub fn supports(self, location: UpsampleLocation) -> bool {
        matches!(
            (self, location),
            (_, UpsampleLocation::None)
                | (HeadKind::ImageSpace, UpsampleLocation::Feature)
                | (HeadKind::TokenSpace, UpsampleLocation::Logit)
        )
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::ImageSpace => "image_space",
            HeadKind::TokenSpace => "token_space",
        })
    }
}

/// One point on the ablation grid: upsampling location × output stride × input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub upsample_location: UpsampleLocation,
    pub output_stride: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
}

impl HeadConfig {
    pub fn new(
        upsample_location: UpsampleLocation,
        output_stride: usize,
        image_h: usize,
        image_w: usize,
        patch: usize,
    ) -> Result<Self> {
        let cfg = Self { upsample_location, output_stride, image_h, image_w, patch };
        cfg.stride_plan()?;
        Ok(cfg)
    }

    fn stride_plan(&self) -> Result<ResamplePlan> {
        resolve_output_stride(self.image_h, self.image_w, self.patch, self.output_stride)
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (hp, wp) = self.patch_grid();
        hp * wp
    }

    /// Emitted mask extents. Without upsampling this is the patch grid.
    pub fn output_extent(&self) -> (usize, usize) {
        match self.upsample_location {
            UpsampleLocation::None => self.patch_grid(),
            _ => (self.image_h / self.output_stride, self.image_w / self.output_stride),
        }
    }

    /// The resampling step this config performs, or `None` when the head
    /// emits at patch resolution (no upsampling, or stride equal to patch).
    pub fn resample(&self, channels: usize) -> Result<Option<ResamplePlan>> {
        if self.upsample_location == UpsampleLocation::None {
            return Ok(None);
        }
        let plan = self.stride_plan()?.with_channels(channels);
        Ok((!plan.is_identity()).then_some(plan))
    }
}

/// Learnable queries, `B×Qn×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet<T> {
    values: DenseTensor<T>,
}

impl<T: Scalar> QuerySet<T> {
    pub fn new(values: DenseTensor<T>) -> Result<Self> {
        let [_, qn, c] = values.dims3("QuerySet")?;
        if qn == 0 {
            return Err(Error::config("query set must contain at least one query"));
        }
        if c == 0 {
            return Err(Error::config("query channel dimension must be >= 1"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DenseTensor<T> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }
}

/// One affine layer `y = W·x + b` with a square `C×C` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: DenseTensor<T>,
    pub bias: Option<DenseTensor<T>>,
}

/// The mask projection `m(·)`.
///
/// Depth 1 (the default) is a single linear map. Deeper projections insert a
/// ReLU between layers; those are not covered by the head-equivalence results.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskProjection<T> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> MaskProjection<T> {
    pub fn linear(weight: DenseTensor<T>, bias: Option<DenseTensor<T>>) -> Result<Self> {
        Self::mlp(vec![Linear { weight, bias }])
    }

    pub fn mlp(layers: Vec<Linear<T>>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::config("projection needs a layer"))?;
        let c = first.weight.shape()[0];
        for layer in &layers {
            if layer.weight.shape() != [c, c] {
                return Err(Error::shape(
                    "MaskProjection",
                    format!("weight must be {c}×{c}, got {:?}", layer.weight.shape()),
                ));
            }
            if let Some(b) = &layer.bias {
                if b.shape() != [c] {
                    return Err(Error::shape(
                        "MaskProjection",
                        format!("bias must have length {c}, got {:?}", b.shape()),
                    ));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn identity(c: usize) -> Self {
        let weight = DenseTensor::from_fn(&[c, c], |i| if i / c == i % c { T::one() } else { T::zero() });
        Self { layers: vec![Linear { weight, bias: None }] }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }
}

/// Applies `m(·)` to every query: `out[b,i,:] = W·q[b,i,:] + bias`.
pub fn project_queries<T: Scalar>(q: &QuerySet<T>, m: &MaskProjection<T>) -> Result<DenseTensor<T>> {
    let [batch, qn, c] = q.values.dims3("project_queries")?;
    if c != m.channels() {
        return Err(Error::shape(
            "project_queries",
            format!("query channels {c} != projection channels {}", m.channels()),
        ));
    }
    let mut x = q.values.clone().reshaped(&[1, batch * qn, c])?;
    let depth = m.depth();
    for (li, layer) in m.layers.iter().enumerate() {
        let w = layer.weight.clone().reshaped(&[1, c, c])?;
        // (x · Wᵀ)[p,s] = Σ_r x[p,r]·W[s,r] = (W·x_p)_s
        let y = gemm_bt(&x, &w, &mut OpCounter::new())?;
        let mut data = y.into_data();
        if let Some(b) = &layer.bias {
            for row in data.chunks_exact_mut(c) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        if li + 1 < depth {
            for v in &mut data {
                *v = v.max(T::zero());
            }
        }
        x = DenseTensor::from_raw(vec![1, batch * qn, c], data);
    }
    x.reshaped(&[batch, qn, c])
}

fn check_operands<T: Scalar>(
    op: &'static str,
    t: &DenseTensor<T>,
    mq: &DenseTensor<T>,
) -> Result<([usize; 3], usize)> {
    let [batch, n, c] = t.dims3(op)?;
    let [bq, qn, cq] = mq.dims3(op)?;
    if batch != bq {
        return Err(Error::shape(op, format!("batch: tokens {batch}, queries {bq}")));
    }
    if c != cq {
        return Err(Error::shape(op, format!("channels: tokens {c}, queries {cq}")));
    }
    if qn == 0 {
        return Err(Error::config("query set must contain at least one query"));
    }
    Ok(([batch, n, c], qn))
}

/// Query–token affinities `L[b,q,i] = ⟨mq[b,q,:], t[b,i,:]⟩` as one batched GEMM.
pub fn token_scores<T: Scalar>(
    t: &DenseTensor<T>,
    mq: &DenseTensor<T>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    check_operands("token_scores", t, mq)?;
    gemm_bt(mq, t, counter)
}

fn check_grid(op: &'static str, cfg: &HeadConfig, n: usize) -> Result<()> {
    let (hp, wp) = cfg.patch_grid();
    if n != hp * wp {
        return Err(Error::shape(op, format!("{n} tokens but config implies a {hp}×{wp} grid")));
    }
    Ok(())
}

/// Reshape tokens to a feature map, optionally upsample it over `C` channels,
/// then score every pixel against every projected query.
pub fn image_space_head<T: Scalar>(
    t: &DenseTensor<T>,
    mq: &DenseTensor<T>,
    cfg: &HeadConfig,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    if !HeadKind::ImageSpace.supports(cfg.upsample_location) {
        return Err(Error::config(format!(
            "image-space head cannot upsample at `{}`",
            cfg.upsample_location
        )));
    }
    let ([batch, n, c], qn) = check_operands("image_space_head", t, mq)?;
    check_grid("image_space_head", cfg, n)?;
    let (hp, wp) = cfg.patch_grid();

    let mut st = OpCounter::new();
    let mut features = tokens_to_grid(t, hp, wp, &mut st)?;
    counter.absorb(stage::TOKENS_TO_GRID, st);

    if let Some(plan) = cfg.resample(c)? {
        let mut st = OpCounter::new();
        features = bilinear_resize(&features, &plan, &mut st)?;
        counter.absorb(stage::FEATURE_RESIZE, st);
    }

    let (oh, ow) = cfg.output_extent();
    let flat = features.reshaped(&[batch, c, oh * ow])?;
    let mut st = OpCounter::new();
    let masks = gemm(mq, &flat, &mut st)?;
    counter.absorb(stage::SCORING, st);
    masks.reshaped(&[batch, qn, oh, ow])
}

/// Score queries against tokens directly, reshape the scores to the patch
/// grid, then optionally upsample the logits over `Qn` channels.
pub fn token_space_head<T: Scalar>(
    t: &DenseTensor<T>,
    mq: &DenseTensor<T>,
    cfg: &HeadConfig,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    if !HeadKind::TokenSpace.supports(cfg.upsample_location) {
        return Err(Error::config(format!(
            "token-space head cannot upsample at `{}`",
            cfg.upsample_location
        )));
    }
    let ([_, n, _], qn) = check_operands("token_space_head", t, mq)?;
    check_grid("token_space_head", cfg, n)?;
    let (hp, wp) = cfg.patch_grid();

    let mut st = OpCounter::new();
    let scores = token_scores(t, mq, &mut st)?;
    counter.absorb(stage::SCORING, st);

    let mut st = OpCounter::new();
    let mut masks = scores_to_grid(&scores, hp, wp, &mut st)?;
    counter.absorb(stage::SCORES_TO_GRID, st);

    if let Some(plan) = cfg.resample(qn)? {
        let mut st = OpCounter::new();
        masks = bilinear_resize(&masks, &plan, &mut st)?;
        counter.absorb(stage::LOGIT_RESIZE, st);
    }
    Ok(masks)
}

/// Runs whichever head natively implements `cfg.upsample_location`
/// (`none` runs the token-space head).
pub fn run_head<T: Scalar>(
    kind: HeadKind,
    t: &DenseTensor<T>,
    mq: &DenseTensor<T>,
    cfg: &HeadConfig,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    match kind {
        HeadKind::ImageSpace => image_space_head(t, mq, cfg, counter),
        HeadKind::TokenSpace => token_space_head(t, mq, cfg, counter),
    }
}
