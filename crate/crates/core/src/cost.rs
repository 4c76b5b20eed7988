//! Closed-form FLOPs, bytes-moved and peak-activation model for both heads,
//! plus an analytical ViT backbone estimate for context.
//!
//! Uses the same conventions as the instrumented kernels (multiply = add = 1
//! FLOP, 7 FLOPs per bilinear sample and channel, reshapes free but charged
//! for traffic), so [`validate_against_counters`] demands exact equality.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::gen_synthetic;
use crate::error::{Error, Result};
use crate::heads::{project_queries, run_head, stage, HeadConfig, HeadKind, UpsampleLocation};
use crate::interp::FLOPS_PER_SAMPLE;
use crate::tensor::{OpCounter, StageCount};

/// Standard ViT family members.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackbonePreset {
    #[serde(rename = "vit-tiny")]
    VitTiny,
    #[serde(rename = "vit-small")]
    VitSmall,
    #[serde(rename = "vit-base")]
    VitBase,
    #[serde(rename = "vit-large")]
    VitLarge,
}

impl BackbonePreset {
    pub const ALL: [BackbonePreset; 4] = [
        BackbonePreset::VitTiny,
        BackbonePreset::VitSmall,
        BackbonePreset::VitBase,
        BackbonePreset::VitLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackbonePreset::VitTiny => "vit-tiny",
            BackbonePreset::VitSmall => "vit-small",
            BackbonePreset::VitBase => "vit-base",
            BackbonePreset::VitLarge => "vit-large",
        }
    }

    /// Embedding dimension `C`.
    pub fn channels(self) -> usize {
        match self {
            BackbonePreset::VitTiny => 192,
            BackbonePreset::VitSmall => 384,
            BackbonePreset::VitBase => 768,
            BackbonePreset::VitLarge => 1024,
        }
    }

    pub fn depth(self) -> usize {
        match self {
            BackbonePreset::VitLarge => 24,
            _ => 12,
        }
    }

    pub fn heads(self) -> usize {
        match self {
            BackbonePreset::VitTiny => 3,
            BackbonePreset::VitSmall => 6,
            BackbonePreset::VitBase => 12,
            BackbonePreset::VitLarge => 16,
        }
    }

    pub fn patch(self) -> usize {
        16
    }

    /// Blocks that see the queries alongside the tokens: `⌈depth / 4⌉`.
    pub fn default_query_blocks(self) -> usize {
        self.depth().div_ceil(4)
    }
}

impl fmt::Display for BackbonePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackbonePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset `{s}` (expected vit-tiny|vit-small|vit-base|vit-large)")))
    }
}

/// Modeled cost of one pipeline stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: String,
    pub flops: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub peak_activation_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub flops: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub peak_activation_bytes: u64,
}

/// Echo of the inputs a report was computed for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    pub preset: BackbonePreset,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub queries: usize,
    pub batch: usize,
    pub head: HeadKind,
    pub upsample_location: UpsampleLocation,
    pub output_stride: usize,
    pub bytes_per_scalar: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub stages: Vec<StageCost>,
    pub totals: CostTotals,
}

impl CostReport {
    fn new(config: CostConfig, stages: Vec<StageCost>) -> Self {
        let totals = stages.iter().fold(CostTotals::default(), |t, s| CostTotals {
            flops: t.flops + s.flops,
            bytes_read: t.bytes_read + s.bytes_read,
            bytes_written: t.bytes_written + s.bytes_written,
            peak_activation_bytes: t.peak_activation_bytes.max(s.peak_activation_bytes),
        });
        Self { config, stages, totals }
    }

    pub fn stage(&self, name: &str) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn gflops(&self) -> f64 {
        self.totals.flops as f64 / 1e9
    }
}

fn stage_cost(name: &str, flops: u64, read: u64, written: u64) -> StageCost {
    StageCost {
        stage: name.to_owned(),
        flops,
        bytes_read: read,
        bytes_written: written,
        peak_activation_bytes: written,
    }
}

/// Cost of the head that natively implements `cfg.upsample_location`, batch 1, 32-bit scalars.
pub fn head_cost(cfg: &HeadConfig, preset: BackbonePreset, queries: usize) -> Result<CostReport> {
    head_cost_for(cfg.upsample_location.head(), cfg, preset, queries, 1, 4)
}

/// Per-stage cost of running `head` under `cfg`.
///
/// Scoring costs `2·B·Qn·C·P` at the resolution `P` where it happens;
/// interpolation costs `7·B·Ch·Ĥ·Ŵ` with `Ch = C` (feature) or `Qn` (logit);
/// reshapes cost no FLOPs but read and write their tensor once. The channel
/// dimension is taken from `preset`; the patch size from `cfg`.
pub fn head_cost_for(
    head: HeadKind,
    cfg: &HeadConfig,
    preset: BackbonePreset,
    queries: usize,
    batch: usize,
    bytes_per_scalar: usize,
) -> Result<CostReport> {
    let cfg = HeadConfig::new(cfg.upsample_location, cfg.output_stride, cfg.image_h, cfg.image_w, cfg.patch)?;
    if !head.supports(cfg.upsample_location) {
        return Err(Error::config(format!("{head} head cannot upsample at `{}`", cfg.upsample_location)));
    }
    if queries == 0 || batch == 0 || bytes_per_scalar == 0 {
        return Err(Error::config("queries, batch and bytes_per_scalar must be >= 1"));
    }
    let (b, qn, c) = (batch as u64, queries as u64, preset.channels() as u64);
    let n = cfg.tokens() as u64;
    let (oh, ow) = cfg.output_extent();
    let out = (oh * ow) as u64;
    let s = bytes_per_scalar as u64;
    let resamples = cfg.resample(1)?.is_some();

    let mut stages = Vec::new();
    match head {
        HeadKind::ImageSpace => {
            stages.push(stage_cost(stage::TOKENS_TO_GRID, 0, s * b * n * c, s * b * n * c));
            if resamples {
                stages.push(stage_cost(
                    stage::FEATURE_RESIZE,
                    FLOPS_PER_SAMPLE * b * c * out,
                    s * b * c * n,
                    s * b * c * out,
                ));
            }
            stages.push(stage_cost(
                stage::SCORING,
                2 * b * qn * c * out,
                s * (b * qn * c + b * c * out),
                s * b * qn * out,
            ));
        }
        HeadKind::TokenSpace => {
            stages.push(stage_cost(
                stage::SCORING,
                2 * b * qn * n * c,
                s * (b * qn * c + b * n * c),
                s * b * qn * n,
            ));
            stages.push(stage_cost(stage::SCORES_TO_GRID, 0, s * b * qn * n, s * b * qn * n));
            if resamples {
                stages.push(stage_cost(
                    stage::LOGIT_RESIZE,
                    FLOPS_PER_SAMPLE * b * qn * out,
                    s * b * qn * n,
                    s * b * qn * out,
                ));
            }
        }
    }

    let config = CostConfig {
        preset,
        image_h: cfg.image_h,
        image_w: cfg.image_w,
        patch: cfg.patch,
        queries,
        batch,
        head,
        upsample_location: cfg.upsample_location,
        output_stride: cfg.output_stride,
        bytes_per_scalar,
    };
    Ok(CostReport::new(config, stages))
}

/// Peak single-tensor activation (bytes) of the native head for `cfg`, batch 1.
pub fn peak_memory(
    cfg: &HeadConfig,
    preset: BackbonePreset,
    queries: usize,
    bytes_per_scalar: usize,
) -> Result<u64> {
    peak_memory_for(cfg.upsample_location.head(), cfg, preset, queries, bytes_per_scalar)
}

pub fn peak_memory_for(
    head: HeadKind,
    cfg: &HeadConfig,
    preset: BackbonePreset,
    queries: usize,
    bytes_per_scalar: usize,
) -> Result<u64> {
    Ok(head_cost_for(head, cfg, preset, queries, 1, bytes_per_scalar)?
        .totals
        .peak_activation_bytes)
}

/// FLOPs of one transformer block over a sequence of length `seq`:
/// `2·(4·S·C² + 2·S²·C + 8·S·C²)` (QKV + output projections, attention
/// scores and weighted sum, 4× MLP).
pub fn block_flops(seq: u64, channels: u64) -> u64 {
    2 * (4 * seq * channels * channels + 2 * seq * seq * channels + 8 * seq * channels * channels)
}

/// Analytical ViT backbone FLOPs with queries joining the token sequence in
/// the last `query_blocks` blocks, plus the patch embedding `2·N·C·3·patch²`.
pub fn backbone_cost(
    preset: BackbonePreset,
    image_h: usize,
    image_w: usize,
    queries: usize,
    query_blocks: usize,
) -> Result<u64> {
    let patch = preset.patch();
    if image_h == 0 || image_w == 0 || !image_h.is_multiple_of(patch) || !image_w.is_multiple_of(patch) {
        return Err(Error::config(format!("image {image_h}×{image_w} not divisible by patch {patch}")));
    }
    if query_blocks > preset.depth() {
        return Err(Error::config(format!(
            "query_blocks {query_blocks} exceeds depth {}",
            preset.depth()
        )));
    }
    let n = ((image_h / patch) * (image_w / patch)) as u64;
    let c = preset.channels() as u64;
    let joint = if queries == 0 { 0 } else { query_blocks as u64 };
    let plain = preset.depth() as u64 - joint;
    let embed = 2 * n * c * 3 * (patch * patch) as u64;
    Ok(plain * block_flops(n, c) + joint * block_flops(n + queries as u64, c) + embed)
}

/// Outcome of comparing analytical and instrumented costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub analytical: CostReport,
    pub measured: Vec<StageCount>,
}

/// Runs `head` on seeded synthetic inputs (batch 1, 32-bit) and checks every
/// stage's FLOPs, traffic and peak allocation against [`head_cost_for`].
pub fn validate_against_counters(
    head: HeadKind,
    cfg: &HeadConfig,
    preset: BackbonePreset,
    queries: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if cfg.tokens() > 4096 {
        return Err(Error::config(format!("{} tokens exceeds the 4096-token validation limit", cfg.tokens())));
    }
    let analytical = head_cost_for(head, cfg, preset, queries, 1, 4)?;
    let inputs = gen_synthetic::<f32>(seed, 1, cfg.tokens(), preset.channels(), queries, 1)?;
    let mq = project_queries(&inputs.queries, &inputs.projection)?;
    let mut counter = OpCounter::new();
    run_head(head, &inputs.tokens, &mq, cfg, &mut counter)?;

    let measured = counter.stages().to_vec();
    if measured.len() != analytical.stages.len() {
        return Err(Error::CostMismatch {
            stage: "<pipeline>".into(),
            detail: format!(
                "measured stages {:?} vs modeled {:?}",
                measured.iter().map(|s| &s.stage).collect::<Vec<_>>(),
                analytical.stages.iter().map(|s| &s.stage).collect::<Vec<_>>()
            ),
        });
    }
    for (m, a) in measured.iter().zip(&analytical.stages) {
        let got = (m.stage.as_str(), m.counts.flops, m.counts.bytes_read, m.counts.bytes_written, m.counts.peak_alloc_bytes);
        let want = (a.stage.as_str(), a.flops, a.bytes_read, a.bytes_written, a.peak_activation_bytes);
        if got != want {
            return Err(Error::CostMismatch {
                stage: a.stage.clone(),
                detail: format!("measured (stage, flops, read, written, peak) = {got:?}, modeled = {want:?}"),
            });
        }
    }
    Ok(ValidationReport { analytical, measured })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(loc: UpsampleLocation, size: usize, stride: usize) -> HeadConfig {
        HeadConfig::new(loc, stride, size, size, 16).unwrap()
    }

    #[test]
    fn preset_table() {
        for p in BackbonePreset::ALL {
            assert_eq!(p.channels() % p.heads(), 0);
            assert_eq!(p.name().parse::<BackbonePreset>().unwrap(), p);
        }
        assert_eq!(BackbonePreset::VitLarge.default_query_blocks(), 6);
        assert_eq!(BackbonePreset::VitBase.default_query_blocks(), 3);
        assert!("vit-huge".parse::<BackbonePreset>().is_err());
    }

    #[test]
    fn interpolation_ratio_is_channels_over_queries() {
        let p = BackbonePreset::VitBase;
        let f = head_cost(&cfg(UpsampleLocation::Feature, 640, 4), p, 200).unwrap();
        let l = head_cost(&cfg(UpsampleLocation::Logit, 640, 4), p, 200).unwrap();
        let fi = f.stage(stage::FEATURE_RESIZE).unwrap().flops;
        let li = l.stage(stage::LOGIT_RESIZE).unwrap().flops;
        assert_eq!(fi * 200, li * 768);
    }

    #[test]
    fn no_upsampling_gives_equal_flops() {
        let c = cfg(UpsampleLocation::None, 640, 4);
        let p = BackbonePreset::VitSmall;
        let a = head_cost_for(HeadKind::ImageSpace, &c, p, 200, 1, 4).unwrap();
        let b = head_cost_for(HeadKind::TokenSpace, &c, p, 200, 1, 4).unwrap();
        assert_eq!(a.totals.flops, b.totals.flops);
        assert!(a.stages.iter().chain(&b.stages).all(|s| !s.stage.contains("resize")));
    }

    #[test]
    fn tiny_reduction_exceeds_forty_percent() {
        let p = BackbonePreset::VitTiny;
        let f = head_cost(&cfg(UpsampleLocation::Feature, 640, 4), p, 200).unwrap();
        let l = head_cost(&cfg(UpsampleLocation::Logit, 640, 4), p, 200).unwrap();
        // Hand evaluation: feature = 7·192·25600 + 2·200·192·25600,
        // logit = 2·200·1600·192 + 7·200·25600.
        assert_eq!(f.totals.flops, 34_406_400 + 1_966_080_000);
        assert_eq!(l.totals.flops, 122_880_000 + 35_840_000);
        assert!((l.totals.flops as f64) <= 0.6 * f.totals.flops as f64);
    }

    #[test]
    fn peak_memory_relations() {
        let p = BackbonePreset::VitBase;
        let f = peak_memory(&cfg(UpsampleLocation::Feature, 640, 4), p, 200, 2).unwrap();
        let l = peak_memory(&cfg(UpsampleLocation::Logit, 640, 4), p, 200, 2).unwrap();
        assert_eq!(f, 2 * 768 * 160 * 160);
        assert_eq!(l, 2 * 200 * 160 * 160);
        assert!(l < f);

        let f = peak_memory(&cfg(UpsampleLocation::Feature, 640, 16), p, 200, 4).unwrap();
        let l = peak_memory(&cfg(UpsampleLocation::Logit, 640, 16), p, 200, 4).unwrap();
        assert_eq!(f * 200, l * 768);
    }

    #[test]
    fn backbone_reduces_to_plain_vit() {
        let p = BackbonePreset::VitSmall;
        let plain = backbone_cost(p, 640, 640, 0, 3).unwrap();
        assert_eq!(plain, backbone_cost(p, 640, 640, 200, 0).unwrap());
        let (n, c) = (1600u64, 384u64);
        let expect = 12 * (2 * (12 * n * c * c + 2 * n * n * c)) + 2 * n * c * 768;
        assert_eq!(plain, expect);
        let doubled = backbone_cost(p, 640, 1280, 0, 0).unwrap();
        assert!(doubled > 2 * plain);
        assert!(backbone_cost(p, 630, 640, 0, 0).is_err());
        assert!(backbone_cost(p, 640, 640, 200, 13).is_err());
    }

    #[test]
    fn validation_catches_exact_match() {
        let c = cfg(UpsampleLocation::Feature, 128, 4);
        let r = validate_against_counters(HeadKind::ImageSpace, &c, BackbonePreset::VitTiny, 20, 0).unwrap();
        let interp = r.measured.iter().find(|s| s.stage == stage::FEATURE_RESIZE).unwrap();
        assert_eq!(interp.counts.flops, 7 * 192 * 32 * 32);
        let big = cfg(UpsampleLocation::Logit, 2048, 4);
        assert!(validate_against_counters(HeadKind::TokenSpace, &big, BackbonePreset::VitTiny, 2, 0).is_err());
    }
}
