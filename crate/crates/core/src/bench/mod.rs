//! Deterministic benchmark harness.
//!
//! Only the mask head is timed: queries are projected once up front and the
//! ViT forward is never executed (its FLOPs appear in reports as a modeled
//! figure). Timings use a monotonic clock and are summarized by median, min,
//! max and interquartile range over at least three repetitions.

mod report;
mod synth;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use report::{emit_report, render_report, ReportFile, ReportFormat, ReportRow, SCHEMA_VERSION};
pub use synth::{checksum, gen_synthetic, SyntheticInputs};

use crate::cost::{backbone_cost, head_cost_for, BackbonePreset, CostReport};
use crate::error::{Error, Result};
use crate::heads::{image_space_head, project_queries, run_head, token_space_head, HeadConfig, HeadKind, UpsampleLocation};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, OpCounter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub preset: BackbonePreset,
    pub image_h: usize,
    pub image_w: usize,
    pub queries: usize,
    /// Head variants to run on the same inputs. `feature` runs the
    /// image-space head, `logit` and `none` the token-space head.
    pub variants: Vec<UpsampleLocation>,
    pub output_stride: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl BenchConfig {
    /// Batch 1, 3 repetitions, 1 warmup, 32-bit, feature vs logit.
    pub fn new(preset: BackbonePreset, image: usize, queries: usize, output_stride: usize) -> Self {
        Self {
            preset,
            image_h: image,
            image_w: image,
            queries,
            variants: vec![UpsampleLocation::Feature, UpsampleLocation::Logit],
            output_stride,
            batch: 1,
            repetitions: 3,
            warmup: 1,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn head_config(&self, location: UpsampleLocation) -> Result<HeadConfig> {
        HeadConfig::new(location, self.output_stride, self.image_h, self.image_w, self.preset.patch())
    }

    /// Checks every constraint before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::config(format!("repetitions must be >= 3, got {}", self.repetitions)));
        }
        if self.variants.is_empty() {
            return Err(Error::config("at least one head variant is required"));
        }
        if self.queries == 0 || self.batch == 0 {
            return Err(Error::config("queries and batch must be >= 1"));
        }
        for &v in &self.variants {
            self.head_config(v)?;
        }
        Ok(())
    }
}

/// Wall-time summary in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub repetitions: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub iqr_ms: f64,
}

impl TimingStats {
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            repetitions: s.len(),
            median_ms: quantile(&s, 0.5),
            min_ms: s[0],
            max_ms: s[s.len() - 1],
            iqr_ms: quantile(&s, 0.75) - quantile(&s, 0.25),
        }
    }

    /// Executions per second at the median.
    pub fn throughput(&self) -> f64 {
        if self.median_ms > 0.0 {
            1e3 / self.median_ms
        } else {
            f64::INFINITY
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub upsample_location: UpsampleLocation,
    pub head: HeadKind,
    pub timing: TimingStats,
    pub throughput: f64,
    pub head_gflops: f64,
    pub peak_bytes: u64,
    pub cost: CostReport,
    /// Largest |difference| against the comparable variant: feature vs logit
    /// when both ran, image- vs token-space head for `none`.
    pub max_deviation: Option<f64>,
    /// FNV checksum of the head output.
    pub output_checksum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub variants: Vec<VariantResult>,
    /// Analytical backbone FLOPs (not executed).
    pub backbone_gflops_modeled: f64,
}

impl BenchResult {
    pub fn variant(&self, location: UpsampleLocation) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.upsample_location == location)
    }
}

/// Warmup then timed repetitions of each requested variant on identical inputs.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

struct Executed<T> {
    location: UpsampleLocation,
    head: HeadKind,
    samples_ms: Vec<f64>,
    cost: CostReport,
    output: DenseTensor<T>,
}

fn run_typed<T: Scalar>(cfg: &BenchConfig) -> Result<BenchResult> {
    let c = cfg.preset.channels();
    let n = cfg.head_config(cfg.variants[0])?.tokens();
    let inputs = gen_synthetic::<T>(cfg.seed, cfg.batch, n, c, cfg.queries, 1)?;
    let mq = project_queries(&inputs.queries, &inputs.projection)?;

    let mut runs: Vec<Executed<T>> = Vec::with_capacity(cfg.variants.len());
    for &location in &cfg.variants {
        let hc = cfg.head_config(location)?;
        let head = location.head();
        let cost = head_cost_for(head, &hc, cfg.preset, cfg.queries, cfg.batch, T::BYTES)?;
        for _ in 0..cfg.warmup {
            run_head(head, &inputs.tokens, &mq, &hc, &mut OpCounter::new())?;
        }
        let mut samples_ms = Vec::with_capacity(cfg.repetitions);
        let mut last = None;
        for _ in 0..cfg.repetitions {
            let mut counter = OpCounter::new();
            let start = Instant::now();
            let out = run_head(head, &inputs.tokens, &mq, &hc, &mut counter)?;
            samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
            if counter.flops() != cost.totals.flops {
                return Err(Error::CostMismatch {
                    stage: "<total>".into(),
                    detail: format!("measured {} FLOPs, modeled {}", counter.flops(), cost.totals.flops),
                });
            }
            last = Some(out);
        }
        runs.push(Executed { location, head, samples_ms, cost, output: last.expect("repetitions >= 3") });
    }

    let deviations = deviations(&runs, &inputs.tokens, &mq, cfg)?;
    let backbone = backbone_cost(
        cfg.preset,
        cfg.image_h,
        cfg.image_w,
        cfg.queries,
        cfg.preset.default_query_blocks(),
    )?;
    let variants = runs
        .into_iter()
        .zip(deviations)
        .map(|(r, max_deviation)| {
            let timing = TimingStats::from_samples(&r.samples_ms);
            VariantResult {
                upsample_location: r.location,
                head: r.head,
                throughput: timing.throughput(),
                timing,
                head_gflops: r.cost.gflops(),
                peak_bytes: r.cost.totals.peak_activation_bytes,
                cost: r.cost,
                max_deviation,
                output_checksum: checksum(&r.output),
            }
        })
        .collect();
    Ok(BenchResult { config: cfg.clone(), variants, backbone_gflops_modeled: backbone as f64 / 1e9 })
}

fn deviations<T: Scalar>(
    runs: &[Executed<T>],
    tokens: &DenseTensor<T>,
    mq: &DenseTensor<T>,
    cfg: &BenchConfig,
) -> Result<Vec<Option<f64>>> {
    let find = |loc| runs.iter().find(|r| r.location == loc);
    let pair = match (find(UpsampleLocation::Feature), find(UpsampleLocation::Logit)) {
        (Some(f), Some(l)) => f.output.max_abs_diff(&l.output),
        _ => None,
    };
    runs.iter()
        .map(|r| match r.location {
            UpsampleLocation::Feature | UpsampleLocation::Logit => Ok(pair),
            UpsampleLocation::None => {
                let hc = cfg.head_config(UpsampleLocation::None)?;
                let image = image_space_head(tokens, mq, &hc, &mut OpCounter::new())?;
                let token = token_space_head(tokens, mq, &hc, &mut OpCounter::new())?;
                Ok(image.max_abs_diff(&token))
            }
        })
        .collect()
}

/// Upsampling ablation over presets × {feature, logit, none}: one result
/// (three rows) per preset.
pub fn sweep_upsample(
    presets: &[BackbonePreset],
    image: usize,
    queries: usize,
    output_stride: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    presets
        .iter()
        .map(|&preset| {
            let cfg = BenchConfig {
                variants: UpsampleLocation::ALL.to_vec(),
                repetitions,
                seed,
                ..BenchConfig::new(preset, image, queries, output_stride)
            };
            run_bench(&cfg)
        })
        .collect()
}

/// Output-stride sweep of the token-space head with logit upsampling.
pub fn sweep_stride(
    preset: BackbonePreset,
    image: usize,
    queries: usize,
    strides: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    let configs: Vec<BenchConfig> = strides
        .iter()
        .map(|&stride| BenchConfig {
            variants: vec![UpsampleLocation::Logit],
            repetitions,
            seed,
            ..BenchConfig::new(preset, image, queries, stride)
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    configs.iter().map(run_bench).collect()
}
