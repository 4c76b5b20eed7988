use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskhead::bench::{
    gen_synthetic, render_report, run_bench, sweep_stride, sweep_upsample, BenchConfig, Precision, ReportFormat,
};
use maskhead::cost::{backbone_cost, head_cost, validate_against_counters, BackbonePreset, CostReport};
use maskhead::decode::{instance_decode, panoptic_decode, semantic_decode, InstanceConfig, PanopticConfig};
use maskhead::heads::{image_space_head, project_queries, token_space_head, HeadConfig, HeadKind, UpsampleLocation};
use maskhead::{Error, OpCounter, Result, Tensor64};

#[derive(Parser, Debug)]
#[command(name = "maskhead-bench", version, about = "Benchmark and cost model for image-space vs token-space mask heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Upsample {
    Feature,
    Logit,
    None,
}

impl From<Upsample> for UpsampleLocation {
    fn from(u: Upsample) -> Self {
        match u {
            Upsample::Feature => UpsampleLocation::Feature,
            Upsample::Logit => UpsampleLocation::Logit,
            Upsample::None => UpsampleLocation::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    /// Presets × {feature, logit, none}.
    Upsample,
    /// Output strides 1, 4, 8, 16 with logit upsampling.
    Stride,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(clap::Args, Debug)]
struct Output {
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time both heads on one configuration.
    Bench {
        #[arg(long, default_value = "vit-small", value_parser = parse_preset)]
        preset: BackbonePreset,
        /// Square size (640) or HxW (640x512).
        #[arg(long, default_value = "640", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 200)]
        queries: usize,
        /// Variants to run, comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "feature,logit")]
        upsample: Vec<Upsample>,
        #[arg(long, default_value_t = 4, value_parser = parse_stride)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        #[command(flatten)]
        output: Output,
    },
    /// Ablation sweeps shaped like the upsampling and output-stride tables.
    Sweep {
        #[arg(long, value_enum, default_value = "upsample")]
        kind: SweepKind,
        /// Presets for the upsample sweep (all four by default), or the single
        /// preset for the stride sweep (vit-small by default).
        #[arg(long, value_parser = parse_preset, value_delimiter = ',')]
        preset: Vec<BackbonePreset>,
        #[arg(long, default_value = "640", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 200)]
        queries: usize,
        /// Output stride for the upsample sweep.
        #[arg(long, default_value_t = 4, value_parser = parse_stride)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Analytical head cost (and modeled backbone FLOPs) for one configuration.
    Cost {
        #[arg(long, default_value = "vit-small", value_parser = parse_preset)]
        preset: BackbonePreset,
        #[arg(long, default_value = "640", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, value_enum, default_value = "logit")]
        upsample: Upsample,
        #[arg(long, default_value_t = 4, value_parser = parse_stride)]
        stride: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Run the token-space head on synthetic inputs and decode the masks.
    DecodeDemo {
        #[arg(long, default_value = "vit-tiny", value_parser = parse_preset)]
        preset: BackbonePreset,
        #[arg(long, default_value = "64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 10)]
        queries: usize,
        /// Number of categories K.
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, value_enum, default_value = "logit")]
        upsample: Upsample,
        #[arg(long, default_value_t = 16, value_parser = parse_stride)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick built-in consistency checks; nonzero exit on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_preset(s: &str) -> std::result::Result<BackbonePreset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("invalid size `{s}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

fn parse_stride(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (1 | 4 | 8 | 16)) => Ok(v),
        _ => Err(format!("stride must be one of 1, 4, 8, 16 (got `{s}`)")),
    }
}

fn write_out(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CostOutput {
    schema_version: u32,
    report: CostReport,
    backbone_flops_modeled: u64,
}

fn cost_csv(out: &CostOutput) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "flops", "bytes_read", "bytes_written", "peak_activation_bytes"])?;
    for s in &out.report.stages {
        w.write_record([
            s.stage.clone(),
            s.flops.to_string(),
            s.bytes_read.to_string(),
            s.bytes_written.to_string(),
            s.peak_activation_bytes.to_string(),
        ])?;
    }
    let t = &out.report.totals;
    w.write_record([
        "total".to_owned(),
        t.flops.to_string(),
        t.bytes_read.to_string(),
        t.bytes_written.to_string(),
        t.peak_activation_bytes.to_string(),
    ])?;
    w.write_record(["backbone_modeled".to_owned(), out.backbone_flops_modeled.to_string(), String::new(), String::new(), String::new()])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct InstanceSummary {
    query: usize,
    category: usize,
    score: f64,
    area: usize,
}

fn decode_demo(
    preset: BackbonePreset,
    (h, w): (usize, usize),
    queries: usize,
    classes: usize,
    upsample: UpsampleLocation,
    stride: usize,
    seed: u64,
) -> Result<String> {
    let cfg = HeadConfig::new(upsample, stride, h, w, preset.patch())?;
    let inputs = gen_synthetic::<f32>(seed, 1, cfg.tokens(), preset.channels(), queries, classes)?;
    let mq = project_queries(&inputs.queries, &inputs.projection)?;
    let mut counter = OpCounter::new();
    let masks = match upsample.head() {
        HeadKind::ImageSpace => image_space_head(&inputs.tokens, &mq, &cfg, &mut counter)?,
        HeadKind::TokenSpace => token_space_head(&inputs.tokens, &mq, &cfg, &mut counter)?,
    };
    let semantic = semantic_decode(&masks, &inputs.classes)?.remove(0);
    let panoptic = panoptic_decode(&masks, &inputs.classes, &PanopticConfig::default())?.remove(0);
    let instances: Vec<InstanceSummary> = instance_decode(&masks, &inputs.classes, &InstanceConfig { top_k: 10, mask_threshold: 0.5 })?
        .remove(0)
        .into_iter()
        .map(|i| InstanceSummary {
            query: i.query,
            category: i.category,
            score: i.score,
            area: i.mask.iter().filter(|&&m| m).count(),
        })
        .collect();
    let doc = serde_json::json!({
        "schema_version": maskhead::bench::SCHEMA_VERSION,
        "head": upsample.head(),
        "mask_shape": masks.shape(),
        "head_flops": counter.flops(),
        "semantic": semantic,
        "panoptic": panoptic,
        "instances": instances,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn selftest(seed: u64) -> bool {
    let mut ok = true;
    let mut check = |name: &str, result: Result<bool>| {
        let pass = matches!(result, Ok(true));
        match &result {
            Err(e) => println!("FAIL {name}: {e}"),
            Ok(_) => println!("{} {name}", if pass { "PASS" } else { "FAIL" }),
        }
        ok &= pass;
    };

    check("patch-grid equivalence (f64, bitwise)", (|| {
        let cfg = HeadConfig::new(UpsampleLocation::None, 4, 64, 64, 16)?;
        let s = gen_synthetic::<f64>(seed, 1, cfg.tokens(), 12, 7, 1)?;
        let mq = project_queries(&s.queries, &s.projection)?;
        let a: Tensor64 = image_space_head(&s.tokens, &mq, &cfg, &mut OpCounter::new())?;
        let b = token_space_head(&s.tokens, &mq, &cfg, &mut OpCounter::new())?;
        Ok(a == b)
    })());

    check("feature/logit commutation (f32, 1e-4)", (|| {
        let f = HeadConfig::new(UpsampleLocation::Feature, 4, 128, 128, 16)?;
        let l = HeadConfig { upsample_location: UpsampleLocation::Logit, ..f };
        let s = gen_synthetic::<f32>(seed, 1, f.tokens(), 16, 8, 1)?;
        let mq = project_queries(&s.queries, &s.projection)?;
        let a = image_space_head(&s.tokens, &mq, &f, &mut OpCounter::new())?;
        let b = token_space_head(&s.tokens, &mq, &l, &mut OpCounter::new())?;
        Ok(a.max_abs_diff(&b).is_some_and(|d| d <= 1e-4))
    })());

    for preset in BackbonePreset::ALL {
        for loc in [UpsampleLocation::Feature, UpsampleLocation::Logit] {
            check(&format!("counter validation {preset} {loc}"), (|| {
                let cfg = HeadConfig::new(loc, 4, 128, 128, 16)?;
                validate_against_counters(loc.head(), &cfg, preset, 100, seed).map(|_| true)
            })());
        }
    }

    check("cost ordering vit-base 640 stride 4", (|| {
        let f = head_cost(&HeadConfig::new(UpsampleLocation::Feature, 4, 640, 640, 16)?, BackbonePreset::VitBase, 200)?;
        let l = head_cost(&HeadConfig::new(UpsampleLocation::Logit, 4, 640, 640, 16)?, BackbonePreset::VitBase, 200)?;
        Ok(l.totals.flops < f.totals.flops && l.totals.peak_activation_bytes < f.totals.peak_activation_bytes)
    })());
    ok
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Bench { preset, size, queries, upsample, stride, seed, reps, warmup, batch, precision, output } => {
            let cfg = BenchConfig {
                preset,
                image_h: size.0,
                image_w: size.1,
                queries,
                variants: upsample.into_iter().map(Into::into).collect(),
                output_stride: stride,
                batch,
                repetitions: reps,
                warmup,
                seed,
                precision: match precision {
                    PrecisionArg::F32 => Precision::F32,
                    PrecisionArg::F64 => Precision::F64,
                },
            };
            let result = run_bench(&cfg)?;
            write_out(&render_report(&[result], output.format.into())?, output.out.as_ref())?;
        }
        Command::Sweep { kind, preset, size, queries, stride, seed, reps, output } => {
            if size.0 != size.1 {
                return Err(Error::Config("sweeps use square inputs".into()));
            }
            let results = match kind {
                SweepKind::Upsample => {
                    let presets = if preset.is_empty() { BackbonePreset::ALL.to_vec() } else { preset };
                    sweep_upsample(&presets, size.0, queries, stride, reps, seed)?
                }
                SweepKind::Stride => {
                    let p = match preset.as_slice() {
                        [] => BackbonePreset::VitSmall,
                        [p] => *p,
                        _ => return Err(Error::Config("stride sweep takes a single preset".into())),
                    };
                    sweep_stride(p, size.0, queries, &[1, 4, 8, 16], reps, seed)?
                }
            };
            write_out(&render_report(&results, output.format.into())?, output.out.as_ref())?;
        }
        Command::Cost { preset, size, queries, upsample, stride, output } => {
            let cfg = HeadConfig::new(upsample.into(), stride, size.0, size.1, preset.patch())?;
            let out = CostOutput {
                schema_version: maskhead::bench::SCHEMA_VERSION,
                report: head_cost(&cfg, preset, queries)?,
                backbone_flops_modeled: backbone_cost(preset, size.0, size.1, queries, preset.default_query_blocks())?,
            };
            let text = match output.format {
                Format::Json => serde_json::to_string_pretty(&out)? + "\n",
                Format::Csv => cost_csv(&out)?,
            };
            write_out(&text, output.out.as_ref())?;
        }
        Command::DecodeDemo { preset, size, queries, classes, upsample, stride, seed, out } => {
            let text = decode_demo(preset, size, queries, classes, upsample.into(), stride, seed)?;
            write_out(&text, out.as_ref())?;
        }
        Command::Selftest { seed } => {
            return Ok(if selftest(seed) { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
