use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dart_core::harness::{
    self, eval_suite, train, verify_prop1, EvalMetric, Objective, TrainConfig,
};
use dart_core::losses::ResSpec;
use dart_core::model::{build_mask, Condition, ModelConfig, ParamStore, Variant};
use dart_core::sampler::{
    sample_dart, sample_dart_ar, sample_dart_fm, sample_kaleido, sample_markov_baseline,
    sample_matryoshka, GuidanceSchedule, GuidanceSpec, SamplerOpts,
};
use dart_core::schedule::{cosine_markov, schedule_table};
use dart_core::tensor::{unpatchify, Tensor};

#[derive(Parser)]
#[command(name = "dart", about = "Non-Markovian denoising autoregressive models", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaseArg {
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Dart,
    Ar,
    Fm,
    Matryoshka,
    Kaleido,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum CfgScheduleArg {
    Constant,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Swd,
    Mse,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the noise-schedule table {t, ᾱ_t, γ_t, η_t, η̄_t, ω_t, ρ_t}.
    Schedule {
        #[arg(long = "T")]
        t: usize,
        #[arg(long, value_enum, default_value = "cosine")]
        base: BaseArg,
        /// Write the JSON array here instead of stdout.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Print the attention-visibility matrix as rows of 0/1.
    Masks {
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "K")]
        k: usize,
        #[arg(long, value_enum, default_value = "dart")]
        variant: VariantArg,
    },
    /// Train from a JSON configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, default_value_t = 16)]
        num: usize,
        #[arg(long = "cfg-scale", default_value_t = 1.0)]
        cfg_scale: f64,
        #[arg(long = "cfg-schedule", value_enum, default_value = "constant")]
        cfg_schedule: CfgScheduleArg,
        #[arg(long = "fm-steps", default_value_t = 100)]
        fm_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sample with the EMA weights instead of the raw ones.
        #[arg(long, default_value_t = false)]
        ema: bool,
        /// Class id for class-conditioned checkpoints.
        #[arg(long)]
        class: Option<usize>,
        /// Decoding temperature for discrete prefixes (0 = argmax).
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Sampling steps for the Markov baseline.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score generated samples against held-out data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long, default_value_t = 1024)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ema: bool,
        /// Sampling steps for the Markov baseline.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the schedule-identity verification suite.
    Verify {
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "N", default_value_t = 200_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Schedule { t, base: _, emit } => {
            let m = cosine_markov(t)?;
            let rows = schedule_table(&m)?;
            let json = serde_json::to_string_pretty(&rows)?;
            match emit {
                Some(path) => std::fs::write(&path, json)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
        }
        Command::Masks { t, k, variant } => {
            let variant = match variant {
                VariantArg::Ar => Variant::DartAr,
                _ => Variant::Dart,
            };
            let mut cfg = ModelConfig::point_model(2, t, 64, 1);
            cfg.tokens_per_level = k;
            cfg.grid = (1, k);
            cfg.variant = variant;
            for row in build_mask(&cfg).rows_as_strings() {
                println!("{row}");
            }
        }
        Command::Train { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg: TrainConfig = serde_json::from_str(&text).context("parsing config")?;
            let out = train(&cfg)?;
            let report = serde_json::json!({
                "steps_run": out.steps_run,
                "final": out.final_report,
                "out_dir": cfg.out_dir,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sample {
            ckpt,
            variant,
            num,
            cfg_scale,
            cfg_schedule,
            fm_steps,
            seed,
            out,
            ema,
            class,
            temperature,
            steps,
        } => {
            let (cfg, params) = load_checkpoint(&ckpt, ema)?;
            let opts = SamplerOpts {
                guidance: GuidanceSpec {
                    scale: cfg_scale,
                    schedule: match cfg_schedule {
                        CfgScheduleArg::Constant => GuidanceSchedule::Constant,
                        CfgScheduleArg::Linear => GuidanceSchedule::Linear,
                    },
                },
                seed,
                fm_steps,
                temperature,
                num_threads: cfg.threads(),
                ..Default::default()
            };
            let condition = match class {
                Some(id) => Condition::Class(id),
                None => Condition::None,
            };
            let gamma = cfg.schedule.gamma()?;
            std::fs::create_dir_all(&out)?;
            let variant = variant.unwrap_or(match cfg.objective {
                Objective::Dart => VariantArg::Dart,
                Objective::DartAr => VariantArg::Ar,
                Objective::DartFm => VariantArg::Fm,
                Objective::MarkovBaseline => VariantArg::Baseline,
                Objective::Kaleido => VariantArg::Kaleido,
                Objective::Matryoshka => VariantArg::Matryoshka,
            });
            match variant {
                VariantArg::Dart => {
                    let grids = sample_dart(&params, &cfg.model, &gamma, condition, &opts, num)?;
                    write_outputs(&cfg, &grids, &out, None)?;
                }
                VariantArg::Ar => {
                    let res = sample_dart_ar(&params, &cfg.model, &gamma, condition, &opts, num)?;
                    let grids: Vec<Tensor<f32>> = res.into_iter().map(|s| s.output).collect();
                    write_outputs(&cfg, &grids, &out, None)?;
                }
                VariantArg::Fm => {
                    let grids = sample_dart_fm(&params, &cfg.model, &gamma, condition, &opts, num)?;
                    write_outputs(&cfg, &grids, &out, None)?;
                }
                VariantArg::Baseline => {
                    let markov = cfg.schedule.markov()?;
                    let grids = sample_markov_baseline(
                        &params,
                        &cfg.model,
                        &markov,
                        steps.unwrap_or(cfg.schedule.t),
                        condition,
                        &opts,
                        num,
                    )?;
                    write_outputs(&cfg, &grids, &out, None)?;
                }
                VariantArg::Matryoshka => {
                    let specs = harness::matryoshka_specs(&cfg)?;
                    let res =
                        sample_matryoshka(&params, &cfg.model, &specs, condition, &opts, num)?;
                    for (ri, spec) in specs.iter().enumerate() {
                        let grids: Vec<Tensor<f32>> =
                            res.iter().map(|s| s.outputs[ri].clone()).collect();
                        write_outputs(&cfg, &grids, &out, Some((ri, spec)))?;
                    }
                }
                VariantArg::Kaleido => {
                    let res = sample_kaleido(&params, &cfg.model, &gamma, None, &opts, num)?;
                    let mut lines = Vec::new();
                    let grids: Vec<Tensor<f32>> =
                        res.iter().map(|s| s.image.clone()).collect();
                    for (i, s) in res.iter().enumerate() {
                        lines.push(serde_json::json!({
                            "index": i,
                            "tokens": s.tokens,
                            "truncated": s.truncated,
                        }));
                    }
                    std::fs::write(
                        out.join("tokens.json"),
                        serde_json::to_string_pretty(&lines)?,
                    )?;
                    write_outputs(&cfg, &grids, &out, None)?;
                }
            }
            println!(
                "{}",
                serde_json::json!({"written": num, "out": out}).to_string()
            );
        }
        Command::Eval {
            ckpt,
            metric,
            num,
            seed,
            ema,
            steps,
            out,
        } => {
            let (cfg, params) = load_checkpoint(&ckpt, ema)?;
            let metric = match metric {
                MetricArg::Swd => EvalMetric::Swd,
                MetricArg::Mse => EvalMetric::Mse,
            };
            let report = eval_suite(&cfg, &params, metric, num, seed, steps)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
        Command::Verify { t, n, seed, out } => {
            let report = verify_prop1(t, n, seed)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            if !report.pass {
                bail!("verification failed");
            }
        }
    }
    Ok(())
}

fn load_checkpoint(dir: &Path, ema: bool) -> Result<(TrainConfig, ParamStore<f32>)> {
    let state: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)
            .context("reading state.json")?;
    let cfg: TrainConfig =
        serde_json::from_value(state["config"].clone()).context("parsing checkpoint config")?;
    let stem = if ema { "ema" } else { "weights" };
    let params = ParamStore::<f32>::load(dir, stem)?;
    Ok((cfg, params))
}

/// Token grids land as PPM images when the model is image-backed, otherwise
/// as a JSON array of vectors.
fn write_outputs(
    cfg: &TrainConfig,
    grids: &[Tensor<f32>],
    out: &Path,
    res: Option<(usize, &ResSpec)>,
) -> Result<()> {
    let geom = image_geometry(cfg, res.map(|(_, s)| s));
    match geom {
        Some((c0, h, w, patch)) => {
            for (i, g) in grids.iter().enumerate() {
                let img = unpatchify(g, c0, h, w, patch)?;
                let name = match res {
                    Some((ri, _)) => format!("sample_{i:04}_res{ri}.ppm"),
                    None => format!("sample_{i:04}.ppm"),
                };
                write_ppm(&out.join(name), &img)?;
            }
        }
        None => {
            let rows: Vec<Vec<f32>> = grids.iter().map(|g| g.data.clone()).collect();
            let name = match res {
                Some((ri, _)) => format!("samples_res{ri}.json"),
                None => "samples.json".to_string(),
            };
            std::fs::write(out.join(name), serde_json::to_string(&rows)?)?;
        }
    }
    Ok(())
}

fn image_geometry(
    cfg: &TrainConfig,
    res: Option<&ResSpec>,
) -> Option<(usize, usize, usize, usize)> {
    use dart_core::harness::DatasetSpec;
    let patch = cfg.model.patch_size;
    match (&cfg.dataset, res) {
        (DatasetSpec::TinyGrid { channels, .. }, Some(spec)) => {
            let (gh, gw) = spec.grid;
            Some((*channels, gh * patch, gw * patch, patch))
        }
        (DatasetSpec::TinyGrid {
            channels,
            height,
            width,
            ..
        }, None) => Some((*channels, *height, *width, patch)),
        (DatasetSpec::TokenGrammar { grid, .. }, _) => Some((1, *grid, *grid, patch)),
        _ => None,
    }
}

/// Binary PPM: magic "P6", maxval 255, row-major RGB. Single-channel data is
/// replicated to RGB. Values map linearly with ±2σ of the normalized data
/// spanning the byte range.
fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c0, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    if c0 != 1 && c0 != 3 {
        bail!("PPM writer supports 1 or 3 channels, got {}", c0);
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", w, h)?;
    let to_byte = |v: f32| -> u8 { (127.5 + 63.75 * v).clamp(0.0, 255.0) as u8 };
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let src = if c0 == 1 { 0 } else { ch };
                buf.push(to_byte(img.data[src * h * w + i * w + j]));
            }
        }
    }
    f.write_all(&buf)?;
    Ok(())
}
