mod alloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mimdet_core::checkpoint::{load_checkpoint, load_params, save_checkpoint};
use mimdet_core::convstem::{convstem_forward, convstem_receptive_field, ConvStemConfig};
use mimdet_core::imageio::{read_image_ppm, write_feature_pgm};
use mimdet_core::params::ParamStore;
use mimdet_core::pipeline::{evaluate_loss, forward, ModelConfig, TrainState};
use mimdet_core::report::{ParamReport, STEM_TARGET, STEM_TO_ENCODER_LIMIT};
use mimdet_core::sampler::SampleSpec;
use mimdet_core::tensor::ops;
use mimdet_core::verify::{gradient_suite, pipeline_gradient_check, synthetic_batch, GRAD_TOLERANCE};
use mimdet_core::Error;

#[global_allocator]
static GLOBAL: alloc::Counting = alloc::Counting;

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "mimdet", version, about = "Checks and demos for the hybrid ViT feature extractor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// RNG seed for parameters and sampling
    #[arg(long, env = "MIMDET_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Per-module and total parameter counts
    ReportParams {
        #[arg(long, conflicts_with = "desk")]
        full_scale: bool,
        #[arg(long)]
        desk: bool,
        /// Decoder depth (0, 1, 2, 4 or 8)
        #[arg(long)]
        decoder_depth: Option<usize>,
    },
    /// Receptive field and stride of the full-scale stem
    ReportRf,
    /// Finite-difference checks for every op and the tiny pipeline
    GradCheck {
        #[command(flatten)]
        seed: SeedArg,
        /// Check every pipeline parameter entry instead of a sample
        #[arg(long)]
        all_coords: bool,
    },
    /// Overfit the desk model on a fixed synthetic batch
    TrainDemo {
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Write the final training state here
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train at one sampling ratio, evaluate at another
    Ablate {
        #[arg(long)]
        train_ratio: f64,
        #[arg(long)]
        infer_ratio: f64,
        /// Ensemble members at evaluation
        #[arg(long, default_value_t = 1)]
        evals: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Write channel-mean PGMs for s4, s8 and P2-P5
    DumpFeatures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parameters or training state; random init when absent
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Also write a channel-variance map per level
        #[arg(long)]
        with_variance: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

fn check(ok: bool, what: impl Into<String>) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(Failure::Check(what.into()))
    }
}

fn report_params(desk: bool, decoder_depth: Option<usize>) -> Outcome {
    let base = if desk { ModelConfig::desk() } else { ModelConfig::full_scale() };
    let cfg = match decoder_depth {
        Some(d) => base.with_decoder(base.decoder.with_depth(d)),
        None => base,
    };
    cfg.validate()?;
    print!("{}", ParamReport::new(&cfg));
    let full = ParamReport::new(&ModelConfig::full_scale());
    check(
        full.stem == STEM_TARGET && full.stem_to_encoder() < STEM_TO_ENCODER_LIMIT,
        format!("full-scale stem {} (want {STEM_TARGET}), ratio {:.4}", full.stem, full.stem_to_encoder()),
    )
}

fn report_rf() -> Outcome {
    let rf = convstem_receptive_field(&ConvStemConfig::full_scale());
    println!("rf={} stride={}", rf.size, rf.stride);
    check(rf.size == 31 && rf.stride == 16, "unexpected receptive field")
}

fn grad_check(seed: u64, all_coords: bool) -> Outcome {
    let suite = gradient_suite(seed)?;
    for c in &suite.ops {
        println!("{:<20}{:<34}{:>10.2e}", c.op, c.shapes, c.report.max_rel_err);
    }
    let pipeline = if all_coords {
        pipeline_gradient_check(seed, None)?
    } else {
        suite.pipeline.clone()
    };
    println!("pipeline: {} coords, max rel err {:.2e}", pipeline.checked, pipeline.max_rel_err);
    if let Some(w) = &pipeline.worst {
        println!(
            "worst: input {} element {} analytic {:e} numeric {:e}",
            w.input, w.element, w.analytic, w.numeric
        );
    }
    let worst = suite.max_rel_err().max(pipeline.max_rel_err);
    println!("max rel err {worst:.2e} (tolerance {GRAD_TOLERANCE:e})");
    check(worst < GRAD_TOLERANCE, "gradient check above tolerance")
}

fn train_demo(steps: usize, seed: u64, ckpt: Option<&Path>) -> Outcome {
    if steps == 0 {
        return Err(Error::InvalidArgument {
            op: "train-demo",
            detail: "--steps must be at least 1".into(),
        }
        .into());
    }
    let cfg = ModelConfig::desk();
    let batch = synthetic_batch(2, 64, 64)?;
    let mut state = TrainState::new(&cfg, seed)?;
    let start = Instant::now();
    let mut first = None;
    let mut last = 0.0;
    for s in 0..steps {
        last = state.train_step(&batch, &cfg)?;
        first.get_or_insert(last);
        if s % 25 == 0 || s + 1 == steps {
            println!("step {s:>4} loss {last:.6}");
        }
    }
    let first = first.unwrap_or(last);
    println!("loss {first:.6} -> {last:.6} ({:.4}x) in {:.2?}", last / first, start.elapsed());
    if let Some(path) = ckpt {
        save_checkpoint(&state, path)?;
        println!("saved {}", path.display());
    }
    check(last < 0.3 * first, "final loss not below 0.3x initial")
}

fn ablate(train_ratio: f64, infer_ratio: f64, evals: usize, steps: usize, seed: u64) -> Outcome {
    let cfg = ModelConfig::desk().with_train_spec(SampleSpec::random(train_ratio, seed));
    SampleSpec::random(infer_ratio, seed).validate()?;
    let batch = synthetic_batch(2, 64, 64)?;
    let mut state = TrainState::new(&cfg, seed)?;

    alloc::reset_peak();
    let t = Instant::now();
    for _ in 0..steps {
        state.train_step(&batch, &cfg)?;
    }
    let train_time = t.elapsed();
    let train_peak = alloc::peak_bytes();

    alloc::reset_peak();
    let t = Instant::now();
    let loss = evaluate_loss(&batch, &cfg, &state.params, infer_ratio, evals, seed.wrapping_add(1 << 32))?;
    let eval_time = t.elapsed();
    let eval_peak = alloc::peak_bytes();

    println!("train_ratio={train_ratio} infer_ratio={infer_ratio} evals={evals} steps={steps}");
    println!("train: {train_time:.2?}, peak {:.1} MiB", mib(train_peak));
    println!("eval:  {eval_time:.2?}, peak {:.1} MiB", mib(eval_peak));
    println!("loss={loss:.6}");
    Ok(())
}

fn mib(bytes: usize) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

fn load_any(path: &Path) -> mimdet_core::Result<ParamStore> {
    let store = load_params(path)?;
    if store.contains("state.step") {
        Ok(load_checkpoint(path)?.params)
    } else {
        Ok(store)
    }
}

fn dump_features(input: &Path, out: &Path, ckpt: Option<&Path>, with_variance: bool, seed: u64) -> Outcome {
    let cfg = ModelConfig::desk();
    let params = match ckpt {
        Some(p) => load_any(p)?,
        None => cfg.init_params(seed)?,
    };
    params.matches_specs(&cfg.param_specs())?;
    let image = read_image_ppm(input)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let stem = convstem_forward(&image, &cfg.convstem, &params)?;
    let pyramid = forward(&image, &cfg, &params, &SampleSpec::full())?;
    let maps = [
        ("s4", &stem.s4),
        ("s8", &stem.s8),
        ("p2", &pyramid.p2),
        ("p3", &pyramid.p3),
        ("p4", &pyramid.p4),
        ("p5", &pyramid.p5),
    ];
    for (name, map) in maps {
        let first = ops::narrow(map, 0, 0, 1)?;
        for path in write_feature_pgm(&first, out, name, with_variance)? {
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::ReportParams { desk, decoder_depth, .. } => report_params(desk, decoder_depth),
        Command::ReportRf => report_rf(),
        Command::GradCheck { seed, all_coords } => grad_check(seed.seed, all_coords),
        Command::TrainDemo { steps, seed, ckpt } => train_demo(steps, seed.seed, ckpt.as_deref()),
        Command::Ablate {
            train_ratio,
            infer_ratio,
            evals,
            steps,
            seed,
        } => ablate(train_ratio, infer_ratio, evals, steps, seed.seed),
        Command::DumpFeatures {
            input,
            out,
            ckpt,
            with_variance,
            seed,
        } => dump_features(&input, &out, ckpt.as_deref(), with_variance, seed.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Run(e @ Error::InvalidArgument { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
