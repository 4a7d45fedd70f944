use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mfgan_core::config::{read_config_file, RunConfig, SEED_ENV};
use mfgan_core::data::{sample_noise, seeded_rng};
use mfgan_core::error::Error;
use mfgan_core::metrics::{export_samples, moment_errors};
use mfgan_core::networks::{evaluate, load_checkpoint, load_checkpoint_for, MlpSpec, OutputHead};
use mfgan_core::trainer::{checkpoint_dir, derive_seed, Trainer};
use mfgan_core::verify::{self, VerifyOptions};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mfgan", version, about = "Mean-field-game GAN training", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/potential pair.
    Train(TrainArgs),
    /// Write generated points at time t from a generator checkpoint.
    Sample(SampleArgs),
    /// Score a generator checkpoint against the experiment's target.
    Eval(EvalArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
}

/// Run configuration sources. Each flag overrides the key of the same name
/// (with `-` for `_`) from `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    outer_steps: Option<String>,
    #[arg(long)]
    inner_steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr_gen: Option<String>,
    #[arg(long)]
    lr_disc: Option<String>,
    #[arg(long)]
    adam_beta1: Option<String>,
    #[arg(long)]
    adam_beta2: Option<String>,
    #[arg(long)]
    adam_eps: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    eval_samples: Option<String>,
    #[arg(long)]
    record_wall_clock: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    gen_hidden: Option<String>,
    #[arg(long)]
    disc_hidden: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    target_center: Option<String>,
    #[arg(long)]
    mnist_path: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(path) => read_config_file(path)?,
            None => Vec::new(),
        };
        let flags = [
            ("experiment", &self.experiment),
            ("outer_steps", &self.outer_steps),
            ("inner_steps", &self.inner_steps),
            ("batch_size", &self.batch_size),
            ("lr_gen", &self.lr_gen),
            ("lr_disc", &self.lr_disc),
            ("adam_beta1", &self.adam_beta1),
            ("adam_beta2", &self.adam_beta2),
            ("adam_eps", &self.adam_eps),
            ("q", &self.q),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("checkpoint_every", &self.checkpoint_every),
            ("eval_samples", &self.eval_samples),
            ("record_wall_clock", &self.record_wall_clock),
            ("gen_hidden", &self.gen_hidden),
            ("disc_hidden", &self.disc_hidden),
            ("dim", &self.dim),
            ("target_center", &self.target_center),
            ("mnist_path", &self.mnist_path),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        }
        let env_seed = std::env::var(SEED_ENV).ok();
        Ok(RunConfig::from_pairs(&pairs, env_seed.as_deref())?)
    }

    fn is_empty(&self) -> bool {
        self.config.is_none() && self.experiment.is_none()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint directory (`<out>/checkpoints/step_N`).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-evaluation progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Generator checkpoint (`gen.ckpt`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Output CSV path.
    #[arg(long = "out")]
    output: PathBuf,
    /// Output head; defaults to the experiment's (sigmoid for mnist, else affine).
    #[arg(long, value_parser = ["affine", "sigmoid"])]
    head: Option<String>,
    /// Noise seed; falls back to MFGAN_SEED, then 0.
    #[arg(long)]
    noise_seed: Option<u64>,
    /// When given, the checkpoint must match this experiment's generator.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Generator checkpoint (`gen.ckpt`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these suites (gradcheck, legendre, adam, w2).
    #[arg(long = "suite")]
    suites: Vec<String>,
    /// Test hook: perturb the Hamiltonian exponent by this amount.
    #[arg(long, hide = true)]
    corrupt_exponent: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error:usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = if e.is::<VerifyFailed>() {
                "verify"
            } else {
                e.chain()
                    .find_map(|c| c.downcast_ref::<Error>())
                    .map(Error::category)
                    .unwrap_or("runtime")
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error:{category}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn noise_seed(explicit: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("invalid {SEED_ENV} value `{v}`")).into()),
        Err(_) => Ok(0),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve()?;
    let data = cfg.data_source()?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let effective = out.join("effective_config");
    std::fs::write(&effective, cfg.to_config_text()).map_err(|e| Error::io(&effective, e))?;

    let mut trainer = match &args.resume {
        Some(dir) => Trainer::resume(cfg.train.clone(), cfg.gen_spec(), cfg.disc_spec(), data.as_ref(), dir)?,
        None => Trainer::new(cfg.train.clone(), cfg.gen_spec(), cfg.disc_spec(), data.as_ref())?,
    };
    let quiet = args.quiet;
    let eval_every = cfg.train.eval_every;
    let mut observer = |r: &mfgan_core::trainer::StepReport| {
        if !quiet && r.step % eval_every == 0 {
            eprintln!(
                "step {:>7}  loss {:+.5}  (interior {:+.5}, terminal {:+.5}, initial {:+.5})",
                r.step,
                r.generator_loss.total,
                r.generator_loss.interior,
                r.generator_loss.terminal,
                r.generator_loss.initial
            );
        }
    };
    let outcome = trainer.run(&out, &mut observer)?;

    let (gen_spec, gen) = trainer.generator();
    let n = cfg.train.eval_samples;
    let mut rng = seeded_rng(derive_seed(cfg.train.seed, 0x5A));
    let z = sample_noise(n, cfg.dim, &mut rng)?;
    export_samples(gen_spec, gen, &z, 0.0, &out.join("samples_t0.csv"))?;
    export_samples(gen_spec, gen, &z, 1.0, &out.join("samples_t1.csv"))?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} mean_err {:.4} cov_err {:.4} w2 {:.4} hjb_residual {:.4}",
            last.step, last.mean_err, last.cov_err, last.w2, last.hjb_residual
        );
    }
    println!(
        "wrote {} (checkpoint {})",
        out.display(),
        checkpoint_dir(&out, outcome.final_step).display()
    );
    Ok(())
}

fn load_generator(checkpoint: &Path, expected: Option<&RunConfig>) -> anyhow::Result<(MlpSpec, mfgan_core::networks::ParamSet)> {
    let (spec, params) = match expected {
        Some(cfg) => {
            let spec = cfg.gen_spec();
            let params = load_checkpoint_for(&spec, checkpoint)?;
            (spec, params)
        }
        None => load_checkpoint(checkpoint)?,
    };
    if !spec.time_augmented || spec.input_dim != spec.output_dim {
        bail!(Error::from(mfgan_core::error::CheckpointError::SpecMismatch {
            expected: "a generator (input dim = output dim, time input)".into(),
            found: spec.describe(),
        }));
    }
    Ok((spec, params))
}

fn cmd_sample(args: SampleArgs) -> anyhow::Result<()> {
    let cfg_args = ConfigArgs {
        config: args.config.clone(),
        experiment: args.experiment.clone(),
        ..Default::default()
    };
    let expected = if cfg_args.is_empty() {
        None
    } else {
        Some(cfg_args.resolve()?)
    };
    let (mut spec, params) = load_generator(&args.checkpoint, expected.as_ref())?;
    spec.head = match args.head.as_deref() {
        Some("sigmoid") => OutputHead::Sigmoid,
        Some(_) => OutputHead::Affine,
        None => expected.map(|c| c.gen_spec().head).unwrap_or_default(),
    };
    let mut rng = seeded_rng(derive_seed(noise_seed(args.noise_seed)?, 0x5A));
    let z = if args.count == 0 {
        mfgan_core::Tensor::zeros(vec![0, spec.input_dim])
    } else {
        sample_noise(args.count, spec.input_dim, &mut rng)?
    };
    export_samples(&spec, &params, &z, args.t, &args.output)
        .with_context(|| format!("sampling {}", args.checkpoint.display()))?;
    println!("wrote {} points to {}", args.count, args.output.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve()?;
    if !(0.0..=1.0).contains(&args.t) {
        bail!(Error::Precondition(format!("time {} outside [0, 1]", args.t)));
    }
    let (spec, params) = load_generator(&args.checkpoint, Some(&cfg))?;
    let data = cfg.data_source()?;
    let (mean, cov) = data.reference_moments()?;
    let mut rng = seeded_rng(derive_seed(cfg.train.seed, 0x5B));
    let z = sample_noise(args.samples.max(2), cfg.dim, &mut rng)?;
    let times = mfgan_core::Tensor::full(vec![z.shape()[0], 1], args.t);
    let x = evaluate(&spec, &params, &z, Some(&times))?;
    let (mean_err, cov_err, w2) = moment_errors(&x, &mean, &cov)?;
    println!("mean_err,cov_err,w2");
    println!("{mean_err},{cov_err},{w2}");
    Ok(())
}

#[derive(Debug)]
struct VerifyFailed(String);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<()> {
    let opts = VerifyOptions {
        suites: args.suites,
        exponent_perturbation: args.corrupt_exponent.unwrap_or(0.0),
    };
    let results = verify::run(&opts)?;
    println!("{:<12} {:>6} {:>6} {:>9}  worst", "suite", "cases", "failed", "seconds");
    for r in &results {
        println!(
            "{:<12} {:>6} {:>6} {:>9.2}  {}",
            r.name,
            r.cases,
            r.failures.len(),
            r.seconds,
            r.worst
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.failures.is_empty()).collect();
    if let Some(first) = failed.first() {
        bail!(VerifyFailed(format!(
            "{} suite(s) failed; first failing case in {}: {}",
            failed.len(),
            first.name,
            first.failures[0]
        )));
    }
    Ok(())
}
