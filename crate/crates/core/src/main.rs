use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coherence_lab::info_oracle::{gaussian_mi_analytic, mutual_information_discrete, GaussianPairSpec};
use coherence_lab::kv::KeyValues;
use coherence_lab::mi_estimators::benchmark::{smoothed_tail, train_gaussian_estimator, train_pair_estimator, GaussianRun};
use coherence_lab::mi_estimators::Representation;
use coherence_lab::synthetic_data::{binned_joint, generate_sequence_dataset, load_dataset, save_dataset, DatasetConfig};
use coherence_lab::trainer::{self, AblationMode, TrainingConfig};
use coherence_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "coherence-lab", version, about = "Audio-visual coherence lab: MI estimators and a toy talking-face GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a talking-mouth dataset
    GenData(GenData),
    /// Train a generator
    Train(Train),
    /// Evaluate a run's checkpoint on held-out sequences
    Eval(Eval),
    /// Train an MI estimator on Gaussians or dataset pairs
    EstimateMi(EstimateMi),
    /// Render the plots of a finished run
    Plot(Plot),
    /// Train a grid of ablation modes over several seeds
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// One flag per `TrainingConfig` field; unset flags fall back to the config
/// file, then to the defaults.
#[derive(Args)]
struct TrainFlags {
    /// key=value file supplying any config field
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr_generator: Option<f64>,
    #[arg(long)]
    lr_discriminator: Option<f64>,
    #[arg(long)]
    lr_estimator: Option<f64>,
    #[arg(long)]
    lambda_perc: Option<f64>,
    #[arg(long)]
    lambda_lip: Option<f64>,
    #[arg(long)]
    lambda_mi: Option<f64>,
    /// Preset: baseline, mine, da, mine-da, mine-js, mine-js-da, mine-asy-da, amie, amie-da
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    mi_enabled: Option<bool>,
    /// dv or js
    #[arg(long)]
    mi_representation: Option<String>,
    #[arg(long)]
    asymmetric: Option<bool>,
    #[arg(long)]
    da_enabled: Option<bool>,
    #[arg(long)]
    start_rate: Option<f64>,
    #[arg(long)]
    end_rate: Option<f64>,
    #[arg(long)]
    decay_start_epoch: Option<f64>,
    #[arg(long)]
    decay_end_epoch: Option<f64>,
    #[arg(long)]
    fix_to_one_epoch: Option<f64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated encoder widths
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    audio_dim: Option<usize>,
    #[arg(long)]
    estimator_hidden: Option<usize>,
    #[arg(long)]
    teacher_forcing: Option<f64>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    extractor_seed: Option<u64>,
    #[arg(long)]
    trace: Option<bool>,
}

impl TrainFlags {
    fn overrides(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        macro_rules! put {
            ($s:ident; $($f:ident),*) => {$(
                if let Some(v) = &$s.$f {
                    kv.set(stringify!($f), v);
                }
            )*};
        }
        put!(self; seed, image_size, batch_size, epochs, steps_per_epoch, lr_generator, lr_discriminator, lr_estimator);
        put!(self; lambda_perc, lambda_lip, lambda_mi, ablation, mi_enabled, mi_representation, asymmetric, da_enabled);
        put!(self; start_rate, end_rate, decay_start_epoch, decay_end_epoch, fix_to_one_epoch);
        put!(self; widths, audio_dim, estimator_hidden, teacher_forcing, holdout_fraction, checkpoint_every, extractor_seed, trace);
        if let Some(p) = &self.dataset {
            kv.set("dataset", p.display());
        }
        if let Some(p) = &self.output {
            kv.set("output", p.display());
        }
        kv
    }

    fn resolve(&self) -> Result<TrainingConfig> {
        let mut config = TrainingConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.apply_kv(&KeyValues::parse(&text)?)?;
        }
        config.apply_kv(&self.overrides())?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    flags: TrainFlags,
    /// Continue the run in --output from its last checkpoint
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    run: PathBuf,
    /// Dataset to evaluate on; defaults to the one the run was trained on
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateMi {
    /// dv or js
    #[arg(long, default_value = "dv")]
    representation: String,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Use (driver, mouth opening) pairs of this dataset instead of Gaussians
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Steps averaged for the reported estimate
    #[arg(long, default_value_t = 100)]
    window: usize,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated presets; defaults to the full table
    #[arg(long)]
    modes: Option<String>,
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Error::Validation(format!("bad {what} entry {p:?}"))))
        .collect()
}

fn print_report(report: &coherence_lab::metrics::MetricReport) {
    for line in report.json_lines() {
        println!("{line}");
    }
    println!(
        "psnr_db={:.4} ssim={:.4} lmd_px={:.4} detection_failures={}",
        report.psnr_db, report.ssim, report.lmd_px, report.detection_failures
    );
}

fn gen_data(a: &GenData) -> Result<()> {
    let config = DatasetConfig {
        num_identities: a.identities,
        frames_per_sequence: a.frames,
        image_size: a.image_size,
        noise: a.noise,
        seed: a.seed,
    };
    let dataset = generate_sequence_dataset(&config, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let manifest = save_dataset(&dataset, &a.output)?;
    println!("wrote {} sequences to {} (checksum {})", dataset.sequences.len(), a.output.display(), manifest.checksum);
    Ok(())
}

fn train(a: &Train) -> Result<()> {
    let art = if a.resume {
        let dir = a.flags.output.clone().ok_or_else(|| Error::Validation("--resume needs --output".into()))?;
        trainer::resume(&dir)?
    } else {
        trainer::train(&a.flags.resolve()?)?
    };
    println!("trained {} steps into {}", art.steps, art.run_dir.display());
    print_report(&art.report);
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let config = trainer::load_run_config(&a.run)?;
    let path = a.dataset.clone().unwrap_or(config.dataset);
    let report = trainer::evaluate(&a.run, &load_dataset(&path)?)?;
    print_report(&report);
    Ok(())
}

fn estimate_mi(a: &EstimateMi) -> Result<()> {
    let representation: Representation = a.representation.parse()?;
    let spec = GaussianPairSpec::new(a.rho, a.dim)?;
    let run = GaussianRun { steps: a.steps, batch_size: a.batch_size, learning_rate: a.lr, ..GaussianRun::new(spec, representation, a.seed) };
    if run.steps == 0 || run.batch_size < 2 {
        return Err(Error::Validation("steps must be positive and batch_size at least 2".into()));
    }
    match &a.dataset {
        None => {
            let traj = train_gaussian_estimator(&run)?;
            println!("estimate={:.6} analytic={:.6}", smoothed_tail(&traj, a.window), gaussian_mi_analytic(&spec)?);
        }
        Some(path) => {
            let pairs = load_dataset(path)?.driver_mouth_pairs();
            let traj = train_pair_estimator(&pairs, &run)?;
            let binned = mutual_information_discrete(&binned_joint(&pairs, 16)?);
            println!("estimate={:.6} binned_plugin_16={binned:.6} pairs={}", smoothed_tail(&traj, a.window), pairs.len());
        }
    }
    Ok(())
}

fn plot(a: &Plot) -> Result<()> {
    for p in trainer::plot::emit_plots(&a.run)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn ablate(a: &Ablate) -> Result<()> {
    let base = a.flags.resolve()?;
    let modes: Vec<(String, AblationMode)> = match &a.modes {
        Some(list) => parse_list::<AblationMode>(list, "mode")?.into_iter().map(|m| (m.to_string(), m)).collect(),
        None => AblationMode::TABLE.iter().map(|(n, m)| (n.to_string(), *m)).collect(),
    };
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let dataset = load_dataset(&base.dataset)?;
    let summary = trainer::ablate(&base, &dataset, &modes, &seeds)?;
    print!("{}", summary.to_csv());
    for m in summary.modes() {
        println!(
            "{m}: median untrained lmd {:.4}, trained lmd {:.4}",
            summary.median_untrained_lmd(m).unwrap_or(f64::NAN),
            summary.median_trained_lmd(m).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::EstimateMi(a) => estimate_mi(a),
        Command::Plot(a) => plot(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.exit_code())
        }
    }
}
