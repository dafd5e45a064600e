use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use flowaug_core::eval::{
    augmentation_size_sweep, cross_validate, fit_flow, generate_synthetic_dataset, Class, LabeledDataset,
};
use flowaug_core::io::{self, RunConfig, CONFIG_FILE};
use flowaug_core::objective::{nll_loss, Dequantizer};
use flowaug_core::rng::{derive_seed, SeededRng};
use flowaug_core::synthesis::{generate_augmentations, sample};
use flowaug_core::{verify, Error, FlowModel, Tensor};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error: unknown command or flag, missing --seed
  3  configuration error: malformed config file, unknown key, invalid value
  4  I/O error: unreadable or unwritable file, bad image, manifest or checkpoint
  5  runtime failure: divergence or a numerical error during training
  6  verification failure: `verify` found a failing check";

const CHECKPOINT_FILE: &str = "flow.ckpt";

#[derive(Parser)]
#[command(
    name = "flowaug",
    version,
    about = "Normalizing-flow interpolation for oversampling a rare image class",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; absent keys keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set flow.hidden=8`. Repeatable;
    /// applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice of the run. Required unless the config
    /// file sets `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing. The effective config is written
    /// to `config.txt` inside it.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory (`manifest.csv` + PGM images). Without it the
    /// synthetic dataset described by the config is generated from the seed.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic imbalanced dataset as PGM files and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a flow to one class of a dataset and save a checkpoint.
    TrainFlow {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Class whose images the flow models.
        #[arg(long, default_value = "bad")]
        class: String,
    },
    /// Draw images from a trained flow's prior.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train-flow`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Prior scale; 0 decodes the latent mean. Defaults to the config's
        /// `augment.temperature`.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Synthesize images by latent interpolation between same-class images.
    Augment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Directory written by `train-flow`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, default_value = "bad")]
        class: String,
        /// Images to synthesize; defaults to the config's `augment.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Paired k-fold cross-validation of the classifier with and without
    /// flow augmentation.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Number of folds; defaults to the config's `cv.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Augmentations per fold; defaults to the config's `augment.count`.
        #[arg(long)]
        augment: Option<usize>,
    },
    /// Classifier F1 against the number of augmentations.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated sizes; defaults to the config's `sweep.sizes`.
        #[arg(long, value_name = "LIST")]
        sizes: Option<String>,
        /// Classifier trainings per size; defaults to `sweep.runs`.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run the numerical invariant suite and print pass counts.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `verify.csv` here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Verify(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(Error::Config(_) | Error::InvalidArgument(_)) => 3,
            Failure::Core(Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_)) => 4,
            Failure::Core(_) => 5,
            Failure::Verify(_) => 6,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
            Failure::Verify(n) => format!("{n} verification checks failed"),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Effective config and seed of a stochastic command, echoed into `out`.
fn setup(common: &Common, overrides: &[(&str, String)]) -> Result<(RunConfig, u64), Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    let seed = cfg
        .seed
        .ok_or_else(|| Failure::Usage("--seed is required for this command".into()))?;
    cfg.validate()?;
    io::create_dir(&common.out)?;
    io::atomic_write(&common.out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    Ok((cfg, seed))
}

fn load_data(data: &DataArg, cfg: &RunConfig, seed: u64) -> Result<LabeledDataset, Failure> {
    match &data.data {
        Some(dir) => Ok(io::read_dataset(dir)?),
        None => Ok(generate_synthetic_dataset(&flowaug_core::eval::SyntheticSeismoConfig {
            seed,
            ..cfg.dataset.clone()
        })?),
    }
}

fn class_subset(ds: &LabeledDataset, class: &str) -> Result<LabeledDataset, Failure> {
    let c = Class::parse(class).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(ds.subset(&ds.positions_of(c)))
}

/// Loads the checkpoint in a `train-flow` directory using the config echoed
/// next to it.
fn load_model(dir: &Path) -> Result<FlowModel, Failure> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let side = cfg.dataset.size;
    Ok(io::load_checkpoint(&dir.join(CHECKPOINT_FILE), &cfg.flow, [side, side, 1])?)
}

fn sheet(path: &Path, images: &Tensor, max: usize) -> Result<(), Failure> {
    let n = images.batch().min(max);
    if n > 0 {
        io::write_pgm_sheet(path, &images.select(&(0..n).collect::<Vec<_>>()), 8)?;
    }
    Ok(())
}

fn gen_data(common: Common) -> CliResult {
    let (cfg, seed) = setup(&common, &[])?;
    let ds = load_data(&DataArg { data: None }, &cfg, seed)?;
    io::write_dataset(&common.out, &ds)?;
    let counts = ds.class_counts();
    println!(
        "wrote {} images (good {}, medium {}, bad {}) to {}",
        ds.len(),
        counts[0],
        counts[1],
        counts[2],
        common.out.display()
    );
    Ok(())
}

fn train_flow(common: Common, data: DataArg, class: String) -> CliResult {
    let (mut cfg, seed) = setup(&common, &[])?;
    let ds = load_data(&data, &cfg, seed)?;
    let [h, w, c] = ds.image_shape();
    if h != w || c != 1 {
        return Err(Error::Config(format!("flows are trained on square single-channel images, got {h}×{w}×{c}")).into());
    }
    // The echoed size is what `sample` and `augment` rebuild the model with.
    cfg.dataset.size = h;
    io::atomic_write(&common.out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let images = class_subset(&ds, &class)?;
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!("class {class} has {} images", images.len())).into());
    }
    let (flow, report) = fit_flow(&images.images, &cfg.augment_recipe(), seed)?;
    io::save_checkpoint(&common.out.join(CHECKPOINT_FILE), &flow)?;
    io::write_loss_curve(&common.out.join("loss.csv"), &report.curve)?;
    let dq = Dequantizer::eight_bit();
    let mut rng = SeededRng::new(derive_seed(seed, 3));
    let r = nll_loss(&flow, &dq.apply(&images.images, &mut rng), Some(&dq))?;
    println!(
        "trained on {} {class} images: NLL {:.2} nats, {:.4} bits/dim",
        images.len(),
        r.nll_nats,
        r.bits_per_dim
    );
    Ok(())
}

fn sample_cmd(common: Common, model_dir: PathBuf, n: usize, temperature: Option<f64>) -> CliResult {
    let mut overrides = Vec::new();
    if let Some(t) = temperature {
        overrides.push(("augment.temperature", t.to_string()));
    }
    let (cfg, seed) = setup(&common, &overrides)?;
    let model = load_model(&model_dir)?;
    let mut rng = SeededRng::new(seed);
    let images = sample(&model, n, cfg.interpolation.temperature, &mut rng)?;
    let dq = Dequantizer::eight_bit();
    let mut quantized = Vec::with_capacity(n);
    for (i, img) in images.iter().enumerate() {
        let q = dq.quantize(img);
        io::write_pgm(&common.out.join(format!("sample_{i:03}.pgm")), &q)?;
        quantized.push(q);
    }
    if !quantized.is_empty() {
        sheet(&common.out.join("samples_sheet.pgm"), &Tensor::stack(&quantized)?, 64)?;
    }
    println!("wrote {n} samples at temperature {}", cfg.interpolation.temperature);
    Ok(())
}

fn augment_cmd(common: Common, data: DataArg, model_dir: PathBuf, class: String, count: Option<usize>) -> CliResult {
    let overrides: Vec<_> = count.map(|c| ("augment.count", c.to_string())).into_iter().collect();
    let (cfg, seed) = setup(&common, &overrides)?;
    let model = load_model(&model_dir)?;
    let ds = load_data(&data, &cfg, seed)?;
    let sources = class_subset(&ds, &class)?;
    let mut rng = SeededRng::new(derive_seed(seed, 3));
    let set = generate_augmentations(
        &model,
        &sources.images,
        &sources.ids,
        cfg.augment_count,
        &cfg.interpolation,
        &Dequantizer::eight_bit(),
        0,
        &mut rng,
    )?;
    io::write_augmentations(&common.out, &set)?;
    if let Some(images) = &set.images {
        sheet(&common.out.join("augment_sheet.pgm"), images, 64)?;
    }
    println!("wrote {} interpolations between {} {class} images", set.len(), sources.len());
    Ok(())
}

fn crossval_cmd(common: Common, data: DataArg, k: Option<usize>, augment: Option<usize>) -> CliResult {
    let mut overrides = Vec::new();
    if let Some(k) = k {
        overrides.push(("cv.k", k.to_string()));
    }
    if let Some(a) = augment {
        overrides.push(("augment.count", a.to_string()));
    }
    let (cfg, seed) = setup(&common, &overrides)?;
    let ds = load_data(&data, &cfg, seed)?;
    let result = cross_validate(&ds, &cfg.crossval_config(seed))?;
    io::write_crossval(&common.out, &result)?;
    for f in &result.folds {
        if let Some(images) = &f.augmentations.images {
            sheet(&common.out.join(format!("augment_sheet_fold{:02}.pgm", f.fold)), images, 64)?;
        }
    }
    let s = &result.summary;
    let rare = Class::RARE.index();
    println!(
        "rare-class F1: baseline {:.4} ± {:.4}, augmented {:.4} ± {:.4}",
        s.baseline.f1[rare].0, s.baseline.f1[rare].1, s.augmented.f1[rare].0, s.augmented.f1[rare].1
    );
    println!(
        "median per-fold delta {:.4}, sign test {}+/{}-/{}= p = {:.4}, macro-F1 delta {:.4}",
        s.median_rare_delta,
        s.sign_test.positive,
        s.sign_test.negative,
        s.sign_test.ties,
        s.sign_test.p_value,
        s.macro_f1_delta
    );
    Ok(())
}

fn sweep_cmd(common: Common, data: DataArg, sizes: Option<String>, runs: Option<usize>) -> CliResult {
    let mut overrides = Vec::new();
    if let Some(s) = sizes {
        overrides.push(("sweep.sizes", s));
    }
    if let Some(r) = runs {
        overrides.push(("sweep.runs", r.to_string()));
    }
    let (cfg, seed) = setup(&common, &overrides)?;
    let ds = load_data(&data, &cfg, seed)?;
    let result = augmentation_size_sweep(&ds, &cfg.sweep_config(seed))?;
    io::write_sweep(&common.out, &result)?;
    for (size, per) in &result.curves {
        println!(
            "size {size:>5}: F1 good {:.4} medium {:.4} bad {:.4} ± {:.4}",
            per[0].0, per[1].0, per[2].0, per[2].1
        );
    }
    println!("recommended size {}", result.recommended);
    Ok(())
}

fn verify_cmd(seed: u64, out: Option<PathBuf>) -> CliResult {
    let checks = verify::run_all(seed)?;
    for c in &checks {
        println!("{} {:<32} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    if let Some(dir) = out {
        io::create_dir(&dir)?;
        let mut text = String::from("check,passed,value\n");
        for c in &checks {
            text.push_str(&format!("{},{},{}\n", c.name, c.passed, c.value));
        }
        io::atomic_write(&dir.join("verify.csv"), text.as_bytes())?;
    }
    if failed > 0 {
        return Err(Failure::Verify(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command()
        .mut_subcommands(|sub| sub.after_help(EXIT_CODES))
        .get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::GenData { common } => gen_data(common),
        Command::TrainFlow { common, data, class } => train_flow(common, data, class),
        Command::Sample {
            common,
            model,
            n,
            temperature,
        } => sample_cmd(common, model, n, temperature),
        Command::Augment {
            common,
            data,
            model,
            class,
            count,
        } => augment_cmd(common, data, model, class, count),
        Command::Crossval {
            common,
            data,
            k,
            augment,
        } => crossval_cmd(common, data, k, augment),
        Command::Sweep {
            common,
            data,
            sizes,
            runs,
        } => sweep_cmd(common, data, sizes, runs),
        Command::Verify { seed, out } => verify_cmd(seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("flowaug: error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
