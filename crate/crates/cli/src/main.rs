use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transfg::patch::load_image;
use transfg::ppm::{write_ppm, RgbImage};
use transfg::psm::{load_selection, save_selection};
use transfg::synth::generate;
use transfg::train::{ablate, evaluate, inspect, load_checkpoint, train, TrainConfig, ABLATION_HEADER};
use transfg::viz::{render, OverlayMode, OverlayRequest, DEFAULT_TOP_K};
use transfg::{Error, Result};

const DEFAULT_OUT: &str = "transfg-out";

#[derive(Parser)]
#[command(
    name = "transfg",
    version,
    about = "Train and inspect a part-selecting vision transformer on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv plus a checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on its dataset.
    Eval(EvalArgs),
    /// Run the overlap × part-selection × contrastive grid and the margin sweep.
    Ablate(ConfigArgs),
    /// Generate and export the synthetic dataset.
    GenData(ConfigArgs),
    /// Render a selection overlay or attention map.
    Viz(VizArgs),
}

/// Every field can come from `--config FILE` (key = value lines); flags
/// given on the command line override the file.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<String>,
    #[arg(long)]
    num_classes: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    /// on/off; off tiles patches without overlap.
    #[arg(long)]
    overlap: Option<String>,
    /// on/off; off classifies the plain final CLS token.
    #[arg(long)]
    psm: Option<String>,
    #[arg(long)]
    identity_mix: Option<String>,
    #[arg(long)]
    contrastive: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    superclasses: Option<String>,
    #[arg(long)]
    subclasses: Option<String>,
    #[arg(long)]
    glyph_size: Option<String>,
    #[arg(long)]
    samples_per_class: Option<String>,
    #[arg(long)]
    test_samples_per_class: Option<String>,
    #[arg(long)]
    noise_std: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        let flags = [
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("dim", &self.dim),
            ("mlp-ratio", &self.mlp_ratio),
            ("num-classes", &self.num_classes),
            ("image-size", &self.image_size),
            ("channels", &self.channels),
            ("patch", &self.patch),
            ("stride", &self.stride),
            ("overlap", &self.overlap),
            ("psm", &self.psm),
            ("identity-mix", &self.identity_mix),
            ("contrastive", &self.contrastive),
            ("alpha", &self.alpha),
            ("learning-rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("batch-size", &self.batch_size),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("data-seed", &self.data_seed),
            ("superclasses", &self.superclasses),
            ("subclasses", &self.subclasses),
            ("glyph-size", &self.glyph_size),
            ("samples-per-class", &self.samples_per_class),
            ("test-samples-per-class", &self.test_samples_per_class),
            ("noise-std", &self.noise_std),
            ("data-dir", &self.data_dir),
            ("out-dir", &self.out_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if cfg.out_dir.is_none() {
            cfg.out_dir = Some(PathBuf::from(DEFAULT_OUT));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split to evaluate.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Evaluate on an exported dataset instead of the checkpoint's own.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Write images, selection dumps and overlays for the first samples here.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    dump_count: usize,
}

#[derive(Args)]
struct VizArgs {
    /// PPM or TFGT `[H, W, C]` image.
    #[arg(long)]
    input: PathBuf,
    /// Selection dump written by `eval --dump-dir`.
    #[arg(long)]
    selection: PathBuf,
    /// selected-patches or attention-map.
    #[arg(long, default_value = "selected-patches")]
    mode: String,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn run_train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let outcome = train(&cfg)?;
    let dir = cfg.out_dir.as_deref().unwrap_or(Path::new(DEFAULT_OUT));
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} loss_cross {} loss_con {} batch_acc {}",
            last.step, last.loss_cross, last.loss_con, last.train_acc
        );
    }
    println!("config_hash {}", cfg.hash());
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (mut cfg, model) = load_checkpoint(&args.checkpoint)?;
    if args.data_dir.is_some() {
        cfg.data_dir.clone_from(&args.data_dir);
    }
    let data = cfg.dataset()?;
    let split = if args.split == "train" { &data.train } else { &data.test };
    let report = evaluate(&model, split)?;
    print!(
        "split = {}\nsamples = {}\n{}",
        args.split,
        split.len(),
        report.to_text()
    );
    if let Some(dir) = &args.dump_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let patch = model.config().patch;
        let picked: Vec<usize> = (0..args.dump_count.min(split.len())).collect();
        for (&i, sel) in picked.iter().zip(inspect(&model, split, &picked)?) {
            let image = RgbImage::from_tensor(&split.images.index_outer(i)?)?;
            write_ppm(&image, &dir.join(format!("sample{i}.ppm")))?;
            save_selection(&dir.join(format!("sample{i}.sel.tfgt")), &sel, &patch)?;
            for (mode, name) in [
                (OverlayMode::SelectedPatches, "selected"),
                (OverlayMode::AttentionMap, "attention"),
            ] {
                let req = OverlayRequest {
                    image: &image,
                    selection: &sel,
                    patch,
                    mode,
                    top_k: DEFAULT_TOP_K,
                };
                write_ppm(&render(&req)?, &dir.join(format!("sample{i}.{name}.ppm")))?;
            }
        }
        println!("dumped {} samples to {}", picked.len(), dir.display());
    }
    Ok(())
}

fn run_ablate(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    // rows stream as cells finish; a closed stdout must not abort the run
    let mut out = io::stdout();
    let _ = writeln!(out, "{ABLATION_HEADER}");
    let rows = ablate(&cfg, |row| {
        let _ = writeln!(out, "{}", row.csv_row()).and_then(|()| out.flush());
    })?;
    if let Some(dir) = &cfg.out_dir {
        eprintln!("{} cells written to {}", rows.len(), dir.join("ablation.csv").display());
    }
    Ok(())
}

fn run_gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let data = generate(&cfg.synth_config())?;
    let dir = cfg.out_dir.as_deref().unwrap_or(Path::new(DEFAULT_OUT));
    data.export(dir)?;
    println!(
        "wrote {} train and {} test samples to {}",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

fn run_viz(args: &VizArgs) -> Result<()> {
    let mode: OverlayMode = args.mode.parse()?;
    let tensor = load_image(&args.input)?;
    let image = RgbImage::from_tensor(&tensor)?;
    let (selection, patch) = load_selection(&args.selection)?;
    let req = OverlayRequest {
        image: &image,
        selection: &selection,
        patch,
        mode,
        top_k: args.top_k,
    };
    write_ppm(&render(&req)?, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    match std::env::var("TRANSFG_THREADS") {
        Ok(v) => {
            let n = v
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("TRANSFG_THREADS={v:?}: {e}")))?;
            transfg::kernels::set_threads(n)
        }
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::GenData(a) => run_gen_data(a),
        Command::Viz(a) => run_viz(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
