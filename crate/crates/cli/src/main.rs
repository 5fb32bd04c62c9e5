//! a2snas: search, retrain, evaluate, and map hyperspectral classifiers
//! built from asymmetric spectral-spatial blocks.
//!
//! Progress goes to stderr; machine-readable outputs go to files. Exit
//! codes: 0 success, 1 usage/config error, 2 data or format error.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use a2snas_core::data::{
    gen_synthetic, load_cube, make_splits, normalize_bands, save_cube, HsiCube, SyntheticSpec,
};
use a2snas_core::metrics::render_map;
use a2snas_core::search::{checkpoint, evaluate, history_to_csv, predict, run_search, train_compact};
use a2snas_core::supernet::{build_compact, genotype_to_string, parse_genotype, SupernetConfig};
use a2snas_core::Error as CoreError;

use config::{Overrides, RunConfig};

/// A failed run with its exit classification.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Failure::Data(msg.into())
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "a2snas", version, about = "asymmetric spectral-spatial architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled cube directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        bands: usize,
        /// Square scene extent (overridden by --height/--width).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Additive Gaussian noise sigma.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Run the bi-level architecture search; writes genotype, history, and
    /// a resumable supernet checkpoint.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (default: <data>.out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Retrain a derived genotype from scratch; writes the best-validation
    /// compact checkpoint and the retraining history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a compact checkpoint on the held-out test split; writes the
    /// metrics report and confusion matrix.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict every labeled pixel and render a classification map
    /// (portable pixmap; unlabeled pixels black).
    Map {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output image path (default: <checkpoint>/map.ppm).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful output, not errors.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn default_out(data: &Path) -> PathBuf {
    let mut name = data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    name.push_str(".out");
    data.parent().map(|p| p.join(&name)).unwrap_or_else(|| PathBuf::from(name))
}

fn load_normalized(dir: &Path) -> Result<HsiCube, Failure> {
    eprintln!("loading cube from {}", dir.display());
    let cube = load_cube(dir)?;
    Ok(normalize_bands(&cube))
}

fn net_config(cube: &HsiCube, cfg: &RunConfig) -> SupernetConfig {
    SupernetConfig {
        stem_channels: cfg.stem_channels,
        patch_size: cfg.patch_size,
        bands: cube.bands,
        num_classes: cube.num_classes(),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Failure::data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen {
            out,
            classes,
            bands,
            size,
            height,
            width,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes,
                bands,
                height: height.unwrap_or(size),
                width: width.unwrap_or(size),
                noise,
            };
            eprintln!(
                "generating {}x{} cube, {} bands, {} classes, noise {noise}",
                spec.height, spec.width, spec.bands, spec.classes
            );
            let cube = gen_synthetic(&spec, seed)?;
            save_cube(&out, &cube)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Search {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            let out = out.unwrap_or_else(|| default_out(&data));
            let cube = load_normalized(&data)?;
            let net_cfg = net_config(&cube, &cfg);
            let splits = make_splits(&cube, cfg.search_split(), cfg.seed)?;
            eprintln!(
                "search: {} train / {} val pixels, {} epochs, seed {}",
                splits.train.len(),
                splits.val.len(),
                cfg.search_epochs,
                cfg.seed
            );
            let scfg = cfg.search(None);
            let (genotype, history, run) =
                run_search(&scfg, &net_cfg, &cube, &splits.train, &splits.val)?;
            for rec in &history {
                eprintln!(
                    "epoch {:>3}: train {:.4} val {:.4} val_oa {:.4}",
                    rec.epoch, rec.train_loss, rec.val_loss, rec.val_oa
                );
            }
            write_out(&out.join("genotype"), genotype_to_string(&genotype).as_bytes())?;
            write_out(&out.join("history.csv"), history_to_csv(&history).as_bytes())?;
            run.save_checkpoint(&out.join("supernet"))?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            genotype,
            out,
            overrides,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            let out = out.unwrap_or_else(|| default_out(&data));
            let cube = load_normalized(&data)?;
            let net_cfg = net_config(&cube, &cfg);
            let text = std::fs::read_to_string(&genotype)
                .map_err(|e| Failure::data(format!("{}: {e}", genotype.display())))?;
            let genotype = parse_genotype(&text)?;
            let splits = make_splits(&cube, cfg.eval_split(), cfg.seed)?;
            eprintln!(
                "retrain: {} train / {} val pixels, {} epochs",
                splits.train.len(),
                splits.val.len(),
                cfg.retrain_epochs
            );
            let scfg = cfg.search(None);
            let trained = train_compact(&scfg, &genotype, &net_cfg, &cube, &splits.train, &splits.val)?;
            for rec in &trained.history {
                eprintln!(
                    "epoch {:>3}: train {:.4} val_oa {:.4} lr {:.6}",
                    rec.epoch, rec.train_loss, rec.val_oa, rec.lr
                );
            }
            let mut csv = String::from("epoch,train_loss,val_oa,lr\n");
            for rec in &trained.history {
                let _ = writeln!(csv, "{},{},{},{}", rec.epoch, rec.train_loss, rec.val_oa, rec.lr);
            }
            write_out(&out.join("retrain_history.csv"), csv.as_bytes())?;
            trained.save_best_checkpoint(&out.join("compact"))?;
            eprintln!(
                "best epoch {} with val OA {:.4}; wrote {}",
                trained.best_epoch,
                trained.best_val_oa,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            data,
            checkpoint: ckpt_dir,
            out,
            overrides,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            let out = out.unwrap_or_else(|| default_out(&data));
            let cube = load_normalized(&data)?;
            let (net, mut params) = load_compact_checkpoint(&ckpt_dir, &cube)?;
            let splits = make_splits(&cube, cfg.eval_split(), cfg.seed)?;
            eprintln!("evaluating {} test pixels", splits.test.len());
            let (cm, report) = evaluate(&net, &mut params, &cube, &splits.test, cfg.batch_size)?;
            write_out(&out.join("metrics.txt"), report.to_report_text().as_bytes())?;
            write_out(&out.join("confusion.csv"), cm.to_csv().as_bytes())?;
            eprintln!(
                "oa/aa/kappa = {:.2} / {:.2} / {:.2}",
                report.oa * 100.0,
                report.aa * 100.0,
                report.kappa * 100.0
            );
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Map {
            config,
            data,
            checkpoint: ckpt_dir,
            out,
            overrides,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            let cube = load_normalized(&data)?;
            let (net, mut params) = load_compact_checkpoint(&ckpt_dir, &cube)?;
            let labeled = cube.labeled_pixels();
            eprintln!("predicting {} labeled pixels", labeled.len());
            let predictions = predict(&net, &mut params, &cube, &labeled, cfg.batch_size)?;
            let mut grid = vec![0u16; cube.height * cube.width];
            for (px, class) in predictions {
                grid[px.row * cube.width + px.col] = class;
            }
            let bytes = render_map(&grid, cube.width, cube.height, cube.num_classes())?;
            let out = out.unwrap_or_else(|| ckpt_dir.join("map.ppm"));
            write_out(&out, &bytes)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn load_compact_checkpoint(
    dir: &Path,
    cube: &HsiCube,
) -> Result<(a2snas_core::supernet::CompactNet, a2snas_core::tensor::ParamStore<f32>), Failure> {
    let manifest = checkpoint::load_manifest(dir)?;
    if manifest.fingerprint.bands != cube.bands
        || manifest.fingerprint.num_classes != cube.num_classes()
    {
        return Err(Failure::data(format!(
            "checkpoint fingerprint {} does not match cube (bands={}, classes={})",
            manifest.fingerprint,
            cube.bands,
            cube.num_classes()
        )));
    }
    let genotype = checkpoint::load_genotype(dir)?;
    let net_cfg = SupernetConfig {
        stem_channels: manifest.fingerprint.stem_channels,
        patch_size: manifest.fingerprint.patch_size,
        bands: manifest.fingerprint.bands,
        num_classes: manifest.fingerprint.num_classes,
    };
    let (net, mut params) = build_compact::<f32>(&genotype, &net_cfg, 0)?;
    checkpoint::read_weights_into(&dir.join(checkpoint::WEIGHTS_FILE), &mut params)?;
    Ok((net, params))
}
