use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use semmatch::eval::{curve_csv, evaluate, Dataset, EvalOptions, EvalReport};
use semmatch::features::{load_image, save_pgm, SemanticProvider, ToySemantic};
use semmatch::geometry::{ransac_homography, Correspondence, Point2, RansacConfig};
use semmatch::matching::{write_matches, MatchConfig};
use semmatch::model::{configure_ablation, Matcher, Model, ModelConfig, SemanticSource};
use semmatch::synth::{synthetic_pair, Manifest, SynthConfig};
use semmatch::training::{load_checkpoint, prepare_items, save_checkpoint, train_toy, write_loss_csv, TrainConfig};
use semmatch::{Error, Result};

#[derive(Parser)]
#[command(
    name = "semmatch",
    version,
    about = "Semantic-aware detector-free matching for homography estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Checkpoint directory (default: freshly initialized weights).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of `<image_id>.srmt` semantic blobs.
    #[arg(long)]
    semantic_dir: Option<PathBuf>,
    /// Ablation switches: no_sfb, no_cross, no_overlap, toy_semantic, file_semantic.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Match two images and optionally estimate the homography between them.
    Match {
        img0: PathBuf,
        img1: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "matches.txt")]
        out: PathBuf,
        #[arg(long)]
        homography_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corner-error AUC over an HPatches directory or a manifest.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shorter image side cap in pixels (0 keeps full size).
        #[arg(long, default_value_t = 128)]
        max_side: usize,
        /// Use the ground truth as the estimate.
        #[arg(long)]
        bypass: bool,
        /// Record per-pair wall-clock times (reports stop being reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Write synthetic pairs in the HPatches layout.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on a manifest and write a checkpoint plus `loss.csv`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Parameter initialization seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        accumulate: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Focal exponent; omitted means plain negative log-likelihood.
        #[arg(long)]
        focal_gamma: Option<u32>,
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
        /// Checkpoint every this many epochs (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Run the built-in oracle checks.
    Selftest,
    /// Cumulative error curve of a report as CSV.
    ExportPlots {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        max_px: f64,
    },
}

fn build_matcher(args: &ModelArgs) -> Result<Matcher> {
    let (variant, mut source) = configure_ablation(&args.ablation)?;
    if args.semantic_dir.is_some() && !args.ablation.iter().any(|f| f == "toy_semantic") {
        source = SemanticSource::File;
    }
    let model = match &args.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => Model::new(ModelConfig::default()),
    };
    let dim = model.config.semantic_dim;
    let provider = match source {
        SemanticSource::Toy => SemanticProvider::Toy(ToySemantic::new(dim, 0)),
        SemanticSource::File => SemanticProvider::File {
            dir: args
                .semantic_dir
                .clone()
                .ok_or_else(|| Error::Config("file_semantic needs --semantic-dir".into()))?,
            dim,
        },
    };
    Matcher::new(model, provider, variant, MatchConfig::default())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Match {
            img0,
            img1,
            model,
            out,
            homography_out,
            seed,
        } => {
            let matcher = build_matcher(&model)?;
            let (a, b) = (load_image(&img0)?, load_image(&img1)?);
            let res = matcher.match_pair(&a, &stem(&img0), &b, &stem(&img1))?;
            let mut file = fs::File::create(&out)?;
            write_matches(&mut file, &res.fine)?;
            info!("{} coarse, {} fine matches", res.coarse.len(), res.fine.len());
            if let Some(path) = homography_out {
                let corrs: Vec<Correspondence> = res
                    .fine
                    .iter()
                    .map(|m| Correspondence::new(Point2::new(m.p0.0, m.p0.1), Point2::new(m.p1.0, m.p1.1)))
                    .collect();
                let cfg = RansacConfig {
                    seed,
                    ..RansacConfig::default()
                };
                match ransac_homography(&corrs, &cfg) {
                    Ok(r) => fs::write(path, r.homography.to_text())?,
                    Err(e) => {
                        eprintln!("homography estimation failed: {e}");
                        return Ok(ExitCode::FAILURE);
                    }
                }
            }
        }
        Command::Eval {
            dataset,
            model,
            report,
            seed,
            max_side,
            bypass,
            timing,
        } => {
            let matcher = build_matcher(&model)?;
            let ds = Dataset::load(&dataset)?;
            let opts = EvalOptions {
                seed,
                max_short_side: max_side,
                bypass,
                timing,
                ..EvalOptions::default()
            };
            let r = evaluate(&matcher, &ds, &opts)?;
            fs::write(&report, r.to_json()?)?;
            println!(
                "AUC @1/3/5/10 px: {:.2} / {:.2} / {:.2} / {:.2} ({} of {} pairs failed)",
                r.auc.at1, r.auc.at3, r.auc.at5, r.auc.at10, r.pairs_failed, r.pairs_total
            );
        }
        Command::Synth { n, seed, out, size } => {
            let cfg = SynthConfig {
                size,
                ..SynthConfig::default()
            };
            for k in 0..n {
                let p = synthetic_pair(seed, k as u64, &cfg)?;
                let dir = out.join(format!("pair_{k:04}"));
                fs::create_dir_all(&dir)?;
                save_pgm(&p.image0, &dir.join("1.pgm"))?;
                save_pgm(&p.image1, &dir.join("2.pgm"))?;
                fs::write(dir.join("H_1_2"), p.h_gt.to_text())?;
            }
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Train {
            manifest,
            epochs,
            out,
            seed,
            accumulate,
            lr,
            focal_gamma,
            ablation,
            checkpoint_every,
        } => {
            let (variant, source) = configure_ablation(&ablation)?;
            if source == SemanticSource::File {
                return Err(Error::Config("training uses the toy semantic provider".into()));
            }
            let manifest = Manifest::load(&manifest)?;
            let mut model = Model::new(ModelConfig {
                init_seed: seed,
                ..ModelConfig::default()
            });
            let provider = SemanticProvider::Toy(ToySemantic::new(model.config.semantic_dim, 0));
            let mut cfg = TrainConfig {
                epochs,
                accumulate,
                fusion: variant.fusion,
                checkpoint: (checkpoint_every > 0).then(|| (out.clone(), checkpoint_every)),
                ..TrainConfig::default()
            };
            cfg.adam.lr = lr;
            cfg.loss.focal_gamma = focal_gamma;
            let items = prepare_items(&manifest, &cfg.synth, &provider)?;
            let log = train_toy(&mut model, &items, &cfg)?;
            save_checkpoint(&model, &out)?;
            write_loss_csv(&log, &out.join("loss.csv"))?;
            for e in &log.epochs {
                println!("epoch {}: L_total {:.4}", e.epoch, e.l_total);
            }
        }
        Command::Selftest => {
            let checks = semmatch::selftest::run();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportPlots { report, csv, max_px } => {
            let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report)?)?;
            fs::write(&csv, curve_csv(&r, max_px))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
