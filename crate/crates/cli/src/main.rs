use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tnml_core::init::{copy_node_init, init_dense, monte_carlo_elements, CopyInitPlan, InitSpec};
use tnml_core::network::build_mps;
use tnml_core::rankreg::spectrum_csv;
use tnml_core::train::{aggregate_csv, evaluate, prepare_splits, train, Checkpoint, InitMethod, TrainConfig};

#[derive(Parser)]
#[command(name = "tnml", version, about = "Tensor-network classifiers on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 10,000 images, 30 epochs, one run
    Desk,
    /// full training set, 100 epochs, ten runs
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Further `--key value` pairs override the file
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, spectrum.csv and checkpoint.bin
    Train {
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accuracy and parameter count of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Monte-Carlo check of contracted-element statistics at initialization
    InitStats {
        #[arg(long, default_value_t = 3)]
        n_sites: usize,
        #[arg(long, default_value_t = 2)]
        bond_dim: usize,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        #[arg(long, default_value = "target:1")]
        scheme: String,
        #[arg(long, default_value = "normal")]
        distribution: String,
        /// Dense node count; all nodes when omitted
        #[arg(long)]
        n_dense: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bond-dimension spectrum of a checkpoint as CSV
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid over bond dimension, init scheme and λ
    Sweep {
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        bond_dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "glorot")]
        schemes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        lambdas: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match args.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .with_context(|| format!("expected --key, got {flag:?}"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (
                key.to_string(),
                it.next().with_context(|| format!("missing value for --{key}"))?.clone(),
            ),
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_training(cfg: &TrainConfig, out: &Path) -> Result<Vec<(f64, Option<f64>, usize)>> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let splits = prepare_splits(cfg).context("loading data")?;
    log::info!(
        "data: {} train, {} validation, {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.as_ref().map_or(0, |t| t.len())
    );
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for run in 0..cfg.n_runs {
        let dir = if cfg.n_runs == 1 { out.to_path_buf() } else { out.join(format!("run{run}")) };
        std::fs::create_dir_all(&dir)?;
        let (rec, ckpt) = train(cfg, &splits, run)?;
        std::fs::write(dir.join("metrics.csv"), rec.metrics_csv())?;
        std::fs::write(dir.join("spectrum.csv"), spectrum_csv(&ckpt.spectrum(cfg.threshold)))?;
        ckpt.save(dir.join("checkpoint.bin"))?;
        if let Some(h) = &rec.halted {
            println!("run {run}: halted: {h}");
        }
        let last = rec.final_val_error;
        println!(
            "run {run}: truncated val_error {last:.4} test_accuracy {} params {}",
            rec.test_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            rec.final_params
        );
        summary.push((last, rec.test_accuracy, rec.final_params));
        records.push(rec);
    }
    if cfg.n_runs > 1 {
        std::fs::write(out.join("summary.csv"), aggregate_csv(&records))?;
    }
    Ok(summary)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { out, cfg } => {
            let cfg = load_config(&cfg)?;
            run_training(&cfg, &out)?;
        }
        Command::Eval { checkpoint, split, cfg } => {
            let cfg = load_config(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let splits = prepare_splits(&cfg)?;
            let fs = match split {
                SplitName::Train => &splits.train,
                SplitName::Val => &splits.val,
                SplitName::Test => splits.test.as_ref().context("no test split available")?,
            };
            let (acc, params) = evaluate(&ckpt, fs, cfg.threshold)?;
            println!("accuracy {acc:.6}\nparams {params}");
        }
        Command::InitStats {
            n_sites,
            bond_dim,
            n_classes,
            scheme,
            distribution,
            n_dense,
            samples,
            seed,
        } => {
            let net = build_mps(n_sites, 2, bond_dim, n_classes, 0)?;
            let spec = |s: u64| -> tnml_core::Result<InitSpec> {
                Ok(InitSpec {
                    scheme: scheme.parse()?,
                    distribution: distribution.parse()?,
                    seed: seed.wrapping_mul(1_000_003).wrapping_add(s),
                })
            };
            let plan = CopyInitPlan::contiguous(n_dense.unwrap_or(n_sites));
            let report = copy_node_init(&net, &plan, &spec(0)?)?.1;
            let stats = monte_carlo_elements(&net, samples, &vec![0; n_sites], |s| {
                if n_dense.is_some() {
                    Ok(copy_node_init(&net, &plan, &spec(s)?)?.0)
                } else {
                    Ok(init_dense(&net, &spec(s)?)?.0)
                }
            })?;
            println!("dense_nodes {}", report.n_nodes);
            println!("summed_edges {}", report.n_edges);
            println!("target_variance {}", report.target_variance);
            println!("element_variance {}", report.element_variance);
            println!("samples {}", stats.samples);
            println!("w_mean {}", stats.mean);
            println!("w_std_error {}", stats.std_error);
            println!("w_variance {}", stats.variance);
            println!("variance_ratio {}", stats.variance / report.target_variance);
        }
        Command::Spectrum { checkpoint, threshold, out } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            if ckpt.regs.is_empty() {
                bail!("checkpoint has no rank regularizers");
            }
            let csv = spectrum_csv(&ckpt.spectrum(threshold));
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Sweep {
            out,
            bond_dims,
            schemes,
            lambdas,
            cfg,
        } => {
            let base = load_config(&cfg)?;
            let mut table = String::from("bond_dim,scheme,lambda,run,val_error,test_accuracy,params\n");
            for &d in &bond_dims {
                for s in &schemes {
                    for &l in &lambdas {
                        let mut c = base.clone();
                        c.bond_dim = d;
                        c.scheme = s.parse()?;
                        c.lambda = l;
                        c.rank_reg = c.rank_reg || l > 0.0;
                        if c.init == InitMethod::PerTensor && c.rank_reg {
                            log::info!("rank regularization on a per-tensor init");
                        }
                        let dir = out.join(format!("d{d}_{s}_l{l}"));
                        for (run, (val, test, params)) in run_training(&c, &dir)?.into_iter().enumerate() {
                            table.push_str(&format!(
                                "{d},{s},{l},{run},{val},{},{params}\n",
                                test.map_or(String::new(), |t| t.to_string())
                            ));
                        }
                    }
                }
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.csv"), table)?;
        }
    }
    Ok(())
}
