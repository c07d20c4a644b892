//! Command-line front end for the attack toolkit.
//!
//! Subcommands cover the full workflow: generate or import data
//! (`gen-data`), train feature networks (`train-mlp`, `fit-affine`),
//! run a single attack or exhaustive search (`attack`, `oracle`), drive
//! a whole experiment (`eval`), and verify a finished report
//! (`report`). Machine-readable output is one JSON object per line on
//! stdout; diagnostics go to stderr via `RUST_LOG`.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, bad
//! configuration files, invalid arguments), 2 on runtime failures
//! (I/O, training divergence, report mismatch).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use knn_attack::attack::run_attack;
use knn_attack::dataset::{
    gen_gaussian_blobs, gen_moons, load_csv, write_csv, Dataset, LabeledPoint,
};
use knn_attack::features::{fit_affine, train_mlp, LayerHandle, Mlp};
use knn_attack::harness::{
    compute_metrics, load_config, parse_report, render_report, render_summary, run_experiment,
    sample_seed, write_report, ExperimentConfig,
};
use knn_attack::knn::KnnModel;
use knn_attack::oracle::exact_min_attack;
use knn_attack::{Error, Result};

#[derive(Parser)]
#[command(
    name = "knn-attack",
    version,
    about = "Minimum-norm adversarial attacks on k-nearest-neighbor classifiers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, ValueEnum)]
enum DataKind {
    /// Isotropic Gaussian blobs, one class per center.
    Blobs,
    /// Two interleaved half-moons in the unit square.
    Moons,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Seed for the train split; the test split uses seed + 1.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_per_class: usize,
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    /// Blob centers as `x,y;x,y;...` (blobs only).
    #[arg(long, default_value = "0.3,0.3;0.7,0.7")]
    centers: String,
    /// Per-coordinate standard deviation around each center (blobs only).
    #[arg(long, default_value_t = 0.08)]
    std: f64,
    /// Gaussian noise added to each arc point (moons only).
    #[arg(long, default_value_t = 0.12)]
    noise_std: f64,
    #[arg(long)]
    train_out: PathBuf,
    /// Required when --test-per-class is positive.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic train/test pair as CSV files.
    GenData(GenDataArgs),

    /// Train an MLP classifier on a CSV dataset and save it as JSON.
    TrainMlp {
        #[arg(long)]
        data: PathBuf,
        /// Layer widths as `in,hidden,...,classes`, e.g. `2,16,2`.
        #[arg(long)]
        widths: String,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Fit a low-rank affine projection of pooled MLP activations.
    FitAffine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mlp: PathBuf,
        /// Post-activation layer indices to pool, e.g. `0,1`.
        #[arg(long)]
        layers: String,
        /// Mean-pool window applied to the concatenated activations.
        #[arg(long, default_value_t = 1)]
        pool: usize,
        /// Number of principal directions to keep.
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Attack a single test sample from an experiment configuration.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Index into the test set.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Overrides the experiment seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the adversarial example as a one-row CSV (label = its
        /// predicted class). Fails if the attack found nothing.
        #[arg(long)]
        dump_adv: Option<PathBuf>,
    },

    /// Exhaustively search the minimal adversarial example for one
    /// test sample (plain single-layer Euclidean models only).
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Index into the test set.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Write the optimal adversarial example as a one-row CSV.
        #[arg(long)]
        dump_adv: Option<PathBuf>,
    },

    /// Run a full experiment and write its report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the experiment seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the worker count from the configuration.
        #[arg(long)]
        workers: Option<usize>,
    },

    /// Re-check a report: recompute the summary from the sample lines
    /// and verify the file renders back byte-for-byte.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| Error::Argument(format!("bad {} entry {:?}", what, tok)))
        })
        .collect()
}

fn parse_centers(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';').map(|c| parse_list(c, "center")).collect()
}

/// Loads the experiment configuration and instantiates its model and
/// test set, with an optional seed override applied first.
fn load_instances(
    config: &Path,
    seed: Option<u64>,
) -> Result<(ExperimentConfig, KnnModel, Dataset)> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let (train, test) = cfg.data.load()?;
    let model = cfg.model.build(train)?;
    Ok((cfg, model, test))
}

fn check_index(test: &Dataset, index: usize) -> Result<()> {
    if index >= test.len() {
        return Err(Error::Argument(format!(
            "sample index {} out of range for a test set of {}",
            index,
            test.len()
        )));
    }
    Ok(())
}

/// Writes one adversarial example as a single-row CSV, labeled with the
/// class the model assigns to it.
fn dump_adversarial(model: &KnnModel, adv: &[f64], path: &Path) -> Result<()> {
    let label = model.classify(adv)?.predicted;
    let ds = Dataset::new(
        vec![LabeledPoint {
            x: adv.to_vec(),
            y: label,
        }],
        model.num_classes(),
    )?;
    write_csv(&ds, path)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.test_per_class > 0 && args.test_out.is_none() {
        return Err(Error::Argument("--test-per-class needs --test-out".into()));
    }
    let gen = |seed: u64, per_class: usize| -> Result<Dataset> {
        match args.kind {
            DataKind::Blobs => {
                gen_gaussian_blobs(seed, &parse_centers(&args.centers)?, args.std, per_class)
            }
            DataKind::Moons => gen_moons(seed, args.noise_std, per_class),
        }
    };
    let train = gen(args.seed, args.train_per_class)?;
    write_csv(&train, &args.train_out)?;
    if args.test_per_class > 0 {
        let test = gen(args.seed + 1, args.test_per_class)?;
        write_csv(&test, args.test_out.as_ref().unwrap())?;
    }
    println!(
        "{}",
        json!({
            "type": "gen-data",
            "train_samples": train.len(),
            "test_samples": args.test_per_class * train.num_classes(),
            "dim": train.dim(),
            "classes": train.num_classes(),
        })
    );
    Ok(())
}

fn cmd_train_mlp(
    data: &Path,
    widths: &str,
    epochs: usize,
    lr: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_csv(data)?;
    let widths: Vec<usize> = parse_list(widths, "width")?;
    let (mlp, stats) = train_mlp(&ds, &widths, epochs, lr, seed)?;
    mlp.save(out)?;
    println!(
        "{}",
        json!({
            "type": "train-mlp",
            "final_loss": stats.final_loss,
            "train_accuracy": stats.train_accuracy,
        })
    );
    Ok(())
}

fn cmd_fit_affine(
    data: &Path,
    mlp: &Path,
    layers: &str,
    pool: usize,
    rank: usize,
    out: &Path,
) -> Result<()> {
    let ds = load_csv(data)?;
    let mlp = Mlp::load(mlp)?;
    let sources: Vec<LayerHandle> = parse_list::<usize>(layers, "layer")?
        .into_iter()
        .map(LayerHandle::post)
        .collect();
    let map = fit_affine(&ds, &mlp, &sources, pool, rank)?;
    map.save(out)?;
    println!("{}", json!({ "type": "fit-affine", "rank": rank }));
    Ok(())
}

fn cmd_attack(
    config: &Path,
    index: usize,
    seed: Option<u64>,
    dump_adv: Option<&Path>,
) -> Result<()> {
    let (cfg, model, test) = load_instances(config, seed)?;
    check_index(&test, index)?;
    let x = test.feature(index);
    let y = test.label(index);
    let clean = model.classify(x)?.predicted;
    let attack_cfg = cfg
        .attack
        .to_config(model.k(), sample_seed(cfg.eval.seed, index))?;
    let res = run_attack(&model, x, y, &attack_cfg)?;
    println!(
        "{}",
        json!({
            "type": "attack",
            "index": index,
            "label": y,
            "clean_prediction": clean,
            "success": res.success,
            "norm": res.norm,
            "steps": res.steps,
            "restarts": res.restarts_used,
        })
    );
    if let Some(path) = dump_adv {
        match &res.adv {
            Some(adv) => dump_adversarial(&model, adv, path)?,
            None => {
                return Err(Error::Validation(
                    "attack found no adversarial example; nothing to dump".into(),
                ))
            }
        }
    }
    Ok(())
}

fn cmd_oracle(config: &Path, index: usize, dump_adv: Option<&Path>) -> Result<()> {
    let (_cfg, model, test) = load_instances(config, None)?;
    check_index(&test, index)?;
    let x = test.feature(index);
    let y = test.label(index);
    let clean = model.classify(x)?.predicted;
    let res = exact_min_attack(&model, x, y)?;
    let (found, norm, subsets, qps, adv) = match &res {
        Some(o) => (
            true,
            Some(o.norm),
            o.subsets_examined,
            o.qps_solved,
            Some(&o.adv),
        ),
        None => (false, None, 0, 0, None),
    };
    println!(
        "{}",
        json!({
            "type": "oracle",
            "index": index,
            "label": y,
            "clean_prediction": clean,
            "found": found,
            "norm": norm,
            "subsets": subsets,
            "qps": qps,
        })
    );
    if let Some(path) = dump_adv {
        match adv {
            Some(adv) => dump_adversarial(&model, adv, path)?,
            None => {
                return Err(Error::Validation(
                    "no adversarial example exists; nothing to dump".into(),
                ))
            }
        }
    }
    Ok(())
}

fn cmd_eval(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Argument("--workers must be positive".into()));
        }
        cfg.eval.workers = w;
    }
    let (records, summary) = run_experiment(&cfg)?;
    match out {
        Some(path) => {
            write_report(path, &records, &summary)?;
            println!("{}", render_summary(&summary));
        }
        None => print!("{}", render_report(&records, &summary)),
    }
    Ok(())
}

fn cmd_report(input: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input.to_path_buf(), e))?;
    let (records, _stored) = parse_report(&text)?;
    let recomputed = compute_metrics(&records);
    if render_report(&records, &recomputed) != text {
        return Err(Error::Validation(format!(
            "report {} does not match its own sample lines",
            input.display()
        )));
    }
    println!("{}", render_summary(&recomputed));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(&args),
        Cmd::TrainMlp {
            data,
            widths,
            epochs,
            lr,
            seed,
            out,
        } => cmd_train_mlp(&data, &widths, epochs, lr, seed, &out),
        Cmd::FitAffine {
            data,
            mlp,
            layers,
            pool,
            rank,
            out,
        } => cmd_fit_affine(&data, &mlp, &layers, pool, rank, &out),
        Cmd::Attack {
            config,
            index,
            seed,
            dump_adv,
        } => cmd_attack(&config, index, seed, dump_adv.as_deref()),
        Cmd::Oracle {
            config,
            index,
            dump_adv,
        } => cmd_oracle(&config, index, dump_adv.as_deref()),
        Cmd::Eval {
            config,
            out,
            seed,
            workers,
        } => cmd_eval(&config, out.as_deref(), seed, workers),
        Cmd::Report { input } => cmd_report(&input),
    }
}

/// Usage problems (bad arguments, malformed configuration) exit 1 so
/// scripts can tell them from genuine runtime failures, which exit 2.
fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Argument(_) | Error::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are not errors; everything else is a
            // usage problem.
            let usage = err.use_stderr();
            let _ = err.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            exit_code(&err)
        }
    }
}
