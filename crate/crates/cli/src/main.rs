//! `iterseg`: train, run and evaluate the iterative segmentation network.
//!
//! Exit codes: 0 success, 2 configuration/checkpoint error, 3 data error,
//! 4 numeric divergence during training. Diagnostics go to stderr; stdout
//! carries `key=value` summaries only.

mod config;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use iterseg_core::data::{
    self, augment, load_dataset, synth_corpus, tensor_to_gray8, write_mask_png, write_pgm16,
    write_pgm8, Sample, Split,
};
use iterseg_core::engine::{self, evaluate, infer, mean_curve, train};
use iterseg_core::network::ParameterSet;
use iterseg_core::trace::write_trace_csv;
use iterseg_core::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "iterseg",
    version,
    about = "Iterative encoder-decoder image segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a checkpoint plus training curves.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<timestamp>-train).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Overrides iter.max_iterations.
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-iteration DC/JC metrics of a checkpoint over the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides iter.max_iterations (the fixed iteration count).
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize the augmentation grid of a dataset on disk.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus (images, masks, split file).
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Ok(threads) = std::env::var("ITERSEG_THREADS") {
        if threads.parse::<usize>().is_ok() {
            // cap both worker pools: rayon (per-image fan-out) and the
            // GEMM backend
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.parse().unwrap())
                .build_global();
            if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
                std::env::set_var("MATMUL_NUM_THREADS", &threads);
            }
        } else {
            eprintln!("warning: ITERSEG_THREADS=`{threads}` is not a number, ignored");
        }
    }
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Diverged(_) => 4,
        Error::Graph(_) => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Infer {
            config,
            checkpoint,
            image,
            max_iter,
            out,
        } => cmd_infer(&config, &checkpoint, &image, max_iter, out),
        Command::Evaluate {
            config,
            checkpoint,
            max_iter,
            out,
        } => cmd_evaluate(&config, &checkpoint, max_iter, out),
        Command::Augment { config, out } => cmd_augment(&config, out),
        Command::Synth { config, seed, out } => cmd_synth(&config, seed, out),
    }
}

fn run_dir(out: Option<PathBuf>, tag: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("{stamp}-{tag}"))
    });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.set("seed", seed.to_string());
    }
    Ok(config)
}

/// Training samples come either from `data.root` (with an optional split
/// file restricting to the train part) or from the synthetic generator.
fn load_samples(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let net = config.network()?;
    let seed = config.seed()?;
    match config.data_root() {
        Some(root) => {
            let loaded = load_dataset::<f32>(&root, net.input_height, net.input_width)?;
            for warning in &loaded.warnings {
                eprintln!("warning: {warning}");
            }
            let split_path = config.split_path().expect("root implies split path");
            if split_path.is_file() {
                let split = Split::load(&split_path)?;
                split.partition(&loaded.samples)
            } else {
                Ok((loaded.samples, Vec::new()))
            }
        }
        None => {
            let samples = synth_corpus::<f32>(
                config.synth_count()?,
                net.input_height,
                net.input_width,
                config.synth_family()?,
                seed,
            )?;
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let split = Split::seeded(&ids, config.synth_train()?.min(ids.len()), seed)?;
            split.partition(&samples)
        }
    }
}

fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let net = config.network()?;
    let iter_cfg = config.iteration(&net)?;
    let loss_cfg = config.loss()?;
    let opt = config.optimizer()?;
    let seed = config.seed()?;

    let (train_samples, _) = load_samples(&config)?;
    if train_samples.is_empty() {
        return Err(Error::Data(
            "no training samples (empty dataset or split)".into(),
        ));
    }

    let dir = run_dir(out, "train")?;
    std::fs::write(dir.join("resolved.cfg"), config.resolved())
        .map_err(|e| Error::io(dir.join("resolved.cfg"), e))?;

    let mut params = ParameterSet::<f32>::build(&net, seed)?;
    let summaries = train(&mut params, &train_samples, &iter_cfg, &loss_cfg, &opt)?;

    let checkpoint = dir.join("checkpoint.iseg");
    params.save_checkpoint(&checkpoint)?;
    let trace = dir.join("train_trace.csv");
    engine::write_train_csv(&trace, &summaries)?;

    println!("checkpoint={}", checkpoint.display());
    println!("train_trace={}", trace.display());
    if let Some(last) = summaries.last() {
        for row in &last.rows {
            println!(
                "epoch={} iteration={} mean_dice={:.6} mean_loss={:.6}",
                last.epoch, row.iteration, row.mean_dice, row.mean_loss
            );
        }
    }
    Ok(())
}

fn cmd_infer(
    config_path: &Path,
    checkpoint: &Path,
    image_path: &Path,
    max_iter: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_path, None)?;
    let net = config.network()?;
    let mut iter_cfg = config.iteration(&net)?;
    if let Some(n) = max_iter {
        iter_cfg.max_iterations = n;
        iter_cfg.validate()?;
    }

    let params = ParameterSet::<f32>::load_checkpoint(checkpoint, &net)?;
    let image = data::load_image_tensor::<f32>(image_path, net.input_height, net.input_width)?;
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");

    let dir = run_dir(out, "infer")?;
    let (map, trace) = infer(&params, &image, id, &iter_cfg)?;

    let mask_path = dir.join(format!("{id}_mask.png"));
    write_mask_png(
        &mask_path,
        map.binarized(iter_cfg.binarize_threshold).values(),
    )?;
    let soft_path = dir.join(format!("{id}_soft.pgm"));
    let soft: Vec<u16> = map
        .values()
        .data()
        .iter()
        .map(|&v| (v as f64 * 65_535.0).round() as u16)
        .collect();
    write_pgm16(&soft_path, net.input_width, net.input_height, &soft)?;
    let trace_path = dir.join("trace.csv");
    write_trace_csv(&trace_path, std::slice::from_ref(&trace))?;

    println!("mask={}", mask_path.display());
    println!("soft={}", soft_path.display());
    println!("trace={}", trace_path.display());
    println!("iterations={}", trace.len());
    if let Some(last) = trace.records.last() {
        println!("final_conv_sum={}", last.conv_sum);
        println!("converged={}", last.conv_sum < iter_cfg.threshold);
    }
    Ok(())
}

fn cmd_evaluate(
    config_path: &Path,
    checkpoint: &Path,
    max_iter: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_path, None)?;
    let net = config.network()?;
    let mut iter_cfg = config.iteration(&net)?;
    if let Some(n) = max_iter {
        iter_cfg.max_iterations = n;
        iter_cfg.validate()?;
    }
    let params = ParameterSet::<f32>::load_checkpoint(checkpoint, &net)?;

    let (_, test_samples) = load_samples(&config)?;
    if test_samples.is_empty() {
        return Err(Error::Data(
            "no test samples (missing split or empty test part)".into(),
        ));
    }

    let dir = run_dir(out, "evaluate")?;
    let iterations = iter_cfg.max_iterations;
    let curves = evaluate(&params, &test_samples, &iter_cfg, iterations)?;

    let csv_path = dir.join("evaluate.csv");
    let mut wtr = csv::Writer::from_path(&csv_path).map_err(|e| Error::Data(e.to_string()))?;
    wtr.write_record(["image_id", "iteration", "dice", "jaccard", "conv_sum"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for curve in &curves {
        for row in &curve.rows {
            wtr.write_record([
                curve.image_id.clone(),
                row.iteration.to_string(),
                row.dice.to_string(),
                row.jaccard.to_string(),
                row.conv_sum.to_string(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    let means = mean_curve(&curves);
    // one summary row: unweighted means at the final iteration
    if let Some(&(iteration, dice, jaccard)) = means.last() {
        wtr.write_record([
            "mean".to_string(),
            iteration.to_string(),
            dice.to_string(),
            jaccard.to_string(),
            String::new(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(&csv_path, e))?;

    println!("evaluate_csv={}", csv_path.display());
    println!("images={}", curves.len());
    for (iteration, dice, jaccard) in &means {
        println!("iteration={iteration} mean_dice={dice:.6} mean_jaccard={jaccard:.6}");
    }
    Ok(())
}

fn cmd_augment(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config_path, None)?;
    let spec = config.augmentation()?;
    let (samples, _) = load_samples(&config)?;
    if samples.is_empty() {
        return Err(Error::Data("no samples to augment".into()));
    }

    let dir = run_dir(out, "augment")?;
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut files = 0usize;
    for sample in &samples {
        for variant in augment(sample, &spec)? {
            let (w, h, pixels) = tensor_to_gray8(&variant.image)?;
            write_pgm8(
                images_dir.join(format!("{}.pgm", variant.id)),
                w,
                h,
                &pixels,
            )?;
            let (w, h, mask) = tensor_to_gray8(variant.mask.values())?;
            write_pgm8(masks_dir.join(format!("{}.pgm", variant.id)), w, h, &mask)?;
            files += 1;
        }
    }

    println!("out={}", dir.display());
    println!("samples={}", samples.len());
    println!("variants_per_sample={}", spec.variant_count());
    println!("files={files}");
    Ok(())
}

fn cmd_synth(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let net = config.network()?;
    let seed = config.seed()?;
    let samples = synth_corpus::<f32>(
        config.synth_count()?,
        net.input_height,
        net.input_width,
        config.synth_family()?,
        seed,
    )?;

    let dir = run_dir(out, "synth")?;
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    for sample in &samples {
        let (w, h, pixels) = tensor_to_gray8(&sample.image)?;
        write_pgm8(images_dir.join(format!("{}.pgm", sample.id)), w, h, &pixels)?;
        let (w, h, mask) = tensor_to_gray8(sample.mask.values())?;
        write_pgm8(masks_dir.join(format!("{}.pgm", sample.id)), w, h, &mask)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = Split::seeded(&ids, config.synth_train()?.min(ids.len()), seed)?;
    split.save(dir.join("split.txt"))?;

    println!("out={}", dir.display());
    println!("samples={}", samples.len());
    println!("train={} test={}", split.train.len(), split.test.len());
    Ok(())
}
