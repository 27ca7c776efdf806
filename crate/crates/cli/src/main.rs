//! `curate`: pretrain, probe, score, export and ablate from the command line.
//!
//! Exit codes: 0 success, 2 configuration, 3 data or I/O, 4 numerical abort.

mod manifest;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use curate_core::augment::{corrupt_view, make_pair, Corruption, TransformSpec};
use curate_core::config::{ProbeKind, RunConfig};
use curate_core::curation::FeatureSource;
use curate_core::data::{iterate_batches, BatchPlan, ImageDataset, Split};
use curate_core::eval::{export_embeddings, extract_embeddings, knn_probe, linear_probe};
use curate_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use curate_core::rng::{derive_path, derive_seed, rng_from};
use curate_core::trainer::{
    final_checkpoint_path, metrics_path, pretrain, resolve_encoder, resolve_transform, run_ablation, score_batch,
    ABLATION_HEADER,
};
use curate_core::Error;

use manifest::{now_ms, RunManifest};

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }
    }

    fn data(message: String) -> Self {
        Failure { code: 3, message }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "curate", version, about = "Contrastive pretraining with FRD batch curation")]
struct Cli {
    /// Dataset root for MNIST / CIFAR-10 files.
    #[arg(long, global = true, env = "CURATE_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Linear,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    H,
    Z,
}

impl From<SourceArg> for FeatureSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::H => FeatureSource::Encoder,
            SourceArg::Z => FeatureSource::Projection,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptArg {
    Blackout,
    UniformNoise,
    ExtremeDarken,
}

impl From<CorruptArg> for Corruption {
    fn from(c: CorruptArg) -> Self {
        match c {
            CorruptArg::Blackout => Corruption::Blackout,
            CorruptArg::UniformNoise => Corruption::UniformNoise,
            CorruptArg::ExtremeDarken => Corruption::ExtremeDarken { factor: 0.05 },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; writes metrics.csv, model.ckpt and manifest.json.
    Pretrain {
        /// Configuration file (`key = value` lines).
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        /// Rerun the configuration recorded in an earlier manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized (untrained) checkpoint and its manifest.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with a frozen-feature probe.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        probe: Option<ProbeArg>,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
        /// Neighbours for the k-NN probe.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Print per-batch FRD scores for freshly augmented training batches.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        /// Damage the second view of every pair.
        #[arg(long, value_enum)]
        corrupt: Option<CorruptArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export embeddings in EMB1 format.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "h")]
        source: SourceArg,
    },
    /// Pretrain and k-NN-probe every {regularizer × curation × seed} cell.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn checkpoint_context(
    checkpoint: &Path,
    root_flag: Option<&Path>,
) -> CliResult<(ModelParams, RunManifest, RunConfig, Option<PathBuf>)> {
    let model = load_checkpoint(checkpoint)?;
    let manifest = RunManifest::beside(checkpoint)?;
    let cfg = manifest.run_config()?;
    let root = root_flag.map(Path::to_path_buf).or_else(|| manifest.data_root.clone());
    Ok((model, manifest, cfg, root))
}

fn eval_transform(cfg: &RunConfig, manifest: &RunManifest) -> TransformSpec {
    TransformSpec {
        norm: manifest.norm(),
        ..cfg.train.transform.clone()
    }
}

fn check_fingerprint(manifest: &RunManifest, train: &ImageDataset) -> CliResult {
    let found = train.fingerprint();
    if found != manifest.dataset.train_fingerprint {
        return Err(Failure::data(format!(
            "training data fingerprint {found} does not match the manifest's {}",
            manifest.dataset.train_fingerprint
        )));
    }
    Ok(())
}

fn cmd_pretrain(
    config: Option<&Path>,
    from_manifest: Option<&Path>,
    out: &Path,
    root_flag: Option<&Path>,
) -> CliResult {
    let started = now_ms();
    let (cfg, root, expected) = match (config, from_manifest) {
        (Some(path), _) => (RunConfig::load(path)?, root_flag.map(Path::to_path_buf), None),
        (None, Some(path)) => {
            let m = RunManifest::read(path)?;
            let root = root_flag.map(Path::to_path_buf).or_else(|| m.data_root.clone());
            (m.run_config()?, root, Some(m))
        }
        (None, None) => unreachable!("clap requires one of --config / --manifest"),
    };
    let train = cfg.data.load(root.as_deref(), Split::Train)?;
    if let Some(m) = &expected {
        check_fingerprint(m, &train)?;
    }
    create_dir(out)?;
    eprintln!(
        "pretraining on {} images ({}), {} epochs, seed {}",
        train.len(),
        cfg.data.dataset,
        cfg.train.epochs,
        cfg.train.seed
    );
    let outcome = pretrain(&train, &cfg.train, Some(out), &mut |s| {
        let tau = s.threshold.map_or(String::from("-"), |t| format!("{t:.4}"));
        eprintln!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  updates {}  reaugmented {}  skipped {}  tau {tau}",
            s.epoch, s.lr, s.mean_total, s.updates, s.reaugmented, s.skipped
        );
    })?;
    let mut manifest = RunManifest::new("pretrain", &cfg, &train, root.as_deref(), started);
    manifest.set_norm(outcome.transform.norm.as_ref());
    manifest.threshold = outcome.threshold.as_ref().map(|t| t.tau_frd);
    manifest.outputs.insert("metrics".into(), metrics_path(out));
    manifest.outputs.insert("checkpoint".into(), final_checkpoint_path(out));
    manifest.finished_unix_ms = now_ms();
    manifest.write(out)?;
    println!("{}", final_checkpoint_path(out).display());
    Ok(())
}

fn cmd_init(config: &Path, out: &Path, root_flag: Option<&Path>) -> CliResult {
    let started = now_ms();
    let cfg = RunConfig::load(config)?;
    let train = cfg.data.load(root_flag, Split::Train)?;
    create_dir(out)?;
    let model = ModelParams::init(&resolve_encoder(&cfg.train, &train))?;
    let ckpt = final_checkpoint_path(out);
    save_checkpoint(&model, &ckpt)?;
    let mut manifest = RunManifest::new("init", &cfg, &train, root_flag, started);
    manifest.set_norm(resolve_transform(&cfg.train, &train).norm.as_ref());
    manifest.outputs.insert("checkpoint".into(), ckpt.clone());
    manifest.finished_unix_ms = now_ms();
    manifest.write(out)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_probe(
    checkpoint: &Path,
    probe: Option<ProbeArg>,
    source: Option<SourceArg>,
    k: Option<usize>,
    root_flag: Option<&Path>,
) -> CliResult {
    let (model, manifest, cfg, root) = checkpoint_context(checkpoint, root_flag)?;
    let train = cfg.data.load(root.as_deref(), Split::Train)?;
    check_fingerprint(&manifest, &train)?;
    let test = cfg.data.load(root.as_deref(), Split::Test)?;
    let kind = match probe {
        Some(ProbeArg::Linear) => ProbeKind::Linear,
        Some(ProbeArg::Knn) => ProbeKind::Knn,
        None => cfg.probe.kind,
    };
    let source = source.map_or(cfg.probe.knn.source, FeatureSource::from);
    let k = k.unwrap_or(cfg.probe.knn.k);
    let spec = eval_transform(&cfg, &manifest);
    let id = checkpoint.display().to_string();
    let tr = extract_embeddings(&model, &train, &spec, source, &id)?;
    let te = extract_embeddings(&model, &test, &spec, source, &id)?;
    let accuracy = match kind {
        ProbeKind::Knn => knn_probe(&tr, &te, k)?,
        ProbeKind::Linear => linear_probe(&tr, &te, &cfg.probe.linear)?,
    };
    println!("{accuracy:.4}");
    let record = serde_json::json!({
        "checkpoint": id,
        "probe": kind.to_string(),
        "source": source.to_string(),
        "k": (kind == ProbeKind::Knn).then_some(k),
        "linear": (kind == ProbeKind::Linear).then(|| serde_json::json!({
            "epochs": cfg.probe.linear.epochs,
            "lr": cfg.probe.linear.lr,
            "seed": cfg.probe.linear.seed,
        })),
        "top1": accuracy,
        "train_fingerprint": train.fingerprint(),
        "test_fingerprint": test.fingerprint(),
        "test_count": test.len(),
        "unix_ms": now_ms(),
    });
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(format!("{stem}.probe-{kind}-{source}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&record).expect("json") + "\n")
        .map_err(|e| Failure::io(&path, e))?;
    Ok(())
}

const SCORE_TAG: u64 = 0x5C0E;

fn cmd_score(
    checkpoint: &Path,
    batches: usize,
    corrupt: Option<CorruptArg>,
    seed: Option<u64>,
    root_flag: Option<&Path>,
) -> CliResult {
    if batches == 0 {
        return Err(Error::Config("--batches must be at least 1".into()).into());
    }
    let (model, manifest, cfg, root) = checkpoint_context(checkpoint, root_flag)?;
    let train = cfg.data.load(root.as_deref(), Split::Train)?;
    check_fingerprint(&manifest, &train)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let spec = eval_transform(&cfg, &manifest);
    let plan = BatchPlan {
        seed: derive_seed(seed, SCORE_TAG),
        batch_size: cfg.train.batch_size,
        drop_last: true,
    };
    let mut stdout = std::io::stdout().lock();
    let threshold = manifest.threshold;
    let header = if threshold.is_some() {
        "batch\tfrd\taccepted"
    } else {
        "batch\tfrd"
    };
    writeln!(stdout, "{header}").ok();
    let mut scores = Vec::with_capacity(batches);
    let mut epoch = 0u64;
    while scores.len() < batches {
        for indices in iterate_batches(train.len(), &plan, epoch)? {
            if scores.len() == batches {
                break;
            }
            let i = scores.len() as u64;
            let draw = derive_path(seed, &[SCORE_TAG, i]);
            let mut pair = make_pair(&train, &indices, &spec, draw)?;
            if let Some(c) = corrupt {
                pair = corrupt_view(&pair, c.into(), &mut rng_from(derive_seed(draw, 7)));
            }
            let frd = score_batch(&model, &pair, &cfg.train.curation)?;
            match threshold {
                Some(t) => writeln!(stdout, "{i}\t{frd:.6}\t{}", frd <= t).ok(),
                None => writeln!(stdout, "{i}\t{frd:.6}").ok(),
            };
            scores.push(frd);
        }
        epoch += 1;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    writeln!(stdout, "mean\t{mean:.6}").ok();
    if let Some(t) = threshold {
        writeln!(stdout, "threshold\t{t:.6}").ok();
    }
    Ok(())
}

fn cmd_export(
    checkpoint: &Path,
    out: &Path,
    split: SplitArg,
    source: SourceArg,
    root_flag: Option<&Path>,
) -> CliResult {
    let (model, manifest, cfg, root) = checkpoint_context(checkpoint, root_flag)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = cfg.data.load(root.as_deref(), split)?;
    let spec = eval_transform(&cfg, &manifest);
    let set = extract_embeddings(&model, &ds, &spec, source.into(), &checkpoint.display().to_string())?;
    export_embeddings(&set, out)?;
    println!("{} embeddings of dim {} -> {}", set.len(), set.dim(), out.display());
    Ok(())
}

fn cmd_ablation(config: &Path, out: &Path, jobs: usize, root_flag: Option<&Path>) -> CliResult {
    let started = now_ms();
    let cfg = RunConfig::load(config)?;
    let train = cfg.data.load(root_flag, Split::Train)?;
    let test = cfg.data.load(root_flag, Split::Test)?;
    create_dir(out)?;
    let cells = cfg.ablation.cells();
    eprintln!(
        "ablation: {} cells x {} seeds on {} ({} train / {} test)",
        cells.len(),
        cfg.ablation.seeds.len(),
        cfg.data.dataset,
        train.len(),
        test.len()
    );
    let rows = run_ablation(
        &train,
        &test,
        &cells,
        &cfg.ablation.seeds,
        &cfg.train,
        &cfg.probe.knn,
        jobs,
        &mut |r| {
            let acc = r
                .accuracy
                .as_ref()
                .map_or_else(|e| format!("failed: {e}"), |a| format!("{a:.4}"));
            eprintln!(
                "seed {}  frd {:<3}  {:<22} {acc}",
                r.seed,
                if r.cell.curation { "on" } else { "off" },
                r.cell.loss_label()
            );
        },
    )?;
    let table = out.join("ablation.csv");
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(&table, text).map_err(|e| Failure::io(&table, e))?;
    let mut manifest = RunManifest::new("ablation", &cfg, &train, root_flag, started).with_test(&test);
    manifest.set_norm(resolve_transform(&cfg.train, &train).norm.as_ref());
    manifest.outputs.insert("table".into(), table.clone());
    manifest.finished_unix_ms = now_ms();
    manifest.write(out)?;
    println!("{}", table.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let root = cli.data_root.as_deref();
    match &cli.command {
        Command::Pretrain { config, manifest, out } => cmd_pretrain(config.as_deref(), manifest.as_deref(), out, root),
        Command::Init { config, out } => cmd_init(config, out, root),
        Command::Probe {
            checkpoint,
            probe,
            source,
            k,
        } => cmd_probe(checkpoint, *probe, *source, *k, root),
        Command::Score {
            checkpoint,
            batches,
            corrupt,
            seed,
        } => cmd_score(checkpoint, *batches, *corrupt, *seed, root),
        Command::Export {
            checkpoint,
            out,
            split,
            source,
        } => cmd_export(checkpoint, out, *split, *source, root),
        Command::Ablation { config, out, jobs } => cmd_ablation(config, out, *jobs, root),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
