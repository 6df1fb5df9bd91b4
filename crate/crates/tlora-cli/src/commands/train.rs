use std::path::{Path, PathBuf};

use clap::Args;
use tlora_core::adapters::{attach_adapters, AdaptedModel};
use tlora_core::data::{build_vocab, gen_synthetic, load_tsv, to_tsv, EncodedDataset, Example};
use tlora_core::error::{Error, Result};
use tlora_core::model::build_model;
use tlora_core::rng::{component_rng, derive_seed};
use tlora_core::rundir;
use tlora_core::train::{train, RunSink};

use crate::config::{self, resolve, FileConfig, MethodArg, Resolved, Task, TrainFlags};

#[derive(Args)]
pub struct TrainArgs {
    /// Adaptation method
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Adapter rank r
    #[arg(long)]
    rank: Option<usize>,
    /// Task: `synth` or `tsv:PATH`
    #[arg(long)]
    task: Option<String>,
    /// Run seed (falls back to TLORA_LAB_SEED, then 42)
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create (must not already contain files)
    #[arg(long)]
    out: PathBuf,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Dropout on the adapter update Δh
    #[arg(long)]
    dropout: Option<f64>,
    /// JSON config file; command-line flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let resolved = resolve(
        TrainFlags {
            method: args.method,
            rank: args.rank,
            task: args.task,
            seed: args.seed,
            epochs: args.epochs,
            lr: args.lr,
            batch: args.batch,
            dropout: args.dropout,
        },
        file,
    )?;

    rundir::create_run_dir(&args.out)?;
    rundir::mark_incomplete(&args.out)?;
    execute(&args.out, &resolved)?;
    rundir::clear_incomplete(&args.out)?;
    Ok(())
}

fn execute(out: &Path, resolved: &Resolved) -> Result<()> {
    // Data: generate or load, persist as TSV, fingerprint the bytes.
    let (train_ex, val_ex, dataset_info) = prepare_data(out, resolved)?;

    let vocab = build_vocab(&train_ex, resolved.vocab_cap)?;
    let mut model_cfg = resolved.model_template.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.n_classes = match &resolved.task {
        Task::Synth => 2,
        Task::Tsv(_) => resolved.tsv_schema.labels.len(),
    };

    let train_data = EncodedDataset::encode(&vocab, &train_ex, model_cfg.max_seq_len, model_cfg.n_classes)?;
    let val_data = EncodedDataset::encode(&vocab, &val_ex, model_cfg.max_seq_len, model_cfg.n_classes)?;

    let mut base = build_model(&model_cfg, derive_seed(resolved.seed, "model"))?;
    base.freeze_all();
    let mut model = match &resolved.adapter {
        Some(acfg) => attach_adapters(base, acfg, resolved.seed)?,
        None => AdaptedModel::frozen(base)?,
    };

    rundir::write_model(out, &model.base)?;
    let manifest = rundir::RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        method: resolved.method.as_str().to_string(),
        rank: resolved.adapter.as_ref().map(|a| a.rank),
        seed: resolved.seed,
        seed_derivations: config::seed_derivations(resolved, model_cfg.n_layers),
        dataset: dataset_info,
        model: model_cfg.clone(),
        adapter: resolved.adapter.clone(),
        train: resolved.train.clone(),
    };
    rundir::write_config(out, &manifest)?;

    let mut sink = RunSink::create(out, &model)?;
    let run = train(&mut model, &train_data, &val_data, &resolved.train, Some(&mut sink))?;

    let last = run.snapshots.last().expect("at least the epoch-0 snapshot");
    println!(
        "run complete: {} ({} trainable parameters)",
        out.display(),
        model.trainable_param_count()
    );
    println!(
        "  epoch {:>3}: train_loss {:.4}  val_loss {:.4}  val_acc {:.4}",
        last.epoch, last.train_loss, last.val_loss, last.val_acc
    );
    Ok(())
}

fn prepare_data(
    out: &Path,
    resolved: &Resolved,
) -> Result<(Vec<Example>, Vec<Example>, rundir::DatasetInfo)> {
    match &resolved.task {
        Task::Synth => {
            let (train_ex, val_ex) = gen_synthetic(&resolved.synth)?;
            let train_tsv = to_tsv(&train_ex);
            let val_tsv = to_tsv(&val_ex);
            let train_path = rundir::dataset_path(out);
            std::fs::write(&train_path, &train_tsv).map_err(|e| Error::io(&train_path, e))?;
            let val_path = out.join("dataset_val.tsv");
            std::fs::write(&val_path, &val_tsv).map_err(|e| Error::io(&val_path, e))?;
            let fingerprint =
                rundir::sha256_hex([train_tsv.as_bytes(), val_tsv.as_bytes()].concat().as_slice());
            Ok((
                train_ex,
                val_ex,
                rundir::DatasetInfo {
                    kind: "synth".into(),
                    synth: Some(resolved.synth.clone()),
                    tsv_path: None,
                    fingerprint_sha256: fingerprint,
                },
            ))
        }
        Task::Tsv(path) => {
            let src = PathBuf::from(path);
            let bytes = std::fs::read(&src).map_err(|e| Error::io(&src, e))?;
            let examples = load_tsv(&src, &resolved.tsv_schema)?;
            if examples.len() < 2 {
                return Err(Error::Data(format!(
                    "{path}: need at least 2 examples to split train/val"
                )));
            }
            // Deterministic 80/20 split.
            let mut rng = component_rng(resolved.seed, "tsv-split");
            let order = tlora_core::data::shuffled_indices(examples.len(), &mut rng);
            let n_val = (examples.len() / 5).max(1);
            let val_ex: Vec<Example> = order[..n_val].iter().map(|&i| examples[i].clone()).collect();
            let train_ex: Vec<Example> =
                order[n_val..].iter().map(|&i| examples[i].clone()).collect();
            let copy_path = rundir::dataset_path(out);
            std::fs::write(&copy_path, &bytes).map_err(|e| Error::io(&copy_path, e))?;
            Ok((
                train_ex,
                val_ex,
                rundir::DatasetInfo {
                    kind: "tsv".into(),
                    synth: None,
                    tsv_path: Some(path.clone()),
                    fingerprint_sha256: rundir::sha256_hex(&bytes),
                },
            ))
        }
    }
}
