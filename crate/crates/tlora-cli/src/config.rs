//! Flag/file/default resolution for `tlora train`.
//!
//! Precedence: command-line flags > JSON config file > `TLORA_LAB_SEED`
//! (seed only) > built-in defaults. The fully resolved configuration is
//! persisted as the run's `config.json`, so every run is self-describing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use tlora_core::adapters::{AdapterConfig, Method};
use tlora_core::data::{SynthSpec, TsvSchema};
use tlora_core::error::{Error, Result};
use tlora_core::model::ModelConfig;
use tlora_core::rng::derive_seed;
use tlora_core::train::TrainConfig;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "TLORA_LAB_SEED";

/// Calibrated synthetic-task defaults: large enough to force generalization,
/// small enough to train in seconds.
pub const SYNTH_N_EXAMPLES: usize = 512;
pub const SYNTH_VOCAB: usize = 12;
pub const SYNTH_SEQ_LEN: usize = 4;

/// Vocabulary cap when loading TSV tasks.
pub const TSV_VOCAB_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MethodArg {
    Tlora,
    Lora,
    /// No adapters: the zero-trainable control arm.
    Frozen,
}

impl MethodArg {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodArg::Tlora => "tlora",
            MethodArg::Lora => "lora",
            MethodArg::Frozen => "frozen",
        }
    }

    pub fn adapter_method(self) -> Option<Method> {
        match self {
            MethodArg::Tlora => Some(Method::Tlora),
            MethodArg::Lora => Some(Method::Lora),
            MethodArg::Frozen => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Task {
    Synth,
    Tsv(String),
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        if s == "synth" {
            return Ok(Task::Synth);
        }
        if let Some(path) = s.strip_prefix("tsv:") {
            if path.is_empty() {
                return Err(Error::Usage("empty path in 'tsv:PATH'".into()));
            }
            return Ok(Task::Tsv(path.to_string()));
        }
        Err(Error::Usage(format!(
            "unknown task '{s}': expected 'synth' or 'tsv:PATH'"
        )))
    }
}

/// Optional JSON config file; flags override any field set here.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<String>,
    pub rank: Option<usize>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub dropout: Option<f64>,
    pub weight_decay: Option<f64>,
    pub snapshot_every: Option<usize>,
    pub lora_fixed_alpha: Option<f64>,
    pub target_sites: Option<Vec<String>>,
    pub n_examples: Option<usize>,
    pub vocab_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub tsv_schema: Option<TsvSchema>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
    }
}

/// Fully resolved training invocation.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub method: MethodArg,
    pub task: Task,
    pub seed: u64,
    pub adapter: Option<AdapterConfig>,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub tsv_schema: TsvSchema,
    pub vocab_cap: usize,
    /// Model dimensions; `vocab_size` is filled in after the vocabulary is
    /// built from the data.
    pub model_template: ModelConfig,
}

pub struct TrainFlags {
    pub method: Option<MethodArg>,
    pub rank: Option<usize>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub dropout: Option<f64>,
}

pub fn resolve(flags: TrainFlags, file: FileConfig) -> Result<Resolved> {
    let env_seed = std::env::var(SEED_ENV)
        .ok()
        .map(|v| {
            v.parse::<u64>().map_err(|_| {
                Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))
            })
        })
        .transpose()?;
    let seed = flags.seed.or(file.seed).or(env_seed).unwrap_or(DEFAULT_SEED);

    let method = match (flags.method, file.method.as_deref()) {
        (Some(m), _) => m,
        (None, Some("tlora")) => MethodArg::Tlora,
        (None, Some("lora")) => MethodArg::Lora,
        (None, Some("frozen")) => MethodArg::Frozen,
        (None, Some(other)) => {
            return Err(Error::Usage(format!(
                "config file method '{other}' is not one of tlora|lora|frozen"
            )))
        }
        (None, None) => MethodArg::Tlora,
    };

    let task = Task::parse(
        flags
            .task
            .or(file.task.clone())
            .as_deref()
            .unwrap_or("synth"),
    )?;

    let adapter = method.adapter_method().map(|m| {
        let mut a = AdapterConfig::new(m);
        if let Some(r) = flags.rank.or(file.rank) {
            a.rank = r;
        }
        if let Some(p) = flags.dropout.or(file.dropout) {
            a.dropout_p = p;
        }
        a.lora_fixed_alpha = file.lora_fixed_alpha;
        if let Some(sites) = &file.target_sites {
            a.target_sites = sites.clone();
        }
        a
    });

    let mut train = TrainConfig::new(seed);
    if let Some(e) = flags.epochs.or(file.epochs) {
        train.epochs = e;
    }
    if let Some(lr) = flags.lr.or(file.lr) {
        train.learning_rate = lr;
    }
    if let Some(b) = flags.batch.or(file.batch) {
        train.batch_size = b;
    }
    if let Some(wd) = file.weight_decay {
        train.weight_decay = wd;
    }
    if let Some(s) = file.snapshot_every {
        train.snapshot_every = s;
    }

    let synth = SynthSpec::new(
        file.n_examples.unwrap_or(SYNTH_N_EXAMPLES),
        file.vocab_size.unwrap_or(SYNTH_VOCAB),
        file.seq_len.unwrap_or(SYNTH_SEQ_LEN),
        derive_seed(seed, "synth"),
    );

    let mut model_template = ModelConfig::toy(0);
    if let Some(d) = file.d_model {
        model_template.d_model = d;
    }
    if let Some(h) = file.n_heads {
        model_template.n_heads = h;
    }
    if let Some(l) = file.n_layers {
        model_template.n_layers = l;
    }
    if let Some(f) = file.ffn_mult {
        model_template.ffn_mult = f;
    }
    if let Some(m) = file.max_seq_len {
        model_template.max_seq_len = m;
    }

    let vocab_cap = match task {
        Task::Synth => synth.vocab_size,
        Task::Tsv(_) => file.vocab_size.unwrap_or(TSV_VOCAB_CAP),
    };

    Ok(Resolved {
        method,
        task,
        seed,
        adapter,
        train,
        synth,
        tsv_schema: file.tsv_schema.unwrap_or_default(),
        vocab_cap,
        model_template,
    })
}

/// Seeds derived for the run, recorded in the manifest for transparency.
pub fn seed_derivations(resolved: &Resolved, n_layers: usize) -> BTreeMap<String, u64> {
    let seed = resolved.seed;
    let mut out = BTreeMap::new();
    for name in ["model", "dropout", "synth", "tsv-split"] {
        out.insert(name.to_string(), derive_seed(seed, name));
    }
    out.insert(
        "shuffle/epoch1".into(),
        derive_seed(seed, "shuffle/epoch1"),
    );
    if resolved.adapter.is_some() {
        for layer in 0..n_layers {
            for proj in ["q", "v"] {
                let comp = format!("adapter/layer{layer}.{proj}");
                out.insert(comp.clone(), derive_seed(seed, &comp));
            }
        }
    }
    out
}
