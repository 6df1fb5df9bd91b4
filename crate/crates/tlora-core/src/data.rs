//! Synthetic sentence-pair tasks, a TSV loader, and a minimal tokenizer.
//!
//! The synthetic task is a paraphrase proxy: each text contains exactly one
//! marker token from a small marker set, and the label is 1 iff both texts
//! carry the same marker. Matching marker identity across segments is
//! attention-shaped on purpose, so adapting only query/value projections can
//! solve it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::component_rng;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const N_RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<cls>", "<sep>", "<unk>"];

/// Number of marker tokens in the synthetic task. Two markers make the task
/// a cross-segment equality test, the hardest case that is still reliably
/// learnable through query/value adapters on the frozen toy encoder.
pub const N_MARKERS: usize = 2;

/// One labeled example: a text pair (or single text) and an integer class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Synthetic-task parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Training-set size; the validation set is `n_examples / 4` (at least
    /// 2), generated from an independently derived seed.
    pub n_examples: usize,
    pub vocab_size: usize,
    /// Tokens per text segment (each segment holds exactly one marker).
    pub seq_len: usize,
    pub seed: u64,
    pub task: SynthTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    SharedMarker,
}

impl SynthSpec {
    pub fn new(n_examples: usize, vocab_size: usize, seq_len: usize, seed: u64) -> Self {
        SynthSpec {
            n_examples,
            vocab_size,
            seq_len,
            seed,
            task: SynthTask::SharedMarker,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size <= 8 {
            return Err(Error::Config(format!(
                "synthetic vocab_size must exceed 8, got {}",
                self.vocab_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::Config(format!(
                "synthetic seq_len must be >= 4, got {}",
                self.seq_len
            )));
        }
        if self.n_examples < 2 {
            return Err(Error::Config(format!(
                "synthetic n_examples must be >= 2, got {}",
                self.n_examples
            )));
        }
        Ok(())
    }
}

/// Marker token string, e.g. `mrk0`.
pub fn marker_token(i: usize) -> String {
    format!("mrk{i}")
}

/// Generate train and validation example sets. Labels alternate 1,0,1,0,…
/// so every generated set is balanced within one example.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    let n_val = (spec.n_examples / 4).max(2);
    let train = gen_split(spec, "synth/train", spec.n_examples);
    let val = gen_split(spec, "synth/val", n_val);
    Ok((train, val))
}

fn gen_split(spec: &SynthSpec, component: &str, n: usize) -> Vec<Example> {
    let mut rng = component_rng(spec.seed, component);
    let n_distractors = spec.vocab_size - N_RESERVED - N_MARKERS;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { 1 } else { 0 };
        let m_a = rng.gen_range(0..N_MARKERS);
        let m_b = if label == 1 {
            m_a
        } else {
            // Any marker other than m_a.
            (m_a + 1 + rng.gen_range(0..N_MARKERS - 1)) % N_MARKERS
        };
        let text_a = gen_text(&mut rng, m_a, spec.seq_len, n_distractors);
        let text_b = gen_text(&mut rng, m_b, spec.seq_len, n_distractors);
        out.push(Example {
            text_a,
            text_b: Some(text_b),
            label,
        });
    }
    out
}

/// One text segment: the designated marker fills half the positions (chosen
/// uniformly), distractors fill the rest. The repeated marker keeps the
/// marker signal comparable to the positional-embedding noise a frozen
/// random encoder injects, which is what makes the task learnable through
/// query/value adapters alone.
fn gen_text(
    rng: &mut rand_chacha::ChaCha8Rng,
    marker: usize,
    seq_len: usize,
    n_distractors: usize,
) -> String {
    let n_copies = (seq_len / 2).max(1);
    // Partial Fisher-Yates draw of the marker positions.
    let mut positions: Vec<usize> = (0..seq_len).collect();
    for i in 0..n_copies {
        let j = i + rng.gen_range(0..seq_len - i);
        positions.swap(i, j);
    }
    let marker_at = &positions[..n_copies];
    let mut words = Vec::with_capacity(seq_len);
    for pos in 0..seq_len {
        if marker_at.contains(&pos) {
            words.push(marker_token(marker));
        } else {
            words.push(format!("tok{}", rng.gen_range(0..n_distractors)));
        }
    }
    words.join(" ")
}

// ── TSV ──────────────────────────────────────────────────────────────────

/// Column declaration for TSV loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsvSchema {
    pub col_a: String,
    pub col_b: Option<String>,
    pub col_label: String,
    /// Declared label strings; a label's class index is its position here.
    pub labels: Vec<String>,
}

impl Default for TsvSchema {
    fn default() -> Self {
        TsvSchema {
            col_a: "text_a".into(),
            col_b: Some("text_b".into()),
            col_label: "label".into(),
            labels: vec!["0".into(), "1".into()],
        }
    }
}

/// Serialize examples as UTF-8 TSV with a header row. The inverse of
/// [`load_tsv`] under the default schema.
pub fn to_tsv(examples: &[Example]) -> String {
    let mut out = String::from("text_a\ttext_b\tlabel\n");
    for ex in examples {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            ex.text_a,
            ex.text_b.as_deref().unwrap_or(""),
            ex.label
        );
    }
    out
}

pub fn write_tsv(path: &Path, examples: &[Example]) -> Result<()> {
    std::fs::write(path, to_tsv(examples)).map_err(|e| Error::io(path, e))
}

pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<Vec<Example>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&content, schema)
}

/// Parse TSV content. Line numbers in errors are 1-based and include the
/// header row.
pub fn parse_tsv(content: &str, schema: &TsvSchema) -> Result<Vec<Example>> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("empty TSV: missing header row".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let col_index = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| {
            Error::Config(format!(
                "schema error: column '{name}' not found in header {cols:?}"
            ))
        })
    };
    let ia = col_index(&schema.col_a)?;
    let ib = schema.col_b.as_deref().map(col_index).transpose()?;
    let il = col_index(&schema.col_label)?;

    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1; // enumerate is 0-based; +1 gives the 1-based file line
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let need = ia.max(il).max(ib.unwrap_or(0));
        if fields.len() <= need {
            return Err(Error::Data(format!(
                "line {lineno}: expected at least {} tab-separated fields, got {}",
                need + 1,
                fields.len()
            )));
        }
        let label_str = fields[il];
        let label = schema
            .labels
            .iter()
            .position(|l| l == label_str)
            .ok_or_else(|| {
                Error::Data(format!(
                    "line {lineno}: unknown label '{label_str}' (declared: {:?})",
                    schema.labels
                ))
            })?;
        let text_b = ib
            .map(|i| fields[i])
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        out.push(Example {
            text_a: fields[ia].to_string(),
            text_b,
            label,
        });
    }
    Ok(out)
}

// ── Vocabulary and encoding ───────────────────────────────────────────────

/// Token vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Frequency-ranked vocabulary (ties broken lexicographically) capped at
/// `max_size` entries including the four reserved ids.
pub fn build_vocab(examples: &[Example], max_size: usize) -> Result<Vocab> {
    if max_size <= N_RESERVED {
        return Err(Error::Config(format!(
            "vocab max_size must exceed {N_RESERVED} reserved entries, got {max_size}"
        )));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for ex in examples {
        for tok in tokenize(&ex.text_a) {
            *freq.entry(tok).or_insert(0) += 1;
        }
        if let Some(b) = &ex.text_b {
            for tok in tokenize(b) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then(ta.cmp(tb)));

    let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    for (tok, _) in ranked.into_iter().take(max_size - N_RESERVED) {
        id_to_token.push(tok);
    }
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocab {
        token_to_id,
        id_to_token,
    })
}

/// Encode one example as `[cls] a [sep] (b [sep])` followed by padding, with
/// the pad mask. When the row exceeds `max_len`, tokens are dropped from the
/// end of the longer segment (ties drop from segment b) until it fits; the
/// cls and sep tokens always survive.
pub fn encode(vocab: &Vocab, example: &Example, max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut a: Vec<usize> = tokenize(&example.text_a)
        .iter()
        .map(|t| vocab.id(t))
        .collect();
    let mut b: Option<Vec<usize>> = example
        .text_b
        .as_ref()
        .map(|t| tokenize(t).iter().map(|s| vocab.id(s)).collect());

    let overhead = 2 + usize::from(b.is_some()); // cls + seps
    if max_len < overhead {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold the cls/sep structure"
        )));
    }
    loop {
        let total = overhead + a.len() + b.as_ref().map_or(0, Vec::len);
        if total <= max_len {
            break;
        }
        let blen = b.as_ref().map_or(0, Vec::len);
        if blen >= a.len() && blen > 0 {
            b.as_mut().unwrap().pop();
        } else if !a.is_empty() {
            a.pop();
        } else {
            return Err(Error::Config(format!(
                "max_len {max_len} cannot hold the cls/sep structure"
            )));
        }
    }

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(&a);
    ids.push(SEP_ID);
    if let Some(b) = &b {
        ids.extend(b);
        ids.push(SEP_ID);
    }
    let used = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![true; used];
    mask.resize(max_len, false);
    Ok((ids, mask))
}

/// A fully encoded dataset with fixed row width.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub seq: usize,
}

impl EncodedDataset {
    /// Encode examples at the smallest width that fits them all, capped at
    /// `max_seq_len`. Labels are validated against `n_classes`.
    pub fn encode(
        vocab: &Vocab,
        examples: &[Example],
        max_seq_len: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("cannot encode an empty example set".into()));
        }
        let width = examples
            .iter()
            .map(|ex| {
                let a = tokenize(&ex.text_a).len();
                let b = ex.text_b.as_ref().map_or(0, |t| tokenize(t).len());
                2 + usize::from(ex.text_b.is_some()) + a + b
            })
            .max()
            .unwrap()
            .min(max_seq_len);
        let mut tokens = Vec::with_capacity(examples.len() * width);
        let mut mask = Vec::with_capacity(examples.len() * width);
        let mut labels = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= n_classes {
                return Err(Error::Data(format!(
                    "example {i}: label {} out of range [0,{n_classes})",
                    ex.label
                )));
            }
            let (ids, m) = encode(vocab, ex, width)?;
            tokens.extend(ids);
            mask.extend(m);
            labels.push(ex.label);
        }
        Ok(EncodedDataset {
            tokens,
            mask,
            labels,
            n: examples.len(),
            seq: width,
        })
    }

    /// Gather rows `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let mut ids = Vec::with_capacity(indices.len() * self.seq);
        let mut mask = Vec::with_capacity(indices.len() * self.seq);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::Data(format!(
                    "batch index {i} out of range [0,{})",
                    self.n
                )));
            }
            ids.extend_from_slice(&self.tokens[i * self.seq..(i + 1) * self.seq]);
            mask.extend_from_slice(&self.mask[i * self.seq..(i + 1) * self.seq]);
            labels.push(self.labels[i]);
        }
        Ok((
            TokenBatch::new(ids, mask, indices.len(), self.seq)?,
            labels,
        ))
    }
}

/// Deterministic Fisher–Yates shuffle of `0..n` using the given generator.
pub fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
