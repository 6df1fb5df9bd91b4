//! A small pre-norm transformer encoder standing in for a pretrained model.
//!
//! The encoder is built once from a seed, then frozen; adapters wrap its
//! query/value projection sites. The classifier reads the representation of
//! position 0 (the data module prepends a cls token to every row).

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::rng::{component_rng, kaiming_std, normal_vec};
use crate::tensor::tape::MASK_BIAS;
use crate::tensor::{Mode, NodeId, Tape, Tensor};

/// Standard deviation for embedding-table initialization.
pub const EMB_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    /// Model-internal dropout on embeddings and residual branches. The
    /// adapters carry their own dropout; this defaults to 0 at desk scale.
    pub dropout_p: f64,
}

impl ModelConfig {
    /// The default desk-scale encoder.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffn_mult: 4,
            max_seq_len: 32,
            n_classes: 2,
            dropout_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "model dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// A named model parameter. The tensor's `requires_grad` flag doubles as the
/// frozen/trainable switch.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn frozen(&self) -> bool {
        !self.value.requires_grad
    }
}

/// Projection kind within an attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjKind {
    Query,
    Key,
    Value,
    Output,
}

impl ProjKind {
    pub fn short(self) -> &'static str {
        match self {
            ProjKind::Query => "q",
            ProjKind::Key => "k",
            ProjKind::Value => "v",
            ProjKind::Output => "o",
        }
    }
}

/// An adaptation site: one projection in one layer. Ordered layer-major with
/// query before value, which fixes every site iteration order in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub proj: ProjKind,
}

impl SiteId {
    pub fn new(layer: usize, proj: ProjKind) -> Self {
        SiteId { layer, proj }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.proj.short())
    }
}

pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

pub struct EncoderLayer {
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
    pub ffn_in: LinearLayer,
    pub ffn_out: LinearLayer,
}

/// The frozen base model.
pub struct EncoderModel {
    pub cfg: ModelConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub layers: Vec<EncoderLayer>,
    pub final_ln_gain: Param,
    pub final_ln_bias: Param,
    pub classifier: LinearLayer,
}

/// Build a model with deterministic per-parameter initialization: Kaiming
/// normal projection weights, zero biases, N(0, 0.02) embeddings, unit
/// layer-norm gains. Every parameter draws from its own seed derived from
/// `seed` and the parameter name, so the result is independent of build
/// order.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<EncoderModel> {
    cfg.validate()?;
    let d = cfg.d_model;
    let ffn = cfg.d_model * cfg.ffn_mult;

    let weight = |name: String, out_dim: usize, in_dim: usize| -> Param {
        let mut rng = component_rng(seed, &name);
        let data = normal_vec(&mut rng, out_dim * in_dim, kaiming_std(in_dim));
        Param::new(
            name,
            Tensor::new(data, vec![out_dim, in_dim])
                .expect("weight shape")
                .with_requires_grad(true),
        )
    };
    let zeros = |name: String, n: usize| -> Param {
        Param::new(name, Tensor::zeros(vec![n]).with_requires_grad(true))
    };
    let ones = |name: String, n: usize| -> Param {
        Param::new(
            name,
            Tensor::new(vec![1.0; n], vec![n])
                .expect("gain shape")
                .with_requires_grad(true),
        )
    };
    let embedding = |name: String, rows: usize| -> Param {
        let mut rng = component_rng(seed, &name);
        let data = normal_vec(&mut rng, rows * d, EMB_INIT_STD);
        Param::new(
            name,
            Tensor::new(data, vec![rows, d])
                .expect("embedding shape")
                .with_requires_grad(true),
        )
    };
    let linear = |name: String, out_dim: usize, in_dim: usize| -> LinearLayer {
        LinearLayer {
            weight: weight(format!("{name}.weight"), out_dim, in_dim),
            bias: zeros(format!("{name}.bias"), out_dim),
        }
    };

    let layers = (0..cfg.n_layers)
        .map(|i| EncoderLayer {
            ln1_gain: ones(format!("layer{i}.ln1.gain"), d),
            ln1_bias: zeros(format!("layer{i}.ln1.bias"), d),
            query: linear(format!("layer{i}.attn.q"), d, d),
            key: linear(format!("layer{i}.attn.k"), d, d),
            value: linear(format!("layer{i}.attn.v"), d, d),
            output: linear(format!("layer{i}.attn.o"), d, d),
            ln2_gain: ones(format!("layer{i}.ln2.gain"), d),
            ln2_bias: zeros(format!("layer{i}.ln2.bias"), d),
            ffn_in: linear(format!("layer{i}.ffn.in"), ffn, d),
            ffn_out: linear(format!("layer{i}.ffn.out"), d, ffn),
        })
        .collect();

    Ok(EncoderModel {
        cfg: cfg.clone(),
        tok_emb: embedding("tok_emb".into(), cfg.vocab_size),
        pos_emb: embedding("pos_emb".into(), cfg.max_seq_len),
        layers,
        final_ln_gain: ones("final_ln.gain".into(), d),
        final_ln_bias: zeros("final_ln.bias".into(), d),
        classifier: linear("classifier".into(), cfg.n_classes, d),
    })
}

impl EncoderModel {
    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.tok_emb);
        f(&self.pos_emb);
        for l in &self.layers {
            for p in [&l.ln1_gain, &l.ln1_bias] {
                f(p);
            }
            for lin in [&l.query, &l.key, &l.value, &l.output] {
                f(&lin.weight);
                f(&lin.bias);
            }
            for p in [&l.ln2_gain, &l.ln2_bias] {
                f(p);
            }
            for lin in [&l.ffn_in, &l.ffn_out] {
                f(&lin.weight);
                f(&lin.bias);
            }
        }
        f(&self.final_ln_gain);
        f(&self.final_ln_bias);
        f(&self.classifier.weight);
        f(&self.classifier.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.tok_emb);
        f(&mut self.pos_emb);
        for l in &mut self.layers {
            f(&mut l.ln1_gain);
            f(&mut l.ln1_bias);
            for lin in [
                &mut l.query,
                &mut l.key,
                &mut l.value,
                &mut l.output,
            ] {
                f(&mut lin.weight);
                f(&mut lin.bias);
            }
            f(&mut l.ln2_gain);
            f(&mut l.ln2_bias);
            for lin in [&mut l.ffn_in, &mut l.ffn_out] {
                f(&mut lin.weight);
                f(&mut lin.bias);
            }
        }
        f(&mut self.final_ln_gain);
        f(&mut self.final_ln_bias);
        f(&mut self.classifier.weight);
        f(&mut self.classifier.bias);
    }

    /// Mark every base parameter frozen.
    pub fn freeze_all(&mut self) {
        self.visit_params_mut(&mut |p| p.value.requires_grad = false);
    }

    /// Mark every base parameter trainable (the gradient-check control).
    pub fn unfreeze_all(&mut self) {
        self.visit_params_mut(&mut |p| p.value.requires_grad = true);
    }

    /// Names of base parameters currently marked trainable.
    pub fn trainable_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if p.value.requires_grad {
                out.push(p.name.clone());
            }
        });
        out
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.trainable_param_names().is_empty()
    }

    /// Byte-exact capture of every parameter for later comparison.
    pub fn snapshot(&self) -> Snapshot {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |p| {
            map.insert(p.name.clone(), p.value.data.clone());
        });
        Snapshot(map)
    }

    /// Every projection that the adapter mechanism can wrap, with its shape.
    pub fn adaptable_sites(&self) -> Vec<(SiteId, [usize; 2])> {
        let d = self.cfg.d_model;
        (0..self.cfg.n_layers)
            .flat_map(|layer| {
                [
                    ProjKind::Query,
                    ProjKind::Key,
                    ProjKind::Value,
                    ProjKind::Output,
                ]
                .into_iter()
                .map(move |proj| (SiteId::new(layer, proj), [d, d]))
            })
            .collect()
    }

    pub fn site_linear(&self, site: SiteId) -> &LinearLayer {
        let l = &self.layers[site.layer];
        match site.proj {
            ProjKind::Query => &l.query,
            ProjKind::Key => &l.key,
            ProjKind::Value => &l.value,
            ProjKind::Output => &l.output,
        }
    }
}

/// Byte-exact parameter capture.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot(pub BTreeMap<String, Vec<f64>>);

impl Snapshot {
    /// Names whose values are not bitwise identical between two captures.
    pub fn diff_names(&self, other: &Snapshot) -> Vec<String> {
        let mut out = Vec::new();
        for (name, vals) in &self.0 {
            match other.0.get(name) {
                Some(o)
                    if o.len() == vals.len()
                        && vals
                            .iter()
                            .zip(o)
                            .all(|(a, b)| a.to_bits() == b.to_bits()) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.0.keys() {
            if !self.0.contains_key(name) {
                out.push(name.clone());
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn bits_eq(&self, other: &Snapshot) -> bool {
        self.diff_names(other).is_empty()
    }
}

/// One batch of token ids with a pad mask (`true` = real token).
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || mask.len() != batch * seq {
            return Err(Error::Config(format!(
                "token batch size mismatch: {} ids, {} mask entries for {batch}x{seq}",
                ids.len(),
                mask.len()
            )));
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch,
            seq,
        })
    }
}

/// Graph construction context: a tape plus the registry of trainable leaf
/// nodes encountered while building the forward pass.
pub struct GraphBuilder<'t> {
    pub tape: &'t mut Tape,
    trainable: Vec<(String, NodeId)>,
}

impl<'t> GraphBuilder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        GraphBuilder {
            tape,
            trainable: Vec::new(),
        }
    }

    /// Register a parameter as a leaf, remembering it when trainable.
    pub fn leaf_param(&mut self, p: &Param) -> NodeId {
        let id = self.tape.leaf_from(&p.value);
        if p.value.requires_grad {
            self.trainable.push((p.name.clone(), id));
        }
        id
    }

    pub fn into_trainable(self) -> Vec<(String, NodeId)> {
        self.trainable
    }
}

/// Result of building a forward pass on a tape.
pub struct ForwardPass {
    pub logits: NodeId,
    /// `(parameter name, leaf node)` for every trainable parameter used.
    pub trainable: Vec<(String, NodeId)>,
}

/// Apply a plain (bias-carrying) linear layer: `x · Wᵀ + b`.
fn apply_linear(gb: &mut GraphBuilder, x: NodeId, lin: &LinearLayer) -> Result<NodeId> {
    let w = gb.leaf_param(&lin.weight);
    let out = gb.tape.matmul_nt(x, w)?;
    let b = gb.leaf_param(&lin.bias);
    gb.tape.add(out, b)
}

/// Apply a projection site, routing through its adapter when one is attached.
fn apply_site(
    gb: &mut GraphBuilder,
    x: NodeId,
    lin: &LinearLayer,
    site: SiteId,
    adapters: Option<&AdapterSet>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    match adapters.and_then(|set| set.get(site)) {
        None => apply_linear(gb, x, lin),
        Some(adapter) => {
            let w0 = gb.leaf_param(adapter.w0());
            let h0 = gb.tape.matmul_nt(x, w0)?;
            let b = gb.leaf_param(&lin.bias);
            let h0 = gb.tape.add(h0, b)?;
            let delta = adapter.delta_on_tape(gb, x, mode, rng)?;
            gb.tape.add(h0, delta)
        }
    }
}

/// Additive attention bias: `MASK_BIAS` wherever the key position is padding.
fn attention_bias(tokens: &TokenBatch, heads: usize) -> Vec<f64> {
    let (b, s) = (tokens.batch, tokens.seq);
    let mut out = vec![0.0; b * heads * s * s];
    for bi in 0..b {
        for key in 0..s {
            if tokens.mask[bi * s + key] {
                continue;
            }
            for h in 0..heads {
                for q in 0..s {
                    out[((bi * heads + h) * s + q) * s + key] = MASK_BIAS;
                }
            }
        }
    }
    out
}

/// Build the full encoder forward pass on `tape`, optionally routing
/// projection sites through adapters. Returns the logits node
/// (`batch × n_classes`) and the trainable-leaf registry.
pub fn forward(
    model: &EncoderModel,
    adapters: Option<&AdapterSet>,
    tape: &mut Tape,
    tokens: &TokenBatch,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardPass> {
    let cfg = &model.cfg;
    if tokens.seq > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "overlong sequence: {} tokens exceeds max_seq_len {}",
            tokens.seq, cfg.max_seq_len
        )));
    }
    let (b, s) = (tokens.batch, tokens.seq);
    let heads = cfg.n_heads;
    let dh = cfg.d_model / heads;

    let mut gb = GraphBuilder::new(tape);
    let tok_table = gb.leaf_param(&model.tok_emb);
    let tok = gb.tape.embedding_lookup(tok_table, &tokens.ids)?;
    let pos_table = gb.leaf_param(&model.pos_emb);
    let pos_ids: Vec<usize> = (0..b * s).map(|i| i % s).collect();
    let pos = gb.tape.embedding_lookup(pos_table, &pos_ids)?;
    let mut x = gb.tape.add(tok, pos)?;
    x = gb.tape.dropout(x, cfg.dropout_p, mode, rng)?;

    let bias_data = attention_bias(tokens, heads);
    let mask_bias = gb
        .tape
        .constant(bias_data, vec![b * heads, s, s])?;

    for (li, layer) in model.layers.iter().enumerate() {
        let g1 = gb.leaf_param(&layer.ln1_gain);
        let b1 = gb.leaf_param(&layer.ln1_bias);
        let hn = gb.tape.layer_norm(x, g1, b1)?;

        let q = apply_site(
            &mut gb,
            hn,
            &layer.query,
            SiteId::new(li, ProjKind::Query),
            adapters,
            mode,
            rng,
        )?;
        let k = apply_site(
            &mut gb,
            hn,
            &layer.key,
            SiteId::new(li, ProjKind::Key),
            adapters,
            mode,
            rng,
        )?;
        let v = apply_site(
            &mut gb,
            hn,
            &layer.value,
            SiteId::new(li, ProjKind::Value),
            adapters,
            mode,
            rng,
        )?;

        let qh = gb.tape.split_heads(q, b, s, heads, dh)?;
        let kh = gb.tape.split_heads(k, b, s, heads, dh)?;
        let vh = gb.tape.split_heads(v, b, s, heads, dh)?;

        let scores = gb.tape.batched_matmul(qh, kh, true)?;
        let scaled = gb.tape.scale_const(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = gb.tape.add(scaled, mask_bias)?;
        let probs = gb.tape.softmax(masked, 2)?;
        let ctx = gb.tape.batched_matmul(probs, vh, false)?;
        let merged = gb.tape.merge_heads(ctx, b, s, heads, dh)?;

        let attn_out = apply_site(
            &mut gb,
            merged,
            &layer.output,
            SiteId::new(li, ProjKind::Output),
            adapters,
            mode,
            rng,
        )?;
        let attn_out = gb.tape.dropout(attn_out, cfg.dropout_p, mode, rng)?;
        x = gb.tape.add(x, attn_out)?;

        let g2 = gb.leaf_param(&layer.ln2_gain);
        let b2 = gb.leaf_param(&layer.ln2_bias);
        let hn2 = gb.tape.layer_norm(x, g2, b2)?;
        let f1 = apply_linear(&mut gb, hn2, &layer.ffn_in)?;
        let f1 = gb.tape.gelu(f1)?;
        let f2 = apply_linear(&mut gb, f1, &layer.ffn_out)?;
        let f2 = gb.tape.dropout(f2, cfg.dropout_p, mode, rng)?;
        x = gb.tape.add(x, f2)?;
    }

    let fg = gb.leaf_param(&model.final_ln_gain);
    let fb = gb.leaf_param(&model.final_ln_bias);
    let xf = gb.tape.layer_norm(x, fg, fb)?;
    let cls_rows: Vec<usize> = (0..b).map(|bi| bi * s).collect();
    let cls = gb.tape.gather_rows(xf, &cls_rows)?;
    let logits = apply_linear(&mut gb, cls, &model.classifier)?;

    Ok(ForwardPass {
        logits,
        trainable: gb.into_trainable(),
    })
}

/// Eval-mode logits as a plain tensor (scratch tape, no dropout).
pub fn logits_eval(
    model: &EncoderModel,
    adapters: Option<&AdapterSet>,
    tokens: &TokenBatch,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut rng = component_rng(0, "eval-unused");
    let pass = forward(model, adapters, &mut tape, tokens, Mode::Eval, &mut rng)?;
    Ok(tape.take_value(pass.logits))
}
