//! TLoRA and LoRA adapter layers over frozen projection sites.
//!
//! TLoRA decomposes the weight update as `ΔW = α·A·B·C` with `A ∈ d×r` and
//! `C ∈ r×k` fixed random, `B ∈ r×r` zero-initialized and trainable, and `α`
//! a trainable per-site scalar starting at 1. The LoRA baseline uses the
//! familiar two-matrix form `ΔW = (α₀/r)·up·down` with both factors
//! trainable. Training always runs the factored product; the dense `ΔW` is
//! materialized only for analysis.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, EncoderModel, ForwardPass, GraphBuilder, Param, ProjKind, SiteId, Snapshot,
    TokenBatch,
};
use crate::rng::{component_rng, derive_seed, kaiming_std, normal_vec};
use crate::tensor::{matops, Mode, NodeId, Tape, Tensor};

/// Adapter family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tlora,
    Lora,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Tlora => "tlora",
            Method::Lora => "lora",
        }
    }
}

/// Adapter construction parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub method: Method,
    pub rank: usize,
    /// Dropout on the low-rank update Δh, applied identically to both
    /// methods in train mode.
    pub dropout_p: f64,
    /// Fixed numerator of LoRA's `α₀/r` scaling; `None` means `α₀ = r`
    /// (unit effective scale). Ignored by TLoRA, whose scale is learned.
    pub lora_fixed_alpha: Option<f64>,
    /// Projection sites to wrap; only query and value are adaptable.
    pub target_sites: Vec<String>,
}

impl AdapterConfig {
    pub fn new(method: Method) -> Self {
        AdapterConfig {
            method,
            rank: 32,
            dropout_p: 0.5,
            lora_fixed_alpha: None,
            target_sites: vec!["query".into(), "value".into()],
        }
    }

    pub fn effective_lora_alpha(&self) -> f64 {
        self.lora_fixed_alpha.unwrap_or(self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "adapter dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.target_sites.is_empty() {
            return Err(Error::Config("target_sites must not be empty".into()));
        }
        for s in &self.target_sites {
            parse_target_site(s)?;
        }
        Ok(())
    }
}

/// Map a configured site name onto a projection kind. Key/output projections
/// are recognized but rejected: adapting them is out of policy here even
/// though the site mechanism itself is generic.
pub fn parse_target_site(name: &str) -> Result<ProjKind> {
    match name.to_ascii_lowercase().as_str() {
        "query" | "q" => Ok(ProjKind::Query),
        "value" | "v" => Ok(ProjKind::Value),
        "key" | "k" | "output" | "o" => Err(Error::Config(format!(
            "site '{name}' is not adaptable: only query and value projections are supported"
        ))),
        other => Err(Error::Config(format!("unknown site name '{other}'"))),
    }
}

/// Tri-matrix adapter: `h = W0·x + Dropout(α·A·B·C·x)`.
pub struct TloraAdapter {
    pub site: SiteId,
    /// Frozen copy of the wrapped projection weight, d×k.
    pub w0: Param,
    /// Fixed random d×r, Kaiming normal with fan_in = r.
    pub a: Param,
    /// Trainable r×r, zero-initialized.
    pub b: Param,
    /// Fixed random r×k, Kaiming normal with fan_in = k.
    pub c: Param,
    /// Trainable scalar, initialized to 1.
    pub alpha: Param,
    pub dropout_p: f64,
}

/// Two-matrix baseline: `h = W0·x + Dropout((α₀/r)·up·down·x)`.
pub struct LoraAdapter {
    pub site: SiteId,
    pub w0: Param,
    /// Trainable r×k, Gaussian init with std 1/√k.
    pub down: Param,
    /// Trainable d×r, zero-initialized so the update starts at zero.
    pub up: Param,
    /// Fixed effective scale α₀/r.
    pub scaling: f64,
    pub dropout_p: f64,
}

/// Build a TLoRA adapter around a frozen d×k weight.
pub fn init_tlora(
    site: SiteId,
    w0: &Tensor,
    rank: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<TloraAdapter> {
    let [d, k] = site_dims(w0)?;
    check_rank(rank, d, k)?;
    let name = |part: &str| format!("adapter.{site}.{part}");
    let a_data = normal_vec(&mut component_rng(seed, "a"), d * rank, kaiming_std(rank));
    let c_data = normal_vec(&mut component_rng(seed, "c"), rank * k, kaiming_std(k));
    Ok(TloraAdapter {
        site,
        w0: frozen_copy(name("w0"), w0),
        a: Param::new(name("a"), Tensor::new(a_data, vec![d, rank])?),
        b: Param::new(
            name("b"),
            Tensor::zeros(vec![rank, rank]).with_requires_grad(true),
        ),
        c: Param::new(name("c"), Tensor::new(c_data, vec![rank, k])?),
        alpha: Param::new(name("alpha"), Tensor::scalar(1.0).with_requires_grad(true)),
        dropout_p,
    })
}

/// Build a LoRA adapter around a frozen d×k weight.
pub fn init_lora(
    site: SiteId,
    w0: &Tensor,
    rank: usize,
    fixed_alpha: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    let [d, k] = site_dims(w0)?;
    check_rank(rank, d, k)?;
    let name = |part: &str| format!("adapter.{site}.{part}");
    let down_data = normal_vec(
        &mut component_rng(seed, "down"),
        rank * k,
        1.0 / (k as f64).sqrt(),
    );
    Ok(LoraAdapter {
        site,
        w0: frozen_copy(name("w0"), w0),
        down: Param::new(
            name("down"),
            Tensor::new(down_data, vec![rank, k])?.with_requires_grad(true),
        ),
        up: Param::new(
            name("up"),
            Tensor::zeros(vec![d, rank]).with_requires_grad(true),
        ),
        scaling: fixed_alpha / rank as f64,
        dropout_p,
    })
}

fn site_dims(w0: &Tensor) -> Result<[usize; 2]> {
    if w0.shape.len() != 2 {
        return Err(Error::dim("adapter init", &w0.shape, &[]));
    }
    Ok([w0.shape[0], w0.shape[1]])
}

fn check_rank(rank: usize, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::Config(format!(
            "rank {rank} out of range [1, {}] for a {d}x{k} site",
            d.min(k)
        )));
    }
    Ok(())
}

fn frozen_copy(name: String, w0: &Tensor) -> Param {
    let mut t = w0.clone();
    t.requires_grad = false;
    t.grad = None;
    t.tape_id = None;
    Param::new(name, t)
}

impl TloraAdapter {
    /// Record `Dropout(α·A·B·C·x)` on the tape in factored order; the dense
    /// ΔW is never formed here. Gradients flow to `B` and `α` only.
    pub fn delta_on_tape(
        &self,
        gb: &mut GraphBuilder,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let c = gb.leaf_param(&self.c);
        let t = gb.tape.matmul_nt(x, c)?;
        let b = gb.leaf_param(&self.b);
        let t = gb.tape.matmul_nt(t, b)?;
        let a = gb.leaf_param(&self.a);
        let t = gb.tape.matmul_nt(t, a)?;
        let alpha = gb.leaf_param(&self.alpha);
        let t = gb.tape.scale(t, alpha)?;
        gb.tape.dropout(t, self.dropout_p, mode, rng)
    }

    /// Dense update including the learned scale: `α·A·B·C`.
    pub fn materialize_delta_w(&self) -> Tensor {
        let [d, k] = [self.w0.value.shape[0], self.w0.value.shape[1]];
        let r = self.b.value.shape[0];
        let bc = matops::mm(&self.b.value.data, &self.c.value.data, r, r, k);
        let mut abc = matops::mm(&self.a.value.data, &bc, d, r, k);
        let alpha = self.alpha.value.data[0];
        for v in &mut abc {
            *v *= alpha;
        }
        Tensor::new(abc, vec![d, k]).expect("delta shape")
    }

    /// Trainable parameter count for one site: r² + 1.
    pub fn trainable_count(&self) -> usize {
        self.b.value.numel() + 1
    }
}

impl LoraAdapter {
    pub fn delta_on_tape(
        &self,
        gb: &mut GraphBuilder,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let down = gb.leaf_param(&self.down);
        let t = gb.tape.matmul_nt(x, down)?;
        let up = gb.leaf_param(&self.up);
        let t = gb.tape.matmul_nt(t, up)?;
        let t = gb.tape.scale_const(t, self.scaling)?;
        gb.tape.dropout(t, self.dropout_p, mode, rng)
    }

    /// Dense update including the fixed scale: `(α₀/r)·up·down`.
    pub fn materialize_delta_w(&self) -> Tensor {
        let d = self.up.value.shape[0];
        let r = self.up.value.shape[1];
        let k = self.down.value.shape[1];
        let mut ud = matops::mm(&self.up.value.data, &self.down.value.data, d, r, k);
        for v in &mut ud {
            *v *= self.scaling;
        }
        Tensor::new(ud, vec![d, k]).expect("delta shape")
    }

    /// Trainable parameter count for one site: r·(d + k).
    pub fn trainable_count(&self) -> usize {
        self.down.value.numel() + self.up.value.numel()
    }
}

/// Per-site norm and scale summary used by metric snapshots. For LoRA runs
/// `b_norm` is the Frobenius norm of the materialized update, `alpha` the
/// fixed scale, and `a_norm`/`c_norm` the up/down factor norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub b_norm: f64,
    pub alpha: f64,
    pub a_norm: f64,
    pub c_norm: f64,
}

/// One attached adapter of either method.
pub enum SiteAdapter {
    Tlora(TloraAdapter),
    Lora(LoraAdapter),
}

impl SiteAdapter {
    pub fn site(&self) -> SiteId {
        match self {
            SiteAdapter::Tlora(a) => a.site,
            SiteAdapter::Lora(a) => a.site,
        }
    }

    pub fn w0(&self) -> &Param {
        match self {
            SiteAdapter::Tlora(a) => &a.w0,
            SiteAdapter::Lora(a) => &a.w0,
        }
    }

    pub fn delta_on_tape(
        &self,
        gb: &mut GraphBuilder,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        match self {
            SiteAdapter::Tlora(a) => a.delta_on_tape(gb, x, mode, rng),
            SiteAdapter::Lora(a) => a.delta_on_tape(gb, x, mode, rng),
        }
    }

    pub fn materialize_delta_w(&self) -> Tensor {
        match self {
            SiteAdapter::Tlora(a) => a.materialize_delta_w(),
            SiteAdapter::Lora(a) => a.materialize_delta_w(),
        }
    }

    /// Standalone site forward: `W0·x + Dropout(Δh)` on a scratch tape.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut gb = GraphBuilder::new(&mut tape);
        let xid = gb.tape.leaf_from(x);
        let w0 = gb.leaf_param(self.w0());
        let h0 = gb.tape.matmul_nt(xid, w0)?;
        let delta = self.delta_on_tape(&mut gb, xid, mode, rng)?;
        let out = gb.tape.add(h0, delta)?;
        Ok(tape.take_value(out))
    }

    pub fn trainable(&self) -> Vec<&Param> {
        match self {
            SiteAdapter::Tlora(a) => vec![&a.b, &a.alpha],
            SiteAdapter::Lora(a) => vec![&a.down, &a.up],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        match self {
            SiteAdapter::Tlora(a) => vec![&mut a.b, &mut a.alpha],
            SiteAdapter::Lora(a) => vec![&mut a.down, &mut a.up],
        }
    }

    /// Fixed (never-trained) factor matrices: A and C for TLoRA.
    pub fn fixed(&self) -> Vec<&Param> {
        match self {
            SiteAdapter::Tlora(a) => vec![&a.a, &a.c],
            SiteAdapter::Lora(_) => vec![],
        }
    }

    /// All persisted components in manifest order, with short labels.
    pub fn components(&self) -> Vec<(&'static str, &Param)> {
        match self {
            SiteAdapter::Tlora(a) => vec![
                ("a", &a.a),
                ("b", &a.b),
                ("c", &a.c),
                ("alpha", &a.alpha),
            ],
            SiteAdapter::Lora(a) => vec![("down", &a.down), ("up", &a.up)],
        }
    }

    pub fn components_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            SiteAdapter::Tlora(a) => vec![
                ("a", &mut a.a),
                ("b", &mut a.b),
                ("c", &mut a.c),
                ("alpha", &mut a.alpha),
            ],
            SiteAdapter::Lora(a) => vec![("down", &mut a.down), ("up", &mut a.up)],
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            SiteAdapter::Tlora(a) => a.trainable_count(),
            SiteAdapter::Lora(a) => a.trainable_count(),
        }
    }

    pub fn site_metrics(&self) -> SiteMetrics {
        match self {
            SiteAdapter::Tlora(a) => SiteMetrics {
                b_norm: a.b.value.norm(),
                alpha: a.alpha.value.data[0],
                a_norm: a.a.value.norm(),
                c_norm: a.c.value.norm(),
            },
            SiteAdapter::Lora(a) => SiteMetrics {
                b_norm: a.materialize_delta_w().norm(),
                alpha: a.scaling,
                a_norm: a.up.value.norm(),
                c_norm: a.down.value.norm(),
            },
        }
    }
}

/// All adapters of a run, in deterministic site order.
pub struct AdapterSet {
    pub method: Method,
    pub rank: usize,
    map: BTreeMap<SiteId, SiteAdapter>,
}

impl AdapterSet {
    pub fn get(&self, site: SiteId) -> Option<&SiteAdapter> {
        self.map.get(&site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteAdapter> {
        self.map.values()
    }

    pub fn sites_mut(&mut self) -> impl Iterator<Item = &mut SiteAdapter> {
        self.map.values_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.map.values().map(|a| a.trainable_count()).sum()
    }

    pub fn site_metrics(&self) -> Vec<(String, SiteMetrics)> {
        self.map
            .values()
            .map(|a| (a.site().to_string(), a.site_metrics()))
            .collect()
    }
}

/// A frozen base model plus (optionally) its attached adapters. `None`
/// adapters is the frozen control arm.
pub struct AdaptedModel {
    pub base: EncoderModel,
    pub adapters: Option<AdapterSet>,
}

impl AdaptedModel {
    /// Wrap a frozen model without adapters (the `frozen` method).
    pub fn frozen(base: EncoderModel) -> Result<Self> {
        if !base.is_fully_frozen() {
            return Err(Error::Usage(
                "frozen control requires freeze_all() before wrapping".into(),
            ));
        }
        Ok(AdaptedModel {
            base,
            adapters: None,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &TokenBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        forward(&self.base, self.adapters.as_ref(), tape, tokens, mode, rng)
    }

    pub fn logits_eval(&self, tokens: &TokenBatch) -> Result<Tensor> {
        crate::model::logits_eval(&self.base, self.adapters.as_ref(), tokens)
    }

    /// Visit every trainable parameter (unfrozen base params first, then
    /// adapter params in site order).
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.base.visit_params_mut(&mut |p| {
            if p.value.requires_grad {
                f(p);
            }
        });
        if let Some(set) = &mut self.adapters {
            for sa in set.sites_mut() {
                for p in sa.trainable_mut() {
                    f(p);
                }
            }
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.base.visit_params(&mut |p| {
            if p.value.requires_grad {
                n += p.value.numel();
            }
        });
        n + self
            .adapters
            .as_ref()
            .map_or(0, |s| s.trainable_param_count())
    }

    /// Byte-exact capture of base parameters, adapter W0 copies, fixed
    /// factors and trainable factors alike.
    pub fn snapshot(&self) -> Snapshot {
        let mut snap = self.base.snapshot();
        if let Some(set) = &self.adapters {
            for sa in set.sites() {
                snap.0
                    .insert(sa.w0().name.clone(), sa.w0().value.data.clone());
                for (_, p) in sa.components() {
                    snap.0.insert(p.name.clone(), p.value.data.clone());
                }
            }
        }
        snap
    }

    /// Copy of a parameter's data by name, searching base and adapters.
    pub fn param_data(&self, name: &str) -> Option<Vec<f64>> {
        let mut found = None;
        self.base.visit_params(&mut |p| {
            if p.name == name {
                found = Some(p.value.data.clone());
            }
        });
        if found.is_some() {
            return found;
        }
        if let Some(set) = &self.adapters {
            for sa in set.sites() {
                for (_, p) in sa.components() {
                    if p.name == name {
                        return Some(p.value.data.clone());
                    }
                }
            }
        }
        None
    }

    /// Overwrite a parameter's data by name (gradient-check plumbing).
    pub fn set_param_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let mut hit = false;
        self.base.visit_params_mut(&mut |p| {
            if p.name == name && p.value.numel() == data.len() {
                p.value.data.copy_from_slice(data);
                hit = true;
            }
        });
        if let Some(set) = &mut self.adapters {
            for sa in set.sites_mut() {
                for (_, p) in sa.components_mut() {
                    if p.name == name && p.value.numel() == data.len() {
                        p.value.data.copy_from_slice(data);
                        hit = true;
                    }
                }
            }
        }
        if hit {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "no parameter named '{name}' with {} values",
                data.len()
            )))
        }
    }
}

/// Wrap every configured target site of a frozen model. Per-site seeds are
/// derived from the run seed and the site name, so attaching more sites never
/// reshuffles existing ones.
pub fn attach_adapters(
    model: EncoderModel,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<AdaptedModel> {
    cfg.validate()?;
    if !model.is_fully_frozen() {
        return Err(Error::Usage(
            "attach_adapters requires a fully frozen model".into(),
        ));
    }
    let mut kinds: Vec<ProjKind> = cfg
        .target_sites
        .iter()
        .map(|s| parse_target_site(s))
        .collect::<Result<_>>()?;
    kinds.sort();
    kinds.dedup();

    let mut map = BTreeMap::new();
    for layer in 0..model.cfg.n_layers {
        for &proj in &kinds {
            let site = SiteId::new(layer, proj);
            let w0 = &model.site_linear(site).weight.value;
            let site_seed = derive_seed(seed, &format!("adapter/{site}"));
            let adapter = match cfg.method {
                Method::Tlora => {
                    SiteAdapter::Tlora(init_tlora(site, w0, cfg.rank, cfg.dropout_p, site_seed)?)
                }
                Method::Lora => SiteAdapter::Lora(init_lora(
                    site,
                    w0,
                    cfg.rank,
                    cfg.effective_lora_alpha(),
                    cfg.dropout_p,
                    site_seed,
                )?),
            };
            map.insert(site, adapter);
        }
    }
    Ok(AdaptedModel {
        base: model,
        adapters: Some(AdapterSet {
            method: cfg.method,
            rank: cfg.rank,
            map,
        }),
    })
}

/// Theoretical trainable-parameter count and the improvement ratio over the
/// LoRA baseline at the same rank (rounded to the nearest integer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub improvement_vs_lora: u64,
}

pub fn tlora_trainable(r: u64, n_sites: u64) -> u64 {
    n_sites * (r * r + 1)
}

pub fn lora_trainable(r: u64, d: u64, k: u64, n_sites: u64) -> u64 {
    n_sites * r * (d + k)
}

pub fn param_count(method: Method, r: u64, d: u64, k: u64, n_sites: u64) -> ParamCount {
    let lora = lora_trainable(r, d, k, n_sites);
    let trainable = match method {
        Method::Tlora => tlora_trainable(r, n_sites),
        Method::Lora => lora,
    };
    ParamCount {
        trainable,
        improvement_vs_lora: (lora as f64 / trainable as f64).round() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn rng() -> ChaCha8Rng {
        component_rng(0, "adapter-tests")
    }

    fn random_input(n: usize, k: usize, seed: u64) -> Tensor {
        let data = normal_vec(&mut component_rng(seed, "x"), n * k, 1.0);
        Tensor::new(data, vec![n, k]).unwrap()
    }

    fn random_w0(d: usize, k: usize, seed: u64) -> Tensor {
        let data = normal_vec(&mut component_rng(seed, "w0"), d * k, 0.3);
        Tensor::new(data, vec![d, k]).unwrap()
    }

    #[test]
    fn tlora_initial_forward_is_base_forward_bit_exact() {
        let w0 = random_w0(6, 5, 1);
        let ad = SiteAdapter::Tlora(
            init_tlora(SiteId::new(0, ProjKind::Query), &w0, 3, 0.5, 9).unwrap(),
        );
        let x = random_input(4, 5, 2);
        let got = ad.forward(&x, Mode::Eval, &mut rng()).unwrap();
        let base = matops::mm_nt(&x.data, &w0.data, 4, 5, 6);
        assert!(got
            .data
            .iter()
            .zip(&base)
            .all(|(g, b)| g.to_bits() == b.to_bits()));
    }

    #[test]
    fn tlora_census_is_r_squared_plus_one() {
        let w0 = random_w0(8, 8, 3);
        let ad = init_tlora(SiteId::new(1, ProjKind::Value), &w0, 4, 0.0, 5).unwrap();
        assert_eq!(ad.trainable_count(), 4 * 4 + 1);
        assert!(ad.b.value.requires_grad && ad.alpha.value.requires_grad);
        assert!(!ad.a.value.requires_grad && !ad.c.value.requires_grad);
    }

    #[test]
    fn kaiming_init_std_matches_fan_in() {
        // A is d×r with fan_in = r: empirical std within 5% of sqrt(2/r)
        // on a 1024×32 sample.
        let w0 = random_w0(1024, 64, 11);
        let ad = init_tlora(SiteId::new(0, ProjKind::Query), &w0, 32, 0.0, 17).unwrap();
        let vals = &ad.a.value.data;
        assert_eq!(vals.len(), 32_768);
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let expect = kaiming_std(32);
        assert!((std - expect).abs() / expect < 0.05, "std {std} vs {expect}");
        // C is r×k with fan_in = k.
        let c_std = {
            let vals = &ad.c.value.data;
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        };
        let expect_c = kaiming_std(64);
        assert!(
            (c_std - expect_c).abs() / expect_c < 0.10,
            "std {c_std} vs {expect_c}"
        );
    }

    #[test]
    fn hand_computed_delta() {
        // d=k=2, r=1: W0 = 0, A = [[1],[0]], B = [[2]], C = [[0,1]], α = 3,
        // x = (5,7) → Δh = 3·(1·2·7, 0) = (42, 0).
        let w0 = Tensor::zeros(vec![2, 2]);
        let mut ad = init_tlora(SiteId::new(0, ProjKind::Query), &w0, 1, 0.0, 0).unwrap();
        ad.a.value.data = vec![1.0, 0.0];
        ad.b.value.data = vec![2.0];
        ad.c.value.data = vec![0.0, 1.0];
        ad.alpha.value.data = vec![3.0];
        let x = Tensor::new(vec![5.0, 7.0], vec![1, 2]).unwrap();
        let out = SiteAdapter::Tlora(ad)
            .forward(&x, Mode::Eval, &mut rng())
            .unwrap();
        assert_eq!(out.data, vec![42.0, 0.0]);
    }

    #[test]
    fn rescaling_b_and_alpha_is_invariant() {
        let w0 = random_w0(6, 6, 21);
        let b_init = normal_vec(&mut component_rng(5, "b"), 9, 0.7);
        let build = |b_scale: f64, alpha: f64| -> SiteAdapter {
            let mut ad = init_tlora(SiteId::new(2, ProjKind::Value), &w0, 3, 0.0, 23).unwrap();
            ad.b.value.data = b_init.iter().map(|v| v * b_scale).collect();
            ad.alpha.value.data = vec![alpha];
            SiteAdapter::Tlora(ad)
        };
        let x = random_input(5, 6, 25);
        let base = build(1.0, 1.3).forward(&x, Mode::Eval, &mut rng()).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let got = build(c, 1.3 / c).forward(&x, Mode::Eval, &mut rng()).unwrap();
            for (g, b) in got.data.iter().zip(&base.data) {
                let denom = b.abs().max(1e-12);
                assert!(((g - b) / denom).abs() < 1e-9, "c={c}: {g} vs {b}");
            }
        }
    }

    #[test]
    fn lora_initial_forward_is_base_forward_exact() {
        let w0 = random_w0(7, 4, 31);
        let ad = SiteAdapter::Lora(
            init_lora(SiteId::new(0, ProjKind::Query), &w0, 2, 2.0, 0.5, 33).unwrap(),
        );
        let x = random_input(3, 4, 34);
        let got = ad.forward(&x, Mode::Eval, &mut rng()).unwrap();
        let base = matops::mm_nt(&x.data, &w0.data, 3, 4, 7);
        assert!(got
            .data
            .iter()
            .zip(&base)
            .all(|(g, b)| g.to_bits() == b.to_bits()));
    }

    #[test]
    fn lora_census_is_r_times_d_plus_k() {
        let w0 = random_w0(10, 6, 41);
        let ad = init_lora(SiteId::new(0, ProjKind::Value), &w0, 3, 3.0, 0.0, 43).unwrap();
        assert_eq!(ad.trainable_count(), 3 * (10 + 6));
    }

    #[test]
    fn materialized_delta_matches_factored_forward() {
        let w0 = random_w0(6, 5, 51);
        let mut ad = init_tlora(SiteId::new(0, ProjKind::Query), &w0, 2, 0.0, 53).unwrap();
        assert!(ad.materialize_delta_w().data.iter().all(|&v| v == 0.0));

        ad.b.value.data = normal_vec(&mut component_rng(55, "b"), 4, 0.5);
        ad.alpha.value.data = vec![0.8];
        let sa = SiteAdapter::Tlora(ad);
        let delta = sa.materialize_delta_w();
        let x = random_input(4, 5, 56);
        let fwd = sa.forward(&x, Mode::Eval, &mut rng()).unwrap();
        let base = matops::mm_nt(&x.data, &w0.data, 4, 5, 6);
        let via_delta = matops::mm_nt(&x.data, &delta.data, 4, 5, 6);
        for i in 0..fwd.data.len() {
            let diff = fwd.data[i] - base[i];
            let denom = via_delta[i].abs().max(1e-12);
            assert!(
                ((diff - via_delta[i]) / denom).abs() < 1e-9,
                "factored {diff} vs materialized {}",
                via_delta[i]
            );
        }
    }

    #[test]
    fn attach_wraps_query_and_value_of_every_layer() {
        let mut model = build_model(&ModelConfig::toy(16), 61).unwrap();
        model.freeze_all();
        let mut cfg = AdapterConfig::new(Method::Tlora);
        cfg.rank = 4;
        let adapted = attach_adapters(model, &cfg, 62).unwrap();
        let set = adapted.adapters.as_ref().unwrap();
        assert_eq!(set.len(), 8);
        assert_eq!(set.trainable_param_count(), 8 * (4 * 4 + 1));
        assert_eq!(adapted.trainable_param_count(), 8 * (4 * 4 + 1));

        let mut model = build_model(&ModelConfig::toy(16), 61).unwrap();
        model.freeze_all();
        let mut cfg = AdapterConfig::new(Method::Lora);
        cfg.rank = 4;
        let adapted = attach_adapters(model, &cfg, 62).unwrap();
        assert_eq!(adapted.trainable_param_count(), 8 * 4 * 2 * 64);
    }

    #[test]
    fn attach_rejects_unknown_and_policy_excluded_sites() {
        let mut model = build_model(&ModelConfig::toy(16), 71).unwrap();
        model.freeze_all();
        let mut cfg = AdapterConfig::new(Method::Tlora);
        cfg.target_sites = vec!["ffn".into()];
        assert!(matches!(
            attach_adapters(model, &cfg, 72),
            Err(Error::Config(_))
        ));

        let mut model = build_model(&ModelConfig::toy(16), 71).unwrap();
        model.freeze_all();
        let mut cfg = AdapterConfig::new(Method::Tlora);
        cfg.target_sites = vec!["key".into()];
        assert!(matches!(
            attach_adapters(model, &cfg, 72),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attach_requires_frozen_model() {
        let model = build_model(&ModelConfig::toy(16), 81).unwrap();
        let cfg = AdapterConfig::new(Method::Tlora);
        assert!(matches!(
            attach_adapters(model, &cfg, 82),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let w0 = random_w0(8, 4, 91);
        assert!(init_tlora(SiteId::new(0, ProjKind::Query), &w0, 5, 0.0, 92).is_err());
        assert!(init_tlora(SiteId::new(0, ProjKind::Query), &w0, 4, 0.0, 92).is_ok());
    }

    #[test]
    fn reference_architecture_param_counts() {
        // 24 layers × {q, v}, d = k = 1024.
        for (r, tl, lo, imp) in [
            (8u64, 3_120u64, 786_432u64, 252u64),
            (16, 12_336, 1_572_864, 128),
            (32, 49_200, 3_145_728, 64),
        ] {
            let t = param_count(Method::Tlora, r, 1024, 1024, 48);
            assert_eq!(t.trainable, tl);
            assert_eq!(t.improvement_vs_lora, imp);
            let l = param_count(Method::Lora, r, 1024, 1024, 48);
            assert_eq!(l.trainable, lo);
            assert_eq!(l.improvement_vs_lora, 1);
        }
        // Tiny hand-checked case: r=1, d=k=2, one site.
        let t = param_count(Method::Tlora, 1, 2, 2, 1);
        assert_eq!((t.trainable, t.improvement_vs_lora), (2, 2));
    }
}
