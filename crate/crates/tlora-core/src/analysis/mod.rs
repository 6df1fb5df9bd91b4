//! Adaptation-dynamics diagnostics: weight histograms, norm and scaling
//! timelines, layer heatmaps, update spectra, and cross-run similarity.
//!
//! Everything here is a pure function over loaded matrices or persisted run
//! data; nothing mutates a run directory except the report writers in the
//! CLI.

pub mod jacobi;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rundir::RunData;
use crate::tensor::{matops, Tensor};

pub use jacobi::{eigen_sym, numerical_rank, singular_values, symmetric_part};

/// Default histogram bin count: odd, so zero-centered data gets a center bin.
pub const DEFAULT_BINS: usize = 61;

/// Eigenvalues with magnitude below this count as zero in spectrum reports.
pub const SPECTRUM_ZERO_TOL: f64 = 1e-12;

/// Default relative tolerance for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

// ── Histograms ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramReport {
    pub site: String,
    /// Component label: `a`, `b`, `c`, `alpha`, `w0`, `down`, `up`.
    pub component: String,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    /// m₄/m₂² − 3; `None` for constant data (undefined).
    pub excess_kurtosis: Option<f64>,
    /// True when every entry is identical and the report collapses to one
    /// degenerate bin.
    pub degenerate: bool,
}

/// Equal-width histogram over `[min, max]` with summary moments.
pub fn weight_histogram(
    site: &str,
    component: &str,
    values: &[f64],
    n_bins: usize,
) -> Result<HistogramReport> {
    if n_bins < 2 {
        return Err(Error::Config(format!(
            "histogram needs at least 2 bins, got {n_bins}"
        )));
    }
    if values.is_empty() {
        return Err(Error::Data("histogram of an empty matrix".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();
    let excess_kurtosis = (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);

    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(HistogramReport {
            site: site.into(),
            component: component.into(),
            bin_edges: vec![lo, hi],
            counts: vec![values.len() as u64],
            mean,
            std,
            excess_kurtosis,
            degenerate: true,
        });
    }
    let width = (hi - lo) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; n_bins];
    for v in values {
        let idx = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    Ok(HistogramReport {
        site: site.into(),
        component: component.into(),
        bin_edges,
        counts,
        mean,
        std,
        excess_kurtosis,
        degenerate: false,
    })
}

// ── Spectra ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub site: String,
    pub method: String,
    /// Magnitudes of positive symmetric-part eigenvalues, descending.
    pub positive: Vec<f64>,
    /// Magnitudes of negative symmetric-part eigenvalues, descending.
    pub negative: Vec<f64>,
    /// Eigenvalues with |λ| < 1e-12.
    pub n_zero: usize,
    /// Singular values of ΔW itself, descending.
    pub singular_values: Vec<f64>,
}

/// Spectrum of a square update matrix: the (always-real) eigenvalues of its
/// symmetric part split by sign, plus the singular values of the matrix
/// itself. A general square update may have complex eigenvalues; both views
/// here are real and together characterize the signed structure.
pub fn eigen_spectrum(site: &str, method: &str, delta_w: &Tensor) -> Result<SpectrumReport> {
    if delta_w.shape.len() != 2 || delta_w.shape[0] != delta_w.shape[1] {
        return Err(Error::dim("eigen_spectrum", &delta_w.shape, &delta_w.shape));
    }
    let n = delta_w.shape[0];
    let sym = symmetric_part(&delta_w.data, n);
    let (eigvals, _) = eigen_sym(&sym, n)?;
    let mut positive: Vec<f64> = eigvals
        .iter()
        .filter(|&&l| l > SPECTRUM_ZERO_TOL)
        .copied()
        .collect();
    let mut negative: Vec<f64> = eigvals
        .iter()
        .filter(|&&l| l < -SPECTRUM_ZERO_TOL)
        .map(|l| l.abs())
        .collect();
    let n_zero = n - positive.len() - negative.len();
    positive.sort_by(|a, b| b.partial_cmp(a).unwrap());
    negative.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(SpectrumReport {
        site: site.into(),
        method: method.into(),
        positive,
        negative,
        n_zero,
        singular_values: singular_values(&delta_w.data, n, n)?,
    })
}

// ── Similarity ────────────────────────────────────────────────────────────

/// Cosine similarity of two equal-shaped matrices, flattened. `None` when
/// either operand is all-zero: a zero matrix has no direction, so the value
/// is undefined rather than 1 or 0.
pub fn cosine_similarity(m1: &Tensor, m2: &Tensor) -> Result<Option<f64>> {
    if m1.shape != m2.shape {
        return Err(Error::dim("cosine_similarity", &m1.shape, &m2.shape));
    }
    let n1 = matops::frob_norm(&m1.data);
    let n2 = matops::frob_norm(&m2.data);
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(None);
    }
    Ok(Some(matops::dot(&m1.data, &m2.data) / (n1 * n2)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffSummary {
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Element-wise difference `m1 - m2` with its summary.
pub fn elementwise_diff(m1: &Tensor, m2: &Tensor) -> Result<(Tensor, DiffSummary)> {
    if m1.shape != m2.shape {
        return Err(Error::dim("elementwise_diff", &m1.shape, &m2.shape));
    }
    let diff: Vec<f64> = m1.data.iter().zip(&m2.data).map(|(a, b)| a - b).collect();
    let max_abs = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean_abs = diff.iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64;
    Ok((
        Tensor::new(diff, m1.shape.clone())?,
        DiffSummary { max_abs, mean_abs },
    ))
}

/// Per-site comparison of two runs' materialized updates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub site: String,
    /// `null` when either update is all-zero (undefined direction).
    pub cosine: Option<f64>,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub sites: Vec<SimilarityEntry>,
}

/// Compare two runs' dense updates site by site. Shapes must agree at every
/// shared site; sites are matched by name.
pub fn similarity_report(
    a: &[(String, Tensor)],
    b: &[(String, Tensor)],
) -> Result<SimilarityReport> {
    let bmap: BTreeMap<&str, &Tensor> = b.iter().map(|(s, t)| (s.as_str(), t)).collect();
    let mut sites = Vec::new();
    for (site, ta) in a {
        let tb = bmap.get(site.as_str()).ok_or_else(|| {
            Error::Data(format!("site {site} present in run A but missing in run B"))
        })?;
        if ta.shape != tb.shape {
            return Err(Error::Dim {
                op: "compare",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let cosine = cosine_similarity(ta, tb)?;
        let (_, summary) = elementwise_diff(ta, tb)?;
        sites.push(SimilarityEntry {
            site: site.clone(),
            cosine,
            max_abs_diff: summary.max_abs,
            mean_abs_diff: summary.mean_abs,
        });
    }
    Ok(SimilarityReport { sites })
}

// ── Timelines and heatmaps over persisted runs ────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormTimeline {
    pub sites: Vec<String>,
    pub epochs: Vec<usize>,
    /// `[site][epoch]` B-matrix norms (TLoRA) or update norms (LoRA).
    pub b_norms: Vec<Vec<f64>>,
    /// `[site][epoch]` α values (TLoRA) or the fixed scale (LoRA).
    pub alphas: Vec<Vec<f64>>,
}

/// Per-site B-norm and α series over every persisted epoch.
pub fn norm_timeline(run: &RunData) -> Result<NormTimeline> {
    let manifest = run
        .adapter_manifest
        .as_ref()
        .ok_or_else(|| Error::Usage("norm_timeline requires an adapter run".into()))?;
    if run.epochs.is_empty() {
        return Err(Error::Data("run has no persisted epochs".into()));
    }
    let sites: Vec<String> = manifest.sites.iter().map(|s| s.site.clone()).collect();
    let mut b_norms = vec![Vec::with_capacity(run.epochs.len()); sites.len()];
    let mut alphas = vec![Vec::with_capacity(run.epochs.len()); sites.len()];
    for &epoch in &run.epochs {
        let weights = run.epoch_weights(epoch)?;
        for (i, site) in sites.iter().enumerate() {
            match manifest.method {
                crate::adapters::Method::Tlora => {
                    let b = &weights[&(site.clone(), "b".to_string())];
                    let alpha = &weights[&(site.clone(), "alpha".to_string())];
                    b_norms[i].push(b.norm());
                    alphas[i].push(alpha.data[0]);
                }
                crate::adapters::Method::Lora => {
                    let deltas =
                        crate::rundir::delta_w_from_weights(manifest, &weights, run.lora_scaling())?;
                    let delta = &deltas.iter().find(|(s, _)| s == site).unwrap().1;
                    b_norms[i].push(delta.norm());
                    alphas[i].push(run.lora_scaling());
                }
            }
        }
    }
    Ok(NormTimeline {
        sites,
        epochs: run.epochs.clone(),
        b_norms,
        alphas,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatmapReport {
    /// `q` or `v`.
    pub component: String,
    pub layers: Vec<usize>,
    pub epochs: Vec<usize>,
    /// `[epoch][layer]` Frobenius norms per tri-matrix component.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

/// Frobenius-norm grid of the A, B, C factors by layer and epoch, for the
/// query or value sites of a TLoRA run. The A and C rows are constant across
/// epochs (the factors are fixed); B varies with training.
pub fn layer_heatmap(run: &RunData, component: char) -> Result<HeatmapReport> {
    let manifest = run
        .adapter_manifest
        .as_ref()
        .ok_or_else(|| Error::Usage("layer_heatmap requires an adapter run".into()))?;
    if manifest.method != crate::adapters::Method::Tlora {
        return Err(Error::Usage(
            "layer_heatmap supports TLoRA runs only (LoRA has no tri-matrix factors)".into(),
        ));
    }
    if component != 'q' && component != 'v' {
        return Err(Error::Config(format!(
            "heatmap component must be 'q' or 'v', got '{component}'"
        )));
    }
    let suffix = format!(".{component}");
    let mut layers = Vec::new();
    let mut site_names = Vec::new();
    for s in &manifest.sites {
        if let Some(layer) = s
            .site
            .strip_prefix("layer")
            .and_then(|rest| rest.strip_suffix(&suffix))
            .and_then(|num| num.parse::<usize>().ok())
        {
            layers.push(layer);
            site_names.push(s.site.clone());
        }
    }
    if layers.is_empty() {
        return Err(Error::Data(format!(
            "run has no '{component}' sites for a heatmap"
        )));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    for &epoch in &run.epochs {
        let weights = run.epoch_weights(epoch)?;
        let row = |label: &str| -> Vec<f64> {
            site_names
                .iter()
                .map(|s| weights[&(s.clone(), label.to_string())].norm())
                .collect()
        };
        a.push(row("a"));
        b.push(row("b"));
        c.push(row("c"));
    }
    Ok(HeatmapReport {
        component: component.to_string(),
        layers,
        epochs: run.epochs.clone(),
        a,
        b,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{component_rng, normal_vec};

    fn t(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn histogram_of_zero_matrix_is_one_flagged_bin() {
        let h = weight_histogram("layer0.q", "b", &[0.0; 64], DEFAULT_BINS).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.counts, vec![64]);
        assert_eq!(h.std, 0.0);
        assert!(h.excess_kurtosis.is_none());
    }

    #[test]
    fn histogram_counts_cover_all_entries_and_edges_increase() {
        let vals = normal_vec(&mut component_rng(1, "hist"), 4096, 0.5);
        let h = weight_histogram("layer0.q", "a", &vals, DEFAULT_BINS).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 4096);
        assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
        assert!(!h.degenerate);
    }

    #[test]
    fn histogram_std_of_kaiming_sample() {
        // 32×8 Kaiming(fan_in=8) sample: std within 10% of sqrt(2/8) = 0.5.
        let vals = normal_vec(&mut component_rng(3, "hist-k"), 32 * 8, 0.5);
        let h = weight_histogram("layer0.q", "a", &vals, 31).unwrap();
        assert!((h.std - 0.5).abs() / 0.5 < 0.10, "std {}", h.std);
    }

    #[test]
    fn gaussian_sample_has_near_zero_excess_kurtosis() {
        let vals = normal_vec(&mut component_rng(9, "hist-kurt"), 1_000_000, 1.0);
        let h = weight_histogram("x", "x", &vals, DEFAULT_BINS).unwrap();
        let k = h.excess_kurtosis.unwrap();
        assert!(k.abs() < 0.05, "excess kurtosis {k}");
    }

    #[test]
    fn histogram_rejects_silly_bin_counts() {
        assert!(weight_histogram("s", "c", &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn spectrum_of_diagonal_and_zero() {
        let d = t(vec![3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0], vec![3, 3]);
        let r = eigen_spectrum("layer0.q", "tlora", &d).unwrap();
        assert_eq!(r.positive.len(), 1);
        assert!((r.positive[0] - 3.0).abs() < 1e-10);
        assert_eq!(r.negative.len(), 1);
        assert!((r.negative[0] - 1.0).abs() < 1e-10);
        assert_eq!(r.n_zero, 1);

        let z = t(vec![0.0; 9], vec![3, 3]);
        let rz = eigen_spectrum("layer0.q", "tlora", &z).unwrap();
        assert!(rz.positive.is_empty() && rz.negative.is_empty());
        assert_eq!(rz.n_zero, 3);

        let rect = t(vec![0.0; 6], vec![2, 3]);
        assert!(eigen_spectrum("s", "m", &rect).is_err());
    }

    #[test]
    fn spectrum_sign_split_is_exhaustive_on_random_matrices() {
        for trial in 0..20 {
            let n = 3 + trial % 6;
            let data = normal_vec(&mut component_rng(trial as u64, "spec"), n * n, 1.0);
            let m = t(data, vec![n, n]);
            let r = eigen_spectrum("s", "m", &m).unwrap();
            assert_eq!(r.positive.len() + r.negative.len() + r.n_zero, n);
            assert!(r.positive.windows(2).all(|w| w[0] >= w[1]));
            assert!(r.negative.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(r.singular_values.len(), n);
        }
    }

    #[test]
    fn singular_values_scale_with_alpha() {
        // σ(α·M) = |α|·σ(M).
        let data = normal_vec(&mut component_rng(7, "sv"), 36, 1.0);
        let sv1 = singular_values(&data, 6, 6).unwrap();
        let scaled: Vec<f64> = data.iter().map(|v| v * -2.5).collect();
        let sv2 = singular_values(&scaled, 6, 6).unwrap();
        for (a, b) in sv1.iter().zip(&sv2) {
            let denom = (2.5 * a).abs().max(1e-12);
            assert!(((2.5 * a - b) / denom).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_basic_cases() {
        let m = t(vec![1.0, 2.0, -3.0, 0.5], vec![2, 2]);
        let c = cosine_similarity(&m, &m).unwrap().unwrap();
        assert!((c - 1.0).abs() < 1e-12);

        let e1 = t(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]);
        let e2 = t(vec![0.0, 1.0, 0.0, 0.0], vec![2, 2]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap().unwrap(), 0.0);

        let neg = t(m.data.iter().map(|v| -v).collect(), vec![2, 2]);
        let c = cosine_similarity(&m, &neg).unwrap().unwrap();
        assert!((c + 1.0).abs() < 1e-12);

        let z = Tensor::zeros(vec![2, 2]);
        assert_eq!(cosine_similarity(&z, &z).unwrap(), None);
        assert_eq!(cosine_similarity(&m, &z).unwrap(), None);

        let bad = Tensor::zeros(vec![3]);
        assert!(cosine_similarity(&m, &bad).is_err());
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant() {
        let mut rng = component_rng(31, "cos-prop");
        for _ in 0..100 {
            let a = t(normal_vec(&mut rng, 12, 1.0), vec![3, 4]);
            let b = t(normal_vec(&mut rng, 12, 1.0), vec![3, 4]);
            let ab = cosine_similarity(&a, &b).unwrap().unwrap();
            let ba = cosine_similarity(&b, &a).unwrap().unwrap();
            assert!((ab - ba).abs() < 1e-12);

            let sa = t(a.data.iter().map(|v| 3.0 * v).collect(), vec![3, 4]);
            let sb = t(b.data.iter().map(|v| -0.25 * v).collect(), vec![3, 4]);
            let scaled = cosine_similarity(&sa, &sb).unwrap().unwrap();
            // sign(3.0 · -0.25) = -1
            assert!((scaled + ab).abs() < 1e-12, "{scaled} vs {ab}");
            assert!(ab.abs() <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn elementwise_diff_summary() {
        let a = t(vec![1.0, 2.0], vec![2]);
        let b = t(vec![0.5, 4.0], vec![2]);
        let (d, s) = elementwise_diff(&a, &b).unwrap();
        assert_eq!(d.data, vec![0.5, -2.0]);
        assert_eq!(s.max_abs, 2.0);
        assert_eq!(s.mean_abs, 1.25);
    }

    #[test]
    fn similarity_report_matches_sites() {
        let a = vec![
            ("layer0.q".to_string(), t(vec![1.0, 0.0], vec![1, 2])),
            ("layer0.v".to_string(), Tensor::zeros(vec![1, 2])),
        ];
        let b = vec![
            ("layer0.q".to_string(), t(vec![2.0, 0.0], vec![1, 2])),
            ("layer0.v".to_string(), Tensor::zeros(vec![1, 2])),
        ];
        let r = similarity_report(&a, &b).unwrap();
        assert!((r.sites[0].cosine.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.sites[1].cosine, None);

        let bad = vec![("layer0.q".to_string(), Tensor::zeros(vec![2, 2]))];
        assert!(matches!(
            similarity_report(&a, &bad),
            Err(Error::Data(_)) | Err(Error::Dim { .. })
        ));
    }

    #[test]
    fn tlora_rank_bound_on_materialized_update() {
        // Construction oracle: r = 4, d = k = 16, random nonzero B.
        use crate::adapters::{init_tlora, SiteAdapter};
        use crate::model::{ProjKind, SiteId};
        let w0 = t(
            normal_vec(&mut component_rng(41, "w0"), 256, 0.2),
            vec![16, 16],
        );
        let mut ad = init_tlora(SiteId::new(0, ProjKind::Query), &w0, 4, 0.0, 43).unwrap();
        ad.b.value.data = normal_vec(&mut component_rng(44, "b"), 16, 0.5);
        let delta = SiteAdapter::Tlora(ad).materialize_delta_w();
        assert_eq!(numerical_rank(&delta.data, 16, 16, RANK_TOL).unwrap(), 4);
        let sv = singular_values(&delta.data, 16, 16).unwrap();
        assert!(sv[4] < 1e-8 * sv[0], "σ₅ = {} vs σ₁ = {}", sv[4], sv[0]);
    }
}
