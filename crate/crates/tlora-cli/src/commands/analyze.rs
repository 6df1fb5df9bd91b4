use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use tlora_core::adapters::Method;
use tlora_core::analysis::{
    self, eigen_spectrum, layer_heatmap, norm_timeline, weight_histogram, HistogramReport,
    DEFAULT_BINS,
};
use tlora_core::error::{Error, Result};
use tlora_core::rundir::{self, RunData};

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Run directory produced by `tlora train`
    #[arg(long)]
    run: PathBuf,
    /// Epoch to analyze for histograms and spectra (default: final epoch)
    #[arg(long)]
    epoch: Option<usize>,
}

pub fn run(args: AnalyzeArgs) -> Result<()> {
    let data = RunData::load(&args.run)?;
    if data.adapter_manifest.is_none() {
        return Err(Error::Usage(
            "analyze requires an adapter run; the frozen control has nothing to analyze".into(),
        ));
    }
    let epoch = match args.epoch {
        Some(e) => {
            if !data.epochs.contains(&e) {
                return Err(Error::Data(format!(
                    "epoch {e} has no persisted weights (available: {:?})",
                    data.epochs
                )));
            }
            e
        }
        None => data
            .final_epoch()
            .ok_or_else(|| Error::Data("run has no persisted epochs".into()))?,
    };

    let reports = rundir::reports_dir(&args.run);
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    rundir::mark_incomplete(&reports)?;

    write_histograms(&data, epoch, &reports)?;
    write_timelines(&data, &reports)?;
    write_heatmaps(&data, &reports)?;
    write_spectra(&data, epoch, &reports)?;

    rundir::clear_incomplete(&reports)?;
    println!("reports written to {}", reports.display());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {name}: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Base projection weight name for a site string like `layer0.q`.
fn w0_param_name(site: &str) -> Result<String> {
    let (layer, proj) = site
        .split_once('.')
        .ok_or_else(|| Error::Data(format!("malformed site name '{site}'")))?;
    Ok(format!("{layer}.attn.{proj}.weight"))
}

fn write_histograms(data: &RunData, epoch: usize, reports: &Path) -> Result<()> {
    let manifest = data.adapter_manifest.as_ref().expect("adapter run");
    let weights = data.epoch_weights(epoch)?;
    let model_weights = rundir::read_model_weights(&data.dir)?;

    let mut histograms: Vec<HistogramReport> = Vec::new();
    for site in &manifest.sites {
        let w0_name = w0_param_name(&site.site)?;
        let w0 = model_weights.get(&w0_name).ok_or_else(|| {
            Error::Data(format!("model weights missing '{w0_name}' for site {}", site.site))
        })?;
        histograms.push(weight_histogram(&site.site, "w0", &w0.data, DEFAULT_BINS)?);
        let components: &[&str] = match manifest.method {
            Method::Tlora => &["a", "b", "c"],
            Method::Lora => &["down", "up"],
        };
        for comp in components {
            let t = &weights[&(site.site.clone(), comp.to_string())];
            histograms.push(weight_histogram(&site.site, comp, &t.data, DEFAULT_BINS)?);
        }
    }
    write_json(reports, "histograms.json", &histograms)?;

    let mut csv = String::from("site,component,bin_lo,bin_hi,count\n");
    for h in &histograms {
        if h.degenerate {
            let _ = writeln!(csv, "{},{},{},{},{}", h.site, h.component, h.bin_edges[0], h.bin_edges[1], h.counts[0]);
            continue;
        }
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                h.site, h.component, h.bin_edges[i], h.bin_edges[i + 1], c
            );
        }
    }
    write_text(reports, "histograms.csv", &csv)
}

fn write_timelines(data: &RunData, reports: &Path) -> Result<()> {
    let tl = norm_timeline(data)?;
    write_json(reports, "norm_timeline.json", &tl)?;

    let mut norms_csv = String::from("epoch");
    let mut alphas_csv = String::from("epoch");
    for s in &tl.sites {
        let _ = write!(norms_csv, ",b_norm.{s}");
        let _ = write!(alphas_csv, ",alpha.{s}");
    }
    norms_csv.push('\n');
    alphas_csv.push('\n');
    for (row, &epoch) in tl.epochs.iter().enumerate() {
        let _ = write!(norms_csv, "{epoch}");
        let _ = write!(alphas_csv, "{epoch}");
        for i in 0..tl.sites.len() {
            let _ = write!(norms_csv, ",{}", tl.b_norms[i][row]);
            let _ = write!(alphas_csv, ",{}", tl.alphas[i][row]);
        }
        norms_csv.push('\n');
        alphas_csv.push('\n');
    }
    write_text(reports, "norm_timeline.csv", &norms_csv)?;

    // The scaling timeline is the alpha view of the same series.
    #[derive(Serialize)]
    struct ScalingTimeline<'a> {
        sites: &'a [String],
        epochs: &'a [usize],
        alphas: &'a [Vec<f64>],
    }
    write_json(
        reports,
        "scaling_timeline.json",
        &ScalingTimeline {
            sites: &tl.sites,
            epochs: &tl.epochs,
            alphas: &tl.alphas,
        },
    )?;
    write_text(reports, "scaling_timeline.csv", &alphas_csv)
}

fn write_heatmaps(data: &RunData, reports: &Path) -> Result<()> {
    let manifest = data.adapter_manifest.as_ref().expect("adapter run");
    if manifest.method != Method::Tlora {
        // Heatmaps describe the tri-matrix factors; LoRA runs have none.
        return Ok(());
    }
    for comp in ['q', 'v'] {
        let hm = layer_heatmap(data, comp)?;
        write_json(reports, &format!("heatmap_{comp}.json"), &hm)?;
        let mut csv = String::from("epoch,layer,a_norm,b_norm,c_norm\n");
        for (e, &epoch) in hm.epochs.iter().enumerate() {
            for (l, &layer) in hm.layers.iter().enumerate() {
                let _ = writeln!(csv, "{epoch},{layer},{},{},{}", hm.a[e][l], hm.b[e][l], hm.c[e][l]);
            }
        }
        write_text(reports, &format!("heatmap_{comp}.csv"), &csv)?;
    }
    Ok(())
}

fn write_spectra(data: &RunData, epoch: usize, reports: &Path) -> Result<()> {
    let manifest = data.adapter_manifest.as_ref().expect("adapter run");
    let deltas = data.delta_ws(epoch)?;
    let mut spectra = Vec::new();
    for (site, delta) in &deltas {
        spectra.push(eigen_spectrum(site, manifest.method.as_str(), delta)?);
    }
    write_json(reports, "spectra.json", &spectra)?;

    // Numerical ranks alongside, since the spectra already cost the SVD.
    #[derive(Serialize)]
    struct RankEntry {
        site: String,
        rank: usize,
    }
    let ranks: Vec<RankEntry> = deltas
        .iter()
        .map(|(site, delta)| {
            Ok(RankEntry {
                site: site.clone(),
                rank: analysis::numerical_rank(
                    &delta.data,
                    delta.shape[0],
                    delta.shape[1],
                    analysis::RANK_TOL,
                )?,
            })
        })
        .collect::<Result<_>>()?;
    write_json(reports, "ranks.json", &ranks)
}
