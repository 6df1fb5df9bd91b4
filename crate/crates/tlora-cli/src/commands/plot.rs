use std::path::{Path, PathBuf};

use clap::Args;
use tlora_core::analysis::{HistogramReport, NormTimeline, SpectrumReport};
use tlora_core::error::{Error, Result};
use tlora_core::rundir;

use crate::svg::{self, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum What {
    /// Train/validation loss curves from metrics.csv
    Loss,
    /// Per-site B-norm evolution (requires `analyze`)
    Norms,
    /// Per-site scaling-factor evolution (requires `analyze`)
    Alphas,
    /// Update spectrum of one site (requires `analyze`)
    Spectrum,
    /// Weight histogram of one site component (requires `analyze`)
    Hist,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Run directory
    #[arg(long)]
    run: PathBuf,
    /// Which chart to render
    #[arg(long, value_enum)]
    what: What,
    /// Output SVG path
    #[arg(long)]
    out: PathBuf,
    /// Site selector for spectrum/hist (default: first site)
    #[arg(long)]
    site: Option<String>,
    /// Component selector for hist (default: b)
    #[arg(long)]
    component: Option<String>,
}

fn read_report<T: for<'de> serde::Deserialize<'de>>(run: &Path, name: &str) -> Result<T> {
    let path = rundir::reports_dir(run).join(name);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "missing report {}; run `tlora analyze --run {}` first",
            path.display(),
            run.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))
}

pub fn run(args: PlotArgs) -> Result<()> {
    let svg = match args.what {
        What::Loss => plot_loss(&args.run)?,
        What::Norms => plot_timeline(&args.run, false)?,
        What::Alphas => plot_timeline(&args.run, true)?,
        What::Spectrum => plot_spectrum(&args.run, args.site.as_deref())?,
        What::Hist => plot_hist(&args.run, args.site.as_deref(), args.component.as_deref())?,
    };
    std::fs::write(&args.out, svg).map_err(|e| Error::io(&args.out, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn plot_loss(run: &Path) -> Result<String> {
    let path = rundir::metrics_path(run);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "missing {}; train a run first",
            path.display()
        )));
    }
    let table = rundir::read_metrics(&path)?;
    let epochs = table
        .column("epoch")
        .ok_or_else(|| Error::Data("metrics.csv has no epoch column".into()))?;
    let series = ["train_loss", "val_loss"]
        .iter()
        .map(|name| {
            let vals = table
                .column(name)
                .ok_or_else(|| Error::Data(format!("metrics.csv has no {name} column")))?;
            Ok(Series {
                name: name.to_string(),
                points: epochs.iter().copied().zip(vals).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(svg::line_chart(
        "training and validation loss",
        "epoch",
        "cross-entropy loss",
        &series,
        "no data",
    ))
}

fn plot_timeline(run: &Path, alphas: bool) -> Result<String> {
    let tl: NormTimeline = read_report(run, "norm_timeline.json")?;
    let values = if alphas { &tl.alphas } else { &tl.b_norms };
    let series: Vec<Series> = tl
        .sites
        .iter()
        .zip(values)
        .map(|(site, vals)| Series {
            name: site.clone(),
            points: tl
                .epochs
                .iter()
                .map(|&e| e as f64)
                .zip(vals.iter().copied())
                .collect(),
        })
        .collect();
    let (title, y_label) = if alphas {
        ("scaling factors over training", "alpha")
    } else {
        ("update-norm evolution over training", "L2 norm")
    };
    Ok(svg::line_chart(title, "epoch", y_label, &series, "no data"))
}

fn plot_spectrum(run: &Path, site: Option<&str>) -> Result<String> {
    let spectra: Vec<SpectrumReport> = read_report(run, "spectra.json")?;
    let report = pick(&spectra, site, |s| &s.site)?;
    let mut series = Vec::new();
    for (name, vals) in [("positive", &report.positive), ("negative", &report.negative)] {
        if !vals.is_empty() {
            series.push(Series {
                name: name.into(),
                points: vals
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (i as f64, v))
                    .collect(),
            });
        }
    }
    Ok(svg::line_chart(
        &format!("update spectrum at {}", report.site),
        "index",
        "eigenvalue magnitude",
        &series,
        "no nonzero eigenvalues",
    ))
}

fn plot_hist(run: &Path, site: Option<&str>, component: Option<&str>) -> Result<String> {
    let histograms: Vec<HistogramReport> = read_report(run, "histograms.json")?;
    let component = component.unwrap_or("b");
    let matching: Vec<&HistogramReport> = histograms
        .iter()
        .filter(|h| h.component == component)
        .collect();
    if matching.is_empty() {
        return Err(Error::Data(format!(
            "no '{component}' histograms in the report"
        )));
    }
    let report = match site {
        Some(s) => *matching
            .iter()
            .find(|h| h.site == s)
            .ok_or_else(|| Error::Data(format!("no histogram for site '{s}'")))?,
        None => matching[0],
    };
    Ok(svg::histogram_chart(
        &format!("{} weights at {}", report.component, report.site),
        "value",
        &report.bin_edges,
        &report.counts,
    ))
}

fn pick<'a, T>(items: &'a [T], key: Option<&str>, get: impl Fn(&T) -> &str) -> Result<&'a T> {
    match key {
        None => items
            .first()
            .ok_or_else(|| Error::Data("report is empty".into())),
        Some(k) => items
            .iter()
            .find(|i| get(i) == k)
            .ok_or_else(|| Error::Data(format!("no entry for site '{k}'"))),
    }
}
