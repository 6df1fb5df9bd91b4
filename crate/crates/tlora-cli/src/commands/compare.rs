use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use tlora_core::analysis::{eigen_spectrum, similarity_report, SimilarityReport, SpectrumReport};
use tlora_core::error::{Error, Result};
use tlora_core::rundir::{self, RunData};
use tlora_core::tensor::Tensor;

#[derive(Args)]
pub struct CompareArgs {
    /// First run directory
    #[arg(long)]
    run_a: PathBuf,
    /// Second run directory
    #[arg(long)]
    run_b: PathBuf,
    /// Epoch to compare (default: each run's final epoch)
    #[arg(long)]
    epoch: Option<usize>,
    /// Compare runs even when their dataset fingerprints differ
    #[arg(long)]
    force: bool,
    /// Directory to write compare.json / spectra / diff files into
    /// (default: print the report to stdout only)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump each site's full element-wise difference matrix as CSV
    /// (requires --out)
    #[arg(long)]
    dump_diff: bool,
}

#[derive(Serialize)]
struct CompareReport {
    run_a: String,
    run_b: String,
    method_a: String,
    method_b: String,
    epoch_a: usize,
    epoch_b: usize,
    similarity: SimilarityReport,
    spectra_a: Vec<SpectrumReport>,
    spectra_b: Vec<SpectrumReport>,
}

pub fn run(args: CompareArgs) -> Result<()> {
    if args.dump_diff && args.out.is_none() {
        return Err(Error::Usage("--dump-diff requires --out".into()));
    }
    let a = RunData::load(&args.run_a)?;
    let b = RunData::load(&args.run_b)?;

    if a.config.dataset.fingerprint_sha256 != b.config.dataset.fingerprint_sha256 && !args.force {
        return Err(Error::Usage(format!(
            "dataset fingerprints differ ({}… vs {}…); pass --force to compare anyway",
            &a.config.dataset.fingerprint_sha256[..12.min(a.config.dataset.fingerprint_sha256.len())],
            &b.config.dataset.fingerprint_sha256[..12.min(b.config.dataset.fingerprint_sha256.len())]
        )));
    }

    let epoch_of = |run: &RunData| -> Result<usize> {
        match args.epoch {
            Some(e) if run.epochs.contains(&e) => Ok(e),
            Some(e) => Err(Error::Data(format!(
                "{}: epoch {e} has no persisted weights",
                run.dir.display()
            ))),
            None => run
                .final_epoch()
                .ok_or_else(|| Error::Data(format!("{}: no persisted epochs", run.dir.display()))),
        }
    };
    let (ea, eb) = (epoch_of(&a)?, epoch_of(&b)?);

    let deltas_a = a.delta_ws(ea)?;
    let deltas_b = b.delta_ws(eb)?;
    check_site_shapes(&deltas_a, &deltas_b)?;

    let similarity = similarity_report(&deltas_a, &deltas_b)?;
    let method_a = a.config.method.clone();
    let method_b = b.config.method.clone();
    let spectra_a = spectra(&deltas_a, &method_a)?;
    let spectra_b = spectra(&deltas_b, &method_b)?;

    let report = CompareReport {
        run_a: args.run_a.display().to_string(),
        run_b: args.run_b.display().to_string(),
        method_a,
        method_b,
        epoch_a: ea,
        epoch_b: eb,
        similarity,
        spectra_a,
        spectra_b,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("serializing compare report: {e}")))?;

    match &args.out {
        None => println!("{text}"),
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            rundir::mark_incomplete(dir)?;
            let path = dir.join("compare.json");
            std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            if args.dump_diff {
                dump_diffs(dir, &deltas_a, &deltas_b)?;
            }
            rundir::clear_incomplete(dir)?;
            println!("comparison written to {}", path.display());
        }
    }
    Ok(())
}

fn check_site_shapes(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> Result<()> {
    for (site, ta) in a {
        if let Some((_, tb)) = b.iter().find(|(s, _)| s == site) {
            if ta.shape != tb.shape {
                return Err(Error::Data(format!(
                    "site {site}: incompatible shapes {:?} vs {:?}",
                    ta.shape, tb.shape
                )));
            }
        } else {
            return Err(Error::Data(format!(
                "site {site} present in run A but missing in run B"
            )));
        }
    }
    Ok(())
}

fn spectra(deltas: &[(String, Tensor)], method: &str) -> Result<Vec<SpectrumReport>> {
    deltas
        .iter()
        .map(|(site, delta)| eigen_spectrum(site, method, delta))
        .collect()
}

fn dump_diffs(dir: &Path, a: &[(String, Tensor)], b: &[(String, Tensor)]) -> Result<()> {
    for (site, ta) in a {
        let tb = &b.iter().find(|(s, _)| s == site).expect("checked above").1;
        let (diff, _) = tlora_core::analysis::elementwise_diff(ta, tb)?;
        let cols = diff.shape[1];
        let mut csv = String::new();
        for row in diff.data.chunks(cols) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    csv.push(',');
                }
                let _ = write!(csv, "{v}");
            }
            csv.push('\n');
        }
        let path = dir.join(format!("diff_{site}.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
