use clap::Args;
use serde_json::json;
use tlora_core::adapters::{lora_trainable, tlora_trainable};
use tlora_core::error::Result;

use crate::config::MethodArg;

#[derive(Args)]
pub struct ParamsArgs {
    /// Restrict output to one method (default: both plus the ratio)
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Adapter rank r
    #[arg(long, default_value_t = 32)]
    rank: u64,
    /// Output dimension d of each adapted projection
    #[arg(long, default_value_t = 1024)]
    d: u64,
    /// Input dimension k of each adapted projection
    #[arg(long, default_value_t = 1024)]
    k: u64,
    /// Number of transformer layers
    #[arg(long, default_value_t = 24)]
    layers: u64,
    /// Adapted projections per layer (query and value by default)
    #[arg(long, default_value_t = 2)]
    sites_per_layer: u64,
    /// Emit machine-readable JSON instead of the table
    #[arg(long)]
    json: bool,
}

pub fn run(args: ParamsArgs) -> Result<()> {
    let n_sites = args.layers * args.sites_per_layer;
    let tlora = tlora_trainable(args.rank, n_sites);
    let lora = lora_trainable(args.rank, args.d, args.k, n_sites);
    // Full fine-tuning proxy: the adapted projection weights themselves.
    // A real model carries far more parameters (embeddings, FFNs, ...).
    let full_ft = args.d * args.k * n_sites;
    let ratio_exact = lora as f64 / tlora as f64;
    let ratio = ratio_exact.round() as u64;

    if args.json {
        let out = json!({
            "rank": args.rank,
            "d": args.d,
            "k": args.k,
            "layers": args.layers,
            "sites_per_layer": args.sites_per_layer,
            "n_sites": n_sites,
            "full_ft_proxy": full_ft,
            "lora": lora,
            "tlora": tlora,
            "improvement": ratio,
            "improvement_exact": ratio_exact,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("json"));
        return Ok(());
    }

    println!(
        "rank {}, {} sites ({} layers x {} per layer), d={}, k={}",
        args.rank, n_sites, args.layers, args.sites_per_layer, args.d, args.k
    );
    let show_tlora = !matches!(args.method, Some(MethodArg::Lora));
    let show_lora = !matches!(args.method, Some(MethodArg::Tlora));
    println!("  full-ft proxy {:>12}   (adapted projection weights only, not the full model)", group(full_ft));
    if show_lora {
        println!("  lora          {:>12}   = sites * r * (d + k)", group(lora));
    }
    if show_tlora {
        println!("  tlora         {:>12}   = sites * (r^2 + 1)", group(tlora));
    }
    if show_tlora && show_lora {
        println!("  improvement   {:>12}x  (exact {ratio_exact:.2})", ratio);
    }
    Ok(())
}

/// Thousands separators for readability.
fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::group;

    #[test]
    fn grouping() {
        assert_eq!(group(3), "3");
        assert_eq!(group(3120), "3,120");
        assert_eq!(group(786432), "786,432");
        assert_eq!(group(3145728), "3,145,728");
    }
}
