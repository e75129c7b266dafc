//! Renders validation EER curves of two metrics logs into an SVG.
//!
//! `cargo run --example plot_curves -- A=run_a/metrics.jsonl B=run_b/metrics.jsonl`
//! With no arguments two made-up curves are plotted.

use std::path::Path;

use relnet_speaker::plot::{eer_curve, read_metrics, render_svg, Curve};

fn made_up(label: &str, rate: f64) -> Curve {
    Curve {
        label: label.into(),
        points: (0..=30)
            .map(|e| (e as f64, 5.0 + 45.0 * (-rate * e as f64).exp()))
            .collect(),
    }
}

fn main() -> relnet_speaker::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let curves = if args.is_empty() {
        vec![made_up("vanilla", 0.12), made_up("improved", 0.2)]
    } else {
        args.iter()
            .map(|a| {
                let (label, path) = a.split_once('=').unwrap_or((a.as_str(), a.as_str()));
                Ok(eer_curve(label, &read_metrics(Path::new(path))?))
            })
            .collect::<relnet_speaker::Result<_>>()?
    };
    let svg = render_svg(&curves, "Validation EER by epoch", "EER (%)")?;
    let out = std::env::temp_dir().join("relnet-curves.svg");
    std::fs::write(&out, svg).expect("write svg");
    println!("wrote {} ({} curves)", out.display(), curves.len());
    Ok(())
}
