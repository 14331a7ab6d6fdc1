//! Runs one of the preset workflows and prints its report.
//!
//! `cargo run --release --example workflow -- [lossless|lossy|mixed] [bins_per_class]`

use photon_vae::workflows::{export_latent, run_plan, TrainPlan};

fn main() -> photon_vae::Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "lossless".into());
    let bins: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let plan = match which.as_str() {
        "lossless" => TrainPlan::algorithm1(1.3, bins, 7),
        "lossy" => TrainPlan::algorithm2(1.9, &[0.9, 0.8, 0.6], &[1.3, 1.6, 2.0, 2.4], bins, 7)?,
        "mixed" => TrainPlan::mixed_grid(1.3, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], bins, 7),
        other => {
            eprintln!("unknown workflow {other}; expected lossless, lossy or mixed");
            std::process::exit(1);
        }
    };
    let out = run_plan(&plan)?;
    for s in &out.stages {
        eprintln!("bin {}: {} epochs, best {}", s.bin_size, s.history.epochs_run(), s.history.best_epoch);
    }
    print!("{}", out.report.to_csv());
    let latent = export_latent(&out.base().model, &out.base().test)?;
    eprintln!("latent silhouette {:.3}", latent.silhouette());
    Ok(())
}
