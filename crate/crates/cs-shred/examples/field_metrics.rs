//! The three reconstruction scores: normalized error over a snapshot series,
//! peak signal-to-noise ratio, and structural similarity with the standard
//! 11x11 gaussian window. Watch all three degrade as noise grows.

use cs_shred::metrics::{normalized_error, psnr, ssim, MetricReport};
use cs_shred::rng;
use ndarray::Array2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = Array2::from_shape_fn((32, 32), |(i, j)| {
        ((i as f64) / 5.0).sin() + ((j as f64) / 3.0).cos()
    });
    let range = {
        let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        hi - lo
    };

    // a perfect reconstruction pins all three scores
    println!("identical grids: psnr {} dB, ssim {}",
        psnr(truth.view(), truth.view(), range)?,
        ssim(truth.view(), truth.view(), range)?);

    let mut rng = rng::stream_rng(0, "noise");
    for noise in [0.01, 0.05, 0.2, 1.0] {
        let noisy = truth.mapv(|v| v + noise * rng::normal(&mut rng));
        let err = normalized_error(
            &noisy.clone().into_shape_with_order((1, 1024))?,
            &truth.clone().into_shape_with_order((1, 1024))?,
        )?;
        println!(
            "noise {noise:>4}: normalized error {err:.3e}, psnr {:>6.2} dB, ssim {:.4}",
            psnr(noisy.view(), truth.view(), range)?,
            ssim(noisy.view(), truth.view(), range)?
        );
    }

    // reports serialize to plain text and parse back, infinities included
    let report = MetricReport {
        n_snapshots: 1,
        normalized_error_mean: 0.0,
        normalized_error_last: 0.0,
        psnr_mean_db: f64::INFINITY,
        psnr_last_db: f64::INFINITY,
        ssim_mean: 1.0,
        ssim_last: 1.0,
        mse_last: 0.0,
    };
    let text = report.to_text();
    assert_eq!(MetricReport::from_text(&text), Some(report));
    print!("\na perfect run's report:\n{text}");
    Ok(())
}
