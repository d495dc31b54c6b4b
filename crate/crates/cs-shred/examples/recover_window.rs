//! Fill the gaps of one time window by basis pursuit denoising: find sparse
//! Fourier coefficients that explain the observed samples, then resynthesize
//! the whole window. Three solver flavors are compared on the same problem.

use cs_shred::bpdn::{recover_window, LambdaRule, SolverConfig, StepRule};
use cs_shred::linops::AvailabilityIndex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::f64::consts::TAU;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let l = 64;
    // a 3-sparse real signal: three harmonics, known ground truth
    let truth: Vec<f64> = (0..l)
        .map(|t| {
            let t = t as f64 / l as f64;
            1.0 * (TAU * 4.0 * t).sin() + 0.6 * (TAU * 9.0 * t).cos() + 0.3 * (TAU * 17.0 * t).sin()
        })
        .collect();

    // keep a random 60% of the samples
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut idx: Vec<usize> = (0..l).collect();
    idx.shuffle(&mut rng);
    let mut kept: Vec<usize> = idx[..(l * 6 / 10)].to_vec();
    kept.sort_unstable();
    let avail = AvailabilityIndex::new(kept, l)?;
    println!("observed {} of {l} samples", avail.n_observed());

    let window: Vec<f64> = (0..l)
        .map(|i| if avail.indices().contains(&i) { truth[i] } else { 0.0 })
        .collect();

    for (name, step_rule, acceleration) in [
        ("ista  ", StepRule::Fixed, false),
        ("fista ", StepRule::Fixed, true),
        ("sparsa", StepRule::BarzilaiBorwein, false),
    ] {
        let cfg = SolverConfig {
            lambda: LambdaRule::ScaledInfNorm(1e-3),
            max_iters: 5000,
            tol: 1e-10,
            step_rule,
            acceleration,
        };
        let sol = recover_window(&window, &avail, &cfg)?;
        let err: f64 = sol
            .y_star
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let support = sol.xi.iter().filter(|z| z.norm() > 1e-6).count();
        println!(
            "{name} relative error {err:.2e}, {} iterations, {support} active coefficients, \
             lambda {:.3e}, converged {}",
            sol.iterations, sol.lambda, sol.converged
        );
    }

    // crank lambda past 2 ||Theta^H b||_inf and the zero vector wins
    let cfg = SolverConfig {
        lambda: LambdaRule::ScaledInfNorm(2.5),
        ..SolverConfig::default()
    };
    let sol = recover_window(&window, &avail, &cfg)?;
    let energy: f64 = sol.xi.iter().map(|z| z.norm_sqr()).sum();
    println!("\nover-penalized run: coefficient energy {energy:.1e} after {} iterations",
        sol.iterations);
    Ok(())
}
