//! The linear algebra under the recovery stage: a restriction onto observed
//! samples, a unitary DFT, and their composition theta = R F^H mapping
//! frequency coefficients to the samples we actually saw. Adjoints are
//! checked with the classic inner-product test.

use cs_shred::linops::{
    compose_theta, inner, AvailabilityIndex, LinearOperator, Restriction, UnitaryDft,
};
use cs_shred::num_complex::Complex64;
use rand::{Rng, SeedableRng};

fn rand_cvec(rng: &mut impl Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let l = 32;

    // keep indices 0,2,4,... as the "observed" half of the window
    let iava = AvailabilityIndex::new((0..l).step_by(2).collect(), l)?;
    let r = Restriction::new(iava);
    let f = UnitaryDft::new(l);
    let theta = compose_theta(&r, &f)?;
    println!(
        "restriction {}x{}, dft {}x{}, theta {}x{}",
        r.rows(), r.cols(), f.rows(), f.cols(), theta.rows(), theta.cols()
    );

    // unitarity: F^H F = I and Parseval
    let x = rand_cvec(&mut rng, l);
    let fx = f.forward(&x);
    let back = f.adjoint(&fx);
    let worst = x.iter().zip(&back).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let norm_in: f64 = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let norm_out: f64 = fx.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    println!("dft round trip max error {worst:.2e}, parseval gap {:.2e}",
        (norm_in - norm_out).abs());

    // adjoint identity <A u, v> = <u, A^H v> for each operator
    for (name, op) in [
        ("restriction", &r as &dyn LinearOperator),
        ("dft", &f),
        ("theta", &theta),
    ] {
        let u = rand_cvec(&mut rng, op.cols());
        let v = rand_cvec(&mut rng, op.rows());
        let lhs = inner(&op.forward(&u), &v);
        let rhs = inner(&u, &op.adjoint(&v));
        println!("{name}: <Au,v> = {lhs:.12}, <u,A^H v> = {rhs:.12}, gap {:.2e}",
            (lhs - rhs).norm());
    }

    // theta in action: a frequency-sparse coefficient vector reaches the
    // observed samples through F^H then restriction
    let mut xi = vec![Complex64::default(); l];
    xi[3] = Complex64::new(1.0, 0.0);
    xi[l - 3] = Complex64::new(1.0, 0.0);
    let observed = theta.forward(&xi);
    println!("\nsparse coefficients -> {} observed samples, first three: {:.4}, {:.4}, {:.4}",
        observed.len(), observed[0].re, observed[1].re, observed[2].re);
    Ok(())
}
