//! Compare truncation error of ESD and plain SVD on one update whose input
//! distribution is anisotropic, so the two bases disagree.

use esm::decomp;
use esm::verify::gaussian;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d_out, d_in, n) = (16, 12, 200);
    let dw = gaussian(d_out, d_in, &mut rng);
    // Inputs mostly live in the first three coordinates.
    let mut x = gaussian(n, d_in, &mut rng);
    for j in 3..d_in {
        x.column_mut(j).scale_mut(0.05);
    }

    println!("{:>3} {:>14} {:>14} {:>14}", "k", "svd error", "esd error", "sum dropped λ");
    for k in 1..=8 {
        let svd = decomp::svd_truncate(&dw, k)?;
        let esd = decomp::esd(&dw, &x, k)?;
        let e_svd = decomp::empirical_error(&dw, &svd.reconstruct(), &x)?;
        let e_esd = decomp::empirical_error(&dw, &esd.reconstruct(), &x)?;
        println!(
            "{k:>3} {e_svd:>14.6} {e_esd:>14.6} {:>14.6}",
            decomp::expected_error_esd(&esd.spectrum, k)
        );
    }
    let full: DMatrix<f64> = decomp::esd(&dw, &x, d_out)?.reconstruct();
    println!("full-rank ESD reconstructs ΔW to {:.2e}", (full - &dw).amax());
    Ok(())
}
