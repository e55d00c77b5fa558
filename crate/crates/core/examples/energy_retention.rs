//! Energy-retention curves of one low-rank update: SVD spreads energy over
//! more directions than ESD, which saturates at the update's rank.

use esm::decomp::{self, SpectrumKind};
use esm::linalg;
use esm::verify::gaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d_out, d_in, rank) = (12, 10, 4);
    let dw = gaussian(d_out, rank, &mut rng) * gaussian(rank, d_in, &mut rng);
    let x = gaussian(64, d_in, &mut rng);

    let svd = decomp::energy_retention(&linalg::thin_svd(&dw)?.s, SpectrumKind::Svd)?;
    let shift = decomp::activation_shift(&x, &dw)?;
    let esd = decomp::energy_retention(&linalg::pca_basis(&shift, false)?.values, SpectrumKind::Esd)?;

    println!("{:>3} {:>8} {:>8}", "k", "svd", "esd");
    for k in 0..svd.len() {
        println!("{:>3} {:>8.4} {:>8.4}", k + 1, svd[k], esd[k]);
    }
    println!("true rank {rank}: esd reaches {:.12} there", esd[rank - 1]);
    Ok(())
}
