//! Linear CKA between feature matrices: invariant to rotation and scale,
//! insensitive to noise only up to a point.

use esm::verify::{self, gaussian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = gaussian(100, 8, &mut rng);
    let rotation = gaussian(8, 8, &mut rng).qr().q();
    let unrelated = gaussian(100, 8, &mut rng);

    println!("self            {:.6}", verify::linear_cka(&f, &f)?);
    println!("rotated, x3     {:.6}", verify::linear_cka(&f, &(&f * &rotation * 3.0))?);
    for noise in [0.1, 0.5, 1.0, 3.0] {
        let noisy = &f + gaussian(100, 8, &mut rng) * noise;
        println!("noise {noise:<8} {:.6}", verify::linear_cka(&f, &noisy)?);
    }
    println!("unrelated       {:.6}", verify::linear_cka(&f, &unrelated)?);
    Ok(())
}
