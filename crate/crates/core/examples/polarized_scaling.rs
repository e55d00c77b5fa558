//! Norm-ratio coefficients at the three levels, and how the variants bend them.

use std::collections::BTreeMap;

use esm::scaling::{self, LayerRules, Variant};
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let norms = [1.0, 3.0];
    println!("norms {norms:?}");
    for exponent in [0.0, 1.0, 2.0, 3.0] {
        println!("  exponent {exponent}: {:?}", scaling::relative_power(&norms, exponent));
    }

    let gammas = scaling::relative_power(&[0.5, 1.0, 2.5], 2.0);
    for variant in [Variant::Full, Variant::Reverse, Variant::NoiseMinus, Variant::SignalPlus, Variant::None] {
        let bent: Vec<String> = gammas
            .iter()
            .map(|&g| scaling::apply_variant(g, variant).map(|v| format!("{v:.3}")))
            .collect::<Result<_, _>>()?;
        println!("{variant:?}: {}", bent.join(" "));
    }

    let a_cat = DMatrix::from_row_slice(2, 3, &[3.0, 0.1, 1.0, 4.0, 0.1, 1.0]);
    println!("column coefficients {:?}", scaling::inter_dim_coeffs(&a_cat, 2.0));

    let layers: BTreeMap<String, DMatrix<f64>> = [
        ("blocks.0.attn.qkv.weight", 1.0),
        ("blocks.1.attn.qkv.weight", 2.0),
        ("blocks.0.mlp.c_fc.weight", 5.0),
    ]
    .into_iter()
    .map(|(n, s)| (n.to_string(), DMatrix::identity(2, 2) * s))
    .collect();
    for (name, beta) in scaling::inter_layer_coeffs(&layers, &LayerRules::default(), 2.0) {
        println!("beta {name}: {beta:.4}");
    }
    Ok(())
}
