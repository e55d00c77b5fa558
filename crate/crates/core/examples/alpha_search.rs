//! Choose the global coefficient by scoring candidate checkpoints.
//!
//! The scorer here rewards closeness of one layer to a hidden target merged
//! at α = 0.35; any evaluation returning "higher is better" fits.

use std::sync::Arc;

use esm::merge::{self, AlphaPolicy, MergeConfig, Scorer};
use esm::synthetic::{self, SyntheticSpec};
use esm::tensorstore::TensorMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = synthetic::generate(&SyntheticSpec::default());
    let hidden = MergeConfig {
        alpha: AlphaPolicy::Fixed(0.35),
        ..MergeConfig::default()
    };
    let target = merge::merge_model(&set.base, &set.experts, &set.proxies, &hidden)?.model;

    let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let counter = Arc::clone(&calls);
    let scorer: Scorer = Arc::new(move |m: &TensorMap| {
        counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let name = "blocks.1.mlp.c_fc.weight";
        let (a, b) = (m.get(name).ok_or("missing layer")?, target.get(name).ok_or("missing layer")?);
        Ok(-a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>())
    });
    let cfg = MergeConfig {
        alpha: AlphaPolicy::Search { lo: 0.0, hi: 1.5, scorer },
        ..MergeConfig::default()
    };
    let out = merge::merge_model(&set.base, &set.experts, &set.proxies, &cfg)?;
    println!(
        "selected alpha {:.4} after {} scorer calls",
        out.alpha,
        calls.load(std::sync::atomic::Ordering::Relaxed)
    );

    // The same search on a plain function.
    let a = merge::select_alpha(0.0, 2.0, |a| Ok::<_, ()>(-(a - 0.7f64).powi(2)))
        .map_err(|e| format!("{e:?}"))?;
    println!("argmax of -(a-0.7)^2 on [0, 2]: {a:.4}");
    Ok(())
}
