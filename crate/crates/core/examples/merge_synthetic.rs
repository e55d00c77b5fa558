//! Merge three synthetic experts into one checkpoint and report per-layer
//! ranks and coefficients.
//!
//! Whitened layers have Frobenius norm `sqrt(rank)`, so β only departs from 1
//! when same-type layers end up with different merged ranks.

use esm::merge::{self, MergeConfig};
use esm::synthetic::{self, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        blocks: 2,
        d_model: 16,
        tasks: 3,
        update_rank: 4,
        ..SyntheticSpec::default()
    };
    let set = synthetic::generate(&spec);
    let cfg = MergeConfig::default();
    let out = merge::merge_model(&set.base, &set.experts, &set.proxies, &cfg)?;

    println!("merged {} tensors, alpha = {}", out.model.len(), out.alpha);
    println!("{:<30} {:>8} {:>5} {:>8}  task coefficients", "layer", "type", "k", "beta");
    for (name, delta) in &out.merged.layers {
        let tasks: Vec<String> = (0..spec.tasks)
            .map(|t| format!("{:.3}", out.merged.report.per_task[&(name.clone(), t)]))
            .collect();
        println!(
            "{name:<30} {:>8} {:>5} {:>8.4}  [{}]  |Δ|={:.3}",
            cfg.layer_rules.classify(name).to_string(),
            out.merged.ranks[name],
            out.merged.betas[name],
            tasks.join(", "),
            delta.norm()
        );
    }
    Ok(())
}
