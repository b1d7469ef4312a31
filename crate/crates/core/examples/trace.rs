//! Prints the per-epoch training log of one run as JSON lines.
//!
//! Usage: `trace [VARIANT] [SEED] [JSON]` with the same override format as
//! `sweep`.

use discorec::exec::Exec;
use discorec::objective::{train_prepared, TrainConfig, TrainingData, Variant, DEFAULT_LAMBDA};
use discorec::synthgen::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(Variant::Tt);
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let patch: serde_json::Value = args
        .get(3)
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .unwrap_or_default();
    let mut synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if let Some(p) = patch.get("synth") {
        synth = serde_json::from_value(merged(serde_json::to_value(&synth)?, p))?;
    }
    let bundle = generate(&synth)?;
    let lambda = patch.get("lambda").and_then(|v| v.as_f64()).unwrap_or(DEFAULT_LAMBDA);
    let mut cfg = TrainConfig::for_variant(variant, lambda, 0.3, 10, seed);
    if let Some(p) = patch.get("train") {
        cfg = serde_json::from_value(merged(serde_json::to_value(&cfg)?, p))?;
    }
    let data = TrainingData::prepare(&bundle, &cfg)?;
    let out = train_prepared(&bundle, &data, &cfg)?;
    for rec in &out.log {
        println!("{}", serde_json::to_string(rec)?);
    }
    let emb = out.params.embed_episodes(&data.episode_features, Exec::Sequential)?;
    let counts = bundle.train_counts();
    for (lo, hi) in [(0u32, 1u32), (2, 3), (4, 10), (11, u32::MAX)] {
        let rows: Vec<usize> = (0..emb.rows()).filter(|&e| (lo..=hi).contains(&counts[e])).collect();
        let dead = rows.iter().filter(|&&e| emb.row(e).iter().all(|&x| x == 0.0)).count();
        let mean_norm = rows
            .iter()
            .map(|&e| emb.row(e).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / rows.len().max(1) as f64;
        println!(
            "train count {lo}-{hi}: {} episodes, {dead} all-zero, mean norm {mean_norm:.3}",
            rows.len()
        );
    }
    let active: Vec<usize> = (0..emb.cols())
        .filter(|&c| (0..emb.rows()).any(|e| emb.get(e, c) != 0.0))
        .collect();
    println!("active output units: {} of {}", active.len(), emb.cols());
    Ok(())
}

fn merged(mut base: serde_json::Value, patch: &serde_json::Value) -> serde_json::Value {
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            let slot = b.remove(k).unwrap_or(serde_json::Value::Null);
            let next = if slot.is_object() && v.is_object() {
                merged(slot, v)
            } else {
                v.clone()
            };
            b.insert(k.clone(), next);
        }
    }
    base
}
