//! Multi-seed comparison of the trained variants on synthetic data.
//!
//! Usage: `sweep [SEEDS] [JSON] [VARIANTS]` where JSON may hold `lambda`,
//! `synth` and `train` overrides, e.g.
//! `{"synth":{"sharpness":3},"train":{"epochs":10}}`, and VARIANTS is a
//! comma list such as `tt,msacl-kg-fd`.

use std::time::Instant;

use discorec::datamodel::DatasetBundle;
use discorec::datamodel::Split;
use discorec::evaluate::Ranker;
use discorec::evaluate::{
    evaluate_model, popularity_buckets, BucketEdges, EvalOptions, ModelRanker, Popularity, PopularityRanker,
};
use discorec::objective::{train_prepared, TrainConfig, TrainingData, Variant, DEFAULT_LAMBDA};
use discorec::synthgen::{generate_with_latents, LatentStructure, SynthConfig};

struct Oracle<'a>(&'a LatentStructure, f64);

impl Ranker for Oracle<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn scores(&self, bundle: &DatasetBundle, user: usize) -> Vec<f64> {
        let pref = &self.0.user_preferences[user];
        (0..bundle.episodes().len())
            .map(|e| {
                let aff: f64 = pref.iter().zip(&self.0.episode_mixtures[e]).map(|(a, b)| a * b).sum();
                self.0.popularity[e] * aff.powf(self.1)
            })
            .collect()
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            match b.get_mut(k) {
                Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                _ => {
                    b.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let patch: serde_json::Value = args
        .get(2)
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .unwrap_or_default();
    let variants: Vec<Variant> = match args.get(3) {
        Some(list) => list.split(',').map(|s| s.parse()).collect::<Result<_, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let lambda = patch.get("lambda").and_then(|v| v.as_f64()).unwrap_or(DEFAULT_LAMBDA);
    let edges = BucketEdges::default();
    let mut wins = vec![0usize; variants.len()];
    let mut diffs = vec![Vec::new(); variants.len()];
    let mut cold = vec![0usize; variants.len()];
    let mut kg_content = 0usize;
    for seed in 0..seeds {
        let mut synth = serde_json::to_value(SynthConfig {
            seed,
            ..SynthConfig::default()
        })?;
        if let Some(p) = patch.get("synth") {
            merge(&mut synth, p);
        }
        let synth: SynthConfig = serde_json::from_value(synth)?;
        let (bundle, latents) = generate_with_latents(&synth)?;
        let pop = evaluate_model(
            &PopularityRanker::new(&bundle, Popularity::Global),
            &bundle,
            Split::Test,
            EvalOptions::default(),
        )?;
        let mut line = format!("seed {seed:2} pop {:.4}", pop.metrics.ndcg_20);
        let oracle = evaluate_model(
            &Oracle(&latents, synth.sharpness),
            &bundle,
            Split::Test,
            EvalOptions::default(),
        )?;
        line += &format!(" oracle {:.4}", oracle.metrics.ndcg_20);
        let mut evals = vec![oracle];
        let mut tt = None;
        for (i, &v) in variants.iter().enumerate() {
            let started = Instant::now();
            let mut cfg = serde_json::to_value(TrainConfig::for_variant(v, lambda, 0.3, 10, seed))?;
            if let Some(p) = patch.get("train") {
                merge(&mut cfg, p);
            }
            let mut cfg: TrainConfig = serde_json::from_value(cfg)?;
            cfg.apply_variant(v, if v == Variant::Tt { 0.0 } else { lambda });
            let data = TrainingData::prepare(&bundle, &cfg)?;
            let out = train_prepared(&bundle, &data, &cfg)?;
            let ranker = ModelRanker::new(
                v.label(),
                &out.params,
                &data.user_features,
                &data.episode_features,
                cfg.exec,
            )?;
            let ev = evaluate_model(&ranker, &bundle, Split::Test, EvalOptions::default())?;
            let n = ev.metrics.ndcg_20;
            if v == Variant::Tt {
                tt = Some(n);
            } else if let Some(t) = tt {
                wins[i] += (n > t) as usize;
                diffs[i].push(n - t);
            }
            line += &format!(
                " | {} {:.4} (best ep {} {:.1}s)",
                v.name(),
                n,
                out.best_epoch,
                started.elapsed().as_secs_f64()
            );
            evals.push(ev);
        }
        println!("{line}");
        let refs: Vec<_> = evals.iter().collect();
        let table = popularity_buckets(&bundle, &refs, &edges)?;
        let mut b = String::from("   buckets");
        for label in edges.labels() {
            b += &format!(" [{label}:");
            for ev in &evals {
                match table.get(&ev.model, &label) {
                    Some(r) => b += &format!(" {:.3}/{}", r.ndcg_20, r.interactions),
                    None => b += " -",
                }
            }
            b += "]";
        }
        println!("{b}");
        let gain = |m: &str, bucket: &str| -> Option<f64> {
            Some(table.get(m, bucket)?.ndcg_20 - table.get(Variant::Tt.label(), bucket)?.ndcg_20)
        };
        for (i, v) in variants.iter().enumerate() {
            let m = v.label();
            if let (Some(a), Some(c), Some(h)) = (gain(m, "0-1"), gain(m, "2-3"), gain(m, ">50")) {
                cold[i] += (a > h && c > h) as usize;
            }
        }
        let ndcg = |v: Variant| evals.iter().find(|e| e.model == v.label()).map(|e| e.metrics.ndcg_20);
        if let (Some(k), Some(c)) = (ndcg(Variant::MsaclKg), ndcg(Variant::MsaclContent)) {
            kg_content += (k >= c) as usize;
        }
    }
    println!("kg >= content in {kg_content}/{seeds}");
    for (v, c) in variants.iter().zip(&cold) {
        println!("{} cold gain beats >50 gain in {c}/{seeds}", v.name());
    }
    for ((v, w), d) in variants.iter().zip(&wins).zip(&diffs) {
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        println!("{} beats TT in {w}/{seeds}  mean diff {mean:+.4} sd {sd:.4}", v.name());
    }
    Ok(())
}
