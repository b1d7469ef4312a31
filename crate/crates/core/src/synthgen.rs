//! Seeded synthetic datasets with planted latent-topic structure.
//!
//! Every show draws a peaked mixture over `T` latent topics and its episodes
//! inherit it with a little noise. Users carry their own topic preference.
//! Each positive is either a mainstream play of one of a few hit episodes or a
//! taste-driven draw with probability proportional to
//! `popularity × affinity^sharpness`. A user takes at most one positive per
//! show, so every positive lies outside the shows the user already touched.
//! The KG and content embeddings are random projections of the episode
//! mixture blended with Gaussian noise; their signal strengths set the blend,
//! so neighbor lookups in the stronger space agree more often on topic.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    split_users, DatasetBundle, DatasetHeader, EmbeddingDims, EpisodeRecord, Interaction, InteractionSet, UserRecord,
    Vocabularies,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub shows: usize,
    /// Inclusive range of episodes per show.
    pub episodes_per_show: (usize, usize),
    pub topics: usize,
    pub dims: EmbeddingDims,
    /// Positives as a fraction of all user-episode pairs.
    pub density: f64,
    /// Exponent on user-episode topic affinity when sampling positives.
    pub sharpness: f64,
    /// Dirichlet concentration of show topic mixtures.
    pub show_concentration: f64,
    /// Dirichlet concentration of user topic preferences.
    pub user_concentration: f64,
    /// Number of hit episodes, each from a different show.
    pub hits: usize,
    /// Probability that a positive is a mainstream play of a hit.
    pub mainstream_share: f64,
    /// Zipf exponent of per-episode popularity.
    pub popularity_skew: f64,
    pub kg_signal_strength: f64,
    pub content_signal_strength: f64,
    /// Episode mixture perturbation and user-feature corruption.
    pub noise: f64,
    /// Probability that an episode's topic tags include its dominant topic;
    /// otherwise a random topic stands in for it.
    pub tag_accuracy: f64,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 800,
            shows: 300,
            episodes_per_show: (1, 6),
            topics: 12,
            dims: EmbeddingDims {
                user_cf: 16,
                user_podcast: 16,
                episode_cf: 16,
                content: 16,
                kg: 16,
            },
            density: 0.0015,
            sharpness: 4.0,
            show_concentration: 0.15,
            user_concentration: 0.2,
            hits: 0,
            mainstream_share: 0.0,
            popularity_skew: 0.0,
            kg_signal_strength: 0.9,
            content_signal_strength: 0.5,
            noise: 0.1,
            tag_accuracy: 1.0,
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The default dataset plus a single hit episode that draws a small
    /// share of plays regardless of taste, so that some episodes collect
    /// more than 50 train interactions.
    pub fn with_popular_head() -> Self {
        SynthConfig {
            hits: 1,
            mainstream_share: 0.06,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("shows", self.shows),
            ("topics", self.topics),
            ("episodes_per_show", self.episodes_per_show.0),
            ("dims.user_cf", self.dims.user_cf),
            ("dims.user_podcast", self.dims.user_podcast),
            ("dims.episode_cf", self.dims.episode_cf),
            ("dims.content", self.dims.content),
            ("dims.kg", self.dims.kg),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.episodes_per_show.1 < self.episodes_per_show.0 {
            return Err(Error::Config(format!(
                "empty episodes_per_show range {:?}",
                self.episodes_per_show
            )));
        }
        for (name, v) in [
            ("kg_signal_strength", self.kg_signal_strength),
            ("content_signal_strength", self.content_signal_strength),
            ("noise", self.noise),
            ("tag_accuracy", self.tag_accuracy),
            ("mainstream_share", self.mainstream_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("density", self.density),
            ("sharpness", self.sharpness),
            ("show_concentration", self.show_concentration),
            ("user_concentration", self.user_concentration),
            ("popularity_skew", self.popularity_skew),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.hits > self.shows {
            return Err(Error::Config(format!(
                "{} hits need as many shows, have {}",
                self.hits, self.shows
            )));
        }
        if self.hits == 0 && self.mainstream_share > 0.0 {
            return Err(Error::Config("mainstream_share needs at least one hit".into()));
        }
        if self.show_concentration == 0.0 || self.user_concentration == 0.0 {
            return Err(Error::Config("Dirichlet concentrations must be positive".into()));
        }
        Ok(())
    }
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && s.is_finite() {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `T → D` map with unit-norm columns.
struct Projection {
    cols: Vec<Vec<f64>>,
}

impl Projection {
    fn new<R: Rng>(rng: &mut R, topics: usize, dim: usize) -> Self {
        let cols = (0..topics)
            .map(|_| {
                let v = gaussian(rng, dim, 1.0);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Projection { cols }
    }

    fn apply(&self, mix: &[f64]) -> Vec<f64> {
        let dim = self.cols[0].len();
        let mut out = vec![0.0; dim];
        for (w, c) in mix.iter().zip(&self.cols) {
            for (o, x) in out.iter_mut().zip(c) {
                *o += w * x;
            }
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `strength·signal + (1 − strength)·noise`, both parts at unit scale.
fn blend<R: Rng>(rng: &mut R, signal: Vec<f64>, strength: f64) -> Vec<f64> {
    let dim = signal.len();
    let s = norm(&signal).max(1e-12);
    let noise = gaussian(rng, dim, 1.0 / (dim as f64).sqrt());
    signal
        .iter()
        .zip(noise)
        .map(|(x, n)| strength * x / s + (1.0 - strength) * n)
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Sample from `weights` restricted to `eligible[i] == true`.
fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64], eligible: &[bool]) -> Option<usize> {
    let total: f64 = weights.iter().zip(eligible).filter(|(_, &ok)| ok).map(|(w, _)| w).sum();
    if total <= 0.0 {
        let open: Vec<usize> = (0..weights.len()).filter(|&i| eligible[i]).collect();
        return open.choose(rng).copied();
    }
    let mut x = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, (&w, &ok)) in weights.iter().zip(eligible).enumerate() {
        if !ok {
            continue;
        }
        last = Some(i);
        if x < w {
            return Some(i);
        }
        x -= w;
    }
    last
}

/// Latent state behind a generated dataset, kept for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStructure {
    pub show_mixtures: Vec<Vec<f64>>,
    pub episode_mixtures: Vec<Vec<f64>>,
    pub user_preferences: Vec<Vec<f64>>,
    /// Expected share of all positives per episode.
    pub popularity: Vec<f64>,
    pub hits: Vec<usize>,
}

impl LatentStructure {
    pub fn dominant_show_topic(&self, show: usize) -> usize {
        argmax(&self.show_mixtures[show])
    }
}

pub fn generate(config: &SynthConfig) -> Result<DatasetBundle> {
    generate_with_latents(config).map(|(b, _)| b)
}

/// Generates a split bundle along with the latent state used to draw it.
/// Show indices in [`LatentStructure`] follow [`DatasetBundle::shows`].
pub fn generate_with_latents(config: &SynthConfig) -> Result<(DatasetBundle, LatentStructure)> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed, Stream::Generate);
    let t = config.topics;
    let d = config.dims;

    let countries = 6usize;
    let vocab = Vocabularies {
        gender: ["female", "male", "other"].map(String::from).to_vec(),
        age_bucket: ["18-24", "25-34", "35-44", "45-54", "55+"].map(String::from).to_vec(),
        country: (0..countries).map(|i| format!("country{i:02}")).collect(),
        language: ["en", "es", "de", "fr"].map(String::from).to_vec(),
        topic: (0..t).map(|i| format!("topic{i:02}")).collect(),
    };

    let kg_proj = Projection::new(&mut rng, t, d.kg);
    let content_proj = Projection::new(&mut rng, t, d.content);
    let ep_cf_proj = Projection::new(&mut rng, t, d.episode_cf);
    let user_cf_proj = Projection::new(&mut rng, t, d.user_cf);
    let podcast_proj = Projection::new(&mut rng, t, d.user_podcast);
    // Countries lean toward a topic; "mild" means a 30% pull.
    let topic_country: Vec<u32> = (0..t).map(|_| rng.gen_range(0..countries as u32)).collect();
    let lean = |rng: &mut rng::Rng, topic: usize| -> u32 {
        if rng.gen::<f64>() < 0.3 {
            topic_country[topic]
        } else {
            rng.gen_range(0..countries as u32)
        }
    };

    let show_mixtures: Vec<Vec<f64>> = (0..config.shows)
        .map(|_| dirichlet(&mut rng, config.show_concentration, t))
        .collect();
    let width = (config.shows as f64).log10().ceil().max(1.0) as usize + 1;
    let mut episodes = Vec::new();
    let mut episode_mixtures = Vec::new();
    let mut episode_show = Vec::new();
    for (s, mix) in show_mixtures.iter().enumerate() {
        let n = rng.gen_range(config.episodes_per_show.0..=config.episodes_per_show.1);
        for k in 0..n {
            let jitter = dirichlet(&mut rng, 1.0, t);
            let m: Vec<f64> = mix
                .iter()
                .zip(&jitter)
                .map(|(a, b)| (1.0 - config.noise) * a + config.noise * b)
                .collect();
            let top = argmax(&m);
            let tagged = if rng.gen::<f64>() < config.tag_accuracy {
                top as u32
            } else {
                rng.gen_range(0..t as u32)
            };
            let mut topics = BTreeSet::from([tagged]);
            for (i, &w) in m.iter().enumerate() {
                if i != top && rng.gen::<f64>() < w {
                    topics.insert(i as u32);
                }
            }
            if rng.gen::<f64>() < config.noise {
                topics.insert(rng.gen_range(0..t as u32));
            }
            episodes.push(EpisodeRecord {
                episode_id: format!("s{s:0width$}e{k:02}"),
                show_id: format!("s{s:0width$}"),
                topics,
                country: lean(&mut rng, top),
                cf_embedding: Vec::new(),
                content_embedding: blend(&mut rng, content_proj.apply(&m), config.content_signal_strength),
                kg_embedding: blend(&mut rng, kg_proj.apply(&m), config.kg_signal_strength),
            });
            episode_mixtures.push(m);
            episode_show.push(s);
        }
    }
    let n_eps = episodes.len();

    // Hits are the first episode of `hits` distinct random shows.
    let mut hit_shows: Vec<usize> = (0..config.shows).collect();
    hit_shows.shuffle(&mut rng);
    hit_shows.truncate(config.hits);
    let hits: Vec<usize> = hit_shows
        .iter()
        .map(|&s| {
            episode_show
                .iter()
                .position(|&es| es == s)
                .expect("every show has an episode")
        })
        .collect();
    let mut ranks: Vec<usize> = (0..n_eps).collect();
    ranks.shuffle(&mut rng);
    let tail: Vec<f64> = ranks
        .iter()
        .map(|&r| (1.0 + r as f64).powf(-config.popularity_skew))
        .collect();
    // Expected share of all positives, used to scale the CF signal.
    let tail_sum: f64 = tail.iter().sum();
    let mut popularity: Vec<f64> = tail
        .iter()
        .map(|w| (1.0 - config.mainstream_share) * w / tail_sum)
        .collect();
    for &h in &hits {
        popularity[h] += config.mainstream_share / config.hits.max(1) as f64;
    }
    let max_pop = popularity.iter().copied().fold(0.0, f64::max);
    // CF vectors only know what usage revealed: confident for popular
    // episodes, mostly noise for the tail. The first coordinate tracks
    // log-popularity.
    for (e, ep) in episodes.iter_mut().enumerate() {
        let confidence = (popularity[e] / max_pop).sqrt();
        let mut cf = blend(&mut rng, ep_cf_proj.apply(&episode_mixtures[e]), confidence);
        cf[0] = 1.0 + (popularity[e] / max_pop).ln() / (n_eps as f64).ln().max(1.0);
        ep.cf_embedding = cf;
    }

    let uwidth = (config.users as f64).log10().ceil().max(1.0) as usize + 1;
    let mut users = Vec::with_capacity(config.users);
    let mut prefs = Vec::with_capacity(config.users);
    for i in 0..config.users {
        let pref = dirichlet(&mut rng, config.user_concentration, t);
        let top = argmax(&pref);
        let mut liked = BTreeSet::from([top as u32]);
        for (k, &w) in pref.iter().enumerate() {
            if k != top && rng.gen::<f64>() < w {
                liked.insert(k as u32);
            }
        }
        if rng.gen::<f64>() < config.noise {
            liked.insert(rng.gen_range(0..t as u32));
        }
        let signal = 1.0 - config.noise;
        users.push(UserRecord {
            user_id: format!("u{i:0uwidth$}"),
            gender: rng.gen_range(0..3),
            age_bucket: ((top + rng.gen_range(0..3)) % 5) as u32,
            country: lean(&mut rng, top),
            language: rng.gen_range(0..4),
            liked_topics: liked,
            cf_embedding: blend(&mut rng, user_cf_proj.apply(&pref), signal * 0.8),
            podcast_embedding: blend(&mut rng, podcast_proj.apply(&pref), signal * 0.6),
            avg_stream_time: 600.0 * (1.0 + rng.gen::<f64>() * 5.0),
        });
        prefs.push(pref);
    }

    let total = (config.density * config.users as f64 * n_eps as f64).round() as usize;
    let capacity = config.users * config.shows;
    if total > capacity {
        return Err(Error::Config(format!(
            "density {} asks for {total} positives but only {capacity} discovery pairs exist",
            config.density
        )));
    }
    // Everyone gets one positive when the budget allows; the rest land on
    // uniformly chosen users with room left.
    let mut per_user = vec![0usize; config.users];
    let mut remaining = total;
    if total >= config.users {
        per_user.iter_mut().for_each(|c| *c = 1);
        remaining -= config.users;
    }
    while remaining > 0 {
        let u = rng.gen_range(0..config.users);
        if per_user[u] < config.shows {
            per_user[u] += 1;
            remaining -= 1;
        }
    }

    let mut positives = Vec::with_capacity(total);
    let mut weights = vec![0.0; n_eps];
    let mut hit_weights = vec![0.0; n_eps];
    for &h in &hits {
        hit_weights[h] = 1.0;
    }
    for (u, &count) in per_user.iter().enumerate() {
        for e in 0..n_eps {
            let aff: f64 = prefs[u].iter().zip(&episode_mixtures[e]).map(|(a, b)| a * b).sum();
            weights[e] = tail[e] * aff.powf(config.sharpness);
        }
        let mut open = vec![true; n_eps];
        for _ in 0..count {
            let mainstream = rng.gen::<f64>() < config.mainstream_share && hits.iter().any(|&h| open[h]);
            let pool = if mainstream { &hit_weights } else { &weights };
            let Some(e) = weighted_pick(&mut rng, pool, &open) else {
                break;
            };
            let s = episode_show[e];
            for (o, &es) in open.iter_mut().zip(&episode_show) {
                if es == s {
                    *o = false;
                }
            }
            positives.push(Interaction {
                user_id: users[u].user_id.clone(),
                episode_id: episodes[e].episode_id.clone(),
            });
        }
    }

    let mut header = DatasetHeader::new(d, vocab);
    header.stream_time_scale = 3600.0;
    header.generator = Some(serde_json::to_value(config)?);
    let mut bundle = DatasetBundle::new(
        header,
        users,
        episodes,
        InteractionSet {
            positives,
            split: BTreeMap::new(),
        },
    )?;
    split_users(&mut bundle, config.split, config.seed)?;
    let latents = LatentStructure {
        show_mixtures,
        episode_mixtures,
        user_preferences: prefs,
        popularity,
        hits,
    };
    Ok((bundle, latents))
}
