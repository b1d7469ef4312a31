//! Training objective and loop.
//!
//! The interaction term is a sampled-negative logistic loss
//! `−[log σ(r̂_ui) + Σ_j log(1 − σ(r̂_uj))]`. The logistic is applied to the
//! negative scores as well, since `log(1 − r̂)` is undefined for raw dot
//! products outside (0, 1). The contrastive term is NT-Xent over the `2N`
//! episodes of a minibatch: each interacted episode is pulled toward its
//! augmented view against the other `2N − 1` batch items. The two are
//! combined as `L = L_int + λ·L_CL`.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, EvalOptions, Metrics, ModelRanker};
use crate::exec::Exec;
use crate::featurize::{
    build_schemas, dropout_in_place, encode_episodes, encode_users, DropoutMode, FeatureSchema, SchemaOptions,
};
use crate::linalg::{dot, Matrix};
use crate::neighbors::{build_index, ForestParams, IndexMode, NeighborCache, Space};
use crate::rng::{self, Stream};
use crate::tower::{init_params, optimizer_step, AdamConfig, ForwardCache, OptimizerState, TowerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionRule {
    /// Pick one of the listed sources per pair.
    #[default]
    Uniform,
    /// Apply the listed sources in order: a neighbor stage moves to a
    /// neighbor of the current episode, a dropout stage masks the current
    /// view.
    Chain,
}

/// How the positive view `i_b` of an interacted episode `i_a` is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSource {
    FeatureDropout {
        p: f64,
    },
    ContentNeighbors {
        k: usize,
    },
    KgNeighbors {
        k: usize,
    },
    Composite {
        sources: Vec<AugmentationSource>,
        rule: CompositionRule,
    },
}

impl AugmentationSource {
    /// KG neighbor followed by feature dropout.
    pub fn kg_fd(k: usize, p: f64) -> Self {
        AugmentationSource::Composite {
            sources: vec![
                AugmentationSource::KgNeighbors { k },
                AugmentationSource::FeatureDropout { p },
            ],
            rule: CompositionRule::Chain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentationSource::FeatureDropout { p } if !(0.0..=1.0).contains(p) => {
                Err(Error::Config(format!("dropout probability {p} outside [0, 1]")))
            }
            AugmentationSource::ContentNeighbors { k: 0 } | AugmentationSource::KgNeighbors { k: 0 } => {
                Err(Error::Config("neighbor K must be at least 1".into()))
            }
            AugmentationSource::Composite { sources, .. } => {
                if sources.is_empty() {
                    return Err(Error::Config("composite augmentation lists no sources".into()));
                }
                sources.iter().try_for_each(AugmentationSource::validate)
            }
            _ => Ok(()),
        }
    }

    /// Largest K requested from `space`, if the source uses it at all.
    pub fn neighbor_k(&self, space: Space) -> Option<usize> {
        match (self, space) {
            (AugmentationSource::ContentNeighbors { k }, Space::Content) => Some(*k),
            (AugmentationSource::KgNeighbors { k }, Space::Kg) => Some(*k),
            (AugmentationSource::Composite { sources, .. }, _) => {
                sources.iter().filter_map(|s| s.neighbor_k(space)).max()
            }
            _ => None,
        }
    }
}

/// Provenance of one augmented view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Episode whose features the view was built from.
    pub episode: usize,
    /// Last neighbor space stepped through, if any.
    pub space: Option<Space>,
    pub masked: bool,
    /// A neighbor list was empty and dropout was used instead.
    pub fallback: bool,
}

/// Everything `make_pair` needs to build views.
pub struct Augmenter<'a> {
    pub episode_features: &'a Matrix,
    pub schema: &'a FeatureSchema,
    pub content: Option<&'a NeighborCache>,
    pub kg: Option<&'a NeighborCache>,
    /// Dropout probability used when a neighbor list is empty.
    pub fallback_p: f64,
    pub dropout_mode: DropoutMode,
}

struct View {
    episode: usize,
    values: Option<Vec<f64>>,
    prov: Provenance,
}

impl<'a> Augmenter<'a> {
    fn cache(&self, space: Space) -> Result<&'a NeighborCache> {
        match space {
            Space::Content => self.content,
            Space::Kg => self.kg,
        }
        .ok_or_else(|| Error::Config(format!("no {space} neighbor cache was built")))
    }

    fn mask<R: Rng>(&self, view: &mut View, p: f64, rng: &mut R) -> Result<()> {
        let values = view
            .values
            .get_or_insert_with(|| self.episode_features.row(view.episode).to_vec());
        dropout_in_place(self.schema, values, p, self.dropout_mode, rng)?;
        view.prov.masked = true;
        Ok(())
    }

    fn apply<R: Rng>(&self, source: &AugmentationSource, view: &mut View, rng: &mut R) -> Result<()> {
        match source {
            AugmentationSource::FeatureDropout { p } => self.mask(view, *p, rng),
            AugmentationSource::ContentNeighbors { k } => self.step(Space::Content, *k, view, rng),
            AugmentationSource::KgNeighbors { k } => self.step(Space::Kg, *k, view, rng),
            AugmentationSource::Composite { sources, rule } => match rule {
                CompositionRule::Uniform => {
                    let s = sources
                        .choose(rng)
                        .ok_or_else(|| Error::Config("composite augmentation lists no sources".into()))?;
                    self.apply(s, view, rng)
                }
                CompositionRule::Chain => sources.iter().try_for_each(|s| self.apply(s, view, rng)),
            },
        }
    }

    fn step<R: Rng>(&self, space: Space, k: usize, view: &mut View, rng: &mut R) -> Result<()> {
        let list = self.cache(space)?.neighbors(view.episode);
        let list = &list[..list.len().min(k)];
        if list.is_empty() {
            view.prov.fallback = true;
            return self.mask(view, self.fallback_p, rng);
        }
        let j = list[rng.gen_range(0..list.len())];
        view.episode = j;
        view.values = None;
        view.prov.episode = j;
        view.prov.space = Some(space);
        view.prov.masked = false;
        Ok(())
    }
}

/// Builds the augmented view `i_b` for the interacted episode `anchor`.
pub fn make_pair<R: Rng>(
    aug: &Augmenter<'_>,
    source: &AugmentationSource,
    anchor: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Provenance)> {
    let mut view = View {
        episode: anchor,
        values: None,
        prov: Provenance {
            episode: anchor,
            space: None,
            masked: false,
            fallback: false,
        },
    };
    aug.apply(source, &mut view, rng)?;
    let values = view
        .values
        .unwrap_or_else(|| aug.episode_features.row(view.episode).to_vec());
    Ok((values, view.prov))
}

/// `N` interactions with their anchor and augmented episode views.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub users: Matrix,
    pub anchors: Matrix,
    pub augmented: Matrix,
    pub provenance: Vec<Provenance>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_anchors: Matrix,
    pub grad_augmented: Matrix,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// NT-Xent over row-aligned anchor/augmented embeddings.
///
/// The `2N` items are interleaved as `a₁, b₁, a₂, b₂, …`. For anchor `a_k`
/// the loss is `−log(exp(a_k·b_k/τ) / Σ_{m≠a_k} exp(a_k·z_m/τ))`; the batch
/// loss is the mean over anchors. With `symmetric`, each `b_k` also acts as
/// an anchor with positive `a_k`.
pub fn ntxent_from_embeddings(
    anchors: &Matrix,
    augmented: &Matrix,
    temperature: f64,
    symmetric: bool,
) -> Result<ContrastiveOutput> {
    let n = anchors.rows();
    if n == 0 {
        return Err(Error::Argument("contrastive batch is empty".into()));
    }
    if augmented.rows() != n || augmented.cols() != anchors.cols() {
        return Err(Error::Shape(format!(
            "anchors {}x{} vs augmented {}x{}",
            n,
            anchors.cols(),
            augmented.rows(),
            augmented.cols()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let d = anchors.cols();
    let item = |m: usize| {
        if m.is_multiple_of(2) {
            anchors.row(m / 2)
        } else {
            augmented.row(m / 2)
        }
    };
    let total = 2 * n;
    let mut grads = vec![0.0; total * d];
    let anchor_ids: Vec<(usize, usize)> = if symmetric {
        (0..n).flat_map(|k| [(2 * k, 2 * k + 1), (2 * k + 1, 2 * k)]).collect()
    } else {
        (0..n).map(|k| (2 * k, 2 * k + 1)).collect()
    };
    let scale = 1.0 / anchor_ids.len() as f64;
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(total - 1);
    let mut others = Vec::with_capacity(total - 1);
    for &(a, p) in &anchor_ids {
        logits.clear();
        others.clear();
        let za = item(a);
        for m in (0..total).filter(|&m| m != a) {
            let s = dot(za, item(m)) / temperature;
            if !s.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite similarity between batch items {a} and {m}"
                )));
            }
            logits.push(s);
            others.push(m);
        }
        let lse = log_sum_exp(&logits);
        let pos = others.iter().position(|&m| m == p).expect("positive is in the batch");
        loss += lse - logits[pos];
        for (j, &m) in others.iter().enumerate() {
            let w = ((logits[j] - lse).exp() - if m == p { 1.0 } else { 0.0 }) * scale / temperature;
            if w == 0.0 {
                continue;
            }
            let zm = item(m);
            for t in 0..d {
                grads[a * d + t] += w * zm[t];
                grads[m * d + t] += w * za[t];
            }
        }
    }
    let mut ga = Matrix::zeros(n, d);
    let mut gb = Matrix::zeros(n, d);
    for k in 0..n {
        ga.row_mut(k).copy_from_slice(&grads[2 * k * d..(2 * k + 1) * d]);
        gb.row_mut(k).copy_from_slice(&grads[(2 * k + 1) * d..(2 * k + 2) * d]);
    }
    Ok(ContrastiveOutput {
        loss: loss * scale,
        grad_anchors: ga,
        grad_augmented: gb,
    })
}

/// NT-Xent on a batch, through the episode tower.
pub fn ntxent_loss(
    batch: &ContrastiveBatch,
    params: &TowerParams,
    temperature: f64,
    symmetric: bool,
    exec: Exec,
) -> Result<ContrastiveOutput> {
    let a = params.embed_episodes(&batch.anchors, exec)?;
    let b = params.embed_episodes(&batch.augmented, exec)?;
    ntxent_from_embeddings(&a, &b, temperature, symmetric)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionOutput {
    pub loss: f64,
    pub grad_users: Matrix,
    pub grad_episodes: Matrix,
}

/// Sampled-negative logistic loss, mean over the `N` user rows.
/// `positives[k]` and `negatives[k]` index rows of `episodes`.
pub fn interaction_from_embeddings(
    users: &Matrix,
    episodes: &Matrix,
    positives: &[usize],
    negatives: &[Vec<usize>],
) -> Result<InteractionOutput> {
    let n = users.rows();
    if positives.len() != n || negatives.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "{n} users, {} positives, {} negative lists",
            positives.len(),
            negatives.len()
        )));
    }
    if users.cols() != episodes.cols() {
        return Err(Error::Shape("user and episode embeddings differ in width".into()));
    }
    let d = users.cols();
    let inv = 1.0 / n as f64;
    let mut gu = Matrix::zeros(n, d);
    let mut ge = Matrix::zeros(episodes.rows(), d);
    let mut loss = 0.0;
    for k in 0..n {
        let u = users.row(k);
        let terms = std::iter::once((positives[k], true)).chain(negatives[k].iter().map(|&j| (j, false)));
        for (e, positive) in terms {
            let s = dot(u, episodes.row(e));
            if !s.is_finite() {
                return Err(Error::Numeric(format!("non-finite score for batch row {k}")));
            }
            // −log σ(s) = softplus(−s); −log(1 − σ(s)) = softplus(s)
            let (l, g) = if positive {
                (softplus(-s), sigmoid(s) - 1.0)
            } else {
                (softplus(s), sigmoid(s))
            };
            loss += l;
            let g = g * inv;
            let er = episodes.row(e).to_vec();
            for (t, x) in gu.row_mut(k).iter_mut().enumerate() {
                *x += g * er[t];
            }
            for (t, x) in ge.row_mut(e).iter_mut().enumerate() {
                *x += g * u[t];
            }
        }
    }
    Ok(InteractionOutput {
        loss: loss * inv,
        grad_users: gu,
        grad_episodes: ge,
    })
}

/// `L_int + λ·L_CL`.
pub fn total_loss(lambda: f64, interaction: f64, contrastive: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Argument(format!("λ must be nonnegative, got {lambda}")));
    }
    Ok(if lambda == 0.0 {
        interaction
    } else {
        interaction + lambda * contrastive
    })
}

/// `k` distinct episodes drawn uniformly from the catalog minus the user's
/// train positives.
pub fn sample_negatives<R: Rng>(bundle: &DatasetBundle, user: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = bundle.episodes().len();
    let positives: HashSet<usize> = bundle.train_positives_of(user).iter().copied().collect();
    let pool = n - positives.len();
    if k > pool {
        return Err(Error::Argument(format!(
            "cannot draw {k} negatives from a pool of {pool}"
        )));
    }
    if 2 * k > pool {
        let eligible: Vec<usize> = (0..n).filter(|e| !positives.contains(e)).collect();
        return Ok(index::sample(rng, pool, k).into_iter().map(|i| eligible[i]).collect());
    }
    let mut chosen = Vec::with_capacity(k);
    let mut seen = HashSet::with_capacity(k);
    while chosen.len() < k {
        let e = rng.gen_range(0..n);
        if !positives.contains(&e) && seen.insert(e) {
            chosen.push(e);
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub symmetric: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.5,
            temperature: 1.0,
            symmetric: false,
        }
    }
}

/// One minibatch in tower-input space. `episodes` holds the anchors, then
/// the negatives, then (optionally) the augmented views; the index vectors
/// point into it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub users: Matrix,
    pub episodes: Matrix,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    /// Contrastive pairs as (anchor row, augmented row).
    pub pairs: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub interaction: f64,
    pub contrastive: f64,
    pub total: f64,
}

struct BatchForward {
    user_out: Matrix,
    user_cache: ForwardCache,
    ep_out: Matrix,
    ep_cache: ForwardCache,
    loss: LossBreakdown,
    grad_users: Matrix,
    grad_episodes: Matrix,
}

fn forward_batch(
    params: &TowerParams,
    batch: &TrainingBatch,
    obj: &ObjectiveConfig,
    exec: Exec,
) -> Result<BatchForward> {
    let (user_out, user_cache) = params.user.forward(&batch.users, params.linear_head, exec)?;
    let (ep_out, ep_cache) = params.episode.forward(&batch.episodes, params.linear_head, exec)?;
    let inter = interaction_from_embeddings(&user_out, &ep_out, &batch.positives, &batch.negatives)?;
    let mut grad_episodes = inter.grad_episodes;
    let mut contrastive = 0.0;
    if obj.lambda > 0.0 {
        if let Some(pairs) = batch.pairs.as_ref().filter(|p| !p.is_empty()) {
            let (rows_a, rows_b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let a = ep_out.select_rows(&rows_a);
            let b = ep_out.select_rows(&rows_b);
            let cl = ntxent_from_embeddings(&a, &b, obj.temperature, obj.symmetric)?;
            contrastive = cl.loss;
            for (k, &(ia, ib)) in pairs.iter().enumerate() {
                for (g, &x) in grad_episodes.row_mut(ia).iter_mut().zip(cl.grad_anchors.row(k)) {
                    *g += obj.lambda * x;
                }
                for (g, &x) in grad_episodes.row_mut(ib).iter_mut().zip(cl.grad_augmented.row(k)) {
                    *g += obj.lambda * x;
                }
            }
        }
    }
    let total = total_loss(obj.lambda, inter.loss, contrastive)?;
    Ok(BatchForward {
        user_out,
        user_cache,
        ep_out,
        ep_cache,
        loss: LossBreakdown {
            interaction: inter.loss,
            contrastive,
            total,
        },
        grad_users: inter.grad_users,
        grad_episodes,
    })
}

/// Loss of a batch without gradients.
pub fn batch_loss(
    params: &TowerParams,
    batch: &TrainingBatch,
    obj: &ObjectiveConfig,
    exec: Exec,
) -> Result<LossBreakdown> {
    forward_batch(params, batch, obj, exec).map(|f| f.loss)
}

/// Loss of a batch and its exact gradient w.r.t. every tower parameter.
pub fn batch_loss_and_grad(
    params: &TowerParams,
    batch: &TrainingBatch,
    obj: &ObjectiveConfig,
    exec: Exec,
) -> Result<(LossBreakdown, TowerParams)> {
    let f = forward_batch(params, batch, obj, exec)?;
    debug_assert_eq!(f.user_out.rows(), batch.users.rows());
    debug_assert_eq!(f.ep_out.rows(), batch.episodes.rows());
    let grads = params.backward(&f.user_cache, &f.grad_users, &f.ep_cache, &f.grad_episodes, exec)?;
    Ok((f.loss, grads))
}

/// Interaction loss alone for `user_vecs[k]` against `positive_vecs[k]` and
/// its `negative_vecs[k]`, with parameter gradients.
pub fn interaction_loss(
    params: &TowerParams,
    user_vecs: &Matrix,
    positive_vecs: &Matrix,
    negative_vecs: &[Matrix],
    exec: Exec,
) -> Result<(f64, TowerParams)> {
    let n = user_vecs.rows();
    let mut rows: Vec<Vec<f64>> = (0..n).map(|k| positive_vecs.row(k).to_vec()).collect();
    let mut negatives = Vec::with_capacity(n);
    for m in negative_vecs {
        let start = rows.len();
        rows.extend((0..m.rows()).map(|j| m.row(j).to_vec()));
        negatives.push((start..rows.len()).collect());
    }
    let batch = TrainingBatch {
        users: user_vecs.clone(),
        episodes: Matrix::from_rows(&rows)?,
        positives: (0..n).collect(),
        negatives,
        pairs: None,
    };
    let obj = ObjectiveConfig {
        lambda: 0.0,
        ..ObjectiveConfig::default()
    };
    let (loss, grads) = batch_loss_and_grad(params, &batch, &obj, exec)?;
    Ok((loss.interaction, grads))
}

/// Contrastive weight used by the augmented variants unless overridden.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// The model family trained by this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Tt,
    TtFd,
    MsaclContent,
    MsaclKg,
    MsaclKgFd,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Tt,
        Variant::TtFd,
        Variant::MsaclContent,
        Variant::MsaclKg,
        Variant::MsaclKgFd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tt => "tt",
            Variant::TtFd => "tt-fd",
            Variant::MsaclContent => "msacl-content",
            Variant::MsaclKg => "msacl-kg",
            Variant::MsaclKgFd => "msacl-kg-fd",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Tt => "TT",
            Variant::TtFd => "TT-FD",
            Variant::MsaclContent => "MSACL(Content)",
            Variant::MsaclKg => "MSACL(KG)",
            Variant::MsaclKgFd => "MSACL(KG-FD)",
        }
    }

    pub fn source(self, dropout_p: f64, neighbor_k: usize) -> AugmentationSource {
        match self {
            Variant::Tt => AugmentationSource::FeatureDropout { p: 0.0 },
            Variant::TtFd => AugmentationSource::FeatureDropout { p: dropout_p },
            Variant::MsaclContent => AugmentationSource::ContentNeighbors { k: neighbor_k },
            Variant::MsaclKg => AugmentationSource::KgNeighbors { k: neighbor_k },
            Variant::MsaclKgFd => AugmentationSource::kg_fd(neighbor_k, dropout_p),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Argument(format!("unknown variant `{s}`; valid variants: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub label: String,
    pub hidden_dims: Vec<usize>,
    pub linear_head: bool,
    pub objective: ObjectiveConfig,
    pub k_negatives: usize,
    /// Use the other positives of the batch as negatives instead of sampling.
    pub in_batch_negatives: bool,
    /// Give each distinct interacted episode of a batch a single contrastive
    /// pair. Without this, a popular episode that appears several times in
    /// one batch sits in its own denominator.
    pub distinct_anchors: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub augmentation: AugmentationSource,
    pub dropout_p: f64,
    pub dropout_mode: DropoutMode,
    pub neighbor_k: usize,
    pub neighbor_mode: IndexMode,
    pub forest: ForestParams,
    pub schema: SchemaOptions,
    /// Show-exclusion masking during validation.
    pub masking: bool,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            label: "TT".into(),
            hidden_dims: vec![64, 32],
            linear_head: false,
            objective: ObjectiveConfig {
                lambda: 0.0,
                ..ObjectiveConfig::default()
            },
            k_negatives: 1,
            in_batch_negatives: false,
            distinct_anchors: true,
            batch_size: 64,
            epochs: 40,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            augmentation: AugmentationSource::FeatureDropout { p: 0.0 },
            dropout_p: 0.3,
            dropout_mode: DropoutMode::Field,
            neighbor_k: 10,
            neighbor_mode: IndexMode::Exact,
            forest: ForestParams::default(),
            schema: SchemaOptions::default(),
            masking: true,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    /// Configuration for a named variant. `lambda` is ignored for `tt`,
    /// which trains without the contrastive term and without dropout.
    pub fn for_variant(variant: Variant, lambda: f64, dropout_p: f64, neighbor_k: usize, seed: u64) -> Self {
        let mut c = TrainConfig {
            seed,
            dropout_p,
            neighbor_k,
            ..TrainConfig::default()
        };
        c.apply_variant(variant, lambda);
        c
    }

    pub fn apply_variant(&mut self, variant: Variant, lambda: f64) {
        self.label = variant.label().to_string();
        if variant == Variant::Tt {
            self.objective.lambda = 0.0;
            self.dropout_p = 0.0;
        } else {
            self.objective.lambda = lambda;
        }
        self.augmentation = variant.source(self.dropout_p, self.neighbor_k);
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.objective;
        if !(o.lambda.is_finite() && o.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", o.lambda)));
        }
        if !(o.temperature.is_finite() && o.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                o.temperature
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("invalid hidden_dims {:?}", self.hidden_dims)));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1]", self.dropout_p)));
        }
        if !(self.adam.learning_rate.is_finite() && self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.augmentation.validate()
    }

    /// Short hash of every setting that influences results.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn contrastive_active(&self) -> bool {
        self.objective.lambda > 0.0
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub interaction_loss: f64,
    pub contrastive_loss: f64,
    pub val: Option<Metrics>,
    pub fallbacks: usize,
    pub wall_time_s: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NDCG@20 (the last
    /// epoch when there is no validation split).
    pub params: TowerParams,
    pub optimizer: OptimizerState,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub user_schema: FeatureSchema,
    pub episode_schema: FeatureSchema,
    pub config_hash: String,
}

/// Inputs shared by every epoch: encoded features and neighbor caches.
pub struct TrainingData {
    pub user_schema: FeatureSchema,
    pub episode_schema: FeatureSchema,
    pub user_features: Matrix,
    pub episode_features: Matrix,
    pub content: Option<NeighborCache>,
    pub kg: Option<NeighborCache>,
}

impl TrainingData {
    pub fn prepare(bundle: &DatasetBundle, config: &TrainConfig) -> Result<Self> {
        let (user_schema, episode_schema) = build_schemas(bundle, config.schema)?;
        let user_features = encode_users(&user_schema, bundle, config.exec)?;
        let episode_features = encode_episodes(&episode_schema, bundle, config.exec)?;
        let cache = |space: Space| -> Result<Option<NeighborCache>> {
            if !config.contrastive_active() {
                return Ok(None);
            }
            match config.augmentation.neighbor_k(space) {
                None => Ok(None),
                Some(k) => {
                    let index = build_index(bundle, space, config.neighbor_mode, config.forest, config.seed)?;
                    NeighborCache::build(&index, k, config.exec).map(Some)
                }
            }
        };
        Ok(TrainingData {
            content: cache(Space::Content)?,
            kg: cache(Space::Kg)?,
            user_schema,
            episode_schema,
            user_features,
            episode_features,
        })
    }
}

struct RowDraw {
    negatives: Vec<usize>,
    augmented: Option<(Vec<f64>, Provenance)>,
}

fn assemble_batch(
    bundle: &DatasetBundle,
    data: &TrainingData,
    config: &TrainConfig,
    epoch: usize,
    chunk: &[(usize, (usize, usize))],
) -> Result<(TrainingBatch, usize)> {
    let aug = Augmenter {
        episode_features: &data.episode_features,
        schema: &data.episode_schema,
        content: data.content.as_ref(),
        kg: data.kg.as_ref(),
        fallback_p: config.dropout_p,
        dropout_mode: config.dropout_mode,
    };
    let mut seen = HashSet::new();
    let first: Vec<bool> = chunk
        .iter()
        .map(|&(_, (_, e))| !config.distinct_anchors || seen.insert(e))
        .collect();
    let rows_in: Vec<(usize, bool, (usize, usize))> =
        chunk.iter().zip(&first).map(|(&(pos, p), &f)| (pos, f, p)).collect();
    let draws: Vec<Result<RowDraw>> = config.exec.map_slice(&rows_in, |&(pos, first, (u, e))| {
        let negatives = if config.in_batch_negatives {
            Vec::new()
        } else {
            let mut r = rng::derived(config.seed, Stream::Negatives, epoch as u64, pos as u64);
            sample_negatives(bundle, u, config.k_negatives, &mut r)?
        };
        let augmented = if config.contrastive_active() && first {
            let mut r = rng::derived(config.seed, Stream::Augment, epoch as u64, pos as u64);
            Some(make_pair(&aug, &config.augmentation, e, &mut r)?)
        } else {
            None
        };
        Ok(RowDraw { negatives, augmented })
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;

    let n = chunk.len();
    let users: Vec<usize> = chunk.iter().map(|&(_, (u, _))| u).collect();
    let mut rows: Vec<Vec<f64>> = chunk
        .iter()
        .map(|&(_, (_, e))| data.episode_features.row(e).to_vec())
        .collect();
    let positives: Vec<usize> = (0..n).collect();
    let mut negatives = Vec::with_capacity(n);
    if config.in_batch_negatives {
        for (k, &(_, (u, _))) in chunk.iter().enumerate() {
            let own: HashSet<usize> = bundle.train_positives_of(u).iter().copied().collect();
            negatives.push(
                chunk
                    .iter()
                    .enumerate()
                    .filter(|&(j, &(_, (_, e)))| j != k && !own.contains(&e))
                    .map(|(j, _)| j)
                    .collect(),
            );
        }
    } else {
        for d in &draws {
            let start = rows.len();
            rows.extend(d.negatives.iter().map(|&e| data.episode_features.row(e).to_vec()));
            negatives.push((start..rows.len()).collect());
        }
    }
    let mut fallbacks = 0;
    let pairs = if config.contrastive_active() {
        let mut pairs = Vec::new();
        for (k, d) in draws.into_iter().enumerate() {
            if let Some((v, prov)) = d.augmented {
                fallbacks += prov.fallback as usize;
                pairs.push((k, rows.len()));
                rows.push(v);
            }
        }
        Some(pairs)
    } else {
        None
    };
    Ok((
        TrainingBatch {
            users: data.user_features.select_rows(&users),
            episodes: Matrix::from_rows(&rows)?,
            positives,
            negatives,
            pairs,
        },
        fallbacks,
    ))
}

/// Validation metrics for the current parameters.
pub fn validate_params(
    bundle: &DatasetBundle,
    data: &TrainingData,
    params: &TowerParams,
    config: &TrainConfig,
) -> Result<Option<Metrics>> {
    if bundle
        .users_in(Split::Valid)
        .iter()
        .all(|&u| bundle.positives_of(u).is_empty())
    {
        return Ok(None);
    }
    let ranker = ModelRanker::new(
        &config.label,
        params,
        &data.user_features,
        &data.episode_features,
        config.exec,
    )?;
    let opts = EvalOptions {
        masking: config.masking,
        exec: config.exec,
    };
    Ok(Some(evaluate_model(&ranker, bundle, Split::Valid, opts)?.metrics))
}

/// Trains a tower pair on the train split and keeps the parameters with the
/// best validation NDCG@20.
pub fn train(bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    let data = TrainingData::prepare(bundle, config)?;
    train_prepared(bundle, &data, config)
}

pub fn train_prepared(bundle: &DatasetBundle, data: &TrainingData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let config_hash = config.hash();
    let mut params = init_params(
        data.user_schema.width,
        data.episode_schema.width,
        &config.hidden_dims,
        config.seed,
        config.linear_head,
    )?;
    let mut opt = OptimizerState::new(&params, config.adam);
    let pairs = bundle.pairs_in(Split::Train);
    if pairs.is_empty() {
        return Err(Error::Config("the train split has no interactions".into()));
    }
    let mut best: Option<(f64, TowerParams, OptimizerState, usize)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<(usize, (usize, usize))> = pairs.iter().copied().enumerate().collect();
        order.shuffle(&mut rng::derived(config.seed, Stream::Shuffle, epoch as u64, 0));
        let (mut sum, mut sum_int, mut sum_cl) = (0.0, 0.0, 0.0);
        let mut fallbacks = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            // positions are epoch-relative so every draw has its own stream
            let chunk: Vec<(usize, (usize, usize))> = chunk
                .iter()
                .enumerate()
                .map(|(i, &(_, p))| (b * config.batch_size + i, p))
                .collect();
            let mut run = || -> Result<LossBreakdown> {
                let (batch, fb) = assemble_batch(bundle, data, config, epoch, &chunk)?;
                fallbacks += fb;
                let (loss, grads) = batch_loss_and_grad(&params, &batch, &config.objective, config.exec)?;
                if !loss.total.is_finite() {
                    return Err(Error::Numeric(format!("loss is {}", loss.total)));
                }
                optimizer_step(&mut params, &grads, &mut opt)?;
                Ok(loss)
            };
            let loss = run().map_err(|e| Error::Training {
                step,
                source: Box::new(e),
            })?;
            let w = chunk.len() as f64;
            sum += loss.total * w;
            sum_int += loss.interaction * w;
            sum_cl += loss.contrastive * w;
            step += 1;
        }
        let n = pairs.len() as f64;
        let val = validate_params(bundle, data, &params, config)?;
        let score = val.map_or(f64::NEG_INFINITY, |m| m.ndcg_20);
        let improved = match &best {
            None => true,
            Some((s, ..)) => score > *s || (val.is_none() && epoch + 1 == config.epochs),
        };
        if improved {
            best = Some((score, params.clone(), opt.clone(), epoch));
        }
        log.push(EpochRecord {
            epoch,
            train_loss: sum / n,
            interaction_loss: sum_int / n,
            contrastive_loss: sum_cl / n,
            val,
            fallbacks,
            wall_time_s: started.elapsed().as_secs_f64(),
            config_hash: config_hash.clone(),
        });
    }
    let (_, params, optimizer, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        optimizer,
        best_epoch,
        log,
        user_schema: data.user_schema.clone(),
        episode_schema: data.episode_schema.clone(),
        config_hash,
    })
}
