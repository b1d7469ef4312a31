//! Catalog records, interaction sets, the on-disk dataset directory, the
//! user-level split and the discovery candidate filter.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const FORMAT_VERSION: u32 = 1;

pub const HEADER_FILE: &str = "header.json";
pub const USERS_FILE: &str = "users.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub show_id: String,
    pub topics: BTreeSet<u32>,
    pub country: u32,
    pub cf_embedding: Vec<f64>,
    pub content_embedding: Vec<f64>,
    pub kg_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub gender: u32,
    pub age_bucket: u32,
    pub country: u32,
    pub language: u32,
    /// Topics liked over the previous 90 days.
    pub liked_topics: BTreeSet<u32>,
    pub cf_embedding: Vec<f64>,
    pub podcast_embedding: Vec<f64>,
    /// Seconds.
    pub avg_stream_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub episode_id: String,
}

/// Positive (discovery) interactions plus the user partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionSet {
    pub positives: Vec<Interaction>,
    pub split: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vocabularies {
    pub gender: Vec<String>,
    pub age_bucket: Vec<String>,
    pub country: Vec<String>,
    pub language: Vec<String>,
    pub topic: Vec<String>,
}

impl Vocabularies {
    pub fn sizes(&self) -> BTreeMap<String, usize> {
        BTreeMap::from([
            ("age_bucket".to_string(), self.age_bucket.len()),
            ("country".to_string(), self.country.len()),
            ("gender".to_string(), self.gender.len()),
            ("language".to_string(), self.language.len()),
            ("topic".to_string(), self.topic.len()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub user_cf: usize,
    pub user_podcast: usize,
    pub episode_cf: usize,
    pub content: usize,
    pub kg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserField {
    Gender,
    AgeBucket,
    Country,
    Language,
    LikedTopics,
    CfEmbedding,
    PodcastEmbedding,
    AvgStreamTime,
}

impl UserField {
    pub const ALL: [UserField; 8] = [
        UserField::Gender,
        UserField::AgeBucket,
        UserField::Country,
        UserField::Language,
        UserField::LikedTopics,
        UserField::CfEmbedding,
        UserField::PodcastEmbedding,
        UserField::AvgStreamTime,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeField {
    Topics,
    Country,
    CfEmbedding,
    ContentEmbedding,
    KgEmbedding,
}

impl EpisodeField {
    pub const ALL: [EpisodeField; 5] = [
        EpisodeField::Topics,
        EpisodeField::Country,
        EpisodeField::CfEmbedding,
        EpisodeField::ContentEmbedding,
        EpisodeField::KgEmbedding,
    ];
}

fn all_user_fields() -> Vec<UserField> {
    UserField::ALL.to_vec()
}

fn all_episode_fields() -> Vec<EpisodeField> {
    EpisodeField::ALL.to_vec()
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub dims: EmbeddingDims,
    pub vocab_sizes: BTreeMap<String, usize>,
    pub vocab: Vocabularies,
    /// Fields fed to the user tower, in declaration order.
    #[serde(default = "all_user_fields")]
    pub user_fields: Vec<UserField>,
    #[serde(default = "all_episode_fields")]
    pub episode_fields: Vec<EpisodeField>,
    /// `avg_stream_time` is divided by this before entering the tower.
    #[serde(default = "unit_scale")]
    pub stream_time_scale: f64,
    /// Generator configuration echo, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl DatasetHeader {
    pub fn new(dims: EmbeddingDims, vocab: Vocabularies) -> Self {
        DatasetHeader {
            format_version: FORMAT_VERSION,
            dims,
            vocab_sizes: vocab.sizes(),
            vocab,
            user_fields: all_user_fields(),
            episode_fields: all_episode_fields(),
            stream_time_scale: 1.0,
            generator: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderFile {
    #[serde(flatten)]
    header: DatasetHeader,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    split: BTreeMap<String, Split>,
}

/// Lookup tables derived from a validated bundle.
#[derive(Debug, Clone, PartialEq, Default)]
struct BundleIndex {
    user_pos: HashMap<String, usize>,
    episode_pos: HashMap<String, usize>,
    shows: Vec<String>,
    episode_show: Vec<usize>,
    show_episodes: Vec<Vec<usize>>,
    user_split: Vec<Option<Split>>,
    positives: Vec<(usize, usize)>,
    user_positives: Vec<Vec<usize>>,
    train_counts: Vec<u32>,
    episode_id_rank: Vec<usize>,
}

/// A validated dataset. Immutable once built; replacing the interaction set
/// goes through [`DatasetBundle::with_interactions`], which revalidates.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    header: DatasetHeader,
    users: Vec<UserRecord>,
    episodes: Vec<EpisodeRecord>,
    interactions: InteractionSet,
    index: BundleIndex,
}

impl DatasetBundle {
    pub fn new(
        header: DatasetHeader,
        users: Vec<UserRecord>,
        episodes: Vec<EpisodeRecord>,
        interactions: InteractionSet,
    ) -> Result<Self> {
        let index = validate(&header, &users, &episodes, &interactions)?;
        Ok(DatasetBundle {
            header,
            users,
            episodes,
            interactions,
            index,
        })
    }

    pub fn with_interactions(&self, interactions: InteractionSet) -> Result<Self> {
        DatasetBundle::new(
            self.header.clone(),
            self.users.clone(),
            self.episodes.clone(),
            interactions,
        )
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn vocab(&self) -> &Vocabularies {
        &self.header.vocab
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn interactions(&self) -> &InteractionSet {
        &self.interactions
    }

    pub fn user_index(&self, user_id: &str) -> Result<usize> {
        self.index
            .user_pos
            .get(user_id)
            .copied()
            .ok_or_else(|| Error::lookup("user", user_id))
    }

    pub fn episode_index(&self, episode_id: &str) -> Result<usize> {
        self.index
            .episode_pos
            .get(episode_id)
            .copied()
            .ok_or_else(|| Error::lookup("episode", episode_id))
    }

    pub fn shows(&self) -> &[String] {
        &self.index.shows
    }

    /// Show index of an episode.
    pub fn show_of(&self, episode: usize) -> usize {
        self.index.episode_show[episode]
    }

    pub fn show_episodes(&self, show: usize) -> &[usize] {
        &self.index.show_episodes[show]
    }

    pub fn split_of(&self, user: usize) -> Option<Split> {
        self.index.user_split[user]
    }

    pub fn users_in(&self, split: Split) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&u| self.index.user_split[u] == Some(split))
            .collect()
    }

    /// All positives of `user`, in file order.
    pub fn positives_of(&self, user: usize) -> &[usize] {
        &self.index.user_positives[user]
    }

    /// Positives of `user` that count as training history.
    pub fn train_positives_of(&self, user: usize) -> &[usize] {
        if self.index.user_split[user] == Some(Split::Train) {
            &self.index.user_positives[user]
        } else {
            &[]
        }
    }

    /// `(user, episode)` index pairs, in file order.
    pub fn positive_pairs(&self) -> &[(usize, usize)] {
        &self.index.positives
    }

    pub fn pairs_in(&self, split: Split) -> Vec<(usize, usize)> {
        self.index
            .positives
            .iter()
            .copied()
            .filter(|&(u, _)| self.index.user_split[u] == Some(split))
            .collect()
    }

    /// Per-episode count of train-split interactions.
    pub fn train_counts(&self) -> &[u32] {
        &self.index.train_counts
    }

    /// Position of the episode id in ascending id order; used for tie-breaks.
    pub fn episode_id_rank(&self, episode: usize) -> usize {
        self.index.episode_id_rank[episode]
    }

    /// Indices of episodes from shows the user has no train interaction with,
    /// in catalog order.
    pub fn discovery_candidate_indices(&self, user: usize) -> Vec<usize> {
        let familiar: HashSet<usize> = self
            .train_positives_of(user)
            .iter()
            .map(|&e| self.index.episode_show[e])
            .collect();
        (0..self.episodes.len())
            .filter(|&e| !familiar.contains(&self.index.episode_show[e]))
            .collect()
    }
}

fn check_dim(what: &str, id: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Schema(format!(
            "{what} of `{id}` has dimension {got}, header declares {want}"
        )));
    }
    Ok(())
}

fn check_vocab(what: &str, id: &str, value: u32, vocab: &[String]) -> Result<()> {
    if value as usize >= vocab.len() {
        return Err(Error::Integrity(format!(
            "`{id}`: {what} id {value} outside vocabulary of size {}",
            vocab.len()
        )));
    }
    Ok(())
}

fn validate(
    header: &DatasetHeader,
    users: &[UserRecord],
    episodes: &[EpisodeRecord],
    interactions: &InteractionSet,
) -> Result<BundleIndex> {
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.vocab_sizes != header.vocab.sizes() {
        return Err(Error::Schema("vocab_sizes disagree with the vocabulary tables".into()));
    }
    if !(header.stream_time_scale.is_finite() && header.stream_time_scale > 0.0) {
        return Err(Error::Schema("stream_time_scale must be positive".into()));
    }
    let dims = header.dims;
    let vocab = &header.vocab;
    let uf: HashSet<UserField> = header.user_fields.iter().copied().collect();
    let ef: HashSet<EpisodeField> = header.episode_fields.iter().copied().collect();

    let mut user_pos = HashMap::with_capacity(users.len());
    for (i, u) in users.iter().enumerate() {
        if user_pos.insert(u.user_id.clone(), i).is_some() {
            return Err(Error::Integrity(format!("duplicate user id `{}`", u.user_id)));
        }
        let id = &u.user_id;
        if uf.contains(&UserField::Gender) {
            check_vocab("gender", id, u.gender, &vocab.gender)?;
        }
        if uf.contains(&UserField::AgeBucket) {
            check_vocab("age_bucket", id, u.age_bucket, &vocab.age_bucket)?;
        }
        if uf.contains(&UserField::Country) {
            check_vocab("country", id, u.country, &vocab.country)?;
        }
        if uf.contains(&UserField::Language) {
            check_vocab("language", id, u.language, &vocab.language)?;
        }
        if uf.contains(&UserField::LikedTopics) {
            for &t in &u.liked_topics {
                check_vocab("topic", id, t, &vocab.topic)?;
            }
        }
        check_dim("cf_embedding", id, u.cf_embedding.len(), dims.user_cf)?;
        check_dim("podcast_embedding", id, u.podcast_embedding.len(), dims.user_podcast)?;
        if !(u.avg_stream_time.is_finite() && u.avg_stream_time >= 0.0) {
            return Err(Error::Integrity(format!(
                "`{id}`: avg_stream_time must be a nonnegative number"
            )));
        }
    }

    let mut episode_pos = HashMap::with_capacity(episodes.len());
    for (i, e) in episodes.iter().enumerate() {
        if episode_pos.insert(e.episode_id.clone(), i).is_some() {
            return Err(Error::Integrity(format!("duplicate episode id `{}`", e.episode_id)));
        }
        let id = &e.episode_id;
        if ef.contains(&EpisodeField::Country) {
            check_vocab("country", id, e.country, &vocab.country)?;
        }
        if ef.contains(&EpisodeField::Topics) {
            for &t in &e.topics {
                check_vocab("topic", id, t, &vocab.topic)?;
            }
        }
        check_dim("cf_embedding", id, e.cf_embedding.len(), dims.episode_cf)?;
        check_dim("content_embedding", id, e.content_embedding.len(), dims.content)?;
        check_dim("kg_embedding", id, e.kg_embedding.len(), dims.kg)?;
    }

    let shows: Vec<String> = episodes
        .iter()
        .map(|e| e.show_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let show_pos: HashMap<&str, usize> = shows.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let episode_show: Vec<usize> = episodes.iter().map(|e| show_pos[e.show_id.as_str()]).collect();
    let mut show_episodes = vec![Vec::new(); shows.len()];
    for (e, &s) in episode_show.iter().enumerate() {
        show_episodes[s].push(e);
    }

    let mut user_split = vec![None; users.len()];
    for (uid, &s) in &interactions.split {
        let u = *user_pos
            .get(uid)
            .ok_or_else(|| Error::Integrity(format!("split references unknown user `{uid}`")))?;
        user_split[u] = Some(s);
    }
    if !interactions.split.is_empty() {
        if let Some(u) = user_split.iter().position(Option::is_none) {
            return Err(Error::Integrity(format!(
                "user `{}` is not assigned to any split",
                users[u].user_id
            )));
        }
    }

    let mut seen = HashSet::with_capacity(interactions.positives.len());
    let mut positives = Vec::with_capacity(interactions.positives.len());
    let mut user_positives = vec![Vec::new(); users.len()];
    let mut train_counts = vec![0u32; episodes.len()];
    for it in &interactions.positives {
        let u = *user_pos
            .get(&it.user_id)
            .ok_or_else(|| Error::Integrity(format!("interaction references unknown user `{}`", it.user_id)))?;
        let e = *episode_pos
            .get(&it.episode_id)
            .ok_or_else(|| Error::Integrity(format!("interaction references unknown episode `{}`", it.episode_id)))?;
        if !seen.insert((u, e)) {
            return Err(Error::Integrity(format!(
                "duplicate interaction ({}, {})",
                it.user_id, it.episode_id
            )));
        }
        positives.push((u, e));
        user_positives[u].push(e);
        if user_split[u] == Some(Split::Train) {
            train_counts[e] += 1;
        }
    }

    let mut by_id: Vec<usize> = (0..episodes.len()).collect();
    by_id.sort_by(|&a, &b| episodes[a].episode_id.cmp(&episodes[b].episode_id));
    let mut episode_id_rank = vec![0; episodes.len()];
    for (rank, &e) in by_id.iter().enumerate() {
        episode_id_rank[e] = rank;
    }

    Ok(BundleIndex {
        user_pos,
        episode_pos,
        shows,
        episode_show,
        show_episodes,
        user_split,
        positives,
        user_positives,
        train_counts,
        episode_id_rank,
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and fully validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path)?;
    let hf: HeaderFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: header_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let users = read_jsonl(&dir.join(USERS_FILE))?;
    let episodes = read_jsonl(&dir.join(EPISODES_FILE))?;
    let positives = read_jsonl(&dir.join(INTERACTIONS_FILE))?;
    DatasetBundle::new(
        hf.header,
        users,
        episodes,
        InteractionSet {
            positives,
            split: hf.split,
        },
    )
}

pub fn save_dataset(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let hf = HeaderFile {
        header: bundle.header.clone(),
        split: bundle.interactions.split.clone(),
    };
    let mut text = serde_json::to_string_pretty(&hf)?;
    text.push('\n');
    fs::write(dir.join(HEADER_FILE), text)?;
    write_jsonl(&dir.join(USERS_FILE), &bundle.users)?;
    write_jsonl(&dir.join(EPISODES_FILE), &bundle.episodes)?;
    write_jsonl(&dir.join(INTERACTIONS_FILE), &bundle.interactions.positives)?;
    Ok(())
}

/// Partitions users into train/valid/test. The returned set is also
/// installed on `bundle`.
pub fn split_users(bundle: &mut DatasetBundle, ratios: [f64; 3], seed: u64) -> Result<InteractionSet> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Argument(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios must sum to 1, got {sum}")));
    }
    let n = bundle.users.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, Stream::Split));
    let mut split = BTreeMap::new();
    for (rank, &u) in order.iter().enumerate() {
        let s = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        split.insert(bundle.users[u].user_id.clone(), s);
    }
    let set = InteractionSet {
        positives: bundle.interactions.positives.clone(),
        split,
    };
    *bundle = bundle.with_interactions(set.clone())?;
    Ok(set)
}

/// Episodes the user could discover: everything outside the shows they
/// already interacted with in the train split.
pub fn discovery_candidates(bundle: &DatasetBundle, user_id: &str) -> Result<BTreeSet<String>> {
    let u = bundle.user_index(user_id)?;
    Ok(bundle
        .discovery_candidate_indices(u)
        .into_iter()
        .map(|e| bundle.episodes[e].episode_id.clone())
        .collect())
}

/// Tiny hand-built bundles shared by unit and integration tests.
pub mod fixtures {
    use super::*;

    pub fn vocab(topics: usize) -> Vocabularies {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        Vocabularies {
            gender: names("g", 3),
            age_bucket: names("a", 4),
            country: names("c", 3),
            language: names("l", 2),
            topic: names("t", topics),
        }
    }

    pub fn user(id: &str, country: u32, age: u32) -> UserRecord {
        UserRecord {
            user_id: id.into(),
            gender: 0,
            age_bucket: age,
            country,
            language: 0,
            liked_topics: BTreeSet::from([0]),
            cf_embedding: vec![0.1, -0.2],
            podcast_embedding: vec![0.3],
            avg_stream_time: 600.0,
        }
    }

    pub fn episode(id: &str, show: &str, x: f64) -> EpisodeRecord {
        EpisodeRecord {
            episode_id: id.into(),
            show_id: show.into(),
            topics: BTreeSet::from([1]),
            country: 0,
            cf_embedding: vec![x, 1.0 - x],
            content_embedding: vec![x],
            kg_embedding: vec![-x],
        }
    }

    pub fn header(topics: usize) -> DatasetHeader {
        let mut h = DatasetHeader::new(
            EmbeddingDims {
                user_cf: 2,
                user_podcast: 1,
                episode_cf: 2,
                content: 1,
                kg: 1,
            },
            vocab(topics),
        );
        h.stream_time_scale = 3600.0;
        h
    }

    pub fn pair(u: &str, e: &str) -> Interaction {
        Interaction {
            user_id: u.into(),
            episode_id: e.into(),
        }
    }
}
