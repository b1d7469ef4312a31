//! Fixed-width input vectors for the two towers and field-level feature
//! dropout.
//!
//! Layout of a schema: one-hot fields in declaration order, then multi-hot
//! fields, then dense blocks, then scalars. Offsets are contiguous.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{DatasetBundle, DatasetHeader, EpisodeField, EpisodeRecord, UserField, UserRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    OneHot,
    MultiHot,
    Dense,
    Scalar,
}

impl FieldKind {
    fn group(self) -> u8 {
        match self {
            FieldKind::OneHot => 0,
            FieldKind::MultiHot => 1,
            FieldKind::Dense => 2,
            FieldKind::Scalar => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub width: usize,
    pub offset: usize,
    /// Scalars are divided by this; 1 for every other kind.
    pub scale: f64,
}

impl FieldSpec {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    User,
    Episode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchemaOptions {
    /// Divide multi-hot segments by the set size instead of leaving them binary.
    #[serde(default)]
    pub normalize_multi_hot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub side: Side,
    pub fields: Vec<FieldSpec>,
    pub width: usize,
    #[serde(default)]
    pub options: SchemaOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub values: Vec<f64>,
    pub schema_id: String,
}

fn layout(side: Side, mut raw: Vec<(String, FieldKind, usize, f64)>, options: SchemaOptions) -> Result<FeatureSchema> {
    for (name, kind, width, _) in &raw {
        if *width == 0 {
            let what = match kind {
                FieldKind::OneHot | FieldKind::MultiHot => "empty vocabulary",
                _ => "zero dimension",
            };
            return Err(Error::Schema(format!("{what} for declared field `{name}`")));
        }
    }
    // stable: declaration order is kept within each kind group
    raw.sort_by_key(|(_, kind, _, _)| kind.group());
    let mut offset = 0;
    let fields = raw
        .into_iter()
        .map(|(name, kind, width, scale)| {
            let f = FieldSpec {
                name,
                kind,
                width,
                offset,
                scale,
            };
            offset += width;
            f
        })
        .collect();
    Ok(FeatureSchema {
        side,
        fields,
        width: offset,
        options,
    })
}

impl FeatureSchema {
    pub fn for_users(header: &DatasetHeader, options: SchemaOptions) -> Result<Self> {
        let v = &header.vocab;
        let d = header.dims;
        let mut raw = Vec::new();
        for (i, f) in header.user_fields.iter().enumerate() {
            if header.user_fields[..i].contains(f) {
                return Err(Error::Schema(format!("user field {f:?} declared twice")));
            }
            raw.push(match f {
                UserField::Gender => ("gender".into(), FieldKind::OneHot, v.gender.len(), 1.0),
                UserField::AgeBucket => ("age_bucket".into(), FieldKind::OneHot, v.age_bucket.len(), 1.0),
                UserField::Country => ("country".into(), FieldKind::OneHot, v.country.len(), 1.0),
                UserField::Language => ("language".into(), FieldKind::OneHot, v.language.len(), 1.0),
                UserField::LikedTopics => ("liked_topics".into(), FieldKind::MultiHot, v.topic.len(), 1.0),
                UserField::CfEmbedding => ("cf_embedding".into(), FieldKind::Dense, d.user_cf, 1.0),
                UserField::PodcastEmbedding => ("podcast_embedding".into(), FieldKind::Dense, d.user_podcast, 1.0),
                UserField::AvgStreamTime => ("avg_stream_time".into(), FieldKind::Scalar, 1, header.stream_time_scale),
            });
        }
        layout(Side::User, raw, options)
    }

    pub fn for_episodes(header: &DatasetHeader, options: SchemaOptions) -> Result<Self> {
        let v = &header.vocab;
        let d = header.dims;
        let mut raw = Vec::new();
        for (i, f) in header.episode_fields.iter().enumerate() {
            if header.episode_fields[..i].contains(f) {
                return Err(Error::Schema(format!("episode field {f:?} declared twice")));
            }
            raw.push(match f {
                EpisodeField::Topics => ("topics".into(), FieldKind::MultiHot, v.topic.len(), 1.0),
                EpisodeField::Country => ("country".into(), FieldKind::OneHot, v.country.len(), 1.0),
                EpisodeField::CfEmbedding => ("cf_embedding".into(), FieldKind::Dense, d.episode_cf, 1.0),
                EpisodeField::ContentEmbedding => ("content_embedding".into(), FieldKind::Dense, d.content, 1.0),
                EpisodeField::KgEmbedding => ("kg_embedding".into(), FieldKind::Dense, d.kg, 1.0),
            });
        }
        layout(Side::Episode, raw, options)
    }

    /// Short content hash identifying this exact layout.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    fn expect_side(&self, side: Side) -> Result<()> {
        if self.side != side {
            return Err(Error::Schema(format!(
                "{:?} schema used to encode a {side:?} record",
                self.side
            )));
        }
        Ok(())
    }
}

/// Builds the (user, episode) schemas for a bundle.
pub fn build_schemas(bundle: &DatasetBundle, options: SchemaOptions) -> Result<(FeatureSchema, FeatureSchema)> {
    Ok((
        FeatureSchema::for_users(bundle.header(), options)?,
        FeatureSchema::for_episodes(bundle.header(), options)?,
    ))
}

fn one_hot(out: &mut [f64], f: &FieldSpec, id: u32, owner: &str) -> Result<()> {
    if id as usize >= f.width {
        return Err(Error::Encoding(format!(
            "`{owner}`: {} id {id} outside vocabulary of size {}",
            f.name, f.width
        )));
    }
    out[f.offset + id as usize] = 1.0;
    Ok(())
}

fn multi_hot<'a>(
    out: &mut [f64],
    f: &FieldSpec,
    ids: impl ExactSizeIterator<Item = &'a u32>,
    normalize: bool,
    owner: &str,
) -> Result<()> {
    let n = ids.len();
    let value = if normalize && n > 0 { 1.0 / n as f64 } else { 1.0 };
    for &id in ids {
        if id as usize >= f.width {
            return Err(Error::Encoding(format!(
                "`{owner}`: {} id {id} outside vocabulary of size {}",
                f.name, f.width
            )));
        }
        out[f.offset + id as usize] = value;
    }
    Ok(())
}

fn dense(out: &mut [f64], f: &FieldSpec, values: &[f64], owner: &str) -> Result<()> {
    if values.len() != f.width {
        return Err(Error::Encoding(format!(
            "`{owner}`: {} has {} values, schema expects {}",
            f.name,
            values.len(),
            f.width
        )));
    }
    out[f.range()].copy_from_slice(values);
    Ok(())
}

fn unknown(f: &FieldSpec) -> Error {
    Error::Schema(format!("schema field `{}` does not exist on this record type", f.name))
}

pub fn encode_user_into(schema: &FeatureSchema, r: &UserRecord, out: &mut [f64]) -> Result<()> {
    schema.expect_side(Side::User)?;
    out.fill(0.0);
    let id = r.user_id.as_str();
    for f in &schema.fields {
        match f.name.as_str() {
            "gender" => one_hot(out, f, r.gender, id)?,
            "age_bucket" => one_hot(out, f, r.age_bucket, id)?,
            "country" => one_hot(out, f, r.country, id)?,
            "language" => one_hot(out, f, r.language, id)?,
            "liked_topics" => multi_hot(out, f, r.liked_topics.iter(), schema.options.normalize_multi_hot, id)?,
            "cf_embedding" => dense(out, f, &r.cf_embedding, id)?,
            "podcast_embedding" => dense(out, f, &r.podcast_embedding, id)?,
            "avg_stream_time" => out[f.offset] = r.avg_stream_time / f.scale,
            _ => return Err(unknown(f)),
        }
    }
    Ok(())
}

pub fn encode_episode_into(schema: &FeatureSchema, r: &EpisodeRecord, out: &mut [f64]) -> Result<()> {
    schema.expect_side(Side::Episode)?;
    out.fill(0.0);
    let id = r.episode_id.as_str();
    for f in &schema.fields {
        match f.name.as_str() {
            "topics" => multi_hot(out, f, r.topics.iter(), schema.options.normalize_multi_hot, id)?,
            "country" => one_hot(out, f, r.country, id)?,
            "cf_embedding" => dense(out, f, &r.cf_embedding, id)?,
            "content_embedding" => dense(out, f, &r.content_embedding, id)?,
            "kg_embedding" => dense(out, f, &r.kg_embedding, id)?,
            _ => return Err(unknown(f)),
        }
    }
    Ok(())
}

pub fn encode_user(schema: &FeatureSchema, record: &UserRecord) -> Result<EncodedVector> {
    let mut values = vec![0.0; schema.width];
    encode_user_into(schema, record, &mut values)?;
    Ok(EncodedVector {
        values,
        schema_id: schema.id(),
    })
}

pub fn encode_episode(schema: &FeatureSchema, record: &EpisodeRecord) -> Result<EncodedVector> {
    let mut values = vec![0.0; schema.width];
    encode_episode_into(schema, record, &mut values)?;
    Ok(EncodedVector {
        values,
        schema_id: schema.id(),
    })
}

fn encode_rows<T: Sync>(
    schema: &FeatureSchema,
    records: &[T],
    exec: Exec,
    f: impl Fn(&FeatureSchema, &T, &mut [f64]) -> Result<()> + Sync + Send,
) -> Result<Matrix> {
    let rows: Vec<Result<Vec<f64>>> = exec.map_slice(records, |r| {
        let mut v = vec![0.0; schema.width];
        f(schema, r, &mut v).map(|_| v)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, schema.width));
    }
    Matrix::from_rows(&rows)
}

/// Encodes every user of the bundle; row `u` is user index `u`.
pub fn encode_users(schema: &FeatureSchema, bundle: &DatasetBundle, exec: Exec) -> Result<Matrix> {
    encode_rows(schema, bundle.users(), exec, encode_user_into)
}

/// Encodes every episode of the bundle; row `e` is episode index `e`.
pub fn encode_episodes(schema: &FeatureSchema, bundle: &DatasetBundle, exec: Exec) -> Result<Matrix> {
    encode_rows(schema, bundle.episodes(), exec, encode_episode_into)
}

/// Checks the one-hot / multi-hot structure of an encoded row.
pub fn segments_well_formed(schema: &FeatureSchema, values: &[f64]) -> bool {
    values.len() == schema.width
        && schema.fields.iter().all(|f| {
            let seg = &values[f.range()];
            match f.kind {
                FieldKind::OneHot => {
                    seg.iter().filter(|&&x| x == 1.0).count() == 1 && seg.iter().all(|&x| x == 0.0 || x == 1.0)
                }
                FieldKind::MultiHot if !schema.options.normalize_multi_hot => seg.iter().all(|&x| x == 0.0 || x == 1.0),
                _ => true,
            }
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Zero whole fields.
    #[default]
    Field,
    /// Zero individual vector entries.
    Entry,
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Zeroes each field (or entry) of `values` independently with probability
/// `p`; survivors are left untouched. Returns how many units were zeroed.
pub fn dropout_in_place<R: Rng + ?Sized>(
    schema: &FeatureSchema,
    values: &mut [f64],
    p: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<usize> {
    check_probability(p)?;
    if values.len() != schema.width {
        return Err(Error::Shape(format!(
            "vector width {} does not match schema width {}",
            values.len(),
            schema.width
        )));
    }
    let mut zeroed = 0;
    match mode {
        DropoutMode::Field => {
            for f in &schema.fields {
                if rng.gen::<f64>() < p {
                    values[f.range()].fill(0.0);
                    zeroed += 1;
                }
            }
        }
        DropoutMode::Entry => {
            for v in values.iter_mut() {
                if rng.gen::<f64>() < p {
                    *v = 0.0;
                    zeroed += 1;
                }
            }
        }
    }
    Ok(zeroed)
}

/// Field-level feature dropout producing a corrupted view of `vec`.
pub fn feature_dropout<R: Rng + ?Sized>(
    schema: &FeatureSchema,
    vec: &EncodedVector,
    p: f64,
    rng: &mut R,
) -> Result<EncodedVector> {
    let mut out = vec.clone();
    dropout_in_place(schema, &mut out.values, p, DropoutMode::Field, rng)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::fixtures;
    use crate::datamodel::{EmbeddingDims, Vocabularies};
    use crate::rng::{self, Stream};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn header_with(
        user_fields: Vec<UserField>,
        episode_fields: Vec<EpisodeField>,
        topics: usize,
        countries: usize,
    ) -> DatasetHeader {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let vocab = Vocabularies {
            gender: names("g", 3),
            age_bucket: names("a", 4),
            country: names("c", countries),
            language: names("l", 2),
            topic: names("t", topics),
        };
        let mut h = DatasetHeader::new(
            EmbeddingDims {
                user_cf: 8,
                user_podcast: 4,
                episode_cf: 16,
                content: 32,
                kg: 32,
            },
            vocab,
        );
        h.user_fields = user_fields;
        h.episode_fields = episode_fields;
        h
    }

    #[test]
    fn user_width_is_sum_of_declared_fields() {
        let h = header_with(
            vec![UserField::Gender, UserField::Country, UserField::CfEmbedding],
            vec![],
            4,
            5,
        );
        let s = FeatureSchema::for_users(&h, SchemaOptions::default()).unwrap();
        assert_eq!(s.width, 16);
        assert_eq!(s.field("cf_embedding").unwrap().offset, 8);
    }

    #[test]
    fn episode_width_sum() {
        let h = header_with(vec![], EpisodeField::ALL.to_vec(), 50, 5);
        let s = FeatureSchema::for_episodes(&h, SchemaOptions::default()).unwrap();
        assert_eq!(s.width, 135);
        // one-hot before multi-hot before dense
        let names: Vec<_> = s.fields.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(
            names,
            ["country", "topics", "cf_embedding", "content_embedding", "kg_embedding"]
        );
    }

    #[test]
    fn schemas_are_deterministic() {
        let h = fixtures::header(4);
        let a = FeatureSchema::for_users(&h, SchemaOptions::default()).unwrap();
        let b = FeatureSchema::for_users(&h.clone(), SchemaOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
        assert!(a.to_json().contains("\"offset\""));
    }

    #[test]
    fn empty_vocab_is_schema_error() {
        let mut h = fixtures::header(4);
        h.vocab.language.clear();
        h.vocab_sizes = h.vocab.sizes();
        assert!(matches!(
            FeatureSchema::for_users(&h, SchemaOptions::default()),
            Err(Error::Schema(_))
        ));
    }

    fn small_user_schema() -> FeatureSchema {
        let h = fixtures::header(4);
        FeatureSchema::for_users(&h, SchemaOptions::default()).unwrap()
    }

    #[test]
    fn one_hot_multi_hot_dense_segments() {
        let s = small_user_schema();
        let mut u = fixtures::user("u", 2, 1);
        u.gender = 1;
        u.liked_topics = BTreeSet::from([0, 2]);
        u.cf_embedding = vec![0.5, -0.25];
        let v = encode_user(&s, &u).unwrap();
        assert_eq!(&v.values[s.field("gender").unwrap().range()], &[0.0, 1.0, 0.0]);
        assert_eq!(
            &v.values[s.field("liked_topics").unwrap().range()],
            &[1.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(&v.values[s.field("cf_embedding").unwrap().range()], &[0.5, -0.25]);
        assert_eq!(v.values[s.field("avg_stream_time").unwrap().offset], 600.0 / 3600.0);
        assert!(segments_well_formed(&s, &v.values));
    }

    #[test]
    fn normalized_multi_hot_option() {
        let h = fixtures::header(4);
        let s = FeatureSchema::for_users(
            &h,
            SchemaOptions {
                normalize_multi_hot: true,
            },
        )
        .unwrap();
        let mut u = fixtures::user("u", 0, 0);
        u.liked_topics = BTreeSet::from([1, 3]);
        let v = encode_user(&s, &u).unwrap();
        assert_eq!(
            &v.values[s.field("liked_topics").unwrap().range()],
            &[0.0, 0.5, 0.0, 0.5]
        );
    }

    #[test]
    fn out_of_vocab_is_encoding_error() {
        let s = small_user_schema();
        let u = fixtures::user("u", 7, 0);
        assert!(matches!(encode_user(&s, &u), Err(Error::Encoding(_))));
        let es = FeatureSchema::for_episodes(&fixtures::header(4), SchemaOptions::default()).unwrap();
        assert!(matches!(encode_user(&es, &u), Err(Error::Schema(_))));
    }

    fn sample_vector(s: &FeatureSchema) -> EncodedVector {
        let mut u = fixtures::user("u", 1, 2);
        u.liked_topics = BTreeSet::from([0, 1, 3]);
        encode_user(s, &u).unwrap()
    }

    #[test]
    fn dropout_extremes() {
        let s = small_user_schema();
        let v = sample_vector(&s);
        let mut rng = rng::seeded(1, Stream::Augment);
        assert_eq!(feature_dropout(&s, &v, 0.0, &mut rng).unwrap(), v);
        assert!(feature_dropout(&s, &v, 1.0, &mut rng)
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));
        assert!(matches!(
            feature_dropout(&s, &v, 1.5, &mut rng),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            feature_dropout(&s, &v, -0.1, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn dropout_is_deterministic_per_rng_state() {
        let s = small_user_schema();
        let v = sample_vector(&s);
        let a = feature_dropout(&s, &v, 0.5, &mut rng::seeded(9, Stream::Augment)).unwrap();
        let b = feature_dropout(&s, &v, 0.5, &mut rng::seeded(9, Stream::Augment)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_rate_matches_binomial_mean() {
        // six fields: gender, age, country, language, topics, one dense block
        let mut h = header_with(
            vec![
                UserField::Gender,
                UserField::AgeBucket,
                UserField::Country,
                UserField::Language,
                UserField::LikedTopics,
                UserField::CfEmbedding,
            ],
            vec![],
            4,
            3,
        );
        h.dims.user_cf = 2;
        let s = FeatureSchema::for_users(&h, SchemaOptions::default()).unwrap();
        assert_eq!(s.fields.len(), 6);
        let v = sample_vector(&FeatureSchema::for_users(&fixtures::header(4), SchemaOptions::default()).unwrap());
        let v = EncodedVector {
            values: v.values[..s.width].to_vec(),
            schema_id: s.id(),
        };
        let mut rng = rng::seeded(2024, Stream::Augment);
        let trials = 10_000;
        let mut zeroed = 0usize;
        for _ in 0..trials {
            let mut x = v.values.clone();
            zeroed += dropout_in_place(&s, &mut x, 0.5, DropoutMode::Field, &mut rng).unwrap();
        }
        let frac = zeroed as f64 / (trials * 6) as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    fn arb_user(topics: u32) -> impl Strategy<Value = UserRecord> {
        (
            0u32..3,
            0u32..4,
            0u32..3,
            0u32..2,
            proptest::collection::btree_set(0..topics, 0..topics as usize),
            proptest::collection::vec(-5.0f64..5.0, 2),
            -5.0f64..5.0,
            0.0f64..10_000.0,
        )
            .prop_map(|(g, a, c, l, t, cf, pe, st)| UserRecord {
                user_id: "u".into(),
                gender: g,
                age_bucket: a,
                country: c,
                language: l,
                liked_topics: t,
                cf_embedding: cf,
                podcast_embedding: vec![pe],
                avg_stream_time: st,
            })
    }

    proptest! {
        #[test]
        fn encoded_users_are_well_formed(u in arb_user(6)) {
            let s = FeatureSchema::for_users(&fixtures::header(6), SchemaOptions::default()).unwrap();
            let v = encode_user(&s, &u).unwrap();
            prop_assert!(segments_well_formed(&s, &v.values));
        }

        #[test]
        fn categorical_differences_change_the_vector(a in arb_user(6), b in arb_user(6)) {
            let s = FeatureSchema::for_users(&fixtures::header(6), SchemaOptions::default()).unwrap();
            let differs = (a.gender, a.age_bucket, a.country, a.language, &a.liked_topics)
                != (b.gender, b.age_bucket, b.country, b.language, &b.liked_topics);
            if differs {
                prop_assert_ne!(encode_user(&s, &a).unwrap().values, encode_user(&s, &b).unwrap().values);
            }
        }

        #[test]
        fn dropout_keeps_survivors(u in arb_user(6), p in 0.0f64..=1.0, seed in any::<u64>()) {
            let s = FeatureSchema::for_users(&fixtures::header(6), SchemaOptions::default()).unwrap();
            let v = encode_user(&s, &u).unwrap();
            let d = feature_dropout(&s, &v, p, &mut rng::seeded(seed, Stream::Augment)).unwrap();
            prop_assert_eq!(d.values.len(), v.values.len());
            for f in &s.fields {
                let seg = &d.values[f.range()];
                prop_assert!(seg.iter().all(|&x| x == 0.0) || seg == &v.values[f.range()]);
            }
        }
    }
}
