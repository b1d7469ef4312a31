//! The user/episode ReLU towers, dot-product scoring, reverse-mode gradients,
//! Adam and the binary checkpoint format.
//!
//! Layer ℓ computes `Fℓ = ReLU(Fℓ₋₁ Wℓ + bℓ)` for every layer including the
//! last. With `linear_head` the final ReLU is skipped. The ReLU derivative at
//! exactly zero is taken as zero.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::featurize::{FeatureSchema, SchemaOptions};
use crate::linalg::{dot, Matrix};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub layers: Vec<Layer>,
}

/// Activations kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the feature batch).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

impl Tower {
    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn zeros_like(&self) -> Tower {
        Tower {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: &Matrix, linear_head: bool, exec: Exec) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match tower input width {}",
                x.cols(),
                self.input_width()
            )));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut act = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = act.matmul(&layer.weights, exec)?;
            z.add_row_vector(&layer.bias);
            let mut next = z.clone();
            if !(linear_head && l + 1 == depth) {
                next.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(act);
            pre.push(z);
            act = next;
        }
        Ok((act, ForwardCache { inputs, pre }))
    }

    /// Forward pass without keeping a cache.
    pub fn embed(&self, x: &Matrix, linear_head: bool, exec: Exec) -> Result<Matrix> {
        self.forward(x, linear_head, exec).map(|(out, _)| out)
    }

    /// Gradients of the loss w.r.t. every weight and bias, given the loss
    /// gradient w.r.t. the tower outputs.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix, linear_head: bool, exec: Exec) -> Result<Tower> {
        let depth = self.layers.len();
        if cache.pre.len() != depth || cache.inputs.len() != depth {
            return Err(Error::State(format!(
                "forward cache holds {} layers, tower has {depth}",
                cache.pre.len()
            )));
        }
        if upstream.rows() != cache.batch_size() || upstream.cols() != self.output_width() {
            return Err(Error::State(format!(
                "upstream gradient is {}x{}, cache is for a {}x{} output",
                upstream.rows(),
                upstream.cols(),
                cache.batch_size(),
                self.output_width()
            )));
        }
        let mut grads = self.zeros_like();
        let mut delta = upstream.clone();
        for l in (0..depth).rev() {
            if !(linear_head && l + 1 == depth) {
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grads.layers[l].weights = cache.inputs[l].t_matmul(&delta, exec)?;
            grads.layers[l].bias = delta.col_sums();
            if l > 0 {
                delta = delta.matmul_t(&self.layers[l].weights, exec)?;
            }
        }
        Ok(grads)
    }
}

/// Single-vector forward pass. Returns the output and each layer's
/// pre-activations.
pub fn tower_forward(tower: &Tower, x: &[f64], linear_head: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let (out, cache) = tower.forward(&xm, linear_head, Exec::Sequential)?;
    Ok((out.into_vec(), cache.pre.into_iter().map(Matrix::into_vec).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub user: Tower,
    pub episode: Tower,
    /// Skip the ReLU on the final layer of both towers.
    pub linear_head: bool,
}

impl TowerParams {
    pub fn new(user: Tower, episode: Tower, linear_head: bool) -> Result<Self> {
        let p = TowerParams {
            user,
            episode,
            linear_head,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for (name, t) in [("user", &self.user), ("episode", &self.episode)] {
            if t.layers.is_empty() {
                return Err(Error::Shape(format!("{name} tower has no layers")));
            }
            for (l, layer) in t.layers.iter().enumerate() {
                if layer.bias.len() != layer.fan_out() {
                    return Err(Error::Shape(format!("{name} layer {l}: bias width mismatch")));
                }
                if l > 0 && t.layers[l - 1].fan_out() != layer.fan_in() {
                    return Err(Error::Shape(format!(
                        "{name} layer {l}: does not chain with layer {}",
                        l - 1
                    )));
                }
            }
        }
        if self.user.output_width() != self.episode.output_width() {
            return Err(Error::Shape(format!(
                "tower output widths differ: user {} vs episode {}",
                self.user.output_width(),
                self.episode.output_width()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> TowerParams {
        TowerParams {
            user: self.user.zeros_like(),
            episode: self.episode.zeros_like(),
            linear_head: self.linear_head,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.user.output_width()
    }

    pub fn embed_users(&self, x: &Matrix, exec: Exec) -> Result<Matrix> {
        self.user.embed(x, self.linear_head, exec)
    }

    pub fn embed_episodes(&self, x: &Matrix, exec: Exec) -> Result<Matrix> {
        self.episode.embed(x, self.linear_head, exec)
    }

    /// Parameter blocks with stable names, in checkpoint order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, t) in [("user", &self.user), ("episode", &self.episode)] {
            for (l, layer) in t.layers.iter().enumerate() {
                out.push((format!("{name}.layer{l}.weight"), layer.weights.as_slice()));
                out.push((format!("{name}.layer{l}.bias"), layer.bias.as_slice()));
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for t in [&mut self.user, &mut self.episode] {
            for layer in t.layers.iter_mut() {
                out.push(layer.weights.as_mut_slice());
                out.push(layer.bias.as_mut_slice());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn same_shape(&self, other: &TowerParams) -> bool {
        let a = self.blocks();
        let b = other.blocks();
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.len() == y.len())
    }

    /// Elementwise `self += scale · other`.
    pub fn add_scaled(&mut self, other: &TowerParams, scale: f64) {
        for (dst, (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Gradients for both towers from their caches and upstream gradients.
    pub fn backward(
        &self,
        user_cache: &ForwardCache,
        user_upstream: &Matrix,
        episode_cache: &ForwardCache,
        episode_upstream: &Matrix,
        exec: Exec,
    ) -> Result<TowerParams> {
        Ok(TowerParams {
            user: self.user.backward(user_cache, user_upstream, self.linear_head, exec)?,
            episode: self
                .episode
                .backward(episode_cache, episode_upstream, self.linear_head, exec)?,
            linear_head: self.linear_head,
        })
    }
}

fn init_tower(input: usize, hidden: &[usize], rng: &mut rng::Rng) -> Result<Tower> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut fan_in = input;
    for &fan_out in hidden {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Argument(e.to_string()))?;
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        layers.push(Layer {
            weights: Matrix::from_vec(fan_in, fan_out, data)?,
            bias: vec![0.0; fan_out],
        });
        fan_in = fan_out;
    }
    Ok(Tower { layers })
}

/// He-initialized towers (weights ~ N(0, 2/fan_in), zero biases). Both
/// towers share `hidden_dims`, so their output widths agree.
pub fn init_params(
    user_width: usize,
    episode_width: usize,
    hidden_dims: &[usize],
    seed: u64,
    linear_head: bool,
) -> Result<TowerParams> {
    if hidden_dims.is_empty() {
        return Err(Error::Argument("at least one layer is required".into()));
    }
    if user_width == 0 || episode_width == 0 || hidden_dims.contains(&0) {
        return Err(Error::Argument(format!(
            "zero-dimension layer: inputs ({user_width}, {episode_width}), hidden {hidden_dims:?}"
        )));
    }
    let mut rng = rng::seeded(seed, Stream::Init);
    let user = init_tower(user_width, hidden_dims, &mut rng)?;
    let episode = init_tower(episode_width, hidden_dims, &mut rng)?;
    TowerParams::new(user, episode, linear_head)
}

/// `F_u(f_u)ᵀ F_i(f_i)`.
pub fn score(params: &TowerParams, user_vec: &[f64], episode_vec: &[f64]) -> Result<f64> {
    let (u, _) = tower_forward(&params.user, user_vec, params.linear_head)?;
    let (e, _) = tower_forward(&params.episode, episode_vec, params.linear_head)?;
    Ok(dot(&u, &e))
}

/// Row-aligned scores for equally long user and episode batches.
pub fn score_pairs(params: &TowerParams, users: &Matrix, episodes: &Matrix, exec: Exec) -> Result<Vec<f64>> {
    if users.rows() != episodes.rows() {
        return Err(Error::Shape(format!(
            "{} users paired with {} episodes",
            users.rows(),
            episodes.rows()
        )));
    }
    let u = params.embed_users(users, exec)?;
    let e = params.embed_episodes(episodes, exec)?;
    Ok((0..u.rows()).map(|i| dot(u.row(i), e.row(i))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: TowerParams,
    pub second_moment: TowerParams,
}

impl OptimizerState {
    pub fn new(params: &TowerParams, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn optimizer_step(params: &mut TowerParams, grads: &TowerParams, state: &mut OptimizerState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) || !params.same_shape(&state.second_moment)
    {
        return Err(Error::Shape(
            "gradient or optimizer state does not mirror the parameters".into(),
        ));
    }
    for (name, block) in grads.blocks() {
        if let Some(i) = block.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}[{i}]")));
        }
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let grad_blocks = grads.blocks();
    let m_blocks = state.first_moment.blocks_mut();
    let v_blocks = state.second_moment.blocks_mut();
    for (((p, (_, g)), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grad_blocks)
        .zip(m_blocks)
        .zip(v_blocks)
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DISCOREC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fingerprint of the (user, episode) input layouts a model was trained on.
pub fn schema_hash(user: &FeatureSchema, episode: &FeatureSchema) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(user).expect("schema serializes"));
    h.update([0u8]);
    h.update(serde_json::to_vec(episode).expect("schema serializes"));
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    /// Encoding options needed to rebuild the input schemas.
    #[serde(default)]
    pub schema: SchemaOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema_hash: [u8; 32],
    pub meta: CheckpointMeta,
    pub params: TowerParams,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_dims(out: &mut Vec<u8>, t: &Tower) {
    put_u32(out, t.layers.len() as u32);
    put_u32(out, t.input_width() as u32);
    for l in &t.layers {
        put_u32(out, l.fan_out() as u32);
    }
}

fn put_payload(out: &mut Vec<u8>, p: &TowerParams) {
    for (_, b) in p.blocks() {
        put_f64s(out, b);
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&self.schema_hash);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        out.push(self.params.linear_head as u8);
        put_dims(&mut out, &self.params.user);
        put_dims(&mut out, &self.params.episode);
        put_payload(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                let c = s.config;
                put_f64s(&mut out, &[c.learning_rate, c.beta1, c.beta2, c.epsilon]);
                out.extend_from_slice(&s.step.to_le_bytes());
                put_payload(&mut out, &s.first_moment);
                put_payload(&mut out, &s.second_moment);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Incompatible("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let schema_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let linear_head = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Incompatible(format!("bad head flag {b}"))),
        };
        let user_dims = r.dims()?;
        let episode_dims = r.dims()?;
        let params = TowerParams::new(r.tower(&user_dims)?, r.tower(&episode_dims)?, linear_head)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let c = r.f64s(4)?;
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let m = TowerParams::new(r.tower(&user_dims)?, r.tower(&episode_dims)?, linear_head)?;
                let v = TowerParams::new(r.tower(&user_dims)?, r.tower(&episode_dims)?, linear_head)?;
                Some(OptimizerState {
                    config: AdamConfig {
                        learning_rate: c[0],
                        beta1: c[1],
                        beta2: c[2],
                        epsilon: c[3],
                    },
                    step,
                    first_moment: m,
                    second_moment: v,
                })
            }
            b => return Err(Error::Incompatible(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Incompatible(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            schema_hash,
            meta,
            params,
            optimizer,
        })
    }

    pub fn check_schemas(&self, user: &FeatureSchema, episode: &FeatureSchema) -> Result<()> {
        if self.schema_hash != schema_hash(user, episode) {
            return Err(Error::Incompatible(
                "checkpoint was trained on a different feature schema".into(),
            ));
        }
        if self.params.user.input_width() != user.width || self.params.episode.input_width() != episode.width {
            return Err(Error::Incompatible(
                "tower input widths differ from the schema widths".into(),
            ));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Incompatible("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Incompatible("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let layers = self.u32()? as usize;
        if layers == 0 || layers > 64 {
            return Err(Error::Incompatible(format!("implausible layer count {layers}")));
        }
        (0..=layers).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn tower(&mut self, dims: &[usize]) -> Result<Tower> {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let weights = Matrix::from_vec(w[0], w[1], self.f64s(w[0] * w[1])?)?;
            let bias = self.f64s(w[1])?;
            layers.push(Layer { weights, bias });
        }
        Ok(Tower { layers })
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &TowerParams,
    state: Option<&OptimizerState>,
    user_schema: &FeatureSchema,
    episode_schema: &FeatureSchema,
    meta: CheckpointMeta,
) -> Result<()> {
    let ckpt = Checkpoint {
        schema_hash: schema_hash(user_schema, episode_schema),
        meta,
        params: params.clone(),
        optimizer: state.cloned(),
    };
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

/// Reads a checkpoint without checking it against any schema.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Reads a checkpoint and verifies it was trained on these schemas.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    user_schema: &FeatureSchema,
    episode_schema: &FeatureSchema,
) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    ckpt.check_schemas(user_schema, episode_schema)?;
    Ok(ckpt)
}
