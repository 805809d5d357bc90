//! The toy classifier whose MLP rows are the neurons under study.
//!
//! `tokens → embed → N × (h + down·σ(up·h)) → mean over tokens → head`.
//!
//! A neuron is one row of an `up` matrix (`d_hidden × d_model`) or of a
//! `down` matrix (`d_model × d_hidden`). Up-neuron `r` of layer `l` emits
//! `σ(up[l][r]·h)` per token; down-neuron `r` emits `(down[l]·a)[r]` before the
//! residual add.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::hash::Digest;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// A 2-layer, 8-wide, 3-class SiLU model over 32 tokens.
    pub fn small(seed: u64) -> Self {
        Self {
            vocab_size: 32,
            d_model: 8,
            d_hidden: 32,
            n_layers: 2,
            n_classes: 3,
            activation: Activation::Silu,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("n_layers", self.n_layers),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let too_big = |a: usize, b: usize| a.checked_mul(b).is_none_or(|n| n > u32::MAX as usize);
        if too_big(self.vocab_size, self.d_model)
            || too_big(self.d_hidden, self.d_model)
            || too_big(self.n_classes, self.d_model)
            || too_big(self.n_layers, self.d_hidden + self.d_model)
        {
            return Err(Error::InvalidConfig("dimensions overflow".into()));
        }
        Ok(())
    }

    /// `n_layers · (d_hidden + d_model)`.
    pub fn neuron_count(&self) -> usize {
        self.n_layers * self.per_layer()
    }

    fn per_layer(&self) -> usize {
        self.d_hidden + self.d_model
    }

    pub fn rows_for(&self, role: Role) -> usize {
        match role {
            Role::Up => self.d_hidden,
            Role::Down => self.d_model,
        }
    }

    pub fn check_neuron(&self, id: NeuronId) -> Result<()> {
        if id.layer >= self.n_layers || id.row >= self.rows_for(id.role) {
            return Err(Error::NeuronOutOfRange(id.to_string()));
        }
        Ok(())
    }

    /// Position of `id` in canonical order.
    pub fn neuron_index(&self, id: NeuronId) -> usize {
        let base = id.layer * self.per_layer();
        match id.role {
            Role::Up => base + id.row,
            Role::Down => base + self.d_hidden + id.row,
        }
    }

    pub fn neuron_at(&self, index: usize) -> NeuronId {
        let layer = index / self.per_layer();
        let rem = index % self.per_layer();
        if rem < self.d_hidden {
            NeuronId::new(layer, Role::Up, rem)
        } else {
            NeuronId::new(layer, Role::Down, rem - self.d_hidden)
        }
    }

    /// Every neuron in canonical order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.neuron_count()).map(|i| self.neuron_at(i))
    }

    /// Shapes compatible with another config (seed may differ).
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.d_model == other.d_model
            && self.d_hidden == other.d_hidden
            && self.n_layers == other.n_layers
            && self.n_classes == other.n_classes
            && self.activation == other.activation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Up,
    Down,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Up => "up",
            Role::Down => "down",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Role::Up),
            "down" => Ok(Role::Down),
            other => Err(Error::InvalidArgument(format!("unknown role {other:?}"))),
        }
    }
}

/// `(layer, role, row)`; the derived ordering is the canonical tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronId {
    pub layer: usize,
    pub role: Role,
    pub row: usize,
}

impl NeuronId {
    pub fn new(layer: usize, role: Role, row: usize) -> Self {
        Self { layer, role, row }
    }

    pub fn up(layer: usize, row: usize) -> Self {
        Self::new(layer, Role::Up, row)
    }

    pub fn down(layer: usize, row: usize) -> Self {
        Self::new(layer, Role::Down, row)
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.layer, self.role.as_str(), self.row)
    }
}

// Serialized as `[layer, "up"|"down", row]`.
impl Serialize for NeuronId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.layer, self.role, self.row).serialize(s)
    }
}

impl<'de> Deserialize<'de> for NeuronId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (layer, role, row) = <(usize, Role, usize)>::deserialize(d)?;
        Ok(Self { layer, role, row })
    }
}

/// All weights of the model. Tensor order (`embed`, then `up`/`down` per
/// layer, then `head`) is the serialization and hashing order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub up: Vec<Tensor<T>>,
    pub down: Vec<Tensor<T>>,
    pub head: Tensor<T>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Seeded uniform init in `±1/√fan_in`. The embedding is a lookup from a
    /// one-hot input, so its fan-in is 1.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(vec![rows, cols], data)
        };
        let embed = draw(config.vocab_size, config.d_model, 1)?;
        let mut up = Vec::with_capacity(config.n_layers);
        let mut down = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            up.push(draw(config.d_hidden, config.d_model, config.d_model)?);
            down.push(draw(config.d_model, config.d_hidden, config.d_hidden)?);
        }
        let head = draw(config.n_classes, config.d_model, config.d_model)?;
        Ok(Self {
            config: config.clone(),
            embed,
            up,
            down,
            head,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(Self {
            config: c.clone(),
            embed: Tensor::zeros(&[c.vocab_size, c.d_model]),
            up: (0..c.n_layers).map(|_| Tensor::zeros(&[c.d_hidden, c.d_model])).collect(),
            down: (0..c.n_layers).map(|_| Tensor::zeros(&[c.d_model, c.d_hidden])).collect(),
            head: Tensor::zeros(&[c.n_classes, c.d_model]),
        })
    }

    /// Tensors with their manifest names, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, (u, d)) in self.up.iter().zip(&self.down).enumerate() {
            out.push((format!("layers.{l}.up"), u));
            out.push((format!("layers.{l}.down"), d));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, (u, d)) in self.up.iter_mut().zip(self.down.iter_mut()).enumerate() {
            out.push((format!("layers.{l}.up"), u));
            out.push((format!("layers.{l}.down"), d));
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Expected `(name, shape)` pairs for `config`, in serialization order.
    pub fn expected_layout(config: &ModelConfig) -> Vec<(String, [usize; 2])> {
        let mut out = vec![("embed".to_string(), [config.vocab_size, config.d_model])];
        for l in 0..config.n_layers {
            out.push((format!("layers.{l}.up"), [config.d_hidden, config.d_model]));
            out.push((format!("layers.{l}.down"), [config.d_model, config.d_hidden]));
        }
        out.push(("head".to_string(), [config.n_classes, config.d_model]));
        out
    }

    /// FNV-1a over the little-endian payload bytes of every tensor.
    pub fn content_hash(&self) -> u64 {
        let mut d = Digest::new();
        for (_, t) in self.named_tensors() {
            d.update(&t.to_le_bytes());
        }
        d.finish()
    }

    pub fn matrix(&self, layer: usize, role: Role) -> &Tensor<T> {
        match role {
            Role::Up => &self.up[layer],
            Role::Down => &self.down[layer],
        }
    }

    pub fn matrix_mut(&mut self, layer: usize, role: Role) -> &mut Tensor<T> {
        match role {
            Role::Up => &mut self.up[layer],
            Role::Down => &mut self.down[layer],
        }
    }

    pub fn neuron_row(&self, id: NeuronId) -> Result<&[T]> {
        self.config.check_neuron(id)?;
        Ok(self.matrix(id.layer, id.role).row(id.row))
    }

    pub fn neuron_row_mut(&mut self, id: NeuronId) -> Result<&mut [T]> {
        self.config.check_neuron(id)?;
        Ok(self.matrix_mut(id.layer, id.role).row_mut(id.row))
    }

    pub fn neuron_count(&self) -> usize {
        self.config.neuron_count()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            embed: self.embed.cast(),
            up: self.up.iter().map(Tensor::cast).collect(),
            down: self.down.iter().map(Tensor::cast).collect(),
            head: self.head.cast(),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let layout = Self::expected_layout(&self.config);
        let tensors = self.named_tensors();
        if layout.len() != tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (_, t)) in layout.iter().zip(tensors) {
            if t.shape() != shape {
                return Err(Error::ConfigMismatch(format!(
                    "{name} has shape {:?}, config wants {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for one forward pass.
pub struct ModelGraph {
    pub embed: Var,
    pub up: Vec<Var>,
    pub down: Vec<Var>,
    pub head: Var,
    /// Residual stream entering each layer, plus the final one (`n_layers + 1` entries).
    pub residual: Vec<Var>,
    /// Post-activation hidden units per layer, `[tokens × d_hidden]`.
    pub hidden: Vec<Var>,
    /// Down-projection output per layer before the residual add, `[tokens × d_model]`.
    pub block_out: Vec<Var>,
    /// Token-averaged final residual, `[batch × d_model]`.
    pub pooled: Var,
    pub logits: Var,
}

/// Records the forward pass for `batch` on `tape`.
pub fn build_graph<T: Scalar, S: AsRef<[u32]>>(
    tape: &mut Tape<T>,
    params: &ParameterSet<T>,
    batch: &[S],
) -> Result<ModelGraph> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(Error::Empty("batch has no examples".into()));
    }
    let mut ids = Vec::new();
    let mut lens = Vec::with_capacity(batch.len());
    for (e, seq) in batch.iter().enumerate() {
        let seq = seq.as_ref();
        if seq.is_empty() {
            return Err(Error::Empty(format!("example {e} has no tokens")));
        }
        for (p, &tok) in seq.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    example: e,
                    position: p,
                    token: tok,
                    vocab_size: cfg.vocab_size,
                });
            }
            ids.push(tok as usize);
        }
        lens.push(seq.len());
    }

    let embed = tape.leaf(params.embed.clone());
    let up: Vec<Var> = params.up.iter().map(|t| tape.leaf(t.clone())).collect();
    let down: Vec<Var> = params.down.iter().map(|t| tape.leaf(t.clone())).collect();
    let head = tape.leaf(params.head.clone());

    let mut h = tape.gather(embed, ids)?;
    let mut residual = vec![h];
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut block_out = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = tape.matmul_nt(h, up[l])?;
        let a = tape.activation(pre, cfg.activation)?;
        let o = tape.matmul_nt(a, down[l])?;
        h = tape.add(h, o)?;
        hidden.push(a);
        block_out.push(o);
        residual.push(h);
    }
    let pooled = tape.segment_mean(h, lens)?;
    let logits = tape.matmul_nt(pooled, head)?;
    Ok(ModelGraph {
        embed,
        up,
        down,
        head,
        residual,
        hidden,
        block_out,
        pooled,
        logits,
    })
}

/// Per-neuron activations for the tokens of one batch, canonical neuron order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace<T> {
    pub values: Vec<Vec<T>>,
    pub token_count: usize,
}

pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub trace: Option<BatchTrace<T>>,
}

pub fn forward<T: Scalar, S: AsRef<[u32]>>(
    params: &ParameterSet<T>,
    batch: &[S],
    record: bool,
) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, params, batch)?;
    let logits = tape.value(g.logits)?.clone();
    let trace = if record {
        Some(collect_trace(&tape, &g, &params.config)?)
    } else {
        None
    };
    Ok(ForwardOutput { logits, trace })
}

fn collect_trace<T: Scalar>(
    tape: &Tape<T>,
    g: &ModelGraph,
    cfg: &ModelConfig,
) -> Result<BatchTrace<T>> {
    let mut values = Vec::with_capacity(cfg.neuron_count());
    let mut token_count = 0;
    for l in 0..cfg.n_layers {
        for (var, width) in [(g.hidden[l], cfg.d_hidden), (g.block_out[l], cfg.d_model)] {
            let t = tape.value(var)?;
            let (tokens, _) = t.dims2()?;
            token_count = tokens;
            for r in 0..width {
                values.push((0..tokens).map(|i| t.data()[i * width + r]).collect());
            }
        }
    }
    Ok(BatchTrace {
        values,
        token_count,
    })
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(crate::tensor::softmax_cross_entropy(logits, labels)?.0)
}

/// Index of the largest logit in each row (first wins on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (b, _) = logits.dims2()?;
    Ok((0..b)
        .map(|i| {
            let row = logits.row(i);
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Per-neuron scalar activations sampled over evaluation tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub config: ModelConfig,
    pub token_count: usize,
    #[serde(with = "crate::io::hex_u64")]
    pub dataset_hash: u64,
    #[serde(with = "crate::io::hex_u64")]
    pub model_hash: u64,
    /// One series of `token_count` samples per neuron, canonical order.
    pub values: Vec<Vec<f32>>,
}

impl ActivationTrace {
    pub fn series(&self, id: NeuronId) -> Result<&[f32]> {
        self.config.check_neuron(id)?;
        Ok(&self.values[self.config.neuron_index(id)])
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.values.len() != self.config.neuron_count() {
            return Err(Error::Malformed(format!(
                "trace has {} series, model has {} neurons",
                self.values.len(),
                self.config.neuron_count()
            )));
        }
        if let Some(i) = self.values.iter().position(|s| s.len() != self.token_count) {
            return Err(Error::Malformed(format!(
                "series {} has {} samples, expected {}",
                self.config.neuron_at(i),
                self.values[i].len(),
                self.token_count
            )));
        }
        Ok(())
    }
}

/// Default cap on traced tokens.
pub const MAX_TRACE_TOKENS: usize = 10_000;

/// Runs the model over every example and keeps activations for at most
/// `max_tokens` tokens, chosen uniformly without replacement by `seed` and
/// kept in dataset order.
pub fn record_trace<T: Scalar, S: AsRef<[u32]>>(
    params: &ParameterSet<T>,
    examples: &[S],
    dataset_hash: u64,
    max_tokens: usize,
    seed: u64,
    batch_size: usize,
) -> Result<ActivationTrace> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to trace".into()));
    }
    if max_tokens == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("max_tokens and batch_size must be positive".into()));
    }
    let total: usize = examples.iter().map(|e| e.as_ref().len()).sum();
    let keep: Vec<bool> = if total <= max_tokens {
        vec![true; total]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = vec![false; total];
        for i in rand::seq::index::sample(&mut rng, total, max_tokens).into_iter() {
            mask[i] = true;
        }
        mask
    };
    let n = params.neuron_count();
    let mut values: Vec<Vec<f32>> = vec![Vec::with_capacity(total.min(max_tokens)); n];
    let mut offset = 0;
    for chunk in examples.chunks(batch_size) {
        let out = forward(params, chunk, true)?;
        let bt = out.trace.expect("recorded");
        for (series, batch_series) in values.iter_mut().zip(&bt.values) {
            for (t, &v) in batch_series.iter().enumerate() {
                if keep[offset + t] {
                    series.push(v.to_f64() as f32);
                }
            }
        }
        offset += bt.token_count;
    }
    let token_count = values.first().map_or(0, Vec::len);
    Ok(ActivationTrace {
        config: params.config.clone(),
        token_count,
        dataset_hash,
        model_hash: params.content_hash(),
        values,
    })
}
