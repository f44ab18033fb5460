//! A tiny pre-LayerNorm causal transformer exposing `log π(y | x)`.
//!
//! The same architecture serves as the trainable policy and, through
//! [`LmPolicy::clone_frozen`], as the fixed reference. Parameters are plain
//! [`Tensor`]s in a fixed order; a forward pass binds them onto a [`Graph`] as
//! leaves (trainable) or constants (frozen / evaluation).

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {needed} tokens exceeds context length {context_len}")]
    ContextOverflow { needed: usize, context_len: usize },
    #[error("token sequences must be non-empty")]
    EmptySequence,
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("policy is frozen; its parameters cannot change")]
    Frozen,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;

/// Non-empty run of token ids. Clones share one buffer, so two views that
/// hold the same sequence refer to the same object.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSequence(Arc<[u32]>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(LmError::EmptySequence);
        }
        Ok(TokenSequence(ids.into()))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut v = self.0.to_vec();
        v.extend_from_slice(&other.0);
        TokenSequence(v.into())
    }

    /// True when both handles share the same buffer.
    pub fn same_object(&self, other: &TokenSequence) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(LmError::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = LmError;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        TokenSequence::new(v)
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(s: TokenSequence) -> Self {
        s.0.to_vec()
    }
}

impl fmt::Debug for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &self.0[..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
    /// Token that ends greedy decoding.
    #[serde(default)]
    pub end_token: Option<u32>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 64,
            context_len: 64,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            seed: 0,
            end_token: None,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LmError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(LmError::InvalidConfig(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if let Some(t) = self.end_token {
            if t as usize >= self.vocab_size {
                return Err(LmError::InvalidConfig(format!("end_token {t} outside vocabulary")));
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(c: &LmConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, t) = (c.vocab_size, c.embed_dim, c.context_len);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![t, d], Init::Normal),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("attn.w_qkv"), vec![d, 3 * d], Init::Normal),
            (p("attn.b_qkv"), vec![3 * d], Init::Zeros),
            (p("attn.w_out"), vec![d, d], Init::Normal),
            (p("attn.b_out"), vec![d], Init::Zeros),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
            (p("mlp.w_in"), vec![d, 4 * d], Init::Normal),
            (p("mlp.b_in"), vec![4 * d], Init::Zeros),
            (p("mlp.w_out"), vec![4 * d, d], Init::Normal),
            (p("mlp.b_out"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gamma".to_string(), vec![d], Init::Ones),
        ("ln_f.beta".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, v], Init::Normal),
        ("head.b".to_string(), vec![v], Init::Zeros),
    ]);
    out
}

/// Causal LM policy. A frozen policy refuses every parameter update.
#[derive(Clone, Debug)]
pub struct LmPolicy {
    config: LmConfig,
    names: Arc<[String]>,
    params: Vec<Tensor>,
    frozen: bool,
}

impl LmPolicy {
    /// Fresh policy: weights and embeddings drawn from N(0, 0.02²) with the
    /// config seed, biases zero, LayerNorm gains one.
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let spec = layout(&config);
        let names = spec.iter().map(|(n, _, _)| n.clone()).collect();
        let params = spec
            .into_iter()
            .map(|(_, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::new(shape, data)
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(LmPolicy {
            config,
            names,
            params,
            frozen: false,
        })
    }

    /// Every parameter zero: all logits vanish and each next-token
    /// distribution is uniform.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        let p = LmPolicy::new(config)?;
        let params = p.params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        p.with_params(params)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_layout(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(LmError::LayoutMismatch(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(params) {
            if old.shape() != new.shape() {
                return Err(LmError::LayoutMismatch(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copy of this policy carrying `params` instead; keeps the frozen flag.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        self.check_layout(&params)?;
        Ok(LmPolicy {
            params,
            ..self.clone()
        })
    }

    /// Replaces the parameters in place. Fails on a frozen policy.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if self.frozen {
            return Err(LmError::Frozen);
        }
        self.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    /// Overwrites one named parameter; fails on a frozen policy.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut params = self.params.clone();
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| LmError::LayoutMismatch(format!("no parameter named {name}")))?;
        params[idx] = value;
        self.set_params(params)
    }

    /// Deep copy marked frozen, bit-identical at copy time.
    pub fn clone_frozen(&self) -> LmPolicy {
        LmPolicy {
            frozen: true,
            ..self.clone()
        }
    }

    /// Trainable copy; the source is untouched.
    pub fn clone_trainable(&self) -> LmPolicy {
        LmPolicy {
            frozen: false,
            ..self.clone()
        }
    }

    /// SHA-256 over the config and the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binds parameters onto `g`: leaves when trainable, constants when frozen.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundLm<'g, '_> {
        let vars = self
            .params
            .iter()
            .map(|t| if self.frozen { g.constant(t.clone()) } else { g.leaf(t.clone()) })
            .collect();
        BoundLm { config: &self.config, vars }
    }

    /// Binds parameters as constants, for evaluation without gradients.
    pub fn bind_const<'g>(&self, g: &'g Graph) -> BoundLm<'g, '_> {
        let vars = self.params.iter().map(|t| g.constant(t.clone())).collect();
        BoundLm { config: &self.config, vars }
    }

    /// Runs this architecture over caller-supplied parameter nodes.
    pub fn bind_vars<'g>(&self, vars: Vec<Var<'g>>) -> BoundLm<'g, '_> {
        assert_eq!(vars.len(), self.params.len(), "parameter count mismatch");
        BoundLm { config: &self.config, vars }
    }

    /// `Σ_t log π(y_t | x, y_<t)` in nats.
    pub fn log_prob_sum(&self, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        let g = Graph::new();
        Ok(self.bind_const(&g).log_prob_sum(x, y)?.item())
    }

    /// Average log-likelihood per response token.
    pub fn avg_log_lik(&self, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        Ok(self.log_prob_sum(x, y)? / y.len() as f64)
    }

    /// Next-token log-probabilities after every prefix of `tokens`
    /// (row `i` conditions on `tokens[..=i]`).
    pub fn next_token_logprobs(&self, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let lp = self.bind_const(&g).logprobs(tokens.ids(), 0, tokens.len())?.value();
        Ok(lp.data().chunks(self.config.vocab_size).map(<[f64]>::to_vec).collect())
    }

    /// Argmax decoding, lowest id on ties. Stops after emitting the end token,
    /// after `max_len` tokens, or when the context is full. The result may be
    /// empty only when `max_len` is zero or `x` already fills the context.
    pub fn sample_greedy(&self, x: &TokenSequence, max_len: usize) -> Result<Vec<u32>> {
        x.check_vocab(self.config.vocab_size)?;
        let mut tokens = x.ids().to_vec();
        let mut out = Vec::new();
        while out.len() < max_len && tokens.len() < self.config.context_len {
            let g = Graph::new();
            let n = tokens.len();
            let lp = self.bind_const(&g).logprobs(&tokens, n - 1, 1)?.value();
            let next = lp
                .data()
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as u32;
            out.push(next);
            tokens.push(next);
            if Some(next) == self.config.end_token {
                break;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            frozen: self.frozen,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| NamedArray {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(LmError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        let fresh = LmPolicy::new(ck.config)?;
        if ck.params.len() != fresh.names.len() {
            return Err(LmError::LayoutMismatch(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ck.params.len(),
                fresh.names.len()
            )));
        }
        let mut params = Vec::with_capacity(ck.params.len());
        for (arr, name) in ck.params.into_iter().zip(fresh.names.iter()) {
            if &arr.name != name {
                return Err(LmError::LayoutMismatch(format!("expected {name}, found {}", arr.name)));
            }
            params.push(Tensor::new(arr.shape, arr.data)?);
        }
        let mut policy = fresh.with_params(params)?;
        policy.frozen = ck.frozen;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_checkpoint()).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        LmPolicy::from_checkpoint(ck)
    }
}

/// JSON checkpoint: format version, config, frozen flag and named arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: LmConfig,
    pub frozen: bool,
    pub params: Vec<NamedArray>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Model parameters bound onto one graph.
pub struct BoundLm<'g, 'p> {
    config: &'p LmConfig,
    vars: Vec<Var<'g>>,
}

impl<'g> BoundLm<'g, '_> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Gradients of every parameter after backward; zeros where none flowed.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }

    /// Log-probabilities `[len, vocab]` for positions `start..start+len` of
    /// the causal pass over `tokens`.
    pub fn logprobs(&self, tokens: &[u32], start: usize, len: usize) -> Result<Var<'g>> {
        let c = self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(LmError::EmptySequence);
        }
        if n > c.context_len {
            return Err(LmError::ContextOverflow {
                needed: n,
                context_len: c.context_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(LmError::TokenOutOfRange { token, vocab: c.vocab_size });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let mut it = self.vars.iter().copied();
        let mut next = || it.next().expect("layout checked at construction");

        let (tok_emb, pos_emb) = (next(), next());
        let mut h = tok_emb.embedding_gather(&ids)?.add(pos_emb.embedding_gather(&positions)?)?;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for _ in 0..c.num_layers {
            let (ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o) = (next(), next(), next(), next(), next(), next());
            let (ln2_g, ln2_b, w_in, b_in, w_out, b_out) = (next(), next(), next(), next(), next(), next());

            let a = h.layer_norm(ln1_g, ln1_b, LN_EPS)?;
            let qkv = a.matmul(w_qkv)?.add_row(b_qkv)?;
            let mut heads = Vec::with_capacity(c.num_heads);
            for head in 0..c.num_heads {
                let q = qkv.slice_cols(head * hd, hd)?;
                let k = qkv.slice_cols(c.embed_dim + head * hd, hd)?;
                let v = qkv.slice_cols(2 * c.embed_dim + head * hd, hd)?;
                let att = q.matmul(k.transpose()?)?.scalar_mul(scale)?.causal_softmax()?;
                heads.push(att.matmul(v)?);
            }
            let attn = Var::concat_cols(&heads)?.matmul(w_o)?.add_row(b_o)?;
            h = h.add(attn)?;

            let m = h.layer_norm(ln2_g, ln2_b, LN_EPS)?;
            let m = m.matmul(w_in)?.add_row(b_in)?.gelu()?.matmul(w_out)?.add_row(b_out)?;
            h = h.add(m)?;
        }
        let (lnf_g, lnf_b, head_w, head_b) = (next(), next(), next(), next());
        let h = h.slice_rows(start, len)?.layer_norm(lnf_g, lnf_b, LN_EPS)?;
        let logits = h.matmul(head_w)?.add_row(head_b)?;
        Ok(logits.log_softmax(1)?)
    }

    /// Differentiable `Σ_t log π(y_t | x, y_<t)`.
    pub fn log_prob_sum(&self, x: &TokenSequence, y: &TokenSequence) -> Result<Var<'g>> {
        let needed = x.len() + y.len();
        if needed > self.config.context_len {
            return Err(LmError::ContextOverflow {
                needed,
                context_len: self.config.context_len,
            });
        }
        y.check_vocab(self.config.vocab_size)?;
        let mut tokens = x.ids().to_vec();
        tokens.extend_from_slice(&y.ids()[..y.len() - 1]);
        let targets: Vec<usize> = y.ids().iter().map(|&t| t as usize).collect();
        let lp = self.logprobs(&tokens, x.len() - 1, y.len())?;
        Ok(lp.gather_logprob(&targets)?.sum()?)
    }
}
