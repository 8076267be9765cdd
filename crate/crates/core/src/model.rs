//! Sequence encoder and full-catalog scorer.
//!
//! The self-attention encoder is a pre-norm causal transformer: item plus
//! positional embeddings, `num_layers` blocks of multi-head attention and a
//! GELU feed-forward layer (inner width `4d`), each wrapped in a residual
//! connection, then a final layer norm. The sequence representation is the
//! hidden state at the readout position (the last item by default). Item
//! scores reuse the input embedding matrix: `softmax(h · Mᵀ)`.
//!
//! The mean-pool encoder (`h = mean(E) · W + b`) shares the embedding layer
//! and exists as a simple reference path for gradient checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::corpus::ItemId;
use crate::error::{FaclError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{dot, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SelfAttention,
    MeanPool,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::SelfAttention => "self_attention",
            EncoderKind::MeanPool => "mean_pool",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = FaclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attention" => Ok(Self::SelfAttention),
            "mean_pool" => Ok(Self::MeanPool),
            _ => Err(FaclError::Config(format!("unknown encoder kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub encoder_kind: EncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            max_len: 50,
            dropout_rate: 0.2,
            encoder_kind: EncoderKind::SelfAttention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(FaclError::Config(
                "embed_dim must be a positive multiple of num_heads".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(FaclError::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(FaclError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const ITEM_EMBEDDINGS: usize = 0;
pub const POSITIONAL_EMBEDDINGS: usize = 1;
const FIRST_LAYER: usize = 2;
const PER_LAYER: usize = 16;

/// Parameter indices of one transformer block.
#[derive(Debug, Clone, Copy)]
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Block {
    fn at(layer: usize) -> Self {
        let b = FIRST_LAYER + layer * PER_LAYER;
        Block {
            ln1_g: b,
            ln1_b: b + 1,
            wq: b + 2,
            bq: b + 3,
            wk: b + 4,
            bk: b + 5,
            wv: b + 6,
            bv: b + 7,
            wo: b + 8,
            bo: b + 9,
            ln2_g: b + 10,
            ln2_b: b + 11,
            w1: b + 12,
            b1: b + 13,
            w2: b + 14,
            b2: b + 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig, num_items: usize) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("item_embeddings".to_string(), num_items, d, Init::Normal),
        (
            "positional_embeddings".to_string(),
            cfg.max_len,
            d,
            Init::Normal,
        ),
    ];
    match cfg.encoder_kind {
        EncoderKind::SelfAttention => {
            for l in 0..cfg.num_layers {
                let p = |s: &str| format!("layer{l}.{s}");
                out.extend([
                    (p("ln1.gain"), 1, d, Init::Ones),
                    (p("ln1.bias"), 1, d, Init::Zeros),
                    (p("attn.wq"), d, d, Init::Normal),
                    (p("attn.bq"), 1, d, Init::Zeros),
                    (p("attn.wk"), d, d, Init::Normal),
                    (p("attn.bk"), 1, d, Init::Zeros),
                    (p("attn.wv"), d, d, Init::Normal),
                    (p("attn.bv"), 1, d, Init::Zeros),
                    (p("attn.wo"), d, d, Init::Normal),
                    (p("attn.bo"), 1, d, Init::Zeros),
                    (p("ln2.gain"), 1, d, Init::Ones),
                    (p("ln2.bias"), 1, d, Init::Zeros),
                    (p("ffn.w1"), d, 4 * d, Init::Normal),
                    (p("ffn.b1"), 1, 4 * d, Init::Zeros),
                    (p("ffn.w2"), 4 * d, d, Init::Normal),
                    (p("ffn.b2"), 1, d, Init::Zeros),
                ]);
            }
            out.push(("final_ln.gain".into(), 1, d, Init::Ones));
            out.push(("final_ln.bias".into(), 1, d, Init::Zeros));
        }
        EncoderKind::MeanPool => {
            out.push(("pool.weight".into(), d, d, Init::Normal));
            out.push(("pool.bias".into(), 1, d, Init::Zeros));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ModelParams {
    pub fn num_items(&self) -> usize {
        self.tensors[ITEM_EMBEDDINGS].rows
    }

    pub fn item_embeddings(&self) -> &Matrix {
        &self.tensors[ITEM_EMBEDDINGS]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Checks shapes against the layout the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = layout(&self.config, self.num_items());
        if expected.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(FaclError::Shape(
                "parameter count does not match config".into(),
            ));
        }
        for ((name, r, c, _), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || (t.rows, t.cols) != (*r, *c) {
                return Err(FaclError::Shape(format!(
                    "`{n}` is {}x{}, expected `{name}` {r}x{c}",
                    t.rows, t.cols
                )));
            }
            if !t.is_finite() {
                return Err(FaclError::NonFinite { tensor: n.clone() });
            }
        }
        Ok(())
    }
}

/// Weights and embeddings ~ N(0, 1/d); layer-norm gains 1, all biases 0.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    num_items: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    cfg.validate()?;
    if num_items == 0 {
        return Err(FaclError::Config(
            "cannot build a model over an empty vocabulary".into(),
        ));
    }
    let normal = Normal::new(0.0, 1.0 / (cfg.embed_dim as f64).sqrt())
        .map_err(|e| FaclError::Config(e.to_string()))?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, rows, cols, init) in layout(cfg, num_items) {
        let t = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Normal => Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| normal.sample(rng)).collect(),
            ),
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams {
        config: cfg.clone(),
        names,
        tensors,
    })
}

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale_in_place(s));
    }

    /// Rescales to `max_norm` if the global norm exceeds it.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn check_finite(&self, names: &[String]) -> Result<()> {
        for (t, n) in self.tensors.iter().zip(names) {
            if !t.is_finite() {
                return Err(FaclError::NonFinite { tensor: n.clone() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_items(items: &[ItemId], params: &ModelParams) -> Result<()> {
    if items.is_empty() {
        return Err(FaclError::Shape("cannot encode an empty sequence".into()));
    }
    if items.len() > params.config.max_len {
        return Err(FaclError::Shape(format!(
            "sequence of length {} exceeds max_len {}",
            items.len(),
            params.config.max_len
        )));
    }
    let vocab_size = params.num_items();
    match items.iter().find(|i| i.index() >= vocab_size) {
        Some(bad) => Err(FaclError::OutOfVocabulary {
            item: bad.0,
            vocab_size,
        }),
        None => Ok(()),
    }
}

/// `E[i] = M[items[i]] + P[i]`.
pub fn embed_sequence(items: &[ItemId], params: &ModelParams) -> Result<Matrix> {
    check_items(items, params)?;
    let m = &params.tensors[ITEM_EMBEDDINGS];
    let p = &params.tensors[POSITIONAL_EMBEDDINGS];
    let mut e = Matrix::zeros(items.len(), m.cols);
    for (i, item) in items.iter().enumerate() {
        for ((o, a), b) in e
            .row_mut(i)
            .iter_mut()
            .zip(m.row(item.index()))
            .zip(p.row(i))
        {
            *o = a + b;
        }
    }
    Ok(e)
}

fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

struct Dropout<'r, R: ?Sized> {
    rate: f64,
    rng: Option<&'r mut R>,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn apply(&mut self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let mask = dropout_mask(tape.value(x).len(), self.rate, rng);
                tape.dropout(x, mask)
            }
            _ => x,
        }
    }
}

/// Records the encoder forward pass for `items` on `tape` and returns the
/// causal outputs at positions `from..items.len()`, one row each. Row `i`
/// depends only on `items[..=from + i]`.
///
/// Dropout is applied only in [`Mode::Train`] and draws its masks from `rng`.
pub fn encode_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    items: &[ItemId],
    from: usize,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<NodeId> {
    check_items(items, params)?;
    if from >= items.len() {
        return Err(FaclError::Shape(format!(
            "readout position {from} outside sequence of length {}",
            items.len()
        )));
    }
    let cfg = &params.config;
    let mut drop = Dropout {
        rate: if mode == Mode::Train {
            cfg.dropout_rate
        } else {
            0.0
        },
        rng,
    };
    let item_rows = tape.embed(ITEM_EMBEDDINGS, items.iter().map(|i| i.index()).collect());
    let pos_rows = tape.embed(POSITIONAL_EMBEDDINGS, (0..items.len()).collect());
    let e = tape.add(item_rows, pos_rows);
    let mut x = drop.apply(tape, e);

    match cfg.encoder_kind {
        EncoderKind::MeanPool => {
            let means = tape.cumulative_mean(x);
            let mean = if from == 0 {
                means
            } else {
                tape.tail_rows(means, from)
            };
            let w = tape.param(FIRST_LAYER);
            let b = tape.param(FIRST_LAYER + 1);
            Ok(tape.linear(mean, w, b))
        }
        EncoderKind::SelfAttention => {
            for layer in 0..cfg.num_layers {
                let blk = Block::at(layer);
                let p = |tape: &mut Tape<'_>, i: usize| tape.param(i);

                let (g1, b1) = (p(tape, blk.ln1_g), p(tape, blk.ln1_b));
                let h = tape.layer_norm(x, g1, b1);
                let (wq, bq) = (p(tape, blk.wq), p(tape, blk.bq));
                let (wk, bk) = (p(tape, blk.wk), p(tape, blk.bk));
                let (wv, bv) = (p(tape, blk.wv), p(tape, blk.bv));
                let q = tape.linear(h, wq, bq);
                let k = tape.linear(h, wk, bk);
                let v = tape.linear(h, wv, bv);
                let att = tape.causal_attention(q, k, v, cfg.num_heads);
                let (wo, bo) = (p(tape, blk.wo), p(tape, blk.bo));
                let proj = tape.linear(att, wo, bo);
                let proj = drop.apply(tape, proj);
                x = tape.add(x, proj);

                let (g2, b2) = (p(tape, blk.ln2_g), p(tape, blk.ln2_b));
                let h = tape.layer_norm(x, g2, b2);
                let (w1, c1) = (p(tape, blk.w1), p(tape, blk.b1));
                let (w2, c2) = (p(tape, blk.w2), p(tape, blk.b2));
                let inner = tape.linear(h, w1, c1);
                let inner = tape.gelu(inner);
                let out = tape.linear(inner, w2, c2);
                let out = drop.apply(tape, out);
                x = tape.add(x, out);
            }
            let last = FIRST_LAYER + cfg.num_layers * PER_LAYER;
            let (g, b) = (tape.param(last), tape.param(last + 1));
            let x = tape.layer_norm(x, g, b);
            Ok(if from == 0 {
                x
            } else {
                tape.tail_rows(x, from)
            })
        }
    }
}

/// Forward pass for one sequence, kept for a later backward pass.
pub struct SequenceTrace<'p> {
    pub tape: Tape<'p>,
    pub h: NodeId,
}

impl<'p> SequenceTrace<'p> {
    /// Keeps the outputs at the last `outputs` positions.
    pub fn record<R: Rng + ?Sized>(
        params: &'p ModelParams,
        items: &[ItemId],
        outputs: usize,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        if outputs == 0 || outputs > items.len() {
            return Err(FaclError::Shape(format!(
                "cannot read {outputs} outputs from a sequence of length {}",
                items.len()
            )));
        }
        let mut tape = Tape::new(&params.tensors);
        let h = encode_on_tape(&mut tape, params, items, items.len() - outputs, mode, rng)?;
        Ok(Self { tape, h })
    }

    /// Kept outputs, one row per position.
    pub fn outputs(&self) -> &Matrix {
        self.tape.value(self.h)
    }

    /// Output at the last position.
    pub fn representation(&self) -> &[f64] {
        let h = self.outputs();
        h.row(h.rows - 1)
    }

    /// Adds `∂L/∂θ` into `grads` given `∂L/∂h` for the kept outputs.
    pub fn backward(&self, dh: Matrix, grads: &mut GradientSet) {
        self.tape.backward(vec![(self.h, dh)], &mut grads.tensors);
    }
}

/// `h_u` for a sequence, read out at its last position.
pub fn encode<R: Rng + ?Sized>(
    items: &[ItemId],
    params: &ModelParams,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    encode_at(items, items.len().saturating_sub(1), params, mode, rng)
}

pub fn encode_at<R: Rng + ?Sized>(
    items: &[ItemId],
    readout: usize,
    params: &ModelParams,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    if readout >= items.len() {
        return Err(FaclError::Shape(format!(
            "readout position {readout} outside sequence of length {}",
            items.len()
        )));
    }
    let mut tape = Tape::new(&params.tensors);
    let h = encode_on_tape(&mut tape, params, &items[..=readout], readout, mode, rng)?;
    Ok(tape.value(h).data.clone())
}

/// Raw scores `M · h` for every item.
pub fn item_logits(h: &[f64], params: &ModelParams) -> Vec<f64> {
    let m = params.item_embeddings();
    (0..m.rows).map(|i| dot(m.row(i), h)).collect()
}

/// `softmax(h · Mᵀ)`.
pub fn score_items(h: &[f64], params: &ModelParams) -> Vec<f64> {
    let mut s = item_logits(h, params);
    softmax_in_place(&mut s);
    s
}
