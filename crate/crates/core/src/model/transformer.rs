use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Input length used by the full-scale reference setup. Kept as metadata only.
pub const REFERENCE_MAX_LEN: usize = 164;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    /// Laptop-scale reference: 2 layers, width 64, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 128,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// A padded batch of token sequences, packed row-major as `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(sequences: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::contract("batch contains an empty sequence"));
        }
        let seq = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sequences.len() * seq);
        let mut valid = Vec::with_capacity(sequences.len() * seq);
        for s in sequences {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(pad_id).take(seq - s.len()));
            valid.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Ok(TokenBatch { ids, valid, batch: sequences.len(), seq })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Row index of the first token of every sequence.
    pub fn first_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl LayerParams {
    pub fn all(&self) -> [ParamId; 16] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gamma,
            self.ln1_beta,
            self.ff1_w,
            self.ff1_b,
            self.ff2_w,
            self.ff2_b,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Post-layer-norm transformer encoder with tied MLM output projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneLM {
    pub config: TransformerConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    /// Output bias of the pre-training MLM head.
    pub mlm_bias: ParamId,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

impl BackboneLM {
    pub fn new(store: &mut ParamStore, config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let wd = 1.0 / (d as f64).sqrt();
        let wf = 1.0 / (f as f64).sqrt();
        let token_embedding = store.add("backbone.tok", uniform(rng, &[config.vocab_size, d], 0.5)?)?;
        let position_embedding = store.add("backbone.pos", uniform(rng, &[config.max_seq_len, d], 0.1)?)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("backbone.l{l}");
            let mut lin = |name: &str, fan_in: usize, fan_out: usize, bound: f64| -> Result<(ParamId, ParamId)> {
                let w = store.add(format!("{p}.{name}.w"), uniform(rng, &[fan_in, fan_out], bound)?)?;
                let b = store.add(format!("{p}.{name}.b"), Tensor::zeros(&[fan_out]))?;
                Ok((w, b))
            };
            let (wq, bq) = lin("q", d, d, wd)?;
            let (wk, bk) = lin("k", d, d, wd)?;
            let (wv, bv) = lin("v", d, d, wd)?;
            let (wo, bo) = lin("o", d, d, wd)?;
            let (ff1_w, ff1_b) = lin("ff1", d, f, wd)?;
            let (ff2_w, ff2_b) = lin("ff2", f, d, wf)?;
            let ln1_gamma = store.add(format!("{p}.ln1.gamma"), Tensor::vector(vec![1.0; d])?)?;
            let ln1_beta = store.add(format!("{p}.ln1.beta"), Tensor::zeros(&[d]))?;
            let ln2_gamma = store.add(format!("{p}.ln2.gamma"), Tensor::vector(vec![1.0; d])?)?;
            let ln2_beta = store.add(format!("{p}.ln2.beta"), Tensor::zeros(&[d]))?;
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gamma,
                ln1_beta,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                ln2_gamma,
                ln2_beta,
            });
        }
        let mlm_bias = store.add("backbone.mlm_bias", Tensor::zeros(&[config.vocab_size]))?;
        Ok(BackboneLM {
            config,
            token_embedding,
            position_embedding,
            layers,
            mlm_bias,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            ids.extend(l.all());
        }
        ids.push(self.mlm_bias);
        ids
    }

    pub(crate) fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &TokenBatch) -> Result<Var> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.config.max_seq_len
            )));
        }
        let tok = g.param(store, self.token_embedding);
        let pos = g.param(store, self.position_embedding);
        let t = g.embedding(tok, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.rows()).map(|r| r % batch.seq).collect();
        let p = g.embedding(pos, &positions)?;
        g.add(t, p)
    }

    fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    pub(crate) fn attention(&self, g: &mut Graph, store: &ParamStore, layer: usize, x: Var, batch: &TokenBatch) -> Result<Var> {
        let p = &self.layers[layer];
        let q = Self::linear(g, store, x, p.wq, p.bq)?;
        let k = Self::linear(g, store, x, p.wk, p.bk)?;
        let v = Self::linear(g, store, x, p.wv, p.bv)?;
        let a = g.attention(q, k, v, batch.batch, batch.seq, self.config.n_heads, &batch.valid)?;
        Self::linear(g, store, a, p.wo, p.bo)
    }

    pub(crate) fn ffn(&self, g: &mut Graph, store: &ParamStore, layer: usize, x: Var) -> Result<Var> {
        let p = &self.layers[layer];
        let h = Self::linear(g, store, x, p.ff1_w, p.ff1_b)?;
        let h = g.relu(h);
        Self::linear(g, store, h, p.ff2_w, p.ff2_b)
    }

    pub(crate) fn norm(&self, g: &mut Graph, store: &ParamStore, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let gv = g.param(store, gamma);
        let bv = g.param(store, beta);
        g.layer_norm(x, gv, bv)
    }

    /// Tied projection of selected hidden rows to vocabulary logits.
    pub(crate) fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var, bias: ParamId) -> Result<Var> {
        let tok = g.param(store, self.token_embedding);
        let b = g.param(store, bias);
        let logits = g.matmul_nt(hidden, tok)?;
        g.add_row(logits, b)
    }
}
