//! Character-level causal transformer conditioned on a dataset embedding.
//!
//! The input at every position is `W_t[token] + W_p[position] + w_D`. Blocks
//! are pre-norm (attention, then a 4× gelu MLP), and the output head reuses
//! the token table: `logits = ln_f(h) · W_tᵀ`.

use std::rc::Rc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::expr::Vocabulary;
use crate::nn::{Graph, Linear, NnError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Model width; equals the encoder's embedding size.
    pub width: usize,
    /// Longest input sequence, `<SOS>` included.
    pub context: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            n_layers: 2,
            n_heads: 4,
            width: 64,
            context: 202,
            vocab_size: 35,
            dropout: 0.0,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.n_heads) {
            return Err(NnError::Invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        if self.context < 2 || self.vocab_size <= Vocabulary::EOS {
            return Err(NnError::Invalid("context and vocabulary too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: (ParamId, ParamId),
    fc: Linear,
    fc_proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gpt {
    pub config: GptConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

const LINEAR_NAMES: [&str; 6] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.proj",
    "mlp.fc",
    "mlp.proj",
];

impl Gpt {
    /// Weights `N(0, 0.02²)` (residual projections scaled by `1/√(2l)`),
    /// zero biases, unit layer-norm gains except `ln_f`, whose gain starts at
    /// zero so the untrained model predicts a uniform distribution.
    pub fn new<R: Rng>(
        config: GptConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Gpt, NnError> {
        config.validate()?;
        let c = config.width;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let tok_emb = store.add_normal("gpt.tok_emb", &[config.vocab_size, c], std, rng);
        let pos_emb = store.add_normal("gpt.pos_emb", &[config.context, c], std, rng);
        let ln = |store: &mut ParamStore, name: &str, gain: f64| {
            (
                store.add(format!("{name}.gamma"), Tensor::full(&[c], gain)),
                store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            )
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("gpt.h{i}");
            let ln1 = ln(store, &format!("{p}.ln1"), 1.0);
            let q = Linear::new(store, &format!("{p}.attn.q"), c, c, std, rng);
            let k = Linear::new(store, &format!("{p}.attn.k"), c, c, std, rng);
            let v = Linear::new(store, &format!("{p}.attn.v"), c, c, std, rng);
            let proj = Linear::new(store, &format!("{p}.attn.proj"), c, c, resid_std, rng);
            let ln2 = ln(store, &format!("{p}.ln2"), 1.0);
            let fc = Linear::new(store, &format!("{p}.mlp.fc"), c, 4 * c, std, rng);
            let fc_proj = Linear::new(store, &format!("{p}.mlp.proj"), 4 * c, c, resid_std, rng);
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                proj,
                ln2,
                fc,
                fc_proj,
            });
        }
        let ln_f = ln(store, "gpt.ln_f", 1.0);
        Ok(Gpt {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Re-binds to parameters already registered under the `gpt.` names.
    pub fn bind(config: GptConfig, store: &ParamStore) -> Result<Gpt, NnError> {
        config.validate()?;
        let id = |n: String| {
            store
                .id(&n)
                .ok_or_else(|| NnError::Invalid(format!("missing parameter {n}")))
        };
        let ln = |n: &str| -> Result<(ParamId, ParamId), NnError> {
            Ok((id(format!("{n}.gamma"))?, id(format!("{n}.beta"))?))
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("gpt.h{i}");
            let mut lins = Vec::with_capacity(6);
            for name in LINEAR_NAMES {
                lins.push(Linear {
                    weight: id(format!("{p}.{name}.weight"))?,
                    bias: Some(id(format!("{p}.{name}.bias"))?),
                });
            }
            blocks.push(Block {
                ln1: ln(&format!("{p}.ln1"))?,
                q: lins[0],
                k: lins[1],
                v: lins[2],
                proj: lins[3],
                ln2: ln(&format!("{p}.ln2"))?,
                fc: lins[4],
                fc_proj: lins[5],
            });
        }
        Ok(Gpt {
            config,
            tok_emb: id("gpt.tok_emb".into())?,
            pos_emb: id("gpt.pos_emb".into())?,
            blocks,
            ln_f: ln("gpt.ln_f")?,
        })
    }

    /// Logits `[batch, seq, vocab]` for `tokens` (row-major `batch × seq`)
    /// conditioned on `w_d` (`[batch, width]`). Dropout is active only when
    /// an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        w_d: Var,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, NnError> {
        let c = self.config.width;
        if seq == 0 || seq > self.config.context {
            return Err(NnError::Invalid(format!(
                "sequence length {seq} outside 1..={}",
                self.config.context
            )));
        }
        if tokens.len() != batch * seq {
            return Err(NnError::DataLength {
                shape: vec![batch, seq],
                len: tokens.len(),
            });
        }
        if g.shape(w_d) != [batch, c] {
            return Err(NnError::Shape {
                op: "gpt.forward",
                lhs: g.shape(w_d).to_vec(),
                rhs: vec![batch, c],
            });
        }
        let tok_table = g.param(store, self.tok_emb);
        let tok = g.embedding(tok_table, tokens, &[batch, seq])?;
        let pos_table = g.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..seq).collect();
        let pos = g.embedding(pos_table, &positions, &[seq])?;
        let cond = g.reshape(w_d, &[batch, 1, c])?;
        let x = g.add(tok, pos)?;
        let mut x = g.add(x, cond)?;
        x = self.dropout(g, x, &mut dropout_rng)?;

        let mask: Rc<[bool]> = (0..seq * seq).map(|i| i % seq > i / seq).collect();
        for block in &self.blocks {
            let h = self.layer_norm(g, store, x, block.ln1)?;
            let h = self.attention(
                g,
                store,
                block,
                h,
                batch,
                seq,
                mask.clone(),
                &mut dropout_rng,
            )?;
            x = g.add(x, h)?;
            let h = self.layer_norm(g, store, x, block.ln2)?;
            let h = block.fc.forward(g, store, h)?;
            let h = g.gelu(h);
            let h = block.fc_proj.forward(g, store, h)?;
            let h = self.dropout(g, h, &mut dropout_rng)?;
            x = g.add(x, h)?;
        }
        let h = self.layer_norm(g, store, x, self.ln_f)?;
        g.matmul_bt(h, tok_table)
    }

    fn layer_norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        (gamma, beta): (ParamId, ParamId),
    ) -> Result<Var, NnError> {
        let gamma = g.param(store, gamma);
        let beta = g.param(store, beta);
        g.layer_norm(x, gamma, beta)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &Block,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Rc<[bool]>,
        dropout_rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var, NnError> {
        let heads = self.config.n_heads;
        let hd = self.config.width / heads;
        let split = |g: &mut Graph, v: Var| -> Result<Var, NnError> {
            let v = g.reshape(v, &[batch, seq, heads, hd])?;
            let v = g.swap_axes12(v)?;
            g.reshape(v, &[batch * heads, seq, hd])
        };
        let q = block.q.forward(g, store, x)?;
        let q = split(g, q)?;
        let k = block.k.forward(g, store, x)?;
        let k = split(g, k)?;
        let v = block.v.forward(g, store, x)?;
        let v = split(g, v)?;
        let att = g.bmm(q, k, true)?;
        let att = g.scale(att, 1.0 / (hd as f64).sqrt());
        let att = g.masked_fill(att, mask, f64::NEG_INFINITY)?;
        let att = g.softmax(att);
        let att = self.dropout(g, att, dropout_rng)?;
        let y = g.bmm(att, v, false)?;
        let y = g.reshape(y, &[batch, heads, seq, hd])?;
        let y = g.swap_axes12(y)?;
        let y = g.reshape(y, &[batch, seq, self.config.width])?;
        let y = block.proj.forward(g, store, y)?;
        self.dropout(g, y, dropout_rng)
    }

    fn dropout(
        &self,
        g: &mut Graph,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var, NnError> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let n = g.value(x).numel();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = g.input(Tensor::new(&shape, mask)?);
        g.mul(x, mask)
    }

    pub fn token_table(&self) -> ParamId {
        self.tok_emb
    }
}

/// Draws a token id from the `k` largest logits after renormalization.
/// Ids in `banned` are never drawn. Ties in the ranking go to the lower id, so
/// `k = 1` is a deterministic argmax that consumes no randomness.
pub fn sample_top_k<R: Rng + ?Sized>(
    logits: &[f64],
    k: usize,
    banned: &[usize],
    rng: &mut R,
) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).filter(|i| !banned.contains(i)).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    if order.len() == 1 {
        return order[0];
    }
    let top = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in order.iter().zip(&weights) {
        if u < *w {
            return *i;
        }
        u -= w;
    }
    *order.last().unwrap()
}
