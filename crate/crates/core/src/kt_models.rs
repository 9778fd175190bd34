//! Recurrent and causal-attention knowledge-tracing models, each with a
//! correctness-only variant and an MP-fused dual-head variant.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use prockt_autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, TensorRecord, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Batch;

pub const DEFAULT_RECURRENT_DIM: usize = 200;
pub const DEFAULT_ATTENTION_DIM: usize = 256;
pub const DEFAULT_HEADS: usize = 8;
/// Pre-sigmoid logits are clamped to this magnitude.
pub const LOGIT_CLAMP: f64 = 30.0;
const MASK_NEG: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
const EMBED_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown backbone `{0}` (expected recurrent or attention)")]
    Backbone(String),
    #[error("unknown variant `{0}` (expected original or statuskt)")]
    Variant(String),
    #[error("invalid model config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("batch max_len {batch} does not match model max_len {model}")]
    MaxLen { batch: usize, model: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Recurrent,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Statuskt,
}

impl Backbone {
    pub const ALL: [Backbone; 2] = [Backbone::Recurrent, Backbone::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Recurrent => "recurrent",
            Backbone::Attention => "attention",
        }
    }

    pub fn default_dim(self) -> usize {
        match self {
            Backbone::Recurrent => DEFAULT_RECURRENT_DIM,
            Backbone::Attention => DEFAULT_ATTENTION_DIM,
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Original, Variant::Statuskt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Statuskt => "statuskt",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "recurrent" | "dkt" | "rnn" => Ok(Backbone::Recurrent),
            "attention" | "sakt" => Ok(Backbone::Attention),
            _ => Err(ConfigError::Backbone(s.to_string())),
        }
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Variant::Original),
            "statuskt" => Ok(Variant::Statuskt),
            _ => Err(ConfigError::Variant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub variant: Variant,
    pub embed_dim: usize,
    pub num_questions: usize,
    pub num_concepts: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Ignored by the recurrent backbone.
    pub attention_heads: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Default dimensions for the backbone.
    pub fn new(backbone: Backbone, variant: Variant, num_questions: usize, num_concepts: usize) -> Self {
        Self {
            backbone,
            variant,
            embed_dim: backbone.default_dim(),
            num_questions,
            num_concepts,
            max_len: crate::dataset::DEFAULT_MAX_LEN,
            dropout: 0.1,
            attention_heads: DEFAULT_HEADS,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.embed_dim == 0 || self.num_questions == 0 || self.num_concepts == 0 || self.max_len == 0 {
            return bad("embed_dim, num_questions, num_concepts and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.backbone == Backbone::Attention {
            if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
                return bad(format!(
                    "embed_dim {} is not divisible by attention_heads {}",
                    self.embed_dim, self.attention_heads
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attention_heads.max(1)
    }

    /// Closed-form number of trainable scalars, with `D = embed_dim`,
    /// `Q` questions, `C` concepts and `T = max_len`:
    ///
    /// * shared: `Q·D + C·D + 2C·D` embeddings, `2D·D + D` readout,
    ///   `D + 1` correctness head
    /// * recurrent: `8D² + 4D` (LSTM input, recurrent and bias)
    /// * attention: `T·D` positions, `4(D² + D)` projections, `2(D² + D)` FFN
    /// * statuskt: `8D + D` MP projection, `4D + 4` MP head
    pub fn expected_parameter_count(&self) -> usize {
        let (d, q, c, t) = (self.embed_dim, self.num_questions, self.num_concepts, self.max_len);
        let mut n = q * d + c * d + 2 * c * d + 2 * d * d + d + d + 1;
        n += match self.backbone {
            Backbone::Recurrent => 8 * d * d + 4 * d,
            Backbone::Attention => t * d + 6 * (d * d + d),
        };
        if self.variant == Variant::Statuskt {
            n += 9 * d + 4 * d + 4;
        }
        n
    }
}

/// Per-step outputs, padded to the batch's `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub num_sequences: usize,
    pub max_len: usize,
    /// `P(r_{t+1} = 1)`, `[num_sequences · max_len]`.
    pub r_pred: Vec<f64>,
    /// Next-step MP estimates `[num_sequences · max_len · 4]` (statuskt only).
    pub mp_pred: Option<Vec<f64>>,
}

/// Tape handles of one forward pass over the first `len` positions.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[N, len]`
    pub r: Var,
    /// `[N, len, 4]`
    pub mp: Option<Var>,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    question_emb: ParamId,
    concept_emb: ParamId,
    response_emb: ParamId,
    readout_w: ParamId,
    readout_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    mp_proj: Option<(ParamId, ParamId)>,
    mp_head: Option<(ParamId, ParamId)>,
    body: Body,
}

#[derive(Debug, Clone)]
enum Body {
    Recurrent {
        w_ih: ParamId,
        w_hh: ParamId,
        b: ParamId,
    },
    Attention {
        pos: ParamId,
        proj: [(ParamId, ParamId); 4],
        ffn: [(ParamId, ParamId); 2],
    },
}

#[derive(Debug, Clone)]
pub struct KtModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    ids: Ids,
}

/// Extracts the first `len` positions of each row of a `[n, max_len, width]`
/// array.
pub fn trim<T: Copy>(data: &[T], n: usize, max_len: usize, len: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * len * width);
    for row in 0..n {
        let start = row * max_len * width;
        out.extend_from_slice(&data[start..start + len * width]);
    }
    out
}

/// Inverse of [`trim`], filling the tail with `fill`.
pub fn pad<T: Copy>(data: &[T], n: usize, len: usize, max_len: usize, width: usize, fill: T) -> Vec<T> {
    let mut out = vec![fill; n * max_len * width];
    for row in 0..n {
        out[row * max_len * width..(row * max_len + len) * width]
            .copy_from_slice(&data[row * len * width..(row + 1) * len * width]);
    }
    out
}

/// A random but internally consistent batch: row `i` holds `lengths[i]`
/// steps, question `q` belongs to concept `q % num_concepts`, and roughly
/// one MP dimension in five is absent.
pub fn random_batch<R: Rng + ?Sized>(
    rng: &mut R,
    lengths: &[usize],
    max_len: usize,
    num_questions: usize,
    num_concepts: usize,
) -> Batch {
    let n = lengths.len();
    let cells = n * max_len;
    let mut b = Batch {
        num_sequences: n,
        max_len,
        question_ids: vec![0; cells],
        concept_ids: vec![0; cells],
        correctness: vec![0.0; cells],
        mp_inputs: vec![0.0; cells * 8],
        step_mask: vec![0.0; cells],
        target_question_ids: vec![0; cells],
        target_concept_ids: vec![0; cells],
        targets_correct: vec![0.0; cells],
        targets_mp: vec![0.0; cells * 4],
        target_mp_mask: vec![0.0; cells * 4],
        valid_mask: vec![0.0; cells],
        sources: (0..n).map(|i| (format!("toy{i}"), 0)).collect(),
    };
    for (row, &len) in lengths.iter().enumerate() {
        assert!(len <= max_len, "row length exceeds max_len");
        let steps: Vec<(usize, f64, [f64; 8])> = (0..len)
            .map(|_| {
                let q = rng.random_range(0..num_questions);
                let r = rng.random_bool(0.5) as u8 as f64;
                let mut mp = [crate::dataset::MP_IMPUTE; 8];
                for d in 0..4 {
                    if rng.random_bool(0.8) {
                        let total = rng.random_range(2..=6u32);
                        mp[d] = rng.random_range(0..=total) as f64 / total as f64;
                        mp[4 + d] = 1.0;
                    } else {
                        mp[4 + d] = 0.0;
                    }
                }
                (q, r, mp)
            })
            .collect();
        for (t, &(q, r, mp)) in steps.iter().enumerate() {
            let cell = row * max_len + t;
            b.question_ids[cell] = q;
            b.concept_ids[cell] = q % num_concepts;
            b.correctness[cell] = r;
            b.step_mask[cell] = 1.0;
            b.mp_inputs[cell * 8..cell * 8 + 8].copy_from_slice(&mp);
            if let Some(&(nq, nr, nmp)) = steps.get(t + 1) {
                b.target_question_ids[cell] = nq;
                b.target_concept_ids[cell] = nq % num_concepts;
                b.targets_correct[cell] = nr;
                b.valid_mask[cell] = 1.0;
                for d in 0..4 {
                    if nmp[4 + d] > 0.0 {
                        b.targets_mp[cell * 4 + d] = nmp[d];
                        b.target_mp_mask[cell * 4 + d] = 1.0;
                    }
                }
            }
        }
    }
    b
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    params: BTreeMap<String, TensorRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl KtModel {
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let ModelConfig {
            embed_dim: d,
            num_questions: q,
            num_concepts: c,
            max_len: t,
            seed,
            ..
        } = config;
        let mut s = ParamStore::new();
        let question_emb = s.insert_normal("question_emb", &[q, d], EMBED_SCALE, seed)?;
        let concept_emb = s.insert_normal("concept_emb", &[c, d], EMBED_SCALE, seed)?;
        let response_emb = s.insert_normal("response_emb", &[2 * c, d], EMBED_SCALE, seed)?;
        let body = match config.backbone {
            Backbone::Recurrent => Body::Recurrent {
                w_ih: s.insert_uniform("lstm.w_ih", &[d, 4 * d], d, seed)?,
                w_hh: s.insert_uniform("lstm.w_hh", &[d, 4 * d], d, seed)?,
                b: s.insert_zeros("lstm.b", &[4 * d])?,
            },
            Backbone::Attention => {
                let pos = s.insert_normal("attn.pos_emb", &[t, d], EMBED_SCALE, seed)?;
                let mut lin = |name: &str| -> Result<(ParamId, ParamId), AutodiffError> {
                    Ok((
                        s.insert_uniform(&format!("{name}.w"), &[d, d], d, seed)?,
                        s.insert_zeros(&format!("{name}.b"), &[d])?,
                    ))
                };
                let proj = [lin("attn.q")?, lin("attn.k")?, lin("attn.v")?, lin("attn.o")?];
                let ffn = [lin("ffn.1")?, lin("ffn.2")?];
                Body::Attention { pos, proj, ffn }
            }
        };
        let readout_w = s.insert_uniform("readout.w", &[2 * d, d], 2 * d, seed)?;
        let readout_b = s.insert_zeros("readout.b", &[d])?;
        let head_w = s.insert_uniform("head.w", &[d, 1], d, seed)?;
        let head_b = s.insert_zeros("head.b", &[1])?;
        let (mp_proj, mp_head) = if config.variant == Variant::Statuskt {
            (
                Some((s.insert_uniform("mp_proj.w", &[8, d], 8, seed)?, s.insert_zeros("mp_proj.b", &[d])?)),
                Some((s.insert_uniform("mp_head.w", &[d, 4], d, seed)?, s.insert_zeros("mp_head.b", &[4])?)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            store: s,
            ids: Ids {
                question_emb,
                concept_emb,
                response_emb,
                readout_w,
                readout_b,
                head_w,
                head_b,
                mp_proj,
                mp_head,
                body,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Names of the MP-only parameters (empty for the original variant).
    pub fn mp_parameter_names(&self) -> Vec<&'static str> {
        match self.config.variant {
            Variant::Original => vec![],
            Variant::Statuskt => vec!["mp_proj.w", "mp_proj.b", "mp_head.w", "mp_head.b"],
        }
    }

    fn linear(&self, tape: &mut Tape, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Records the forward pass on `tape` using parameter values from
    /// `store`. Dropout is active only on a training tape.
    pub fn forward_vars<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<ForwardVars, ModelError> {
        let cfg = &self.config;
        if batch.max_len != cfg.max_len {
            return Err(ModelError::MaxLen {
                batch: batch.max_len,
                model: cfg.max_len,
            });
        }
        let n = batch.num_sequences;
        let len = batch.effective_len().max(1);
        let tr = |v: &[usize]| trim(v, n, batch.max_len, len, 1);
        let c = cfg.num_concepts;
        let d = cfg.embed_dim;

        let q_ids = tr(&batch.question_ids);
        let c_ids = tr(&batch.concept_ids);
        let corr = trim(&batch.correctness, n, batch.max_len, len, 1);
        let resp_ids: Vec<usize> = c_ids.iter().zip(&corr).map(|(&ci, &r)| ci + c * (r > 0.5) as usize).collect();
        let nq_ids = tr(&batch.target_question_ids);
        let nc_ids = tr(&batch.target_concept_ids);

        let qe = tape.param(store, self.ids.question_emb);
        let ke = tape.param(store, self.ids.concept_emb);
        let re = tape.param(store, self.ids.response_emb);
        let shape = [n, len];

        // interaction embedding e_t
        let e_q = tape.embedding(qe, &q_ids, &shape)?;
        let e_r = tape.embedding(re, &resp_ids, &shape)?;
        let mut e = tape.add(e_r, e_q)?;
        if let Some(proj) = self.ids.mp_proj {
            let mp = Tensor::new(vec![n, len, 8], trim(&batch.mp_inputs, n, batch.max_len, len, 8))?;
            let mp = tape.constant(mp);
            let m = self.linear(tape, store, mp, proj)?;
            e = tape.add(e, m)?;
        }

        // next-question embedding u_{t+1}
        let u_q = tape.embedding(qe, &nq_ids, &shape)?;
        let u_c = tape.embedding(ke, &nc_ids, &shape)?;
        let u = tape.add(u_q, u_c)?;

        let h = match &self.ids.body {
            Body::Recurrent { w_ih, w_hh, b } => self.lstm(tape, store, e, (*w_ih, *w_hh, *b), n, len, d)?,
            Body::Attention { pos, proj, ffn } => {
                self.attention(tape, store, e, u_q, *pos, proj, ffn, n, len, rng)?
            }
        };
        let h = tape.dropout(h, cfg.dropout, rng)?;

        let z = tape.concat(&[h, u], 2)?;
        let z = self.linear(tape, store, z, (self.ids.readout_w, self.ids.readout_b))?;
        let z = tape.relu(z);
        let z = tape.dropout(z, cfg.dropout, rng)?;

        let logit = self.linear(tape, store, z, (self.ids.head_w, self.ids.head_b))?;
        let logit = tape.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP);
        let r = tape.sigmoid(logit);
        let r = tape.reshape(r, &[n, len])?;

        let mp = match self.ids.mp_head {
            Some(head) => {
                let m = self.linear(tape, store, z, head)?;
                let m = tape.clamp(m, -LOGIT_CLAMP, LOGIT_CLAMP);
                Some(tape.sigmoid(m))
            }
            None => None,
        };
        Ok(ForwardVars { r, mp, len })
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        (w_ih, w_hh, b): (ParamId, ParamId, ParamId),
        n: usize,
        len: usize,
        d: usize,
    ) -> Result<Var, ModelError> {
        let w_ih = tape.param(store, w_ih);
        let w_hh = tape.param(store, w_hh);
        let b = tape.param(store, b);
        let xw = tape.matmul(e, w_ih)?;
        let xw = tape.add(xw, b)?;
        let mut h: Option<Var> = None;
        let mut cell: Option<Var> = None;
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let x_t = tape.slice(xw, 1, t, 1)?;
            let mut g = tape.reshape(x_t, &[n, 4 * d])?;
            if let Some(h) = h {
                let hw = tape.matmul(h, w_hh)?;
                g = tape.add(g, hw)?;
            }
            let i = tape.slice(g, 1, 0, d)?;
            let i = tape.sigmoid(i);
            let f = tape.slice(g, 1, d, d)?;
            let f = tape.sigmoid(f);
            let gg = tape.slice(g, 1, 2 * d, d)?;
            let gg = tape.tanh(gg);
            let o = tape.slice(g, 1, 3 * d, d)?;
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, gg)?;
            let c_new = match cell {
                Some(c) => {
                    let fc = tape.mul(f, c)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o, tc)?;
            outs.push(tape.reshape(h_new, &[n, 1, d])?);
            h = Some(h_new);
            cell = Some(c_new);
        }
        Ok(tape.concat(&outs, 1)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        query_emb: Var,
        pos: ParamId,
        proj: &[(ParamId, ParamId); 4],
        ffn: &[(ParamId, ParamId); 2],
        n: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let (d, heads) = (cfg.embed_dim, cfg.attention_heads);
        let dh = d / heads;
        let pos = tape.param(store, pos);
        let p = tape.slice(pos, 0, 0, len)?;
        let kv_in = tape.add(e, p)?;
        let q_in = tape.add(query_emb, p)?;

        let split_heads = |tape: &mut Tape, x: Var| -> Result<Var, ModelError> {
            let x = tape.reshape(x, &[n, len, heads, dh])?;
            Ok(tape.permute(x, &[0, 2, 1, 3])?)
        };
        let q = self.linear(tape, store, q_in, proj[0])?;
        let q = split_heads(tape, q)?;
        let k = self.linear(tape, store, kv_in, proj[1])?;
        let k = split_heads(tape, k)?;
        let v = self.linear(tape, store, kv_in, proj[2])?;
        let v = split_heads(tape, v)?;

        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mut mask = vec![0.0; len * len];
        for i in 0..len {
            for j in i + 1..len {
                mask[i * len + j] = MASK_NEG;
            }
        }
        let mask = tape.constant(Tensor::new(vec![len, len], mask)?);
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, len, d])?;
        let out = self.linear(tape, store, ctx, proj[3])?;
        let out = tape.dropout(out, cfg.dropout, rng)?;
        let x = tape.add(out, q_in)?;
        let x = tape.layer_norm(x, LN_EPS);

        let f = self.linear(tape, store, x, ffn[0])?;
        let f = tape.relu(f);
        let f = self.linear(tape, store, f, ffn[1])?;
        let f = tape.dropout(f, cfg.dropout, rng)?;
        let y = tape.add(f, x)?;
        Ok(tape.layer_norm(y, LN_EPS))
    }

    /// Inference-mode predictions padded back to `max_len` (padding = 0.5).
    pub fn predict(&self, batch: &Batch) -> Result<Predictions, ModelError> {
        let mut tape = Tape::with_training(false);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward_vars(&self.store, &mut tape, batch, &mut rng)?;
        let n = batch.num_sequences;
        let r_pred = pad(tape.value(out.r).data(), n, out.len, batch.max_len, 1, 0.5);
        let mp_pred = out
            .mp
            .map(|m| pad(tape.value(m).data(), n, out.len, batch.max_len, 4, 0.5));
        Ok(Predictions {
            num_sequences: n,
            max_len: batch.max_len,
            r_pred,
            mp_pred,
        })
    }

    /// Writes `{config, params, meta}` as JSON.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<(), ModelError> {
        let file = CheckpointFile {
            config: self.config.clone(),
            params: self.store.to_records(),
            meta,
        };
        let text = serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::build(file.config)?;
        model.store.load_records(&file.params)?;
        Ok((model, file.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(b: Backbone, v: Variant) -> ModelConfig {
        let mut c = ModelConfig::new(b, v, 7, 3);
        c.embed_dim = 8;
        c.attention_heads = 2;
        c.max_len = 6;
        c
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut c = ModelConfig::new(Backbone::Attention, Variant::Original, 5, 2);
        assert_eq!(c.head_dim(), 32);
        c.validate().unwrap();
        c.attention_heads = 7;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        c.backbone = Backbone::Recurrent;
        c.validate().unwrap();
        assert!("transformer".parse::<Backbone>().is_err());
        assert!("hybrid".parse::<Variant>().is_err());
        assert_eq!("StatusKT".parse::<Variant>().unwrap(), Variant::Statuskt);
    }

    #[test]
    fn trim_pad_round_trip() {
        let data: Vec<u32> = (0..2 * 4 * 2).collect();
        let t = trim(&data, 2, 4, 3, 2);
        assert_eq!(t, vec![0, 1, 2, 3, 4, 5, 8, 9, 10, 11, 12, 13]);
        let p = pad(&t, 2, 3, 4, 2, 99);
        assert_eq!(&p[..6], &data[..6]);
        assert_eq!(&p[6..8], &[99, 99]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        for b in Backbone::ALL {
            let m = KtModel::build(cfg(b, Variant::Statuskt)).unwrap();
            m.save(&path, serde_json::json!({"k": 1})).unwrap();
            let (back, meta) = KtModel::load(&path).unwrap();
            assert_eq!(meta["k"], 1);
            assert_eq!(back.config, m.config);
            assert_eq!(back.store.to_records(), m.store.to_records());
        }
    }
}
