//! Compact pre-norm transformer encoder over interaction text, with a
//! scalar correctness head for masked-response prediction and a
//! vocabulary head for masked-token pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_parameters, init_ones, init_weight, init_zeros, load_checkpoint, save_checkpoint,
    ParamModel, LN_EPS,
};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, ValueId};
use crate::tokenizer::{MASK, PAD, RESERVED_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadType {
    /// Scalar correctness logit per position.
    Response,
    /// Vocabulary logits per position for masked-token pretraining.
    Mlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LktConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub head_type: HeadType,
}

impl LktConfig {
    /// Desk-scale defaults.
    pub fn small(vocab_size: usize) -> Self {
        LktConfig {
            vocab_size,
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            d_ff: 256,
            max_len: 512,
            dropout_p: 0.1,
            head_type: HeadType::Response,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads)
        {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_len < 8 {
            return Err(Error::InvalidArgument(format!(
                "max_len must be ≥ 8, got {}",
                self.max_len
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab_size must exceed the reserved tokens, got {}",
                self.vocab_size
            )));
        }
        if self.num_layers == 0 || self.d_ff == 0 {
            return Err(Error::InvalidArgument(
                "num_layers and d_ff must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer<S> {
    wq: Tensor<S>,
    bq: Tensor<S>,
    wk: Tensor<S>,
    bk: Tensor<S>,
    wv: Tensor<S>,
    bv: Tensor<S>,
    wo: Tensor<S>,
    bo: Tensor<S>,
    ln1_gain: Tensor<S>,
    ln1_bias: Tensor<S>,
    ln2_gain: Tensor<S>,
    ln2_bias: Tensor<S>,
    ff1_w: Tensor<S>,
    ff1_b: Tensor<S>,
    ff2_w: Tensor<S>,
    ff2_b: Tensor<S>,
}

/// Encoder parameters. Holds both heads; `config.head_type` selects which
/// one `forward` applies.
#[derive(Clone, Debug)]
pub struct LktModel<S> {
    pub config: LktConfig,
    token_embedding: Tensor<S>,
    position_embedding: Tensor<S>,
    layers: Vec<EncoderLayer<S>>,
    final_ln_gain: Tensor<S>,
    final_ln_bias: Tensor<S>,
    response_w: Tensor<S>,
    response_b: Tensor<S>,
    mlm_w: Tensor<S>,
    mlm_b: Tensor<S>,
}

const PARAMS_PER_LAYER: usize = 16;

impl<S: Scalar> LktModel<S> {
    /// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm
    /// gains; deterministic per seed.
    pub fn init(config: &LktConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, ff) = (config.vocab_size, config.d_model, config.d_ff);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                wq: init_weight(vec![d, d], &mut rng),
                bq: init_zeros(vec![d]),
                wk: init_weight(vec![d, d], &mut rng),
                bk: init_zeros(vec![d]),
                wv: init_weight(vec![d, d], &mut rng),
                bv: init_zeros(vec![d]),
                wo: init_weight(vec![d, d], &mut rng),
                bo: init_zeros(vec![d]),
                ln1_gain: init_ones(vec![d]),
                ln1_bias: init_zeros(vec![d]),
                ln2_gain: init_ones(vec![d]),
                ln2_bias: init_zeros(vec![d]),
                ff1_w: init_weight(vec![d, ff], &mut rng),
                ff1_b: init_zeros(vec![ff]),
                ff2_w: init_weight(vec![ff, d], &mut rng),
                ff2_b: init_zeros(vec![d]),
            })
            .collect();
        Ok(LktModel {
            config: config.clone(),
            token_embedding: init_weight(vec![v, d], &mut rng),
            position_embedding: init_weight(vec![config.max_len, d], &mut rng),
            layers,
            final_ln_gain: init_ones(vec![d]),
            final_ln_bias: init_zeros(vec![d]),
            response_w: init_weight(vec![d, 1], &mut rng),
            response_b: init_zeros(vec![1]),
            mlm_w: init_weight(vec![d, v], &mut rng),
            mlm_b: init_zeros(vec![v]),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({"kind": "lkt", "dtype": S::DTYPE, "config": self.config});
        let named = self.named_parameters();
        save_checkpoint(path, &meta, &named)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, tensors) = load_checkpoint::<S>(path)?;
        if meta["kind"] != "lkt" {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint kind {} is not an encoder checkpoint",
                meta["kind"]
            )));
        }
        let config: LktConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Self::init(&config, 0)?;
        assign_parameters(&mut model, tensors)?;
        Ok(model)
    }

    /// Zero a tensor in place (test and diagnostics hook).
    pub fn zero_parameter(&mut self, name: &str) -> Result<()> {
        for (n, t) in self.named_parameters_mut() {
            if n == name {
                t.data_mut().fill(S::zero());
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("no parameter named {name}")))
    }

    /// Run the encoder over one token sequence. `[PAD]` keys are excluded
    /// from attention via an additive mask and the per-head attention
    /// matrices stay available on the tape.
    pub fn forward(
        &self,
        token_ids: &[u32],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<S>> {
        if token_ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if token_ids.len() > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                token_ids.len(),
                self.config.max_len
            )));
        }
        let len = token_ids.len();
        let d = self.config.d_model;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let p = self.config.dropout_p;
        let key_pad: Vec<bool> = token_ids.iter().map(|&t| t == PAD).collect();
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..len).collect();

        let mut tape = Tape::new();
        let named = self.named_parameters();
        let param_ids: Vec<ValueId> = named
            .iter()
            .map(|(_, t)| tape.leaf((*t).clone()))
            .collect();
        let pid = |idx: usize| param_ids[idx];

        let tok = tape.embedding_lookup(pid(0), &ids)?;
        let pos = tape.embedding_lookup(pid(1), &positions)?;
        let sum = tape.add(tok, pos)?;
        let mut x = tape.dropout(sum, p, rng, training)?;

        let mut attention = Vec::with_capacity(self.config.num_layers);
        for layer in 0..self.config.num_layers {
            let base = 2 + layer * PARAMS_PER_LAYER;
            let ln1 = tape.layer_norm(x, pid(base + 8), pid(base + 9), LN_EPS)?;
            let q_all = tape.matmul(ln1, pid(base))?;
            let q_all = tape.add_bias_rows(q_all, pid(base + 1))?;
            let k_all = tape.matmul(ln1, pid(base + 2))?;
            let k_all = tape.add_bias_rows(k_all, pid(base + 3))?;
            let v_all = tape.matmul(ln1, pid(base + 4))?;
            let v_all = tape.add_bias_rows(v_all, pid(base + 5))?;

            let mut head_ctx = Vec::with_capacity(heads);
            let mut head_attn = Vec::with_capacity(heads);
            for h in 0..heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q_all, lo, hi)?;
                let kh = tape.slice_cols(k_all, lo, hi)?;
                let vh = tape.slice_cols(v_all, lo, hi)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let scores = tape.add_key_mask(scores, &key_pad)?;
                let attn = tape.softmax_rows(scores)?;
                head_attn.push(attn);
                let attn_d = tape.dropout(attn, p, rng, training)?;
                head_ctx.push(tape.matmul(attn_d, vh)?);
            }
            attention.push(head_attn);

            let ctx = tape.concat_cols(&head_ctx)?;
            let proj = tape.matmul(ctx, pid(base + 6))?;
            let proj = tape.add_bias_rows(proj, pid(base + 7))?;
            let proj = tape.dropout(proj, p, rng, training)?;
            x = tape.add(x, proj)?;

            let ln2 = tape.layer_norm(x, pid(base + 10), pid(base + 11), LN_EPS)?;
            let ff = tape.matmul(ln2, pid(base + 12))?;
            let ff = tape.add_bias_rows(ff, pid(base + 13))?;
            let ff = tape.gelu(ff)?;
            let ff = tape.matmul(ff, pid(base + 14))?;
            let ff = tape.add_bias_rows(ff, pid(base + 15))?;
            let ff = tape.dropout(ff, p, rng, training)?;
            x = tape.add(x, ff)?;
        }

        let head_base = 2 + self.config.num_layers * PARAMS_PER_LAYER;
        // final norm keeps the pre-norm residual stream well-scaled for
        // the heads
        x = tape.layer_norm(x, pid(head_base), pid(head_base + 1), LN_EPS)?;
        let logits = match self.config.head_type {
            HeadType::Response => {
                let l = tape.matmul(x, pid(head_base + 2))?;
                tape.add_bias_rows(l, pid(head_base + 3))?
            }
            HeadType::Mlm => {
                let l = tape.matmul(x, pid(head_base + 4))?;
                tape.add_bias_rows(l, pid(head_base + 5))?
            }
        };

        Ok(ForwardOutput {
            tape,
            token_ids: token_ids.to_vec(),
            hidden: x,
            logits,
            attention,
            param_ids,
            head_type: self.config.head_type,
        })
    }
}

impl<S: Scalar> ParamModel<S> for LktModel<S> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer{i}.wq"), &l.wq),
                (format!("layer{i}.bq"), &l.bq),
                (format!("layer{i}.wk"), &l.wk),
                (format!("layer{i}.bk"), &l.bk),
                (format!("layer{i}.wv"), &l.wv),
                (format!("layer{i}.bv"), &l.bv),
                (format!("layer{i}.wo"), &l.wo),
                (format!("layer{i}.bo"), &l.bo),
                (format!("layer{i}.ln1_gain"), &l.ln1_gain),
                (format!("layer{i}.ln1_bias"), &l.ln1_bias),
                (format!("layer{i}.ln2_gain"), &l.ln2_gain),
                (format!("layer{i}.ln2_bias"), &l.ln2_bias),
                (format!("layer{i}.ff1_w"), &l.ff1_w),
                (format!("layer{i}.ff1_b"), &l.ff1_b),
                (format!("layer{i}.ff2_w"), &l.ff2_w),
                (format!("layer{i}.ff2_b"), &l.ff2_b),
            ]);
        }
        out.extend([
            ("final_ln_gain".to_string(), &self.final_ln_gain),
            ("final_ln_bias".to_string(), &self.final_ln_bias),
            ("response_w".to_string(), &self.response_w),
            ("response_b".to_string(), &self.response_b),
            ("mlm_w".to_string(), &self.mlm_w),
            ("mlm_b".to_string(), &self.mlm_b),
        ]);
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend([
                (format!("layer{i}.wq"), &mut l.wq),
                (format!("layer{i}.bq"), &mut l.bq),
                (format!("layer{i}.wk"), &mut l.wk),
                (format!("layer{i}.bk"), &mut l.bk),
                (format!("layer{i}.wv"), &mut l.wv),
                (format!("layer{i}.bv"), &mut l.bv),
                (format!("layer{i}.wo"), &mut l.wo),
                (format!("layer{i}.bo"), &mut l.bo),
                (format!("layer{i}.ln1_gain"), &mut l.ln1_gain),
                (format!("layer{i}.ln1_bias"), &mut l.ln1_bias),
                (format!("layer{i}.ln2_gain"), &mut l.ln2_gain),
                (format!("layer{i}.ln2_bias"), &mut l.ln2_bias),
                (format!("layer{i}.ff1_w"), &mut l.ff1_w),
                (format!("layer{i}.ff1_b"), &mut l.ff1_b),
                (format!("layer{i}.ff2_w"), &mut l.ff2_w),
                (format!("layer{i}.ff2_b"), &mut l.ff2_b),
            ]);
        }
        out.extend([
            ("final_ln_gain".to_string(), &mut self.final_ln_gain),
            ("final_ln_bias".to_string(), &mut self.final_ln_bias),
            ("response_w".to_string(), &mut self.response_w),
            ("response_b".to_string(), &mut self.response_b),
            ("mlm_w".to_string(), &mut self.mlm_w),
            ("mlm_b".to_string(), &mut self.mlm_b),
        ]);
        out
    }
}

/// Everything produced by one encoder pass: the tape (for backward), the
/// per-position logits, per-layer per-head attention, and final hidden
/// states.
pub struct ForwardOutput<S> {
    pub tape: Tape<S>,
    pub token_ids: Vec<u32>,
    pub hidden: ValueId,
    pub logits: ValueId,
    /// `attention[layer][head]` is an `[L, L]` row-stochastic matrix over
    /// unpadded keys.
    pub attention: Vec<Vec<ValueId>>,
    /// Parameter leaves in `named_parameters` order.
    pub param_ids: Vec<ValueId>,
    head_type: HeadType,
}

impl<S: Scalar> ForwardOutput<S> {
    /// Gradients for all parameters in `named_parameters` order; zero
    /// tensors for parameters backward never reached.
    pub fn param_grads(&self) -> Vec<Tensor<S>> {
        self.param_ids
            .iter()
            .map(|&id| {
                let shape = self.tape.value(id).shape().to_vec();
                match self.tape.grad(id) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape matches"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }

    /// Attention matrix values for one layer/head.
    pub fn attention_matrix(&self, layer: usize, head: usize) -> Result<Vec<f64>> {
        let row = self
            .attention
            .get(layer)
            .ok_or(Error::IndexOutOfRange {
                index: layer,
                bound: self.attention.len(),
            })?;
        let id = row.get(head).ok_or(Error::IndexOutOfRange {
            index: head,
            bound: row.len(),
        })?;
        Ok(self.tape.value(*id).to_f64_vec())
    }

    /// Final hidden state of one position.
    pub fn hidden_row(&self, position: usize) -> Result<Vec<f64>> {
        let t = self.tape.value(self.hidden);
        let (rows, d) = t.dims2()?;
        if position >= rows {
            return Err(Error::IndexOutOfRange {
                index: position,
                bound: rows,
            });
        }
        Ok(t.data()[position * d..(position + 1) * d]
            .iter()
            .map(|v| v.to_f64())
            .collect())
    }
}

/// Sigmoid correctness probabilities extracted at `[MASK]` positions.
pub struct MaskedPrediction {
    pub probs_id: ValueId,
    pub probs: Vec<f64>,
}

/// Read the correctness probability at each masked position:
/// `sigmoid` of the scalar response logit at that position.
pub fn predict_masked_correctness<S: Scalar>(
    out: &mut ForwardOutput<S>,
    mask_positions: &[usize],
) -> Result<MaskedPrediction> {
    if out.head_type != HeadType::Response {
        return Err(Error::InvalidArgument(
            "masked-correctness prediction requires the response head".into(),
        ));
    }
    if mask_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    for &pos in mask_positions {
        if pos >= out.token_ids.len() || out.token_ids[pos] != MASK {
            return Err(Error::InvalidArgument(format!(
                "position {pos} does not hold a [MASK] token"
            )));
        }
    }
    let rows = out.tape.embedding_lookup(out.logits, mask_positions)?;
    let probs_id = out.tape.sigmoid(rows)?;
    let probs = out.tape.value(probs_id).to_f64_vec();
    Ok(MaskedPrediction { probs_id, probs })
}

/// Binary cross-entropy of masked-correctness predictions against the
/// original labels.
pub fn lkt_loss<S: Scalar>(
    out: &mut ForwardOutput<S>,
    pred: &MaskedPrediction,
    labels: &[u8],
) -> Result<ValueId> {
    let labels: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    out.tape.bce_loss(pred.probs_id, &labels)
}

// ── masked-token pretraining ────────────────────────────────────────

/// One pretraining example: a token sequence with some tokens masked and
/// the original ids to recover.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmExample {
    pub token_ids: Vec<u32>,
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<u32>,
}

/// Standard masked-token corruption over plain text: each non-reserved
/// token is selected at the given rate; selected tokens become `[MASK]`
/// 80% of the time, a random token 10%, and stay unchanged 10%.
pub fn build_mlm_example(
    token_ids: &[u32],
    rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<MlmExample> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate must be in (0, 1), got {rate}"
        )));
    }
    let reserved = RESERVED_TOKENS.len() as u32;
    let candidates: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t >= reserved)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if selected.is_empty() {
        selected.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut corrupted = token_ids.to_vec();
    let mut target_ids = Vec::with_capacity(selected.len());
    for &pos in &selected {
        target_ids.push(token_ids[pos]);
        let roll = rng.gen::<f64>();
        if roll < 0.8 {
            corrupted[pos] = MASK;
        } else if roll < 0.9 {
            corrupted[pos] = rng.gen_range(reserved..vocab_size as u32);
        }
    }
    Ok(MlmExample {
        token_ids: corrupted,
        target_positions: selected,
        target_ids,
    })
}

/// Cross-entropy over the vocabulary at the masked positions of one
/// example; returns the loss node for backprop plus its value.
pub fn mlm_forward_loss<S: Scalar>(
    model: &LktModel<S>,
    example: &MlmExample,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardOutput<S>, ValueId, f64)> {
    if model.config.head_type != HeadType::Mlm {
        return Err(Error::InvalidArgument(
            "masked-token loss requires the mlm head".into(),
        ));
    }
    if example.target_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let mut out = model.forward(&example.token_ids, training, rng)?;
    let rows = out.tape.embedding_lookup(out.logits, &example.target_positions)?;
    let targets: Vec<usize> = example.target_ids.iter().map(|&t| t as usize).collect();
    let loss = out.tape.cross_entropy_rows(rows, &targets)?;
    let value = out.tape.value(loss).item()?.to_f64();
    Ok((out, loss, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use crate::tokenizer::{CLS, EOS};

    fn tiny_config() -> LktConfig {
        LktConfig {
            vocab_size: 20,
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            d_ff: 32,
            max_len: 16,
            dropout_p: 0.0,
            head_type: HeadType::Response,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let cfg = tiny_config();
        let a = LktModel::<f64>::init(&cfg, 7).unwrap();
        let b = LktModel::<f64>::init(&cfg, 7).unwrap();
        for ((na, ta), (_, tb)) in a.named_parameters().iter().zip(b.named_parameters()) {
            assert_eq!(ta.data(), tb.data(), "{na}");
            if na.contains("gain") {
                assert!(ta.data().iter().all(|&v| v == 1.0));
            }
        }
        let c = LktModel::<f64>::init(&cfg, 8).unwrap();
        assert_ne!(
            a.named_parameters()[0].1.data(),
            c.named_parameters()[0].1.data()
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.max_len = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn minimal_two_token_sequence_runs() {
        let model = LktModel::<f64>::init(&tiny_config(), 1).unwrap();
        let out = model.forward(&[CLS, EOS], false, &mut rng()).unwrap();
        assert_eq!(out.tape.value(out.logits).shape(), &[2, 1]);
        assert_eq!(out.tape.value(out.hidden).shape(), &[2, 16]);
    }

    #[test]
    fn forward_is_pure_without_dropout() {
        let model = LktModel::<f64>::init(&tiny_config(), 1).unwrap();
        let tokens = [CLS, 8, 9, MASK, EOS];
        let a = model.forward(&tokens, false, &mut rng()).unwrap();
        let b = model.forward(&tokens, false, &mut rng()).unwrap();
        assert_eq!(
            a.tape.value(a.logits).data(),
            b.tape.value(b.logits).data()
        );
    }

    #[test]
    fn pad_positions_receive_zero_attention() {
        let model = LktModel::<f64>::init(&tiny_config(), 1).unwrap();
        let tokens = [CLS, 8, 9, 10, EOS, PAD, PAD, PAD];
        let out = model.forward(&tokens, false, &mut rng()).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let attn = out.attention_matrix(layer, head).unwrap();
                for qi in 0..5 {
                    for kj in 5..8 {
                        assert_eq!(attn[qi * 8 + kj], 0.0);
                    }
                    let row_sum: f64 = (0..8).map(|kj| attn[qi * 8 + kj]).sum();
                    assert!((row_sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn predictions_invariant_to_padding_length() {
        let model = LktModel::<f64>::init(&tiny_config(), 1).unwrap();
        let base = [CLS, 8, MASK, 9, EOS];
        let padded = [CLS, 8, MASK, 9, EOS, PAD, PAD, PAD, PAD];
        let mut a = model.forward(&base, false, &mut rng()).unwrap();
        let mut b = model.forward(&padded, false, &mut rng()).unwrap();
        let pa = predict_masked_correctness(&mut a, &[2]).unwrap();
        let pb = predict_masked_correctness(&mut b, &[2]).unwrap();
        assert!((pa.probs[0] - pb.probs[0]).abs() < 1e-12);
    }

    #[test]
    fn zeroed_response_head_predicts_half() {
        let mut model = LktModel::<f64>::init(&tiny_config(), 1).unwrap();
        model.zero_parameter("response_w").unwrap();
        let mut out = model.forward(&[CLS, MASK, EOS], false, &mut rng()).unwrap();
        let pred = predict_masked_correctness(&mut out, &[1]).unwrap();
        assert_eq!(pred.probs, vec![0.5]);
    }

    #[test]
    fn predictions_are_probabilities_and_positions_are_checked() {
        let model = LktModel::<f64>::init(&tiny_config(), 3).unwrap();
        let tokens = [CLS, 8, MASK, 9, MASK, EOS];
        let mut out = model.forward(&tokens, false, &mut rng()).unwrap();
        let pred = predict_masked_correctness(&mut out, &[2, 4]).unwrap();
        assert!(pred.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(predict_masked_correctness(&mut out, &[1]).is_err());
        assert!(predict_masked_correctness(&mut out, &[99]).is_err());
    }

    #[test]
    fn rejects_overlong_sequences() {
        let model = LktModel::<f64>::init(&tiny_config(), 1).unwrap();
        let tokens = vec![8u32; 17];
        assert!(model.forward(&tokens, false, &mut rng()).is_err());
    }

    #[test]
    fn mlm_uniform_logits_loss_is_ln_v() {
        let mut cfg = tiny_config();
        cfg.head_type = HeadType::Mlm;
        let mut model = LktModel::<f64>::init(&cfg, 1).unwrap();
        model.zero_parameter("mlm_w").unwrap();
        model.zero_parameter("mlm_b").unwrap();
        let ex = MlmExample {
            token_ids: vec![CLS, MASK, 9, EOS],
            target_positions: vec![1],
            target_ids: vec![8],
        };
        let (_, _, loss) = mlm_forward_loss(&model, &ex, false, &mut rng()).unwrap();
        assert!((loss - (20f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn mlm_masking_statistics() {
        let tokens: Vec<u32> = (7..107).collect();
        let mut masked = 0;
        let mut random = 0;
        let mut kept = 0;
        for seed in 0..50 {
            let ex = build_mlm_example(&tokens, 0.15, 200, seed).unwrap();
            for (&pos, &orig) in ex.target_positions.iter().zip(&ex.target_ids) {
                assert_eq!(orig, tokens[pos]);
                match ex.token_ids[pos] {
                    MASK => masked += 1,
                    t if t == orig => kept += 1,
                    _ => random += 1,
                }
            }
        }
        let total = (masked + random + kept) as f64;
        assert!(total > 400.0);
        assert!((masked as f64 / total - 0.8).abs() < 0.1);
        assert!((random as f64 / total) < 0.2);
        assert!((kept as f64 / total) < 0.2);
    }

    #[test]
    fn checkpoint_save_load_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = LktModel::<f32>::init(&tiny_config(), 11).unwrap();
        model.save(&path).unwrap();
        let loaded = LktModel::<f32>::load(&path).unwrap();
        let tokens = [CLS, 8, MASK, EOS];
        let a = model.forward(&tokens, false, &mut rng()).unwrap();
        let b = loaded.forward(&tokens, false, &mut rng()).unwrap();
        assert_eq!(a.tape.value(a.logits).data(), b.tape.value(b.logits).data());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = LktConfig {
            vocab_size: 12,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            d_ff: 12,
            max_len: 8,
            dropout_p: 0.0,
            head_type: HeadType::Response,
        };
        // check at a healthy parameter scale: near init the final norm
        // sits on a tiny-variance stream whose curvature dominates the
        // h^2 truncation error of the oracle itself
        let mut model = LktModel::<f64>::init(&cfg, 5).unwrap();
        for (name, t) in model.named_parameters_mut() {
            if !name.contains("ln") && !name.contains("_b") {
                for v in t.data_mut().iter_mut() {
                    *v *= 5.0;
                }
            }
        }
        let tokens = [CLS, 8, MASK, 9, MASK, EOS];
        let positions = [2usize, 4];
        let labels = [1u8, 0];

        let loss_of = |m: &LktModel<f64>| -> f64 {
            let mut out = m.forward(&tokens, false, &mut rng()).unwrap();
            let pred = predict_masked_correctness(&mut out, &positions).unwrap();
            let loss = lkt_loss(&mut out, &pred, &labels).unwrap();
            out.tape.value(loss).item().unwrap()
        };

        let mut out = model.forward(&tokens, false, &mut rng()).unwrap();
        let pred = predict_masked_correctness(&mut out, &positions).unwrap();
        let loss = lkt_loss(&mut out, &pred, &labels).unwrap();
        out.tape.backward(loss).unwrap();
        let grads = out.param_grads();

        let named: Vec<String> = model
            .named_parameters()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (p_idx, name) in named.iter().enumerate() {
            let base = model.named_parameters()[p_idx].1.to_f64_vec();
            let numeric = gradcheck::finite_difference(
                &|vals: &[f64]| {
                    let mut mm = model.clone();
                    let (_, t) = &mut mm.named_parameters_mut()[p_idx];
                    for (slot, &v) in t.data_mut().iter_mut().zip(vals) {
                        *slot = v;
                    }
                    loss_of(&mm)
                },
                &base,
                1e-4,
            );
            let analytic = grads[p_idx].to_f64_vec();
            let err = gradcheck::max_rel_error(&analytic, &numeric);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
    }
}
