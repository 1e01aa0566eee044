//! Interpretability tools: mean-attention maps over key positions,
//! LIME-style perturbation explanations, and hidden-state export.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::LktExample;
use crate::error::{Error, Result};
use crate::models::{predict_masked_correctness, LktModel};
use crate::numerics::Scalar;
use crate::tokenizer::{Vocabulary, PAD, RESERVED_TOKENS, UNK};

/// Per-key-position attention averaged over unpadded query positions.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionSummary {
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

/// For each key position j, the mean over unpadded query positions i of
/// `attention[i][j]` in the chosen layer and head. `[PAD]` keys score
/// exactly zero.
pub fn mean_attention<S: Scalar>(
    model: &LktModel<S>,
    token_ids: &[u32],
    layer: usize,
    head: usize,
    vocab: &Vocabulary,
) -> Result<AttentionSummary> {
    if layer >= model.config.num_layers {
        return Err(Error::IndexOutOfRange {
            index: layer,
            bound: model.config.num_layers,
        });
    }
    if head >= model.config.num_heads {
        return Err(Error::IndexOutOfRange {
            index: head,
            bound: model.config.num_heads,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(token_ids, false, &mut rng)?;
    let attn = out.attention_matrix(layer, head)?;
    let len = token_ids.len();
    let queries: Vec<usize> = (0..len).filter(|&i| token_ids[i] != PAD).collect();
    if queries.is_empty() {
        return Err(Error::InvalidArgument("all positions are padding".into()));
    }
    let mut scores = vec![0.0; len];
    for &qi in &queries {
        for (kj, slot) in scores.iter_mut().enumerate() {
            *slot += attn[qi * len + kj];
        }
    }
    let inv = 1.0 / queries.len() as f64;
    for s in &mut scores {
        *s *= inv;
    }
    let tokens = token_ids
        .iter()
        .map(|&t| vocab.token(t).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionSummary {
        layer,
        head,
        tokens,
        scores,
    })
}

/// Local surrogate explanation: signed weight per perturbable token.
#[derive(Clone, Debug, Serialize)]
pub struct Explanation {
    /// Positions of the perturbable tokens, aligned with `weights`.
    pub token_positions: Vec<usize>,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Weighted R² of the local linear fit.
    pub r_squared: f64,
    pub num_samples: usize,
    pub kernel_width: f64,
}

const RIDGE_LAMBDA: f64 = 1e-3;

/// Explain one masked-correctness prediction by sampling token-presence
/// perturbations (absent tokens become `[UNK]`), querying the scorer,
/// and fitting a kernel-weighted ridge regression on the presence
/// indicators. Perturbable tokens are all non-special tokens; the target
/// `[MASK]` and other special tokens are never perturbed and are absent
/// from the output.
pub fn lime_explain<F>(
    scorer: F,
    token_ids: &[u32],
    target_mask_position: usize,
    vocab: &Vocabulary,
    num_samples: usize,
    kernel_width: Option<f64>,
    seed: u64,
) -> Result<Explanation>
where
    F: Fn(&[u32]) -> Result<f64>,
{
    if target_mask_position >= token_ids.len()
        || token_ids[target_mask_position] != crate::tokenizer::MASK
    {
        return Err(Error::InvalidArgument(format!(
            "target position {target_mask_position} does not hold a [MASK] token"
        )));
    }
    if num_samples < 50 {
        return Err(Error::InvalidArgument(format!(
            "num_samples must be ≥ 50, got {num_samples}"
        )));
    }
    let reserved = RESERVED_TOKENS.len() as u32;
    let perturbable: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter(|&(i, &t)| t >= reserved && i != target_mask_position)
        .map(|(i, _)| i)
        .collect();
    let p = perturbable.len();
    if p == 0 {
        return Err(Error::DegenerateDesign);
    }
    let kw = kernel_width.unwrap_or(0.75 * (p as f64).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut design: Vec<Vec<f64>> = Vec::with_capacity(num_samples);
    let mut responses: Vec<f64> = Vec::with_capacity(num_samples);
    let mut weights: Vec<f64> = Vec::with_capacity(num_samples);
    for sample in 0..num_samples {
        // keep the unperturbed instance in the sample set
        let z: Vec<bool> = if sample == 0 {
            vec![true; p]
        } else {
            (0..p).map(|_| rng.gen::<bool>()).collect()
        };
        let mut perturbed = token_ids.to_vec();
        let mut removed = 0usize;
        for (&pos, &keep) in perturbable.iter().zip(&z) {
            if !keep {
                perturbed[pos] = UNK;
                removed += 1;
            }
        }
        let y = scorer(&perturbed)?;
        let dist = removed as f64;
        design.push(z.iter().map(|&b| f64::from(u8::from(b))).collect());
        responses.push(y);
        weights.push((-(dist * dist) / (kw * kw)).exp());
    }

    if design.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateDesign);
    }

    // weighted ridge on [1 | Z]; the intercept is not regularized
    let cols = p + 1;
    let mut xtwx = DMatrix::<f64>::zeros(cols, cols);
    let mut xtwy = DVector::<f64>::zeros(cols);
    for ((z, &y), &w) in design.iter().zip(&responses).zip(&weights) {
        let mut row = Vec::with_capacity(cols);
        row.push(1.0);
        row.extend_from_slice(z);
        for a in 0..cols {
            for b in 0..cols {
                xtwx[(a, b)] += w * row[a] * row[b];
            }
            xtwy[a] += w * row[a] * y;
        }
    }
    for i in 1..cols {
        xtwx[(i, i)] += RIDGE_LAMBDA;
    }
    let beta = xtwx
        .lu()
        .solve(&xtwy)
        .ok_or(Error::DegenerateDesign)?;

    // weighted R²
    let wsum: f64 = weights.iter().sum();
    let ybar: f64 = responses
        .iter()
        .zip(&weights)
        .map(|(&y, &w)| w * y)
        .sum::<f64>()
        / wsum;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for ((z, &y), &w) in design.iter().zip(&responses).zip(&weights) {
        let mut pred = beta[0];
        for (j, &zj) in z.iter().enumerate() {
            pred += beta[j + 1] * zj;
        }
        ss_res += w * (y - pred) * (y - pred);
        ss_tot += w * (y - ybar) * (y - ybar);
    }
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let tokens = perturbable
        .iter()
        .map(|&i| vocab.token(token_ids[i]).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    Ok(Explanation {
        token_positions: perturbable,
        tokens,
        weights: beta.as_slice()[1..].to_vec(),
        intercept: beta[0],
        r_squared,
        num_samples,
        kernel_width: kw,
    })
}

/// Wrap an encoder as a LIME scorer: the correctness probability at one
/// mask position.
pub fn model_scorer<'a, S: Scalar>(
    model: &'a LktModel<S>,
    target_mask_position: usize,
) -> impl Fn(&[u32]) -> Result<f64> + 'a {
    move |tokens: &[u32]| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = model.forward(tokens, false, &mut rng)?;
        let pred = predict_masked_correctness(&mut out, &[target_mask_position])?;
        Ok(pred.probs[0])
    }
}

/// Spearman rank correlation between two equal-length vectors.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length vectors of size ≥ 2".into(),
        ));
    }
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let n = xs.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("no NaN"));
        let mut out = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n && xs[idx[j]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + 1 + j) as f64 / 2.0;
            for &k in &idx[i..j] {
                out[k] = avg;
            }
            i = j;
        }
        out
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let mean = (a.len() + 1) as f64 / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::DegenerateDesign);
    }
    Ok(num / (da * db).sqrt())
}

/// Which hidden state a row of the embedding export reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionRule {
    /// The example's first `[MASK]` position.
    MaskPosition,
    /// Position 0.
    Cls,
}

impl std::str::FromStr for PositionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" | "mask_position" => Ok(PositionRule::MaskPosition),
            "cls" => Ok(PositionRule::Cls),
            other => Err(Error::InvalidArgument(format!(
                "position rule must be mask or cls, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingRow {
    pub student_id: String,
    pub vector: Vec<f64>,
    pub prediction: f64,
}

/// Final-layer hidden state at the chosen position for each example,
/// paired with the predicted correctness at the example's first mask.
pub fn export_embeddings<S: Scalar>(
    model: &LktModel<S>,
    examples: &[LktExample],
    rule: PositionRule,
) -> Result<Vec<EmbeddingRow>> {
    examples
        .iter()
        .map(|ex| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut out = model.forward(&ex.token_ids, false, &mut rng)?;
            let pred = predict_masked_correctness(&mut out, &ex.mask_positions)?;
            let position = match rule {
                PositionRule::MaskPosition => ex.mask_positions[0],
                PositionRule::Cls => 0,
            };
            Ok(EmbeddingRow {
                student_id: ex.student_id.clone(),
                vector: out.hidden_row(position)?,
                prediction: pred.probs[0],
            })
        })
        .collect()
}

pub fn write_embeddings_csv(path: &std::path::Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        let mut record = vec![row.student_id.clone()];
        record.extend(row.vector.iter().map(ToString::to_string));
        record.push(row.prediction.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
