//! Recurrent knowledge-tracing baseline: an LSTM-style cell over one-hot
//! (question, response) input indices with a per-question sigmoid output.
//!
//! Question indices outside the training map encode as a sentinel. A
//! sentinel input carries no information, so it leaves the recurrent
//! state untouched and its prediction is read from a dedicated output
//! slot; on a fully unseen question set every prediction is therefore an
//! identical prior and ranking metrics degenerate to chance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_parameters, init_weight, init_zeros, load_checkpoint, save_checkpoint, ParamModel,
};
use crate::dataset::{dkt_input_index, DktExample, QuestionIndexMap};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, ValueId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DktConfig {
    pub num_questions: usize,
    pub hidden: usize,
}

impl DktConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_questions == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "num_questions and hidden must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DktModel<S> {
    pub config: DktConfig,
    pub questions: QuestionIndexMap,
    /// Input rows, one per (question, response) pair: `[2Q, 4h]`.
    wx: Tensor<S>,
    /// Recurrent weights `[h, 4h]`.
    uh: Tensor<S>,
    /// Gate bias `[4h]`.
    b: Tensor<S>,
    /// Output projection `[h, Q+1]`; the last column is the sentinel slot.
    w_out: Tensor<S>,
    b_out: Tensor<S>,
}

impl<S: Scalar> DktModel<S> {
    pub fn init(questions: QuestionIndexMap, hidden: usize, seed: u64) -> Result<Self> {
        let config = DktConfig {
            num_questions: questions.len(),
            hidden,
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = config.num_questions;
        let h = hidden;
        Ok(DktModel {
            config,
            questions,
            wx: init_weight(vec![2 * q, 4 * h], &mut rng),
            uh: init_weight(vec![h, 4 * h], &mut rng),
            b: init_zeros(vec![4 * h]),
            w_out: init_weight(vec![h, q + 1], &mut rng),
            b_out: init_zeros(vec![q + 1]),
        })
    }

    pub fn sentinel(&self) -> usize {
        self.config.num_questions
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "dkt",
            "dtype": S::DTYPE,
            "config": self.config,
            "questions": self.questions.ids(),
        });
        save_checkpoint(path, &meta, &self.named_parameters())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, tensors) = load_checkpoint::<S>(path)?;
        if meta["kind"] != "dkt" {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint kind {} is not a recurrent-baseline checkpoint",
                meta["kind"]
            )));
        }
        let config: DktConfig = serde_json::from_value(meta["config"].clone())?;
        let ids: Vec<String> = serde_json::from_value(meta["questions"].clone())?;
        let questions = QuestionIndexMap::from_ids(ids);
        if questions.len() != config.num_questions {
            return Err(Error::CheckpointFormat(
                "question list does not match num_questions".into(),
            ));
        }
        let mut model = Self::init(questions, config.hidden, 0)?;
        assign_parameters(&mut model, tensors)?;
        Ok(model)
    }

    /// Run the cell over one example. The prediction at step `t` uses
    /// inputs up to step `t-1` only; the step-`t` input (question and
    /// response) updates the state afterwards.
    pub fn forward(&self, example: &DktExample) -> Result<DktForward<S>> {
        if example.question_indices.is_empty() {
            return Err(Error::InvalidArgument("empty interaction sequence".into()));
        }
        let q_count = self.config.num_questions;
        let sentinel = self.sentinel();
        for &q in &example.question_indices {
            if q > sentinel {
                return Err(Error::IndexOutOfRange {
                    index: q,
                    bound: sentinel + 1,
                });
            }
        }
        let h = self.config.hidden;
        let mut tape = Tape::new();
        let named = self.named_parameters();
        let param_ids: Vec<ValueId> = named
            .iter()
            .map(|(_, t)| tape.leaf((*t).clone()))
            .collect();
        let (wx, uh, b, w_out, b_out) = (
            param_ids[0],
            param_ids[1],
            param_ids[2],
            param_ids[3],
            param_ids[4],
        );

        let mut state_h = tape.leaf(Tensor::zeros(vec![1, h]));
        let mut state_c = tape.leaf(Tensor::zeros(vec![1, h]));
        let mut step_logits = Vec::with_capacity(example.question_indices.len());
        let mut target_slices = Vec::with_capacity(example.question_indices.len());

        for (&q, &r) in example.question_indices.iter().zip(&example.responses) {
            // predict before consuming this step's input
            let logits = tape.matmul(state_h, w_out)?;
            let logits = tape.add_bias_rows(logits, b_out)?;
            let col = q.min(q_count); // sentinel questions read the sentinel slot
            target_slices.push(tape.slice_cols(logits, col, col + 1)?);
            step_logits.push(logits);

            if q == sentinel {
                continue; // uninformative input: state unchanged
            }
            let input_row = dkt_input_index(q, r);
            let x_term = tape.embedding_lookup(wx, &[input_row])?;
            let h_term = tape.matmul(state_h, uh)?;
            let pre = tape.add(x_term, h_term)?;
            let pre = tape.add_bias_rows(pre, b)?;
            let gate_i = tape.slice_cols(pre, 0, h)?;
            let gate_i = tape.sigmoid(gate_i)?;
            let gate_f = tape.slice_cols(pre, h, 2 * h)?;
            let gate_f = tape.sigmoid(gate_f)?;
            let gate_g = tape.slice_cols(pre, 2 * h, 3 * h)?;
            let gate_g = tape.tanh(gate_g)?;
            let gate_o = tape.slice_cols(pre, 3 * h, 4 * h)?;
            let gate_o = tape.sigmoid(gate_o)?;
            let keep = tape.mul(gate_f, state_c)?;
            let write = tape.mul(gate_i, gate_g)?;
            state_c = tape.add(keep, write)?;
            let c_act = tape.tanh(state_c)?;
            state_h = tape.mul(gate_o, c_act)?;
        }

        let target_logits = tape.concat_rows(&target_slices)?;
        let probs_id = tape.sigmoid(target_logits)?;
        let probs = tape.value(probs_id).to_f64_vec();
        Ok(DktForward {
            tape,
            probs_id,
            probs,
            step_logits,
            param_ids,
            num_questions: q_count,
        })
    }
}

impl<S: Scalar> ParamModel<S> for DktModel<S> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("wx".into(), &self.wx),
            ("uh".into(), &self.uh),
            ("b".into(), &self.b),
            ("w_out".into(), &self.w_out),
            ("b_out".into(), &self.b_out),
        ]
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            ("wx".into(), &mut self.wx),
            ("uh".into(), &mut self.uh),
            ("b".into(), &mut self.b),
            ("w_out".into(), &mut self.w_out),
            ("b_out".into(), &mut self.b_out),
        ]
    }
}

pub struct DktForward<S> {
    pub tape: Tape<S>,
    /// `[T, 1]` probabilities, one per step, for each step's own question.
    pub probs_id: ValueId,
    pub probs: Vec<f64>,
    step_logits: Vec<ValueId>,
    pub param_ids: Vec<ValueId>,
    num_questions: usize,
}

impl<S: Scalar> DktForward<S> {
    /// Per-step probability vector over all questions (plus the sentinel
    /// slot at index `Q`).
    pub fn step_probabilities(&self) -> Vec<Vec<f64>> {
        self.step_logits
            .iter()
            .map(|&id| {
                self.tape
                    .value(id)
                    .data()
                    .iter()
                    .map(|&v| 1.0 / (1.0 + (-v.to_f64()).exp()))
                    .collect()
            })
            .collect()
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

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
}

/// Binary cross-entropy of the per-step predictions against the realized
/// responses.
pub fn dkt_loss<S: Scalar>(fwd: &mut DktForward<S>, responses: &[u8]) -> Result<ValueId> {
    let labels: Vec<f64> = responses.iter().map(|&r| f64::from(r)).collect();
    fwd.tape.bce_loss(fwd.probs_id, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn map(q: usize) -> QuestionIndexMap {
        QuestionIndexMap::from_ids((0..q).map(|i| format!("q{i}")).collect())
    }

    fn example(indices: Vec<usize>, responses: Vec<u8>) -> DktExample {
        DktExample {
            student_id: "s".into(),
            question_indices: indices,
            responses,
        }
    }

    #[test]
    fn first_prediction_is_input_independent() {
        let model = DktModel::<f64>::init(map(4), 8, 3).unwrap();
        let a = model.forward(&example(vec![1, 2], vec![1, 0])).unwrap();
        let b = model.forward(&example(vec![1, 3], vec![0, 1])).unwrap();
        assert_eq!(a.probs[0], b.probs[0]);
    }

    #[test]
    fn sentinel_only_input_gives_constant_predictions() {
        let model = DktModel::<f64>::init(map(4), 8, 3).unwrap();
        let s = model.sentinel();
        let fwd = model
            .forward(&example(vec![s, s, s, s], vec![1, 0, 1, 1]))
            .unwrap();
        for &p in &fwd.probs {
            assert_eq!(p, fwd.probs[0]);
        }
    }

    #[test]
    fn causality_perturbing_later_inputs_keeps_earlier_predictions() {
        let model = DktModel::<f64>::init(map(5), 8, 1).unwrap();
        let a = model
            .forward(&example(vec![0, 1, 2, 3], vec![1, 1, 0, 1]))
            .unwrap();
        let b = model
            .forward(&example(vec![0, 1, 4, 0], vec![1, 1, 1, 0]))
            .unwrap();
        // predictions at steps ≤ 2 depend only on inputs before them
        for t in 0..3 {
            let qa = [0usize, 1, 2][t];
            let pa = a.step_probabilities()[t][qa];
            let pb = b.step_probabilities()[t][qa];
            assert!((pa - pb).abs() < 1e-15, "step {t}");
        }
        assert!(model.forward(&example(vec![], vec![])).is_err());
        assert!(model.forward(&example(vec![9], vec![1])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_on_four_steps() {
        let model = DktModel::<f64>::init(map(3), 4, 9).unwrap();
        let ex = example(vec![0, 2, 1, 0], vec![1, 0, 0, 1]);

        let loss_of = |m: &DktModel<f64>| {
            let mut fwd = m.forward(&ex).unwrap();
            let loss = dkt_loss(&mut fwd, &ex.responses).unwrap();
            fwd.tape.value(loss).item().unwrap()
        };

        let mut fwd = model.forward(&ex).unwrap();
        let loss = dkt_loss(&mut fwd, &ex.responses).unwrap();
        fwd.tape.backward(loss).unwrap();
        let grads = fwd.param_grads();

        for (p_idx, analytic) in grads.iter().enumerate() {
            let (name, tensor) = &model.named_parameters()[p_idx];
            let base = tensor.to_f64_vec();
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
            let err = gradcheck::max_rel_error(&analytic.to_f64_vec(), &numeric);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_with_question_map() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d1.ckpt");
        let p2 = dir.path().join("d2.ckpt");
        let model = DktModel::<f32>::init(map(6), 8, 2).unwrap();
        model.save(&p1).unwrap();
        let loaded = DktModel::<f32>::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.questions.get("q3"), Some(3));
    }
}
