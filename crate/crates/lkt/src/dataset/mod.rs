//! Interaction logs: CSV ingestion, the text sequence format, response
//! masking, windowing, cross-validation splits, and the numeric encoding
//! for the recurrent baseline.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, CLS, CORRECT, EOS, INCORRECT, MASK};

pub const CSV_HEADER: [&str; 7] = [
    "student_id",
    "step",
    "question_id",
    "concept_id",
    "question_text",
    "concept_text",
    "response",
];

/// One student/question event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub student_id: String,
    pub step: u64,
    pub question_id: String,
    pub concept_id: String,
    pub question_text: String,
    pub concept_text: String,
    pub response: u8,
}

/// Records grouped by student with steps strictly increasing.
#[derive(Clone, Debug, Default)]
pub struct InteractionLog {
    students: BTreeMap<String, Vec<InteractionRecord>>,
}

impl InteractionLog {
    pub fn from_records(records: Vec<InteractionRecord>) -> Result<Self> {
        let mut students: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
        for rec in records {
            if rec.response > 1 {
                return Err(Error::DataValidation(format!(
                    "response must be 0 or 1, got {} (student {}, step {})",
                    rec.response, rec.student_id, rec.step
                )));
            }
            students.entry(rec.student_id.clone()).or_default().push(rec);
        }
        for (id, recs) in &mut students {
            recs.sort_by_key(|r| r.step);
            for pair in recs.windows(2) {
                if pair[0].step == pair[1].step {
                    return Err(Error::DataValidation(format!(
                        "duplicate step {} for student {id}",
                        pair[0].step
                    )));
                }
            }
        }
        Ok(InteractionLog { students })
    }

    pub fn student_ids(&self) -> Vec<String> {
        self.students.keys().cloned().collect()
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.students.values().map(Vec::len).sum()
    }

    pub fn records_of(&self, student_id: &str) -> Option<&[InteractionRecord]> {
        self.students.get(student_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<InteractionRecord>)> {
        self.students.iter()
    }

    pub fn all_records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.students.values().flatten()
    }

    /// Restrict the log to the given students.
    pub fn subset(&self, students: &[String]) -> InteractionLog {
        let wanted: BTreeSet<&String> = students.iter().collect();
        InteractionLog {
            students: self
                .students
                .iter()
                .filter(|(id, _)| wanted.contains(id))
                .map(|(id, recs)| (id.clone(), recs.clone()))
                .collect(),
        }
    }

    /// Question ids present in the log, sorted.
    pub fn question_ids(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .all_records()
            .map(|r| r.question_id.clone())
            .collect();
        set.into_iter().collect()
    }
}

/// Load and validate an interaction CSV.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    {
        let headers = reader.headers()?;
        let expected: Vec<&str> = CSV_HEADER.to_vec();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::DataValidation(format!(
                "unexpected CSV header {:?}; expected {:?}",
                headers, expected
            )));
        }
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != CSV_HEADER.len() {
            return Err(Error::DataValidation(format!(
                "row {line}: expected {} fields, found {}",
                CSV_HEADER.len(),
                row.len()
            )));
        }
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let student_id = field(0);
        if student_id.is_empty() {
            return Err(Error::DataValidation(format!(
                "row {line}: missing student_id"
            )));
        }
        let step: u64 = field(1)
            .parse()
            .map_err(|_| Error::DataValidation(format!("row {line}: invalid step {:?}", field(1))))?;
        let question_id = field(2);
        if question_id.is_empty() {
            return Err(Error::DataValidation(format!(
                "row {line}: missing question_id"
            )));
        }
        let response: u8 = match field(6).as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::DataValidation(format!(
                    "row {line}: response must be 0 or 1, got {other:?}"
                )))
            }
        };
        records.push(InteractionRecord {
            student_id,
            step,
            question_id,
            concept_id: field(3),
            question_text: field(4),
            concept_text: field(5),
            response,
        });
    }
    InteractionLog::from_records(records)
}

/// Write records in the canonical CSV schema.
pub fn write_interactions_csv(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.student_id.as_str(),
            &r.step.to_string(),
            r.question_id.as_str(),
            r.concept_id.as_str(),
            r.question_text.as_str(),
            r.concept_text.as_str(),
            &r.response.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ── text sequence format ────────────────────────────────────────────

/// Unmasked token sequence for one student (or one window of one).
#[derive(Clone, Debug, PartialEq)]
pub struct LktSequence {
    pub student_id: String,
    pub token_ids: Vec<u32>,
    /// Positions of all response tokens, strictly increasing.
    pub response_positions: Vec<usize>,
    /// Index into the student's full history of this window's first
    /// interaction (0 for an unwindowed sequence).
    pub first_interaction: usize,
}

impl LktSequence {
    pub fn interaction_count(&self) -> usize {
        self.response_positions.len()
    }
}

/// Masked training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct LktExample {
    pub student_id: String,
    pub token_ids: Vec<u32>,
    pub response_positions: Vec<usize>,
    pub mask_positions: Vec<usize>,
    /// Original correctness at each mask position, aligned with
    /// `mask_positions`.
    pub labels: Vec<u8>,
    pub interaction_count: usize,
}

/// Render one student's interactions as
/// `[CLS] ⟨concept⟩ ⟨question⟩ ⟨RESP⟩ … [EOS]` with one response token per
/// interaction placed after the interaction's question tokens.
pub fn format_lkt_sequence(
    records: &[InteractionRecord],
    vocab: &Vocabulary,
) -> Result<LktSequence> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot format an empty interaction list".into(),
        ));
    }
    let mut token_ids = vec![CLS];
    let mut response_positions = Vec::with_capacity(records.len());
    for rec in records {
        token_ids.extend(vocab.encode(&rec.concept_text));
        token_ids.extend(vocab.encode(&rec.question_text));
        response_positions.push(token_ids.len());
        token_ids.push(if rec.response == 1 { CORRECT } else { INCORRECT });
    }
    token_ids.push(EOS);
    Ok(LktSequence {
        student_id: records[0].student_id.clone(),
        token_ids,
        response_positions,
        first_interaction: 0,
    })
}

/// Split an over-long sequence into windows at interaction boundaries,
/// packing greedily from the most recent interaction backwards so the
/// final window always holds the latest interactions. Each window is
/// re-wrapped with `[CLS]`/`[EOS]`.
pub fn window_sequence(
    seq: &LktSequence,
    question_ids: &[String],
    max_len: usize,
) -> Result<Vec<LktSequence>> {
    if question_ids.len() != seq.interaction_count() {
        return Err(Error::InvalidArgument(format!(
            "{} question ids for {} interactions",
            question_ids.len(),
            seq.interaction_count()
        )));
    }
    if seq.token_ids.len() <= max_len {
        return Ok(vec![seq.clone()]);
    }
    let budget = max_len - 2;

    // Interaction i spans tokens (prev response, this response].
    let mut segments: Vec<&[u32]> = Vec::with_capacity(seq.interaction_count());
    let mut prev = 0usize; // position of [CLS]
    for (i, &resp) in seq.response_positions.iter().enumerate() {
        let seg = &seq.token_ids[prev + 1..=resp];
        if seg.len() > budget {
            return Err(Error::DataValidation(format!(
                "interaction for question {} has {} tokens, exceeding max_len {} - 2",
                question_ids[i],
                seg.len(),
                max_len
            )));
        }
        segments.push(seg);
        prev = resp;
    }

    let mut groups_rev: Vec<(usize, usize)> = Vec::new(); // (first_seg, last_seg) inclusive
    let mut end = segments.len();
    let mut used = 0usize;
    for i in (0..segments.len()).rev() {
        if used + segments[i].len() > budget {
            groups_rev.push((i + 1, end - 1));
            end = i + 1;
            used = 0;
        }
        used += segments[i].len();
    }
    groups_rev.push((0, end - 1));
    groups_rev.reverse();

    let mut windows = Vec::with_capacity(groups_rev.len());
    for (first, last) in groups_rev {
        let mut token_ids = vec![CLS];
        let mut response_positions = Vec::with_capacity(last - first + 1);
        for seg in &segments[first..=last] {
            token_ids.extend_from_slice(seg);
            response_positions.push(token_ids.len() - 1);
        }
        token_ids.push(EOS);
        windows.push(LktSequence {
            student_id: seq.student_id.clone(),
            token_ids,
            response_positions,
            first_interaction: seq.first_interaction + first,
        });
    }
    Ok(windows)
}

/// Replace each response token independently with `[MASK]` at the given
/// rate; if the draw selects none, one response token is masked uniformly
/// at random so every example carries at least one target.
pub fn mask_responses(seq: &LktSequence, rate: f64, seed: u64) -> Result<LktExample> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mask rate must be in (0, 1), got {rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = (0..seq.response_positions.len())
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if selected.is_empty() {
        selected.push(rng.gen_range(0..seq.response_positions.len()));
    }
    Ok(mask_at(seq, &selected))
}

/// Mask exactly the given interaction's response token (evaluation
/// protocol: one designated target, all other responses visible).
pub fn mask_single(seq: &LktSequence, interaction_idx: usize) -> Result<LktExample> {
    if interaction_idx >= seq.response_positions.len() {
        return Err(Error::IndexOutOfRange {
            index: interaction_idx,
            bound: seq.response_positions.len(),
        });
    }
    Ok(mask_at(seq, &[interaction_idx]))
}

fn mask_at(seq: &LktSequence, interaction_indices: &[usize]) -> LktExample {
    let mut token_ids = seq.token_ids.clone();
    let mut mask_positions = Vec::with_capacity(interaction_indices.len());
    let mut labels = Vec::with_capacity(interaction_indices.len());
    for &idx in interaction_indices {
        let pos = seq.response_positions[idx];
        labels.push(u8::from(token_ids[pos] == CORRECT));
        token_ids[pos] = MASK;
        mask_positions.push(pos);
    }
    LktExample {
        student_id: seq.student_id.clone(),
        token_ids,
        response_positions: seq.response_positions.clone(),
        mask_positions,
        labels,
        interaction_count: seq.interaction_count(),
    }
}

/// Format and window every student in the log.
pub fn build_windowed_sequences(
    log: &InteractionLog,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<LktSequence>> {
    let mut out = Vec::new();
    for (_, records) in log.iter() {
        let seq = format_lkt_sequence(records, vocab)?;
        let qids: Vec<String> = records.iter().map(|r| r.question_id.clone()).collect();
        out.extend(window_sequence(&seq, &qids, max_len)?);
    }
    Ok(out)
}

/// Encode every student in the log for the recurrent baseline.
pub fn build_dkt_examples(
    log: &InteractionLog,
    map: &QuestionIndexMap,
    policy: UnseenQuestionPolicy,
) -> Result<Vec<DktExample>> {
    log.iter()
        .map(|(_, records)| encode_dkt(records, map, policy))
        .collect()
}

// ── numeric encoding for the recurrent baseline ─────────────────────

/// Dense question-id → index map fixed at training time.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QuestionIndexMap {
    ids: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl QuestionIndexMap {
    pub fn from_ids(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        QuestionIndexMap { ids, index }
    }

    pub fn from_log(log: &InteractionLog) -> Self {
        Self::from_ids(log.question_ids())
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, question_id: &str) -> Option<usize> {
        self.index.get(question_id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// How to encode questions missing from the index map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnseenQuestionPolicy {
    /// Training: an unseen id is a validation error.
    Error,
    /// Zero-shot evaluation: unseen ids map to an uninformative sentinel.
    Sentinel,
}

/// Per-step question indices and responses. The sentinel index equals the
/// map size `Q`; the model input one-hot index is `2·q + r` for known
/// questions.
#[derive(Clone, Debug, PartialEq)]
pub struct DktExample {
    pub student_id: String,
    pub question_indices: Vec<usize>,
    pub responses: Vec<u8>,
}

pub const fn dkt_input_index(question_index: usize, response: u8) -> usize {
    2 * question_index + response as usize
}

pub fn encode_dkt(
    records: &[InteractionRecord],
    map: &QuestionIndexMap,
    policy: UnseenQuestionPolicy,
) -> Result<DktExample> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot encode an empty interaction list".into(),
        ));
    }
    let sentinel = map.len();
    let mut question_indices = Vec::with_capacity(records.len());
    let mut responses = Vec::with_capacity(records.len());
    for rec in records {
        let idx = match map.get(&rec.question_id) {
            Some(i) => i,
            None => match policy {
                UnseenQuestionPolicy::Error => {
                    return Err(Error::DataValidation(format!(
                        "question {} not present in the index map",
                        rec.question_id
                    )))
                }
                UnseenQuestionPolicy::Sentinel => sentinel,
            },
        };
        question_indices.push(idx);
        responses.push(rec.response);
    }
    Ok(DktExample {
        student_id: records[0].student_id.clone(),
        question_indices,
        responses,
    })
}

// ── splits ──────────────────────────────────────────────────────────

/// Disjoint student → fold assignment with fold sizes differing by ≤ 1.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub k: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, student_id: &str) -> Option<usize> {
        self.assignment.get(student_id).copied()
    }

    pub fn test_students(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn train_students(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|&(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Deterministic seeded shuffle followed by round-robin assignment.
/// The split is by student: no student appears in both the train and
/// test side of a fold.
pub fn split_folds(student_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || student_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} students into {k} folds",
            student_ids.len()
        )));
    }
    let mut ids: Vec<String> = student_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldSplit { k, assignment })
}

/// Seeded student-level subsample. Nested: for a fixed seed the selected
/// set at a smaller fraction is a prefix (subset) of the set at a larger
/// one.
pub fn subsample_students(
    student_ids: &[String],
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut ids: Vec<String> = student_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = (fraction * ids.len() as f64).floor() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {} students yields no students",
            ids.len()
        )));
    }
    ids.truncate(n);
    Ok(ids)
}

/// Seeded train/validation split by student; the validation side gets at
/// least one student.
pub fn split_train_val(
    student_ids: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "val fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut ids: Vec<String> = student_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 students for a train/val split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = ((val_fraction * ids.len() as f64).floor() as usize).max(1);
    let val = ids.split_off(ids.len() - n_val);
    Ok((ids, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::UNK;

    fn rec(student: &str, step: u64, q: &str, r: u8) -> InteractionRecord {
        InteractionRecord {
            student_id: student.into(),
            step,
            question_id: q.into(),
            concept_id: "c1".into(),
            question_text: "what is a set".into(),
            concept_text: "sets".into(),
            response: r,
        }
    }

    fn test_vocab() -> Vocabulary {
        Vocabulary::build(["sets what is a set"], 1, 100).unwrap()
    }

    #[test]
    fn load_two_rows_one_student() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_interactions_csv(&path, &[rec("s1", 0, "q1", 1), rec("s1", 1, "q2", 0)]).unwrap();
        let log = load_interactions(&path).unwrap();
        assert_eq!(log.num_students(), 1);
        assert_eq!(log.records_of("s1").unwrap().len(), 2);
    }

    #[test]
    fn load_rejects_duplicate_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_interactions_csv(&path, &[rec("s1", 3, "q1", 1), rec("s1", 3, "q2", 0)]).unwrap();
        let err = load_interactions(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate step 3"), "{err}");
    }

    #[test]
    fn load_sorts_out_of_order_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_interactions_csv(&path, &[rec("s1", 5, "q1", 1), rec("s1", 2, "q2", 0)]).unwrap();
        let log = load_interactions(&path).unwrap();
        let steps: Vec<u64> = log.records_of("s1").unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![2, 5]);
    }

    #[test]
    fn load_rejects_non_binary_response() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "student_id,step,question_id,concept_id,question_text,concept_text,response\n\
             s1,0,q1,c1,text,concept,2\n",
        )
        .unwrap();
        let err = load_interactions(&path).unwrap_err().to_string();
        assert!(err.contains("response must be 0 or 1"), "{err}");
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn format_single_interaction() {
        let vocab = test_vocab();
        let seq = format_lkt_sequence(&[rec("s1", 0, "q1", 1)], &vocab).unwrap();
        let expected = [
            vec![CLS],
            vocab.encode("sets what is a set"),
            vec![CORRECT, EOS],
        ]
        .concat();
        assert_eq!(seq.token_ids, expected);
        assert_eq!(seq.response_positions, vec![6]);

        let seq0 = format_lkt_sequence(&[rec("s1", 0, "q1", 0)], &vocab).unwrap();
        assert_eq!(seq0.token_ids[6], INCORRECT);
    }

    #[test]
    fn format_two_interactions_has_increasing_response_positions() {
        let vocab = test_vocab();
        let seq =
            format_lkt_sequence(&[rec("s1", 0, "q1", 1), rec("s1", 1, "q2", 0)], &vocab).unwrap();
        assert_eq!(seq.response_positions.len(), 2);
        assert!(seq.response_positions[0] < seq.response_positions[1]);
        assert!(format_lkt_sequence(&[], &vocab).is_err());
    }

    #[test]
    fn masking_forces_at_least_one() {
        let vocab = test_vocab();
        let seq = format_lkt_sequence(&[rec("s1", 0, "q1", 1)], &vocab).unwrap();
        for seed in 0..20 {
            let ex = mask_responses(&seq, 0.15, seed).unwrap();
            assert_eq!(ex.mask_positions, vec![seq.response_positions[0]]);
            assert_eq!(ex.labels, vec![1]);
            assert_eq!(ex.token_ids[ex.mask_positions[0]], MASK);
        }
    }

    #[test]
    fn masking_is_deterministic_and_only_touches_responses() {
        let vocab = test_vocab();
        let records: Vec<InteractionRecord> =
            (0..10).map(|i| rec("s1", i, &format!("q{i}"), (i % 2) as u8)).collect();
        let seq = format_lkt_sequence(&records, &vocab).unwrap();
        let a = mask_responses(&seq, 0.15, 7).unwrap();
        let b = mask_responses(&seq, 0.15, 7).unwrap();
        assert_eq!(a, b);
        for (pos, (&orig, &masked)) in seq.token_ids.iter().zip(&a.token_ids).enumerate() {
            if a.mask_positions.contains(&pos) {
                assert_eq!(masked, MASK);
                assert!(seq.response_positions.contains(&pos));
            } else {
                assert_eq!(orig, masked);
            }
        }
    }

    #[test]
    fn masking_fraction_near_rate() {
        let vocab = test_vocab();
        let mut total_responses = 0usize;
        let mut total_masked = 0usize;
        for s in 0..500 {
            let records: Vec<InteractionRecord> =
                (0..25).map(|i| rec(&format!("s{s}"), i, &format!("q{i}"), 1)).collect();
            let seq = format_lkt_sequence(&records, &vocab).unwrap();
            let ex = mask_responses(&seq, 0.15, crate::seed::derive(99, &[s])).unwrap();
            total_responses += seq.response_positions.len();
            total_masked += ex.mask_positions.len();
        }
        assert!(total_responses >= 10_000);
        let fraction = total_masked as f64 / total_responses as f64;
        assert!(
            (0.13..=0.18).contains(&fraction),
            "masked fraction {fraction}"
        );
    }

    #[test]
    fn window_identity_when_short() {
        let vocab = test_vocab();
        let seq = format_lkt_sequence(&[rec("s1", 0, "q1", 1)], &vocab).unwrap();
        let windows = window_sequence(&seq, &["q1".into()], 512).unwrap();
        assert_eq!(windows, vec![seq]);
    }

    #[test]
    fn window_splits_at_interaction_boundaries() {
        // three interactions of 200 tokens each (199 question tokens + response)
        let vocab = test_vocab();
        let long_text = vec!["set"; 198].join(" ");
        let records: Vec<InteractionRecord> = (0..3)
            .map(|i| {
                let mut r = rec("s1", i, &format!("q{i}"), 1);
                r.question_text = long_text.clone();
                r.concept_text = "sets".into();
                r
            })
            .collect();
        let seq = format_lkt_sequence(&records, &vocab).unwrap();
        assert_eq!(seq.token_ids.len(), 3 * 200 + 2);
        let qids: Vec<String> = (0..3).map(|i| format!("q{i}")).collect();
        let windows = window_sequence(&seq, &qids, 512).unwrap();
        assert_eq!(windows.len(), 2);
        // packed from the back: the last window holds the latest two interactions
        assert_eq!(windows[0].interaction_count(), 1);
        assert_eq!(windows[1].interaction_count(), 2);
        assert_eq!(windows[0].first_interaction, 0);
        assert_eq!(windows[1].first_interaction, 1);
        for w in &windows {
            assert_eq!(w.token_ids[0], CLS);
            assert_eq!(*w.token_ids.last().unwrap(), EOS);
            assert!(w.token_ids.len() <= 512);
            for &p in &w.response_positions {
                assert!(w.token_ids[p] == CORRECT || w.token_ids[p] == INCORRECT);
            }
        }
    }

    #[test]
    fn window_rejects_oversized_interaction() {
        let vocab = test_vocab();
        let mut r = rec("s1", 0, "qbig", 1);
        r.question_text = vec!["set"; 600].join(" ");
        let seq = format_lkt_sequence(&[r], &vocab).unwrap();
        let err = window_sequence(&seq, &["qbig".into()], 512)
            .unwrap_err()
            .to_string();
        assert!(err.contains("qbig"), "{err}");
    }

    #[test]
    fn window_preserves_interaction_order_and_content() {
        let vocab = test_vocab();
        let records: Vec<InteractionRecord> =
            (0..40).map(|i| rec("s1", i, &format!("q{i}"), (i % 2) as u8)).collect();
        let seq = format_lkt_sequence(&records, &vocab).unwrap();
        let qids: Vec<String> = (0..40).map(|i| format!("q{i}")).collect();
        let windows = window_sequence(&seq, &qids, 64).unwrap();
        let total: usize = windows.iter().map(LktSequence::interaction_count).sum();
        assert_eq!(total, 40);
        let mut expect = 0;
        for w in &windows {
            assert_eq!(w.first_interaction, expect);
            expect += w.interaction_count();
        }
        let rebuilt: Vec<u32> = windows
            .iter()
            .flat_map(|w| w.token_ids[1..w.token_ids.len() - 1].to_vec())
            .collect();
        assert_eq!(rebuilt, seq.token_ids[1..seq.token_ids.len() - 1]);
    }

    #[test]
    fn dkt_input_index_rule() {
        assert_eq!(dkt_input_index(3, 1), 7);
        assert_eq!(dkt_input_index(0, 0), 0);
    }

    #[test]
    fn encode_dkt_policies() {
        let map = QuestionIndexMap::from_ids(vec!["q1".into(), "q2".into()]);
        let known = [rec("s1", 0, "q1", 1)];
        let ex = encode_dkt(&known, &map, UnseenQuestionPolicy::Error).unwrap();
        assert_eq!(ex.question_indices, vec![0]);

        let unseen = [rec("s1", 0, "q9", 1)];
        assert!(encode_dkt(&unseen, &map, UnseenQuestionPolicy::Error).is_err());
        let ex = encode_dkt(&unseen, &map, UnseenQuestionPolicy::Sentinel).unwrap();
        assert_eq!(ex.question_indices, vec![map.len()]);
    }

    #[test]
    fn fold_sizes_differ_by_at_most_one() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let split = split_folds(&ids, 5, 1).unwrap();
        assert_eq!(split.fold_sizes(), vec![2; 5]);

        let ids11: Vec<String> = (0..11).map(|i| format!("s{i}")).collect();
        let split11 = split_folds(&ids11, 5, 1).unwrap();
        let mut sizes = split11.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_partition_students_and_are_deterministic() {
        let ids: Vec<String> = (0..23).map(|i| format!("s{i}")).collect();
        let a = split_folds(&ids, 5, 9).unwrap();
        let b = split_folds(&ids, 5, 9).unwrap();
        for id in &ids {
            assert_eq!(a.fold_of(id), b.fold_of(id));
        }
        let mut seen = Vec::new();
        for f in 0..5 {
            seen.extend(a.test_students(f));
        }
        seen.sort();
        let mut expected = ids.clone();
        expected.sort();
        assert_eq!(seen, expected);
        assert!(split_folds(&ids[..3], 5, 0).is_err());
    }

    #[test]
    fn subsample_is_nested_and_errors_when_empty() {
        let ids: Vec<String> = (0..50).map(|i| format!("s{i}")).collect();
        let small = subsample_students(&ids, 0.1, 3).unwrap();
        let large = subsample_students(&ids, 0.5, 3).unwrap();
        assert_eq!(small.len(), 5);
        assert_eq!(large.len(), 25);
        assert!(small.iter().all(|s| large.contains(s)));
        assert!(subsample_students(&ids, 0.01, 3).is_err());
    }

    #[test]
    fn lkt_example_token_budget_invariant() {
        // count(CORRECT) + count(INCORRECT) + count(MASK) == interactions
        let vocab = test_vocab();
        let records: Vec<InteractionRecord> =
            (0..12).map(|i| rec("s1", i, &format!("q{i}"), (i % 2) as u8)).collect();
        let seq = format_lkt_sequence(&records, &vocab).unwrap();
        let ex = mask_responses(&seq, 0.3, 5).unwrap();
        let count = ex
            .token_ids
            .iter()
            .filter(|&&t| t == CORRECT || t == INCORRECT || t == MASK)
            .count();
        assert_eq!(count, ex.interaction_count);
        assert_eq!(ex.labels.len(), ex.mask_positions.len());
        assert!(!ex.labels.is_empty());
    }

    #[test]
    fn unknown_words_encode_to_unk() {
        let vocab = test_vocab();
        let r = rec("s1", 0, "q1", 1);
        let mut r2 = r.clone();
        r2.question_text = "completely unseen words".into();
        let seq = format_lkt_sequence(&[r2], &vocab).unwrap();
        assert!(seq.token_ids.contains(&UNK));
    }
}
