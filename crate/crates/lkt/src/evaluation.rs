//! Metrics (AUC/ACC), cross-validated evaluation, and the cold-start,
//! sequence-length, and zero-shot experiment protocols.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_dkt_examples, build_windowed_sequences, mask_responses, mask_single, split_train_val,
    split_folds, subsample_students, InteractionLog, QuestionIndexMap, UnseenQuestionPolicy,
};
use crate::error::{Error, Result};
use crate::models::{predict_masked_correctness, DktModel, LktModel};
use crate::numerics::Scalar;
use crate::seed;
use crate::tokenizer::Vocabulary;
use crate::training::{train, DktTrainer, LktTrainer, TrainConfig, TrainOutcome};

// ── metrics ─────────────────────────────────────────────────────────

/// Ranking quality as the Mann–Whitney statistic:
/// (#concordant pairs + ½·#tied pairs) / (#positives · #negatives),
/// computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let pos_f = pos as f64;
    Ok((rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

/// Fraction of predictions on the correct side of the threshold; a score
/// exactly at the threshold counts as a positive prediction.
pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy over {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &y)| (s >= threshold) == (y == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Sample mean and standard deviation (n−1 denominator; 0 for n ≤ 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

// ── reports ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub protocol: String,
    pub auc: f64,
    pub acc: f64,
    pub n_predictions: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_pairs(
        model: impl Into<String>,
        protocol: impl Into<String>,
        seed: u64,
        pairs: &[(f64, u8)],
    ) -> Result<Self> {
        let scores: Vec<f64> = pairs.iter().map(|&(s, _)| s).collect();
        let labels: Vec<u8> = pairs.iter().map(|&(_, y)| y).collect();
        Ok(EvalReport {
            model: model.into(),
            protocol: protocol.into(),
            auc: auc(&scores, &labels)?,
            acc: acc(&scores, &labels, 0.5)?,
            n_predictions: pairs.len(),
            seed,
        })
    }
}

pub fn append_reports_jsonl(path: &std::path::Path, reports: &[EvalReport]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

// ── scoring protocols ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub enum LktEvalProtocol {
    /// For every interaction, mask only that response (all others stay
    /// visible) and score it within its window. One forward pass per
    /// target.
    Targets,
    /// The training-time protocol: a fixed seeded 15%-style mask over
    /// each window, scored in a single pass.
    Masked { rate: f64, seed: u64 },
}

/// Score an interaction log with the encoder. Returns (probability,
/// label) pairs over all targets.
pub fn evaluate_lkt<S: Scalar>(
    model: &LktModel<S>,
    log: &InteractionLog,
    vocab: &Vocabulary,
    protocol: LktEvalProtocol,
) -> Result<Vec<(f64, u8)>> {
    let sequences = build_windowed_sequences(log, vocab, model.config.max_len)?;
    match protocol {
        LktEvalProtocol::Targets => {
            let nested: Result<Vec<Vec<(f64, u8)>>> = sequences
                .par_iter()
                .map(|window| {
                    let mut pairs = Vec::with_capacity(window.interaction_count());
                    for local in 0..window.interaction_count() {
                        let ex = mask_single(window, local)?;
                        let mut rng = ChaCha8Rng::seed_from_u64(0);
                        let mut out = model.forward(&ex.token_ids, false, &mut rng)?;
                        let pred = predict_masked_correctness(&mut out, &ex.mask_positions)?;
                        pairs.push((pred.probs[0], ex.labels[0]));
                    }
                    Ok(pairs)
                })
                .collect();
            Ok(nested?.into_iter().flatten().collect())
        }
        LktEvalProtocol::Masked { rate, seed: mask_seed } => {
            let nested: Result<Vec<Vec<(f64, u8)>>> = sequences
                .par_iter()
                .enumerate()
                .map(|(i, window)| {
                    let ex = mask_responses(window, rate, seed::derive(mask_seed, &[11, i as u64]))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut out = model.forward(&ex.token_ids, false, &mut rng)?;
                    let pred = predict_masked_correctness(&mut out, &ex.mask_positions)?;
                    Ok(pred
                        .probs
                        .iter()
                        .zip(&ex.labels)
                        .map(|(&p, &y)| (p, y))
                        .collect())
                })
                .collect();
            Ok(nested?.into_iter().flatten().collect())
        }
    }
}

/// Score an interaction log with the recurrent baseline: sequential
/// next-response predictions over every step.
pub fn evaluate_dkt<S: Scalar>(
    model: &DktModel<S>,
    log: &InteractionLog,
    policy: UnseenQuestionPolicy,
) -> Result<Vec<(f64, u8)>> {
    let examples = build_dkt_examples(log, &model.questions, policy)?;
    let nested: Result<Vec<Vec<(f64, u8)>>> = examples
        .par_iter()
        .map(|ex| {
            let fwd = model.forward(ex)?;
            Ok(fwd
                .probs
                .iter()
                .zip(&ex.responses)
                .map(|(&p, &y)| (p, y))
                .collect())
        })
        .collect();
    Ok(nested?.into_iter().flatten().collect())
}

// ── cross-validation ────────────────────────────────────────────────

pub struct CvSummary {
    pub reports: Vec<EvalReport>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

impl CvSummary {
    fn from_reports(reports: Vec<EvalReport>) -> Self {
        let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
        let accs: Vec<f64> = reports.iter().map(|r| r.acc).collect();
        let (mean_auc, std_auc) = mean_std(&aucs);
        let (mean_acc, std_acc) = mean_std(&accs);
        CvSummary {
            reports,
            mean_auc,
            std_auc,
            mean_acc,
            std_acc,
        }
    }
}

/// k-fold cross-validation of the encoder: per fold, hold the fold's
/// students out as the test set, split the rest into train/validation,
/// train, and score the test fold with the `Targets` protocol.
pub fn run_cv_lkt<S: Scalar>(
    log: &InteractionLog,
    vocab: &Vocabulary,
    init: &LktModel<S>,
    train_cfg: &TrainConfig,
    k: usize,
    val_fraction: f64,
) -> Result<CvSummary> {
    let split = split_folds(&log.student_ids(), k, train_cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for fold in 0..k {
        let outcome = train_lkt_fold(log, vocab, init, train_cfg, &split, fold, val_fraction)
            .map_err(|e| {
                Error::InvalidArgument(format!("fold {fold}: {e}"))
            })?;
        let test_log = log.subset(&split.test_students(fold));
        let pairs = evaluate_lkt(&outcome.model, &test_log, vocab, LktEvalProtocol::Targets)?;
        reports.push(EvalReport::from_pairs(
            "lkt",
            format!("fold:{fold}"),
            train_cfg.seed,
            &pairs,
        )?);
    }
    Ok(CvSummary::from_reports(reports))
}

fn train_lkt_fold<S: Scalar>(
    log: &InteractionLog,
    vocab: &Vocabulary,
    init: &LktModel<S>,
    train_cfg: &TrainConfig,
    split: &crate::dataset::FoldSplit,
    fold: usize,
    val_fraction: f64,
) -> Result<TrainOutcome<LktModel<S>>> {
    let train_pool = split.train_students(fold);
    let (train_ids, val_ids) =
        split_train_val(&train_pool, val_fraction, seed::derive(train_cfg.seed, &[40, fold as u64]))?;
    let trainer = LktTrainer {
        train_sequences: build_windowed_sequences(&log.subset(&train_ids), vocab, init.config.max_len)?,
        val_sequences: build_windowed_sequences(&log.subset(&val_ids), vocab, init.config.max_len)?,
        mask_rate: train_cfg.mask_rate,
        mask_draws: 1,
        seed: train_cfg.seed,
    };
    let mut cfg = train_cfg.clone();
    cfg.seed = seed::derive(train_cfg.seed, &[41, fold as u64]);
    train(&trainer, init.clone(), &cfg)
}

/// k-fold cross-validation of the recurrent baseline.
pub fn run_cv_dkt<S: Scalar>(
    log: &InteractionLog,
    hidden: usize,
    train_cfg: &TrainConfig,
    k: usize,
    val_fraction: f64,
) -> Result<CvSummary> {
    let split = split_folds(&log.student_ids(), k, train_cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for fold in 0..k {
        let train_pool = split.train_students(fold);
        let (train_ids, val_ids) = split_train_val(
            &train_pool,
            val_fraction,
            seed::derive(train_cfg.seed, &[42, fold as u64]),
        )?;
        let train_log = log.subset(&train_ids);
        let map = QuestionIndexMap::from_log(&train_log);
        let trainer = DktTrainer {
            train_examples: build_dkt_examples(&train_log, &map, UnseenQuestionPolicy::Error)?,
            val_examples: build_dkt_examples(
                &log.subset(&val_ids),
                &map,
                UnseenQuestionPolicy::Sentinel,
            )?,
        };
        let model = DktModel::<S>::init(map, hidden, seed::derive(train_cfg.seed, &[43, fold as u64]))?;
        let mut cfg = train_cfg.clone();
        cfg.seed = seed::derive(train_cfg.seed, &[44, fold as u64]);
        let outcome = train(&trainer, model, &cfg)
            .map_err(|e| Error::InvalidArgument(format!("fold {fold}: {e}")))?;
        let test_log = log.subset(&split.test_students(fold));
        let pairs = evaluate_dkt(&outcome.model, &test_log, UnseenQuestionPolicy::Sentinel)?;
        reports.push(EvalReport::from_pairs(
            "dkt",
            format!("fold:{fold}"),
            train_cfg.seed,
            &pairs,
        )?);
    }
    Ok(CvSummary::from_reports(reports))
}

// ── cold start ──────────────────────────────────────────────────────

/// Fine-tune a pretrained encoder on nested student-level fractions of
/// the target training pool and compare against the baseline trained
/// from scratch on the same subsamples, all evaluated on one fixed
/// held-out test split.
#[allow(clippy::too_many_arguments)]
pub fn coldstart_fraction_sweep<S: Scalar>(
    pretrained: &LktModel<S>,
    target_log: &InteractionLog,
    vocab: &Vocabulary,
    fractions: &[f64],
    dkt_hidden: usize,
    lkt_cfg: &TrainConfig,
    dkt_cfg: &TrainConfig,
    test_fraction: f64,
    seed_value: u64,
) -> Result<Vec<EvalReport>> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fractions must lie in (0, 1], got {f}"
            )));
        }
    }
    let (pool, test_ids) = split_train_val(
        &target_log.student_ids(),
        test_fraction,
        seed::derive(seed_value, &[50]),
    )?;
    let test_log = target_log.subset(&test_ids);

    let mut reports = Vec::with_capacity(fractions.len() * 2);
    for &fraction in fractions {
        let subsample = subsample_students(&pool, fraction, seed::derive(seed_value, &[51]))?;
        let sub_log = target_log.subset(&subsample);

        let outcome = finetune_lkt(pretrained, &sub_log, vocab, lkt_cfg)?;
        let pairs = evaluate_lkt(&outcome.model, &test_log, vocab, LktEvalProtocol::Targets)?;
        reports.push(EvalReport::from_pairs(
            "lkt",
            format!("coldstart:{fraction}"),
            seed_value,
            &pairs,
        )?);

        let map = QuestionIndexMap::from_log(&sub_log);
        let (dkt_train, dkt_val) =
            split_train_val(&subsample, 0.2, seed::derive(seed_value, &[52]))
                .unwrap_or_else(|_| (subsample.clone(), subsample.clone()));
        let trainer = DktTrainer {
            train_examples: build_dkt_examples(
                &target_log.subset(&dkt_train),
                &map,
                UnseenQuestionPolicy::Error,
            )?,
            val_examples: build_dkt_examples(
                &target_log.subset(&dkt_val),
                &map,
                UnseenQuestionPolicy::Sentinel,
            )?,
        };
        let dkt_model = DktModel::<S>::init(map, dkt_hidden, seed::derive(seed_value, &[53]))?;
        let dkt_outcome = train(&trainer, dkt_model, dkt_cfg)?;
        let dkt_pairs = evaluate_dkt(&dkt_outcome.model, &test_log, UnseenQuestionPolicy::Sentinel)?;
        reports.push(EvalReport::from_pairs(
            "dkt",
            format!("coldstart:{fraction}"),
            seed_value,
            &dkt_pairs,
        )?);
    }
    Ok(reports)
}

/// Fine-tune a copy of a pretrained encoder on a (possibly small) target
/// training log.
pub fn finetune_lkt<S: Scalar>(
    pretrained: &LktModel<S>,
    train_log: &InteractionLog,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<LktModel<S>>> {
    let ids = train_log.student_ids();
    let (train_ids, val_ids) = if ids.len() >= 2 {
        split_train_val(&ids, 0.2, seed::derive(cfg.seed, &[54]))?
    } else {
        (ids.clone(), ids)
    };
    let trainer = LktTrainer {
        train_sequences: build_windowed_sequences(
            &train_log.subset(&train_ids),
            vocab,
            pretrained.config.max_len,
        )?,
        val_sequences: build_windowed_sequences(
            &train_log.subset(&val_ids),
            vocab,
            pretrained.config.max_len,
        )?,
        mask_rate: cfg.mask_rate,
        mask_draws: 1,
        seed: cfg.seed,
    };
    train(&trainer, pretrained.clone(), cfg)
}

// ── sequence-length buckets ─────────────────────────────────────────

/// Truncate each student's history to its first `L` interactions and
/// score the masked response of the `L`-th interaction; one prediction
/// per qualifying student per bucket.
pub fn seq_length_buckets<S: Scalar>(
    model: &LktModel<S>,
    log: &InteractionLog,
    vocab: &Vocabulary,
    buckets: &[usize],
    seed_value: u64,
) -> Result<Vec<EvalReport>> {
    if buckets.is_empty() || buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "buckets must be strictly ascending".into(),
        ));
    }
    let mut reports = Vec::with_capacity(buckets.len());
    for &bucket in buckets {
        if bucket == 0 {
            return Err(Error::InvalidArgument("bucket length 0".into()));
        }
        let mut pairs = Vec::new();
        for (_, records) in log.iter() {
            if records.len() < bucket {
                continue;
            }
            let truncated = &records[..bucket];
            let seq = crate::dataset::format_lkt_sequence(truncated, vocab)?;
            let qids: Vec<String> = truncated.iter().map(|r| r.question_id.clone()).collect();
            let windows = crate::dataset::window_sequence(&seq, &qids, model.config.max_len)?;
            // the final window always holds the latest interaction
            let window = windows.last().expect("at least one window");
            let local = bucket - 1 - window.first_interaction;
            let ex = mask_single(window, local)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut out = model.forward(&ex.token_ids, false, &mut rng)?;
            let pred = predict_masked_correctness(&mut out, &ex.mask_positions)?;
            pairs.push((pred.probs[0], ex.labels[0]));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no students have at least {bucket} interactions"
            )));
        }
        reports.push(EvalReport::from_pairs(
            "lkt",
            format!("seqlen:{bucket}"),
            seed_value,
            &pairs,
        )?);
    }
    Ok(reports)
}

// ── zero-shot ───────────────────────────────────────────────────────

/// Evaluate a source-trained encoder and baseline on a new domain with no
/// gradient updates. Target text is encoded with the source vocabulary
/// (out-of-vocabulary words become `[UNK]`); baseline questions missing
/// from the source map encode as the sentinel, so its predictions are a
/// constant prior.
pub fn zero_shot_eval<S: Scalar>(
    lkt_model: &LktModel<S>,
    dkt_model: &DktModel<S>,
    target_log: &InteractionLog,
    vocab: &Vocabulary,
    seed_value: u64,
) -> Result<(EvalReport, EvalReport)> {
    let lkt_pairs = evaluate_lkt(lkt_model, target_log, vocab, LktEvalProtocol::Targets)?;
    let lkt_report = EvalReport::from_pairs("lkt", "zeroshot", seed_value, &lkt_pairs)?;
    let dkt_pairs = evaluate_dkt(dkt_model, target_log, UnseenQuestionPolicy::Sentinel)?;
    let dkt_report = EvalReport::from_pairs("dkt", "zeroshot", seed_value, &dkt_pairs)?;
    Ok((lkt_report, dkt_report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_and_ties() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4], &[1, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.5, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_worked_example() {
        // pos {0.8, 0.6}, neg {0.7, 0.3}: 3 of 4 pairs concordant
        let a = auc(&[0.8, 0.7, 0.6, 0.3], &[1, 0, 1, 0]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn auc_invariant_under_strictly_increasing_transforms() {
        let scores = [0.11, 0.52, 0.87, 0.33, 0.52, 0.9];
        let labels = [0, 1, 1, 0, 0, 1];
        let base = auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|&s| s * s * s).collect();
        let scaled: Vec<f64> = scores.iter().map(|&s| 5.0 * s - 2.0).collect();
        assert_eq!(auc(&cubed, &labels).unwrap(), base);
        assert_eq!(auc(&scaled, &labels).unwrap(), base);
    }

    #[test]
    fn acc_tie_rule() {
        assert_eq!(acc(&[0.6, 0.4], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(acc(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert_eq!(acc(&[0.5], &[0], 0.5).unwrap(), 0.0);
        assert_eq!(acc(&[0.9], &[0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn acc_complement_symmetry_holds_without_exact_ties() {
        let scores = [0.2, 0.7, 0.9, 0.4];
        let labels = [0u8, 1, 1, 1];
        let flipped_scores: Vec<f64> = scores.iter().map(|&s| 1.0 - s).collect();
        let flipped_labels: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
        assert_eq!(
            acc(&scores, &labels, 0.5).unwrap(),
            acc(&flipped_scores, &flipped_labels, 0.5).unwrap()
        );
        // the ≥ tie rule breaks the symmetry at exactly 0.5
        assert_ne!(
            acc(&[0.5], &[1], 0.5).unwrap(),
            acc(&[0.5], &[0], 0.5).unwrap()
        );
    }

    #[test]
    fn mean_std_sample_formula() {
        let (m, s) = mean_std(&[0.7, 0.8]);
        assert!((m - 0.75).abs() < 1e-12);
        assert!((s - 0.070_710_678_118_654_75).abs() < 1e-12);
        let (_, s0) = mean_std(&[0.5, 0.5, 0.5]);
        assert_eq!(s0, 0.0);
    }

    #[test]
    fn auc_matches_exhaustive_pairwise_oracle_on_small_multisets() {
        // oracle: count pairs directly
        fn oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
            let pos: Vec<f64> = scores
                .iter()
                .zip(labels)
                .filter(|&(_, &y)| y == 1)
                .map(|(&s, _)| s)
                .collect();
            let neg: Vec<f64> = scores
                .iter()
                .zip(labels)
                .filter(|&(_, &y)| y == 0)
                .map(|(&s, _)| s)
                .collect();
            if pos.is_empty() || neg.is_empty() {
                return None;
            }
            let mut num = 0.0;
            for &p in &pos {
                for &n in &neg {
                    if p > n {
                        num += 1.0;
                    } else if p == n {
                        num += 0.5;
                    }
                }
            }
            Some(num / (pos.len() * neg.len()) as f64)
        }

        // enumerate all multisets of (score, label) pairs of size ≤ 5
        // over quantized scores (the acceptance suite pushes to size 8)
        let values = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut variants = Vec::new();
        for &v in &values {
            for y in [0u8, 1] {
                variants.push((v, y));
            }
        }
        type Check<'a> = &'a mut dyn FnMut(&[(f64, u8)]);
        fn rec(
            variants: &[(f64, u8)],
            start: usize,
            current: &mut Vec<(f64, u8)>,
            max_size: usize,
            check: Check,
        ) {
            if !current.is_empty() {
                check(current);
            }
            if current.len() == max_size {
                return;
            }
            for i in start..variants.len() {
                current.push(variants[i]);
                rec(variants, i, current, max_size, check);
                current.pop();
            }
        }
        let mut checked = 0usize;
        rec(&variants, 0, &mut Vec::new(), 5, &mut |case| {
            let scores: Vec<f64> = case.iter().map(|&(s, _)| s).collect();
            let labels: Vec<u8> = case.iter().map(|&(_, y)| y).collect();
            match oracle(&scores, &labels) {
                Some(expect) => {
                    let got = auc(&scores, &labels).unwrap();
                    assert_eq!(got, expect, "case {case:?}");
                    checked += 1;
                }
                None => assert!(auc(&scores, &labels).is_err()),
            }
        });
        assert!(checked > 1000);
    }
}
