//! Answer-string metrics (exact match, character F1, token F1), corpus
//! evaluation, confidence-sum ensembling, and overlap analysis across
//! models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Corpus;
use crate::model::{AnnotatedExample, ModelError, Prediction, SestModel};
use crate::util::fnv1a;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("question {id}: {source}")]
    Question {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error("question ids are not aligned across models: {0}")]
    IdMismatch(String),
    #[error("ensemble needs at least one model")]
    NoModels,
}

/// Which F1 granularity a report uses: characters or whitespace tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Char,
    Token,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strict string comparison after whitespace normalization: internal runs of
/// whitespace collapse to one space and the ends are trimmed.
pub fn exact_match(pred: &str, gold: &str) -> u32 {
    u32::from(normalize_ws(pred) == normalize_ws(gold))
}

fn multiset_f1<T: Ord>(pred: Vec<T>, gold: Vec<T>) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let count = |items: Vec<T>| -> BTreeMap<T, usize> {
        let mut m = BTreeMap::new();
        for x in items {
            *m.entry(x).or_insert(0) += 1;
        }
        m
    };
    let p_len = pred.len() as f64;
    let g_len = gold.len() as f64;
    let pc = count(pred);
    let gc = count(gold);
    let common: usize = pc
        .iter()
        .filter_map(|(k, &n)| gc.get(k).map(|&m| n.min(m)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p_len;
    let recall = common as f64 / g_len;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset precision/recall F1 over non-whitespace characters.
pub fn f1_char(pred: &str, gold: &str) -> f64 {
    let chars = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    multiset_f1(chars(pred), chars(gold))
}

/// Multiset precision/recall F1 over whitespace-split tokens.
pub fn f1_token(pred: &str, gold: &str) -> f64 {
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
    multiset_f1(toks(pred), toks(gold))
}

/// Per-question evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub begin: usize,
    pub end: usize,
    pub predicted_text: String,
    pub gold_text: String,
    pub em_hit: bool,
    pub f1: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub em: f64,
    pub f1: f64,
    pub per_question: Vec<QuestionResult>,
}

/// Evaluation report document written by the CLI and consumed by the
/// overlap analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub metric: Metric,
    pub em: f64,
    pub f1: f64,
    pub per_question: Vec<QuestionResult>,
}

impl EvalReport {
    pub fn from_result(result: EvalResult, config_digest: String) -> Self {
        EvalReport {
            config_digest,
            metric: result.metric,
            em: result.em,
            f1: result.f1,
            per_question: result.per_question,
        }
    }
}

/// Stable digest of a model configuration for report provenance.
pub fn config_digest(config: &crate::model::ModelConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a(text.as_bytes()))
}

fn score_one(
    model: &SestModel,
    item: &AnnotatedExample,
    metric: Metric,
) -> Result<QuestionResult, EvalError> {
    let pred = model.predict(item).map_err(|source| EvalError::Question {
        id: item.example.id.clone(),
        source,
    })?;
    let gold_text = item.example.answer_text();
    let em_hit = exact_match(&pred.answer_text, &gold_text) == 1;
    let f1 = match metric {
        Metric::Char => f1_char(&pred.answer_text, &gold_text),
        Metric::Token => f1_token(&pred.answer_text, &gold_text),
    };
    Ok(QuestionResult {
        id: item.example.id.clone(),
        begin: pred.begin,
        end: pred.end,
        predicted_text: pred.answer_text,
        gold_text,
        em_hit,
        f1,
        confidence: pred.confidence,
    })
}

fn aggregate(metric: Metric, per_question: Vec<QuestionResult>) -> EvalResult {
    let n = per_question.len().max(1) as f64;
    let em = per_question.iter().filter(|q| q.em_hit).count() as f64 / n;
    let f1 = per_question.iter().map(|q| q.f1).sum::<f64>() / n;
    EvalResult { metric, em, f1, per_question }
}

/// Evaluate prepared examples sequentially.
pub fn evaluate_prepared(
    model: &SestModel,
    items: &[AnnotatedExample],
    metric: Metric,
) -> Result<EvalResult, EvalError> {
    let per_question = items
        .iter()
        .map(|item| score_one(model, item, metric))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(metric, per_question))
}

/// Evaluate prepared examples on `threads` worker threads. Results are
/// aggregated in corpus order, so the outcome is identical to the
/// sequential path.
pub fn evaluate_prepared_parallel(
    model: &SestModel,
    items: &[AnnotatedExample],
    metric: Metric,
    threads: usize,
) -> Result<EvalResult, EvalError> {
    if threads <= 1 || items.len() <= 1 {
        return evaluate_prepared(model, items, metric);
    }
    let threads = threads.min(items.len());
    let chunk = items.len().div_ceil(threads);
    let mut slots: Vec<Option<Result<QuestionResult, EvalError>>> = Vec::new();
    slots.resize_with(items.len(), || None);

    std::thread::scope(|scope| {
        let mut rest = slots.as_mut_slice();
        for chunk_items in items.chunks(chunk) {
            let (head, tail) = rest.split_at_mut(chunk_items.len());
            rest = tail;
            scope.spawn(move || {
                for (slot, item) in head.iter_mut().zip(chunk_items) {
                    *slot = Some(score_one(model, item, metric));
                }
            });
        }
    });

    let per_question = slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(metric, per_question))
}

/// Annotate and evaluate a corpus.
pub fn evaluate(
    model: &SestModel,
    corpus: &Corpus,
    metric: Metric,
    threads: usize,
) -> Result<EvalResult, EvalError> {
    let items = model.prepare_corpus(corpus)?;
    evaluate_prepared_parallel(model, &items, metric, threads)
}

/// The ensemble's choice for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleChoice {
    pub id: String,
    pub begin: usize,
    pub end: usize,
    /// Sum of the confidences of the models that predicted this span.
    pub score: f64,
    pub answer_text: String,
}

/// Combine per-model predictions: group each question's predicted spans by
/// exact (begin, end), sum confidences per span, and keep the top-scoring
/// span (ties prefer the smaller begin, then the smaller end).
///
/// `per_model[m]` lists (question id, prediction) pairs; every model must
/// cover the same question ids in the same order.
pub fn ensemble(
    per_model: &[Vec<(String, Prediction)>],
) -> Result<Vec<EnsembleChoice>, EvalError> {
    if per_model.is_empty() {
        return Err(EvalError::NoModels);
    }
    let ids: Vec<&String> = per_model[0].iter().map(|(id, _)| id).collect();
    for (m, preds) in per_model.iter().enumerate().skip(1) {
        if preds.len() != ids.len() {
            return Err(EvalError::IdMismatch(format!(
                "model 0 has {} questions, model {m} has {}",
                ids.len(),
                preds.len()
            )));
        }
        for (q, (id, _)) in preds.iter().enumerate() {
            if id != ids[q] {
                return Err(EvalError::IdMismatch(format!(
                    "question {q}: {:?} vs {id:?}",
                    ids[q]
                )));
            }
        }
    }

    let mut choices = Vec::with_capacity(ids.len());
    for q in 0..ids.len() {
        let mut scores: BTreeMap<(usize, usize), (f64, &str)> = BTreeMap::new();
        for preds in per_model {
            let p = &preds[q].1;
            let entry = scores
                .entry((p.begin, p.end))
                .or_insert((0.0, p.answer_text.as_str()));
            entry.0 += p.confidence;
        }
        // BTreeMap iterates spans in (begin, end) order, so a strict > keeps
        // the tie-break toward the smaller begin then smaller end.
        let mut best: Option<((usize, usize), f64, &str)> = None;
        for (&span, &(score, text)) in &scores {
            if best.map_or(true, |(_, s, _)| score > s) {
                best = Some((span, score, text));
            }
        }
        let ((begin, end), score, text) = best.expect("at least one model");
        choices.push(EnsembleChoice {
            id: ids[q].clone(),
            begin,
            end,
            score,
            answer_text: text.to_string(),
        });
    }
    Ok(choices)
}

/// Counts of questions per membership region over k models: index `mask`
/// counts questions answered correctly by exactly the models whose bit is
/// set in `mask` (bit m = model m).
pub fn overlap_sets(results: &[EvalResult]) -> Result<Vec<usize>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoModels);
    }
    let n = results[0].per_question.len();
    for (m, r) in results.iter().enumerate().skip(1) {
        if r.per_question.len() != n {
            return Err(EvalError::IdMismatch(format!(
                "model 0 has {n} questions, model {m} has {}",
                r.per_question.len()
            )));
        }
        for (q, qr) in r.per_question.iter().enumerate() {
            if qr.id != results[0].per_question[q].id {
                return Err(EvalError::IdMismatch(format!(
                    "question {q}: {:?} vs {:?}",
                    results[0].per_question[q].id, qr.id
                )));
            }
        }
    }
    let mut regions = vec![0usize; 1 << results.len()];
    for q in 0..n {
        let mut mask = 0usize;
        for (m, r) in results.iter().enumerate() {
            if r.per_question[q].em_hit {
                mask |= 1 << m;
            }
        }
        regions[mask] += 1;
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(begin: usize, end: usize, confidence: f64) -> Prediction {
        Prediction { begin, end, confidence, answer_text: format!("span {begin} {end}") }
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("the architect or engineer", "the architect or engineer"), 1);
        assert_eq!(exact_match("uncertainty", "represented uncertainty"), 0);
        assert_eq!(exact_match("a  b", "a b"), 1);
        assert_eq!(exact_match(" a b ", "a b"), 1);
    }

    #[test]
    fn f1_char_examples() {
        assert!((f1_char("abc", "abc") - 1.0).abs() < 1e-12);
        // P = 1, R = 0.5 -> 2/3
        assert!((f1_char("ab", "abcd") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_char("xy", "ab"), 0.0);
        assert_eq!(f1_char("", ""), 1.0);
        assert_eq!(f1_char("a", ""), 0.0);
    }

    #[test]
    fn f1_token_examples() {
        assert!((f1_token("cat", "the cat") - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1_token("the same words", "the same words") - 1.0).abs() < 1e-12);
        assert_eq!(f1_token("apples oranges", "cats dogs"), 0.0);
    }

    #[test]
    fn f1_char_counts_multiplicity() {
        // "aab" vs "ab": common multiset {a, b} size 2; P = 2/3, R = 1
        let f1 = f1_char("aab", "ab");
        assert!((f1 - 0.8).abs() < 1e-12, "{f1}");
    }

    #[test]
    fn ensemble_unanimity() {
        let per_model = vec![
            vec![("q1".to_string(), pred(2, 4, 0.7))],
            vec![("q1".to_string(), pred(2, 4, 0.4))],
            vec![("q1".to_string(), pred(2, 4, 0.9))],
        ];
        let out = ensemble(&per_model).unwrap();
        assert_eq!((out[0].begin, out[0].end), (2, 4));
        assert!((out[0].score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_sum_rule() {
        // one model at 0.9 vs two models summing to 1.0
        let per_model = vec![
            vec![("q1".to_string(), pred(1, 2, 0.9))],
            vec![("q1".to_string(), pred(3, 4, 0.5))],
            vec![("q1".to_string(), pred(3, 4, 0.5))],
        ];
        let out = ensemble(&per_model).unwrap();
        assert_eq!((out[0].begin, out[0].end), (3, 4));
        assert!((out[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_single_model_is_identity() {
        let per_model = vec![vec![
            ("q1".to_string(), pred(0, 1, 0.3)),
            ("q2".to_string(), pred(5, 6, 0.8)),
        ]];
        let out = ensemble(&per_model).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].begin, out[0].end), (0, 1));
        assert_eq!((out[1].begin, out[1].end), (5, 6));
    }

    #[test]
    fn ensemble_tie_prefers_smaller_span_start() {
        let per_model = vec![
            vec![("q1".to_string(), pred(4, 5, 0.5))],
            vec![("q1".to_string(), pred(1, 2, 0.5))],
        ];
        let out = ensemble(&per_model).unwrap();
        assert_eq!((out[0].begin, out[0].end), (1, 2));
    }

    #[test]
    fn ensemble_rejects_misaligned_ids() {
        let per_model = vec![
            vec![("q1".to_string(), pred(0, 0, 0.5))],
            vec![("q2".to_string(), pred(0, 0, 0.5))],
        ];
        assert!(matches!(ensemble(&per_model), Err(EvalError::IdMismatch(_))));
    }

    fn result_from_hits(ids: &[&str], hits: &[bool]) -> EvalResult {
        let per_question = ids
            .iter()
            .zip(hits)
            .map(|(id, &hit)| QuestionResult {
                id: id.to_string(),
                begin: 0,
                end: 0,
                predicted_text: String::new(),
                gold_text: String::new(),
                em_hit: hit,
                f1: if hit { 1.0 } else { 0.0 },
                confidence: 1.0,
            })
            .collect();
        aggregate(Metric::Char, per_question)
    }

    #[test]
    fn aggregate_means_match_hit_pattern() {
        // one exact of two: em 0.5; f1 mean follows per-question values
        let r = result_from_hits(&["a", "b"], &[true, false]);
        assert!((r.em - 0.5).abs() < 1e-12);
        assert!((r.f1 - 0.5).abs() < 1e-12);
        let all = result_from_hits(&["a", "b"], &[true, true]);
        assert_eq!(all.em, 1.0);
        let none = result_from_hits(&["a", "b"], &[false, false]);
        assert_eq!(none.em, 0.0);
    }

    #[test]
    fn overlap_single_model() {
        let ids = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        let hits = [true, true, true, true, true, true, false, false, false, false];
        let regions = overlap_sets(&[result_from_hits(&ids, &hits)]).unwrap();
        assert_eq!(regions, vec![4, 6]);
    }

    #[test]
    fn overlap_identical_models_have_empty_off_diagonal() {
        let ids = ["a", "b", "c"];
        let hits = [true, false, true];
        let r = result_from_hits(&ids, &hits);
        let regions = overlap_sets(&[r.clone(), r]).unwrap();
        assert_eq!(regions, vec![1, 0, 0, 2]);
    }

    #[test]
    fn overlap_three_models_matches_enumeration() {
        let ids = ["a", "b", "c", "d", "e"];
        let h1 = [true, true, false, false, true];
        let h2 = [true, false, true, false, true];
        let h3 = [false, true, true, false, true];
        let results = [
            result_from_hits(&ids, &h1),
            result_from_hits(&ids, &h2),
            result_from_hits(&ids, &h3),
        ];
        let regions = overlap_sets(&results).unwrap();
        let mut expected = vec![0usize; 8];
        for q in 0..ids.len() {
            let mask = usize::from(h1[q]) | (usize::from(h2[q]) << 1) | (usize::from(h3[q]) << 2);
            expected[mask] += 1;
        }
        assert_eq!(regions, expected);
        assert_eq!(regions.iter().sum::<usize>(), ids.len());
    }

    proptest! {
        #[test]
        fn em_on_identical_strings(s in "[ a-z]{0,24}") {
            prop_assert_eq!(exact_match(&s, &s), 1);
        }

        #[test]
        fn em_implies_both_f1s(a in "[ a-z]{0,16}", b in "[ a-z]{0,16}") {
            if exact_match(&a, &b) == 1 {
                prop_assert!((f1_char(&a, &b) - 1.0).abs() < 1e-12);
                prop_assert!((f1_token(&a, &b) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn f1_bounds(a in "[ a-z]{0,16}", b in "[ a-z]{0,16}") {
            for f1 in [f1_char(&a, &b), f1_token(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&f1));
            }
        }

        #[test]
        fn f1_char_is_one_iff_multisets_match(a in "[ a-z]{0,12}", b in "[ a-z]{0,12}") {
            let sort = |s: &str| {
                let mut cs: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
                cs.sort_unstable();
                cs
            };
            let equal = sort(&a) == sort(&b);
            prop_assert_eq!(f1_char(&a, &b) == 1.0, equal);
        }
    }
}
