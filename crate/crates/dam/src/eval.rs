//! Candidate ranking by model likelihood and the retrieval metrics
//! computed from it, plus automatic repetition/richness proxies over
//! greedy decodes.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{round_instances, Dataset, RoundInput};
use crate::error::{DamError, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tape};

/// One round's ranking: scores in candidate order, the induced ranking
/// (candidate indices, best first), the 1-based rank of the ground
/// truth, and the relevance labels.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
    pub gt_rank: usize,
    pub relevance: Vec<f64>,
}

/// Stable descending argsort: ties keep the lower candidate index first.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Scores every candidate by teacher-forced log-likelihood and ranks
/// them.
pub fn rank_candidates<S: Scalar>(
    model: &Model<S>,
    input: &RoundInput,
    candidates: &[Vec<usize>],
    gt_index: usize,
    relevance: Vec<f64>,
    length_normalize: bool,
) -> Result<RankingResult> {
    if candidates.is_empty() {
        return Err(DamError::InvalidArgument("empty candidate list".into()));
    }
    if gt_index >= candidates.len() || relevance.len() != candidates.len() {
        return Err(DamError::InvalidArgument(
            "candidate list, relevance, and gt_index must agree".into(),
        ));
    }
    let mut tape = Tape::inference();
    let kb = model.encode(&mut tape, input)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        scores.push(model.score_response(&mut tape, &kb, candidate, length_normalize)?);
    }
    let order = rank_order(&scores);
    let gt_rank = order
        .iter()
        .position(|&c| c == gt_index)
        .expect("gt_index is a candidate")
        + 1;
    Ok(RankingResult {
        scores,
        order,
        gt_rank,
        relevance,
    })
}

// ── Retrieval metrics ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
}

pub fn retrieval_metrics(results: &[RankingResult]) -> Result<RetrievalMetrics> {
    if results.is_empty() {
        return Err(DamError::InvalidArgument(
            "no ranking results to aggregate".into(),
        ));
    }
    let n = results.len() as f64;
    let recall =
        |k: usize| results.iter().filter(|r| r.gt_rank <= k).count() as f64 / n;
    Ok(RetrievalMetrics {
        mrr: results.iter().map(|r| 1.0 / r.gt_rank as f64).sum::<f64>() / n,
        r_at_1: recall(1),
        r_at_5: recall(5),
        r_at_10: recall(10),
        mean_rank: results.iter().map(|r| r.gt_rank as f64).sum::<f64>() / n,
    })
}

/// Normalized discounted cumulative gain truncated at the number of
/// positively relevant candidates.
pub fn ndcg(order: &[usize], relevance: &[f64]) -> Result<f64> {
    if order.len() != relevance.len() {
        return Err(DamError::InvalidArgument(
            "ranking and relevance lengths differ".into(),
        ));
    }
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Err(DamError::InvalidArgument(
            "NDCG needs at least one positively relevant candidate".into(),
        ));
    }
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &c)| relevance[c] / discount(i))
        .sum();
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, r)| r / discount(i)).sum();
    Ok(dcg / idcg)
}

// ── Text quality proxies ─────────────────────────────────────────────

/// Fraction of responses containing either two identical consecutive
/// tokens or any bigram occurring at least twice.
pub fn repetition_rate<T: Eq + Hash>(responses: &[Vec<T>]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let flagged = responses.iter().filter(|r| is_repetitive(r)).count();
    flagged as f64 / responses.len() as f64
}

fn is_repetitive<T: Eq + Hash>(tokens: &[T]) -> bool {
    if tokens.windows(2).any(|w| w[0] == w[1]) {
        return true;
    }
    let mut seen: HashMap<(&T, &T), usize> = HashMap::new();
    for w in tokens.windows(2) {
        let count = seen.entry((&w[0], &w[1])).or_insert(0);
        *count += 1;
        if *count >= 2 {
            return true;
        }
    }
    false
}

/// Unique n-grams across all responses divided by total n-grams; zero
/// when no n-grams exist.
pub fn distinct_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> f64 {
    debug_assert!(n >= 1);
    let mut total = 0usize;
    let mut unique: std::collections::HashSet<Vec<&T>> = std::collections::HashSet::new();
    for response in responses {
        if response.len() < n {
            continue;
        }
        for gram in response.windows(n) {
            total += 1;
            unique.insert(gram.iter().collect());
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

// ── Full report ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub ndcg: f64,
    pub repetition_rate: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_len: 20,
            length_normalize: false,
        }
    }
}

/// Combines per-round rankings and greedy responses into one report.
pub fn aggregate(results: &[RankingResult], responses: &[Vec<usize>]) -> Result<MetricsReport> {
    let retrieval = retrieval_metrics(results)?;
    let mut ndcg_sum = 0.0;
    for r in results {
        ndcg_sum += ndcg(&r.order, &r.relevance)?;
    }
    Ok(MetricsReport {
        mrr: retrieval.mrr,
        r_at_1: retrieval.r_at_1,
        r_at_5: retrieval.r_at_5,
        r_at_10: retrieval.r_at_10,
        mean_rank: retrieval.mean_rank,
        ndcg: ndcg_sum / results.len() as f64,
        repetition_rate: repetition_rate(responses),
        distinct_1: distinct_n(responses, 1),
        distinct_2: distinct_n(responses, 2),
    })
}

/// Ranks every round's candidates and greedy-decodes every round, then
/// aggregates the full report.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<RankingResult>)> {
    dataset.validate()?;
    let instances = round_instances(dataset, model.vocab())?;
    if instances.is_empty() {
        return Err(DamError::Data("dataset has no rounds to evaluate".into()));
    }
    let mut results = Vec::with_capacity(instances.len());
    let mut responses = Vec::with_capacity(instances.len());
    for instance in &instances {
        let round = &dataset.dialogues[instance.dialogue].rounds[instance.round];
        let candidates: Vec<Vec<usize>> = round
            .candidates
            .iter()
            .map(|c| model.vocab().encode(c))
            .collect();
        results.push(rank_candidates(
            model,
            &instance.input,
            &candidates,
            round.gt_index,
            round.relevance.clone(),
            opts.length_normalize,
        )?);
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &instance.input)?;
        let (tokens, _) = model.greedy_decode(&mut tape, &kb, opts.max_len)?;
        responses.push(tokens);
    }
    let report = aggregate(&results, &responses)?;
    Ok((report, results))
}

/// Greedy responses for every round, with traces; used by the decode and
/// gate-trace commands.
pub fn decode_rounds<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset,
    max_len: usize,
) -> Result<Vec<DecodedRound>> {
    let instances = round_instances(dataset, model.vocab())?;
    let mut out = Vec::with_capacity(instances.len());
    for instance in &instances {
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &instance.input)?;
        let (tokens, traces) = model.greedy_decode(&mut tape, &kb, max_len)?;
        out.push(DecodedRound {
            dialogue: instance.dialogue,
            round: instance.round,
            tokens,
            traces,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DecodedRound {
    pub dialogue: usize,
    pub round: usize,
    pub tokens: Vec<usize>,
    pub traces: Vec<crate::decoder::StepTrace>,
}
