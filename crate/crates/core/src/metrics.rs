//! Training losses and evaluation metrics.
//!
//! The Cox loss is the negative partial log-likelihood with Breslow ties:
//! every subject with `t_j >= t_i` is at risk at `t_i`, so tied events share
//! one denominator. Censored subjects at exactly `t_i` are at risk.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Function, Tape, Tensor, Var};

/// Observed time and event indicator of one subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::Argument(format!("survival time must be positive, got {time}")));
        }
        Ok(Self { time, event })
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]` for plain values.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            op: "cross_entropy",
            index: label,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

struct CrossEntropy {
    label: usize,
}

impl Function for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        if inputs[0].ndim() != 1 {
            return Err(Error::dim("cross_entropy", format!("logits shape {:?}", inputs[0].shape())));
        }
        Ok(Tensor::scalar(cross_entropy_value(inputs[0].data(), self.label)?))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = g.item()?;
        let mut p = inputs[0].data().to_vec();
        softmax_in_place(&mut p);
        p[self.label] -= 1.0;
        Ok(vec![Some(Tensor::vector(p.into_iter().map(|v| g * v).collect()))])
    }
}

/// Differentiable cross-entropy of a logit vector against a class index.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.apply(CrossEntropy { label }, &[logits])
}

/// Subjects ordered by time, descending; ties keep input order.
fn by_time_desc(records: &[SurvivalRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    order
}

/// Runs of equal time within `order`.
fn time_groups<'a>(order: &'a [usize], records: &'a [SurvivalRecord]) -> impl Iterator<Item = &'a [usize]> {
    order.chunk_by(move |&a, &b| records[a].time == records[b].time)
}

/// For every subject, `log Σ_{j: t_j >= t_i} exp(r_j)`.
fn at_risk_log_denominators(risks: &[f64], records: &[SurvivalRecord]) -> Vec<f64> {
    let order = by_time_desc(records);
    let mut lse = f64::NEG_INFINITY;
    let mut out = vec![0.0; risks.len()];
    for group in time_groups(&order, records) {
        for &j in group {
            lse = log_add_exp(lse, risks[j]);
        }
        for &i in group {
            out[i] = lse;
        }
    }
    out
}

fn check_cox_inputs(risks: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if risks.len() != records.len() {
        return Err(Error::Count(format!(
            "{} risks for {} survival records",
            risks.len(),
            records.len()
        )));
    }
    if risks.is_empty() {
        return Err(Error::dim("cox_loss", "empty cohort"));
    }
    Ok(())
}

/// `-Σ_{events} (r_i - log Σ_{t_j >= t_i} exp(r_j))` for plain values.
pub fn cox_nll_value(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    check_cox_inputs(risks, records)?;
    let denom = at_risk_log_denominators(risks, records);
    Ok(records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.event)
        .map(|(i, _)| denom[i] - risks[i])
        .sum())
}

struct CoxNll {
    records: Vec<SurvivalRecord>,
}

impl Function for CoxNll {
    fn name(&self) -> &'static str {
        "cox_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        if inputs[0].ndim() != 1 {
            return Err(Error::dim("cox_loss", format!("risks shape {:?}", inputs[0].shape())));
        }
        Ok(Tensor::scalar(cox_nll_value(inputs[0].data(), &self.records)?))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = g.item()?;
        let risks = inputs[0].data();
        let records = &self.records;
        let denom = at_risk_log_denominators(risks, records);
        // d/dr_j = -δ_j + Σ_{events i: t_i <= t_j} exp(r_j - denom_i);
        // accumulate log Σ exp(-denom_i) over events in ascending time
        let mut order = by_time_desc(records);
        order.reverse();
        let mut acc = f64::NEG_INFINITY;
        let mut grad = vec![0.0; risks.len()];
        for group in time_groups(&order, records) {
            for &i in group {
                if records[i].event {
                    acc = log_add_exp(acc, -denom[i]);
                }
            }
            for &j in group {
                let share = if acc == f64::NEG_INFINITY {
                    0.0
                } else {
                    (risks[j] + acc).exp()
                };
                let own = if records[j].event { 1.0 } else { 0.0 };
                grad[j] = g * (share - own);
            }
        }
        Ok(vec![Some(Tensor::vector(grad))])
    }
}

/// Cox loss on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CoxLoss {
    pub loss: Var,
    /// Set when the batch has no events: the loss is just the penalty.
    pub degenerate: bool,
}

/// Negative partial log-likelihood of `risks[n]` plus `lambda * theta_sq_norm`.
pub fn cox_loss(
    tape: &mut Tape,
    risks: Var,
    records: &[SurvivalRecord],
    lambda: f64,
    theta_sq_norm: Option<Var>,
) -> Result<CoxLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("penalty weight must be non-negative, got {lambda}")));
    }
    let degenerate = !records.iter().any(|r| r.event);
    let nll = tape.apply(
        CoxNll {
            records: records.to_vec(),
        },
        &[risks],
    )?;
    let loss = match theta_sq_norm {
        Some(norm) if lambda > 0.0 => {
            let penalty = tape.scale(norm, lambda)?;
            tape.add(nll, penalty)?
        }
        _ => nll,
    };
    Ok(CoxLoss { loss, degenerate })
}

/// Fenwick tree over risk ranks.
struct RankCounter {
    tree: Vec<usize>,
}

impl RankCounter {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn insert(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> usize {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index.
///
/// A pair is comparable when `t_i < t_j` and subject `i` had the event; it is
/// concordant when `r_i > r_j` and counts one half when the risks tie. Pairs
/// with equal times are skipped.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    check_cox_inputs(risks, records)?;
    if risks.len() < 2 {
        return Err(Error::Undefined("c-index needs at least two subjects".into()));
    }
    // dense ranks of the risks
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.binary_search_by(|x| x.total_cmp(&r)).expect("present");
    let ranks: Vec<usize> = risks.iter().map(|&r| rank(r)).collect();

    let order = by_time_desc(records);
    let mut counter = RankCounter::new(sorted.len());
    let mut inserted = 0usize;
    let mut comparable = 0usize;
    let mut concordant2 = 0usize; // in half-units
    for group in time_groups(&order, records) {
        for &i in group {
            if !records[i].event {
                continue;
            }
            let below = counter.below(ranks[i]);
            let tied = counter.below(ranks[i] + 1) - below;
            comparable += inserted;
            concordant2 += 2 * below + tied;
        }
        for &j in group {
            counter.insert(ranks[j]);
            inserted += 1;
        }
    }
    if comparable == 0 {
        return Err(Error::Undefined("no comparable pairs".into()));
    }
    Ok(concordant2 as f64 / (2 * comparable) as f64)
}

/// Mann–Whitney AUC with mid-ranks; tied scores count one half.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Count(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]].total_cmp(&scores[order[start]]) == Ordering::Equal {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let mid = (start + 1 + end) as f64 / 2.0;
        rank_sum_pos += mid * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over the classes that have both positives and
/// negatives. `probs` is `n × C`.
pub fn auc_macro_ovr(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = probs.dims2("auc_macro_ovr")?;
    if n != labels.len() {
        return Err(Error::Count(format!("{n} score rows for {} labels", labels.len())));
    }
    let mut total = 0.0;
    let mut used = 0;
    for class in 0..c {
        let scores: Vec<f64> = (0..n).map(|i| probs.row(i)[class]).collect();
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        match auc_binary(&scores, &is_pos) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(Error::Undefined(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    Ok(total / used as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Count(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Undefined("accuracy of zero samples".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
