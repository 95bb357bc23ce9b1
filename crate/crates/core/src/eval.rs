//! Evaluation: conditional MSE, loss-difference sweeps over the gate time,
//! mislabel detection scores, purification splits and histograms.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{polar_to_euclidean, Dataset, Polar, Sample};
use crate::error::{Result, SpfmError};
use crate::flow::{self, GateDecision, GateRecord};
use crate::net::ModelParameters;
use crate::rng::{self, domain};

/// Mean of `‖generated_i − euclid(condition_i)‖²`.
pub fn conditional_mse(generated: &[[f64; 2]], conditions: &[Polar]) -> Result<f64> {
    if generated.len() != conditions.len() {
        return Err(SpfmError::Input(format!(
            "conditional_mse: {} generated points but {} conditions",
            generated.len(),
            conditions.len()
        )));
    }
    if generated.is_empty() {
        return Err(SpfmError::Input("conditional_mse: no points".into()));
    }
    let mut sum = 0.0;
    for (g, &c) in generated.iter().zip(conditions) {
        sum += crate::net::sq_dist(*g, polar_to_euclidean(c)?);
    }
    Ok(sum / generated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelState {
    Correct,
    Incorrect,
}

impl LabelState {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelState::Correct => "correct",
            LabelState::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub x1: [f64; 2],
    pub condition: Polar,
    pub label_state: LabelState,
}

impl LabeledSample {
    /// Label state from a dataset sample's corruption flag.
    pub fn from_sample(s: &Sample) -> Self {
        LabeledSample {
            x1: s.x1,
            condition: s.condition,
            label_state: if s.corrupted {
                LabelState::Incorrect
            } else {
                LabelState::Correct
            },
        }
    }
}

/// Each sample twice: once with its own condition (`Correct`), once with the
/// condition of another sample (`Incorrect`). The mismatch is a random
/// cyclic derangement, so no sample keeps its own label.
pub fn mismatched_label_set(samples: &[Sample], seed: u64) -> Result<Vec<LabeledSample>> {
    if samples.len() < 2 {
        return Err(SpfmError::Input(
            "need at least two samples to build mismatched labels".into(),
        ));
    }
    let n = samples.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, domain::EVAL, 0));
    let mut donor = vec![0usize; n];
    for k in 0..n {
        donor[perm[k]] = perm[(k + 1) % n];
    }
    let correct = samples.iter().map(|s| LabeledSample {
        x1: s.x1,
        condition: s.original_condition,
        label_state: LabelState::Correct,
    });
    let incorrect = samples.iter().enumerate().map(|(i, s)| LabeledSample {
        x1: s.x1,
        condition: samples[donor[i]].original_condition,
        label_state: LabelState::Incorrect,
    });
    Ok(correct.chain(incorrect).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDiffRecord {
    pub sample_index: usize,
    pub t_prime: f64,
    /// `L_cond − L_uncond`.
    pub loss_diff: f64,
    pub label_state: LabelState,
}

/// [`loss_diff_sweep_averaged`] with a single noise draw per sample.
pub fn loss_diff_sweep(
    params: &ModelParameters,
    samples: &[LabeledSample],
    t_list: &[f64],
    noise_seed: u64,
) -> Result<Vec<LossDiffRecord>> {
    loss_diff_sweep_averaged(params, samples, t_list, noise_seed, 1)
}

/// Loss differences for every `(t', sample)` pair, grouped by `t'` in the
/// order given.
///
/// Sample `i` draws `draws` noise vectors from stream `i` of `noise_seed`;
/// the same vectors are reused at every `t'`, and the reported difference is
/// their mean. Both losses of a draw share the same interpolated point.
pub fn loss_diff_sweep_averaged(
    params: &ModelParameters,
    samples: &[LabeledSample],
    t_list: &[f64],
    noise_seed: u64,
    draws: usize,
) -> Result<Vec<LossDiffRecord>> {
    if draws == 0 {
        return Err(SpfmError::Input("loss-diff sweep needs at least one draw".into()));
    }
    check_t_list(t_list)?;
    let noise: Vec<Vec<[f64; 2]>> = (0..samples.len())
        .map(|i| {
            let mut r = rng::stream(noise_seed, domain::SWEEP, i as u64);
            (0..draws)
                .map(|_| [r.sample(StandardNormal), r.sample(StandardNormal)])
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(t_list.len() * samples.len());
    for &t in t_list {
        let mut sums = vec![0.0; samples.len()];
        for d in 0..draws {
            let items: Vec<_> = samples
                .iter()
                .zip(&noise)
                .map(|(s, n)| (s.x1, s.condition, n[d]))
                .collect();
            let recs = flow::gate_batch(params, &items, t).map_err(|e| match e {
                SpfmError::Numeric(m) => SpfmError::Numeric(format!("t'={t}, draw {d}: {m}")),
                other => other,
            })?;
            for (sum, r) in sums.iter_mut().zip(&recs) {
                *sum += r.l_cond - r.l_uncond;
            }
        }
        for (i, (s, sum)) in samples.iter().zip(sums).enumerate() {
            out.push(LossDiffRecord {
                sample_index: i,
                t_prime: t,
                loss_diff: sum / draws as f64,
                label_state: s.label_state,
            });
        }
    }
    Ok(out)
}

pub fn check_t_list(t_list: &[f64]) -> Result<()> {
    if t_list.is_empty() {
        return Err(SpfmError::Input("t' list is empty".into()));
    }
    if let Some(t) = t_list.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(SpfmError::Input(format!("t' must lie in (0, 1), got {t}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub t_prime: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
    /// Set when the group has no predicted positives or no actual positives;
    /// F1 is then reported as 0.
    pub zero_positive: bool,
}

/// Precision, recall and F1 per `t'` for "predict Incorrect iff
/// `loss_diff > threshold`". Groups appear in first-seen order.
pub fn detection_scores(records: &[LossDiffRecord], threshold: f64) -> Result<Vec<DetectionScore>> {
    if records.is_empty() {
        return Err(SpfmError::Input("detection_scores: no records".into()));
    }
    let mut order: Vec<u64> = Vec::new();
    let mut groups: BTreeMap<u64, [usize; 4]> = BTreeMap::new();
    for r in records {
        let key = r.t_prime.to_bits();
        let counts = groups.entry(key).or_insert_with(|| {
            order.push(key);
            [0; 4]
        });
        let predicted = r.loss_diff > threshold;
        let actual = r.label_state == LabelState::Incorrect;
        let slot = match (predicted, actual) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts[slot] += 1;
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let [tp, fp, fneg, tn] = groups[&key];
            score_from_counts(f64::from_bits(key), threshold, tp, fp, fneg, tn)
        })
        .collect())
}

fn score_from_counts(t_prime: f64, threshold: f64, tp: usize, fp: usize, fneg: usize, tn: usize) -> DetectionScore {
    let predicted = tp + fp;
    let actual = tp + fneg;
    let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
    let recall = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    DetectionScore {
        t_prime,
        threshold,
        precision,
        recall,
        f1,
        true_pos: tp,
        false_pos: fp,
        false_neg: fneg,
        true_neg: tn,
        zero_positive: predicted == 0 || actual == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurificationReport {
    pub retained: usize,
    pub filtered: usize,
    pub retained_corrupted: usize,
    pub filtered_corrupted: usize,
}

impl PurificationReport {
    fn rate(corrupted: usize, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            corrupted as f64 / total as f64
        }
    }

    /// Ground-truth corruption rate among retained samples (0 when empty).
    pub fn retained_corruption_rate(&self) -> f64 {
        Self::rate(self.retained_corrupted, self.retained)
    }

    /// Ground-truth corruption rate among filtered samples (0 when empty).
    pub fn filtered_corruption_rate(&self) -> f64 {
        Self::rate(self.filtered_corrupted, self.filtered)
    }
}

/// Split the dataset by gate decision. `records` must hold exactly one
/// record per sample (typically the final epoch's).
pub fn purification_report(dataset: &Dataset, records: &[GateRecord]) -> Result<PurificationReport> {
    let mut decision: Vec<Option<GateDecision>> = vec![None; dataset.len()];
    for r in records {
        let slot = decision.get_mut(r.sample_index).ok_or_else(|| {
            SpfmError::Input(format!(
                "gate record for sample {} but dataset has {} samples",
                r.sample_index,
                dataset.len()
            ))
        })?;
        if slot.replace(r.decision).is_some() {
            return Err(SpfmError::Input(format!(
                "more than one gate record for sample {}",
                r.sample_index
            )));
        }
    }
    let mut report = PurificationReport {
        retained: 0,
        filtered: 0,
        retained_corrupted: 0,
        filtered_corrupted: 0,
    };
    for (i, (d, s)) in decision.iter().zip(&dataset.samples).enumerate() {
        match d {
            None => {
                return Err(SpfmError::Input(format!("no gate record for sample {i}")));
            }
            Some(GateDecision::TrainConditional) => {
                report.retained += 1;
                report.retained_corrupted += usize::from(s.corrupted);
            }
            Some(GateDecision::TrainUnconditional) => {
                report.filtered += 1;
                report.filtered_corrupted += usize::from(s.corrupted);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub t_prime: f64,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

/// Equal-width histogram of the loss differences recorded at `t_prime`,
/// split by label state. A degenerate range is widened to unit width
/// around the single observed value.
pub fn export_histogram(records: &[LossDiffRecord], t_prime: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(SpfmError::Input("histogram needs at least one bin".into()));
    }
    let values: Vec<&LossDiffRecord> = records.iter().filter(|r| r.t_prime == t_prime).collect();
    if values.is_empty() {
        return Err(SpfmError::Input(format!("no loss-diff records at t'={t_prime}")));
    }
    let lo = values.iter().map(|r| r.loss_diff).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|r| r.loss_diff).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|k| if k == bins { hi } else { lo + width * k as f64 })
        .collect();
    let mut correct = vec![0; bins];
    let mut incorrect = vec![0; bins];
    for r in values {
        let mut b = ((r.loss_diff - lo) / width).floor() as usize;
        if b >= bins {
            b = bins - 1;
        }
        match r.label_state {
            LabelState::Correct => correct[b] += 1,
            LabelState::Incorrect => incorrect[b] += 1,
        }
    }
    Ok(Histogram {
        t_prime,
        edges,
        correct,
        incorrect,
    })
}

/// Per-`t'` mean loss difference and its standard error for one label state.
pub fn loss_diff_summary(records: &[LossDiffRecord], t_prime: f64, state: LabelState) -> Option<(f64, f64, usize)> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.t_prime == t_prime && r.label_state == state)
        .map(|r| r.loss_diff)
        .collect();
    if v.len() < 2 {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt(), v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_circles;
    use crate::net::{default_widths, init_params};

    fn rec(diff: f64, state: LabelState) -> LossDiffRecord {
        LossDiffRecord {
            sample_index: 0,
            t_prime: 0.5,
            loss_diff: diff,
            label_state: state,
        }
    }

    #[test]
    fn mse_examples() {
        let conds = [Polar::new(0.3, 1.0), Polar::new(2.0, 2.0)];
        let exact: Vec<_> = conds.iter().map(|&c| polar_to_euclidean(c).unwrap()).collect();
        assert_eq!(conditional_mse(&exact, &conds).unwrap(), 0.0);
        assert_eq!(conditional_mse(&[[0.0, 0.0]], &[Polar::new(0.0, 1.0)]).unwrap(), 1.0);
        assert!(conditional_mse(&exact[..1], &conds).is_err());
        assert!(conditional_mse(&[], &[]).is_err());
    }

    #[test]
    fn mse_under_translation_matches_recomputation() {
        let mut r = rng::stream(3, 0, 0);
        for _ in 0..10 {
            let n = 1 + r.random_range(0..20);
            let conds: Vec<Polar> = (0..n)
                .map(|_| Polar::new(r.random::<f64>() * 6.0, r.random::<f64>() * 3.0))
                .collect();
            let gen: Vec<[f64; 2]> = (0..n).map(|_| [r.random::<f64>() - 0.5, r.random::<f64>() * 2.0]).collect();
            let d = [r.random::<f64>() - 0.5, r.random::<f64>() - 0.5];
            let shifted: Vec<[f64; 2]> = gen.iter().map(|g| [g[0] + d[0], g[1] + d[1]]).collect();
            let mut brute = 0.0;
            for (g, c) in shifted.iter().zip(&conds) {
                let tx = c.radius * c.angle.cos();
                let ty = c.radius * c.angle.sin();
                brute += (g[0] - tx).powi(2) + (g[1] - ty).powi(2);
            }
            brute /= n as f64;
            let got = conditional_mse(&shifted, &conds).unwrap();
            assert!((got - brute).abs() <= 1e-12 * brute.max(1.0));
        }
    }

    #[test]
    fn detection_examples() {
        let all_pos = vec![rec(1.0, LabelState::Incorrect), rec(2.0, LabelState::Incorrect)];
        let s = detection_scores(&all_pos, 0.0).unwrap()[0];
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let none = vec![rec(-1.0, LabelState::Incorrect), rec(-2.0, LabelState::Correct)];
        let s = detection_scores(&none, 0.0).unwrap()[0];
        assert_eq!((s.recall, s.f1), (0.0, 0.0));
        assert!(s.zero_positive);

        let four = vec![
            rec(1.0, LabelState::Incorrect),
            rec(1.0, LabelState::Correct),
            rec(-1.0, LabelState::Correct),
            rec(-1.0, LabelState::Incorrect),
        ];
        let s = detection_scores(&four, 0.0).unwrap()[0];
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert!(!s.zero_positive);
        assert!(detection_scores(&[], 0.0).is_err());
    }

    #[test]
    fn detection_groups_by_t_in_first_seen_order() {
        let mut recs = Vec::new();
        for t in [0.9, 0.1, 0.5] {
            recs.push(LossDiffRecord { sample_index: 0, t_prime: t, loss_diff: t - 0.4, label_state: LabelState::Incorrect });
        }
        let scores = detection_scores(&recs, 0.0).unwrap();
        let ts: Vec<f64> = scores.iter().map(|s| s.t_prime).collect();
        assert_eq!(ts, vec![0.9, 0.1, 0.5]);
        assert_eq!(scores[1].f1, 0.0);
        assert_eq!(scores[0].f1, 1.0);
    }

    #[test]
    fn zero_field_sweep_ties_everywhere() {
        let p = ModelParameters::zeros(&default_widths()).unwrap();
        let ds = gen_two_circles(20, 1).unwrap();
        let set = mismatched_label_set(&ds.samples, 2).unwrap();
        let recs = loss_diff_sweep(&p, &set, &[0.1, 0.5, 0.9], 3).unwrap();
        assert_eq!(recs.len(), 3 * 40);
        assert!(recs.iter().all(|r| r.loss_diff == 0.0));
        for s in detection_scores(&recs, 0.0).unwrap() {
            assert_eq!(s.f1, 0.0);
            assert!(s.zero_positive);
            assert_eq!(s.true_pos + s.false_pos, 0);
        }
    }

    #[test]
    fn sweep_rejects_bad_times() {
        let p = ModelParameters::zeros(&default_widths()).unwrap();
        let ds = gen_two_circles(4, 1).unwrap();
        let set = mismatched_label_set(&ds.samples, 2).unwrap();
        for bad in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(loss_diff_sweep(&p, &set, &[0.5, bad], 1).is_err());
        }
        assert!(loss_diff_sweep_averaged(&p, &set, &[0.5], 1, 0).is_err());
    }

    #[test]
    fn averaged_sweep_with_one_draw_matches_plain_sweep() {
        let p = init_params(3, &default_widths()).unwrap();
        let ds = gen_two_circles(10, 1).unwrap();
        let set = mismatched_label_set(&ds.samples, 2).unwrap();
        let a = loss_diff_sweep(&p, &set, &[0.3, 0.7], 5).unwrap();
        let b = loss_diff_sweep_averaged(&p, &set, &[0.3, 0.7], 5, 1).unwrap();
        assert_eq!(a, b);
        let c = loss_diff_sweep_averaged(&p, &set, &[0.3, 0.7], 5, 4).unwrap();
        assert_eq!(c.len(), a.len());
    }

    #[test]
    fn mismatched_set_never_keeps_own_label() {
        let ds = gen_two_circles(50, 1).unwrap();
        let set = mismatched_label_set(&ds.samples, 9).unwrap();
        assert_eq!(set.len(), 100);
        for (i, s) in set[50..].iter().enumerate() {
            assert_eq!(s.label_state, LabelState::Incorrect);
            assert_ne!(s.condition, ds.samples[i].condition);
            assert_eq!(s.x1, ds.samples[i].x1);
        }
        assert!(set[..50].iter().all(|s| s.label_state == LabelState::Correct));
        assert!(mismatched_label_set(&ds.samples[..1], 1).is_err());
    }

    fn record(i: usize, d: GateDecision) -> GateRecord {
        GateRecord { sample_index: i, epoch: 10, l_cond: 0.0, l_uncond: 0.0, decision: d, t_prime: 0.5, x0: [0.0; 2] }
    }

    #[test]
    fn purification_examples() {
        let clean = gen_two_circles(10, 1).unwrap();
        let ds = crate::data::corrupt_labels(&clean, 0.3, 4, Default::default()).unwrap();
        let all: Vec<_> = (0..10).map(|i| record(i, GateDecision::TrainConditional)).collect();
        let r = purification_report(&ds, &all).unwrap();
        assert_eq!((r.retained, r.filtered), (10, 0));
        assert_eq!(r.filtered_corruption_rate(), 0.0);

        let perfect: Vec<_> = ds
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                record(i, if s.corrupted { GateDecision::TrainUnconditional } else { GateDecision::TrainConditional })
            })
            .collect();
        let r = purification_report(&ds, &perfect).unwrap();
        assert_eq!(r.filtered_corruption_rate(), 1.0);
        assert_eq!(r.retained_corruption_rate(), 0.0);
        assert_eq!(r.filtered, 3);

        assert!(purification_report(&ds, &all[..9]).is_err());
        let mut dup = all.clone();
        dup.push(record(3, GateDecision::TrainConditional));
        assert!(purification_report(&ds, &dup).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = export_histogram(&[rec(0.7, LabelState::Correct)], 0.5, 5).unwrap();
        assert_eq!(h.correct.iter().sum::<usize>(), 1);
        assert_eq!(h.correct.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.edges.len(), 6);

        let recs: Vec<_> = (0..30)
            .map(|i| rec(i as f64 * 0.37 - 4.0, if i % 3 == 0 { LabelState::Incorrect } else { LabelState::Correct }))
            .collect();
        let h = export_histogram(&recs, 0.5, 1).unwrap();
        assert_eq!(h.correct, vec![20]);
        assert_eq!(h.incorrect, vec![10]);
        let h = export_histogram(&recs, 0.5, 7).unwrap();
        assert_eq!(h.correct.iter().sum::<usize>(), 20);
        assert_eq!(h.incorrect.iter().sum::<usize>(), 10);
        assert_eq!(h.edges[0], recs[0].loss_diff);
        assert_eq!(*h.edges.last().unwrap(), recs[29].loss_diff);

        assert!(export_histogram(&[], 0.5, 3).is_err());
        assert!(export_histogram(&recs, 0.5, 0).is_err());
        assert!(export_histogram(&recs, 0.3, 3).is_err());
    }
}
