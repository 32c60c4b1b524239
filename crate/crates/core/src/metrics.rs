//! Discrimination and calibration metrics over per-example scores.
//!
//! Scores are oriented so that higher means "answerable" (label `true`).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scores of one method with their gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub method: String,
    pub pairs: Vec<(String, f64, bool)>,
    #[serde(default)]
    pub metadata: String,
}

impl ScoredSet {
    pub fn new(method: impl Into<String>, pairs: Vec<(String, f64, bool)>) -> Self {
        Self { method: method.into(), pairs, metadata: String::new() }
    }

    /// Builds a set with generated ids, mostly for tests.
    pub fn from_scores(method: impl Into<String>, scores: &[f64], labels: &[bool]) -> Self {
        assert_eq!(scores.len(), labels.len());
        let pairs = scores.iter().zip(labels).enumerate().map(|(i, (&s, &l))| (i.to_string(), s, l)).collect();
        Self::new(method, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.pairs.iter().filter(|p| p.2).count();
        (pos, self.pairs.len() - pos)
    }

    fn check(&self) -> Result<()> {
        if let Some(p) = self.pairs.iter().find(|p| !p.1.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: non-finite score for {}", self.method, p.0)));
        }
        match self.class_counts() {
            (0, _) | (_, 0) => {
                Err(Error::SingleClass(format!("{}: needs both answerable and unanswerable examples", self.method)))
            }
            _ => Ok(()),
        }
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic,
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, from average ranks in `O(n log n)`.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    set.check()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.pairs[a].1.total_cmp(&set.pairs[b].1));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.pairs[order[j + 1]].1 == set.pairs[order[i]].1 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| set.pairs[k].2).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = set.class_counts();
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// AUROC after discarding the lowest-scoring `reject_fraction` of examples
/// (`floor(fraction · n)` of them; ties broken by input order).
pub fn rejection_auroc(set: &ScoredSet, reject_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&reject_fraction) {
        return Err(Error::InvalidArgument(format!("reject fraction {reject_fraction} not in [0, 1)")));
    }
    set.check()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.pairs[a].1.total_cmp(&set.pairs[b].1).then(a.cmp(&b)));
    let drop = (reject_fraction * set.len() as f64).floor() as usize;
    let mut kept: Vec<usize> = order[drop..].to_vec();
    kept.sort_unstable();
    let remainder = ScoredSet {
        method: format!("{}@reject{reject_fraction}", set.method),
        pairs: kept.into_iter().map(|i| set.pairs[i].clone()).collect(),
        metadata: set.metadata.clone(),
    };
    auroc(&remainder).map_err(|e| match e {
        Error::SingleClass(_) => Error::SingleClass(format!(
            "{}: only one class left after rejecting {drop} of {} examples",
            set.method,
            set.len()
        )),
        other => other,
    })
}

/// Class means and their difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub mean_ans: f64,
    pub mean_unans: f64,
    pub delta: f64,
}

pub fn delta_groups(set: &ScoredSet) -> Result<GroupDelta> {
    set.check()?;
    let mean = |label: bool| {
        let v: Vec<f64> = set.pairs.iter().filter(|p| p.2 == label).map(|p| p.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (mean_ans, mean_unans) = (mean(true), mean(false));
    Ok(GroupDelta { mean_ans, mean_unans, delta: mean_ans - mean_unans })
}

/// Logistic map from a raw score to a probability of "answerable".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub weight: f64,
    pub bias: f64,
    pub trained_on: usize,
}

const CALIBRATION_ITERATIONS: usize = 100;
const PROB_FLOOR: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Calibrator {
    /// Probability in the open interval (0, 1).
    pub fn predict(&self, score: f64) -> f64 {
        sigmoid(self.weight * score + self.bias).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }
}

/// Maximum-likelihood logistic regression of label on score.
///
/// Newton's method from `(0, 0)` on the standardised score for at most a
/// fixed number of iterations, so separable data yields large but finite
/// coefficients.
pub fn fit_calibrator(train: &ScoredSet) -> Result<Calibrator> {
    train.check()?;
    let n = train.len() as f64;
    let xs: Vec<f64> = train.pairs.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = train.pairs.iter().map(|p| if p.2 { 1.0 } else { 0.0 }).collect();
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let zs: Vec<f64> = xs.iter().map(|x| (x - mean) / sd).collect();

    let (mut w, mut b) = (0.0f64, 0.0f64);
    for _ in 0..CALIBRATION_ITERATIONS {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (z, y) in zs.iter().zip(&ys) {
            let u = w * z + b;
            // 1 - σ(u) written as σ(-u) so both classes round alike
            let (p, q) = (sigmoid(u), sigmoid(-u));
            let r = if *y > 0.5 { q } else { -p };
            let s = p * q;
            gw += r * z;
            gb += r;
            hww += s * z * z;
            hwb += s * z;
            hbb += s;
        }
        // small ridge keeps the Hessian invertible once the fit saturates
        let (hww, hbb) = (hww + 1e-9, hbb + 1e-9);
        let det = hww * hbb - hwb * hwb;
        if det <= 0.0 || !det.is_finite() {
            break;
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        w += dw;
        b += db;
        if dw.abs().max(db.abs()) < 1e-12 {
            break;
        }
    }
    // back to the raw score scale: w·(x-mean)/sd + b
    let weight = w / sd;
    Ok(Calibrator { weight, bias: b - weight * mean, trained_on: train.len() })
}

/// Expected calibration error with `bins` equal-width bins over [0, 1]:
/// `Σ_b (n_b / N) · |acc_b − conf_b|`.
pub fn ece(calibrated: &[(f64, bool)], bins: usize) -> Result<f64> {
    if calibrated.is_empty() {
        return Err(Error::Empty("calibrated predictions"));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    if let Some((p, _)) = calibrated.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    // canonical order makes the sum independent of input order
    let mut sorted = calibrated.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for &(p, y) in &sorted {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += if y { 1.0 } else { 0.0 };
    }
    let n = sorted.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// Cost of one scoring method over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct OverheadCounter {
    pub method: String,
    pub forward_passes: u64,
    pub tokens_processed: u64,
}

impl OverheadCounter {
    pub fn new(method: impl Into<String>) -> Self {
        Self { method: method.into(), ..Default::default() }
    }

    pub fn add(&mut self, passes: u64, tokens: u64) {
        self.forward_passes += passes;
        self.tokens_processed += tokens;
    }
}

/// Tokens processed relative to a reference method.
pub fn overhead_ratio(counters: &OverheadCounter, reference: &OverheadCounter) -> Result<f64> {
    if reference.tokens_processed == 0 {
        return Err(Error::InvalidArgument(format!("reference {} processed no tokens", reference.method)));
    }
    Ok(counters.tokens_processed as f64 / reference.tokens_processed as f64)
}
