//! Time-lagged PC skeleton search over transition samples.
//!
//! Candidate causes are the `n + c` coordinates at `t-1`, effects the `n` state
//! coordinates at `t`. All edges are oriented by time, so only the skeleton
//! phase of PC is needed. Conditioning sets are drawn from the effect's other
//! current candidate causes, one size level at a time, against an adjacency
//! snapshot taken at the start of each level (order-independent "stable" PC).

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::env::TransitionSample;
use crate::error::{Error, Result};
use crate::graph::CausalAdjacencyMatrix;
use crate::kci::{KciEngine, KciOptions};

/// Score given to an edge kept only because its test failed.
pub const LOW_CONFIDENCE_SCORE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcOptions {
    pub alpha: f64,
    pub max_cond_size: usize,
    pub kci: KciOptions,
}

impl Default for PcOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            max_cond_size: 3,
            kci: KciOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub estimate: CausalAdjacencyMatrix,
    /// `(n + c) x n` confidence that each edge exists, in `[0, 1]`.
    pub edge_scores: Vec<Vec<f64>>,
    pub tests_run: usize,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
    /// Edges kept because a conditional-independence test errored.
    pub low_confidence: Vec<(usize, usize)>,
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Skeleton search with default options apart from `alpha` and `max_cond_size`.
pub fn timelagged_pc(
    data: &[TransitionSample],
    alpha: f64,
    max_cond_size: usize,
) -> Result<DiscoveryReport> {
    timelagged_pc_with(
        data,
        &PcOptions {
            alpha,
            max_cond_size,
            ..PcOptions::default()
        },
    )
}

pub fn timelagged_pc_with(data: &[TransitionSample], opts: &PcOptions) -> Result<DiscoveryReport> {
    let start = Instant::now();
    if data.len() < 30 {
        return Err(Error::InvalidArgument(format!(
            "causal discovery needs at least 30 samples, got {}",
            data.len()
        )));
    }
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {}",
            opts.alpha
        )));
    }
    let n = data[0].next_state.len();
    let c = data[0].action.len();
    if data
        .iter()
        .any(|s| s.prev_state.len() != n || s.next_state.len() != n || s.action.len() != c)
    {
        return Err(Error::DimensionMismatch(
            "transition samples disagree on dimensions".into(),
        ));
    }

    // A canonical order makes the result independent of how the set was listed.
    let mut rows: Vec<Vec<f64>> = data
        .iter()
        .map(|s| {
            let mut r = s.input();
            r.extend_from_slice(&s.next_state);
            r
        })
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let causes = n + c;
    let columns: Vec<Vec<f64>> = (0..causes + n)
        .map(|k| rows.iter().map(|r| r[k]).collect())
        .collect();
    let engine = KciEngine::new(columns, opts.kci.clone())?;

    let mut estimate = CausalAdjacencyMatrix::full(n, c);
    let mut scores = vec![vec![1.0; n]; causes];
    let mut low_confidence = Vec::new();
    let mut tests_run = 0;

    for level in 0..=opts.max_cond_size {
        let snapshot = estimate.clone();
        let mut testable = false;
        for effect in 0..n {
            let parents = snapshot.parents(effect);
            for &cause in &parents {
                let others: Vec<usize> = parents.iter().copied().filter(|&p| p != cause).collect();
                if others.len() < level {
                    continue;
                }
                testable = true;
                if low_confidence.contains(&(cause, effect)) {
                    continue;
                }
                for set in Combinations::new(&others, level) {
                    tests_run += 1;
                    match engine.test(cause, causes + effect, &set, opts.alpha) {
                        Ok(result) if result.independent => {
                            estimate.set(cause, effect, false);
                            scores[cause][effect] = (1.0 - result.p_value).clamp(0.0, 1.0);
                            break;
                        }
                        Ok(_) => {}
                        Err(_) => {
                            low_confidence.push((cause, effect));
                            scores[cause][effect] = LOW_CONFIDENCE_SCORE;
                            break;
                        }
                    }
                }
            }
        }
        if !testable {
            break;
        }
    }

    Ok(DiscoveryReport {
        estimate,
        edge_scores: scores,
        tests_run,
        wall_time: start.elapsed(),
        low_confidence,
    })
}

/// Lexicographic `k`-subsets of `items`.
struct Combinations<'a> {
    items: &'a [usize],
    idx: Vec<usize>,
    done: bool,
}

impl<'a> Combinations<'a> {
    fn new(items: &'a [usize], k: usize) -> Self {
        Self {
            items,
            idx: (0..k).collect(),
            done: k > items.len(),
        }
    }
}

impl Iterator for Combinations<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.iter().map(|&i| self.items[i]).collect();
        let k = self.idx.len();
        let n = self.items.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the truth has no edges or no non-edges.
    pub auc: Option<f64>,
}

/// Edge-presence classification metrics and the ranking AUC of `scores`.
pub fn graph_metrics(
    estimate: &CausalAdjacencyMatrix,
    truth: &CausalAdjacencyMatrix,
    scores: Option<&[Vec<f64>]>,
) -> Result<GraphMetrics> {
    if !estimate.same_shape(truth) {
        return Err(Error::DimensionMismatch(
            "estimate and truth have different shapes".into(),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for j in 0..truth.causes() {
        for i in 0..truth.n() {
            match (estimate.get(j, i), truth.get(j, i)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp == 0 {
        if truth.edge_count() == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let auc = match scores {
        Some(s) => {
            if s.len() != truth.causes() || s.iter().any(|r| r.len() != truth.n()) {
                return Err(Error::DimensionMismatch("edge scores have the wrong shape".into()));
            }
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (j, row) in s.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    if truth.get(j, i) {
                        pos.push(v);
                    } else {
                        neg.push(v);
                    }
                }
            }
            rank_auc(&pos, &neg)
        }
        None => None,
    };
    Ok(GraphMetrics {
        precision,
        recall,
        f1,
        auc,
    })
}

/// Probability that a random positive outscores a random negative, ties half.
pub fn rank_auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in pos {
        for &q in neg {
            wins += match p.total_cmp(&q) {
                Ordering::Greater => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Less => 0.0,
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}
