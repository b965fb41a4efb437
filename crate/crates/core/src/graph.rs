//! Transition-causality adjacency matrices.
//!
//! Rows index the causes at time `t-1` (the `n` state coordinates followed by the
//! `c` action coordinates), columns index the `n` state coordinates at time `t`.
//! Every edge points forward in time, so any matrix is a valid DAG.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct CausalAdjacencyMatrix {
    n: usize,
    c: usize,
    entries: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    n: usize,
    c: usize,
    /// 0/1 entries, row-major over (n + c) rows and n columns.
    entries: Vec<u8>,
}

impl TryFrom<RawGraph> for CausalAdjacencyMatrix {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        if raw.entries.len() != (raw.n + raw.c) * raw.n {
            return Err(Error::DimensionMismatch(format!(
                "graph with n={} c={} needs {} entries, got {}",
                raw.n,
                raw.c,
                (raw.n + raw.c) * raw.n,
                raw.entries.len()
            )));
        }
        let entries = raw
            .entries
            .iter()
            .map(|&e| match e {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "graph entries must be 0 or 1, found {other}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n: raw.n,
            c: raw.c,
            entries,
        })
    }
}

impl From<CausalAdjacencyMatrix> for RawGraph {
    fn from(g: CausalAdjacencyMatrix) -> Self {
        RawGraph {
            n: g.n,
            c: g.c,
            entries: g.entries.iter().map(|&e| e as u8).collect(),
        }
    }
}

impl CausalAdjacencyMatrix {
    pub fn empty(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            entries: vec![false; (n + c) * n],
        }
    }

    pub fn full(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            entries: vec![true; (n + c) * n],
        }
    }

    /// Pattern with an edge `j -> i` whenever the cause row `j` is at or below
    /// the effect column `i`.
    pub fn lower_triangular(n: usize, c: usize) -> Self {
        let mut g = Self::empty(n, c);
        for j in 0..n + c {
            for i in 0..n {
                if j >= i {
                    g.set(j, i, true);
                }
            }
        }
        g
    }

    pub fn from_rows(n: usize, c: usize, rows: &[Vec<u8>]) -> Result<Self> {
        if rows.len() != n + c || rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} rows of length {}",
                n + c,
                n
            )));
        }
        Self::try_from(RawGraph {
            n,
            c,
            entries: rows.concat(),
        })
    }

    /// State dimension (number of effects).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Action dimension.
    pub fn c(&self) -> usize {
        self.c
    }

    /// Number of cause rows, `n + c`.
    pub fn causes(&self) -> usize {
        self.n + self.c
    }

    pub fn get(&self, cause: usize, effect: usize) -> bool {
        self.entries[cause * self.n + effect]
    }

    pub fn set(&mut self, cause: usize, effect: usize, value: bool) {
        self.entries[cause * self.n + effect] = value;
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    pub fn density(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.edge_count() as f64 / self.entries.len() as f64
    }

    pub fn parents(&self, effect: usize) -> Vec<usize> {
        (0..self.causes()).filter(|&j| self.get(j, effect)).collect()
    }

    /// Column `effect` as a 0/1 mask over the `n + c` inputs.
    pub fn column_mask(&self, effect: usize) -> Vec<bool> {
        (0..self.causes()).map(|j| self.get(j, effect)).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            n: self.n,
            c: self.c,
            entries: self.entries.iter().map(|e| !e).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.c == other.c
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries
            .chunks(self.n.max(1))
            .map(|r| r.iter().map(|&e| e as u8).collect())
            .collect()
    }

    /// Flip every entry independently with probability `flip_prob`.
    pub fn perturb<R: Rng + ?Sized>(&self, flip_prob: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::InvalidArgument(format!(
                "flip_prob must lie in [0, 1], got {flip_prob}"
            )));
        }
        let entries = self
            .entries
            .iter()
            .map(|&e| if rng.random::<f64>() < flip_prob { !e } else { e })
            .collect();
        Ok(Self {
            n: self.n,
            c: self.c,
            entries,
        })
    }
}

impl fmt::Debug for CausalAdjacencyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CausalAdjacencyMatrix(n={}, c={})", self.n, self.c)?;
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|e| e.to_string()).collect();
            writeln!(f, "  [{}]", line.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn lower_triangular_fill_for_benchmark_shape() {
        let g = CausalAdjacencyMatrix::lower_triangular(10, 2);
        assert_eq!(g.edge_count(), 75);
        assert!(g.get(11, 0));
        assert!(g.get(3, 3));
        assert!(!g.get(2, 3));
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let g = CausalAdjacencyMatrix::from_rows(2, 1, &[vec![1, 0], vec![0, 1], vec![1, 1]])
            .unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"n":2,"c":1,"entries":[1,0,0,1,1,1]}"#);
        let back: CausalAdjacencyMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<CausalAdjacencyMatrix>(
            r#"{"n":2,"c":1,"entries":[1,0,0,1,1,2]}"#
        )
        .is_err());
        assert!(serde_json::from_str::<CausalAdjacencyMatrix>(r#"{"n":2,"c":1,"entries":[1]}"#)
            .is_err());
    }

    #[test]
    fn perturb_limits() {
        let g = CausalAdjacencyMatrix::lower_triangular(5, 2);
        let mut rng = rng_from(3);
        assert_eq!(g.perturb(0.0, &mut rng).unwrap(), g);
        assert_eq!(g.perturb(1.0, &mut rng).unwrap(), g.complement());
        assert!(g.perturb(1.5, &mut rng).is_err());
    }

    #[test]
    fn perturb_flip_rate_matches_probability() {
        // 10^4 trials over a 3x2 graph: flip rate must sit within 0.8 +/- 0.02.
        let g = CausalAdjacencyMatrix::lower_triangular(2, 1);
        let mut rng = rng_from(11);
        let trials = 10_000;
        let mut flips = 0usize;
        for _ in 0..trials {
            let p = g.perturb(0.8, &mut rng).unwrap();
            for j in 0..3 {
                for i in 0..2 {
                    flips += (p.get(j, i) != g.get(j, i)) as usize;
                }
            }
        }
        let rate = flips as f64 / (trials * 6) as f64;
        assert!((rate - 0.8).abs() < 0.02, "flip rate {rate}");
    }
}
