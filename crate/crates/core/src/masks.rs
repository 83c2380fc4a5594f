//! Weight scoring and binary mask generation.
//!
//! Sparsity is the fraction of ZEROS in a mask. Ties between equal scores
//! are broken by row-major index (lower index pruned first), so masks at
//! increasing rates over fixed scores are nested.

use serde::{Deserialize, Serialize};

use crate::error::{LosaError, Result};
use crate::linalg::Matrix;

/// Binary keep/drop pattern over a weight matrix; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Accepts only entries that are exactly 0.0 or 1.0.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let bits = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                v if v == 1.0 => Ok(true),
                v if v == 0.0 => Ok(false),
                v => Err(LosaError::InvalidArgument(format!(
                    "mask entry {i} is {v}, expected 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows: m.rows(),
            cols: m.cols(),
            bits,
        })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            if self.keep(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn ones_count(&self) -> usize {
        self.bits.len() - self.zero_count()
    }

    /// Fraction of zeroed entries.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.zero_count() as f64 / self.bits.len() as f64
        }
    }

    /// `self ⊙ w`, with dropped entries set to exactly 0.0.
    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        if w.shape() != self.shape() {
            return Err(LosaError::Shape {
                op: "mask apply",
                left: self.shape(),
                right: w.shape(),
            });
        }
        let mut out = w.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&self.bits) {
            if !k {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    #[default]
    Wanda,
    Magnitude,
}

impl Scorer {
    /// Scores `w_eff`; `x` (samples × c_in) is only consulted by Wanda.
    pub fn score(self, w_eff: &Matrix, x: &Matrix) -> Result<ScoreMatrix> {
        match self {
            Scorer::Wanda => wanda_scores(w_eff, x),
            Scorer::Magnitude => Ok(magnitude_scores(w_eff)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Matrix,
    pub scorer: Scorer,
}

/// `|W_ij| · ‖X[:, j]‖₂`.
pub fn wanda_scores(w_eff: &Matrix, x: &Matrix) -> Result<ScoreMatrix> {
    if x.cols() != w_eff.cols() {
        return Err(LosaError::Shape {
            op: "wanda_scores",
            left: w_eff.shape(),
            right: x.shape(),
        });
    }
    let norms = x.column_norms();
    let scores = Matrix::from_fn(w_eff.rows(), w_eff.cols(), |i, j| {
        w_eff.get(i, j).abs() * norms[j]
    });
    Ok(ScoreMatrix {
        scores,
        scorer: Scorer::Wanda,
    })
}

pub fn magnitude_scores(w_eff: &Matrix) -> ScoreMatrix {
    ScoreMatrix {
        scores: w_eff.map(f64::abs),
        scorer: Scorer::Magnitude,
    }
}

/// Number of entries zeroed at rate `s`: `round_half_even(s · count)`.
pub fn zero_count_for(s: f64, count: usize) -> usize {
    let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
    ((s * count as f64).round_ties_even() as usize).min(count)
}

/// Zeroes exactly `round(s · count)` lowest-scoring entries.
pub fn unstructured_mask(scores: &ScoreMatrix, s: f64) -> Mask {
    let m = &scores.scores;
    let k = zero_count_for(s, m.len());
    let mut order: Vec<usize> = (0..m.len()).collect();
    // stable: equal scores stay in index order
    order.sort_by(|&a, &b| m.data()[a].total_cmp(&m.data()[b]));
    let mut mask = Mask::ones(m.rows(), m.cols());
    for &idx in &order[..k] {
        mask.bits[idx] = false;
    }
    mask
}

/// Keeps the `n_keep` highest scores in every run of `m_group` consecutive
/// input columns. A trailing short group of length `len` keeps
/// `ceil(n_keep · len / m_group)`.
pub fn nm_mask(scores: &ScoreMatrix, n_keep: usize, m_group: usize) -> Result<Mask> {
    if m_group == 0 || n_keep == 0 || n_keep > m_group {
        return Err(LosaError::InvalidArgument(format!(
            "invalid N:M pattern {n_keep}:{m_group} (need 1 <= N <= M)"
        )));
    }
    let m = &scores.scores;
    let mut mask = Mask::ones(m.rows(), m.cols());
    let mut group: Vec<usize> = Vec::with_capacity(m_group);
    for i in 0..m.rows() {
        let row = m.row(i);
        for start in (0..m.cols()).step_by(m_group) {
            let len = m_group.min(m.cols() - start);
            let keep = if len == m_group {
                n_keep
            } else {
                (n_keep * len).div_ceil(m_group)
            };
            group.clear();
            group.extend(0..len);
            group.sort_by(|&a, &b| row[start + a].total_cmp(&row[start + b]));
            for &g in &group[..len - keep] {
                mask.bits[i * m.cols() + start + g] = false;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_fill, Rng};
    use proptest::prelude::*;

    fn scores(rows: &[&[f64]]) -> ScoreMatrix {
        ScoreMatrix {
            scores: Matrix::from_rows(rows),
            scorer: Scorer::Magnitude,
        }
    }

    #[test]
    fn wanda_matches_criterion() {
        // row [2, -1] with column norms [1, 3]
        let w = Matrix::from_rows(&[&[2.0, -1.0]]);
        let x = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let s = wanda_scores(&w, &x).unwrap();
        assert_eq!(s.scores, Matrix::from_rows(&[&[2.0, 3.0]]));
        assert_eq!(s.scorer, Scorer::Wanda);
    }

    #[test]
    fn wanda_zero_activations_and_unit_norms() {
        let w = gaussian_fill(&mut Rng::new(4), 3, 2, 1.0);
        let s = wanda_scores(&w, &Matrix::zeros(5, 2)).unwrap();
        assert!(s.scores.data().iter().all(|&v| v == 0.0));
        let s = wanda_scores(&w, &Matrix::identity(2)).unwrap();
        assert_eq!(s.scores, w.map(f64::abs));
        assert!(wanda_scores(&w, &Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn magnitude_cases() {
        let s = magnitude_scores(&Matrix::from_rows(&[&[-3.0, 1.0]]));
        assert_eq!(s.scores, Matrix::from_rows(&[&[3.0, 1.0]]));
        assert_eq!(magnitude_scores(&Matrix::zeros(2, 2)).scores, Matrix::zeros(2, 2));
    }

    #[test]
    fn magnitude_order_matches_sort_oracle() {
        let w = gaussian_fill(&mut Rng::new(8), 4, 5, 1.0);
        let s = magnitude_scores(&w);
        let argsort = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            idx
        };
        let oracle: Vec<f64> = w.data().iter().map(|v| if *v < 0.0 { -v } else { *v }).collect();
        assert_eq!(argsort(s.scores.data()), argsort(&oracle));
    }

    #[test]
    fn unstructured_endpoints() {
        let s = scores(&[&[4.0, 1.0], &[3.0, 2.0]]);
        assert_eq!(unstructured_mask(&s, 0.0), Mask::ones(2, 2));
        assert_eq!(unstructured_mask(&s, 1.0), Mask::zeros(2, 2));
    }

    #[test]
    fn unstructured_half_matches_brute_force() {
        let s = scores(&[&[4.0, 1.0], &[3.0, 2.0]]);
        let mask = unstructured_mask(&s, 0.5);
        // brute force over every 2-subset: the dropped pair with least total score
        let vals = s.scores.data();
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..4 {
            for b in a + 1..4 {
                if vals[a] + vals[b] < best.0 {
                    best = (vals[a] + vals[b], a, b);
                }
            }
        }
        let expected: Vec<bool> = (0..4).map(|i| i != best.1 && i != best.2).collect();
        assert_eq!(mask.bits(), expected.as_slice());
        assert_eq!(mask.bits(), &[true, false, true, false]);
        assert_eq!(mask.sparsity(), 0.5);
    }

    #[test]
    fn nm_cases() {
        let s = scores(&[&[5.0, 1.0, 4.0, 2.0]]);
        assert_eq!(nm_mask(&s, 2, 4).unwrap().bits(), &[true, false, true, false]);
        assert_eq!(nm_mask(&s, 4, 4).unwrap(), Mask::ones(1, 4));
        assert!(nm_mask(&s, 0, 4).is_err());
        assert!(nm_mask(&s, 5, 4).is_err());
        assert!(nm_mask(&s, 1, 0).is_err());
    }

    #[test]
    fn nm_short_tail_group() {
        // 6 columns, 2:4 -> full group keeps 2, tail of 2 keeps ceil(2*2/4)=1
        let s = scores(&[&[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]]);
        let m = nm_mask(&s, 2, 4).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true, true, false]);
    }

    #[test]
    fn nm_sparsity_when_divisible() {
        let w = gaussian_fill(&mut Rng::new(1), 6, 16, 1.0);
        let m = nm_mask(&magnitude_scores(&w), 3, 8).unwrap();
        assert_eq!(m.sparsity(), 1.0 - 3.0 / 8.0);
    }

    #[test]
    fn ties_break_by_index() {
        let s = scores(&[&[1.0, 1.0, 1.0, 1.0]]);
        assert_eq!(unstructured_mask(&s, 0.5).bits(), &[false, false, true, true]);
    }

    #[test]
    fn mask_matrix_round_trip_and_apply() {
        let m = Mask::from_matrix(&Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(Mask::from_matrix(&m.to_matrix()).unwrap(), m);
        assert!(Mask::from_matrix(&Matrix::from_rows(&[&[0.5]])).is_err());
        let w = Matrix::from_rows(&[&[3.0, -2.0], &[7.0, 5.0]]);
        assert_eq!(m.apply(&w).unwrap(), Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 5.0]]));
    }

    proptest! {
        #[test]
        fn unstructured_zero_count_is_exact(
            rows in 1usize..12, cols in 1usize..12, s in 0.0f64..=1.0, seed in any::<u64>()
        ) {
            let w = gaussian_fill(&mut Rng::new(seed), rows, cols, 1.0);
            let mask = unstructured_mask(&magnitude_scores(&w), s);
            let count = rows * cols;
            prop_assert_eq!(mask.zero_count(), (s * count as f64).round_ties_even() as usize);
            prop_assert_eq!(mask.sparsity(), mask.zero_count() as f64 / count as f64);
        }

        #[test]
        fn masks_nest_as_rate_grows(
            rows in 1usize..8, cols in 1usize..8, s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0,
            seed in any::<u64>(), coarse in any::<bool>()
        ) {
            let mut w = gaussian_fill(&mut Rng::new(seed), rows, cols, 1.0);
            if coarse {
                // force many ties
                w = w.map(|v| v.round());
            }
            let sc = magnitude_scores(&w);
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = unstructured_mask(&sc, lo);
            let b = unstructured_mask(&sc, hi);
            for (ka, kb) in a.bits().iter().zip(b.bits()) {
                prop_assert!(*ka || !*kb, "entry zeroed at lower rate but kept at higher");
            }
        }

        #[test]
        fn nm_groups_have_exact_keep_count(
            rows in 1usize..6, groups in 1usize..5, m in 1usize..9, n_frac in 0.0f64..1.0,
            seed in any::<u64>()
        ) {
            let n = 1 + ((m - 1) as f64 * n_frac) as usize;
            let cols = groups * m;
            let w = gaussian_fill(&mut Rng::new(seed), rows, cols, 1.0);
            let mask = nm_mask(&magnitude_scores(&w), n, m).unwrap();
            for i in 0..rows {
                for g in 0..groups {
                    let kept = (0..m).filter(|&k| mask.keep(i, g * m + k)).count();
                    prop_assert_eq!(kept, n);
                }
            }
        }
    }
}
