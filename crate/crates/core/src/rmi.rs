//! Layer importance from cross-layer representation similarity, and the
//! importance-weighted allocation of per-layer sparsity.
//!
//! Similarity is linear normalized HSIC (linear CKA):
//!
//! ```text
//! nHSIC(X, Y) = ‖Yᵀ X‖²_F / (‖Xᵀ X‖_F · ‖Yᵀ Y‖_F)
//! ```
//!
//! over `samples × features` maps, optionally column-centered. A layer that
//! is similar to many others is redundant: `p_i = exp(-Σ_{j≠i} nHSIC(X_i, X_j))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LosaError, Result};
use crate::linalg::Matrix;
use crate::model::FeatureMaps;

/// Relative norm below which a (centered) map is treated as constant.
const DEGENERATE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nhsic {
    pub value: f64,
    /// One of the maps had no variation; `value` is reported as 0.
    pub degenerate: bool,
}

pub fn nhsic(xi: &Matrix, xj: &Matrix, center: bool) -> Result<Nhsic> {
    if xi.rows() != xj.rows() {
        return Err(LosaError::Shape {
            op: "nhsic",
            left: xi.shape(),
            right: xj.shape(),
        });
    }
    let prepare = |x: &Matrix| {
        let c = if center { x.center_columns() } else { x.clone() };
        let degenerate = c.frobenius_norm() <= DEGENERATE_RTOL * x.frobenius_norm()
            || c.frobenius_norm() == 0.0;
        (c, degenerate)
    };
    let (a, deg_a) = prepare(xi);
    let (b, deg_b) = prepare(xj);
    if deg_a || deg_b {
        return Ok(Nhsic {
            value: 0.0,
            degenerate: true,
        });
    }
    let cross = b.t_matmul(&a)?.frobenius_sq();
    let self_a = a.t_matmul(&a)?.frobenius_norm();
    let self_b = b.t_matmul(&b)?.frobenius_norm();
    let value = (cross / (self_a * self_b)).clamp(0.0, 1.0);
    if !value.is_finite() {
        return Err(LosaError::NonFinite(format!(
            "nhsic of {:?} and {:?}",
            xi.shape(),
            xj.shape()
        )));
    }
    Ok(Nhsic {
        value,
        degenerate: false,
    })
}

/// Which captured map represents a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapChoice {
    #[default]
    Outputs,
    Inputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub center: bool,
    pub maps: MapChoice,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            center: true,
            maps: MapChoice::Outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub p: Vec<f64>,
    /// Symmetric pairwise similarity matrix (diagonal 1).
    pub similarity: Vec<Vec<f64>>,
    /// Pairs `(i, j)`, `i < j`, where a map was constant.
    pub degenerate_pairs: Vec<(usize, usize)>,
}

pub fn importance(maps: &FeatureMaps, cfg: ImportanceConfig) -> Result<Importance> {
    let reps = match cfg.maps {
        MapChoice::Outputs => &maps.outputs,
        MapChoice::Inputs => &maps.inputs,
    };
    let n = reps.len();
    if n < 2 {
        return Err(LosaError::InvalidArgument(format!(
            "layer importance needs at least 2 layers, got {n}"
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| nhsic(&reps[i], &reps[j], cfg.center))
        .collect::<Result<Vec<_>>>()?;

    let mut similarity = vec![vec![0.0; n]; n];
    let mut degenerate_pairs = Vec::new();
    for i in 0..n {
        similarity[i][i] = 1.0;
    }
    for (&(i, j), v) in pairs.iter().zip(&values) {
        similarity[i][j] = v.value;
        similarity[j][i] = v.value;
        if v.degenerate {
            degenerate_pairs.push((i, j));
        }
    }
    let p = (0..n)
        .map(|i| {
            let total: f64 = (0..n).filter(|&j| j != i).map(|j| similarity[i][j]).sum();
            (-total).exp()
        })
        .collect();
    Ok(Importance {
        p,
        similarity,
        degenerate_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub s: Vec<f64>,
    pub theta: f64,
}

impl SparsityProfile {
    pub fn mean(&self) -> f64 {
        self.s.iter().sum::<f64>() / self.s.len() as f64
    }
}

/// Per-layer box `[θ-δ, θ+δ] ∩ [0, 1]`.
pub fn default_bounds(theta: f64, delta: f64, n: usize) -> Vec<(f64, f64)> {
    vec![((theta - delta).max(0.0), (theta + delta).min(1.0)); n]
}

/// Slack for feasibility checks on the budget.
const BUDGET_TOL: f64 = 1e-12;

/// Minimizes `pᵀs` subject to `mean(s) = θ` and `lo_i ≤ s_i ≤ hi_i`.
///
/// Greedy water-filling is exact for this LP: start at the lower bounds and
/// pour the surplus into layers in ascending importance. Layers with equal
/// importance share their level evenly, so a uniform `p` returns the uniform
/// profile when the boxes allow it.
pub fn allocate_sparsity(p: &[f64], theta: f64, bounds: &[(f64, f64)]) -> Result<SparsityProfile> {
    let n = p.len();
    if n == 0 || bounds.len() != n {
        return Err(LosaError::InvalidArgument(format!(
            "{n} importances but {} bounds",
            bounds.len()
        )));
    }
    if !theta.is_finite() || p.iter().any(|v| !v.is_finite()) {
        return Err(LosaError::NonFinite("sparsity allocation input".into()));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(LosaError::InvalidArgument(format!(
                "layer {i} bounds [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
            )));
        }
    }
    let sum_lo: f64 = bounds.iter().map(|b| b.0).sum();
    let sum_hi: f64 = bounds.iter().map(|b| b.1).sum();
    let budget = n as f64 * theta;
    if budget < sum_lo - BUDGET_TOL * n as f64 || budget > sum_hi + BUDGET_TOL * n as f64 {
        return Err(LosaError::InfeasibleBudget {
            theta,
            min: sum_lo / n as f64,
            max: sum_hi / n as f64,
        });
    }

    let mut s: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let mut surplus = (budget - sum_lo).max(0.0);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));

    let mut start = 0;
    while start < n && surplus > 0.0 {
        let mut end = start + 1;
        while end < n && p[order[end]] == p[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let capacity: f64 = group.iter().map(|&i| bounds[i].1 - bounds[i].0).sum();
        if surplus >= capacity {
            for &i in group {
                s[i] = bounds[i].1;
            }
            surplus -= capacity;
        } else {
            fill_evenly(group, bounds, &mut s, surplus);
            surplus = 0.0;
        }
        start = end;
    }
    Ok(SparsityProfile { s, theta })
}

/// Raises every member by the same amount, capped at its upper bound.
fn fill_evenly(group: &[usize], bounds: &[(f64, f64)], s: &mut [f64], mut amount: f64) {
    let mut members: Vec<usize> = group.to_vec();
    members.sort_by(|&a, &b| {
        (bounds[a].1 - bounds[a].0).total_cmp(&(bounds[b].1 - bounds[b].0))
    });
    let mut left = members.len();
    for &i in &members {
        let share = amount / left as f64;
        let cap = bounds[i].1 - bounds[i].0;
        let give = share.min(cap);
        s[i] = bounds[i].0 + give;
        amount -= give;
        left -= 1;
    }
}

/// Integer N (kept weights per group of `m_group`) for every layer so that
/// the mean sparsity `mean(1 - N_i/M)` is the nearest achievable value to
/// `mean_sparsity`.
///
/// Every layer starts from `base = round(M·(1 - mean))` and may move at most
/// `max_shift` notches; the kept-weight surplus goes to the most important
/// layers first. Layers with equal importance split it round-robin by index.
pub fn allocate_nm(
    p: &[f64],
    mean_sparsity: f64,
    m_group: usize,
    max_shift: usize,
) -> Result<Vec<usize>> {
    let n = p.len();
    let unachievable = || LosaError::UnachievableNm {
        mean: mean_sparsity,
        m: m_group,
    };
    if n == 0 || m_group == 0 || !(0.0..=1.0).contains(&mean_sparsity) {
        return Err(unachievable());
    }
    let density = 1.0 - mean_sparsity;
    let base = ((m_group as f64 * density).round_ties_even() as usize).clamp(1, m_group);
    let total = (n as f64 * m_group as f64 * density).round_ties_even() as usize;
    let lo = base.saturating_sub(max_shift).max(1);
    let hi = (base + max_shift).min(m_group);
    if total < n * lo || total > n * hi {
        return Err(unachievable());
    }

    let mut keep = vec![lo; n];
    let mut surplus = total - n * lo;
    let mut order: Vec<usize> = (0..n).collect();
    // descending importance, index order within ties
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));

    let mut start = 0;
    while start < n && surplus > 0 {
        let mut end = start + 1;
        while end < n && p[order[end]] == p[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let mut by_index = group.to_vec();
        by_index.sort_unstable();
        let capacity = (hi - lo) * group.len();
        let give = surplus.min(capacity);
        let each = give / group.len();
        let extra = give % group.len();
        for (k, &i) in by_index.iter().enumerate() {
            keep[i] += each + usize::from(k < extra);
        }
        surplus -= give;
        start = end;
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_fill, Rng};

    /// Gram-form linear CKA with explicit centering matrix H = I - 11ᵀ/n:
    /// tr(KHLH) / sqrt(tr(KHKH) tr(LHLH)), K = XXᵀ, L = YYᵀ.
    pub(crate) fn cka_gram_oracle(x: &Matrix, y: &Matrix) -> f64 {
        let n = x.rows();
        let gram = |m: &Matrix| {
            let mut k = vec![vec![0.0; n]; n];
            for a in 0..n {
                for b in 0..n {
                    k[a][b] = (0..m.cols()).map(|c| m.get(a, c) * m.get(b, c)).sum();
                }
            }
            k
        };
        let center = |k: &Vec<Vec<f64>>| {
            let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let all = row.iter().sum::<f64>() / n as f64;
            let mut c = k.clone();
            for a in 0..n {
                for b in 0..n {
                    c[a][b] = k[a][b] - row[a] - row[b] + all;
                }
            }
            c
        };
        let kc = center(&gram(x));
        let lc = center(&gram(y));
        let tr = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| {
            let mut t = 0.0;
            for a in 0..n {
                for b in 0..n {
                    t += p[a][b] * q[b][a];
                }
            }
            t
        };
        tr(&kc, &lc) / (tr(&kc, &kc) * tr(&lc, &lc)).sqrt()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = gaussian_fill(&mut Rng::new(1), 20, 5, 1.0);
        assert!((nhsic(&x, &x, true).unwrap().value - 1.0).abs() < 1e-12);
        assert!((nhsic(&x, &x, false).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_maps_give_zero() {
        // centered columns with disjoint sample support
        let x = Matrix::from_rows(&[&[1.0], &[-1.0], &[0.0], &[0.0]]);
        let y = Matrix::from_rows(&[&[0.0], &[0.0], &[1.0], &[-1.0]]);
        assert_eq!(nhsic(&x, &y, true).unwrap().value, 0.0);
    }

    #[test]
    fn matches_gram_oracle() {
        let mut rng = Rng::new(5);
        let x = gaussian_fill(&mut rng, 20, 5, 1.0);
        let y = x.matmul(&gaussian_fill(&mut rng, 5, 7, 1.0)).unwrap()
            .add(&gaussian_fill(&mut rng, 20, 7, 0.5))
            .unwrap();
        let v = nhsic(&x, &y, true).unwrap().value;
        assert!((v - cka_gram_oracle(&x, &y)).abs() < 1e-10);
        assert!(v > 0.1 && v < 1.0);
    }

    #[test]
    fn constant_map_is_degenerate() {
        let x = Matrix::filled(10, 3, 2.5);
        let y = gaussian_fill(&mut Rng::new(2), 10, 4, 1.0);
        let r = nhsic(&x, &y, true).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
        assert!(nhsic(&Matrix::zeros(10, 3), &y, false).unwrap().degenerate);
        assert!(nhsic(&x, &gaussian_fill(&mut Rng::new(2), 9, 4, 1.0), true).is_err());
    }

    fn maps_from(outputs: Vec<Matrix>) -> FeatureMaps {
        FeatureMaps {
            inputs: outputs.clone(),
            outputs,
        }
    }

    #[test]
    fn importance_two_layers_symmetric() {
        let mut rng = Rng::new(3);
        let maps = maps_from(vec![
            gaussian_fill(&mut rng, 15, 4, 1.0),
            gaussian_fill(&mut rng, 15, 6, 1.0),
        ]);
        let imp = importance(&maps, ImportanceConfig::default()).unwrap();
        assert_eq!(imp.p[0], imp.p[1]);
    }

    #[test]
    fn importance_orthogonal_layers_all_one() {
        let col = |k: usize| {
            Matrix::from_fn(6, 1, |i, _| match i {
                i if i == 2 * k => 1.0,
                i if i == 2 * k + 1 => -1.0,
                _ => 0.0,
            })
        };
        let maps = maps_from(vec![col(0), col(1), col(2)]);
        let imp = importance(&maps, ImportanceConfig::default()).unwrap();
        assert_eq!(imp.p, vec![1.0; 3]);
    }

    #[test]
    fn importance_matches_summation_oracle() {
        let mut rng = Rng::new(4);
        let outs: Vec<Matrix> = [3, 5, 4]
            .iter()
            .map(|&d| gaussian_fill(&mut rng, 12, d, 1.0))
            .collect();
        let imp = importance(&maps_from(outs.clone()), ImportanceConfig::default()).unwrap();
        for i in 0..3 {
            let s: f64 = (0..3)
                .filter(|&j| j != i)
                .map(|j| cka_gram_oracle(&outs[i], &outs[j]))
                .sum();
            let oracle = (-s).exp();
            assert!(((imp.p[i] - oracle) / oracle).abs() < 1e-10);
            assert!(imp.p[i] > 0.0 && imp.p[i] <= 1.0);
        }
    }

    #[test]
    fn importance_needs_two_layers() {
        let maps = maps_from(vec![Matrix::identity(3)]);
        assert!(importance(&maps, ImportanceConfig::default()).is_err());
    }

    #[test]
    fn allocation_example() {
        let prof = allocate_sparsity(&[0.9, 0.5, 0.1], 0.7, &[(0.6, 0.8); 3]).unwrap();
        let expect = [0.6, 0.7, 0.8];
        for (a, b) in prof.s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let obj: f64 = prof.s.iter().zip([0.9, 0.5, 0.1]).map(|(s, p)| s * p).sum();
        assert!((obj - 0.97).abs() < 1e-12);
    }

    #[test]
    fn allocation_uniform_p_is_uniform() {
        let prof = allocate_sparsity(&[0.3; 4], 0.5, &default_bounds(0.5, 0.1, 4)).unwrap();
        for s in prof.s {
            assert!((s - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn allocation_forced_box() {
        let prof = allocate_sparsity(&[0.9, 0.2], 0.4, &[(0.4, 0.4); 2]).unwrap();
        assert_eq!(prof.s, vec![0.4, 0.4]);
    }

    #[test]
    fn allocation_infeasible() {
        let err = allocate_sparsity(&[0.5, 0.5], 0.9, &[(0.0, 0.5); 2]).unwrap_err();
        match err {
            LosaError::InfeasibleBudget { min, max, .. } => {
                assert_eq!(min, 0.0);
                assert_eq!(max, 0.5);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn default_bounds_clamp() {
        let b = default_bounds(0.05, 0.1, 1);
        assert_eq!(b[0].0, 0.0);
        assert!((b[0].1 - 0.15).abs() < 1e-15);
        assert_eq!(default_bounds(0.95, 0.1, 1)[0].1, 1.0);
    }

    #[test]
    fn nm_examples() {
        assert_eq!(allocate_nm(&[0.4; 4], 0.75, 8, 1).unwrap(), vec![2; 4]);
        assert_eq!(allocate_nm(&[0.9, 0.1], 0.75, 8, 1).unwrap(), vec![3, 1]);
        assert_eq!(allocate_nm(&[0.5], 0.5, 4, 1).unwrap(), vec![2]);
    }

    #[test]
    fn nm_exhaustive_pair_search_agrees() {
        // maximise Σ p_i N_i (= minimise pᵀs) over pairs in the ±1 box with matching total
        let p = [0.9, 0.1];
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for a in 1..=3usize {
            for b in 1..=3usize {
                if a + b == 4 {
                    let v = p[0] * a as f64 + p[1] * b as f64;
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
        }
        assert_eq!(allocate_nm(&p, 0.75, 8, 1).unwrap(), vec![best.1, best.2]);
    }

    #[test]
    fn nm_unachievable() {
        assert!(allocate_nm(&[0.5; 3], 0.99, 8, 1).is_err());
        assert!(allocate_nm(&[0.5], 1.5, 8, 1).is_err());
    }

    #[test]
    fn nm_mean_within_resolution_and_monotone() {
        let mut rng = Rng::new(10);
        for _ in 0..200 {
            let n = 1 + (rng.next_u64() % 7) as usize;
            let p: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let mean = 0.1 + 0.8 * rng.next_f64();
            let keep = allocate_nm(&p, mean, 8, 1).unwrap();
            let realized = keep.iter().map(|&k| 1.0 - k as f64 / 8.0).sum::<f64>() / n as f64;
            assert!((realized - mean).abs() <= 1.0 / (n * 8) as f64 + 1e-12);
            for i in 0..n {
                for j in 0..n {
                    if p[i] > p[j] {
                        assert!(keep[i] >= keep[j]);
                    }
                }
            }
        }
    }
}
