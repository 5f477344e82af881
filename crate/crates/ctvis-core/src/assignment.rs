//! Hungarian matching for training-time ground-truth assignment.
//!
//! Decoded instances are rows, ground-truth instances are columns; every
//! column must be covered, surplus rows stay unmatched (they are background
//! candidates for the supplementary-negative pool).

use crate::association::InstanceObservation;
use crate::mask::BinaryMask;
use crate::matrix::Matrix;
use thiserror::Error;

/// Default class-cost weight.
pub const W_CLS_DEFAULT: f64 = 2.0;
/// Default mask-cost weight.
pub const W_MASK_DEFAULT: f64 = 5.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignmentError {
    #[error("raster mismatch between prediction and ground-truth masks")]
    RasterMismatch,
    #[error("infeasible shape: {cols} columns cannot be covered by {rows} rows")]
    InfeasibleShape { rows: usize, cols: usize },
    #[error("cost matrix contains non-finite entries")]
    NonFiniteCost,
}

/// One ground-truth instance as the matcher sees it.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub id: u64,
    pub class_label: usize,
    pub mask: BinaryMask,
}

/// Pairwise decoded-vs-GT cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    inner: Matrix,
}

impl CostMatrix {
    pub fn new(inner: Matrix) -> Result<Self, AssignmentError> {
        if !inner.is_finite() {
            return Err(AssignmentError::NonFiniteCost);
        }
        Ok(Self { inner })
    }

    /// Assemble the full cost matrix for a frame.
    pub fn build(
        preds: &[InstanceObservation],
        gts: &[GtInstance],
        w_cls: f64,
        w_mask: f64,
    ) -> Result<Self, AssignmentError> {
        let mut m = Matrix::zeros(preds.len(), gts.len());
        for (i, pred) in preds.iter().enumerate() {
            for (j, gt) in gts.iter().enumerate() {
                m.set(i, j, pair_cost(pred, gt, w_cls, w_mask)?);
            }
        }
        CostMatrix::new(m)
    }

    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    pub fn cols(&self) -> usize {
        self.inner.cols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.inner.get(row, col)
    }
}

/// Matching cost between one decoded instance and one GT instance:
/// `w_cls * (1 - score at the GT class) + w_mask * (1 - mask IoU)`.
///
/// A prediction without a mask counts as IoU 0.
pub fn pair_cost(
    pred: &InstanceObservation,
    gt: &GtInstance,
    w_cls: f64,
    w_mask: f64,
) -> Result<f64, AssignmentError> {
    let class_score = pred
        .class_scores
        .get(gt.class_label)
        .copied()
        .unwrap_or(0.0);
    let iou = match &pred.mask {
        Some(mask) => {
            if !mask.same_raster(&gt.mask) {
                return Err(AssignmentError::RasterMismatch);
            }
            mask.iou(&gt.mask).expect("raster checked above")
        }
        None => 0.0,
    };
    Ok(w_cls * (1.0 - class_score) + w_mask * (1.0 - iou))
}

/// Minimum-total-cost injective assignment covering all columns.
///
/// Potential-based shortest augmenting path (Jonker-Volgenant style),
/// O(cols² · rows). Returns `(row, col)` pairs sorted by column.
pub fn hungarian(costs: &CostMatrix) -> Result<Vec<(usize, usize)>, AssignmentError> {
    let rows = costs.rows();
    let cols = costs.cols();
    if cols > rows {
        return Err(AssignmentError::InfeasibleShape { rows, cols });
    }
    if cols == 0 {
        return Ok(Vec::new());
    }

    // Columns are "jobs" inserted one at a time; `assigned_col[r]` is the job
    // currently held by row r. Index 0 in the row axis is a virtual root, so
    // row indices are shifted by one internally.
    let mut col_potential = vec![0.0f64; cols];
    let mut row_potential = vec![0.0f64; rows + 1];
    let mut assigned_col: Vec<Option<usize>> = vec![None; rows + 1];

    for col in 0..cols {
        assigned_col[0] = Some(col);
        let mut current_row = 0usize;
        let mut min_reduced = vec![f64::INFINITY; rows + 1];
        let mut predecessor = vec![0usize; rows + 1];
        let mut visited = vec![false; rows + 1];

        // Grow the alternating tree until a free row is reached.
        loop {
            visited[current_row] = true;
            let tree_col = assigned_col[current_row].expect("visited rows hold a column");
            let mut delta = f64::INFINITY;
            let mut next_row = 0usize;

            for r in 1..=rows {
                if visited[r] {
                    continue;
                }
                let reduced =
                    costs.get(r - 1, tree_col) - col_potential[tree_col] - row_potential[r];
                if reduced < min_reduced[r] {
                    min_reduced[r] = reduced;
                    predecessor[r] = current_row;
                }
                if min_reduced[r] < delta {
                    delta = min_reduced[r];
                    next_row = r;
                }
            }

            for r in 0..=rows {
                if visited[r] {
                    if let Some(c) = assigned_col[r] {
                        col_potential[c] += delta;
                    }
                    row_potential[r] -= delta;
                } else {
                    min_reduced[r] -= delta;
                }
            }

            current_row = next_row;
            if assigned_col[current_row].is_none() {
                break;
            }
        }

        // Augment along the path back to the root.
        while current_row != 0 {
            let prev = predecessor[current_row];
            assigned_col[current_row] = assigned_col[prev];
            current_row = prev;
        }
    }

    let mut pairs: Vec<(usize, usize)> = assigned_col[1..]
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (r, c)))
        .collect();
    pairs.sort_by_key(|&(_, c)| c);
    Ok(pairs)
}

/// Total cost of an assignment under `costs`.
pub fn assignment_cost(costs: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| costs.get(r, c)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Embedding;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cost(rows: &[Vec<f64>]) -> CostMatrix {
        CostMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    /// Exhaustive-permutation optimum: minimum over all injective
    /// column→row maps. Independent of the solver above.
    fn brute_force_min(costs: &CostMatrix) -> f64 {
        fn recurse(costs: &CostMatrix, col: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if col == costs.cols() {
                *best = best.min(acc);
                return;
            }
            for r in 0..costs.rows() {
                if !used[r] {
                    used[r] = true;
                    recurse(costs, col + 1, used, acc + costs.get(r, col), best);
                    used[r] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        recurse(costs, 0, &mut vec![false; costs.rows()], 0.0, &mut best);
        best
    }

    #[test]
    fn zero_diagonal() {
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let pairs = hungarian(&c).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &pairs), 0.0);
    }

    #[test]
    fn zero_anti_diagonal() {
        let c = cost(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pairs = hungarian(&c).unwrap();
        assert_eq!(pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(assignment_cost(&c, &pairs), 0.0);
    }

    #[test]
    fn rectangular_leaves_rows_unmatched() {
        let c = cost(&[vec![5.0], vec![1.0], vec![3.0]]);
        let pairs = hungarian(&c).unwrap();
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn infeasible_when_more_columns_than_rows() {
        let c = cost(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(
            hungarian(&c),
            Err(AssignmentError::InfeasibleShape { rows: 1, cols: 3 })
        );
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=6usize {
            for _ in 0..200 {
                let m = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..10.0));
                let c = CostMatrix::new(m).unwrap();
                let pairs = hungarian(&c).unwrap();
                let got = assignment_cost(&c, &pairs);
                let want = brute_force_min(&c);
                assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rectangular_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rows = rng.random_range(3..7);
            let cols = rng.random_range(1..=rows);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..5.0));
            let c = CostMatrix::new(m).unwrap();
            let pairs = hungarian(&c).unwrap();
            assert_eq!(pairs.len(), cols);
            let got = assignment_cost(&c, &pairs);
            let want = brute_force_min(&c);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn row_constant_shift_preserves_optimum_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.random_range(2..6);
            let m = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..10.0));
            let base = CostMatrix::new(m.clone()).unwrap();
            let base_cost = assignment_cost(&base, &hungarian(&base).unwrap());

            let shift_row = rng.random_range(0..n);
            let shift = rng.random_range(0.0..5.0);
            let shifted = CostMatrix::new(Matrix::from_fn(n, n, |r, c| {
                m.get(r, c) + if r == shift_row { shift } else { 0.0 }
            }))
            .unwrap();
            let shifted_cost = assignment_cost(&shifted, &hungarian(&shifted).unwrap());
            assert!(
                (shifted_cost - base_cost - shift).abs() < 1e-9,
                "square shift must move the optimum by exactly the constant"
            );
        }
    }

    #[test]
    fn output_is_injective_in_both_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let rows = rng.random_range(2..8);
            let cols = rng.random_range(1..=rows);
            let c = CostMatrix::new(Matrix::from_fn(rows, cols, |_, _| {
                rng.random_range(0.0..1.0)
            }))
            .unwrap();
            let pairs = hungarian(&c).unwrap();
            let mut rs: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rs.sort_unstable();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(rs.len(), pairs.len());
            assert_eq!(cs.len(), pairs.len());
        }
    }

    fn obs(scores: Vec<f64>, mask: BinaryMask) -> InstanceObservation {
        InstanceObservation {
            embedding: Embedding::new(vec![1.0, 0.0]),
            class_scores: scores,
            mask: Some(mask),
            confidence: 1.0,
        }
    }

    #[test]
    fn pair_cost_perfect_prediction() {
        let mask = BinaryMask::rect(8, 8, 1, 1, 3, 3);
        let pred = obs(vec![0.0, 1.0], mask.clone());
        let gt = GtInstance { id: 0, class_label: 1, mask };
        assert_eq!(pair_cost(&pred, &gt, 2.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn pair_cost_maximal_when_disjoint_and_misclassified() {
        let pred = obs(vec![1.0, 0.0], BinaryMask::rect(8, 8, 0, 0, 2, 2));
        let gt = GtInstance {
            id: 0,
            class_label: 1,
            mask: BinaryMask::rect(8, 8, 5, 5, 2, 2),
        };
        assert_eq!(pair_cost(&pred, &gt, 2.0, 5.0).unwrap(), 7.0);
    }

    #[test]
    fn pair_cost_matches_hand_formula_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mask_a = BinaryMask::rect(
                16,
                16,
                rng.random_range(0..8),
                rng.random_range(0..8),
                rng.random_range(2..8),
                rng.random_range(2..8),
            );
            let mask_b = BinaryMask::rect(
                16,
                16,
                rng.random_range(0..8),
                rng.random_range(0..8),
                rng.random_range(2..8),
                rng.random_range(2..8),
            );
            let score: f64 = rng.random_range(0.0..1.0);
            let w_cls: f64 = rng.random_range(0.1..4.0);
            let w_mask: f64 = rng.random_range(0.1..8.0);
            let pred = obs(vec![score], mask_a.clone());
            let gt = GtInstance { id: 0, class_label: 0, mask: mask_b.clone() };
            let want = w_cls * (1.0 - score) + w_mask * (1.0 - mask_a.iou(&mask_b).unwrap());
            let got = pair_cost(&pred, &gt, w_cls, w_mask).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_cost_raster_mismatch() {
        let pred = obs(vec![1.0], BinaryMask::empty(4, 4));
        let gt = GtInstance { id: 0, class_label: 0, mask: BinaryMask::empty(5, 4) };
        assert_eq!(
            pair_cost(&pred, &gt, 2.0, 5.0),
            Err(AssignmentError::RasterMismatch)
        );
    }
}
