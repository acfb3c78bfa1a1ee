//! Rectangular linear sum assignment.
//!
//! [`solve_lsa`] is a shortest-augmenting-path solver (the Jonker-Volgenant
//! family, in the rectangular form popularised by Crouse). It assigns every row
//! to a distinct column so that the summed cost is minimal. Rows must not
//! outnumber columns. [`brute_force_lsa`] enumerates every injective map and
//! exists to check the fast path.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Largest column count accepted by [`brute_force_lsa`].
pub const BRUTE_FORCE_LIMIT: usize = 9;

const NONE: usize = usize::MAX;

/// An injective map from rows (student dimensions) to columns (teacher dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    mapping: Vec<usize>,
    total_score: f64,
}

impl AssignmentSolution {
    /// Validates that `mapping` is injective into `0..targets`.
    pub fn new(mapping: Vec<usize>, targets: usize, total_score: f64) -> Result<Self> {
        let mut seen = vec![false; targets];
        for &j in &mapping {
            if j >= targets {
                return Err(Error::IndexOutOfRange { index: j, bound: targets });
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::NotInjective(j));
            }
        }
        Ok(Self { mapping, total_score })
    }

    /// Identity map over `n` dimensions with the given score.
    pub fn identity(n: usize, total_score: f64) -> Self {
        Self { mapping: (0..n).collect(), total_score }
    }

    /// `mapping()[i]` is the column assigned to row `i`.
    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Sum of the selected score entries. For a bare solve this is the
    /// negated minimal cost.
    pub fn total_score(&self) -> f64 {
        self.total_score
    }

    /// Sum of `m[i][mapping[i]]` in row order.
    pub fn selected_sum(&self, m: &Matrix) -> f64 {
        self.mapping.iter().enumerate().map(|(i, &j)| m.get(i, j)).sum()
    }

    /// The selected entries `m[i][mapping[i]]`.
    pub fn selected(&self, m: &Matrix) -> Vec<f64> {
        self.mapping.iter().enumerate().map(|(i, &j)| m.get(i, j)).collect()
    }

    /// Binary matrix `Z` (rows x targets) with `Z[i][mapping[i]] = 1`.
    pub fn to_binary_matrix(&self, targets: usize) -> Matrix {
        let mut z = Matrix::zeros(self.mapping.len().max(1), targets);
        for (i, &j) in self.mapping.iter().enumerate() {
            z.set(i, j, 1.0);
        }
        z
    }
}

fn check_cost(cost: &Matrix) -> Result<()> {
    if cost.rows() > cost.cols() {
        return Err(Error::MoreRowsThanCols { rows: cost.rows(), cols: cost.cols() });
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    Ok(())
}

/// Minimum-cost assignment of every row to a distinct column.
///
/// `total_score` of the result is `-(minimal cost)`, with the cost summed in row order.
pub fn solve_lsa(cost: &Matrix) -> Result<AssignmentSolution> {
    check_cost(cost)?;
    let (nr, nc) = cost.shape();

    // Dual potentials for rows and columns.
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut col4row = vec![NONE; nr];
    let mut row4col = vec![NONE; nc];

    let mut shortest = vec![f64::INFINITY; nc];
    let mut path = vec![NONE; nc];
    let mut seen_row = vec![false; nr];
    let mut seen_col = vec![false; nc];
    let mut remaining = vec![0usize; nc];

    for cur_row in 0..nr {
        shortest.fill(f64::INFINITY);
        path.fill(NONE);
        seen_row.fill(false);
        seen_col.fill(false);
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = nc - it - 1;
        }
        let mut num_remaining = nc;

        let mut min_val = 0.0;
        let mut i = cur_row;
        let mut sink = NONE;
        while sink == NONE {
            seen_row[i] = true;
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            let row = cost.row(i);
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let reduced = min_val + row[j] - u[i] - v[j];
                if reduced < shortest[j] {
                    path[j] = i;
                    shortest[j] = reduced;
                }
                // Prefer a free column on ties so paths end early.
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            // Costs are finite and there are at least as many columns as rows,
            // so a reachable column always exists.
            debug_assert!(lowest.is_finite());
            min_val = lowest;
            let j = remaining[index];
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            seen_col[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur_row] += min_val;
        for r in 0..nr {
            if seen_row[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..nc {
            if seen_col[c] {
                v[c] -= min_val - shortest[c];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }

    let total_cost: f64 = col4row.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(AssignmentSolution { mapping: col4row, total_score: -total_cost })
}

/// Exhaustive minimum over all injective maps. Limited to [`BRUTE_FORCE_LIMIT`] columns.
pub fn brute_force_lsa(cost: &Matrix) -> Result<AssignmentSolution> {
    check_cost(cost)?;
    if cost.cols() > BRUTE_FORCE_LIMIT {
        return Err(Error::BruteForceTooLarge {
            rows: cost.rows(),
            cols: cost.cols(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    struct Search<'a> {
        cost: &'a Matrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        // Partial sums accumulate left to right, matching a row-order sum.
        fn visit(&mut self, row: usize, partial: f64) {
            if row == self.cost.rows() {
                if self.best.as_ref().is_none_or(|(b, _)| partial < *b) {
                    self.best = Some((partial, self.current.clone()));
                }
                return;
            }
            for j in 0..self.cost.cols() {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.current.push(j);
                self.visit(row + 1, partial + self.cost.get(row, j));
                self.current.pop();
                self.used[j] = false;
            }
        }
    }

    let mut search = Search { cost, used: vec![false; cost.cols()], current: Vec::new(), best: None };
    search.visit(0, 0.0);
    let (best_cost, mapping) = search.best.expect("at least one injective map exists");
    Ok(AssignmentSolution { mapping, total_score: -best_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn neg(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap().scale(-1.0)
    }

    fn cost_of(sol: &AssignmentSolution, cost: &Matrix) -> f64 {
        sol.selected_sum(cost)
    }

    #[test]
    fn square_example() {
        let cost = neg(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let sol = solve_lsa(&cost).unwrap();
        assert_eq!(sol.mapping(), &[0, 1]);
        assert!((sol.total_score() - 1.7).abs() < 1e-12);
        let bf = brute_force_lsa(&cost).unwrap();
        assert_eq!(cost_of(&bf, &cost), cost_of(&sol, &cost));
    }

    #[test]
    fn rectangular_example() {
        let cost = neg(&[&[0.1, 0.9, 0.3], &[0.8, 0.2, 0.4]]);
        let sol = solve_lsa(&cost).unwrap();
        assert_eq!(sol.mapping(), &[1, 0]);
        assert!((sol.total_score() - 1.7).abs() < 1e-12);
        let bf = brute_force_lsa(&cost).unwrap();
        assert_eq!(bf.mapping(), &[1, 0]);
        assert_eq!(bf.total_score(), sol.total_score());
    }

    #[test]
    fn negated_identity_maps_diagonally() {
        for n in [1, 2, 5, 17] {
            let sol = solve_lsa(&Matrix::identity(n).scale(-1.0)).unwrap();
            assert_eq!(sol.mapping(), (0..n).collect::<Vec<_>>().as_slice());
            assert_eq!(sol.total_score(), n as f64);
        }
    }

    #[test]
    fn brute_force_trivial_cases() {
        let sol = brute_force_lsa(&Matrix::new(1, 1, vec![3.5]).unwrap()).unwrap();
        assert_eq!(sol.mapping(), &[0]);

        let flat = Matrix::new(3, 3, vec![0.25; 9]).unwrap();
        let sol = brute_force_lsa(&flat).unwrap();
        assert_eq!(-sol.total_score(), 0.75);
        let mut m = sol.mapping().to_vec();
        m.sort_unstable();
        assert_eq!(m, vec![0, 1, 2]);
    }

    #[test]
    fn errors() {
        let tall = Matrix::zeros(3, 2);
        assert!(matches!(solve_lsa(&tall), Err(Error::MoreRowsThanCols { rows: 3, cols: 2 })));
        assert!(matches!(brute_force_lsa(&tall), Err(Error::MoreRowsThanCols { .. })));
        assert!(matches!(brute_force_lsa(&Matrix::zeros(2, 10)), Err(Error::BruteForceTooLarge { .. })));
    }

    #[test]
    fn solution_validation() {
        assert!(AssignmentSolution::new(vec![0, 2], 3, 0.0).is_ok());
        assert!(matches!(AssignmentSolution::new(vec![0, 3], 3, 0.0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(AssignmentSolution::new(vec![1, 1], 3, 0.0), Err(Error::NotInjective(1))));
        let z = AssignmentSolution::new(vec![2, 0], 3, 0.0).unwrap().to_binary_matrix(3);
        assert_eq!(z.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    fn random_cost(rng: &mut ChaCha8Rng, max: usize) -> Matrix {
        let rows = rng.random_range(1..=max);
        let cols = rng.random_range(rows..=max);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let cost = random_cost(&mut rng, 7);
            let fast = solve_lsa(&cost).unwrap();
            let slow = brute_force_lsa(&cost).unwrap();
            assert_eq!(cost_of(&fast, &cost), cost_of(&slow, &cost), "{cost:?}");
            AssignmentSolution::new(fast.mapping().to_vec(), cost.cols(), 0.0).unwrap();
        }
    }

    #[test]
    fn constant_shift_keeps_optimal_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let cost = random_cost(&mut rng, 6);
            let shift = rng.random_range(-5.0..5.0);
            let shifted = cost.map(|v| v + shift);
            let a = brute_force_lsa(&cost).unwrap();
            let b = solve_lsa(&shifted).unwrap();
            // The shifted optimum must still be optimal for the original costs.
            assert!((cost_of(&b, &cost) - cost_of(&a, &cost)).abs() < 1e-12);
            let expected = cost_of(&a, &cost) + cost.rows() as f64 * shift;
            assert!((cost_of(&b, &shifted) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn column_permutation_permutes_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let cost = random_cost(&mut rng, 7);
            let mut perm: Vec<usize> = (0..cost.cols()).collect();
            for k in (1..perm.len()).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            // permuted[:, perm[j]] = cost[:, j]
            let mut inverse = vec![0; perm.len()];
            for (j, &p) in perm.iter().enumerate() {
                inverse[p] = j;
            }
            let permuted = cost.gather_cols(&inverse).unwrap();
            let a = solve_lsa(&cost).unwrap();
            let b = solve_lsa(&permuted).unwrap();
            let expected: Vec<usize> = a.mapping().iter().map(|&j| perm[j]).collect();
            assert_eq!(b.mapping(), expected.as_slice());
        }
    }
}
