//! Minimum-cost bipartite assignment.
//!
//! The solver works on the orientation with fewer rows, runs the
//! potential-based O(r²c) Hungarian method, then walks rows in order fixing
//! each to the smallest column that still admits an optimal completion. Among
//! all optimal assignments this picks the lexicographically smallest one, so
//! ties resolve the same way as an ordered exhaustive search.

use crate::error::{Error, Result};

/// Relative slack under which two assignment costs count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Optimal pairing of a cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs in row order; `min(rows, cols)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum total cost pairing of `cost[rows][cols]`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let (rows, cols) = check(cost)?;
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let flip = rows > cols;
    let m: Vec<Vec<f64>> = if flip {
        (0..cols)
            .map(|j| (0..rows).map(|i| cost[i][j]).collect())
            .collect()
    } else {
        cost.to_vec()
    };
    let cols_of = lexicographic_optimum(&m);
    let mut pairs: Vec<(usize, usize)> = cols_of
        .iter()
        .enumerate()
        .map(|(r, &c)| if flip { (c, r) } else { (r, c) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// Exhaustive search over injective maps in lexicographic order; the oracle
/// for [`hungarian_match`]. Exponential, so only for small matrices.
pub fn brute_force_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let (rows, cols) = check(cost)?;
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let flip = rows > cols;
    let m: Vec<Vec<f64>> = if flip {
        (0..cols)
            .map(|j| (0..rows).map(|i| cost[i][j]).collect())
            .collect()
    } else {
        cost.to_vec()
    };
    let mut candidates = Vec::new();
    let mut current = Vec::new();
    let mut used = vec![false; m[0].len()];
    enumerate(&m, &mut current, &mut used, &mut candidates);
    let best = candidates
        .iter()
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    let (cols_of, _) = candidates
        .into_iter()
        .find(|(_, c)| *c <= best + TIE_TOLERANCE * (1.0 + best.abs()))
        .expect("at least one assignment");
    let mut pairs: Vec<(usize, usize)> = cols_of
        .iter()
        .enumerate()
        .map(|(r, &c)| if flip { (c, r) } else { (r, c) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment { pairs, cost: total })
}

fn enumerate(
    m: &[Vec<f64>],
    current: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<(Vec<usize>, f64)>,
) {
    let r = current.len();
    if r == m.len() {
        let c = current.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
        out.push((current.clone(), c));
        return;
    }
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            current.push(j);
            enumerate(m, current, used, out);
            current.pop();
            used[j] = false;
        }
    }
}

fn check(cost: &[Vec<f64>]) -> Result<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    for row in cost {
        if row.len() != cols {
            return Err(Error::invalid("ragged cost matrix"));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("assignment cost"));
        }
    }
    Ok((rows, cols))
}

/// Lexicographically smallest optimal column choice per row, `rows ≤ cols`.
fn lexicographic_optimum(m: &[Vec<f64>]) -> Vec<usize> {
    let rows = m.len();
    let cols = m[0].len();
    let best = solve(m, &vec![None; rows], &vec![false; cols]).0;
    let slack = TIE_TOLERANCE * (1.0 + best.abs());
    let mut fixed: Vec<Option<usize>> = vec![None; rows];
    let mut taken = vec![false; cols];
    let mut fixed_cost = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if taken[c] {
                continue;
            }
            fixed[r] = Some(c);
            taken[c] = true;
            let rest = solve(m, &fixed, &taken).0;
            if fixed_cost + m[r][c] + rest <= best + slack {
                fixed_cost += m[r][c];
                break;
            }
            taken[c] = false;
            fixed[r] = None;
        }
        debug_assert!(fixed[r].is_some());
    }
    fixed
        .into_iter()
        .map(|c| c.expect("every row fixed"))
        .collect()
}

/// Optimal cost of the free rows over the free columns (fixed rows and
/// taken columns excluded), with the column chosen for each free row.
fn solve(m: &[Vec<f64>], fixed: &[Option<usize>], taken: &[bool]) -> (f64, Vec<usize>) {
    let free_rows: Vec<usize> = (0..m.len()).filter(|&r| fixed[r].is_none()).collect();
    let free_cols: Vec<usize> = (0..taken.len()).filter(|&c| !taken[c]).collect();
    let n = free_rows.len();
    let k = free_cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-indexed potentials formulation; p[j] is the row matched to column j.
    let a = |i: usize, j: usize| m[free_rows[i - 1]][free_cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=k {
        if p[j] != 0 {
            col_of[p[j] - 1] = free_cols[j - 1];
        }
    }
    let total = col_of.iter().zip(&free_rows).map(|(&c, &r)| m[r][c]).sum();
    (total, col_of)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let a = hungarian_match(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 1.0);
    }

    #[test]
    fn single_entry() {
        let a = hungarian_match(&[vec![4.5]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn ties_take_the_lexicographically_first_assignment() {
        let a = hungarian_match(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let a = hungarian_match(&vec![vec![0.0; 4]; 2]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn rectangular_both_ways() {
        let tall = vec![vec![5.0, 1.0], vec![0.0, 9.0], vec![2.0, 2.0]];
        let a = hungarian_match(&tall).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        let wide: Vec<Vec<f64>> = (0..2)
            .map(|j| (0..3).map(|i| tall[i][j]).collect())
            .collect();
        let b = hungarian_match(&wide).unwrap();
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
    }
}
