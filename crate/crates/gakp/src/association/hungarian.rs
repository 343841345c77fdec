//! Rectangular assignment: a cost matrix with gated (forbidden) cells and a
//! Kuhn–Munkres solver over its sentinel-padded square form.

use crate::error::{Error, Result};

/// Track-by-detection cost table. Gated cells keep a numeric cost for
/// inspection but can never be part of a returned match.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
    gated: Vec<bool>,
}

impl CostMatrix {
    /// Builds a matrix by evaluating `f(row, col) -> (cost, gated)`.
    /// Costs must be finite unless the cell is gated.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> (f64, bool),
    ) -> Result<Self> {
        let mut costs = Vec::with_capacity(rows * cols);
        let mut gated = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (cost, gate) = f(r, c);
                if !gate && !cost.is_finite() {
                    return Err(Error::input(
                        "cost matrix",
                        format!("non-finite cost {cost} at open cell ({r}, {c})"),
                    ));
                }
                costs.push(cost);
                gated.push(gate);
            }
        }
        Ok(CostMatrix {
            rows,
            cols,
            costs,
            gated,
        })
    }

    /// All cells open with the given costs; `costs` is row-major.
    pub fn from_rows(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != rows * cols {
            return Err(Error::input(
                "cost matrix",
                format!("{} costs for {rows}x{cols}", costs.len()),
            ));
        }
        if let Some(bad) = costs.iter().find(|c| !c.is_finite()) {
            return Err(Error::input(
                "cost matrix",
                format!("non-finite cost {bad}"),
            ));
        }
        let gated = vec![false; costs.len()];
        Ok(CostMatrix {
            rows,
            cols,
            costs,
            gated,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cost(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.cols + col]
    }

    pub fn is_gated(&self, row: usize, col: usize) -> bool {
        self.gated[row * self.cols + col]
    }

    pub fn set_gated(&mut self, row: usize, col: usize, gated: bool) {
        self.gated[row * self.cols + col] = gated;
    }

    /// A finite cost strictly larger than any open cell: gated and padding
    /// cells carry it in the square form, so the solver prefers leaving an
    /// entity unmatched over crossing a gate.
    fn sentinel(&self) -> f64 {
        let sum: f64 = self
            .costs
            .iter()
            .zip(&self.gated)
            .filter(|(c, g)| !**g && c.is_finite())
            .map(|(c, _)| c.abs())
            .sum();
        sum + 1.0
    }
}

/// Output of the solver, in terms of the original rectangular matrix.
/// `matches` is sorted by row; every index appears exactly once across
/// `matches`/`unmatched_*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Minimum-cost assignment over the open cells. The matrix is padded to a
/// square with sentinel costs; pairs that land on a sentinel (gated or
/// padding) come back as unmatched. Runs in O(n^3) and is deterministic for
/// fixed input, including between equal-cost optima.
pub fn hungarian(matrix: &CostMatrix) -> Assignment {
    let (rows, cols) = (matrix.rows, matrix.cols);
    if rows == 0 || cols == 0 {
        return Assignment {
            matches: Vec::new(),
            unmatched_tracks: (0..rows).collect(),
            unmatched_detections: (0..cols).collect(),
        };
    }
    let n = rows.max(cols);
    let sentinel = matrix.sentinel();
    let square = |r: usize, c: usize| -> f64 {
        if r < rows && c < cols && !matrix.is_gated(r, c) {
            matrix.cost(r, c)
        } else {
            sentinel
        }
    };

    let row_of_col = solve_square(n, square);

    let mut matches = Vec::new();
    let mut matched_rows = vec![false; rows];
    let mut matched_cols = vec![false; cols];
    for (col, row) in row_of_col.iter().enumerate() {
        if *row < rows && col < cols && !matrix.is_gated(*row, col) {
            matches.push((*row, col));
            matched_rows[*row] = true;
            matched_cols[col] = true;
        }
    }
    matches.sort_unstable();
    Assignment {
        matches,
        unmatched_tracks: (0..rows).filter(|&r| !matched_rows[r]).collect(),
        unmatched_detections: (0..cols).filter(|&c| !matched_cols[c]).collect(),
    }
}

/// Kuhn–Munkres with row/column potentials and augmenting paths
/// (Jonker–Volgenant style), 1-indexed internally. Returns, per column, the
/// row assigned to it (`usize::MAX` padding never escapes: every column is
/// assigned for a square matrix).
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    // Potentials for rows and columns; p[j] is the row matched to column j,
    // with index 0 used as a virtual staging column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=n).map(|j| p[j] - 1).collect()
}
