//! Rectangular assignment with forbidden entries.
//!
//! [`hungarian`] maximizes the number of matched pairs over permitted
//! entries and, among those, minimizes total cost. [`canonical_assignment`]
//! additionally picks a unique optimum when several tie.

use std::fmt::Debug;
use std::ops::{Add, Sub};

/// Cost values usable by the solver: an ordered additive group.
pub trait Cost: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Debug {
    fn zero() -> Self;
}

macro_rules! impl_cost {
    ($($t:ty => $z:expr),*) => {
        $(impl Cost for $t {
            fn zero() -> Self {
                $z
            }
        })*
    };
}

impl_cost!(i32 => 0, i64 => 0, f32 => 0.0, f64 => 0.0);

/// Lexicographic pair: compares `.0` first, then `.1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Lex<A, B>(pub A, pub B);

impl<A: Cost, B: Cost> Add for Lex<A, B> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Lex(self.0 + o.0, self.1 + o.1)
    }
}

impl<A: Cost, B: Cost> Sub for Lex<A, B> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Lex(self.0 - o.0, self.1 - o.1)
    }
}

impl<A: Cost, B: Cost> Cost for Lex<A, B> {
    fn zero() -> Self {
        Lex(A::zero(), B::zero())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<C> {
    /// Matched `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    /// Sum of the matched entries' costs.
    pub total: C,
}

impl<C: Cost> Assignment<C> {
    fn from_pairs(rows: usize, cols: usize, mut pairs: Vec<(usize, usize)>, cost: &impl Fn(usize, usize) -> Option<C>) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        let mut total = C::zero();
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
            total = total + cost(r, c).expect("pairs are permitted");
        }
        Self {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
            total,
        }
    }

    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Shortest-augmenting-path Hungarian algorithm on an `n x m` matrix with
/// `n <= m`. Returns the column assigned to each row.
fn solve_square_or_wide<C: Cost>(n: usize, m: usize, a: impl Fn(usize, usize) -> C) -> Vec<usize> {
    debug_assert!(n <= m);
    let zero = C::zero();
    let mut u = vec![zero; n + 1];
    let mut v = vec![zero; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv: Vec<Option<C>> = vec![None; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta: Option<C> = None;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if minv[j].is_none_or(|mv| cur < mv) {
                    minv[j] = Some(cur);
                    way[j] = j0;
                }
                let mj = minv[j].expect("just set");
                if delta.is_none_or(|d| mj < d) {
                    delta = Some(mj);
                    j1 = j;
                }
            }
            let delta = delta.expect("n <= m leaves a free column");
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else if let Some(mv) = minv[j] {
                    minv[j] = Some(mv - delta);
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
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Optimal assignment on a `rows x cols` matrix where `cost(r, c)` is `None`
/// for forbidden pairs. The number of permitted pairs is maximized first,
/// then their total cost minimized.
pub fn hungarian<C: Cost>(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> Option<C>) -> Assignment<C> {
    if rows == 0 || cols == 0 {
        return Assignment::from_pairs(rows, cols, Vec::new(), &cost);
    }
    let entry = |r: usize, c: usize| match cost(r, c) {
        Some(v) => Lex(0i64, v),
        None => Lex(1, C::zero()),
    };
    let pairs: Vec<(usize, usize)> = if rows <= cols {
        solve_square_or_wide(rows, cols, entry)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        solve_square_or_wide(cols, rows, |c, r| entry(r, c))
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    let pairs = pairs.into_iter().filter(|&(r, c)| cost(r, c).is_some()).collect();
    Assignment::from_pairs(rows, cols, pairs, &cost)
}

/// Convenience wrapper over a dense matrix with every entry permitted.
pub fn hungarian_dense<C: Cost>(matrix: &[Vec<C>]) -> Assignment<C> {
    let cols = matrix.first().map_or(0, Vec::len);
    assert!(matrix.iter().all(|r| r.len() == cols), "ragged cost matrix");
    hungarian(matrix.len(), cols, |r, c| Some(matrix[r][c]))
}

/// Like [`hungarian`], but among all maximum-cardinality assignments whose
/// cost is within `tol` of the optimum, returns the one whose row-to-column
/// vector is lexicographically smallest (an unmatched row sorts after every
/// column). Rows and columns that share no permitted path are solved
/// independently.
pub fn canonical_assignment<C: Cost>(
    rows: usize,
    cols: usize,
    cost: impl Fn(usize, usize) -> Option<C>,
    tol: C,
) -> Assignment<C> {
    let mut pairs = Vec::new();
    for (comp_rows, comp_cols) in components(rows, cols, &cost) {
        let sub = |r: usize, c: usize| cost(comp_rows[r], comp_cols[c]);
        for (r, c) in canonical_component(comp_rows.len(), comp_cols.len(), &sub, tol) {
            pairs.push((comp_rows[r], comp_cols[c]));
        }
    }
    Assignment::from_pairs(rows, cols, pairs, &cost)
}

fn components<C>(rows: usize, cols: usize, cost: &impl Fn(usize, usize) -> Option<C>) -> Vec<(Vec<usize>, Vec<usize>)> {
    // union-find over rows followed by columns
    let mut parent: Vec<usize> = (0..rows + cols).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut has_edge = vec![false; rows];
    for r in 0..rows {
        for c in 0..cols {
            if cost(r, c).is_some() {
                has_edge[r] = true;
                let (a, b) = (find(&mut parent, r), find(&mut parent, rows + c));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for r in (0..rows).filter(|&r| has_edge[r]) {
        let root = find(&mut parent, r);
        groups.entry(root).or_default().0.push(r);
    }
    for c in 0..cols {
        let root = find(&mut parent, rows + c);
        if let Some(g) = groups.get_mut(&root) {
            g.1.push(c);
        }
    }
    groups.into_values().collect()
}

fn canonical_component<C: Cost>(
    rows: usize,
    cols: usize,
    cost: &impl Fn(usize, usize) -> Option<C>,
    tol: C,
) -> Vec<(usize, usize)> {
    let base = hungarian(rows, cols, cost);
    let card = base.pairs.len();
    let bound = base.total + tol;
    let mut current: Vec<Option<usize>> = (0..rows).map(|r| base.col_of(r)).collect();
    // forced[r]: Some(Some(c)) pins r to c, Some(None) leaves r unmatched
    let mut forced: Vec<Option<Option<usize>>> = vec![None; rows];
    for r in 0..rows {
        let limit = current[r].unwrap_or(cols);
        for c in 0..limit {
            if cost(r, c).is_none() || forced.contains(&Some(Some(c))) {
                continue;
            }
            forced[r] = Some(Some(c));
            let f = &forced;
            let constrained = |i: usize, j: usize| {
                let col_pinned_elsewhere = f.iter().enumerate().any(|(k, x)| k != i && *x == Some(Some(j)));
                match f[i] {
                    Some(Some(pc)) if pc != j => None,
                    Some(None) => None,
                    _ if col_pinned_elsewhere => None,
                    _ => cost(i, j),
                }
            };
            let sol = hungarian(rows, cols, constrained);
            if sol.pairs.len() == card && sol.total <= bound && sol.col_of(r) == Some(c) {
                current = (0..rows).map(|i| sol.col_of(i)).collect();
                break;
            }
        }
        forced[r] = Some(current[r]);
    }
    current
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (r, c)))
        .collect()
}
