//! Sparse Cholesky factorization of shifted symmetric positive semi-definite
//! matrices `A + µI`.
//!
//! The fill-reducing ordering is a nested dissection driven by the multilevel
//! bisection in [`crate::partition`], with small leaves ordered by exact
//! minimum degree. Symbolic analysis (ordering, elimination tree, column
//! counts) depends only on the sparsity pattern and is reused across
//! numeric factorizations; the numeric phase is an up-looking row-by-row
//! factorization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::partition::{bisect, Graph};
use crate::sparse::CsrMatrix;

const NONE: usize = usize::MAX;
/// Subgraphs at or below this size are ordered by minimum degree instead of dissected.
const ND_LEAF: usize = 64;
const ND_SEED: u64 = 0x5eed_cafe;

/// Failure of the numeric factorization: the pivot at `column` (in the
/// permuted ordering) was not positive.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-positive pivot {pivot:e} at column {column}")]
pub struct NotPositiveDefinite {
    pub column: usize,
    pub pivot: f64,
}

/// Minimum-degree order for a graph of at most 64 vertices, using bitmask
/// elimination graphs. Ties go to the lowest vertex.
fn min_degree_small(g: &Graph) -> Vec<usize> {
    let n = g.n();
    debug_assert!(n <= 64);
    let mut adj = vec![0u64; n];
    for (v, a) in adj.iter_mut().enumerate() {
        for (u, _) in g.neighbors(v) {
            *a |= 1 << u;
        }
    }
    let mut alive: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut order = Vec::with_capacity(n);
    while alive != 0 {
        let mut best = NONE;
        let mut best_deg = u32::MAX;
        let mut rest = alive;
        while rest != 0 {
            let v = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            let d = (adj[v] & alive).count_ones();
            if d < best_deg {
                best_deg = d;
                best = v;
            }
        }
        let nb = adj[best] & alive & !(1 << best);
        let mut rest = nb;
        while rest != 0 {
            let u = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            adj[u] |= nb & !(1 << u);
        }
        alive &= !(1 << best);
        order.push(best);
    }
    order
}

fn dissect(g: &Graph, verts: &[usize], order: &mut Vec<usize>, rng: &mut ChaCha8Rng) {
    if g.n() <= ND_LEAF {
        order.extend(min_degree_small(g).into_iter().map(|t| verts[t]));
        return;
    }
    let side = bisect(g, 0.5, 0.1, rng);
    let mut boundary = [Vec::new(), Vec::new()];
    for v in 0..g.n() {
        if g.neighbors(v).any(|(u, _)| side[u] != side[v]) {
            boundary[side[v] as usize].push(v);
        }
    }
    let sep_side = usize::from(boundary[1].len() <= boundary[0].len());
    let mut in_sep = vec![false; g.n()];
    for &v in &boundary[sep_side] {
        in_sep[v] = true;
    }
    let parts: [Vec<usize>; 2] = [false, true].map(|s| (0..g.n()).filter(|&v| side[v] == s && !in_sep[v]).collect());
    if parts[0].is_empty() || parts[1].is_empty() {
        // bisection did not produce two sides; fall back to a flat order
        order.extend_from_slice(verts);
        return;
    }
    for part in &parts {
        let sub = g.induced(part);
        let sub_verts: Vec<usize> = part.iter().map(|&t| verts[t]).collect();
        dissect(&sub, &sub_verts, order, rng);
    }
    order.extend(boundary[sep_side].iter().map(|&t| verts[t]));
}

/// Fill-reducing ordering (`perm[new] = old`) for a square symmetric pattern.
pub fn nested_dissection(pattern: &CsrMatrix) -> Vec<usize> {
    let n = pattern.nrows();
    let mut xadj = Vec::with_capacity(n + 1);
    xadj.push(0);
    let mut adj = Vec::new();
    for r in 0..n {
        let (cols, _) = pattern.row(r);
        adj.extend(cols.iter().copied().filter(|&c| c != r));
        xadj.push(adj.len());
    }
    let g = Graph {
        ewgt: vec![1; adj.len()],
        xadj,
        adj,
        vwgt: vec![1; n],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ND_SEED);
    let verts: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    dissect(&g, &verts, &mut order, &mut rng);
    debug_assert_eq!(order.len(), n);
    order
}

/// Pattern-only analysis of a symmetric matrix, reusable for any values on
/// the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    /// Source pattern, kept to validate later numeric calls.
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Upper triangle of the permuted matrix, compressed by column (rows ≤ column).
    cp: Vec<usize>,
    ci: Vec<usize>,
    /// Source nonzero → position in the permuted upper triangle, or `NONE` for the mirrored half.
    src_to_c: Vec<usize>,
    diag_pos: Vec<usize>,
    parent: Vec<usize>,
    lp: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyzes `pattern` (full symmetric storage) with a nested-dissection ordering.
    pub fn analyze(pattern: &CsrMatrix) -> Self {
        Self::with_ordering(pattern, nested_dissection(pattern))
    }

    /// Analyzes `pattern` with a caller-supplied ordering (`perm[new] = old`).
    pub fn with_ordering(pattern: &CsrMatrix, perm: Vec<usize>) -> Self {
        let n = pattern.nrows();
        assert_eq!(pattern.ncols(), n, "matrix must be square");
        assert_eq!(perm.len(), n, "ordering length");
        let mut pinv = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // column lists of the permuted upper triangle; src NONE marks the implicit diagonal
        let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut src_to_c = vec![NONE; pattern.nnz()];
        for r in 0..n {
            for p in pattern.row_ptr()[r]..pattern.row_ptr()[r + 1] {
                let (i, j) = (pinv[r], pinv[pattern.col_idx()[p]]);
                if i <= j {
                    cols[j].push((i, p));
                }
            }
        }
        for (k, col) in cols.iter_mut().enumerate() {
            col.push((k, NONE));
            col.sort_unstable();
        }
        let mut cp = Vec::with_capacity(n + 1);
        cp.push(0);
        let mut ci = Vec::new();
        let mut diag_pos = vec![NONE; n];
        for (k, col) in cols.iter().enumerate() {
            for (t, &(i, src)) in col.iter().enumerate() {
                if t == 0 || col[t - 1].0 != i {
                    ci.push(i);
                }
                let pos = ci.len() - 1;
                if src != NONE {
                    src_to_c[src] = pos;
                }
                if i == k {
                    diag_pos[k] = pos;
                }
            }
            cp.push(ci.len());
        }

        let parent = etree(n, &cp, &ci);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(k, &cp, &ci, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut lp = Vec::with_capacity(n + 1);
        lp.push(0);
        for k in 0..n {
            lp.push(lp[k] + counts[k]);
        }

        Self {
            n,
            perm,
            row_ptr: pattern.row_ptr().to_vec(),
            col_idx: pattern.col_idx().to_vec(),
            cp,
            ci,
            src_to_c,
            diag_pos,
            parent,
            lp,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonzeros in the Cholesky factor, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    pub fn ordering(&self) -> &[usize] {
        &self.perm
    }

    /// True if `a` has exactly the pattern this analysis was built from.
    pub fn matches(&self, a: &CsrMatrix) -> bool {
        a.nrows() == self.n && a.row_ptr() == self.row_ptr && a.col_idx() == self.col_idx
    }
}

fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &ci[cp[k]..cp[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of L (excluding the diagonal) in topological
/// order, written to `stack[top..n]`; returns `top`.
fn ereach(k: usize, cp: &[usize], ci: &[usize], parent: &[usize], stack: &mut [usize], mark: &mut [usize]) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for &row in &ci[cp[k]..cp[k + 1]] {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Numeric Cholesky factor `L Lᵀ = Pᵀ(A + µI)P`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    sym: Arc<SymbolicCholesky>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl CholeskyFactor {
    /// Factors `a + shift·I`. `a` must have the pattern `sym` was built from.
    pub fn factor(sym: Arc<SymbolicCholesky>, a: &CsrMatrix, shift: f64) -> Result<Self, NotPositiveDefinite> {
        assert!(sym.matches(a), "matrix pattern differs from the symbolic analysis");
        let n = sym.n;
        let mut cx = vec![0.0; sym.ci.len()];
        for (s, &pos) in sym.src_to_c.iter().enumerate() {
            if pos != NONE {
                cx[pos] += a.values()[s];
            }
        }
        for &d in &sym.diag_pos {
            cx[d] += shift;
        }

        let nnz = sym.lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = sym.lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(k, &sym.cp, &sym.ci, &sym.parent, &mut stack, &mut mark);
            for p in sym.cp[k]..sym.cp[k + 1] {
                x[sym.ci[p]] = cx[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lx[sym.lp[i]];
                x[i] = 0.0;
                for p in sym.lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0 && d.is_finite()) {
                return Err(NotPositiveDefinite { column: k, pivot: d });
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(Self { sym, li, lx })
    }

    pub fn n(&self) -> usize {
        self.sym.n
    }

    /// Solves `(A + µI) y = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.sym.n;
        assert_eq!(b.len(), n, "right-hand side length");
        let lp = &self.sym.lp;
        let mut x: Vec<f64> = self.sym.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            x[j] /= self.lx[lp[j]];
            let xj = x[j];
            for p in lp[j] + 1..lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in lp[j] + 1..lp[j + 1] {
                s -= self.lx[p] * x[self.li[p]];
            }
            x[j] = s / self.lx[lp[j]];
        }
        let mut y = vec![0.0; n];
        for (new, &old) in self.sym.perm.iter().enumerate() {
            y[old] = x[new];
        }
        y
    }
}
