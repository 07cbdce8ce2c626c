//! Block decomposition `JᵀJ = P + B` and the block gradient.
//!
//! For blocks `s, i, j`:
//!
//! ```text
//! P_s  = J_sRᵀ J_sR + J_sρᵀ J_sρ
//! B_ij = J_iρᵀ J_jρ            (i ≠ j, stored only for j ∈ N_i)
//! g_s  = J_sRᵀ R_s + J_sρᵀ ρ
//! ```
//!
//! where `J_sR` holds the rows of block-local residuals `E_s` restricted to
//! the block's variables and `J_sρ` holds the coupling rows `Ê` restricted to
//! the same variables.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::runtime::{Phase, WorkerPool};
use crate::sparse::CsrMatrix;

/// Default power-iteration count for `‖B‖`.
pub const B_NORM_ITERS: usize = 30;
pub const B_NORM_SEED: u64 = 0xb10c;

/// Which global variables each block owns, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    vars: Vec<Vec<usize>>,
    /// `(block, local index)` of every global variable.
    owner: Vec<(usize, usize)>,
}

impl BlockLayout {
    pub fn from_partition(part: &Partition) -> Self {
        let k = part.k();
        let mut vars = vec![Vec::new(); k];
        let mut owner = Vec::with_capacity(2 * part.block_of().len());
        for (pt, &b) in part.block_of().iter().enumerate() {
            for v in [2 * pt, 2 * pt + 1] {
                owner.push((b, vars[b].len()));
                vars[b].push(v);
            }
        }
        Self { vars, owner }
    }

    pub fn k(&self) -> usize {
        self.vars.len()
    }

    pub fn n_vars(&self) -> usize {
        self.owner.len()
    }

    /// Global variable indices of block `s` (`I_s`).
    pub fn vars(&self, s: usize) -> &[usize] {
        &self.vars[s]
    }

    pub fn block_size(&self, s: usize) -> usize {
        self.vars[s].len()
    }

    pub fn owner(&self, v: usize) -> (usize, usize) {
        self.owner[v]
    }

    /// True if every block occupies a contiguous range of variables.
    pub fn is_contiguous(&self) -> bool {
        self.vars.iter().all(|v| v.windows(2).all(|w| w[1] == w[0] + 1))
    }

    /// Splits a global vector into per-block segments.
    pub fn split(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.vars.iter().map(|vs| vs.iter().map(|&v| x[v]).collect()).collect()
    }

    /// Concatenates per-block segments back into a global vector.
    pub fn gather(&self, parts: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_vars()];
        for (vs, seg) in self.vars.iter().zip(parts) {
            for (&v, &val) in vs.iter().zip(seg) {
                out[v] = val;
            }
        }
        out
    }
}

/// The Jacobian rows of one block: `J_iR` (rows `E_i`) and `J_iρ` (rows `Ê`),
/// both with the block's local column numbering.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockJacobian {
    pub local: CsrMatrix,
    pub coupling: CsrMatrix,
}

fn restrict_rows(j: &CsrMatrix, rows: &[usize], layout: &BlockLayout, block: usize, strict: bool) -> Result<CsrMatrix> {
    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for &r in rows {
        let (cols, vals) = j.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            let (b, local) = layout.owner(c);
            if b == block {
                col_idx.push(local);
                values.push(v);
            } else if strict {
                return Err(Error::PartitionConsistency { block, row: r, col: c });
            }
        }
        row_ptr.push(col_idx.len());
    }
    // owners are assigned in ascending global order, so local columns stay sorted
    Ok(CsrMatrix::new(
        rows.len(),
        layout.block_size(block),
        row_ptr,
        col_idx,
        values,
    ))
}

/// Splits the full Jacobian into `(J_iR, J_iρ)` for every block.
pub fn split_jacobian(j: &CsrMatrix, part: &Partition, layout: &BlockLayout) -> Result<Vec<BlockJacobian>> {
    (0..part.k()).map(|s| split_block(j, part, layout, s)).collect()
}

fn split_block(j: &CsrMatrix, part: &Partition, layout: &BlockLayout, s: usize) -> Result<BlockJacobian> {
    Ok(BlockJacobian {
        local: restrict_rows(j, part.local_rows(s), layout, s, true)?,
        coupling: restrict_rows(j, part.coupling_rows(), layout, s, false)?,
    })
}

/// Per-block quantities of one outer iteration.
#[derive(Clone, Debug)]
pub struct BlockSystem {
    layout: Arc<BlockLayout>,
    p: Vec<CsrMatrix>,
    /// For each block `i`, `(j, B_ij)` for `j ∈ N_i` in ascending `j`.
    b: Vec<Vec<(usize, CsrMatrix)>>,
    g: Vec<Vec<f64>>,
}

fn assemble_one(
    s: usize,
    blocks: &[BlockJacobian],
    part: &Partition,
    r: &[f64],
    r_coupling: &[f64],
) -> (CsrMatrix, Vec<(usize, CsrMatrix)>, Vec<f64>) {
    let bj = &blocks[s];
    let p = bj.local.gram().add(&bj.coupling.gram());
    let r_local: Vec<f64> = part.local_rows(s).iter().map(|&row| r[row]).collect();
    let mut g = bj.local.mul_transpose_vec(&r_local);
    let gc = bj.coupling.mul_transpose_vec(r_coupling);
    for (a, b) in g.iter_mut().zip(&gc) {
        *a += b;
    }
    let ct = bj.coupling.transpose();
    let b = part
        .neighbors(s)
        .iter()
        .map(|&j| (j, ct.matmul(&blocks[j].coupling)))
        .collect();
    (p, b, g)
}

/// Forms `P_i`, `B_ij` (j ∈ N_i) and `g_i` from the split Jacobian and the
/// full residual vector.
pub fn assemble_blocks(
    blocks: &[BlockJacobian],
    r: &[f64],
    part: &Partition,
    layout: Arc<BlockLayout>,
) -> Result<BlockSystem> {
    check_dims(blocks, r, part, &layout)?;
    let r_coupling: Vec<f64> = part.coupling_rows().iter().map(|&row| r[row]).collect();
    let mut bs = BlockSystem {
        layout,
        p: Vec::with_capacity(part.k()),
        b: Vec::with_capacity(part.k()),
        g: Vec::with_capacity(part.k()),
    };
    for s in 0..part.k() {
        let (p, b, g) = assemble_one(s, blocks, part, r, &r_coupling);
        bs.p.push(p);
        bs.b.push(b);
        bs.g.push(g);
    }
    Ok(bs)
}

fn check_dims(blocks: &[BlockJacobian], r: &[f64], part: &Partition, layout: &BlockLayout) -> Result<()> {
    if blocks.len() != part.k() || layout.k() != part.k() || r.len() != part.n_residuals() {
        return Err(Error::InvalidArgument(format!(
            "block assembly dimension mismatch: {} blocks, {} residuals for K = {} and m = {}",
            blocks.len(),
            r.len(),
            part.k(),
            part.n_residuals()
        )));
    }
    Ok(())
}

/// Splits the Jacobian and assembles the block system on the worker pool.
pub fn build_block_system(
    j: &CsrMatrix,
    r: &[f64],
    part: &Partition,
    layout: Arc<BlockLayout>,
    pool: &WorkerPool,
) -> Result<BlockSystem> {
    let k = part.k();
    let blocks = pool.run_phase(Phase::Assemble, k, |s| split_block(j, part, &layout, s))?;
    check_dims(&blocks, r, part, &layout)?;
    let r_coupling: Vec<f64> = part.coupling_rows().iter().map(|&row| r[row]).collect();
    let parts = pool.run_phase(Phase::Assemble, k, |s| {
        Ok(assemble_one(s, &blocks, part, r, &r_coupling))
    })?;
    let mut bs = BlockSystem {
        layout,
        p: Vec::with_capacity(k),
        b: Vec::with_capacity(k),
        g: Vec::with_capacity(k),
    };
    for (p, b, g) in parts {
        bs.p.push(p);
        bs.b.push(b);
        bs.g.push(g);
    }
    Ok(bs)
}

impl BlockSystem {
    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn p(&self, s: usize) -> &CsrMatrix {
        &self.p[s]
    }

    /// `(j, B_ij)` for the neighbours of block `i`.
    pub fn coupling(&self, i: usize) -> &[(usize, CsrMatrix)] {
        &self.b[i]
    }

    pub fn g(&self, s: usize) -> &[f64] {
        &self.g[s]
    }

    /// The full gradient `JᵀR` in global variable order.
    pub fn gradient(&self) -> Vec<f64> {
        self.layout.gather(&self.g)
    }

    pub fn grad_norm(&self) -> f64 {
        self.g
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// True when no block has a coupling neighbour (`B ≡ 0`).
    pub fn is_separable(&self) -> bool {
        self.b.iter().all(Vec::is_empty)
    }

    /// `(B y)_i = Σ_{j ∈ N_i} B_ij y_j`, summed in ascending `j`.
    pub fn apply_b_block(&self, i: usize, y: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.block_size(i)];
        for (j, bij) in &self.b[i] {
            bij.mul_vec_acc(&y[*j], &mut out);
        }
        out
    }

    pub fn apply_b(&self, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.k()).map(|i| self.apply_b_block(i, y)).collect()
    }

    /// Power-iteration estimate of `‖B‖₂` from block mat-vecs only.
    ///
    /// `B` is symmetric, so the Rayleigh-type ratios `‖Bᵏv‖ / ‖Bᵏ⁻¹v‖` are
    /// nondecreasing in `k` and bounded by `‖B‖₂`.
    pub fn estimate_b_norm(&self, iters: usize, seed: u64) -> f64 {
        assert!(iters >= 1, "power iteration needs at least one step");
        if self.is_separable() {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<Vec<f64>> = (0..self.k())
            .map(|s| {
                (0..self.layout.block_size(s))
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let mut est = 0.0;
        let nv = block_norm(&v);
        if nv == 0.0 {
            return 0.0;
        }
        scale_blocks(&mut v, 1.0 / nv);
        for _ in 0..iters {
            let mut w = self.apply_b(&v);
            let nw = block_norm(&w);
            if nw == 0.0 || !nw.is_finite() {
                return est;
            }
            est = nw;
            scale_blocks(&mut w, 1.0 / nw);
            v = w;
        }
        est
    }

    /// Dense `P` and `B` in global variable order, row-major `n × n`.
    /// Desk-scale diagnostics only.
    pub fn to_dense(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.layout.n_vars();
        let mut p = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        for i in 0..self.k() {
            let vi = self.layout.vars(i);
            scatter_dense(&mut p, n, &self.p[i], vi, vi);
            for (j, bij) in &self.b[i] {
                scatter_dense(&mut b, n, bij, vi, self.layout.vars(*j));
            }
        }
        (p, b)
    }

    /// Writes the nonzero pattern of `P` and `B` as CSV rows
    /// `kind,block_row,block_col,row,col,value` with global indices.
    pub fn write_spy_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "kind,block_row,block_col,row,col,value")?;
        for i in 0..self.k() {
            let vi = self.layout.vars(i);
            spy_rows(&mut w, "P", i, i, &self.p[i], vi, vi)?;
            for (j, bij) in &self.b[i] {
                spy_rows(&mut w, "B", i, *j, bij, vi, self.layout.vars(*j))?;
            }
        }
        Ok(())
    }
}

fn spy_rows<W: Write>(
    w: &mut W,
    kind: &str,
    bi: usize,
    bj: usize,
    m: &CsrMatrix,
    rows: &[usize],
    cols: &[usize],
) -> std::io::Result<()> {
    for r in 0..m.nrows() {
        let (cs, vs) = m.row(r);
        for (&c, &v) in cs.iter().zip(vs) {
            writeln!(w, "{kind},{bi},{bj},{},{},{v:e}", rows[r], cols[c])?;
        }
    }
    Ok(())
}

fn scatter_dense(out: &mut [f64], n: usize, m: &CsrMatrix, rows: &[usize], cols: &[usize]) {
    for r in 0..m.nrows() {
        let (cs, vs) = m.row(r);
        for (&c, &v) in cs.iter().zip(vs) {
            out[rows[r] * n + cols[c]] += v;
        }
    }
}

pub(crate) fn block_norm(v: &[Vec<f64>]) -> f64 {
    v.iter()
        .map(|s| s.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn scale_blocks(v: &mut [Vec<f64>], a: f64) {
    for s in v {
        for x in s {
            *x *= a;
        }
    }
}

/// `‖v‖₂` of a block vector, exposed for diagnostics.
pub fn norm_blocks(v: &[Vec<f64>]) -> f64 {
    block_norm(v)
}
