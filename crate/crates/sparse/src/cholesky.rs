//! Supernodal sparse Cholesky factorization.
//!
//! [`SymbolicCholesky::analyze`] fixes the ordering, elimination tree and
//! supernode partition for one sparsity pattern; [`SymbolicCholesky::factorize`]
//! then computes `L Lᵀ = P A Pᵀ` for any matrix sharing that pattern with a
//! left-looking supernodal algorithm (dense panel kernels through
//! `matrixmultiply`).

use std::sync::Arc;

use crate::ordering::{is_permutation, Ordering};
use crate::{CscMatrix, SparseError};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Supernode {
    first: usize,
    ncols: usize,
    /// Row indices in the permuted numbering; the first `ncols` are the
    /// supernode's own columns.
    rows: Vec<usize>,
    offset: usize,
}

impl Supernode {
    fn nrows(&self) -> usize {
        self.rows.len()
    }
}

/// Ordering, elimination tree and supernode layout for one pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    supernodes: Vec<Supernode>,
    col_to_super: Vec<usize>,
    /// (source value index in A, destination offset in the panel storage)
    scatter: Vec<(usize, usize)>,
    panel_len: usize,
}

impl SymbolicCholesky {
    /// Analyze the pattern of a square matrix holding both triangles.
    pub fn analyze(a: &CscMatrix, ordering: &Ordering) -> Result<Self, SparseError> {
        let n = a.ncols();
        if a.nrows() != n {
            return Err(SparseError::DimensionMismatch {
                expected: (n, n),
                found: (a.nrows(), n),
            });
        }
        let perm0 = ordering.compute(a);
        if perm0.len() != n || !is_permutation(&perm0) {
            return Err(SparseError::InvalidLayout(
                "ordering is not a permutation".into(),
            ));
        }
        let parent0 = etree(&lower_pattern(a, &perm0).0, n);
        let post = postorder(&parent0);
        let perm: Vec<usize> = post.iter().map(|&k| perm0[k]).collect();
        let (lower, src) = lower_pattern(a, &perm);
        let parent = etree(&lower, n);

        // symbolic factorization, column by column in postorder, merging
        // columns into fundamental supernodes as we go
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            if parent[j] != NONE {
                children[parent[j]].push(j);
            }
        }
        let mut pending: Vec<Option<Vec<usize>>> = vec![None; n];
        let mut mark = vec![NONE; n];
        let mut supernodes: Vec<Supernode> = Vec::new();
        let mut col_to_super = vec![0; n];
        for j in 0..n {
            let mut s = vec![j];
            mark[j] = j;
            for &r in &lower.row_idx[lower.col_ptr[j]..lower.col_ptr[j + 1]] {
                if mark[r] != j {
                    mark[r] = j;
                    s.push(r);
                }
            }
            for &c in &children[j] {
                let cs = pending[c].as_ref().expect("child processed before parent");
                for &r in &cs[1..] {
                    if mark[r] != j {
                        mark[r] = j;
                        s.push(r);
                    }
                }
            }
            s.sort_unstable();
            let merge = j > 0
                && parent[j - 1] == j
                && children[j].len() == 1
                && pending[j - 1].as_ref().map(|p| p.len()) == Some(s.len() + 1);
            if merge {
                let sn = supernodes.last_mut().unwrap();
                sn.ncols += 1;
                col_to_super[j] = supernodes.len() - 1;
            } else {
                supernodes.push(Supernode {
                    first: j,
                    ncols: 1,
                    rows: s.clone(),
                    offset: 0,
                });
                col_to_super[j] = supernodes.len() - 1;
            }
            for &c in &children[j] {
                pending[c] = None;
            }
            if parent[j] != NONE {
                pending[j] = Some(s);
            }
        }
        let mut offset = 0;
        for sn in supernodes.iter_mut() {
            sn.offset = offset;
            offset += sn.nrows() * sn.ncols;
        }
        let mut scatter = Vec::with_capacity(src.len());
        for j in 0..n {
            let sn = &supernodes[col_to_super[j]];
            let lc = j - sn.first;
            for k in lower.col_ptr[j]..lower.col_ptr[j + 1] {
                let r = lower.row_idx[k];
                let lr = sn.rows.binary_search(&r).expect("A pattern contained in L");
                scatter.push((src[k], sn.offset + lr + lc * sn.nrows()));
            }
        }
        Ok(Self {
            n,
            perm,
            col_ptr: a.col_ptr().to_vec(),
            row_idx: a.row_idx().to_vec(),
            supernodes,
            col_to_super,
            scatter,
            panel_len: offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `perm[new] = old`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn n_supernodes(&self) -> usize {
        self.supernodes.len()
    }

    /// Nonzeros in the lower-triangular factor.
    pub fn nnz_l(&self) -> usize {
        self.supernodes
            .iter()
            .map(|s| {
                let nc = s.ncols;
                s.nrows() * nc - nc * (nc - 1) / 2
            })
            .sum()
    }

    /// Approximate floating point operation count of one factorization.
    pub fn flops(&self) -> f64 {
        let mut f = 0.0;
        for s in &self.supernodes {
            for k in 0..s.ncols {
                let c = (s.nrows() - k) as f64;
                f += c * c;
            }
        }
        f
    }

    pub fn matches_pattern(&self, a: &CscMatrix) -> bool {
        a.ncols() == self.n
            && a.col_ptr() == self.col_ptr.as_slice()
            && a.row_idx() == self.row_idx.as_slice()
    }

    /// Numeric factorization of a matrix with the analyzed pattern.
    pub fn factorize(self: &Arc<Self>, a: &CscMatrix) -> Result<CholeskyFactor, SparseError> {
        if !self.matches_pattern(a) {
            return Err(SparseError::PatternMismatch);
        }
        let mut panels = vec![0.0; self.panel_len];
        let av = a.values();
        for &(s, d) in &self.scatter {
            panels[d] += av[s];
        }
        let ns = self.supernodes.len();
        let mut head = vec![NONE; ns];
        let mut next = vec![NONE; ns];
        let mut pos = vec![0usize; ns];
        let mut relpos = vec![0usize; self.n];
        let mut work: Vec<f64> = Vec::new();
        for s in 0..ns {
            let sn = &self.supernodes[s];
            let nr = sn.nrows();
            let nc = sn.ncols;
            let f = sn.first;
            for (k, &r) in sn.rows.iter().enumerate() {
                relpos[r] = k;
            }
            let mut d = std::mem::replace(&mut head[s], NONE);
            while d != NONE {
                let nd = next[d];
                let dn = &self.supernodes[d];
                let dnr = dn.nrows();
                let p = pos[d];
                let mut q = p;
                while q < dnr && dn.rows[q] < f + nc {
                    q += 1;
                }
                let m = dnr - p;
                let w = q - p;
                let k = dn.ncols;
                // work = L_d[p.., :] · L_d[p..q, :]ᵀ  (m × w, column-major)
                work.clear();
                work.resize(m * w, 0.0);
                let (before, after) = panels.split_at_mut(sn.offset);
                let ld = &before[dn.offset..dn.offset + dnr * k];
                gemm_nt(m, w, k, &ld[p..], dnr, &ld[p..], dnr, &mut work, m);
                let target = &mut after[..nr * nc];
                for jj in 0..w {
                    let col = dn.rows[p + jj] - f;
                    let tc = &mut target[col * nr..(col + 1) * nr];
                    let wc = &work[jj * m..(jj + 1) * m];
                    for ii in jj..m {
                        tc[relpos[dn.rows[p + ii]]] -= wc[ii];
                    }
                }
                pos[d] = q;
                if q < dnr {
                    let t = self.col_to_super[dn.rows[q]];
                    next[d] = head[t];
                    head[t] = d;
                }
                d = nd;
            }
            let panel = &mut panels[sn.offset..sn.offset + nr * nc];
            if let Err(local) = dense_cholesky_panel(panel, nr, nc) {
                return Err(SparseError::NotPositiveDefinite {
                    column: self.perm[f + local],
                });
            }
            if nr > nc {
                pos[s] = nc;
                let t = self.col_to_super[sn.rows[nc]];
                next[s] = head[t];
                head[t] = s;
            }
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            panels,
        })
    }
}

struct LowerPattern {
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

/// Lower triangle of P A Pᵀ plus, per entry, the index of the source value.
fn lower_pattern(a: &CscMatrix, perm: &[usize]) -> (LowerPattern, Vec<usize>) {
    let n = a.ncols();
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut counts = vec![0usize; n + 1];
    for j in 0..n {
        for &i in a.col(j).0 {
            let (pi, pj) = (inv[i], inv[j]);
            if pi >= pj {
                counts[pj + 1] += 1;
            }
        }
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let mut next = counts.clone();
    let mut entries = vec![(0usize, 0usize); counts[n]];
    for j in 0..n {
        let base = a.col_ptr()[j];
        for (k, &i) in a.col(j).0.iter().enumerate() {
            let (pi, pj) = (inv[i], inv[j]);
            if pi >= pj {
                entries[next[pj]] = (pi, base + k);
                next[pj] += 1;
            }
        }
    }
    for j in 0..n {
        entries[counts[j]..counts[j + 1]].sort_unstable();
    }
    let row_idx = entries.iter().map(|e| e.0).collect();
    let src = entries.iter().map(|e| e.1).collect();
    (
        LowerPattern {
            col_ptr: counts,
            row_idx,
        },
        src,
    )
}

/// Elimination tree from the lower-triangular pattern.
fn etree(lower: &LowerPattern, n: usize) -> Vec<usize> {
    // row-wise access of the lower triangle = columns of the upper triangle
    let mut counts = vec![0usize; n + 1];
    for &r in &lower.row_idx {
        counts[r + 1] += 1;
    }
    for i in 0..n {
        counts[i + 1] += counts[i];
    }
    let mut next = counts.clone();
    let mut cols = vec![0; lower.row_idx.len()];
    for j in 0..n {
        for &r in &lower.row_idx[lower.col_ptr[j]..lower.col_ptr[j + 1]] {
            cols[next[r]] = j;
            next[r] += 1;
        }
    }
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &i0 in &cols[counts[k]..counts[k + 1]] {
            let mut i = i0;
            while i != NONE && i < k {
                let nxt = ancestor[i];
                ancestor[i] = k;
                if nxt == NONE {
                    parent[i] = k;
                }
                i = nxt;
            }
        }
    }
    parent
}

fn postorder(parent: &[usize]) -> Vec<usize> {
    let n = parent.len();
    let mut first_child = vec![NONE; n];
    let mut sibling = vec![NONE; n];
    for j in (0..n).rev() {
        if parent[j] != NONE {
            sibling[j] = first_child[parent[j]];
            first_child[parent[j]] = j;
        }
    }
    let mut post = Vec::with_capacity(n);
    let mut stack = Vec::new();
    for root in 0..n {
        if parent[root] != NONE {
            continue;
        }
        stack.push((root, false));
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                post.push(v);
                continue;
            }
            stack.push((v, true));
            let mut kids = Vec::new();
            let mut c = first_child[v];
            while c != NONE {
                kids.push(c);
                c = sibling[c];
            }
            for &c in kids.iter().rev() {
                stack.push((c, false));
            }
        }
    }
    post
}

/// C (m×n) = A (m×k) · B (n×k)ᵀ with column-major operands.
fn gemm_nt(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if m * n * k < 2048 {
        for kk in 0..k {
            let ak = &a[kk * lda..kk * lda + m];
            for j in 0..n {
                let bjk = b[kk * ldb + j];
                if bjk == 0.0 {
                    continue;
                }
                let cj = &mut c[j * ldc..j * ldc + m];
                for i in 0..m {
                    cj[i] += ak[i] * bjk;
                }
            }
        }
        return;
    }
    assert!(
        a.len() >= (k - 1) * lda + m
            && b.len() >= (k - 1) * ldb + n
            && c.len() >= (n - 1) * ldc + m
    );
    // SAFETY: bounds asserted above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            lda as isize,
            b.as_ptr(),
            ldb as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            1,
            ldc as isize,
        );
    }
}

const BLOCK: usize = 48;

/// In-place Cholesky of the leading `nc × nc` block of a column-major
/// `nr × nc` panel, followed by the triangular solve of the rows below.
/// Returns the local column of the first non-positive pivot on failure.
fn dense_cholesky_panel(p: &mut [f64], nr: usize, nc: usize) -> Result<(), usize> {
    let mut kb = 0;
    while kb < nc {
        let kend = (kb + BLOCK).min(nc);
        for j in kb..kend {
            let d = p[j + j * nr];
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let d = d.sqrt();
            p[j + j * nr] = d;
            let inv = 1.0 / d;
            for v in &mut p[j * nr + j + 1..(j + 1) * nr] {
                *v *= inv;
            }
            for k in j + 1..kend {
                let (left, right) = p.split_at_mut(k * nr);
                let lk = left[j * nr + k];
                if lk == 0.0 {
                    continue;
                }
                let src = &left[j * nr + k..(j + 1) * nr];
                let dst = &mut right[k..nr];
                for (x, &y) in dst.iter_mut().zip(src) {
                    *x -= y * lk;
                }
            }
        }
        if kend < nc {
            let m = nr - kend;
            let w = nc - kend;
            let k = kend - kb;
            // trailing update: P[kend.., kend..nc] -= P[kend.., kb..kend] · P[kend..nc, kb..kend]ᵀ
            // SAFETY: the source columns kb..kend and destination columns
            // kend..nc are disjoint regions of `p`.
            unsafe {
                let base = p.as_mut_ptr();
                matrixmultiply::dgemm(
                    m,
                    k,
                    w,
                    -1.0,
                    base.add(kend + kb * nr),
                    1,
                    nr as isize,
                    base.add(kend + kb * nr),
                    nr as isize,
                    1,
                    1.0,
                    base.add(kend + kend * nr),
                    1,
                    nr as isize,
                );
            }
        }
        kb = kend;
    }
    Ok(())
}

/// Numeric factor `L` with `L Lᵀ = P A Pᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    panels: Vec<f64>,
}

impl CholeskyFactor {
    /// Analyze and factorize in one call.
    pub fn new(a: &CscMatrix, ordering: &Ordering) -> Result<Self, SparseError> {
        Arc::new(SymbolicCholesky::analyze(a, ordering)?).factorize(a)
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// log |A| = 2 Σ log L_ii
    pub fn log_det(&self) -> f64 {
        let mut acc = 0.0;
        for sn in &self.symbolic.supernodes {
            let nr = sn.nrows();
            for j in 0..sn.ncols {
                acc += self.panels[sn.offset + j + j * nr].ln();
            }
        }
        2.0 * acc
    }

    /// In-place L y = y (permuted numbering).
    fn forward(&self, y: &mut [f64]) {
        for sn in &self.symbolic.supernodes {
            let nr = sn.nrows();
            let p = &self.panels[sn.offset..sn.offset + nr * sn.ncols];
            for j in 0..sn.ncols {
                let c = sn.first + j;
                let col = &p[j * nr..(j + 1) * nr];
                let v = y[c] / col[j];
                y[c] = v;
                if v == 0.0 {
                    continue;
                }
                for i in j + 1..nr {
                    y[sn.rows[i]] -= col[i] * v;
                }
            }
        }
    }

    /// In-place Lᵀ x = x (permuted numbering).
    fn backward(&self, x: &mut [f64]) {
        for sn in self.symbolic.supernodes.iter().rev() {
            let nr = sn.nrows();
            let p = &self.panels[sn.offset..sn.offset + nr * sn.ncols];
            for j in (0..sn.ncols).rev() {
                let col = &p[j * nr..(j + 1) * nr];
                let mut acc = x[sn.first + j];
                for i in j + 1..nr {
                    acc -= col[i] * x[sn.rows[i]];
                }
                x[sn.first + j] = acc / col[j];
            }
        }
    }

    fn permute(&self, b: &[f64]) -> Vec<f64> {
        self.symbolic.perm.iter().map(|&old| b[old]).collect()
    }

    fn unpermute(&self, w: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; w.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = w[new];
        }
        x
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim());
        let mut y = self.permute(b);
        self.forward(&mut y);
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// L⁻¹ P b; its squared norm is bᵀ A⁻¹ b.
    pub fn solve_l(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim());
        let mut y = self.permute(b);
        self.forward(&mut y);
        y
    }

    /// Pᵀ L⁻ᵀ z: maps a standard normal vector to a draw from N(0, A⁻¹).
    pub fn sample_transform(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim());
        let mut w = z.to_vec();
        self.backward(&mut w);
        self.unpermute(&w)
    }

    /// Column-major block version of [`sample_transform`](Self::sample_transform):
    /// `z` holds `nrhs` vectors of length `n` and is overwritten in the
    /// original numbering.
    pub fn sample_transform_block(&self, z: &mut [f64], nrhs: usize) {
        let n = self.dim();
        assert_eq!(z.len(), n * nrhs);
        // work in row-major (n × nrhs) so each unknown's RHS values are contiguous
        let mut w = vec![0.0; n * nrhs];
        for r in 0..nrhs {
            for i in 0..n {
                w[i * nrhs + r] = z[r * n + i];
            }
        }
        let mut acc = vec![0.0; nrhs];
        for sn in self.symbolic.supernodes.iter().rev() {
            let nr = sn.nrows();
            let p = &self.panels[sn.offset..sn.offset + nr * sn.ncols];
            for j in (0..sn.ncols).rev() {
                let col = &p[j * nr..(j + 1) * nr];
                let c = sn.first + j;
                acc.copy_from_slice(&w[c * nrhs..(c + 1) * nrhs]);
                for i in j + 1..nr {
                    let l = col[i];
                    let src = &w[sn.rows[i] * nrhs..(sn.rows[i] + 1) * nrhs];
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a -= l * s;
                    }
                }
                let inv = 1.0 / col[j];
                for (dst, &a) in w[c * nrhs..(c + 1) * nrhs].iter_mut().zip(&acc) {
                    *dst = a * inv;
                }
            }
        }
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            for r in 0..nrhs {
                z[r * n + old] = w[new * nrhs + r];
            }
        }
    }
}
