//! Linear combinations of fixed sparse matrices over a shared pattern.
//!
//! Hyperparameter searches evaluate `Σ_c w_c(θ) M_c` many times with the
//! same `M_c`. Building the union pattern once and scattering values per
//! evaluation keeps the pattern (and thus any cached symbolic analysis)
//! identical across evaluations.

use crate::{CscMatrix, SparseError};

#[derive(Debug, Clone)]
pub struct SparseCombination {
    pattern: CscMatrix,
    terms: Vec<Term>,
}

#[derive(Debug, Clone)]
struct Term {
    positions: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCombination {
    /// All terms must share the same dimensions.
    pub fn new(terms: &[&CscMatrix]) -> Result<Self, SparseError> {
        let first = terms
            .first()
            .ok_or_else(|| SparseError::InvalidLayout("no terms".into()))?;
        let (nrows, ncols) = (first.nrows(), first.ncols());
        let mut union = CscMatrix::zeros(nrows, ncols);
        for t in terms {
            union = union.add(1.0, &t.scaled(0.0), 1.0)?;
        }
        let mut out = Vec::with_capacity(terms.len());
        for t in terms {
            let mut positions = Vec::with_capacity(t.nnz());
            for j in 0..ncols {
                let (ru, _) = union.col(j);
                let base = union.col_ptr()[j];
                let (rt, _) = t.col(j);
                // both sorted: merge walk
                let mut p = 0;
                for &r in rt {
                    while ru[p] < r {
                        p += 1;
                    }
                    positions.push(base + p);
                }
            }
            out.push(Term {
                positions,
                values: t.values().to_vec(),
            });
        }
        union.values_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(Self {
            pattern: union,
            terms: out,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn pattern(&self) -> &CscMatrix {
        &self.pattern
    }

    /// Σ weights[c]·term_c on the union pattern.
    pub fn evaluate(&self, weights: &[f64]) -> CscMatrix {
        let mut m = self.pattern.clone();
        self.evaluate_into(weights, &mut m);
        m
    }

    /// As [`evaluate`](Self::evaluate) but reusing an output with the union pattern.
    pub fn evaluate_into(&self, weights: &[f64], out: &mut CscMatrix) {
        assert_eq!(weights.len(), self.terms.len(), "one weight per term");
        debug_assert!(out.same_pattern(&self.pattern));
        let vals = out.values_mut();
        vals.iter_mut().for_each(|v| *v = 0.0);
        for (t, &w) in self.terms.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (&p, &v) in t.positions.iter().zip(&t.values) {
                vals[p] += w * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_direct_sum() {
        let a = CscMatrix::from_dense(3, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0]);
        let b = CscMatrix::from_dense(3, 3, &[0.0, 3.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 4.0]);
        let comb = SparseCombination::new(&[&a, &b]).unwrap();
        let m = comb.evaluate(&[2.0, -1.0]);
        let direct = a.add(2.0, &b, -1.0).unwrap();
        assert_eq!(m.to_dense(), direct.to_dense());
        // pattern is weight independent
        let z = comb.evaluate(&[0.0, 0.0]);
        assert!(z.same_pattern(&m));
        assert_eq!(z.nnz(), 7);
    }
}
