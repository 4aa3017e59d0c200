//! Per-step gradient accumulator keyed by parameter id.

use std::collections::HashMap;

use crate::error::{GzslError, Result};
use crate::numerics::matrix::{axpy, Matrix};

/// Ordered collection of `(parameter id, gradient)` pairs for one backward
/// pass (or one accumulated minibatch).
///
/// Each id appears at most once; accumulating into an existing id adds
/// elementwise. Entry order is first-insertion order, which is deterministic
/// because forward/backward traversal order is deterministic.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    entries: Vec<(String, Matrix)>,
    index: HashMap<String, usize>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Matrix)] {
        &self.entries
    }

    fn entry_mut(&mut self, id: &str, rows: usize, cols: usize) -> Result<&mut Matrix> {
        if let Some(&i) = self.index.get(id) {
            let m = &mut self.entries[i].1;
            if m.shape() != (rows, cols) {
                return Err(GzslError::shape(format!(
                    "gradient for {id}: {:?} vs accumulated {:?}",
                    (rows, cols),
                    m.shape()
                )));
            }
            Ok(m)
        } else {
            self.index.insert(id.to_string(), self.entries.len());
            self.entries
                .push((id.to_string(), Matrix::zeros(rows, cols)));
            Ok(&mut self.entries.last_mut().unwrap().1)
        }
    }

    /// Adds a full gradient matrix into the entry for `id`.
    pub fn accumulate(&mut self, id: &str, grad: &Matrix) -> Result<()> {
        let m = self.entry_mut(id, grad.rows(), grad.cols())?;
        m.add_assign_matrix(grad)
    }

    /// Rank-1 accumulate `u v^T` into the entry for `id` without a temporary.
    pub fn accumulate_outer(&mut self, id: &str, u: &[f64], v: &[f64]) -> Result<()> {
        let m = self.entry_mut(id, u.len(), v.len())?;
        m.add_outer(u, v)
    }

    /// Accumulates a row-vector gradient (bias-style `1 x n` parameter).
    pub fn accumulate_row(&mut self, id: &str, v: &[f64]) -> Result<()> {
        let m = self.entry_mut(id, 1, v.len())?;
        axpy(m.row_mut(0), 1.0, v);
        Ok(())
    }

    pub fn merge(&mut self, other: &GradTape) -> Result<()> {
        for (id, grad) in &other.entries {
            self.accumulate(id, grad)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, grad) in &mut self.entries {
            grad.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_merges_by_id() {
        let mut tape = GradTape::new();
        let g = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        tape.accumulate("p", &g).unwrap();
        tape.accumulate("p", &g).unwrap();
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.get("p").unwrap().row(0), &[2.0, 4.0]);
    }

    #[test]
    fn shape_conflict_is_an_error() {
        let mut tape = GradTape::new();
        tape.accumulate_row("p", &[1.0, 2.0]).unwrap();
        assert!(tape.accumulate_row("p", &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn entry_order_is_insertion_order() {
        let mut tape = GradTape::new();
        tape.accumulate_row("b", &[1.0]).unwrap();
        tape.accumulate_row("a", &[1.0]).unwrap();
        let ids: Vec<&str> = tape.entries().iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a"]);
    }
}
