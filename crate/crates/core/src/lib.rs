//! Answer/rationale coupling for multiple-choice visual reasoning.
//!
//! Three branches share one architecture: an answering branch (question to answer), a
//! reasoning branch (question plus gold answer to rationale) and a teacher branch
//! (question plus gold rationale to answer). The teacher is trained first and then
//! distils into the other two, at the logit level for answering and at the fused-feature
//! level for reasoning. Synthetic data with a controllable answer/rationale lexical
//! shortcut and a synonym paraphrase operator drive the shortcut probes.

pub mod arckd;
pub mod branchnet;
pub mod cli;
pub mod diffcore;
pub mod probe;
pub mod synthgen;
pub mod trainer;
mod error;

pub use error::{Error, Result};

/// Index of the largest value; ties go to the lowest index. `None` for empty input or NaN.
pub fn argmax(values: &[f64]) -> Option<usize> {
    if values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
