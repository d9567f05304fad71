use serde::{Deserialize, Serialize};

use super::spec::FEATURE_DIM;
use crate::error::{Error, Result};

/// Number of candidate answers and rationales per instance.
pub const N_CANDIDATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    /// Token id that refers to this object in text.
    pub tag: usize,
    #[serde(rename = "feat")]
    pub feature: Vec<f64>,
}

/// One multiple-choice item: a scene, a question, four answers and four rationales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub objects: Vec<SceneObject>,
    #[serde(rename = "q")]
    pub question: Vec<usize>,
    #[serde(rename = "a")]
    pub answers: Vec<Vec<usize>>,
    #[serde(rename = "r")]
    pub rationales: Vec<Vec<usize>>,
    #[serde(rename = "ya")]
    pub answer_label: usize,
    #[serde(rename = "yr")]
    pub rationale_label: usize,
}

impl Instance {
    pub fn gold_answer(&self) -> &[usize] {
        &self.answers[self.answer_label]
    }

    pub fn gold_rationale(&self) -> &[usize] {
        &self.rationales[self.rationale_label]
    }

    /// Index into `objects` of the object a token refers to, if it is a tag.
    pub fn object_index(&self, token: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.tag == token)
    }

    /// Structural invariants. `tag_ids` lists every id reserved for object tags.
    pub fn validate(&self, vocab_size: usize, tag_ids: &[usize]) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.answers.len() != N_CANDIDATES || self.rationales.len() != N_CANDIDATES {
            return fail(format!(
                "expected {N_CANDIDATES} answers and rationales, got {} and {}",
                self.answers.len(),
                self.rationales.len()
            ));
        }
        if self.answer_label >= N_CANDIDATES || self.rationale_label >= N_CANDIDATES {
            return fail(format!(
                "labels ({}, {}) out of range",
                self.answer_label, self.rationale_label
            ));
        }
        if self.objects.is_empty() {
            return fail("no image objects".into());
        }
        for o in &self.objects {
            if o.feature.len() != FEATURE_DIM {
                return fail(format!(
                    "object feature has {} dims, expected {FEATURE_DIM}",
                    o.feature.len()
                ));
            }
            if !o.feature.iter().all(|v| v.is_finite()) {
                return fail("non-finite object feature".into());
            }
        }
        let sequences = std::iter::once(&self.question)
            .chain(&self.answers)
            .chain(&self.rationales);
        for seq in sequences {
            if seq.is_empty() {
                return fail("empty token sequence".into());
            }
            for &t in seq {
                if t >= vocab_size {
                    return fail(format!("token {t} outside vocabulary of {vocab_size}"));
                }
                if tag_ids.contains(&t) && self.object_index(t).is_none() {
                    return fail(format!("tag {t} has no image object"));
                }
            }
        }
        Ok(())
    }
}
