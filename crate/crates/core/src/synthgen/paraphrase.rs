use std::collections::BTreeMap;

use super::instance::Instance;
use super::spec::PAD;
use crate::error::{Error, Result};

/// Bijective token rewrite; identity outside its domain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    forward: BTreeMap<usize, usize>,
}

impl SynonymMap {
    pub fn identity() -> Self {
        SynonymMap::default()
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for &(from, to) in pairs {
            if forward.insert(from, to).is_some() {
                return Err(Error::param(format!("token {from} mapped twice")));
            }
            if seen.insert(to, from).is_some() {
                return Err(Error::param(format!("token {to} is the image of two ids")));
            }
        }
        Ok(SynonymMap { forward })
    }

    pub fn apply(&self, token: usize) -> usize {
        self.forward.get(&token).copied().unwrap_or(token)
    }

    pub fn inverse(&self) -> SynonymMap {
        SynonymMap {
            forward: self.forward.iter().map(|(&a, &b)| (b, a)).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().all(|(a, b)| a == b)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.forward.iter().map(|(&a, &b)| (a, b))
    }

    fn map_seq(&self, seq: &[usize]) -> Vec<usize> {
        seq.iter().map(|&t| self.apply(t)).collect()
    }
}

/// Rewrite every mapped token of the question, answers and rationales.
pub fn paraphrase(x: &Instance, map: &SynonymMap) -> Instance {
    Instance {
        objects: x.objects.clone(),
        question: map.map_seq(&x.question),
        answers: x.answers.iter().map(|a| map.map_seq(a)).collect(),
        rationales: x.rationales.iter().map(|r| map.map_seq(r)).collect(),
        answer_label: x.answer_label,
        rationale_label: x.rationale_label,
    }
}

/// Replace the question by a single padding token.
pub fn strip_question(x: &Instance) -> Instance {
    Instance {
        question: vec![PAD],
        ..x.clone()
    }
}
