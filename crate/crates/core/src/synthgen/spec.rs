use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id of the neutral padding token.
pub const PAD: usize = 0;

/// Dimension of every object feature vector.
pub const FEATURE_DIM: usize = 16;

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    /// Total vocabulary, including the reserved synonym ids.
    pub vocab_size: usize,
    /// Distinct latent object concepts.
    pub n_concepts: usize,
    /// Distinct question relations.
    pub n_relations: usize,
    /// Tagged objects per scene.
    pub n_objects: usize,
    /// Probability that the gold rationale copies tokens from the gold answer.
    pub shortcut_strength: f64,
    /// Tokens copied per shortcut instance.
    pub overlap_tokens: usize,
    /// `(canonical, synonym)` pairs; synonyms never appear in generated text.
    pub synonym_pairs: Vec<(usize, usize)>,
    pub seed: u64,
    pub question_len: usize,
    pub answer_len: usize,
    pub rationale_len: usize,
    /// Standard deviation of the isotropic feature noise around each concept prototype.
    pub feature_noise: f64,
}

/// Filler ids available to the generator beyond the structural words.
pub const DEFAULT_FILLERS: usize = 40;

/// Fraction of the mappable vocabulary covered by the default synonym map.
pub const DEFAULT_SYNONYM_FRACTION: f64 = 0.3;

impl Default for DatasetSpec {
    fn default() -> Self {
        let mut spec = DatasetSpec {
            n_train: 2000,
            n_val: 500,
            vocab_size: 0,
            n_concepts: 6,
            n_relations: 3,
            n_objects: 4,
            shortcut_strength: 0.5,
            overlap_tokens: 2,
            synonym_pairs: Vec::new(),
            seed: 0,
            question_len: 4,
            answer_len: 3,
            rationale_len: 4,
            feature_noise: 0.3,
        };
        spec.vocab_size = spec.structural_size() + DEFAULT_FILLERS;
        spec.add_synonyms(DEFAULT_SYNONYM_FRACTION, 0)
            .expect("default spec is valid");
        spec
    }
}

/// Role of every token id used in generated text.
///
/// Ids are assigned in order over the non-synonym part of the vocabulary: padding,
/// object tags, relation words, answer words (one per concept), evidence words (one per
/// relation and concept), then fillers for everything that remains.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayout {
    pub tags: Vec<usize>,
    pub relations: Vec<usize>,
    pub answers: Vec<usize>,
    /// Indexed `[relation * n_concepts + concept]`.
    pub evidence: Vec<usize>,
    pub fillers: Vec<usize>,
    pub n_concepts: usize,
}

impl VocabLayout {
    pub fn evidence_word(&self, relation: usize, concept: usize) -> usize {
        self.evidence[relation * self.n_concepts + concept]
    }

    pub fn relation_of(&self, token: usize) -> Option<usize> {
        self.relations.iter().position(|&t| t == token)
    }

    pub fn tag_index(&self, token: usize) -> Option<usize> {
        self.tags.iter().position(|&t| t == token)
    }

    pub fn concept_of_answer_word(&self, token: usize) -> Option<usize> {
        self.answers.iter().position(|&t| t == token)
    }

    /// `(relation, concept)` of an evidence word.
    pub fn evidence_of(&self, token: usize) -> Option<(usize, usize)> {
        self.evidence
            .iter()
            .position(|&t| t == token)
            .map(|i| (i / self.n_concepts, i % self.n_concepts))
    }

    /// Ids that a synonym map may rewrite: everything except padding and object tags.
    pub fn mappable(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .relations
            .iter()
            .chain(&self.answers)
            .chain(&self.evidence)
            .chain(&self.fillers)
            .copied()
            .collect();
        ids.sort_unstable();
        ids
    }
}

impl DatasetSpec {
    /// Ids taken by padding, tags, relations, answer words and evidence words.
    pub fn structural_size(&self) -> usize {
        1 + self.n_objects + self.n_relations + self.n_concepts + self.n_relations * self.n_concepts
    }

    /// Smallest filler pool that lets distractors avoid the copied tokens.
    pub fn min_fillers(&self) -> usize {
        (4 * self.answer_len + 4 * self.rationale_len + self.question_len).max(8)
    }

    pub fn synonym_ids(&self) -> BTreeSet<usize> {
        self.synonym_pairs.iter().map(|&(_, s)| s).collect()
    }

    /// Reserve synonym ids at the top of the vocabulary for `fraction` of the mappable
    /// words, chosen with a generator seeded by `seed`. Replaces any existing pairs.
    pub fn add_synonyms(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(
                "synonym_fraction",
                format!("{fraction} outside [0, 1]"),
            ));
        }
        self.synonym_pairs.clear();
        let base = self.vocab_size;
        let layout = self.layout()?;
        let mut mappable = layout.mappable();
        let n = (fraction * mappable.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e7_0f_5e7_0f);
        mappable.shuffle(&mut rng);
        let mut chosen: Vec<usize> = mappable.into_iter().take(n).collect();
        chosen.sort_unstable();
        self.synonym_pairs = chosen
            .into_iter()
            .enumerate()
            .map(|(i, canonical)| (canonical, base + i))
            .collect();
        self.vocab_size = base + n;
        Ok(())
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        if self.n_objects == 0 || self.n_relations == 0 {
            return Err(Error::Spec("need at least one object and one relation".into()));
        }
        if self.n_concepts < 4 {
            return Err(Error::Spec(format!(
                "n_concepts = {} leaves fewer than four answer candidates",
                self.n_concepts
            )));
        }
        let synonyms = self.synonym_ids();
        let mut free = (1..self.vocab_size).filter(|id| !synonyms.contains(id));
        let mut take = |n: usize, what: &str| -> Result<Vec<usize>> {
            let ids: Vec<usize> = free.by_ref().take(n).collect();
            if ids.len() < n {
                return Err(Error::Spec(format!(
                    "vocab_size {} too small for {n} {what} ids",
                    self.vocab_size
                )));
            }
            Ok(ids)
        };
        let tags = take(self.n_objects, "tag")?;
        let relations = take(self.n_relations, "relation")?;
        let answers = take(self.n_concepts, "answer")?;
        let evidence = take(self.n_relations * self.n_concepts, "evidence")?;
        let fillers: Vec<usize> = free.collect();
        if fillers.len() < self.min_fillers() {
            return Err(Error::Spec(format!(
                "vocab_size {} leaves {} filler ids; {} needed for {} disjoint overlap tokens",
                self.vocab_size,
                fillers.len(),
                self.min_fillers(),
                self.overlap_tokens
            )));
        }
        Ok(VocabLayout {
            tags,
            relations,
            answers,
            evidence,
            fillers,
            n_concepts: self.n_concepts,
        })
    }

    /// Check every invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shortcut_strength) || self.shortcut_strength.is_nan() {
            return Err(Error::config(
                "shortcut_strength",
                format!("{} outside [0, 1]", self.shortcut_strength),
            ));
        }
        if self.question_len < 2 {
            return Err(Error::config(
                "question_len",
                "needs room for a relation word and an object tag",
            ));
        }
        if self.answer_len < 1 {
            return Err(Error::config("answer_len", "must be positive"));
        }
        if self.rationale_len < 2 {
            return Err(Error::config(
                "rationale_len",
                "needs room for an object tag and an evidence word",
            ));
        }
        if self.overlap_tokens > self.answer_len - 1 || self.overlap_tokens > self.rationale_len - 2 {
            return Err(Error::Spec(format!(
                "overlap_tokens = {} exceeds the filler slots of answers ({}) or rationales ({})",
                self.overlap_tokens,
                self.answer_len - 1,
                self.rationale_len - 2
            )));
        }
        if !(self.feature_noise >= 0.0) || !self.feature_noise.is_finite() {
            return Err(Error::config("feature_noise", "must be finite and non-negative"));
        }
        if self.n_train == 0 && self.n_val == 0 {
            return Err(Error::config("n_train", "both splits are empty"));
        }
        let mut canon = BTreeSet::new();
        let mut syn = BTreeSet::new();
        for &(c, s) in &self.synonym_pairs {
            if c >= self.vocab_size || s >= self.vocab_size {
                return Err(Error::config(
                    "synonym_pairs",
                    format!("pair ({c}, {s}) outside vocabulary of {}", self.vocab_size),
                ));
            }
            if !canon.insert(c) || !syn.insert(s) {
                return Err(Error::config(
                    "synonym_pairs",
                    format!("pair ({c}, {s}) repeats an id"),
                ));
            }
        }
        if !canon.is_disjoint(&syn) {
            return Err(Error::config(
                "synonym_pairs",
                "canonical and synonym ids overlap",
            ));
        }
        let layout = self.layout()?;
        let mappable: BTreeSet<usize> = layout.mappable().into_iter().collect();
        if let Some(c) = canon.iter().find(|c| !mappable.contains(c)) {
            return Err(Error::config(
                "synonym_pairs",
                format!("id {c} is padding, an object tag or unused"),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        let spec = DatasetSpec::default();
        spec.validate().unwrap();
        let layout = spec.layout().unwrap();
        assert_eq!(layout.fillers.len(), DEFAULT_FILLERS);
        let mappable = layout.mappable().len();
        assert_eq!(
            spec.synonym_pairs.len(),
            (DEFAULT_SYNONYM_FRACTION * mappable as f64).round() as usize
        );
        // synonyms live above every generated id
        let max_used = *layout.fillers.last().unwrap();
        assert!(spec.synonym_ids().iter().all(|&s| s > max_used));
    }

    #[test]
    fn shortcut_strength_out_of_range_names_field() {
        let spec = DatasetSpec {
            shortcut_strength: 1.2,
            ..DatasetSpec::default()
        };
        match spec.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "shortcut_strength"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_vocabulary_is_a_spec_error() {
        let mut spec = DatasetSpec::default();
        spec.synonym_pairs.clear();
        spec.vocab_size = spec.structural_size() + 3;
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn overlap_larger_than_slots_is_a_spec_error() {
        let spec = DatasetSpec {
            overlap_tokens: 3,
            ..DatasetSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn synonym_pairs_must_be_a_bijection() {
        let mut spec = DatasetSpec::default();
        let (c, s) = spec.synonym_pairs[0];
        spec.synonym_pairs.push((c, s + 1));
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
        let mut spec = DatasetSpec::default();
        spec.synonym_pairs.push((1, spec.vocab_size - 1));
        assert!(spec.validate().is_err(), "tags are not mappable");
    }
}
