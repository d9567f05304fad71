//! Synthetic multiple-choice scenes with a planted reasoning structure.
//!
//! Every scene holds tagged objects whose 16-dim features are noisy images of a latent
//! concept. A question names a relation and an object; the gold answer names the
//! object's concept; the gold rationale carries the evidence word for the
//! (relation, concept) pair. Distractor rationales flip exactly one of the two factors,
//! so picking the right rationale needs both the question and the answer. With
//! probability `shortcut_strength` the gold rationale also copies filler tokens from the
//! gold answer, a lexical shortcut that needs neither.

mod generate;
mod instance;
mod io;
mod paraphrase;
mod spec;

pub use generate::{
    concept_prototypes, generate_dataset, generate_split, instance_seed, overlap,
    overlap_statistics, Split,
};
pub use instance::{Instance, SceneObject, N_CANDIDATES};
pub use io::{read_dataset, write_dataset, DatasetHeader, DatasetReader};
pub use paraphrase::{paraphrase, strip_question, SynonymMap};
pub use spec::{
    DatasetSpec, VocabLayout, DEFAULT_FILLERS, DEFAULT_SYNONYM_FRACTION, FEATURE_DIM, PAD,
};

impl DatasetSpec {
    pub fn synonym_map(&self) -> crate::Result<SynonymMap> {
        SynonymMap::from_pairs(&self.synonym_pairs)
    }
}
