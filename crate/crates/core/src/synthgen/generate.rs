use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::instance::{Instance, SceneObject, N_CANDIDATES};
use super::spec::{DatasetSpec, VocabLayout, FEATURE_DIM, PAD};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00,
            Split::Val => 0x7661_6c00,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one instance, a pure function of the corpus seed, split and index.
pub fn instance_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ split.stream()) ^ index as u64)
}

/// One latent concept prototype per row; object features scatter around these.
pub fn concept_prototypes(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x70_726f_746f));
    (0..spec.n_concepts)
        .map(|_| {
            (0..FEATURE_DIM)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Number of distinct non-padding tokens shared by two sequences.
pub fn overlap(a: &[usize], b: &[usize]) -> usize {
    let mut shared: Vec<usize> = a
        .iter()
        .copied()
        .filter(|t| *t != PAD && b.contains(t))
        .collect();
    shared.sort_unstable();
    shared.dedup();
    shared.len()
}

struct Generator<'a> {
    spec: &'a DatasetSpec,
    layout: VocabLayout,
    prototypes: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn instance(&self, rng: &mut ChaCha8Rng) -> Instance {
        let spec = self.spec;
        let layout = &self.layout;

        let concepts: Vec<usize> = (0..spec.n_objects)
            .map(|_| rng.gen_range(0..spec.n_concepts))
            .collect();
        let objects = concepts
            .iter()
            .zip(&layout.tags)
            .map(|(&c, &tag)| SceneObject {
                tag,
                feature: self.prototypes[c]
                    .iter()
                    .map(|p| p + spec.feature_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect();

        let relation = rng.gen_range(0..spec.n_relations);
        let target = rng.gen_range(0..spec.n_objects);
        let concept = concepts[target];
        let tag = layout.tags[target];

        let mut question = vec![layout.relations[relation], tag];
        question.extend(layout.fillers.choose_multiple(rng, spec.question_len - 2));

        // answers: the gold concept first, then three other concepts
        let mut answer_concepts = vec![concept];
        answer_concepts.extend(
            (0..spec.n_concepts)
                .filter(|&c| c != concept)
                .choose_multiple(rng, N_CANDIDATES - 1),
        );
        let slots = spec.answer_len - 1;
        let answer_fillers: Vec<usize> = layout
            .fillers
            .choose_multiple(rng, N_CANDIDATES * slots)
            .copied()
            .collect();
        let answers: Vec<Vec<usize>> = answer_concepts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut a = vec![layout.answers[c]];
                a.extend_from_slice(&answer_fillers[i * slots..(i + 1) * slots]);
                a
            })
            .collect();

        // rationales: gold, then near misses with one latent factor flipped
        let mut variants = vec![(relation, concept)];
        let mut other_relations: Vec<usize> =
            (0..spec.n_relations).filter(|&r| r != relation).collect();
        other_relations.shuffle(rng);
        variants.extend(
            other_relations
                .into_iter()
                .take(2)
                .map(|r| (r, concept)),
        );
        let mut other_concepts: Vec<usize> =
            (0..spec.n_concepts).filter(|&c| c != concept).collect();
        other_concepts.shuffle(rng);
        let missing = N_CANDIDATES - variants.len();
        variants.extend(other_concepts.into_iter().take(missing).map(|c| (relation, c)));

        let shortcut = rng.gen::<f64>() < spec.shortcut_strength;
        let injected: Vec<usize> = if shortcut {
            answers[0][1..]
                .choose_multiple(rng, spec.overlap_tokens)
                .copied()
                .collect()
        } else {
            Vec::new()
        };
        let pool: Vec<usize> = layout
            .fillers
            .iter()
            .copied()
            .filter(|t| !injected.contains(t))
            .collect();
        let rationale_slots = spec.rationale_len - 2;
        let rationales: Vec<Vec<usize>> = variants
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let mut seq = vec![tag, layout.evidence_word(r, c)];
                let mut fill: Vec<usize> = if i == 0 { injected.clone() } else { Vec::new() };
                fill.extend(pool.choose_multiple(rng, rationale_slots - fill.len()));
                fill.shuffle(rng);
                seq.extend(fill);
                seq
            })
            .collect();

        let (answers, answer_label) = shuffle_candidates(answers, rng);
        let (rationales, rationale_label) = shuffle_candidates(rationales, rng);
        Instance {
            objects,
            question,
            answers,
            rationales,
            answer_label,
            rationale_label,
        }
    }
}

/// Uniformly permute candidates whose gold entry is at index 0; returns the new gold index.
fn shuffle_candidates(
    candidates: Vec<Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, usize) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    let gold = order.iter().position(|&o| o == 0).expect("permutation");
    let shuffled = order.iter().map(|&o| candidates[o].clone()).collect();
    (shuffled, gold)
}

/// Generate one split. Each instance draws from its own seeded stream.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Instance>> {
    spec.validate()?;
    let generator = Generator {
        spec,
        layout: spec.layout()?,
        prototypes: concept_prototypes(spec),
    };
    let n = match split {
        Split::Train => spec.n_train,
        Split::Val => spec.n_val,
    };
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(spec.seed, split, i));
            generator.instance(&mut rng)
        })
        .collect())
}

/// Generate `(train, val)`; a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<Instance>, Vec<Instance>)> {
    Ok((
        generate_split(spec, Split::Train)?,
        generate_split(spec, Split::Val)?,
    ))
}

/// Mean gold-answer overlap with the gold rationale and with the distractor rationales.
pub fn overlap_statistics(instances: &[Instance]) -> (f64, f64) {
    if instances.is_empty() {
        return (0.0, 0.0);
    }
    let mut gold = 0usize;
    let mut distractor = 0usize;
    for x in instances {
        for (i, r) in x.rationales.iter().enumerate() {
            let o = overlap(x.gold_answer(), r);
            if i == x.rationale_label {
                gold += o;
            } else {
                distractor += o;
            }
        }
    }
    let n = instances.len() as f64;
    (
        gold as f64 / n,
        distractor as f64 / (n * (N_CANDIDATES - 1) as f64),
    )
}
