//! The branch network shared by the answering, reasoning and teacher processes.
//!
//! For each candidate response the network
//! 1. embeds query and response tokens, adding the projected object feature at every
//!    object tag (visual grounding);
//! 2. scores every (response token, query token) pair with a bilinear form and
//!    normalises over the query tokens, so each response token spreads one unit of
//!    attention over the query;
//! 3. averages the attended query vectors over the response tokens and passes them,
//!    with the mean visual context, through two tanh layers into the fused feature `h`;
//! 4. maps `h` to a scalar logit.
//!
//! Candidates never interact, so permuting them permutes the outputs exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{concat, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::synthgen::{Instance, SceneObject, FEATURE_DIM, N_CANDIDATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// Question to answer.
    Answering,
    /// Question plus gold answer to rationale.
    Reasoning,
    /// Question plus gold rationale to answer.
    Teacher,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [
        BranchKind::Answering,
        BranchKind::Reasoning,
        BranchKind::Teacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Answering => "answering",
            BranchKind::Reasoning => "reasoning",
            BranchKind::Teacher => "teacher",
        }
    }

    fn seed_stream(self) -> u64 {
        match self {
            BranchKind::Answering => 0xA,
            BranchKind::Reasoning => 0xB,
            BranchKind::Teacher => 0xC,
        }
    }
}

impl std::str::FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BranchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown branch kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token embedding width `d`.
    pub embed_dim: usize,
    /// Fused feature width `d_h`.
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            hidden_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..ModelConfig::default()
        }
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn manifest(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        vec![
            ("embedding", vec![v, d]),
            ("visual.weight", vec![FEATURE_DIM, d]),
            ("visual.bias", vec![d]),
            ("bilinear", vec![d, d]),
            ("fusion1.weight", vec![2 * d, h]),
            ("fusion1.bias", vec![h]),
            ("fusion2.weight", vec![h, h]),
            ("fusion2.bias", vec![h]),
            ("classifier", vec![h]),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::param(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

const EMBEDDING: usize = 0;
const VISUAL_W: usize = 1;
const VISUAL_B: usize = 2;
const BILINEAR: usize = 3;
const FUSION1_W: usize = 4;
const FUSION1_B: usize = 5;
const FUSION2_W: usize = 6;
const FUSION2_B: usize = 7;
const CLASSIFIER: usize = 8;

/// Query and candidate responses for one branch on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryComposition {
    pub kind: BranchKind,
    pub query: Vec<usize>,
    /// Leading query tokens that come from the question.
    pub question_len: usize,
    /// Trailing query tokens appended after the question (gold answer or rationale).
    pub appended_len: usize,
    pub responses: Vec<Vec<usize>>,
    pub objects: Vec<SceneObject>,
}

/// Answering: question vs answers. Reasoning: question + gold answer vs rationales.
/// Teacher: question + gold rationale vs answers.
pub fn compose_query(kind: BranchKind, x: &Instance) -> QueryComposition {
    let (appended, responses): (&[usize], &Vec<Vec<usize>>) = match kind {
        BranchKind::Answering => (&[], &x.answers),
        BranchKind::Reasoning => (x.gold_answer(), &x.rationales),
        BranchKind::Teacher => (x.gold_rationale(), &x.answers),
    };
    let mut query = x.question.clone();
    query.extend_from_slice(appended);
    QueryComposition {
        kind,
        query,
        question_len: x.question.len(),
        appended_len: appended.len(),
        responses: responses.clone(),
        objects: x.objects.clone(),
    }
}

/// Plain-value outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Per candidate, `query_len x response_len`; every column sums to one.
    pub attention_maps: Vec<Tensor>,
    /// Per candidate fused feature of width `d_h`.
    pub features: Vec<Vec<f64>>,
}

/// Differentiable outputs of one forward pass.
pub struct ForwardVars<'t> {
    /// `[4]`
    pub logits: Var<'t>,
    /// Per candidate, `response_len x query_len`, each row a distribution over the query.
    pub attention: Vec<Var<'t>>,
    /// `[4, d_h]`
    pub features: Var<'t>,
}

impl ForwardVars<'_> {
    pub fn to_output(&self) -> Result<ForwardOutput> {
        let logits = self.logits.value().data().to_vec();
        let attention_maps = self
            .attention
            .iter()
            .map(|a| a.value().transpose())
            .collect::<Result<Vec<_>>>()?;
        let h = self.features.value();
        let features = (0..h.rows()).map(|r| h.row(r).to_vec()).collect();
        Ok(ForwardOutput {
            logits,
            attention_maps,
            features,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchModel {
    pub kind: BranchKind,
    pub config: ModelConfig,
    params: Vec<Tensor>,
}

impl BranchModel {
    /// Uniform initialisation in `[-1/sqrt(d), 1/sqrt(d)]` from a stream derived from
    /// `seed` and the branch kind.
    pub fn new(kind: BranchKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(kind.seed_stream()));
        let params = config
            .manifest()
            .into_iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BranchModel {
            kind,
            config,
            params,
        })
    }

    pub fn zeros(kind: BranchKind, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .manifest()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Ok(BranchModel {
            kind,
            config,
            params,
        })
    }

    pub fn from_params(kind: BranchKind, config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != params.len() {
            return Err(Error::Compat(format!(
                "expected {} parameter tensors, got {}",
                manifest.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in manifest.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Compat(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(BranchModel {
            kind,
            config,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.config.manifest()
    }

    /// Order-sensitive digest of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Place the parameters on `tape`, as gradient-collecting leaves if `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBranch<'t> {
        BoundBranch {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), trainable))
                .collect(),
            tape,
            config: self.config.clone(),
        }
    }

    /// Forward pass on a private tape without gradients.
    pub fn forward(&self, comp: &QueryComposition) -> Result<ForwardOutput> {
        let tape = Tape::new();
        self.bind(&tape, false).forward(comp)?.to_output()
    }

    pub fn predict_instance(&self, x: &Instance) -> Result<usize> {
        predict(&self.forward(&compose_query(self.kind, x))?)
    }
}

/// Parameters of one branch placed on a tape.
pub struct BoundBranch<'t> {
    vars: Vec<Var<'t>>,
    tape: &'t Tape,
    config: ModelConfig,
}

impl<'t> BoundBranch<'t> {
    /// Wrap variables already on `tape`; they must follow `config.manifest()`.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>, config: ModelConfig) -> Result<Self> {
        let manifest = config.manifest();
        if vars.len() != manifest.len() {
            return Err(Error::Compat(format!(
                "expected {} parameter tensors, got {}",
                manifest.len(),
                vars.len()
            )));
        }
        for ((name, shape), v) in manifest.iter().zip(&vars) {
            if v.shape() != *shape {
                return Err(Error::Compat(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    v.shape()
                )));
            }
        }
        Ok(BoundBranch { vars, tape, config })
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients of every parameter, in manifest order.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(Var::grad).collect()
    }

    fn grounded_embedding(
        &self,
        tokens: &[usize],
        objects: &[SceneObject],
        projected: Var<'t>,
    ) -> Result<Var<'t>> {
        let embedded = self.vars[EMBEDDING].embedding(tokens)?;
        let n_obj = objects.len();
        let mut grounding = vec![0.0; tokens.len() * n_obj];
        let mut any = false;
        for (i, t) in tokens.iter().enumerate() {
            if let Some(j) = objects.iter().position(|o| o.tag == *t) {
                grounding[i * n_obj + j] = 1.0;
                any = true;
            }
        }
        if !any {
            return Ok(embedded);
        }
        let g = self
            .tape
            .constant(Tensor::matrix(tokens.len(), n_obj, grounding)?);
        embedded.add(g.matmul(projected)?)
    }

    pub fn forward(&self, comp: &QueryComposition) -> Result<ForwardVars<'t>> {
        if comp.responses.len() != N_CANDIDATES {
            return Err(Error::shape(format!(
                "expected {N_CANDIDATES} responses, got {}",
                comp.responses.len()
            )));
        }
        if comp.objects.is_empty() {
            return Err(Error::shape("composition has no image objects"));
        }
        let v = &self.vars;
        let n_obj = comp.objects.len();
        let mut feats = Vec::with_capacity(n_obj * FEATURE_DIM);
        for o in &comp.objects {
            if o.feature.len() != FEATURE_DIM {
                return Err(Error::shape(format!(
                    "object feature of width {}, expected {FEATURE_DIM}",
                    o.feature.len()
                )));
            }
            feats.extend_from_slice(&o.feature);
        }
        let features = self.tape.constant(Tensor::matrix(n_obj, FEATURE_DIM, feats)?);
        let projected = features.matmul(v[VISUAL_W])?.add(v[VISUAL_B])?;
        let visual_context = projected.mean_rows()?;

        let query = self.grounded_embedding(&comp.query, &comp.objects, projected)?;
        // rows: B e_q for every query token
        let keys = query.matmul_t(v[BILINEAR])?;

        let mut pooled = Vec::with_capacity(N_CANDIDATES);
        let mut attention = Vec::with_capacity(N_CANDIDATES);
        for response in &comp.responses {
            let resp = self.grounded_embedding(response, &comp.objects, projected)?;
            let attn = resp.matmul_t(keys)?.softmax()?;
            // each response token's view of the query, averaged over the response
            let summary = attn.matmul(query)?.mean_rows()?;
            pooled.push(
                concat(&[summary, visual_context], 0)?.reshape(vec![1, 2 * self.config.embed_dim])?,
            );
            attention.push(attn);
        }
        let z = concat(&pooled, 0)?;
        let hidden = z.matmul(v[FUSION1_W])?.add(v[FUSION1_B])?.tanh()?;
        let fused = hidden.matmul(v[FUSION2_W])?.add(v[FUSION2_B])?.tanh()?;
        let logits = fused
            .matmul(v[CLASSIFIER].reshape(vec![self.config.hidden_dim, 1])?)?
            .reshape(vec![N_CANDIDATES])?;
        Ok(ForwardVars {
            logits,
            attention,
            features: fused,
        })
    }
}

/// Index of the largest logit, ties to the lowest index.
pub fn predict(out: &ForwardOutput) -> Result<usize> {
    predict_logits(&out.logits)
}

pub fn predict_logits(logits: &[f64]) -> Result<usize> {
    crate::argmax(logits).ok_or_else(|| Error::Numeric(format!("cannot rank logits {logits:?}")))
}
