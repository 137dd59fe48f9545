//! Logic-preserving rewrites of synthetic sequences, each with an explicit
//! output-side action so renaming transformations compare distributions
//! through the matching pushforward.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::{
    parse_tokens, validate_sequence, GeneratedSequence, LanguageSpec,
    SynthLayout,
};
use crate::vocab::Vocabulary;

const MAX_RETRIES: usize = 1000;

/// One rewrite step. `EntityPermutation` carries a bijection on entity
/// ids and acts on outputs by the same bijection; the other kinds act as
/// identity on outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformKind {
    /// perm[e] = image of entity e; length = num_entities.
    EntityPermutation(Vec<usize>),
    /// sigma[i] = source statement index for output slot i.
    StatementReorder(Vec<usize>),
    DistractorInsert { premise: usize, conclusion: usize, position: usize },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::EntityPermutation(_) => "entity_permutation",
            TransformKind::StatementReorder(_) => "statement_reorder",
            TransformKind::DistractorInsert { .. } => "distractor_insert",
        }
    }
}

/// A finite composition of rewrite steps. `steps` apply left-to-right on
/// input: apply(compose(t1, t2), x) = apply(t1, apply(t2, x)).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transformation {
    steps: Vec<TransformKind>,
}

impl Transformation {
    pub fn identity() -> Self {
        Self { steps: Vec::new() }
    }

    pub fn single(kind: TransformKind) -> Self {
        Self { steps: vec![kind] }
    }

    pub fn steps(&self) -> &[TransformKind] {
        &self.steps
    }

    /// Kind tag for metric breakdowns.
    pub fn kind_name(&self) -> &'static str {
        match self.steps.len() {
            0 => "identity",
            1 => self.steps[0].name(),
            _ => "composite",
        }
    }

    /// The output-side entity action: the composed permutation of all
    /// renaming steps, or None when it is the identity.
    pub fn output_action(&self, num_entities: usize) -> Option<Vec<usize>> {
        let mut perm: Vec<usize> = (0..num_entities).collect();
        let mut nontrivial = false;
        // Input application is t1(t2(x)), so on outputs the later-applied
        // (leftmost) permutation acts last.
        for step in self.steps.iter().rev() {
            if let TransformKind::EntityPermutation(p) = step {
                perm = perm.iter().map(|&e| p[e]).collect();
                nontrivial = true;
            }
        }
        if nontrivial && perm.iter().enumerate().any(|(i, &p)| i != p) {
            Some(perm)
        } else {
            None
        }
    }

    /// Output action lifted to full token ids (identity off entities).
    pub fn token_action(&self, layout: SynthLayout, vocab_len: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..vocab_len).collect();
        if let Some(action) = self.output_action(layout.num_entities) {
            for (e, &img) in action.iter().enumerate() {
                perm[e] = img;
            }
        }
        perm
    }

    /// Rewrite a token sequence (a full sequence or a context ending at
    /// "?"). Structure-dependent steps parse the tokens first.
    pub fn apply_tokens(&self, tokens: &[usize], layout: SynthLayout) -> Result<Vec<usize>> {
        let mut out = tokens.to_vec();
        for step in self.steps.iter().rev() {
            out = apply_step(step, &out, layout)?;
        }
        Ok(out)
    }

    /// Rewrite a generated sequence, updating its provenance (the answer
    /// maps through the output action).
    pub fn apply_sequence(&self, seq: &GeneratedSequence) -> Result<GeneratedSequence> {
        let layout = seq.layout;
        let tokens = self.apply_tokens(&seq.tokens, layout)?;
        let parsed = parse_tokens(&tokens, layout)?;
        let action = self.output_action(layout.num_entities);
        let map_entity = |e: usize| action.as_ref().map_or(e, |a| a[e]);
        let chain: Vec<(usize, usize)> =
            seq.chain.iter().map(|&(p, c)| (map_entity(p), map_entity(c))).collect();
        let chain_pairs: HashSet<(usize, usize)> = chain.iter().copied().collect();
        let distractors = parsed
            .statements
            .iter()
            .copied()
            .filter(|pc| !chain_pairs.contains(pc))
            .collect();
        Ok(GeneratedSequence {
            tokens,
            fact: map_entity(seq.fact),
            chain,
            answer: map_entity(seq.answer),
            distractors,
            chain_depth: seq.chain_depth,
            layout,
        })
    }
}

fn apply_step(step: &TransformKind, tokens: &[usize], layout: SynthLayout) -> Result<Vec<usize>> {
    match step {
        TransformKind::EntityPermutation(perm) => {
            if perm.len() != layout.num_entities {
                return Err(Error::InvalidTransformation(format!(
                    "permutation over {} entities, layout has {}",
                    perm.len(),
                    layout.num_entities
                )));
            }
            Ok(tokens
                .iter()
                .map(|&t| if layout.is_entity(t) { perm[t] } else { t })
                .collect())
        }
        TransformKind::StatementReorder(sigma) => {
            let parsed = parse_tokens(tokens, layout)?;
            if sigma.len() != parsed.statements.len() {
                return Err(Error::InvalidTransformation(format!(
                    "reorder over {} statements, sequence has {}",
                    sigma.len(),
                    parsed.statements.len()
                )));
            }
            let statements: Vec<(usize, usize)> =
                sigma.iter().map(|&i| parsed.statements[i]).collect();
            Ok(rebuild(tokens, &statements, layout))
        }
        TransformKind::DistractorInsert { premise, conclusion, position } => {
            if !layout.is_entity(*premise) || !layout.is_entity(*conclusion) {
                return Err(Error::InvalidTransformation(
                    "insert references a non-entity token".into(),
                ));
            }
            let parsed = parse_tokens(tokens, layout)?;
            if *position > parsed.statements.len() {
                return Err(Error::InvalidTransformation(format!(
                    "insert position {position} past {} statements",
                    parsed.statements.len()
                )));
            }
            let mut statements = parsed.statements.clone();
            statements.insert(*position, (*premise, *conclusion));
            Ok(rebuild(tokens, &statements, layout))
        }
    }
}

/// Reassemble tokens with a new statement list, preserving whatever tail
/// (fact/query/answer/eos) the original had.
fn rebuild(original: &[usize], statements: &[(usize, usize)], layout: SynthLayout) -> Vec<usize> {
    // The tail starts at the fact statement: the first "entity ;" that is
    // not an implication head.
    let mut fact_pos = 0;
    while fact_pos + 3 < original.len()
        && layout.is_entity(original[fact_pos])
        && original[fact_pos + 1] == layout.implies()
    {
        fact_pos += 4;
    }
    let mut out = Vec::with_capacity(original.len() + 4);
    for &(p, c) in statements {
        out.extend_from_slice(&[p, layout.implies(), c, layout.sep()]);
    }
    out.extend_from_slice(&original[fact_pos..]);
    out
}

/// True iff the rewritten sequence still passes the validity oracle with
/// the output-action-mapped answer.
pub fn verify_preservation(t: &Transformation, seq: &GeneratedSequence) -> bool {
    match t.apply_sequence(seq) {
        Ok(rewritten) => validate_sequence(&rewritten).is_ok(),
        Err(_) => false,
    }
}

/// Compose two transformations: apply(compose(t1, t2), x) = t1(t2(x)).
pub fn compose(t1: &Transformation, t2: &Transformation) -> Transformation {
    let mut steps = t1.steps().to_vec();
    steps.extend_from_slice(t2.steps());
    Transformation { steps }
}

/// Transformation kinds selectable by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindSelector {
    EntityPermutation,
    StatementReorder,
    DistractorInsert,
}

impl std::str::FromStr for KindSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity_permutation" => Ok(Self::EntityPermutation),
            "statement_reorder" => Ok(Self::StatementReorder),
            "distractor_insert" => Ok(Self::DistractorInsert),
            other => Err(Error::InvalidTransformation(format!("unknown kind {other:?}"))),
        }
    }
}

/// Sample `count` transformations of the requested kinds, retrying until
/// each verifies on every sequence of the target corpus. Deterministic
/// for a fixed seed.
pub fn sample_transformations(
    spec: &LanguageSpec,
    kinds: &[KindSelector],
    count: usize,
    seed: u64,
    corpus: &[GeneratedSequence],
) -> Result<Vec<Transformation>> {
    if kinds.is_empty() {
        return Err(Error::EmptyInput("transformation kinds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let t = sample_one(spec, kind, &mut rng, corpus).ok_or_else(|| {
            Error::Infeasible(format!(
                "no preservation-passing {kind:?} found after {MAX_RETRIES} retries"
            ))
        })?;
        out.push(t);
    }
    Ok(out)
}

fn sample_one(
    spec: &LanguageSpec,
    kind: KindSelector,
    rng: &mut ChaCha8Rng,
    corpus: &[GeneratedSequence],
) -> Option<Transformation> {
    for _ in 0..MAX_RETRIES {
        let t = match kind {
            KindSelector::EntityPermutation => {
                let mut perm: Vec<usize> = (0..spec.num_entities).collect();
                perm.shuffle(rng);
                Transformation::single(TransformKind::EntityPermutation(perm))
            }
            KindSelector::StatementReorder => {
                let mut sigma: Vec<usize> = (0..spec.statements_per_sequence).collect();
                sigma.shuffle(rng);
                Transformation::single(TransformKind::StatementReorder(sigma))
            }
            KindSelector::DistractorInsert => {
                let premise = rng.gen_range(0..spec.num_entities);
                let mut conclusion = rng.gen_range(0..spec.num_entities);
                while conclusion == premise {
                    conclusion = rng.gen_range(0..spec.num_entities);
                }
                let position = rng.gen_range(0..=spec.statements_per_sequence);
                Transformation::single(TransformKind::DistractorInsert {
                    premise,
                    conclusion,
                    position,
                })
            }
        };
        if corpus.iter().all(|seq| verify_preservation(&t, seq)) {
            return Some(t);
        }
    }
    None
}

/// File format: one step per line,
/// `perm E0:E1,E1:E0` | `reorder 2,0,1` | `insert E5=>E6@3`.
/// Each line is an independent (single-step) transformation.
pub fn save_transformations(
    transforms: &[Transformation],
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    for t in transforms {
        if t.steps().len() != 1 {
            return Err(Error::InvalidTransformation(
                "only single-step transformations are file-serializable".into(),
            ));
        }
        match &t.steps()[0] {
            TransformKind::EntityPermutation(perm) => {
                let pairs: Result<Vec<String>> = perm
                    .iter()
                    .enumerate()
                    .map(|(e, &img)| {
                        Ok(format!("{}:{}", vocab.surface(e)?, vocab.surface(img)?))
                    })
                    .collect();
                out.push_str(&format!("perm {}\n", pairs?.join(",")));
            }
            TransformKind::StatementReorder(sigma) => {
                let idx: Vec<String> = sigma.iter().map(|i| i.to_string()).collect();
                out.push_str(&format!("reorder {}\n", idx.join(",")));
            }
            TransformKind::DistractorInsert { premise, conclusion, position } => {
                out.push_str(&format!(
                    "insert {}=>{}@{}\n",
                    vocab.surface(*premise)?,
                    vocab.surface(*conclusion)?,
                    position
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_transformations(
    path: &Path,
    vocab: &Vocabulary,
    layout: SynthLayout,
) -> Result<Vec<Transformation>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |msg: String| Error::InvalidTransformation(msg);
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            let kind = match tag {
                "perm" => {
                    let mut perm: Vec<usize> = (0..layout.num_entities).collect();
                    for pair in rest.split(',') {
                        let (from, to) = pair
                            .split_once(':')
                            .ok_or_else(|| bad(format!("malformed pair {pair:?}")))?;
                        let from = vocab.id(from)?;
                        let to = vocab.id(to)?;
                        if !layout.is_entity(from) || !layout.is_entity(to) {
                            return Err(bad(format!("non-entity in pair {pair:?}")));
                        }
                        perm[from] = to;
                    }
                    let seen: HashSet<usize> = perm.iter().copied().collect();
                    if seen.len() != perm.len() {
                        return Err(bad(format!("not a bijection: {rest:?}")));
                    }
                    TransformKind::EntityPermutation(perm)
                }
                "reorder" => {
                    let sigma: std::result::Result<Vec<usize>, _> =
                        rest.split(',').map(str::parse).collect();
                    let sigma = sigma.map_err(|e| bad(format!("bad reorder: {e}")))?;
                    let seen: HashSet<usize> = sigma.iter().copied().collect();
                    if seen.len() != sigma.len() || sigma.iter().any(|&i| i >= sigma.len()) {
                        return Err(bad(format!("not a permutation: {rest:?}")));
                    }
                    TransformKind::StatementReorder(sigma)
                }
                "insert" => {
                    let (stmt, pos) = rest
                        .split_once('@')
                        .ok_or_else(|| bad(format!("missing '@' in {rest:?}")))?;
                    let (p, c) = stmt
                        .split_once("=>")
                        .ok_or_else(|| bad(format!("missing '=>' in {stmt:?}")))?;
                    TransformKind::DistractorInsert {
                        premise: vocab.id(p)?,
                        conclusion: vocab.id(c)?,
                        position: pos.parse().map_err(|e| bad(format!("bad position: {e}")))?,
                    }
                }
                other => return Err(bad(format!("unknown tag {other:?}"))),
            };
            Ok(Transformation::single(kind))
        })
        .collect()
}
