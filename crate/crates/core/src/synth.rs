//! Synthetic corpora with fully controlled logical structure: implication
//! statements, a stated fact, and a query whose answer is forced by
//! forward chaining.
//!
//! Sequence shape: `Ea => Eb ;` repeated, then `Ea ;`, then `? Ey <eos>`.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const IMPLIES_SURFACE: &str = "=>";
pub const SEP_SURFACE: &str = ";";
pub const QUERY_SURFACE: &str = "?";

const MAX_RETRIES: usize = 1000;

/// Parameters of the synthetic language. Entities are the single tokens
/// `E0`..`E{k-1}`; the answer to a query is always one token.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LanguageSpec {
    pub num_entities: usize,
    pub statements_per_sequence: usize,
    pub chain_depth: usize,
    pub num_distractors: usize,
    pub seed: u64,
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_entities < 2 {
            return Err(Error::InvalidSpec("need at least 2 entities".into()));
        }
        if self.chain_depth < 1 {
            return Err(Error::InvalidSpec("chain depth must be >= 1".into()));
        }
        if self.statements_per_sequence < 1 {
            return Err(Error::InvalidSpec("need at least 1 statement".into()));
        }
        if self.num_entities < self.chain_depth + 1 {
            return Err(Error::InvalidSpec(format!(
                "a depth-{} chain needs {} distinct entities, have {}",
                self.chain_depth,
                self.chain_depth + 1,
                self.num_entities
            )));
        }
        if self.statements_per_sequence != self.chain_depth + self.num_distractors {
            return Err(Error::InvalidSpec(format!(
                "statements_per_sequence ({}) must equal chain_depth ({}) + num_distractors ({})",
                self.statements_per_sequence, self.chain_depth, self.num_distractors
            )));
        }
        Ok(())
    }

    /// The vocabulary induced by the spec: entities first, then the
    /// structural tokens, then EOS/PAD.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut surfaces: Vec<String> =
            (0..self.num_entities).map(|i| format!("E{i}")).collect();
        surfaces.push(IMPLIES_SURFACE.to_string());
        surfaces.push(SEP_SURFACE.to_string());
        surfaces.push(QUERY_SURFACE.to_string());
        Vocabulary::new(&surfaces)
    }
}

/// Token-id layout of a synthetic vocabulary: entity ids are 0..k, the
/// structural tokens follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthLayout {
    pub num_entities: usize,
}

impl SynthLayout {
    pub fn implies(&self) -> usize {
        self.num_entities
    }

    pub fn sep(&self) -> usize {
        self.num_entities + 1
    }

    pub fn query(&self) -> usize {
        self.num_entities + 2
    }

    pub fn eos(&self) -> usize {
        self.num_entities + 3
    }

    pub fn is_entity(&self, id: usize) -> bool {
        id < self.num_entities
    }

    /// Recover the layout from a vocabulary built by `LanguageSpec`:
    /// entities are the leading `E<digits>` surfaces.
    pub fn from_vocabulary(vocab: &Vocabulary) -> Result<Self> {
        let mut k = 0;
        while k < vocab.len() {
            let s = vocab.surface(k)?;
            let is_entity = s.strip_prefix('E')
                .map_or(false, |rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()));
            if !is_entity {
                break;
            }
            k += 1;
        }
        if k == 0 {
            return Err(Error::ParseError("vocabulary has no entity tokens".into()));
        }
        let layout = Self { num_entities: k };
        if vocab.id(IMPLIES_SURFACE)? != layout.implies()
            || vocab.id(SEP_SURFACE)? != layout.sep()
            || vocab.id(QUERY_SURFACE)? != layout.query()
        {
            return Err(Error::ParseError("vocabulary does not match synth layout".into()));
        }
        Ok(layout)
    }
}

/// A generated sequence with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSequence {
    pub tokens: Vec<usize>,
    pub fact: usize,
    /// Implication chain from fact to answer, in derivation order.
    pub chain: Vec<(usize, usize)>,
    pub answer: usize,
    pub distractors: Vec<(usize, usize)>,
    pub chain_depth: usize,
    pub layout: SynthLayout,
}

/// A (context, required continuation) pair for one inference rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceInstance {
    /// All tokens up to and including "?".
    pub context: Vec<usize>,
    pub required_token: usize,
    pub rule_id: String,
}

/// Parse of a token sequence under the synthetic grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSequence {
    pub statements: Vec<(usize, usize)>,
    pub fact: usize,
    /// Present when the sequence extends past "?".
    pub answer: Option<usize>,
    pub has_eos: bool,
}

/// Parse `stmt* fact ; ? [answer [<eos>]]`. Contexts (ending at "?") and
/// full sequences both parse.
pub fn parse_tokens(tokens: &[usize], layout: SynthLayout) -> Result<ParsedSequence> {
    let mut statements = Vec::new();
    let mut pos = 0;
    let err = |msg: &str, at: usize| Error::ParseError(format!("{msg} at position {at}"));

    // Implication statements: entity => entity ;
    while pos + 3 < tokens.len()
        && layout.is_entity(tokens[pos])
        && tokens[pos + 1] == layout.implies()
    {
        if !layout.is_entity(tokens[pos + 2]) {
            return Err(err("expected entity after '=>'", pos + 2));
        }
        if tokens[pos + 3] != layout.sep() {
            return Err(err("expected ';' after implication", pos + 3));
        }
        statements.push((tokens[pos], tokens[pos + 2]));
        pos += 4;
    }

    // Fact statement: entity ;
    if pos >= tokens.len() || !layout.is_entity(tokens[pos]) {
        return Err(err("expected fact entity", pos));
    }
    let fact = tokens[pos];
    if pos + 1 >= tokens.len() || tokens[pos + 1] != layout.sep() {
        return Err(err("expected ';' after fact", pos + 1));
    }
    pos += 2;

    // Query: ? [answer [<eos>]]
    if pos >= tokens.len() || tokens[pos] != layout.query() {
        return Err(err("expected '?'", pos));
    }
    pos += 1;
    let mut answer = None;
    let mut has_eos = false;
    if pos < tokens.len() {
        if !layout.is_entity(tokens[pos]) {
            return Err(err("expected answer entity", pos));
        }
        answer = Some(tokens[pos]);
        pos += 1;
        if pos < tokens.len() {
            if tokens[pos] != layout.eos() {
                return Err(err("expected <eos>", pos));
            }
            has_eos = true;
            pos += 1;
        }
    }
    if pos != tokens.len() {
        return Err(err("trailing tokens", pos));
    }
    Ok(ParsedSequence { statements, fact, answer, has_eos })
}

/// Forward-chaining closure of {fact} under the implication set.
pub fn solve_entailment(statements: &[(usize, usize)], fact: usize) -> HashSet<usize> {
    closure_depths(statements, fact).into_keys().collect()
}

/// Minimal derivation depth of each reachable entity (fact at depth 0).
pub fn closure_depths(statements: &[(usize, usize)], fact: usize) -> HashMap<usize, usize> {
    let mut depths = HashMap::new();
    depths.insert(fact, 0);
    let mut frontier = vec![fact];
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        let mut next = Vec::new();
        for &(p, c) in statements {
            if frontier.contains(&p) && !depths.contains_key(&c) {
                depths.insert(c, depth);
                next.push(c);
            }
        }
        frontier = next;
    }
    depths
}

fn assemble_tokens(
    statements: &[(usize, usize)],
    fact: usize,
    answer: usize,
    layout: SynthLayout,
) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(statements.len() * 4 + 5);
    for &(p, c) in statements {
        tokens.extend_from_slice(&[p, layout.implies(), c, layout.sep()]);
    }
    tokens.extend_from_slice(&[fact, layout.sep(), layout.query(), answer, layout.eos()]);
    tokens
}

/// Validity check against the forward-chaining oracle. True iff the
/// tokens parse, the answer sits at exactly `chain_depth` derivation
/// steps from the fact, and each depth level up to `chain_depth` holds
/// exactly one entity (so no second derivation competes with the answer).
pub fn validate_sequence(seq: &GeneratedSequence) -> std::result::Result<(), String> {
    let parsed = match parse_tokens(&seq.tokens, seq.layout) {
        Ok(p) => p,
        Err(e) => return Err(format!("parse failure: {e}")),
    };
    if !parsed.has_eos || parsed.answer.is_none() {
        return Err("sequence is not terminated with answer + <eos>".into());
    }
    if parsed.fact != seq.fact {
        return Err(format!("fact mismatch: tokens say E{}, provenance E{}", parsed.fact, seq.fact));
    }
    let answer = parsed.answer.unwrap();
    if answer != seq.answer {
        return Err(format!(
            "answer mismatch: tokens say E{answer}, provenance E{}",
            seq.answer
        ));
    }
    check_derivation(&parsed.statements, parsed.fact, answer, seq.chain_depth)
}

/// Oracle condition shared by generation and validation.
pub fn check_derivation(
    statements: &[(usize, usize)],
    fact: usize,
    answer: usize,
    chain_depth: usize,
) -> std::result::Result<(), String> {
    let depths = closure_depths(statements, fact);
    match depths.get(&answer) {
        None => return Err(format!("answer E{answer} is not derivable from fact E{fact}")),
        Some(&d) if d != chain_depth => {
            return Err(format!(
                "answer E{answer} derivable at depth {d}, expected {chain_depth}"
            ))
        }
        Some(_) => {}
    }
    for level in 0..=chain_depth {
        let at_level: Vec<usize> =
            depths.iter().filter(|&(_, &d)| d == level).map(|(&e, _)| e).collect();
        if at_level.len() != 1 {
            return Err(format!(
                "depth level {level} holds {} entities, expected exactly one",
                at_level.len()
            ));
        }
    }
    Ok(())
}

/// Generate `count` valid sequences plus one inference instance each.
/// Deterministic for a fixed spec (seed included).
pub fn generate_corpus(
    spec: &LanguageSpec,
    count: usize,
) -> Result<(Vec<GeneratedSequence>, Vec<InferenceInstance>)> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidSpec("count must be positive".into()));
    }
    let layout = SynthLayout { num_entities: spec.num_entities };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rule_id = format!("modus_ponens_depth{}", spec.chain_depth);
    let mut sequences = Vec::with_capacity(count);
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let seq = generate_sequence(spec, layout, &mut rng)
            .map_err(|e| Error::Infeasible(format!("sequence {i}: {e}")))?;
        let query_pos = seq.tokens.iter().position(|&t| t == layout.query()).unwrap();
        instances.push(InferenceInstance {
            context: seq.tokens[..=query_pos].to_vec(),
            required_token: seq.answer,
            rule_id: rule_id.clone(),
        });
        sequences.push(seq);
    }
    Ok((sequences, instances))
}

fn generate_sequence(
    spec: &LanguageSpec,
    layout: SynthLayout,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<GeneratedSequence, String> {
    for _ in 0..MAX_RETRIES {
        // Chain entities: chain_depth + 1 distinct draws.
        let mut pool: Vec<usize> = (0..spec.num_entities).collect();
        pool.shuffle(rng);
        let chain_entities = &pool[..spec.chain_depth + 1];
        let fact = chain_entities[0];
        let answer = chain_entities[spec.chain_depth];
        let chain: Vec<(usize, usize)> =
            chain_entities.windows(2).map(|w| (w[0], w[1])).collect();

        // Distractor implications by rejection sampling.
        let mut distractors = Vec::with_capacity(spec.num_distractors);
        for _ in 0..spec.num_distractors {
            let p = rng.gen_range(0..spec.num_entities);
            let mut c = rng.gen_range(0..spec.num_entities);
            while c == p {
                c = rng.gen_range(0..spec.num_entities);
            }
            distractors.push((p, c));
        }

        // Canonical statement order: the chain first, then distractors.
        // Generation is positionally regular; order robustness is probed
        // separately through statement_reorder transformations.
        let mut statements: Vec<(usize, usize)> = chain.clone();
        statements.extend(&distractors);

        if check_derivation(&statements, fact, answer, spec.chain_depth).is_ok() {
            let tokens = assemble_tokens(&statements, fact, answer, layout);
            return Ok(GeneratedSequence {
                tokens,
                fact,
                chain,
                answer,
                distractors,
                chain_depth: spec.chain_depth,
                layout,
            });
        }
    }
    Err(format!("no valid distractor placement found after {MAX_RETRIES} retries"))
}

/// Corpus file: one sequence per line, space-separated surfaces.
pub fn save_corpus(
    sequences: &[GeneratedSequence],
    vocab: &Vocabulary,
    path: &std::path::Path,
) -> Result<()> {
    let mut out = String::new();
    for seq in sequences {
        out.push_str(&vocab.decode(&seq.tokens)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load raw token sequences (no provenance) from a corpus file.
pub fn load_corpus_tokens(path: &std::path::Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.is_empty()).map(|l| vocab.encode(l)).collect()
}

/// Reconstruct provenance for corpus-file sequences via the oracle.
pub fn sequences_from_tokens(
    token_seqs: &[Vec<usize>],
    layout: SynthLayout,
    chain_depth: usize,
) -> Result<Vec<GeneratedSequence>> {
    token_seqs
        .iter()
        .map(|tokens| {
            let parsed = parse_tokens(tokens, layout)?;
            let answer = parsed
                .answer
                .ok_or_else(|| Error::ParseError("sequence has no answer".into()))?;
            let depths = closure_depths(&parsed.statements, parsed.fact);
            let chain_set: HashSet<usize> = depths
                .iter()
                .filter(|&(_, &d)| d <= chain_depth)
                .map(|(&e, _)| e)
                .collect();
            let chain = parsed
                .statements
                .iter()
                .copied()
                .filter(|(p, c)| chain_set.contains(p) && chain_set.contains(c))
                .collect();
            let distractors = parsed
                .statements
                .iter()
                .copied()
                .filter(|(p, c)| !(chain_set.contains(p) && chain_set.contains(c)))
                .collect();
            Ok(GeneratedSequence {
                tokens: tokens.clone(),
                fact: parsed.fact,
                chain,
                answer,
                distractors,
                chain_depth,
                layout,
            })
        })
        .collect()
}

/// Instance file: "context TAB required_token TAB rule_id" per line.
pub fn save_instances(
    instances: &[InferenceInstance],
    vocab: &Vocabulary,
    path: &std::path::Path,
) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&vocab.decode(&inst.context)?);
        out.push('\t');
        out.push_str(vocab.surface(inst.required_token)?);
        out.push('\t');
        out.push_str(&inst.rule_id);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_instances(
    path: &std::path::Path,
    vocab: &Vocabulary,
) -> Result<Vec<InferenceInstance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::ParseError(format!(
                    "instance line needs 3 tab-separated fields, got {}",
                    parts.len()
                )));
            }
            Ok(InferenceInstance {
                context: vocab.encode(parts[0])?,
                required_token: vocab.id(parts[1])?,
                rule_id: parts[2].to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> LanguageSpec {
        LanguageSpec {
            num_entities: 2,
            statements_per_sequence: 1,
            chain_depth: 1,
            num_distractors: 0,
            seed: 11,
        }
    }

    #[test]
    fn minimal_spec_only_shape() {
        let spec = small_spec();
        let vocab = spec.vocabulary().unwrap();
        let (seqs, insts) = generate_corpus(&spec, 20).unwrap();
        for (seq, inst) in seqs.iter().zip(&insts) {
            // "Ea => Eb ; Ea ; ? Eb <eos>" with a != b.
            let text = vocab.decode(&seq.tokens).unwrap();
            let a = vocab.surface(seq.fact).unwrap();
            let b = vocab.surface(seq.answer).unwrap();
            assert_ne!(a, b);
            assert_eq!(text, format!("{a} => {b} ; {a} ; ? {b} <eos>"));
            assert_eq!(inst.required_token, seq.answer);
            assert_eq!(inst.rule_id, "modus_ponens_depth1");
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let spec = LanguageSpec {
            num_entities: 8,
            statements_per_sequence: 3,
            chain_depth: 1,
            num_distractors: 2,
            seed: 99,
        };
        let (a, _) = generate_corpus(&spec, 50).unwrap();
        let (b, _) = generate_corpus(&spec, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_two_answer_is_two_hops_out() {
        let spec = LanguageSpec {
            num_entities: 6,
            statements_per_sequence: 4,
            chain_depth: 2,
            num_distractors: 2,
            seed: 3,
        };
        let (seqs, _) = generate_corpus(&spec, 50).unwrap();
        for seq in &seqs {
            let parsed = parse_tokens(&seq.tokens, seq.layout).unwrap();
            let depths = closure_depths(&parsed.statements, parsed.fact);
            assert_eq!(depths.get(&seq.answer), Some(&2));
            validate_sequence(seq).unwrap();
        }
    }

    #[test]
    fn oracle_closure_cases() {
        // {A->B}, fact A -> {A, B}
        let s = solve_entailment(&[(0, 1)], 0);
        assert_eq!(s, HashSet::from([0, 1]));
        // {A->B, B->C}, fact A -> {A, B, C}
        let s = solve_entailment(&[(0, 1), (1, 2)], 0);
        assert_eq!(s, HashSet::from([0, 1, 2]));
        // {B->C}, fact A -> {A}
        let s = solve_entailment(&[(1, 2)], 0);
        assert_eq!(s, HashSet::from([0]));
    }

    #[test]
    fn corrupted_answer_fails_validation() {
        let spec = small_spec();
        let (seqs, _) = generate_corpus(&spec, 5).unwrap();
        let mut bad = seqs[0].clone();
        let n = bad.tokens.len();
        bad.tokens[n - 2] = bad.fact; // fact is never the depth-1 answer
        bad.answer = bad.fact;
        assert!(validate_sequence(&bad).is_err());
    }

    #[test]
    fn hand_built_sequence_validates() {
        let layout = SynthLayout { num_entities: 2 };
        // "E0 => E1 ; E0 ; ? E1 <eos>"
        let tokens = vec![0, layout.implies(), 1, layout.sep(), 0, layout.sep(),
                          layout.query(), 1, layout.eos()];
        let seq = GeneratedSequence {
            tokens,
            fact: 0,
            chain: vec![(0, 1)],
            answer: 1,
            distractors: vec![],
            chain_depth: 1,
            layout,
        };
        validate_sequence(&seq).unwrap();
    }

    #[test]
    fn rejection_sampling_avoids_shortcuts() {
        // All 4 entities sit on the depth-3 chain, so a forward-jump
        // distractor would shorten the derivation; the sampler must
        // reject those placements.
        let spec = LanguageSpec {
            num_entities: 4,
            statements_per_sequence: 5,
            chain_depth: 3,
            num_distractors: 2,
            seed: 21,
        };
        let (seqs, _) = generate_corpus(&spec, 100).unwrap();
        for seq in &seqs {
            validate_sequence(seq).unwrap();
            let parsed = parse_tokens(&seq.tokens, seq.layout).unwrap();
            let depths = closure_depths(&parsed.statements, parsed.fact);
            assert_eq!(depths.get(&seq.answer), Some(&3));
        }
    }

    #[test]
    fn spec_invariants_enforced() {
        let mut spec = small_spec();
        spec.num_entities = 1;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.chain_depth = 3;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.num_distractors = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn corpus_and_instance_files_roundtrip() {
        let spec = LanguageSpec {
            num_entities: 5,
            statements_per_sequence: 2,
            chain_depth: 1,
            num_distractors: 1,
            seed: 7,
        };
        let vocab = spec.vocabulary().unwrap();
        let (seqs, insts) = generate_corpus(&spec, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cpath = dir.path().join("corpus.txt");
        let ipath = dir.path().join("instances.tsv");
        save_corpus(&seqs, &vocab, &cpath).unwrap();
        save_instances(&insts, &vocab, &ipath).unwrap();
        let tokens = load_corpus_tokens(&cpath, &vocab).unwrap();
        assert_eq!(tokens.len(), seqs.len());
        for (t, s) in tokens.iter().zip(&seqs) {
            assert_eq!(t, &s.tokens);
        }
        let layout = SynthLayout::from_vocabulary(&vocab).unwrap();
        let rebuilt = sequences_from_tokens(&tokens, layout, 1).unwrap();
        for (r, s) in rebuilt.iter().zip(&seqs) {
            assert_eq!(r.fact, s.fact);
            assert_eq!(r.answer, s.answer);
            validate_sequence(r).unwrap();
        }
        let loaded = load_instances(&ipath, &vocab).unwrap();
        assert_eq!(loaded, insts);
    }

    #[test]
    fn every_generated_sequence_passes_oracle() {
        let spec = LanguageSpec {
            num_entities: 8,
            statements_per_sequence: 3,
            chain_depth: 1,
            num_distractors: 2,
            seed: 42,
        };
        let (seqs, insts) = generate_corpus(&spec, 200).unwrap();
        for (seq, inst) in seqs.iter().zip(&insts) {
            validate_sequence(seq).unwrap();
            let parsed = parse_tokens(&seq.tokens, seq.layout).unwrap();
            let derivable = solve_entailment(&parsed.statements, parsed.fact);
            assert!(derivable.contains(&inst.required_token));
        }
    }
}
