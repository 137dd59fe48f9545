//! Markov kernels: context -> distribution over the vocabulary, with
//! tabular and empirical n-gram realizations, rollout, and scoring.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{Distribution, EXACT_TOL};
use crate::error::{Error, Result};
use crate::vocab::{Context, Vocabulary};

/// Behavior on a context suffix with no stored statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMode {
    /// Unseen suffix is an error.
    Strict,
    /// Unseen suffix yields the uniform distribution over V minus PAD.
    Uniform,
}

/// A parameterized Markov kernel over a finite vocabulary. `evaluate`
/// must depend only on the last min(|x|, order) tokens of the context.
pub trait Kernel {
    fn order(&self) -> usize;
    fn vocabulary(&self) -> &Vocabulary;
    fn evaluate(&self, ctx: &Context) -> Result<Distribution>;
    /// Short tag for reports ("tabular", "ngram", "neural").
    fn kind_name(&self) -> &'static str;
}

fn uniform_no_pad(vocab: &Vocabulary) -> Distribution {
    let pad = vocab.pad();
    Distribution::uniform_over(vocab.len(), (0..vocab.len()).filter(|&i| i != pad))
        .expect("vocabulary has non-PAD tokens")
}

/// Explicit transition table from context suffixes (length <= order) to
/// distributions. Lookup is longest-suffix-first.
#[derive(Debug, Clone)]
pub struct TabularKernel {
    order: usize,
    vocab: Vocabulary,
    table: HashMap<Vec<usize>, Distribution>,
    fallback: FallbackMode,
}

impl TabularKernel {
    pub fn new(order: usize, vocab: Vocabulary, fallback: FallbackMode) -> Self {
        Self { order, vocab, table: HashMap::new(), fallback }
    }

    pub fn insert(&mut self, suffix: Vec<usize>, dist: Distribution) -> Result<()> {
        if suffix.len() > self.order {
            return Err(Error::InvalidKernelFile(format!(
                "suffix length {} exceeds order {}",
                suffix.len(),
                self.order
            )));
        }
        self.vocab.check_ids(&suffix)?;
        if dist.len() != self.vocab.len() {
            return Err(Error::VocabularyMismatch(dist.len(), self.vocab.len()));
        }
        if dist.prob(self.vocab.pad()) != 0.0 {
            return Err(Error::InvalidDistribution("PAD carries mass".into()));
        }
        self.table.insert(suffix, dist);
        Ok(())
    }

    /// Normalize a per-suffix count table into stored distributions.
    pub fn from_counts(
        order: usize,
        vocab: Vocabulary,
        fallback: FallbackMode,
        counts: &HashMap<Vec<usize>, Vec<u64>>,
    ) -> Result<Self> {
        let mut kernel = Self::new(order, vocab, fallback);
        for (suffix, row) in counts {
            let weights: Vec<f64> = row.iter().map(|&c| c as f64).collect();
            kernel.insert(suffix.clone(), Distribution::from_weights(&weights)?)?;
        }
        Ok(kernel)
    }
}

impl Kernel for TabularKernel {
    fn order(&self) -> usize {
        self.order
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn evaluate(&self, ctx: &Context) -> Result<Distribution> {
        self.vocab.check_ids(ctx.ids())?;
        let state = ctx.suffix(self.order);
        for take in (0..=state.len()).rev() {
            let key = &state[state.len() - take..];
            if let Some(d) = self.table.get(key) {
                return Ok(d.clone());
            }
        }
        match self.fallback {
            FallbackMode::Uniform => Ok(uniform_no_pad(&self.vocab)),
            FallbackMode::Strict => {
                Err(Error::UnseenContext(self.vocab.decode(state).unwrap_or_default()))
            }
        }
    }

    fn kind_name(&self) -> &'static str {
        "tabular"
    }
}

/// Empirical n-gram kernel with additive smoothing. Context suffixes are
/// exactly `order` long; shorter contexts are left-padded with PAD.
#[derive(Debug, Clone)]
pub struct NGramKernel {
    order: usize,
    alpha: f64,
    vocab: Vocabulary,
    counts: HashMap<Vec<usize>, Vec<u64>>,
    totals: HashMap<Vec<usize>, u64>,
    fallback: FallbackMode,
}

impl NGramKernel {
    pub fn from_counts(
        order: usize,
        alpha: f64,
        vocab: Vocabulary,
        counts: HashMap<Vec<usize>, Vec<u64>>,
        fallback: FallbackMode,
    ) -> Result<Self> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidKernelFile(format!("bad alpha {alpha}")));
        }
        for (suffix, row) in &counts {
            if suffix.len() != order {
                return Err(Error::InvalidKernelFile(format!(
                    "suffix length {} != order {order}",
                    suffix.len()
                )));
            }
            vocab.check_ids(suffix)?;
            if row.len() != vocab.len() {
                return Err(Error::VocabularyMismatch(row.len(), vocab.len()));
            }
            if row[vocab.pad()] != 0 {
                return Err(Error::InvalidKernelFile("PAD counted as target".into()));
            }
        }
        let totals = counts.iter().map(|(k, v)| (k.clone(), v.iter().sum())).collect();
        Ok(Self { order, alpha, vocab, counts, totals, fallback })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &HashMap<Vec<usize>, Vec<u64>> {
        &self.counts
    }

    fn padded_suffix(&self, ctx: &Context) -> Vec<usize> {
        let state = ctx.suffix(self.order);
        let mut key = vec![self.vocab.pad(); self.order - state.len()];
        key.extend_from_slice(state);
        key
    }

    /// Save in the kernel file format: a header line then one line per
    /// (suffix, token, count), surfaces space-separated. Exact round-trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut lines: Vec<String> = Vec::new();
        for (suffix, row) in &self.counts {
            let prefix = self.vocab.decode(suffix)?;
            for (tok, &c) in row.iter().enumerate() {
                if c > 0 {
                    lines.push(format!("{prefix} {} {c}", self.vocab.surface(tok)?));
                }
            }
        }
        lines.sort();
        let fb = match self.fallback {
            FallbackMode::Strict => "strict",
            FallbackMode::Uniform => "uniform",
        };
        let mut out = format!("ngram n={} alpha={} fallback={fb}\n", self.order, self.alpha);
        for l in &lines {
            out.push_str(l);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header =
            lines.next().ok_or_else(|| Error::InvalidKernelFile("empty file".into()))?;
        let mut order = None;
        let mut alpha = None;
        let mut fallback = FallbackMode::Strict;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ngram") {
            return Err(Error::InvalidKernelFile("header must start with 'ngram'".into()));
        }
        for field in fields {
            if let Some(v) = field.strip_prefix("n=") {
                order = Some(v.parse::<usize>().map_err(|e| {
                    Error::InvalidKernelFile(format!("bad n: {e}"))
                })?);
            } else if let Some(v) = field.strip_prefix("alpha=") {
                alpha = Some(v.parse::<f64>().map_err(|e| {
                    Error::InvalidKernelFile(format!("bad alpha: {e}"))
                })?);
            } else if let Some(v) = field.strip_prefix("fallback=") {
                fallback = match v {
                    "strict" => FallbackMode::Strict,
                    "uniform" => FallbackMode::Uniform,
                    other => {
                        return Err(Error::InvalidKernelFile(format!("bad fallback {other}")))
                    }
                };
            } else {
                return Err(Error::InvalidKernelFile(format!("unknown header field {field}")));
            }
        }
        let order = order.ok_or_else(|| Error::InvalidKernelFile("missing n=".into()))?;
        let alpha = alpha.ok_or_else(|| Error::InvalidKernelFile("missing alpha=".into()))?;
        let mut counts: HashMap<Vec<usize>, Vec<u64>> = HashMap::new();
        for (num, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != order + 2 {
                return Err(Error::InvalidKernelFile(format!(
                    "line {}: expected {} fields, got {}",
                    num + 2,
                    order + 2,
                    parts.len()
                )));
            }
            let suffix: Result<Vec<usize>> =
                parts[..order].iter().map(|s| vocab.id(s)).collect();
            let suffix = suffix?;
            let tok = vocab.id(parts[order])?;
            let count: u64 = parts[order + 1]
                .parse()
                .map_err(|e| Error::InvalidKernelFile(format!("line {}: {e}", num + 2)))?;
            counts.entry(suffix).or_insert_with(|| vec![0; vocab.len()])[tok] += count;
        }
        Self::from_counts(order, alpha, vocab.clone(), counts, fallback)
    }
}

impl Kernel for NGramKernel {
    fn order(&self) -> usize {
        self.order
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn evaluate(&self, ctx: &Context) -> Result<Distribution> {
        self.vocab.check_ids(ctx.ids())?;
        let key = self.padded_suffix(ctx);
        let total = self.totals.get(&key).copied().unwrap_or(0);
        if total == 0 && self.alpha == 0.0 {
            return match self.fallback {
                FallbackMode::Uniform => Ok(uniform_no_pad(&self.vocab)),
                FallbackMode::Strict => {
                    Err(Error::UnseenContext(self.vocab.decode(&key).unwrap_or_default()))
                }
            };
        }
        let support = self.vocab.support_size() as f64;
        let denom = total as f64 + self.alpha * support;
        let pad = self.vocab.pad();
        let empty;
        let row = match self.counts.get(&key) {
            Some(r) => r,
            None => {
                empty = vec![0u64; self.vocab.len()];
                &empty
            }
        };
        let probs: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, &c)| if i == pad { 0.0 } else { (c as f64 + self.alpha) / denom })
            .collect();
        Distribution::from_probs(probs, EXACT_TOL)
    }

    fn kind_name(&self) -> &'static str {
        "ngram"
    }
}

fn check_corpus(corpus: &[Vec<usize>], vocab: &Vocabulary) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for seq in corpus {
        vocab.check_ids(seq)?;
        if seq.last() != Some(&vocab.eos()) {
            return Err(Error::MissingEos);
        }
        if seq.contains(&vocab.pad()) {
            return Err(Error::PadInSequence);
        }
    }
    Ok(())
}

/// Exact n-gram occurrence counting over all corpus positions, with PAD
/// left-padding for positions < n. EOS transitions are counted.
pub fn estimate_ngram(
    corpus: &[Vec<usize>],
    n: usize,
    alpha: f64,
    vocab: &Vocabulary,
    fallback: FallbackMode,
) -> Result<NGramKernel> {
    if n == 0 {
        return Err(Error::InvalidKernelFile("order must be positive".into()));
    }
    check_corpus(corpus, vocab)?;
    let pad = vocab.pad();
    let mut counts: HashMap<Vec<usize>, Vec<u64>> = HashMap::new();
    for seq in corpus {
        for t in 0..seq.len() {
            let mut key = Vec::with_capacity(n);
            for back in (1..=n).rev() {
                key.push(if t >= back { seq[t - back] } else { pad });
            }
            counts.entry(key).or_insert_with(|| vec![0; vocab.len()])[seq[t]] += 1;
        }
    }
    NGramKernel::from_counts(n, alpha, vocab.clone(), counts, fallback)
}

/// Greedy decoding: repeatedly append the argmax token until EOS is
/// emitted or `max_new` tokens have been generated. Returns prompt +
/// generated tokens.
pub fn greedy_rollout(kernel: &dyn Kernel, prompt: &Context, max_new: usize) -> Result<Vec<usize>> {
    let mut ids = prompt.ids().to_vec();
    let eos = kernel.vocabulary().eos();
    for _ in 0..max_new {
        let next = kernel.evaluate(&Context::unbounded(ids.clone()))?.argmax();
        ids.push(next);
        if next == eos {
            break;
        }
    }
    Ok(ids)
}

/// Ancestral sampling from temperature-scaled distributions. Deterministic
/// for fixed seed: the random stream is a seeded counter-based generator.
pub fn sample_rollout(
    kernel: &dyn Kernel,
    prompt: &Context,
    max_new: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<usize>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = prompt.ids().to_vec();
    let eos = kernel.vocabulary().eos();
    for _ in 0..max_new {
        let dist = kernel.evaluate(&Context::unbounded(ids.clone()))?;
        let next = sample_scaled(&dist, temperature, &mut rng);
        ids.push(next);
        if next == eos {
            break;
        }
    }
    Ok(ids)
}

/// Draw from probabilities proportional to p_i^(1/temperature).
fn sample_scaled(dist: &Distribution, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    // Scale in log space relative to the max so low temperatures stay finite.
    let max_p = dist.probs().iter().cloned().fold(0.0_f64, f64::max);
    let weights: Vec<f64> = dist
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { ((p.ln() - max_p.ln()) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 && w > 0.0 {
            return i;
        }
    }
    // Round-off fell past the end; return the last supported token.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Log-likelihood in nats, with zero-probability steps made explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogLikelihood {
    Finite(f64),
    /// Some step had probability 0 (the -infinity case).
    Impossible,
}

impl LogLikelihood {
    pub fn value(&self) -> f64 {
        match self {
            LogLikelihood::Finite(v) => *v,
            LogLikelihood::Impossible => f64::NEG_INFINITY,
        }
    }
}

/// Sum over positions of ln kernel(x_t | x_{<t}), including the first
/// token (empty prefix) and the terminal EOS.
pub fn log_likelihood(kernel: &dyn Kernel, sequence: &[usize]) -> Result<LogLikelihood> {
    let vocab = kernel.vocabulary();
    if sequence.is_empty() {
        return Err(Error::EmptyInput("sequence".into()));
    }
    if sequence.last() != Some(&vocab.eos()) {
        return Err(Error::MissingEos);
    }
    let mut total = 0.0;
    for t in 0..sequence.len() {
        let dist = kernel.evaluate(&Context::unbounded(sequence[..t].to_vec()))?;
        let p = dist.prob(sequence[t]);
        if p <= 0.0 {
            return Ok(LogLikelihood::Impossible);
        }
        total += p.ln();
    }
    Ok(LogLikelihood::Finite(total))
}
