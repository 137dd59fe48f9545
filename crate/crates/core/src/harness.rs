//! Experiment orchestration: generate a corpus, split it, fit the
//! requested kernels, sample transformations, and write invariance
//! reports plus a hashed manifest. Fully deterministic for a fixed
//! config: every stage draws its seed from the master seed and the
//! stage name.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{estimate_ngram, FallbackMode, Kernel, NGramKernel};
use crate::metrics::{combined_report, InvarianceReport};
use crate::model::{
    save_model, train, ModelConfig, NeuralKernel, Optimizer, TrainConfig,
};
use crate::synth::{
    generate_corpus, save_corpus, save_instances, GeneratedSequence, InferenceInstance,
    LanguageSpec, SynthLayout,
};
use crate::transform::{sample_transformations, save_transformations, KindSelector};

/// Language shape without a seed; the corpus seed is derived from the
/// experiment's master seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageParams {
    pub num_entities: usize,
    pub statements_per_sequence: usize,
    pub chain_depth: usize,
    pub num_distractors: usize,
}

impl LanguageParams {
    pub fn with_seed(&self, seed: u64) -> LanguageSpec {
        LanguageSpec {
            num_entities: self.num_entities,
            statements_per_sequence: self.statements_per_sequence,
            chain_depth: self.chain_depth,
            num_distractors: self.num_distractors,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Ngram {
        name: String,
        order: usize,
        alpha: f64,
        fallback: FallbackMode,
    },
    Neural {
        name: String,
        d_model: usize,
        n_layers: usize,
        context_len: usize,
        init_scale: f64,
        lr: f64,
        steps: usize,
        batch_size: usize,
    },
}

impl KernelSpec {
    pub fn name(&self) -> &str {
        match self {
            KernelSpec::Ngram { name, .. } | KernelSpec::Neural { name, .. } => name,
        }
    }
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub language: LanguageParams,
    pub corpus_size: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub kernels: Vec<KernelSpec>,
    pub transform_kinds: Vec<KindSelector>,
    pub num_transforms: usize,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus_size < 2 {
            return Err(Error::InvalidConfig("corpus_size must be at least 2".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig("holdout_fraction must be in (0, 1)".into()));
        }
        if self.kernels.is_empty() {
            return Err(Error::InvalidConfig("at least one kernel required".into()));
        }
        let mut names = HashSet::new();
        for k in &self.kernels {
            if !names.insert(k.name().to_string()) {
                return Err(Error::InvalidConfig(format!("duplicate kernel name {:?}", k.name())));
            }
            if k.name().is_empty() || !k.name().chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::InvalidConfig(format!(
                    "kernel name {:?} must be non-empty [A-Za-z0-9_-]",
                    k.name()
                )));
            }
        }
        if self.transform_kinds.is_empty() || self.num_transforms == 0 {
            return Err(Error::InvalidConfig("at least one transformation required".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

/// Stage seed: first eight little-endian bytes of
/// SHA-256(master_seed_le || stage_name).
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Serialize)]
pub struct ExperimentSummary {
    pub reports: BTreeMap<String, InvarianceReport>,
    pub num_train_sequences: usize,
    pub num_eval_instances: usize,
    pub files: Vec<String>,
}

/// Split indices into train/holdout so that identical token sequences
/// never straddle the split. Deterministic for a fixed seed.
pub fn holdout_split(
    sequences: &[GeneratedSequence],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, seq) in sequences.iter().enumerate() {
        groups.entry(seq.tokens.clone()).or_default().push(i);
    }
    let mut keys: Vec<Vec<usize>> = groups.keys().cloned().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let n_holdout = ((keys.len() as f64 * fraction).ceil() as usize).clamp(1, keys.len() - 1);
    let mut eval_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (gi, key) in keys.iter().enumerate() {
        let target = if gi < n_holdout { &mut eval_idx } else { &mut train_idx };
        target.extend(&groups[key]);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    (train_idx, eval_idx)
}

struct OutputTracker {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputTracker {
    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn track(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        path
    }

    fn cleanup(&self) {
        for path in &self.written {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn stage_err(stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |source| Error::Stage { stage, source: Box::new(source) }
}

/// Run the full pipeline, writing all artifacts under `out_dir`.
/// Partial outputs are removed if any stage fails.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut tracker = OutputTracker { dir: out_dir.to_path_buf(), written: Vec::new() };
    match run_stages(config, &mut tracker) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            tracker.cleanup();
            Err(e)
        }
    }
}

fn run_stages(config: &ExperimentConfig, out: &mut OutputTracker) -> Result<ExperimentSummary> {
    let master = config.master_seed;
    let spec = config.language.with_seed(stage_seed(master, "corpus"));
    let vocab = spec.vocabulary().map_err(stage_err("corpus"))?;
    let layout = SynthLayout { num_entities: spec.num_entities };

    // Corpus generation and holdout split by whole unique sequences.
    let (sequences, instances) =
        generate_corpus(&spec, config.corpus_size).map_err(stage_err("corpus"))?;
    let (train_idx, eval_idx) =
        holdout_split(&sequences, config.holdout_fraction, stage_seed(master, "split"));
    let train_seqs: Vec<GeneratedSequence> =
        train_idx.iter().map(|&i| sequences[i].clone()).collect();
    let eval_seqs: Vec<GeneratedSequence> =
        eval_idx.iter().map(|&i| sequences[i].clone()).collect();
    let eval_instances: Vec<InferenceInstance> =
        eval_idx.iter().map(|&i| instances[i].clone()).collect();
    let train_tokens: Vec<Vec<usize>> = train_seqs.iter().map(|s| s.tokens.clone()).collect();

    vocab.save(&out.track("vocab.txt")).map_err(stage_err("corpus"))?;
    save_corpus(&train_seqs, &vocab, &out.track("corpus_train.txt"))
        .map_err(stage_err("corpus"))?;
    save_corpus(&eval_seqs, &vocab, &out.track("corpus_eval.txt")).map_err(stage_err("corpus"))?;
    save_instances(&eval_instances, &vocab, &out.track("instances_eval.txt"))
        .map_err(stage_err("corpus"))?;

    // Transformations must preserve validity on every generated sequence.
    let transforms = sample_transformations(
        &spec,
        &config.transform_kinds,
        config.num_transforms,
        stage_seed(master, "transforms"),
        &sequences,
    )
    .map_err(stage_err("transforms"))?;
    save_transformations(&transforms, &vocab, &out.track("transforms.txt"))
        .map_err(stage_err("transforms"))?;

    // Kernels and reports.
    let mut reports = BTreeMap::new();
    for kspec in &config.kernels {
        let name = kspec.name().to_string();
        let kernel: Box<dyn Kernel> = match kspec {
            KernelSpec::Ngram { order, alpha, fallback, .. } => {
                let k: NGramKernel =
                    estimate_ngram(&train_tokens, *order, *alpha, &vocab, *fallback)
                        .map_err(stage_err("estimate"))?;
                k.save(&out.track(&format!("kernel_{name}.txt"))).map_err(stage_err("estimate"))?;
                Box::new(k)
            }
            KernelSpec::Neural {
                d_model, n_layers, context_len, init_scale, lr, steps, batch_size, ..
            } => {
                let model_config = ModelConfig {
                    d_model: *d_model,
                    n_layers: *n_layers,
                    n_heads: 1,
                    context_len: *context_len,
                    vocab_size: vocab.len(),
                    pad_id: vocab.pad(),
                    init_seed: stage_seed(master, &format!("init:{name}")),
                    init_scale: *init_scale,
                };
                let train_config = TrainConfig {
                    optimizer: Optimizer::adam_default(),
                    lr: *lr,
                    steps: *steps,
                    batch_size: *batch_size,
                    shuffle_seed: stage_seed(master, &format!("train:{name}")),
                };
                let (params, curve) =
                    train(&model_config, &train_config, &train_tokens).map_err(stage_err("train"))?;
                save_model(&params, &model_config, &out.track(&format!("model_{name}.txt")))
                    .map_err(stage_err("train"))?;
                let mut csv = String::from("step,loss\n");
                for (i, l) in curve.iter().enumerate() {
                    csv.push_str(&format!("{i},{l:.16e}\n"));
                }
                out.write(&format!("loss_{name}.csv"), &csv)?;
                Box::new(NeuralKernel::new(params, model_config, vocab.clone())
                    .map_err(stage_err("train"))?)
            }
        };
        let report = combined_report(kernel.as_ref(), &eval_instances, &transforms, layout)
            .map_err(stage_err("evaluate"))?;
        let json = serde_json::to_string_pretty(&report)?;
        out.write(&format!("report_{name}.json"), &json)?;
        reports.insert(name, report);
    }

    // Echo the resolved config, then hash every artifact.
    out.write("config.json", &serde_json::to_string_pretty(config)?)?;
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    for path in &out.written {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        let name = path.file_name().expect("tracked files have names").to_string_lossy();
        hashes.insert(name.into_owned(), format!("{digest:x}"));
    }
    out.write("manifest.json", &serde_json::to_string_pretty(&hashes)?)?;

    let files = out
        .written
        .iter()
        .map(|p| p.file_name().expect("named").to_string_lossy().into_owned())
        .collect();
    Ok(ExperimentSummary {
        reports,
        num_train_sequences: train_seqs.len(),
        num_eval_instances: eval_instances.len(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            language: LanguageParams {
                num_entities: 6,
                statements_per_sequence: 3,
                chain_depth: 2,
                num_distractors: 1,
            },
            corpus_size: 30,
            holdout_fraction: 0.2,
            kernels: vec![KernelSpec::Ngram {
                name: "bigram".into(),
                order: 2,
                alpha: 1.0,
                fallback: FallbackMode::Uniform,
            }],
            transform_kinds: vec![KindSelector::EntityPermutation],
            num_transforms: 3,
            master_seed: 11,
        }
    }

    #[test]
    fn stage_seeds_differ_by_stage_and_master() {
        assert_ne!(stage_seed(1, "corpus"), stage_seed(1, "split"));
        assert_ne!(stage_seed(1, "corpus"), stage_seed(2, "corpus"));
        assert_eq!(stage_seed(7, "train:x"), stage_seed(7, "train:x"));
    }

    #[test]
    fn holdout_split_respects_grouping_and_bounds() {
        let spec = tiny_config().language.with_seed(3);
        let (seqs, _) = generate_corpus(&spec, 40).unwrap();
        let (train, eval) = holdout_split(&seqs, 0.2, 5);
        assert_eq!(train.len() + eval.len(), 40);
        assert!(!train.is_empty() && !eval.is_empty());
        let train_tok: HashSet<Vec<usize>> =
            train.iter().map(|&i| seqs[i].tokens.clone()).collect();
        for &i in &eval {
            assert!(!train_tok.contains(&seqs[i].tokens), "sequence straddles the split");
        }
    }

    #[test]
    fn experiment_runs_and_is_byte_deterministic() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let s1 = run_experiment(&config, &out1).unwrap();
        let s2 = run_experiment(&config, &out2).unwrap();
        assert_eq!(s1.files, s2.files);
        assert!(s1.files.contains(&"report_bigram.json".to_string()));
        assert!(s1.files.contains(&"manifest.json".to_string()));
        for name in &s1.files {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between runs");
        }
    }

    #[test]
    fn failure_leaves_no_partial_outputs() {
        let mut config = tiny_config();
        // Order-0 n-gram estimation is rejected, after corpus files exist.
        config.kernels = vec![KernelSpec::Ngram {
            name: "bad".into(),
            order: 0,
            alpha: 1.0,
            fallback: FallbackMode::Uniform,
        }];
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        assert!(run_experiment(&config, &out).is_err());
        let leftovers: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
        assert!(leftovers.is_empty(), "partial outputs remain: {leftovers:?}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = tiny_config();
        let text = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
    }
}
