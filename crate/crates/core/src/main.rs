//! Command-line entry point for the kernel laboratory.

use std::path::PathBuf;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand};

use kernellab::harness::{run_experiment, stage_seed, ExperimentConfig};
use kernellab::kernel::{estimate_ngram, greedy_rollout, sample_rollout, FallbackMode, Kernel};
use kernellab::metrics::combined_report;
use kernellab::model::{
    finite_diff_check, load_model, save_model, train, ModelConfig, NeuralKernel, Optimizer,
    Parameters, TrainConfig,
};
use kernellab::synth::{
    generate_corpus, load_corpus_tokens, load_instances, save_corpus, save_instances,
    LanguageSpec, SynthLayout,
};
use kernellab::transform::load_transformations;
use kernellab::vocab::{Context, Vocabulary};
use kernellab::NGramKernel;

#[derive(Parser)]
#[command(name = "kernellab", about = "Markov-kernel laboratory for synthetic languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with inference instances.
    GenCorpus {
        #[arg(long)]
        num_entities: usize,
        #[arg(long)]
        statements: usize,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        distractors: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_corpus: PathBuf,
        #[arg(long)]
        out_instances: PathBuf,
        #[arg(long)]
        out_vocab: PathBuf,
    },
    /// Estimate an n-gram kernel from a corpus file.
    Estimate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value = "uniform")]
        fallback: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the transformer kernel on a corpus file.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 1)]
        n_layers: usize,
        #[arg(long, default_value_t = 32)]
        context_len: usize,
        #[arg(long, default_value_t = 0.02)]
        init_scale: f64,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Evaluate a kernel file against instances and transformations.
    Eval {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        transforms: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a prompt under a kernel (greedy unless --temperature).
    Rollout {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Space-separated token surfaces.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the transformer gradient.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 1)]
        n_layers: usize,
        #[arg(long, default_value_t = 16)]
        context_len: usize,
        #[arg(long, default_value_t = 6)]
        num_entities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Run a full experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() {
    if let Err(e) = dispatch(Cli::parse()) {
        // One machine-parseable line on stderr, nonzero exit.
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Load either kernel file format: n-gram files start with an `ngram`
/// header, model files with a JSON manifest line.
fn load_kernel(path: &PathBuf, vocab: &Vocabulary) -> anyhow::Result<Box<dyn Kernel>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading kernel file {}", path.display()))?;
    let first = text.lines().next().unwrap_or("");
    if first.starts_with("ngram ") {
        Ok(Box::new(NGramKernel::load(path, vocab)?))
    } else if first.starts_with('{') {
        let (params, config) = load_model(path)?;
        Ok(Box::new(NeuralKernel::new(params, config, vocab.clone())?))
    } else {
        bail!("unrecognized kernel file {}", path.display());
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus {
            num_entities,
            statements,
            depth,
            distractors,
            seed,
            count,
            out_corpus,
            out_instances,
            out_vocab,
        } => {
            let spec = LanguageSpec {
                num_entities,
                statements_per_sequence: statements,
                chain_depth: depth,
                num_distractors: distractors,
                seed,
            };
            let vocab = spec.vocabulary()?;
            let (sequences, instances) = generate_corpus(&spec, count)?;
            vocab.save(&out_vocab)?;
            save_corpus(&sequences, &vocab, &out_corpus)?;
            save_instances(&instances, &vocab, &out_instances)?;
            println!(
                "wrote {} sequences to {} and {} instances to {}",
                sequences.len(),
                out_corpus.display(),
                instances.len(),
                out_instances.display()
            );
        }
        Command::Estimate { corpus, vocab, order, alpha, fallback, out } => {
            let vocab = Vocabulary::load(&vocab)?;
            let fallback = match fallback.as_str() {
                "strict" => FallbackMode::Strict,
                "uniform" => FallbackMode::Uniform,
                other => bail!("unknown fallback mode {other:?} (strict|uniform)"),
            };
            let tokens = load_corpus_tokens(&corpus, &vocab)?;
            let kernel = estimate_ngram(&tokens, order, alpha, &vocab, fallback)?;
            kernel.save(&out)?;
            println!(
                "estimated order-{order} kernel over {} contexts -> {}",
                kernel.counts().len(),
                out.display()
            );
        }
        Command::Train {
            corpus,
            vocab,
            d_model,
            n_layers,
            context_len,
            init_scale,
            init_seed,
            lr,
            steps,
            batch_size,
            shuffle_seed,
            out,
            loss_out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let tokens = load_corpus_tokens(&corpus, &vocab)?;
            let config = ModelConfig {
                d_model,
                n_layers,
                n_heads: 1,
                context_len,
                vocab_size: vocab.len(),
                pad_id: vocab.pad(),
                init_seed,
                init_scale,
            };
            let train_config = TrainConfig {
                optimizer: Optimizer::adam_default(),
                lr,
                steps,
                batch_size,
                shuffle_seed,
            };
            let (params, curve) = train(&config, &train_config, &tokens)?;
            save_model(&params, &config, &out)?;
            if let Some(path) = loss_out {
                let mut csv = String::from("step,loss\n");
                for (i, l) in curve.iter().enumerate() {
                    csv.push_str(&format!("{i},{l:.16e}\n"));
                }
                std::fs::write(path, csv)?;
            }
            println!(
                "trained {} steps, final loss {:.6} -> {}",
                curve.len(),
                curve.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Eval { kernel, vocab, instances, transforms, out } => {
            let vocab = Vocabulary::load(&vocab)?;
            let layout = SynthLayout::from_vocabulary(&vocab)?;
            let kernel = load_kernel(&kernel, &vocab)?;
            let instances = load_instances(&instances, &vocab)?;
            let transforms = load_transformations(&transforms, &vocab, layout)?;
            let report = combined_report(kernel.as_ref(), &instances, &transforms, layout)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &json)?;
                    println!("wrote report to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
        Command::Rollout { kernel, vocab, prompt, max_new, temperature, seed } => {
            let vocab = Vocabulary::load(&vocab)?;
            let kernel = load_kernel(&kernel, &vocab)?;
            let prompt_ids = vocab.encode(&prompt)?;
            let ctx = Context::unbounded(prompt_ids);
            let ids = match temperature {
                None => greedy_rollout(kernel.as_ref(), &ctx, max_new)?,
                Some(t) => sample_rollout(kernel.as_ref(), &ctx, max_new, seed, t)?,
            };
            println!("{}", vocab.decode(&ids)?);
        }
        Command::Gradcheck { d_model, n_layers, context_len, num_entities, seed, eps, coords } => {
            let spec = LanguageSpec {
                num_entities,
                statements_per_sequence: 2,
                chain_depth: 1,
                num_distractors: 1,
                seed: stage_seed(seed, "gradcheck-corpus"),
            };
            let vocab = spec.vocabulary()?;
            let (sequences, _) = generate_corpus(&spec, 4)?;
            let batch: Vec<Vec<usize>> = sequences.into_iter().map(|s| s.tokens).collect();
            let config = ModelConfig {
                d_model,
                n_layers,
                n_heads: 1,
                context_len,
                vocab_size: vocab.len(),
                pad_id: vocab.pad(),
                init_seed: stage_seed(seed, "gradcheck-init"),
                init_scale: 0.1,
            };
            let params = Parameters::init(&config)?;
            let rel = finite_diff_check(&params, &config, &batch, eps, coords, seed)?;
            println!("max relative error over {coords} coordinates: {rel:.3e}");
            if rel >= 1e-4 {
                bail!("gradient check failed: {rel:.3e} >= 1e-4");
            }
        }
        Command::Run { config, out_dir } => {
            let config = ExperimentConfig::load(&config)?;
            let summary = run_experiment(&config, &out_dir)?;
            println!(
                "experiment complete: {} train sequences, {} eval instances",
                summary.num_train_sequences, summary.num_eval_instances
            );
            for (name, report) in &summary.reports {
                println!(
                    "  {name}: eps_max={:.4} eps_mean={:.4} delta_worst={:.4} delta_mean={:.4} greedy_acc={:.4}",
                    report.epsilon.max,
                    report.epsilon.mean,
                    report.delta.worst,
                    report.delta.mean,
                    report.greedy_accuracy
                );
            }
            println!("artifacts in {}", out_dir.display());
        }
    }
    Ok(())
}
