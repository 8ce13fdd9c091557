//! The `ibn` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use ibn_core::oracle;
use ibn_core::pipeline::{
    self, assemble_intent, default_slots, default_templates, evaluate, train_pipeline, EvalMetrics, IntentPayload,
    IntentTemplate, NerModel, PipelineReport,
};
use ibn_core::tensor::RngState;
use ibn_core::tokenizer::Doc;

use crate::backend::NeuralBackend;
use crate::config::Config;
use crate::engine::Engine;
use crate::inventory::Inventory;

#[derive(Debug, Parser)]
#[command(name = "ibn", version, about = "Natural-language intent recognition for network operations")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "IBN_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated, labeled corpus as JSON lines.
    GenCorpus {
        #[arg(short, long, default_value_t = 2000)]
        n: usize,
        /// Defaults to the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// One template pattern per line; the built-in set when omitted.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Build the vocabulary, pretrain, train both heads and write a checkpoint.
    Train {
        /// JSONL corpus; a generated one of the configured size when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the training report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Tag text and print spans and the assembled intent.
    Tag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(required = true)]
        text: Vec<String>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Initial model; may be omitted when the data directory already has one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// JSON inventory for activation.
        #[arg(long)]
        inventory: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over every op and an encoder stack.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        json: bool,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus {
            n,
            seed,
            templates,
            out: path,
        } => gen_corpus(&cfg, n, seed, templates.as_deref(), path.as_deref(), out),
        Command::Train {
            corpus,
            out: path,
            report,
        } => train(&cfg, corpus.as_deref(), &path, report.as_deref(), out),
        Command::Eval {
            checkpoint,
            corpus,
            json,
        } => {
            let model = NerModel::load(&checkpoint)?;
            let data = pipeline::load_corpus(&corpus)?;
            let m = evaluate(&model, &data)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&m)?)?;
            } else {
                write_metrics(out, &m)?;
            }
            Ok(())
        }
        Command::Tag {
            checkpoint,
            json,
            text,
        } => {
            let model = NerModel::load(&checkpoint)?;
            tag(&model, &text.join(" "), json, out)
        }
        Command::Serve {
            port,
            checkpoint,
            data_dir,
            inventory,
        } => {
            let mut cfg = cfg;
            cfg.port = port.unwrap_or(cfg.port);
            cfg.data_dir = data_dir.unwrap_or(cfg.data_dir);
            cfg.inventory = inventory.or(cfg.inventory);
            serve(cfg, checkpoint.as_deref())
        }
        Command::Gradcheck { seeds, json } => gradcheck(&seeds, json, out),
    }
}

fn gen_corpus(
    cfg: &Config,
    n: usize,
    seed: Option<u64>,
    templates: Option<&Path>,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let templates = match templates {
        Some(p) => read_templates(p)?,
        None => default_templates(),
    };
    let mut rng = RngState::new(seed.unwrap_or(cfg.seed));
    let corpus = pipeline::generate_corpus(&templates, &mut rng, n)?;
    match path {
        Some(p) => pipeline::save_corpus(p, &corpus)?,
        None => pipeline::write_jsonl(&mut *out, &corpus)?,
    }
    Ok(())
}

fn read_templates(path: &Path) -> Result<Vec<IntentTemplate>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let slots = default_slots();
    let templates = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| IntentTemplate::new(l, &slots).with_context(|| format!("template {l:?}")))
        .collect::<Result<Vec<_>>>()?;
    if templates.is_empty() {
        bail!("{} has no templates", path.display());
    }
    Ok(templates)
}

fn train(cfg: &Config, corpus: Option<&Path>, path: &Path, report: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let data = match corpus {
        Some(p) => pipeline::load_corpus(p)?,
        None => {
            let mut rng = RngState::new(cfg.seed);
            pipeline::generate_corpus(&default_templates(), &mut rng, cfg.training.corpus_size)?
        }
    };
    let (model, rep) = train_pipeline(&data, &cfg.pipeline())?;
    model.save(path)?;
    write_report(out, &rep)?;
    writeln!(out, "checkpoint   {}", path.display())?;
    if let Some(p) = report {
        std::fs::write(p, serde_json::to_vec_pretty(&rep)?)?;
    }
    Ok(())
}

fn write_report(out: &mut dyn Write, rep: &PipelineReport) -> Result<()> {
    writeln!(out, "sentences    {} train / {} dev", rep.train_sentences, rep.dev_sentences)?;
    let last = rep.mlm.epoch_losses.last().copied().unwrap_or(f64::NAN);
    writeln!(out, "mlm loss     {:.4} -> {:.4}", rep.mlm.initial_loss, last)?;
    write_metrics(out, &rep.dev)?;
    if let Some(fb) = &rep.feature_based_ner {
        writeln!(out, "ner f1 (feature-based) {:.4}", fb.f1)?;
    }
    Ok(())
}

fn write_metrics(out: &mut dyn Write, m: &EvalMetrics) -> Result<()> {
    writeln!(out, "{:<12} {:>8}", "metric", "value")?;
    writeln!(out, "{:<12} {:>8}", "sentences", m.sentences)?;
    writeln!(out, "{:<12} {:>8.4}", "precision", m.precision)?;
    writeln!(out, "{:<12} {:>8.4}", "recall", m.recall)?;
    writeln!(out, "{:<12} {:>8.4}", "f1", m.f1)?;
    match m.pos_accuracy {
        Some(a) => writeln!(out, "{:<12} {:>8.4}", "pos accuracy", a)?,
        None => writeln!(out, "{:<12} {:>8}", "pos accuracy", "-")?,
    }
    Ok(())
}

#[derive(Serialize)]
struct Tagged {
    doc: Doc,
    intent: IntentPayload,
}

fn tag(model: &NerModel, text: &str, json: bool, out: &mut dyn Write) -> Result<()> {
    let doc = pipeline::predict(model, text)?;
    let intent = assemble_intent(&doc);
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&Tagged { doc, intent })?)?;
        return Ok(());
    }
    for s in &doc.sentences {
        let words: Vec<String> = match &s.pos_tags {
            Some(tags) => s.tokens.iter().zip(tags).map(|(t, p)| format!("{}/{p}", t.text)).collect(),
            None => s.tokens.iter().map(|t| t.text.clone()).collect(),
        };
        writeln!(out, "{}", words.join(" "))?;
    }
    for sp in &doc.spans {
        let conf = sp.confidence.map_or(String::from("-"), |c| format!("{c:.3}"));
        writeln!(
            out,
            "{:<10} {:<24} chars {}..{}  confidence {conf}",
            sp.group,
            doc.span_text(sp),
            sp.char_start,
            sp.char_end
        )?;
    }
    writeln!(out, "{}", serde_json::to_string(&intent)?)?;
    Ok(())
}

fn serve(cfg: Config, checkpoint: Option<&Path>) -> Result<()> {
    let initial = checkpoint.map(NerModel::load).transpose()?;
    let inventory = match &cfg.inventory {
        Some(p) => Inventory::load(p)?,
        None => Inventory::default(),
    };
    let backend = NeuralBackend::new(cfg.retrain.clone(), cfg.seed)?;
    let engine = Engine::open(backend, initial, cfg.engine(), inventory, Some(&cfg.data_dir))
        .context("starting the engine (pass --checkpoint on first start)")?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(crate::api::serve(Arc::new(engine), cfg.port))
}

fn gradcheck(seeds: &[u64], json: bool, out: &mut dyn Write) -> Result<()> {
    let results = oracle::run_suite(seeds)?;
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&results)?)?;
    } else {
        writeln!(out, "{:<14} {:>4} {:>12} {:>9}  result", "check", "seed", "max rel err", "tolerance")?;
        for r in &results {
            let verdict = if r.passed() { "pass" } else { "FAIL" };
            writeln!(
                out,
                "{:<14} {:>4} {:>12.3e} {:>9.0e}  {verdict}",
                r.name, r.seed, r.max_rel_error, r.tolerance
            )?;
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> Result<String> {
        let cli = Cli::try_parse_from(std::iter::once("ibn").chain(args.iter().copied()))?;
        let mut out = Vec::new();
        run(cli, &mut out)?;
        Ok(String::from_utf8(out)?)
    }

    #[test]
    fn gen_corpus_to_stdout_is_deterministic() {
        let a = run_args(&["gen-corpus", "-n", "5", "--seed", "3"]).unwrap();
        let b = run_args(&["gen-corpus", "-n", "5", "--seed", "3"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 5);
    }

    #[test]
    fn custom_templates() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("t.txt");
        std::fs::write(&t, "# one pattern\nList/VERB {DEVICE} in/ADP {LOCATION}\n").unwrap();
        let text = run_args(&["gen-corpus", "-n", "3", "--templates", t.to_str().unwrap()]).unwrap();
        assert!(text.lines().all(|l| l.contains("\"List\"")));
        std::fs::write(&t, "List/VERB {NOPE}\n").unwrap();
        assert!(run_args(&["gen-corpus", "--templates", t.to_str().unwrap()]).is_err());
    }

    #[test]
    fn gradcheck_single_seed() {
        let text = run_args(&["gradcheck", "--seeds", "5"]).unwrap();
        assert!(text.contains("encoder-2x8"));
        assert!(!text.contains("FAIL"));
    }

    #[test]
    fn tag_requires_text() {
        assert!(Cli::try_parse_from(["ibn", "tag", "--checkpoint", "x"]).is_err());
    }
}
