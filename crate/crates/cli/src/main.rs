use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use skipnet::blocks::ConnectivityKind;
use skipnet::config::RunConfig;
use skipnet::experiment::{
    check_lm_alphabet, decode_all, featurize, load_corpus, read_transcripts, run_all_variants, score_files, train_lm,
    write_hypotheses,
};
use skipnet::gradcheck::{all_suites, TOLERANCE};
use skipnet::lm::{arpa_read, arpa_write, Tokenization};
use skipnet::model::AcousticModel;
use skipnet::synth::synth_data;
use skipnet::train::{train, TrainOutputs};

#[derive(Parser)]
#[command(name = "skipnet", version, about = "Convolutional CTC speech recognition toolkit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set train.lr0=0.02`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus (WAVs and manifest).
    SynthData {
        #[arg(long)]
        num_utterances: Option<usize>,
    },
    /// Compute feature caches for a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a modified Kneser-Ney LM and write it as ARPA.
    LmTrain {
        /// Manifest whose transcripts form the corpus.
        #[arg(long, conflicts_with = "text")]
        manifest: Option<PathBuf>,
        /// Plain text corpus, one sentence per line.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long, value_parser = ["char", "word"])]
        unit: Option<String>,
    },
    /// Train an acoustic model.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Decode a manifest with a trained model.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Best-path decoding instead of beam search.
        #[arg(long)]
        greedy: bool,
    },
    /// Score hypotheses, or train and compare every connectivity variant.
    Evaluate {
        /// Reference transcripts (manifest or `id<TAB>text`).
        #[arg(long = "ref", required_unless_present = "all_variants")]
        reference: Option<PathBuf>,
        #[arg(long, required_unless_present = "all_variants")]
        hyp: Option<PathBuf>,
        /// Train and decode plain, residual, highway and dense from one config.
        #[arg(long)]
        all_variants: bool,
        /// Restrict `--all-variants` to a comma-separated subset.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<ConnectivityKind>,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck,
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &cli.overrides)?,
        None => RunConfig::from_toml_with_overrides("", &cli.overrides)?,
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) if p.exists() => Ok(p.to_path_buf()),
        Some(p) => bail!("{what} {} does not exist", p.display()),
        None => bail!("no {what} given (flag or config paths section)"),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::SynthData { num_utterances } => {
            if let Some(n) = num_utterances {
                cfg.synth.num_utterances = *n;
            }
            let dir = out_dir(cli)?;
            let entries = synth_data(&dir, &cfg.synth)?;
            println!("wrote {} utterances to {}", entries.len(), dir.join("manifest.tsv").display());
        }
        Command::Featurize { manifest } => {
            let manifest = require(Some(manifest), "manifest")?;
            let dir = out_dir(cli)?;
            cfg.embed(&dir)?;
            let entries = featurize(&manifest, &dir, &cfg)?;
            println!("wrote {} feature files to {}", entries.len(), dir.display());
        }
        Command::LmTrain {
            manifest,
            text,
            order,
            unit,
        } => {
            let texts: Vec<String> = match (manifest, text) {
                (Some(m), _) => read_transcripts(&require(Some(m), "manifest")?)?
                    .into_iter()
                    .map(|(_, t)| t)
                    .collect(),
                (None, Some(t)) => {
                    let t = require(Some(t), "text corpus")?;
                    fs::read_to_string(&t)
                        .with_context(|| format!("reading {}", t.display()))?
                        .lines()
                        .map(str::to_string)
                        .collect()
                }
                (None, None) => match &cfg.paths.train_manifest {
                    Some(m) => read_transcripts(m)?.into_iter().map(|(_, t)| t).collect(),
                    None => bail!("lm-train needs --manifest, --text or paths.train_manifest"),
                },
            };
            let unit = match unit.as_deref() {
                Some("word") => Tokenization::Word,
                Some(_) => Tokenization::Char,
                None => cfg.decoder.tokenization(),
            };
            let order = order.unwrap_or(cfg.decoder.lm_order);
            let lm = train_lm(&texts, unit, order)?;
            for w in lm.warnings() {
                eprintln!("warning: {w}");
            }
            let dir = out_dir(cli)?;
            let path = dir.join("lm.arpa");
            arpa_write(&lm, &path)?;
            let corpus: Vec<Vec<String>> = texts.iter().map(|t| unit.tokenize(t)).collect();
            println!("wrote {} (order {order}, perplexity {:.3})", path.display(), lm.perplexity(&corpus));
        }
        Command::Train { manifest, valid } => {
            let alphabet = cfg.alphabet()?;
            let manifest = require(manifest.as_deref().or(cfg.paths.train_manifest.as_deref()), "training manifest")?;
            let valid_path = valid.clone().or(cfg.paths.valid_manifest.clone());
            let dir = out_dir(cli)?;
            cfg.embed(&dir)?;
            let train_set = load_corpus(&manifest, &cfg, &alphabet)?;
            let valid_set = match valid_path {
                Some(p) => load_corpus(&require(Some(&p), "validation manifest")?, &cfg, &alphabet)?,
                None => Vec::new(),
            };
            let mut model = AcousticModel::new(cfg.model.clone(), cfg.train.seed)?;
            let report = train(&mut model, &train_set, &valid_set, &alphabet, &cfg.train, &TrainOutputs::in_dir(&dir))?;
            println!(
                "{} epochs, final train CER {:.4}, {} parameters, checkpoints in {}",
                report.epochs_run,
                report.final_train_cer,
                model.param_count(),
                dir.display()
            );
            if let Some(h) = report.halted {
                eprintln!("error: {h}; last good model saved");
                return Ok(false);
            }
        }
        Command::Decode {
            checkpoint,
            manifest,
            lm,
            greedy,
        } => {
            let alphabet = cfg.alphabet()?;
            let ckpt = require(checkpoint.as_deref().or(cfg.paths.checkpoint.as_deref()), "checkpoint")?;
            let model = AcousticModel::load(&ckpt)?;
            if model.config().alphabet_size != alphabet.len() {
                bail!(
                    "checkpoint has {} output symbols but the alphabet {:?} has {}",
                    model.config().alphabet_size,
                    cfg.alphabet,
                    alphabet.len()
                );
            }
            cfg.model = model.config().clone();
            let lm_path = lm.clone().or(cfg.paths.lm.clone());
            let lm = match (&lm_path, greedy) {
                (Some(p), false) => Some(arpa_read(&require(Some(p), "language model")?)?),
                _ => None,
            };
            if let Some(lm) = &lm {
                check_lm_alphabet(lm, &alphabet, cfg.decoder.tokenization())?;
            }
            let dir = out_dir(cli)?;
            cfg.embed(&dir)?;
            let utts = load_corpus(&require(Some(manifest), "manifest")?, &cfg, &alphabet)?;
            let hyps = decode_all(&model, &utts, &alphabet, &cfg.decoder.with_lm(lm.as_ref()))?;
            let rows: Vec<(String, String)> = hyps
                .iter()
                .map(|h| (h.id.clone(), if *greedy { h.greedy.clone() } else { h.beam.clone() }))
                .collect();
            let path = dir.join(if *greedy { "greedy.hyp" } else { "beam.hyp" });
            write_hypotheses(&path, &rows)?;
            println!("wrote {} hypotheses to {}", rows.len(), path.display());
        }
        Command::Evaluate {
            reference,
            hyp,
            all_variants,
            variants,
        } => {
            let dir = out_dir(cli)?;
            if *all_variants {
                let kinds = if variants.is_empty() {
                    ConnectivityKind::ALL.to_vec()
                } else {
                    variants.clone()
                };
                let rows = run_all_variants(&cfg, &kinds, &dir)?;
                println!("{}", fs::read_to_string(dir.join("table.csv"))?.trim_end());
                return Ok(rows.iter().all(|r| r.report.halted.is_none()));
            }
            let refs = read_transcripts(&require(reference.as_deref(), "reference file")?)?;
            let hyps = read_transcripts(&require(hyp.as_deref(), "hypothesis file")?)?;
            let scores = score_files(&refs, &hyps)?;
            let summary = format!(
                "utterances,cer,wer,ref_chars,ref_words\n{},{},{},{},{}\n",
                refs.len(),
                scores.cer()?,
                scores.wer()?,
                scores.chars.length,
                scores.words.length
            );
            fs::write(dir.join("scores.csv"), &summary)?;
            print!("{summary}");
        }
        Command::Gradcheck => {
            let results = all_suites()?;
            let mut csv = String::from("suite,max_rel_error,kink_margin,entries,passed\n");
            let mut ok = true;
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!("{status} {:<40} {:.3e} (tolerance {TOLERANCE:e})", r.name, r.max_rel_error);
                csv.push_str(&format!("{},{},{},{},{}\n", r.name, r.max_rel_error, r.kink_margin, r.entries, r.passed()));
                ok &= r.passed();
            }
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("gradcheck.csv"), csv)?;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("SKIPNET_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: SKIPNET_THREADS: {e}");
                    return ExitCode::FAILURE;
                }
            }
            _ => {
                eprintln!("error: SKIPNET_THREADS must be a positive integer, got {n:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
