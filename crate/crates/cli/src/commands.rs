use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use belle::backbone::{generate, MelSequence, Model, Prompt, TokenSequence};
use belle::corpus::{read_corpus, write_corpus, Corpus, Utterance};
use belle::evaluate::evaluate;
use belle::metrics::token_error_rate;
use belle::sampler::RngStream;
use belle::streaming::{stream_generate, text_chunks};
use belle::trainer::{train, StepRecord, TrainRun};
use belle::verify::{run_suite, CheckLine, SUITES};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::settings::RunConfig;
use crate::{split_override, Baseline, Commands, Mode, Shared, Suite, Target};

type Result<T> = std::result::Result<T, CliError>;

/// Config file, then command flags, then `--seed`, then `--set` entries.
fn resolve(shared: &Shared, flags: Vec<(&str, String)>, seed_key: &str) -> Result<RunConfig> {
    let mut all: Vec<(String, String)> = flags.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if let Some(seed) = shared.seed {
        all.push((seed_key.to_string(), seed.to_string()));
    }
    for raw in &shared.overrides {
        all.push(split_override(raw)?);
    }
    RunConfig::load(shared.config.as_deref(), &all)
}

fn flag<T: ToString>(key: &'static str, value: Option<T>) -> Option<(&'static str, String)> {
    value.map(|v| (key, v.to_string()))
}

pub fn run(command: Commands) -> Result<ExitCode> {
    match command {
        Commands::GenCorpus {
            out,
            utterances,
            vocab_size,
            shared,
        } => {
            let flags = [flag("corpus.num_utterances", utterances), flag("corpus.vocab_size", vocab_size)];
            let cfg = resolve(&shared, flags.into_iter().flatten().collect(), "corpus.seed")?;
            gen_corpus(&cfg, &out)
        }
        Commands::Train {
            corpus,
            out,
            steps,
            teachers,
            ablate_sampling,
            ablate_flux,
            baseline,
            init,
            quiet,
            shared,
        } => {
            let mut flags: Vec<_> = [flag("train.steps", steps), flag("train.teachers", teachers)]
                .into_iter()
                .flatten()
                .collect();
            if ablate_sampling {
                flags.push(("model.sampling", "false".into()));
            }
            if ablate_flux {
                flags.push(("train.lambda_flux", "0".into()));
            }
            if baseline == Baseline::Melle {
                flags.push(("model.head", "gaussian".into()));
                flags.push(("train.lambda_samp", "0.1".into()));
            }
            let cfg = resolve(&shared, flags, "train.seed")?;
            train_cmd(cfg, &corpus, &out, init.as_deref(), quiet)
        }
        Commands::Generate {
            target,
            mode,
            prompt_index,
            out,
            shared,
        } => {
            let cfg = resolve(&shared, target_flags(&target), "generate.seed")?;
            generate_cmd(&cfg, &target, mode, prompt_index, &out)
        }
        Commands::StreamGenerate {
            target,
            chunk_text,
            chunk_audio,
            out,
            shared,
        } => {
            let mut flags = target_flags(&target);
            flags.extend(flag("generate.chunk_text", chunk_text));
            flags.extend(flag("generate.chunk_audio", chunk_audio));
            let cfg = resolve(&shared, flags, "generate.seed")?;
            stream_cmd(&cfg, &target, &out)
        }
        Commands::Evaluate {
            checkpoint,
            corpus,
            out,
            beta_scale,
            diversity_prompts,
            shared,
        } => {
            let flags = [flag("eval.beta_scale", beta_scale), flag("eval.diversity_prompts", diversity_prompts)];
            let cfg = resolve(&shared, flags.into_iter().flatten().collect(), "eval.seed")?;
            evaluate_cmd(&cfg, &checkpoint, &corpus, &out)
        }
        Commands::Verify { suite, out, shared } => verify_cmd(suite, shared.seed.unwrap_or(0), out.as_deref()),
    }
}

fn target_flags(t: &Target) -> Vec<(&'static str, String)> {
    [flag("generate.beta_scale", t.beta_scale), flag("generate.max_frames", t.max_frames)]
        .into_iter()
        .flatten()
        .collect()
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn report_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn at_path(path: &Path, e: impl Into<CliError>) -> CliError {
    match e.into() {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", path.display())),
    }
}

fn open_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).map_err(|e| at_path(path, e))
}

fn open_model(path: &Path) -> Result<Model> {
    Model::load(path).map_err(|e| at_path(path, e))
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    cfg.corpus.validate()?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    write_corpus(&corpus, out).map_err(|e| at_path(out, e))?;
    let frames: usize = corpus.utterances.iter().map(|u| u.mel.len()).sum();
    println!(
        "wrote {} utterances ({frames} frames, template margin {:.3}) to {}",
        corpus.len(),
        corpus.templates.compute_margin(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(mut cfg: RunConfig, corpus_path: &Path, out: &Path, init: Option<&Path>, quiet: bool) -> Result<ExitCode> {
    let corpus = open_corpus(corpus_path)?;
    let spec = corpus.spec().clone();
    if !cfg.is_explicit("model.vocab_size") {
        cfg.model.vocab_size = spec.vocab_size;
    }
    if !cfg.is_explicit("model.mel_dim") {
        cfg.model.mel_dim = spec.mel_dim;
    }
    if !cfg.is_explicit("model.frame_rate") {
        cfg.model.frame_rate = spec.frame_rate;
    }
    cfg.corpus = spec;
    let init = init.map(open_model).transpose()?;
    if let Some(m) = &init {
        cfg.model = m.config.clone();
    }
    cfg.model.validate()?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.render())?;
    let mut log = BufWriter::new(File::create(out.join("metrics.ndjson"))?);
    writeln!(log, "{}", json!({ "config": cfg.as_map() }))?;

    let every = (cfg.train.steps / 50).max(1);
    let started = Instant::now();
    let mut progress = |r: &StepRecord| {
        if !quiet && (r.step + 1) % every == 0 {
            eprintln!(
                "step {:>6}  lr {:.2e}  reg {:8.3}  samp {:8.3}  flux {:7.3}  stop {:.3}  |g| {:7.2}  {:.0}s",
                r.step + 1,
                r.lr,
                r.reg,
                r.samp,
                r.flux,
                r.stop,
                r.grad_norm,
                started.elapsed().as_secs_f64()
            );
        }
    };
    let outcome = train(
        cfg.model.clone(),
        &corpus,
        &cfg.train,
        TrainRun {
            log: Some(&mut log),
            checkpoint_dir: Some(out),
            on_step: Some(&mut progress),
            init,
        },
    )?;
    log.flush()?;
    let last = outcome.history.last();
    println!(
        "trained {} steps in {:.1}s; final total loss {:.4}; checkpoint {}",
        outcome.history.len(),
        started.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |r| r.total),
        out.join("final.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_pair(t: &Target) -> Result<(Model, Corpus)> {
    let model = open_model(&t.checkpoint)?;
    let corpus = open_corpus(&t.corpus)?;
    let spec = corpus.spec();
    if spec.vocab_size != model.config.vocab_size || spec.mel_dim != model.config.mel_dim {
        return Err(CliError::Usage(format!(
            "corpus (vocab {}, mel_dim {}) does not match the checkpoint (vocab {}, mel_dim {})",
            spec.vocab_size, spec.mel_dim, model.config.vocab_size, model.config.mel_dim
        )));
    }
    Ok((model, corpus))
}

fn check_index(corpus: &Corpus, index: usize) -> Result<()> {
    if index >= corpus.len() {
        return Err(CliError::Usage(format!("utterance {index} out of range ({} in corpus)", corpus.len())));
    }
    Ok(())
}

fn utterance_text(corpus: &Corpus, t: &Target) -> Result<TokenSequence> {
    check_index(corpus, t.index)?;
    Ok(match &t.text {
        Some(ids) => TokenSequence::new(ids.clone()),
        None => corpus.utterances[t.index].text.clone(),
    })
}

/// Wraps generated frames as a one-record corpus file.
fn write_output(corpus: &Corpus, text: &TokenSequence, mel: MelSequence, speaker: usize, seed: u64, out: &Path) -> Result<()> {
    let single = Corpus {
        templates: corpus.templates.clone(),
        utterances: vec![Utterance {
            text: text.clone(),
            mel,
            speaker_id: speaker,
            teacher_id: 0,
            seed,
        }],
    };
    write_corpus(&single, out).map_err(|e| at_path(out, e))?;
    Ok(())
}

fn score(corpus: &Corpus, text: &TokenSequence, mel: &MelSequence, speaker: usize) -> Result<(TokenSequence, Option<f64>)> {
    let decoded = corpus.templates.decode_nearest(mel, speaker)?;
    let ter = if text.is_empty() {
        None
    } else {
        Some(token_error_rate(text, &decoded).map_err(|e| CliError::Data(e.to_string()))?)
    };
    Ok((decoded, ter))
}

fn generate_cmd(cfg: &RunConfig, t: &Target, mode: Mode, prompt_index: Option<usize>, out: &Path) -> Result<ExitCode> {
    let (model, corpus) = load_pair(t)?;
    let g = &cfg.generate;
    check_index(&corpus, t.index)?;
    if g.source > corpus.spec().num_teachers {
        return Err(CliError::Usage(format!("source {} beyond the corpus teachers", g.source)));
    }
    let f = corpus.spec().frames_per_token;
    let (prompt, text, speaker, prompt_at) = match mode {
        Mode::Continuation => {
            let u = corpus.rendition(t.index, g.source)?;
            let k = g.prompt_tokens.min(u.text.len().saturating_sub(1));
            let text = match &t.text {
                Some(ids) => TokenSequence::new(ids.clone()),
                None => TokenSequence::new(u.text.ids[k..].to_vec()),
            };
            let prompt = Prompt {
                text: TokenSequence::new(u.text.ids[..k].to_vec()),
                mel: u.mel.slice(0..k * f),
            };
            (prompt, text, u.speaker_id, t.index)
        }
        Mode::CrossSentence => {
            let n = corpus.len();
            let p = prompt_index.unwrap_or((t.index + n - 1) % n);
            check_index(&corpus, p)?;
            let u = corpus.rendition(p, g.source)?;
            let text = utterance_text(&corpus, t)?;
            (Prompt { text: u.text, mel: u.mel }, text, u.speaker_id, p)
        }
    };
    let mut rng = RngStream::new(g.seed, 0);
    let started = Instant::now();
    let result = generate(&model, &text, Some(&prompt), &mut rng, g.beta_scale, g.max_frames)?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    let mel = result.generated();
    let (decoded, ter) = score(&corpus, &text, &mel, speaker)?;
    write_output(&corpus, &text, mel.clone(), speaker, g.seed, out)?;
    let report = json!({
        "command": "generate",
        "config": cfg.as_map(),
        "checkpoint": t.checkpoint,
        "corpus": t.corpus,
        "mode": format!("{mode:?}").to_lowercase(),
        "index": t.index,
        "prompt_index": prompt_at,
        "prompt_tokens": prompt.text.ids,
        "prompt_frames": prompt.mel.len(),
        "text": text.ids,
        "decoded": decoded.ids,
        "token_error_rate": ter,
        "frames": mel.len(),
        "truncated": result.truncated,
        "elapsed_ms": elapsed_ms,
        "real_time_factor": elapsed_ms / 1e3 / mel.duration().max(f64::MIN_POSITIVE),
    });
    write_json(&report_path(out), &report)?;
    println!(
        "generated {} frames{} in {elapsed_ms:.1} ms; decoded {:?}; wrote {}",
        mel.len(),
        if result.truncated { " (truncated)" } else { "" },
        decoded.ids,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn stream_cmd(cfg: &RunConfig, t: &Target, out: &Path) -> Result<ExitCode> {
    let (model, corpus) = load_pair(t)?;
    let g = &cfg.generate;
    let text = utterance_text(&corpus, t)?;
    let speaker = corpus.utterances[t.index].speaker_id;
    if g.chunk_text == 0 {
        return Err(CliError::Usage("generate.chunk_text must be positive".into()));
    }
    let mut rng = RngStream::new(g.seed, 0);
    let chunks = text_chunks(&text.ids, g.chunk_text);
    let streamed = stream_generate(&model, chunks, &mut rng, g.beta_scale, g.chunk_audio, g.max_frames, |c| {
        println!(
            "chunk {}: {} frames at {:.2} ms{}",
            c.index,
            c.num_frames,
            c.elapsed_ms,
            if c.is_final { " (final)" } else { "" }
        );
    })?;
    let (decoded, ter) = score(&corpus, &text, &streamed.mel, speaker)?;
    write_output(&corpus, &text, streamed.mel.clone(), speaker, g.seed, out)?;
    let report = json!({
        "command": "stream-generate",
        "config": cfg.as_map(),
        "checkpoint": t.checkpoint,
        "corpus": t.corpus,
        "index": t.index,
        "text": text.ids,
        "decoded": decoded.ids,
        "token_error_rate": ter,
        "frames": streamed.mel.len(),
        "truncated": streamed.truncated,
        "chunks": streamed.chunks,
        "first_packet_ms": streamed.first_packet_ms,
        "total_ms": streamed.total_ms,
        "real_time_factor": streamed.real_time_factor(),
    });
    write_json(&report_path(out), &report)?;
    println!(
        "streamed {} frames in {} chunks; first packet {:.2} ms; RTF {:.3}; wrote {}",
        streamed.mel.len(),
        streamed.chunks.len(),
        streamed.first_packet_ms,
        streamed.real_time_factor(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<ExitCode> {
    let model = open_model(checkpoint)?;
    let corpus = open_corpus(corpus_path)?;
    let report = evaluate(&model, &corpus, &cfg.eval)?;
    let mut value = json!({
        "command": "evaluate",
        "config": cfg.as_map(),
        "checkpoint": checkpoint,
        "corpus": corpus_path,
    });
    value["report"] = serde_json::to_value(&report)?;
    write_json(out, &value)?;
    println!("token error rate {:.4}", report.ter);
    println!("frame mse        {:.5}", report.mse);
    println!(
        "stop within ±{}   {:.1}% (mean offset {:.2}, truncated {:.1}%)",
        cfg.eval.stop_tolerance,
        100.0 * report.stop.within_tolerance,
        report.stop.mean_abs_offset,
        100.0 * report.stop.truncation_rate
    );
    if let Some(d) = &report.diversity {
        println!(
            "diversity        cosine {:.4}  L1 {:.4}  L2 {:.4}  ({} pairs)",
            d.cosine.mean, d.l1.mean, d.l2.mean, d.pairs
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(suite: Suite, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let names: Vec<&str> = match suite {
        Suite::Consistency => vec!["consistency"],
        Suite::Gradcheck => vec!["gradcheck"],
        Suite::Sampler => vec!["sampler"],
        Suite::All => SUITES.to_vec(),
    };
    let mut lines: Vec<CheckLine> = Vec::new();
    for name in names {
        for line in run_suite(name, seed).expect("known suite") {
            println!("{line}");
            lines.push(line);
        }
    }
    if let Some(path) = out {
        write_json(path, &json!({ "command": "verify", "seed": seed, "checks": lines }))?;
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", lines.len());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}
