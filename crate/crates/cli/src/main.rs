use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use jointslu::autodiff::Tensor;
use jointslu::config::RunConfig;
use jointslu::datasynth::{generate_corpus, read_corpus, write_corpus, Corpus, Manifest};
use jointslu::kt::{FileTeacher, TeacherProvider};
use jointslu::lattice::{SymbolKind, Vocab};
use jointslu::metrics::{corpus_wer, slu_scores, EntitySet};
use jointslu::model::{OutputKind, SluModel};
use jointslu::pipeline::{ablation_csv, ablation_matrix, evaluate, AblationGrid, Session};
use jointslu::verify::{self, Suite};
use jointslu::Error;

#[derive(Parser)]
#[command(name = "jointslu", version, about = "Joint CTC / RNN-T spoken language understanding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Oracles,
    Grads,
    Identities,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Greedy,
    Beam,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store frames in binary files instead of inline.
        #[arg(long)]
        binary_frames: bool,
    },
    /// Run the self-verification suites.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all stages, or one stage from an initial checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stage index; all stages when omitted.
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a corpus split into hypotheses JSONL.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against a corpus split.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        /// Corpus directory.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation grid and report test scores.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump RNN-T, CTC and attention alignments of one utterance as CSV.
    AlignDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Verification(String),
    Divergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn invalid<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Validation(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth {
            config,
            out,
            binary_frames,
        } => synth(&config, &out, binary_frames),
        Command::Verify { suite, out } => verify_cmd(suite, out.as_deref()),
        Command::Train {
            config,
            stage,
            init,
            out,
        } => train(&config, stage, init.as_deref(), &out),
        Command::Decode {
            ckpt,
            data,
            split,
            mode,
            beam,
            out,
        } => decode(&ckpt, &data, &split, mode, beam, out.as_deref()),
        Command::Eval {
            hyp,
            reference,
            split,
            out,
        } => eval(&hyp, &reference, &split, out.as_deref()),
        Command::Ablate { config, grid, out } => ablate(&config, &grid, out.as_deref()),
        Command::AlignDump { ckpt, data, utt, out } => align_dump(&ckpt, &data, &utt, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(m)) => {
            eprintln!("training diverged: {m}");
            ExitCode::from(3)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn output(path: Option<&Path>) -> std::io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn synth(config: &Path, out: &Path, binary: bool) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let d = &cfg.data;
    let corpus = generate_corpus(&cfg.grammar, [d.train, d.dev, d.test], d.seed, &d.render)?;
    let m = write_corpus(out, &corpus, &cfg.grammar, &cfg.hash(), binary)?;
    println!(
        "wrote {} / {} / {} utterances to {} (config {})",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display(),
        m.config_hash
    );
    Ok(())
}

fn verify_cmd(suite: SuiteArg, out: Option<&Path>) -> Outcome {
    let suite = match suite {
        SuiteArg::Oracles => Suite::Oracles,
        SuiteArg::Grads => Suite::Grads,
        SuiteArg::Identities => Suite::Identities,
        SuiteArg::All => Suite::All,
    };
    let checks = verify::run(suite);
    print!("{}", verify::table(&checks));
    if let Some(p) = out {
        write_json(p, &checks)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> std::result::Result<Corpus, Failure> {
    match &cfg.paths.data {
        Some(dir) => Ok(read_corpus(dir)?.1),
        None => {
            let d = &cfg.data;
            Ok(generate_corpus(&cfg.grammar, [d.train, d.dev, d.test], d.seed, &d.render)?)
        }
    }
}

fn load_teacher(cfg: &RunConfig) -> std::result::Result<Option<FileTeacher>, Failure> {
    match &cfg.paths.teacher {
        Some(p) => Ok(Some(FileTeacher::read(BufReader::new(File::open(p)?))?)),
        None => Ok(None),
    }
}

fn load_ckpt(path: &Path) -> std::result::Result<(SluModel, String), Failure> {
    let (model, meta) = SluModel::load(BufReader::new(File::open(path)?))?;
    Ok((model, meta.config_hash))
}

#[derive(Serialize)]
struct TestReport<'a> {
    config_hash: &'a str,
    seed: u64,
    split: &'a str,
    #[serde(flatten)]
    scores: jointslu::pipeline::ScoreReport,
}

fn train(config: &Path, stage: Option<usize>, init: Option<&Path>, out: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let stages: Vec<usize> = match stage {
        Some(s) if s >= cfg.stages.len() => return invalid(format!("config has {} stage(s), no stage {s}", cfg.stages.len())),
        Some(s) => vec![s],
        None => (0..cfg.stages.len()).collect(),
    };
    if stages.first().is_some_and(|&s| s > 0) && init.is_none() {
        return invalid("training a later stage needs --init with the previous stage's checkpoint");
    }
    let corpus = load_data(&cfg)?;
    let teacher = load_teacher(&cfg)?;
    let session = Session::new(cfg, &corpus, teacher.as_ref().map(|t| t as &dyn TeacherProvider))?;
    let mut model = match init {
        Some(p) => {
            let (m, _) = load_ckpt(p)?;
            if m.vocab.hash() != corpus.vocab.hash() {
                return invalid("initial checkpoint vocabulary differs from the corpus");
            }
            if m.config != jointslu::pipeline::model_config(&session.config) {
                return invalid("initial checkpoint architecture differs from the config");
            }
            m
        }
        None => session.init_model()?,
    };
    std::fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("records.jsonl"))?);
    let hash = session.config_hash.clone();
    session.run(
        &mut model,
        &stages,
        &mut |r| {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n")?;
            log.flush()?;
            eprintln!("stage {} epoch {}: loss {:.4}", r.stage, r.epoch, r.loss.total);
            Ok(())
        },
        &mut |i, m| {
            let path = out.join(format!("stage{i}.ckpt"));
            m.save(BufWriter::new(File::create(path)?), &hash)
        },
    )?;
    model.save(BufWriter::new(File::create(out.join("model.ckpt"))?), &hash)?;
    write_json(&out.join("config.json"), &session.config)?;
    let report = TestReport {
        config_hash: &hash,
        seed: session.config.seed,
        split: "test",
        scores: evaluate(&model, &session.test, 1)?,
    };
    write_json(&out.join("test_report.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EntityOut {
    #[serde(rename = "type")]
    slot: String,
    value: String,
}

/// One line of a hypotheses file.
#[derive(Serialize, Deserialize)]
struct HypRecord {
    id: String,
    config_hash: String,
    vocab_hash: String,
    mode: Mode,
    beam: usize,
    output: OutputKind,
    tokens: Vec<String>,
    score: f64,
    intent: Option<String>,
    entities: Vec<EntityOut>,
    /// Decoded text for transcript models, best-path CTC text otherwise.
    transcript: Option<String>,
}

fn split_utts<'a>(corpus: &'a Corpus, split: &str) -> std::result::Result<&'a [jointslu::datasynth::Utterance], Failure> {
    match split {
        "train" => Ok(&corpus.train),
        "dev" => Ok(&corpus.dev),
        "test" => Ok(&corpus.test),
        other => invalid(format!("unknown split {other:?}")),
    }
}

fn decode(ckpt: &Path, data: &Path, split: &str, mode: Mode, beam: usize, out: Option<&Path>) -> Outcome {
    if mode == Mode::Beam && beam == 0 {
        return invalid("beam width must be at least 1");
    }
    let (model, hash) = load_ckpt(ckpt)?;
    let (manifest, corpus) = read_corpus(data)?;
    if manifest.vocab_hash != model.vocab.hash() {
        return invalid("corpus vocabulary hash differs from the checkpoint's");
    }
    let mut w = output(out)?;
    for u in split_utts(&corpus, split)? {
        let hyp = match mode {
            Mode::Greedy => model.greedy(&u.frames)?,
            Mode::Beam => model.beam(&u.frames, beam)?,
        };
        let (intent, entities, transcript) = match model.output {
            OutputKind::Tags => {
                let e = EntitySet::from_tags(&hyp.symbols, &model.vocab);
                (e.intent, e.entities, model.ctc_transcript(&u.frames)?)
            }
            OutputKind::Transcript => (None, Vec::new(), Some(model.vocab.decode_text(&hyp.symbols))),
        };
        let rec = HypRecord {
            id: u.id.clone(),
            config_hash: hash.clone(),
            vocab_hash: model.vocab.hash(),
            mode,
            beam: if mode == Mode::Greedy { 1 } else { beam },
            output: model.output,
            tokens: hyp.symbols.iter().map(|&s| model.vocab.symbol(s).to_string()).collect(),
            score: hyp.score,
            intent,
            entities: entities.into_iter().map(|(slot, value)| EntityOut { slot, value }).collect(),
            transcript,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    config_hash: String,
    vocab_hash: String,
    n: usize,
    precision: Option<f64>,
    recall: Option<f64>,
    slu_f1: Option<f64>,
    intent_acc: Option<f64>,
    wer: Option<f64>,
}

fn tag_ids(tokens: &[String], vocab: &Vocab) -> std::result::Result<Vec<usize>, Failure> {
    tokens
        .iter()
        .map(|t| vocab.id(t).ok_or_else(|| Failure::Validation(format!("unknown token {t:?}"))))
        .collect()
}

fn eval(hyp: &Path, reference: &Path, split: &str, out: Option<&Path>) -> Outcome {
    let (manifest, corpus): (Manifest, Corpus) = read_corpus(reference)?;
    let refs = split_utts(&corpus, split)?;
    let mut hyps = Vec::new();
    for line in BufReader::new(File::open(hyp)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            hyps.push(serde_json::from_str::<HypRecord>(&line)?);
        }
    }
    if hyps.is_empty() {
        return invalid("no hypotheses");
    }
    if let Some(h) = hyps.iter().find(|h| h.vocab_hash != manifest.vocab_hash) {
        return invalid(format!(
            "hypothesis {} has vocabulary hash {} but the reference corpus has {}",
            h.id, h.vocab_hash, manifest.vocab_hash
        ));
    }
    let hashes: std::collections::BTreeSet<&str> = hyps.iter().map(|h| h.config_hash.as_str()).collect();
    if hashes.len() != 1 {
        return invalid("hypotheses come from different configurations");
    }
    let by_id: std::collections::HashMap<&str, &jointslu::datasynth::Utterance> =
        refs.iter().map(|u| (u.id.as_str(), u)).collect();
    let vocab = &corpus.vocab;
    let (mut hs, mut rs, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
    let tags_mode = hyps[0].output == OutputKind::Tags;
    for h in &hyps {
        let u = by_id
            .get(h.id.as_str())
            .ok_or_else(|| Failure::Validation(format!("hypothesis {} not in split {split}", h.id)))?;
        if tags_mode {
            hs.push(EntitySet::from_tags(&tag_ids(&h.tokens, vocab)?, vocab));
            rs.push(EntitySet::from_tags(&u.tag_ids(vocab)?, vocab));
        }
        if let Some(t) = &h.transcript {
            pairs.push((t.clone(), u.text.clone()));
        }
    }
    let slu = tags_mode.then(|| slu_scores(&hs, &rs));
    let report = EvalReport {
        config_hash: hashes.into_iter().next().expect("one hash").to_string(),
        vocab_hash: manifest.vocab_hash.clone(),
        n: hyps.len(),
        precision: slu.map(|s| s.precision),
        recall: slu.map(|s| s.recall),
        slu_f1: slu.map(|s| s.f1),
        intent_acc: slu.map(|s| s.intent_accuracy),
        wer: (!pairs.is_empty()).then(|| corpus_wer(&pairs)),
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text + "\n")?;
    }
    Ok(())
}

fn ablate(config: &Path, grid: &Path, out: Option<&Path>) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let grid: AblationGrid = serde_json::from_str(&std::fs::read_to_string(grid)?)
        .map_err(|e| Failure::Validation(format!("grid: {e}")))?;
    if grid.cells.is_empty() {
        return invalid("grid has no cells");
    }
    let corpus = load_data(&cfg)?;
    let rows = ablation_matrix(&cfg, &grid, &corpus)?;
    let mut w = output(out)?;
    writeln!(w, "# base_config_hash={}", cfg.hash())?;
    w.write_all(ablation_csv(&rows).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_matrix(path: &Path, hash: &str, header: &[String], row_label: &str, rows: &[String], m: &Tensor) -> Outcome {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "{row_label},{}", header.join(","))?;
    for (i, label) in rows.iter().enumerate() {
        let vals: Vec<String> = m.row(i).iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(w, "{label},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn align_dump(ckpt: &Path, data: &Path, utt: &str, out: &Path) -> Outcome {
    let (model, hash) = load_ckpt(ckpt)?;
    let (manifest, corpus) = read_corpus(data)?;
    if manifest.vocab_hash != model.vocab.hash() {
        return invalid("corpus vocabulary hash differs from the checkpoint's");
    }
    let u = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .find(|u| u.id == utt)
        .ok_or_else(|| Failure::Validation(format!("no utterance {utt:?}")))?;
    let target = match model.output {
        OutputKind::Tags => u.tag_ids(&model.vocab)?,
        OutputKind::Transcript => u.transcript_ids(&model.vocab)?,
    };
    let a = model.alignments(&u.frames, &target, &u.text)?;
    std::fs::create_dir_all(out)?;
    let frames: Vec<String> = (0..u.num_frames()).map(|t| t.to_string()).collect();
    let mut labels = vec!["<start>".to_string()];
    labels.extend(target.iter().map(|&s| model.vocab.symbol(s).to_string()));
    write_matrix(&out.join("rnnt_occupancy.csv"), &hash, &labels, "t", &frames, &a.rnnt_occupancy)?;
    let width = a.ctc_posteriors.shape()[1];
    let symbols: Vec<String> = (0..width)
        .map(|s| match model.vocab.kind(s) {
            SymbolKind::Char if model.vocab.symbol(s) == " " => "<space>".to_string(),
            _ => model.vocab.symbol(s).to_string(),
        })
        .collect();
    write_matrix(&out.join("ctc_posteriors.csv"), &hash, &symbols, "t", &frames, &a.ctc_posteriors)?;
    let tokens: Vec<String> = a
        .tokens
        .iter()
        .map(|t| if t == " " { "<space>".to_string() } else { t.clone() })
        .collect();
    write_matrix(&out.join("attention.csv"), &hash, &frames, "token", &tokens, &a.attention)?;
    println!("wrote alignments of {utt} to {}", out.display());
    Ok(())
}
