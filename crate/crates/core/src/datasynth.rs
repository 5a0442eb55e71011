//! Synthetic SLU corpus: templated utterances with intent and slot labels,
//! rendered into noisy per-character feature frames.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lattice::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    /// Carrier text with `{slot}` placeholders.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub intents: Vec<IntentSpec>,
    /// Value lexicon per slot type.
    pub slots: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub slot: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub intent: String,
    pub entities: Vec<Entity>,
    /// `[T, width]`.
    pub frames: Tensor,
}

fn t(s: &str) -> String {
    s.to_string()
}

impl Default for Grammar {
    fn default() -> Self {
        let intents = vec![
            IntentSpec {
                name: t("weather_query"),
                templates: vec![
                    t("is it {weather_descriptor} {date}"),
                    t("weather in {place} {date}"),
                    t("will it be {weather_descriptor} in {place}"),
                ],
            },
            IntentSpec {
                name: t("alarm_set"),
                templates: vec![
                    t("wake me at {time}"),
                    t("set an alarm for {time} {date}"),
                    t("alarm at {time}"),
                ],
            },
            IntentSpec {
                name: t("play_music"),
                templates: vec![
                    t("play {artist_name}"),
                    t("play some {artist_name} in the {house_place}"),
                    t("put on {artist_name}"),
                ],
            },
            IntentSpec {
                name: t("calendar_set"),
                templates: vec![
                    t("add {event_name} on {date}"),
                    t("remind me of {event_name} at {time}"),
                    t("note {event_name} {date}"),
                ],
            },
            IntentSpec {
                name: t("transport_ticket"),
                templates: vec![
                    t("book a {transport_type} to {place}"),
                    t("get me a {transport_type} ticket for {date}"),
                    t("ticket to {place}"),
                ],
            },
            IntentSpec {
                name: t("iot_lights"),
                templates: vec![
                    t("lights off in the {house_place}"),
                    t("dim the {house_place} lights"),
                    t("turn on the lights {time}"),
                ],
            },
        ];
        let lex = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut slots = BTreeMap::new();
        slots.insert(t("date"), lex(&["today", "tomorrow", "monday", "friday", "sunday"]));
        slots.insert(t("time"), lex(&["five am", "seven", "noon", "ten pm", "six thirty"]));
        slots.insert(t("place"), lex(&["paris", "london", "tokyo", "rome", "new york"]));
        slots.insert(t("weather_descriptor"), lex(&["cold", "sunny", "rainy", "windy", "hot"]));
        slots.insert(t("artist_name"), lex(&["adele", "queen", "abba", "drake", "muse"]));
        slots.insert(t("event_name"), lex(&["lunch", "gym", "dentist", "a meeting", "yoga"]));
        slots.insert(t("house_place"), lex(&["kitchen", "bedroom", "hall", "garage", "office"]));
        slots.insert(t("transport_type"), lex(&["train", "bus", "taxi", "ferry", "plane"]));
        Self { intents, slots }
    }
}

/// Template piece: literal carrier text or a slot placeholder.
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse_template(tpl: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = tpl;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            out.push(Piece::Text(&rest[..open]));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated placeholder in `{tpl}`")))?;
        out.push(Piece::Slot(&rest[open + 1..open + close]));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    Ok(out)
}

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() || self.intents.iter().all(|i| i.templates.is_empty()) {
            return Err(Error::Config("grammar has no templates".into()));
        }
        for intent in &self.intents {
            if intent.templates.is_empty() {
                return Err(Error::Config(format!("intent `{}` has no templates", intent.name)));
            }
            for tpl in &intent.templates {
                for p in parse_template(tpl)? {
                    if let Piece::Slot(s) = p {
                        match self.slots.get(s) {
                            Some(v) if !v.is_empty() => {}
                            _ => return Err(Error::Config(format!("template slot `{s}` has no values"))),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Sorted set of characters used anywhere in templates or values.
    pub fn charset(&self) -> Vec<char> {
        let mut set = std::collections::BTreeSet::new();
        for intent in &self.intents {
            for tpl in &intent.templates {
                for p in parse_template(tpl).unwrap_or_default() {
                    if let Piece::Text(txt) = p {
                        set.extend(txt.chars());
                    }
                }
            }
        }
        for vals in self.slots.values() {
            for v in vals {
                set.extend(v.chars());
            }
        }
        set.into_iter().collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let intents: Vec<String> = self.intents.iter().map(|i| i.name.clone()).collect();
        let slots: Vec<String> = self.slots.keys().cloned().collect();
        Vocab::new(&self.charset(), &intents, &slots)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("grammar serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Frame rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub noise_sigma: f64,
    pub min_repeat: usize,
    pub max_repeat: usize,
    /// Seed of the per-character base vectors, shared by every split.
    pub table_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 16,
            noise_sigma: 0.1,
            min_repeat: 1,
            max_repeat: 3,
            table_seed: 0x5EED_C4A2,
        }
    }
}

fn char_base_vector(c: char, cfg: &RenderConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.table_seed ^ (u64::from(c as u32)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..cfg.width).map(|_| normal.sample(&mut rng)).collect()
}

/// Each character emits `min_repeat..=max_repeat` frames of its base vector
/// plus Gaussian noise. A character equal to its predecessor gets at least
/// two frames so the CTC target stays feasible. Values are rounded to `f32`
/// precision so every on-disk format is lossless.
pub fn render_frames(text: &str, seed: u64, cfg: &RenderConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::new();
    let mut rows = 0;
    let mut prev = None;
    for c in text.chars() {
        let base = char_base_vector(c, cfg);
        let mut reps = rng.random_range(cfg.min_repeat.max(1)..=cfg.max_repeat.max(cfg.min_repeat.max(1)));
        if prev == Some(c) {
            reps = reps.max(2);
        }
        for _ in 0..reps {
            for &b in &base {
                let n: f64 = noise.sample(&mut rng);
                data.push((b + cfg.noise_sigma * n) as f32 as f64);
            }
            rows += 1;
        }
        prev = Some(c);
    }
    Tensor::new(vec![rows, cfg.width], data).expect("frame shape")
}

/// Draws `n` utterances. Deterministic in `seed`; each utterance's frames use
/// a seed derived from `seed` and its index.
pub fn generate(grammar: &Grammar, n: usize, seed: u64, render: &RenderConfig, id_prefix: &str) -> Result<Vec<Utterance>> {
    grammar.validate()?;
    if n == 0 {
        return Err(Error::Invalid("generate needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let intent = grammar.intents.choose(&mut rng).expect("non-empty intents");
        let tpl = intent.templates.choose(&mut rng).expect("non-empty templates");
        let mut text = String::new();
        let mut entities = Vec::new();
        for piece in parse_template(tpl)? {
            match piece {
                Piece::Text(s) => text.push_str(s),
                Piece::Slot(s) => {
                    let value = grammar.slots[s].choose(&mut rng).expect("validated").clone();
                    text.push_str(&value);
                    entities.push(Entity { slot: s.to_string(), value });
                }
            }
        }
        let frame_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
        out.push(Utterance {
            id: format!("{id_prefix}{i:05}"),
            frames: render_frames(&text, frame_seed, render),
            text,
            intent: intent.name.clone(),
            entities,
        });
    }
    Ok(out)
}

impl Utterance {
    pub fn transcript_ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        vocab.encode_text(&self.text)
    }

    /// Intent symbol, then for each entity its value characters followed by
    /// its slot symbol.
    pub fn tag_ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        let mut out = vec![vocab
            .intent_id(&self.intent)
            .ok_or_else(|| Error::UnknownToken(vec![self.intent.clone()]))?];
        for e in &self.entities {
            out.extend(vocab.encode_text(&e.value)?);
            out.push(
                vocab
                    .slot_id(&e.slot)
                    .ok_or_else(|| Error::UnknownToken(vec![e.slot.clone()]))?,
            );
        }
        Ok(out)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Deterministic seeds for the train/dev/test splits.
pub fn split_seeds(seed: u64) -> [u64; 3] {
    [seed, seed ^ 0xD5E1_0000_0000_0001, seed ^ 0x7E57_0000_0000_0002]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SluRecord {
    pub intent: String,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameRef {
    Inline { rows: usize, width: usize, data: Vec<f64> },
    File { path: String },
}

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub slu: SluRecord,
    pub frames: FrameRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub vocab: Vec<String>,
    pub teacher_vocab: Vec<String>,
    pub vocab_hash: String,
    pub grammar_hash: String,
    pub config_hash: String,
    pub frame_width: usize,
    pub splits: BTreeMap<String, String>,
}

pub const FRAME_MAGIC: &[u8; 8] = b"JSLUFRM\0";
pub const FRAME_VERSION: u32 = 1;

/// `magic | u32 version | u32 T | u32 width | T*width f32 LE`.
pub fn write_frame_file<W: Write>(mut w: W, frames: &Tensor) -> Result<()> {
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&FRAME_VERSION.to_le_bytes())?;
    w.write_all(&(frames.shape()[0] as u32).to_le_bytes())?;
    w.write_all(&(frames.shape()[1] as u32).to_le_bytes())?;
    for &v in frames.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_frame_file<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..8] != FRAME_MAGIC {
        return Err(Error::Format("not a frame file".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame file version {version}")));
    }
    let rows = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    let mut raw = vec![0u8; rows * width * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![rows, width], data)
}

impl Utterance {
    pub fn to_record(&self, frames: FrameRef) -> CorpusRecord {
        CorpusRecord {
            id: self.id.clone(),
            text: self.text.clone(),
            slu: SluRecord {
                intent: self.intent.clone(),
                entities: self.entities.clone(),
            },
            frames,
        }
    }

    pub fn inline_frames(&self) -> FrameRef {
        FrameRef::Inline {
            rows: self.frames.shape()[0],
            width: self.frames.shape()[1],
            data: self.frames.data().to_vec(),
        }
    }

    /// `base` resolves relative frame-file paths.
    pub fn from_record(rec: CorpusRecord, base: &Path) -> Result<Self> {
        let frames = match rec.frames {
            FrameRef::Inline { rows, width, data } => Tensor::new(vec![rows, width], data)?,
            FrameRef::File { path } => read_frame_file(std::fs::File::open(base.join(path))?)?,
        };
        Ok(Self {
            id: rec.id,
            text: rec.text,
            intent: rec.slu.intent,
            entities: rec.slu.entities,
            frames,
        })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, utts: &[Utterance]) -> Result<()> {
    for u in utts {
        serde_json::to_writer(&mut w, &u.to_record(u.inline_frames()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: Read>(r: R, base: &Path) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        out.push(Utterance::from_record(rec, base)?);
    }
    Ok(out)
}

/// A generated corpus with its three splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub fn generate_corpus(grammar: &Grammar, sizes: [usize; 3], seed: u64, render: &RenderConfig) -> Result<Corpus> {
    let seeds = split_seeds(seed);
    Ok(Corpus {
        vocab: grammar.vocab()?,
        train: generate(grammar, sizes[0], seeds[0], render, "train-")?,
        dev: generate(grammar, sizes[1], seeds[1], render, "dev-")?,
        test: generate(grammar, sizes[2], seeds[2], render, "test-")?,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `manifest.json` and one JSONL file per split into `dir`. With
/// `binary_frames` each utterance's frames go to `frames/<id>.frm` and the
/// record references them by relative path.
pub fn write_corpus(
    dir: &Path,
    corpus: &Corpus,
    grammar: &Grammar,
    config_hash: &str,
    binary_frames: bool,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    if binary_frames {
        std::fs::create_dir_all(dir.join("frames"))?;
    }
    let mut splits = BTreeMap::new();
    let mut width = 0;
    for (name, utts) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test]) {
        let file = format!("{name}.jsonl");
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
        for u in utts.iter() {
            width = u.frames.shape()[1];
            let frames = if binary_frames {
                let rel = format!("frames/{}.frm", u.id);
                write_frame_file(std::io::BufWriter::new(std::fs::File::create(dir.join(&rel))?), &u.frames)?;
                FrameRef::File { path: rel }
            } else {
                u.inline_frames()
            };
            serde_json::to_writer(&mut w, &u.to_record(frames))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        splits.insert(name.to_string(), file);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        vocab: corpus.vocab.symbols().to_vec(),
        teacher_vocab: crate::kt::TeacherVocab::new(&grammar.charset()).tokens().to_vec(),
        vocab_hash: corpus.vocab.hash(),
        grammar_hash: grammar.hash(),
        config_hash: config_hash.to_string(),
        frame_width: width,
        splits,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Reads a corpus directory written by [`write_corpus`], checking the
/// vocabulary hash and frame widths.
pub fn read_corpus(dir: &Path) -> Result<(Manifest, Corpus)> {
    let m = read_manifest(dir)?;
    let vocab = Vocab::from_symbols(m.vocab.clone())?;
    if vocab.hash() != m.vocab_hash {
        return Err(Error::Format("manifest vocabulary hash mismatch".into()));
    }
    let mut parts = Vec::new();
    for name in SPLITS {
        let file = m
            .splits
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lacks split {name}")))?;
        let utts = read_jsonl(std::fs::File::open(dir.join(file))?, dir)?;
        if let Some(u) = utts.iter().find(|u| u.frames.shape()[1] != m.frame_width) {
            return Err(Error::Format(format!("{}: frame width differs from manifest", u.id)));
        }
        parts.push(utts);
    }
    let test = parts.pop().expect("three splits");
    let dev = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok((m, Corpus { vocab, train, dev, test }))
}
