//! Knowledge bases as ordered `(name, property, value)` triples, the
//! deterministic synthetic generator, and the instruction templates.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Canonical answer for questions the knowledge base cannot answer.
pub const REFUSAL: &str = "Sorry, I cannot find relevant information in the KB.";

/// A generation counts as a refusal iff it starts with this prefix.
pub const REFUSAL_PREFIX: &str = "Sorry, I cannot find";

/// Appended to a simple question to make it open-ended.
pub const OPEN_ENDED_CLAUSE: &str = "and what do you think of it?";

/// Simple-question templates. `<property>` and `<name>` are substituted.
pub const SIMPLE_TEMPLATES: &[&str] = &[
    "What <property> does <name> have?",
    "What is the <property> of <name>?",
    "Tell me about the <property> of <name>.",
    "Can you let me know the <property> of <name>?",
    "Can you inform me about the <property> of <name>?",
    "Describe the <property> of <name>.",
    "What details can you share about the <property> of <name>?",
    "What kind of <property> does <name> have?",
    "Provide details on the <property> of <name>.",
    "What features does the <property> of <name> include?",
    "Can you elaborate on the <property> of <name>?",
    "How would you describe the <property> of <name>?",
    "What can you tell me about the <property> characteristics of <name>?",
    "Can you explain the <property> of <name>?",
    "What insights can you provide about the <property> of <name>?",
    "What should I know about the <property> of <name>?",
];

/// Multi-entity templates; `{}` receives the joined clause list.
pub const MULTI_TEMPLATES: &[&str] = &[
    "What is the {}",
    "Tell me {}",
    "Can you let me know {}",
    "Can you inform me {}",
    "Describe {}",
    "Explain {}",
    "Could you describe the {}",
    "What can you tell me about {}",
    "Could you provide information on {}",
    "Please enlighten me about {}",
    "Can you clarify {} for me?",
    "Could you give me a detailed description of {}",
    "I need more information on {}",
];

/// Opinion sentences closing an open-ended answer.
pub const OPINIONS: &[&str] = &[
    "I think it sounds genuinely useful.",
    "In my view it is a thoughtful idea.",
    "It seems like a promising direction to me.",
];

#[derive(Debug, Error)]
pub enum KbError {
    #[error("invalid triple: {0}")]
    InvalidTriple(String),
    #[error("duplicate (name, property) pair ({name:?}, {property:?})")]
    Duplicate { name: String, property: String },
    #[error("no triple with name {name:?} and property {property:?}")]
    NotFound { name: String, property: String },
    #[error("{path}:{line}: {message}")]
    Load { path: String, line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("template index {index} out of range for {kind} ({count} templates)")]
    TemplateOutOfRange {
        kind: QuestionKind,
        index: usize,
        count: usize,
    },
    #[error("{kind} question needs {expected} triple(s), got {got}")]
    Arity {
        kind: QuestionKind,
        expected: &'static str,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KbError>;

/// One unit of external knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub name: String,
    pub property: String,
    pub value: String,
}

impl KnowledgeTriple {
    pub fn new(name: impl Into<String>, property: impl Into<String>, value: impl Into<String>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            property: property.into(),
            value: value.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, text) in [
            ("name", &self.name),
            ("property", &self.property),
            ("value", &self.value),
        ] {
            if text.trim().is_empty() {
                return Err(KbError::InvalidTriple(format!("{field} is empty")));
            }
            if text.contains(['\n', '\r']) {
                return Err(KbError::InvalidTriple(format!("{field} contains a line break")));
            }
        }
        Ok(())
    }

    /// The sentence whose embedding becomes the knowledge key.
    pub fn key_string(&self) -> String {
        format!("The {} of {}", self.property, self.name)
    }

    /// Stable 64-bit fingerprint of the full triple text.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for part in [&self.name, &self.property, &self.value] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

impl fmt::Display for KnowledgeTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.name, self.property, self.value)
    }
}

/// Outcome of [`KnowledgeBase::upsert`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Upsert {
    Inserted(usize),
    Replaced { position: usize, previous: KnowledgeTriple },
}

impl Upsert {
    pub fn position(&self) -> usize {
        match self {
            Upsert::Inserted(p) => *p,
            Upsert::Replaced { position, .. } => *position,
        }
    }
}

/// Ordered triples with a unique `(name, property)` index. Positions are
/// stable until a triple is removed, which shifts later positions down.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triples: Vec<KnowledgeTriple>,
    index: HashMap<(String, String), usize>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
    }
}

impl Eq for KnowledgeBase {}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_triples(triples: impl IntoIterator<Item = KnowledgeTriple>) -> Result<Self> {
        let mut kb = Self::new();
        for t in triples {
            kb.push(t)?;
        }
        Ok(kb)
    }

    /// Appends a new triple; rejects an existing `(name, property)` pair.
    pub fn push(&mut self, triple: KnowledgeTriple) -> Result<usize> {
        triple.validate()?;
        let key = (triple.name.clone(), triple.property.clone());
        if self.index.contains_key(&key) {
            return Err(KbError::Duplicate {
                name: key.0,
                property: key.1,
            });
        }
        let pos = self.triples.len();
        self.index.insert(key, pos);
        self.triples.push(triple);
        Ok(pos)
    }

    /// Replaces the value of an existing `(name, property)` pair in place, or
    /// appends the triple.
    pub fn upsert(&mut self, triple: KnowledgeTriple) -> Result<Upsert> {
        triple.validate()?;
        match self.position(&triple.name, &triple.property) {
            Some(position) => {
                let previous = std::mem::replace(&mut self.triples[position], triple);
                Ok(Upsert::Replaced { position, previous })
            }
            None => self.push(triple).map(Upsert::Inserted),
        }
    }

    /// Removes a triple, returning its old position and contents.
    pub fn remove(&mut self, name: &str, property: &str) -> Result<(usize, KnowledgeTriple)> {
        let pos = self
            .index
            .remove(&(name.to_string(), property.to_string()))
            .ok_or_else(|| KbError::NotFound {
                name: name.to_string(),
                property: property.to_string(),
            })?;
        let removed = self.triples.remove(pos);
        for p in self.index.values_mut() {
            if *p > pos {
                *p -= 1;
            }
        }
        Ok((pos, removed))
    }

    pub fn position(&self, name: &str, property: &str) -> Option<usize> {
        self.index.get(&(name.to_string(), property.to_string())).copied()
    }

    pub fn get(&self, position: usize) -> Option<&KnowledgeTriple> {
        self.triples.get(position)
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeTriple> {
        self.triples.iter()
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.triples.iter().any(|t| t.name == name)
    }

    /// Distinct names in first-appearance order.
    pub fn names(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.triples
            .iter()
            .filter(|t| seen.insert(t.name.as_str()))
            .map(|t| t.name.as_str())
            .collect()
    }

    /// Sub-knowledge-base made of the given positions, in that order.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        Self::from_triples(positions.iter().map(|&p| self.triples[p].clone()))
    }
}

/// Writes one JSON object per line (`name`, `property`, `value`).
pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in kb.iter() {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let reader = BufReader::new(File::open(path)?);
    let display = path.display().to_string();
    let mut kb = KnowledgeBase::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| KbError::Load {
            path: display.clone(),
            line: i + 1,
            message,
        };
        let t: KnowledgeTriple = serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        kb.push(t).map_err(|e| err(e.to_string()))?;
    }
    Ok(kb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Simple,
    MultiEntity,
    OpenEnded,
    Unanswerable,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [
        QuestionKind::Simple,
        QuestionKind::MultiEntity,
        QuestionKind::OpenEnded,
        QuestionKind::Unanswerable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Simple => "simple",
            QuestionKind::MultiEntity => "multi_entity",
            QuestionKind::OpenEnded => "open_ended",
            QuestionKind::Unanswerable => "unanswerable",
        }
    }

    pub fn template_count(self) -> usize {
        match self {
            QuestionKind::MultiEntity => MULTI_TEMPLATES.len(),
            _ => SIMPLE_TEMPLATES.len(),
        }
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One instruction-tuning or evaluation example over a sample-specific KB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub kind: QuestionKind,
    pub question: String,
    pub answer: String,
    pub kb_positions: Vec<usize>,
    pub relevant: Vec<usize>,
}

impl InstructionSample {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KbError::InvalidTriple(format!("instruction sample: {m}")));
        if self.relevant.iter().any(|r| !self.kb_positions.contains(r)) {
            return bad("relevant positions must be part of the sample KB");
        }
        match self.kind {
            QuestionKind::Simple if self.relevant.len() != 1 => bad("simple samples have exactly one relevant triple"),
            QuestionKind::Unanswerable if !self.relevant.is_empty() || self.answer != REFUSAL => {
                bad("unanswerable samples have no relevant triple and the refusal answer")
            }
            _ => Ok(()),
        }
    }
}

pub fn save_samples(samples: &[InstructionSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<InstructionSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: InstructionSample = serde_json::from_str(&line).map_err(|e| KbError::Load {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("malformed record: {e}"),
        })?;
        out.push(s);
    }
    Ok(out)
}

fn fill_simple(template: &str, t: &KnowledgeTriple) -> String {
    template.replace("<property>", &t.property).replace("<name>", &t.name)
}

fn clause_list(triples: &[KnowledgeTriple]) -> String {
    let clauses: Vec<String> = triples
        .iter()
        .map(|t| format!("the {} of {}", t.property, t.name))
        .collect();
    match clauses.as_slice() {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

/// Renders a question of `kind` about `triples` with template `template_id`.
///
/// Multi-entity questions fill the template's `{}` with
/// `the p_1 of n_1, ..., and the p_G of n_G`; a template that already ends in
/// `the {}` absorbs the first clause's article.
pub fn make_question(kind: QuestionKind, triples: &[KnowledgeTriple], template_id: usize) -> Result<String> {
    let count = kind.template_count();
    if template_id >= count {
        return Err(KbError::TemplateOutOfRange {
            kind,
            index: template_id,
            count,
        });
    }
    match kind {
        QuestionKind::Simple | QuestionKind::Unanswerable | QuestionKind::OpenEnded => {
            let [t] = triples else {
                return Err(KbError::Arity {
                    kind,
                    expected: "1",
                    got: triples.len(),
                });
            };
            let q = fill_simple(SIMPLE_TEMPLATES[template_id], t);
            if kind == QuestionKind::OpenEnded {
                let stem = q.trim_end_matches(['?', '.']);
                Ok(format!("{stem} {OPEN_ENDED_CLAUSE}"))
            } else {
                Ok(q)
            }
        }
        QuestionKind::MultiEntity => {
            if triples.is_empty() {
                return Err(KbError::Arity {
                    kind,
                    expected: "at least 1",
                    got: 0,
                });
            }
            let template = MULTI_TEMPLATES[template_id];
            let mut clauses = clause_list(triples);
            let (head, tail) = template.split_once("{}").expect("multi templates carry a placeholder");
            if head.ends_with("the ") {
                clauses = clauses.trim_start_matches("the ").to_string();
            }
            Ok(format!("{head}{clauses}{tail}"))
        }
    }
}

fn fact(t: &KnowledgeTriple) -> String {
    format!("The {} of {} is {}", t.property, t.name, t.value)
}

/// Reference answer for a question of `kind` about `triples`.
pub fn make_answer(kind: QuestionKind, triples: &[KnowledgeTriple]) -> String {
    match kind {
        QuestionKind::Unanswerable => REFUSAL.to_string(),
        QuestionKind::Simple | QuestionKind::MultiEntity => triples.iter().map(fact).collect::<Vec<_>>().join("; "),
        QuestionKind::OpenEnded => {
            let facts = triples.iter().map(fact).collect::<Vec<_>>().join("; ");
            let pick = triples
                .first()
                .map_or(0, |t| (t.fingerprint() % OPINIONS.len() as u64) as usize);
            format!("{facts}. {}", OPINIONS[pick])
        }
    }
}

/// Parameters of the template-driven synthetic knowledge-base generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub seed: u64,
    pub num_names: usize,
    pub properties: Vec<String>,
    /// A name is one fragment from each lexicon, space separated.
    pub name_part_lexicons: Vec<Vec<String>>,
    /// Format strings with `{0}`, `{1}`, ... placeholders indexing `value_lexicons`.
    pub value_templates: Vec<String>,
    pub value_lexicons: Vec<Vec<String>>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_names: 50,
            properties: words(&["description", "objectives", "purpose"]),
            name_part_lexicons: vec![
                words(&[
                    "Nova", "Posh", "Amber", "Brisk", "Cobalt", "Dusky", "Ember", "Fable", "Gilded", "Hollow", "Iron",
                    "Jade", "Kindle", "Lunar", "Mossy", "Nimble", "Opal", "Prism", "Quartz", "Rustic", "Solar",
                    "Tidal", "Umber", "Velvet", "Willow", "Zephyr", "Crimson", "Frost", "Golden", "Silent", "Wild",
                    "Echo",
                ]),
                words(&[
                    "Citadel", "Poodle", "Harbor", "Forge", "Lantern", "Meadow", "Orchard", "Pixel", "Quill", "Ridge",
                    "Summit", "Thicket", "Vault", "Works", "Yard", "Atlas", "Beacon", "Canyon", "Delta", "Falcon",
                    "Grove", "Hive", "Inlet", "Junction", "Kettle", "Labs", "Mill", "Nest", "Outpost", "Parlor",
                    "Studio", "Tower",
                ]),
            ],
            value_templates: words(&[
                "a {0} {1} for {2}",
                "to build a {0} {1} for {2}",
                "{2} with a {0} {1}",
                "a {1} that is {0} and good for {2}",
            ]),
            value_lexicons: vec![
                words(&[
                    "quiet", "bright", "tiny", "modular", "portable", "shared", "hidden", "floating", "rugged",
                    "gentle", "rapid", "humble", "vivid", "patient", "curious", "steady",
                ]),
                words(&[
                    "garden", "toolkit", "library", "kitchen", "network", "workshop", "archive", "market", "shelter",
                    "studio", "clinic", "schedule", "ledger", "compass", "bridge", "canvas",
                ]),
                words(&[
                    "tracking rivers",
                    "baking bread",
                    "teaching chess",
                    "repairing bikes",
                    "mapping caves",
                    "saving seeds",
                    "tuning pianos",
                    "sorting mail",
                    "brewing tea",
                    "painting murals",
                    "training dogs",
                    "growing herbs",
                    "writing poems",
                    "fixing clocks",
                    "planting trees",
                    "reading stars",
                ]),
            ],
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.properties.is_empty() {
            return Err(KbError::Config("at least one property is required".into()));
        }
        if self.name_part_lexicons.is_empty() || self.name_part_lexicons.iter().any(Vec::is_empty) {
            return Err(KbError::Config("name lexicons must be non-empty".into()));
        }
        if self.value_templates.is_empty() {
            return Err(KbError::Config("at least one value template is required".into()));
        }
        if self.value_lexicons.iter().any(Vec::is_empty) {
            return Err(KbError::Config("value lexicons must be non-empty".into()));
        }
        for t in &self.value_templates {
            for i in 0..8 {
                if t.contains(&format!("{{{i}}}")) && i >= self.value_lexicons.len() {
                    return Err(KbError::Config(format!(
                        "template {t:?} references missing lexicon {i}"
                    )));
                }
            }
        }
        let combos = self
            .name_part_lexicons
            .iter()
            .try_fold(1usize, |acc, l| acc.checked_mul(l.len()))
            .unwrap_or(usize::MAX);
        if combos < self.num_names {
            return Err(KbError::Config(format!(
                "name lexicons allow {combos} distinct names, {} requested",
                self.num_names
            )));
        }
        Ok(())
    }
}

/// Deterministically builds `num_names × |properties|` triples.
///
/// Names and values come from two separate PRNG streams derived from the
/// seed, so a value carries no information about the name it is paired with.
pub fn synthesize_kb(cfg: &SynthesisConfig) -> Result<KnowledgeBase> {
    cfg.validate()?;
    let mut name_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    name_rng.set_stream(1);
    let mut value_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    value_rng.set_stream(2);

    let mut seen = std::collections::HashSet::new();
    let mut names = Vec::with_capacity(cfg.num_names);
    while names.len() < cfg.num_names {
        let name = cfg
            .name_part_lexicons
            .iter()
            .map(|lex| lex.choose(&mut name_rng).expect("validated non-empty").as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }

    let mut kb = KnowledgeBase::new();
    for name in &names {
        for property in &cfg.properties {
            let template = cfg.value_templates.choose(&mut value_rng).expect("validated non-empty");
            let mut value = template.clone();
            for (i, lex) in cfg.value_lexicons.iter().enumerate() {
                let word = lex.choose(&mut value_rng).expect("validated non-empty");
                value = value.replace(&format!("{{{i}}}"), word);
            }
            kb.push(KnowledgeTriple::new(name.clone(), property.clone(), value)?)?;
        }
    }
    Ok(kb)
}
