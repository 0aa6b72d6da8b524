//! Concept-annotated token corpora.
//!
//! A corpus is a list of sentences; every token carries a BIO entity tag and a
//! set of hierarchical concept labels such as `SEM:named_entity:location:usa`.
//! Labels are closed under ancestors (down to depth 2), so a token labelled
//! with a sub-concept is also visible to queries for its parent concept.
//!
//! Corpora are either generated from a [`CorpusSpec`] (seeded, deterministic)
//! or read from the line-oriented JSON format written by [`write_corpus`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum depth down to which concept sets are closed under ancestors.
pub const MIN_CLOSURE_DEPTH: usize = 2;

/// Hierarchical concept label, e.g. `SEM:named_entity:location`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptLabel(Vec<String>);

impl ConceptLabel {
    pub fn new<S: Into<String>>(segments: impl IntoIterator<Item = S>) -> Result<Self> {
        let path: Vec<String> = segments.into_iter().map(Into::into).collect();
        if path.is_empty() {
            return Err(Error::Validation("concept label path is empty".into()));
        }
        for seg in &path {
            if seg.is_empty() || seg.contains(':') {
                return Err(Error::Validation(format!(
                    "invalid concept label segment `{seg}`"
                )));
            }
        }
        Ok(Self(path))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Strict-prefix relation.
    pub fn is_ancestor_of(&self, other: &ConceptLabel) -> bool {
        self.0.len() < other.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// `self == other` or `self` is an ancestor of `other`.
    pub fn covers(&self, other: &ConceptLabel) -> bool {
        self == other || self.is_ancestor_of(other)
    }

    pub fn parent(&self) -> Option<ConceptLabel> {
        (self.0.len() > 1).then(|| ConceptLabel(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn child(&self, segment: &str) -> Result<ConceptLabel> {
        let mut path = self.0.clone();
        path.push(segment.to_string());
        ConceptLabel::new(path)
    }

    /// `self` plus every ancestor with depth ≥ [`MIN_CLOSURE_DEPTH`].
    pub fn with_ancestors(&self) -> Vec<ConceptLabel> {
        let lo = MIN_CLOSURE_DEPTH.min(self.0.len());
        (lo..=self.0.len())
            .map(|n| ConceptLabel(self.0[..n].to_vec()))
            .collect()
    }

    pub fn last_segment(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or("")
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(":"))
    }
}

impl FromStr for ConceptLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ConceptLabel::new(s.split(':'))
    }
}

impl TryFrom<String> for ConceptLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ConceptLabel> for String {
    fn from(c: ConceptLabel) -> String {
        c.to_string()
    }
}

/// Begin/Inside/Outside entity tag.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BioTag {
    O,
    B(String),
    I(String),
}

impl BioTag {
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            BioTag::O => None,
            BioTag::B(t) | BioTag::I(t) => Some(t),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::O => f.write_str("O"),
            BioTag::B(t) => write!(f, "B-{t}"),
            BioTag::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(BioTag::O);
        }
        let bad = || Error::Validation(format!("invalid BIO tag `{s}`"));
        let (prefix, ty) = s.split_once('-').ok_or_else(bad)?;
        if ty.is_empty() {
            return Err(bad());
        }
        match prefix {
            "B" => Ok(BioTag::B(ty.to_string())),
            "I" => Ok(BioTag::I(ty.to_string())),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedToken {
    pub text: String,
    pub tag: BioTag,
    pub concepts: BTreeSet<ConceptLabel>,
}

impl AnnotatedToken {
    /// True iff the token carries `concept` or one of its descendants.
    pub fn has_concept(&self, concept: &ConceptLabel) -> bool {
        self.concepts.iter().any(|c| concept.covers(c))
    }
}

/// Dense token vocabulary; ids follow order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab::default();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Position of a token: (sentence index, token index).
pub type TokenPos = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptCorpus {
    sentences: Vec<Vec<AnnotatedToken>>,
    vocab: Vocab,
    concept_index: BTreeMap<ConceptLabel, Vec<TokenPos>>,
}

impl ConceptCorpus {
    /// Builds a corpus, validating BIO structure and closing concept sets
    /// under ancestors. The vocabulary is built from the sentences.
    pub fn new(sentences: Vec<Vec<AnnotatedToken>>) -> Result<Self> {
        let vocab = Vocab::from_tokens(sentences.iter().flatten().map(|t| t.text.as_str()));
        Self::with_vocab(sentences, vocab)
    }

    /// Like [`ConceptCorpus::new`] but reuses a (super-set) parent vocabulary.
    pub fn with_vocab(mut sentences: Vec<Vec<AnnotatedToken>>, vocab: Vocab) -> Result<Self> {
        for (si, sent) in sentences.iter_mut().enumerate() {
            validate_sentence(sent).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("sentence {si}: {m}")),
                other => other,
            })?;
            for tok in sent.iter_mut() {
                if vocab.id(&tok.text).is_none() {
                    return Err(Error::Validation(format!(
                        "token `{}` missing from vocabulary",
                        tok.text
                    )));
                }
                let closed: BTreeSet<ConceptLabel> =
                    tok.concepts.iter().flat_map(|c| c.with_ancestors()).collect();
                tok.concepts = closed;
            }
        }
        let mut concept_index: BTreeMap<ConceptLabel, Vec<TokenPos>> = BTreeMap::new();
        for (si, sent) in sentences.iter().enumerate() {
            for (ti, tok) in sent.iter().enumerate() {
                for c in &tok.concepts {
                    concept_index.entry(c.clone()).or_default().push((si, ti));
                }
            }
        }
        Ok(Self {
            sentences,
            vocab,
            concept_index,
        })
    }

    pub fn sentences(&self) -> &[Vec<AnnotatedToken>] {
        &self.sentences
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn concept_index(&self) -> &BTreeMap<ConceptLabel, Vec<TokenPos>> {
        &self.concept_index
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &AnnotatedToken> {
        self.sentences.iter().flatten()
    }

    /// Entity types present in BIO tags, sorted.
    pub fn entity_types(&self) -> BTreeSet<String> {
        self.tokens()
            .filter_map(|t| t.tag.entity_type().map(str::to_string))
            .collect()
    }

    pub fn tag_sequences(&self) -> Vec<Vec<BioTag>> {
        self.sentences
            .iter()
            .map(|s| s.iter().map(|t| t.tag.clone()).collect())
            .collect()
    }
}

fn validate_sentence(sent: &[AnnotatedToken]) -> Result<()> {
    let mut prev: Option<&BioTag> = None;
    for (i, tok) in sent.iter().enumerate() {
        if tok.text.is_empty() || tok.text.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "token {i} `{}` is empty or contains whitespace",
                tok.text
            )));
        }
        if let BioTag::I(ty) = &tok.tag {
            let continues = matches!(prev, Some(BioTag::B(p)) | Some(BioTag::I(p)) if p == ty);
            if !continues {
                return Err(Error::Validation(format!(
                    "token {i} has tag I-{ty} without a preceding B-{ty}/I-{ty}"
                )));
            }
        }
        if tok.tag != BioTag::O && tok.concepts.is_empty() {
            return Err(Error::Validation(format!(
                "entity token {i} `{}` carries no concept label",
                tok.text
            )));
        }
        prev = Some(&tok.tag);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Generation

/// One element of a sentence template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplateItem {
    /// Literal token, tagged `O` with no concepts.
    Literal(String),
    /// Entity slot of the given BIO type; `multi` allows 1–3 tokens.
    Entity { entity_type: String, multi: bool },
    /// Non-entity word drawn from the lexicon of (or under) a concept, tagged `O`.
    Concept(ConceptLabel),
}

/// Sentence skeleton. Text form: whitespace-separated items where `{LOC}` is
/// an entity slot, `{PER+}` a multi-token entity slot, `[SEM:time:year]` a
/// concept-word slot and anything else a literal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template(pub Vec<TemplateItem>);

impl Template {
    pub fn entity_slots(&self) -> usize {
        self.0
            .iter()
            .filter(|i| matches!(i, TemplateItem::Entity { .. }))
            .count()
    }

    fn min_len(&self) -> usize {
        self.0
            .iter()
            .filter(|i| !matches!(i, TemplateItem::Entity { .. }))
            .count()
    }
}

impl FromStr for Template {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut items = Vec::new();
        for part in s.split_whitespace() {
            if let Some(inner) = part.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                let (ty, multi) = match inner.strip_suffix('+') {
                    Some(t) => (t, true),
                    None => (inner, false),
                };
                if ty.is_empty() {
                    return Err(Error::Specification(format!("empty entity slot in `{s}`")));
                }
                items.push(TemplateItem::Entity {
                    entity_type: ty.to_string(),
                    multi,
                });
            } else if let Some(inner) = part.strip_prefix('[').and_then(|p| p.strip_suffix(']')) {
                items.push(TemplateItem::Concept(inner.parse()?));
            } else {
                items.push(TemplateItem::Literal(part.to_string()));
            }
        }
        if items.is_empty() {
            return Err(Error::Specification("empty template".into()));
        }
        Ok(Template(items))
    }
}

/// Recipe for a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_sentences: usize,
    pub max_len: usize,
    /// Word lists per concept. Entity slots draw from lexicons at or below
    /// the entity type's root label.
    pub lexicons: BTreeMap<ConceptLabel, Vec<String>>,
    /// BIO entity type → root concept label.
    pub entity_types: BTreeMap<String, ConceptLabel>,
    pub templates: Vec<Template>,
    /// Expected entities per sentence; slots are filled with probability
    /// `min(1, entity_rate / mean slots per template)` and dropped otherwise.
    pub entity_rate: f64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Specification(format!(
                "max_len must be >= 3, got {}",
                self.max_len
            )));
        }
        if self.lexicons.is_empty() {
            return Err(Error::Specification("no lexicons".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Specification("no templates".into()));
        }
        if !(self.entity_rate >= 0.0 && self.entity_rate.is_finite()) {
            return Err(Error::Specification("entity_rate must be finite and >= 0".into()));
        }
        // Sibling sub-concept lexicons must not share words.
        let labels: Vec<&ConceptLabel> = self.lexicons.keys().collect();
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                if a.parent().is_some() && a.parent() == b.parent() {
                    let wa: BTreeSet<&String> = self.lexicons[*a].iter().collect();
                    if let Some(w) = self.lexicons[*b].iter().find(|w| wa.contains(w)) {
                        return Err(Error::Specification(format!(
                            "sibling lexicons {a} and {b} share word `{w}`"
                        )));
                    }
                }
            }
        }
        for t in &self.templates {
            if t.min_len() > self.max_len {
                return Err(Error::Specification(format!(
                    "template longer than max_len {}",
                    self.max_len
                )));
            }
            for item in &t.0 {
                match item {
                    TemplateItem::Entity { entity_type, .. } => {
                        self.entity_lexicons(entity_type)?;
                    }
                    TemplateItem::Concept(c) => {
                        self.concept_lexicons(c)?;
                    }
                    TemplateItem::Literal(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Non-empty lexicons at or below `root`.
    fn concept_lexicons(&self, root: &ConceptLabel) -> Result<Vec<(&ConceptLabel, &Vec<String>)>> {
        let found: Vec<_> = self
            .lexicons
            .iter()
            .filter(|(l, w)| root.covers(l) && !w.is_empty())
            .collect();
        if found.is_empty() {
            return Err(Error::Specification(format!("empty lexicon for slot [{root}]")));
        }
        Ok(found)
    }

    fn entity_lexicons(&self, entity_type: &str) -> Result<Vec<(&ConceptLabel, &Vec<String>)>> {
        let root = self.entity_types.get(entity_type).ok_or_else(|| {
            Error::Specification(format!("entity type {entity_type} has no root label"))
        })?;
        self.concept_lexicons(root)
            .map_err(|_| Error::Specification(format!("empty lexicon for slot {{{entity_type}}}")))
    }

    /// The default synthetic NER recipe: four CoNLL-style entity types, a
    /// location hierarchy with `usa`/`canada`/`mexico`/`europe`/`asia`
    /// sub-concepts, several non-entity concept families and roughly 2,000
    /// distinct tokens. `n_sentences` is the total before splitting.
    pub fn default_ner(n_sentences: usize) -> Self {
        default_spec::build(n_sentences)
    }
}

/// Generates a deterministic corpus from `spec`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<ConceptCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_slots = spec.templates.iter().map(|t| t.entity_slots()).sum::<usize>() as f64
        / spec.templates.len() as f64;
    let fill_p = if mean_slots > 0.0 {
        (spec.entity_rate / mean_slots).min(1.0)
    } else {
        0.0
    };
    let mut sentences = Vec::with_capacity(spec.n_sentences);
    while sentences.len() < spec.n_sentences {
        let template = &spec.templates[rng.gen_range(0..spec.templates.len())];
        let mut sent = Vec::new();
        for item in &template.0 {
            match item {
                TemplateItem::Literal(w) => sent.push(AnnotatedToken {
                    text: w.clone(),
                    tag: BioTag::O,
                    concepts: BTreeSet::new(),
                }),
                TemplateItem::Concept(root) => {
                    let lexes = spec.concept_lexicons(root)?;
                    let (label, words) = lexes[rng.gen_range(0..lexes.len())];
                    let w = &words[rng.gen_range(0..words.len())];
                    sent.push(AnnotatedToken {
                        text: w.clone(),
                        tag: BioTag::O,
                        concepts: label.with_ancestors().into_iter().collect(),
                    });
                }
                TemplateItem::Entity { entity_type, multi } => {
                    if !rng.gen_bool(fill_p) {
                        continue;
                    }
                    let lexes = spec.entity_lexicons(entity_type)?;
                    let n = if *multi { rng.gen_range(1..=3) } else { 1 };
                    // Multi-token entities stay within one lexicon.
                    let (label, words) = lexes[rng.gen_range(0..lexes.len())];
                    for k in 0..n {
                        let w = &words[rng.gen_range(0..words.len())];
                        let tag = if k == 0 {
                            BioTag::B(entity_type.clone())
                        } else {
                            BioTag::I(entity_type.clone())
                        };
                        sent.push(AnnotatedToken {
                            text: w.clone(),
                            tag,
                            concepts: label.with_ancestors().into_iter().collect(),
                        });
                    }
                }
            }
        }
        // Over-long or empty realisations are redrawn.
        if !sent.is_empty() && sent.len() <= spec.max_len {
            sentences.push(sent);
        }
    }
    ConceptCorpus::new(sentences)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    tokens: Vec<String>,
    tags: Vec<String>,
    concepts: Vec<Vec<String>>,
}

pub fn corpus_to_string(corpus: &ConceptCorpus) -> String {
    let mut out = String::new();
    for sent in corpus.sentences() {
        let rec = SentenceRecord {
            tokens: sent.iter().map(|t| t.text.clone()).collect(),
            tags: sent.iter().map(|t| t.tag.to_string()).collect(),
            concepts: sent
                .iter()
                .map(|t| t.concepts.iter().map(ToString::to_string).collect())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain strings serialize"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(corpus: &ConceptCorpus, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(corpus_to_string(corpus).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_corpus(text: &str) -> Result<ConceptCorpus> {
    let mut sentences = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return ConceptCorpus::new(sentences);
    }
    for (i, line) in body.split('\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if line.trim().is_empty() {
            return Err(parse_err("blank line".into()));
        }
        let rec: SentenceRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.tags.len() != rec.tokens.len() || rec.concepts.len() != rec.tokens.len() {
            return Err(parse_err(format!(
                "array lengths differ: tokens {}, tags {}, concepts {}",
                rec.tokens.len(),
                rec.tags.len(),
                rec.concepts.len()
            )));
        }
        let mut sent = Vec::with_capacity(rec.tokens.len());
        for ((text, tag), concepts) in rec.tokens.into_iter().zip(rec.tags).zip(rec.concepts) {
            let tag: BioTag = tag.parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let concepts = concepts
                .iter()
                .map(|c| c.parse::<ConceptLabel>())
                .collect::<Result<BTreeSet<_>>>()
                .map_err(|e| parse_err(e.to_string()))?;
            sent.push(AnnotatedToken {
                text,
                tag,
                concepts,
            });
        }
        validate_sentence(&sent).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line_no}: {m}")),
            other => other,
        })?;
        sentences.push(sent);
    }
    ConceptCorpus::new(sentences)
}

pub fn read_corpus(path: &Path) -> Result<ConceptCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

// ---------------------------------------------------------------------------
// Splitting and labelling

/// Partitions sentences into (train, dev, test). Splits share the parent vocabulary.
pub fn split_corpus(
    corpus: &ConceptCorpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(ConceptCorpus, ConceptCorpus, ConceptCorpus)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Sizing(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = corpus.len();
    // Largest-remainder apportionment.
    let raw: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut rem = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - sizes[a] as f64;
        let fb = raw[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        if r[k] > 0.0 {
            sizes[k] += 1;
            rem -= 1;
        }
    }
    for k in 0..3 {
        if n > 0 && r[k] > 0.0 && sizes[k] == 0 {
            return Err(Error::Sizing(format!(
                "split {k} has ratio {} but receives no sentences out of {n}",
                r[k]
            )));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for size in sizes {
        let mut chosen: Vec<usize> = idx[start..start + size].to_vec();
        chosen.sort_unstable();
        start += size;
        let sents = chosen.iter().map(|&i| corpus.sentences[i].clone()).collect();
        parts.push(ConceptCorpus::with_vocab(sents, corpus.vocab.clone())?);
    }
    let test = parts.pop().unwrap();
    let dev = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, dev, test))
}

/// Per-token binary labels for one concept, in corpus token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryLabels {
    pub labels: Vec<bool>,
    pub diagnostic: Option<String>,
}

impl BinaryLabels {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    /// Class ids (1 = concept, 0 = other) for ranking.
    pub fn class_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|&b| usize::from(b)).collect()
    }
}

pub fn concept_binary_labels(corpus: &ConceptCorpus, concept: &ConceptLabel) -> BinaryLabels {
    let labels: Vec<bool> = corpus.tokens().map(|t| t.has_concept(concept)).collect();
    let diagnostic = if labels.iter().any(|&b| b) {
        None
    } else {
        let msg = format!("concept {concept} does not occur in the corpus; all tokens negative");
        log::warn!("{msg}");
        Some(msg)
    };
    BinaryLabels { labels, diagnostic }
}

mod default_spec {
    use super::*;

    const ONSETS: &[&str] = &[
        "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br",
        "dr", "gr", "st", "tr", "ch", "sh", "th",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];

    /// Pronounceable, globally unique pseudo-words. `index` enumerates a
    /// fixed sequence; `used` prevents collisions across lexicons.
    struct WordFactory {
        next: usize,
        used: BTreeSet<String>,
    }

    impl WordFactory {
        fn word(&mut self, syllables: usize, suffix: &str, capital: bool) -> String {
            loop {
                let mut n = self.next;
                self.next += 1;
                // Scramble the counter so consecutive words look unrelated.
                n = n.wrapping_mul(2_654_435_761) % 1_000_003;
                let mut w = String::new();
                for _ in 0..syllables {
                    w.push_str(ONSETS[n % ONSETS.len()]);
                    n /= ONSETS.len();
                    w.push_str(VOWELS[n % VOWELS.len()]);
                    n /= VOWELS.len();
                }
                w.push_str(suffix);
                if capital {
                    let mut c = w.chars();
                    w = c.next().unwrap().to_uppercase().chain(c).collect();
                }
                if self.used.insert(w.clone()) {
                    return w;
                }
            }
        }

        fn words(&mut self, n: usize, syllables: usize, suffix: &str, capital: bool) -> Vec<String> {
            (0..n).map(|_| self.word(syllables, suffix, capital)).collect()
        }
    }

    fn label(s: &str) -> ConceptLabel {
        s.parse().expect("static label")
    }

    pub(super) fn build(n_sentences: usize) -> CorpusSpec {
        let mut f = WordFactory {
            next: 1,
            used: BTreeSet::new(),
        };
        let mut lex = BTreeMap::new();
        let mut add = |l: &str, words: Vec<String>| {
            lex.insert(label(l), words);
        };
        add("SEM:named_entity:location:usa", f.words(70, 2, "", true));
        add("SEM:named_entity:location:canada", f.words(70, 2, "", true));
        add("SEM:named_entity:location:mexico", f.words(70, 2, "", true));
        add("SEM:named_entity:location:europe", f.words(70, 3, "", true));
        add("SEM:named_entity:location:asia", f.words(70, 3, "", true));
        add("SEM:named_entity:person:given", f.words(160, 2, "", true));
        add("SEM:named_entity:person:family", f.words(160, 3, "", true));
        add("SEM:named_entity:organization:company", f.words(120, 2, "", true));
        add("SEM:named_entity:organization:team", f.words(100, 3, "", true));
        add("SEM:named_entity:organization:agency", f.words(80, 2, "", true));
        add("SEM:named_entity:misc:nationality", f.words(90, 2, "", true));
        add("SEM:named_entity:misc:event", f.words(70, 3, "", true));
        add("SEM:action:motion", f.words(80, 2, "", false));
        add("SEM:action:communication", f.words(80, 2, "", false));
        add("SEM:action:commerce", f.words(80, 2, "", false));
        add("SEM:time:month", f.words(12, 2, "", false));
        add("SEM:time:weekday", f.words(7, 2, "", false));
        add(
            "SEM:time:year",
            (1900..2000).step_by(1).map(|y| y.to_string()).collect(),
        );
        add("SEM:object:artifact", f.words(180, 2, "", false));
        add("SEM:object:food", f.words(100, 3, "", false));
        add("SEM:object:animal", f.words(100, 2, "", false));
        add("SEM:quality:color", f.words(20, 2, "", false));
        add("SEM:quality:size", f.words(20, 2, "", false));
        add("SEM:quantity:number", (1..=60).map(|n| format!("n{n}")).collect());

        let entity_types = [
            ("LOC", "SEM:named_entity:location"),
            ("PER", "SEM:named_entity:person"),
            ("ORG", "SEM:named_entity:organization"),
            ("MISC", "SEM:named_entity:misc"),
        ]
        .into_iter()
        .map(|(t, l)| (t.to_string(), label(l)))
        .collect();

        let templates = DEFAULT_TEMPLATES
            .iter()
            .map(|t| t.parse().expect("static template"))
            .collect();

        CorpusSpec {
            n_sentences,
            max_len: 24,
            lexicons: lex,
            entity_types,
            templates,
            entity_rate: 2.0,
        }
    }

    const DEFAULT_TEMPLATES: &[&str] = &[
        "{PER+} [SEM:action:motion] to {LOC} in [SEM:time:month] [SEM:time:year] .",
        "{PER+} [SEM:action:communication] that {ORG+} will [SEM:action:commerce] the [SEM:object:artifact] .",
        "the {MISC} [SEM:object:artifact] was [SEM:action:commerce] in {LOC} on [SEM:time:weekday] .",
        "{ORG+} [SEM:action:motion] its [SEM:quality:size] office from {LOC} to {LOC} .",
        "in {LOC} , {PER+} [SEM:action:communication] about the {MISC} [SEM:object:food] .",
        "{PER+} of {ORG+} [SEM:action:commerce] [SEM:quantity:number] [SEM:object:animal] .",
        "a [SEM:quality:color] [SEM:object:animal] [SEM:action:motion] near {LOC} .",
        "{ORG+} and {ORG+} [SEM:action:communication] on [SEM:time:weekday] in {LOC} .",
        "the {MISC} team of {PER+} [SEM:action:motion] to {LOC} for the {MISC} .",
        "[SEM:time:year] : {PER+} [SEM:action:commerce] [SEM:quantity:number] [SEM:object:artifact] from {ORG+} .",
        "officials in {LOC} [SEM:action:communication] that {PER+} had [SEM:action:motion] .",
        "{LOC} [SEM:action:commerce] [SEM:quality:color] [SEM:object:food] to {LOC} .",
        "{PER+} said the {ORG+} [SEM:object:artifact] is [SEM:quality:size] .",
        "on [SEM:time:weekday] the {MISC} [SEM:action:motion] through {LOC} and {LOC} .",
        "{ORG+} [SEM:action:communication] [SEM:quantity:number] [SEM:quality:color] [SEM:object:artifact] in [SEM:time:month] .",
        "the [SEM:object:animal] of {PER+} [SEM:action:motion] to the [SEM:object:food] .",
        "{PER+} , a {MISC} [SEM:object:artifact] maker , [SEM:action:communication] from {LOC} .",
        "by [SEM:time:year] {ORG+} had [SEM:action:commerce] [SEM:quantity:number] [SEM:object:food] in {LOC} .",
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CorpusSpec {
        let mut lexicons = BTreeMap::new();
        lexicons.insert(label("SEM:named_entity:location"), vec!["paris".to_string()]);
        lexicons.insert(label("SEM:named_entity:person"), vec!["alice".to_string()]);
        let entity_types = [
            ("LOC".to_string(), label("SEM:named_entity:location")),
            ("PER".to_string(), label("SEM:named_entity:person")),
        ]
        .into_iter()
        .collect();
        CorpusSpec {
            n_sentences: 1,
            max_len: 8,
            lexicons,
            entity_types,
            templates: vec!["{PER} visited {LOC}".parse().unwrap()],
            entity_rate: 2.0,
        }
    }

    fn label(s: &str) -> ConceptLabel {
        s.parse().unwrap()
    }

    #[test]
    fn label_rules() {
        let a = label("SEM:named_entity:location");
        let b = label("SEM:named_entity:location:usa");
        assert!(a.is_ancestor_of(&b));
        assert!(!b.is_ancestor_of(&a));
        assert!(!a.is_ancestor_of(&a));
        assert!("SEM::x".parse::<ConceptLabel>().is_err());
        assert!("".parse::<ConceptLabel>().is_err());
        assert_eq!(
            b.with_ancestors(),
            vec![label("SEM:named_entity"), a.clone(), b.clone()]
        );
    }

    #[test]
    fn template_sentence() {
        let c = generate_corpus(&tiny_spec(), 7).unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.sentences()[0];
        assert_eq!(s[0].text, "alice");
        assert_eq!(s[0].tag, BioTag::B("PER".into()));
        assert!(s[0].concepts.contains(&label("SEM:named_entity:person")));
        assert_eq!(s[2].text, "paris");
        assert_eq!(s[2].tag, BioTag::B("LOC".into()));
        assert!(s[2].concepts.contains(&label("SEM:named_entity:location")));
        assert_eq!(s[1].tag, BioTag::O);
    }

    #[test]
    fn deterministic_generation() {
        let spec = CorpusSpec::default_ner(200);
        let a = corpus_to_string(&generate_corpus(&spec, 3).unwrap());
        let b = corpus_to_string(&generate_corpus(&spec, 3).unwrap());
        assert_eq!(a, b);
        let c = corpus_to_string(&generate_corpus(&spec, 4).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn subconcept_labels_are_exclusive() {
        let mut spec = tiny_spec();
        spec.lexicons.clear();
        spec.lexicons.insert(label("SEM:named_entity:location:usa"), vec!["boston".into()]);
        spec.lexicons.insert(label("SEM:named_entity:location:canada"), vec!["toronto".into()]);
        spec.lexicons.insert(label("SEM:named_entity:person"), vec!["alice".into()]);
        spec.n_sentences = 50;
        let c = generate_corpus(&spec, 1).unwrap();
        let mut seen = false;
        for t in c.tokens().filter(|t| t.text == "boston") {
            seen = true;
            assert!(t.concepts.contains(&label("SEM:named_entity:location")));
            assert!(t.concepts.contains(&label("SEM:named_entity:location:usa")));
            assert!(!t.concepts.contains(&label("SEM:named_entity:location:canada")));
        }
        assert!(seen);
    }

    #[test]
    fn sibling_overlap_rejected() {
        let mut spec = tiny_spec();
        spec.lexicons.insert(label("SEM:named_entity:location:usa"), vec!["x".into()]);
        spec.lexicons.insert(label("SEM:named_entity:location:canada"), vec!["x".into()]);
        assert!(matches!(spec.validate(), Err(Error::Specification(_))));
    }

    #[test]
    fn empty_lexicon_is_specification_error() {
        let mut spec = tiny_spec();
        spec.lexicons.insert(label("SEM:named_entity:location"), vec![]);
        assert!(matches!(generate_corpus(&spec, 0), Err(Error::Specification(_))));
        let mut spec = tiny_spec();
        spec.max_len = 2;
        assert!(matches!(generate_corpus(&spec, 0), Err(Error::Specification(_))));
    }

    #[test]
    fn io_round_trip_and_errors() {
        let c = generate_corpus(&CorpusSpec::default_ner(50), 11).unwrap();
        assert_eq!(parse_corpus(&corpus_to_string(&c)).unwrap(), c);

        let bad = r#"{"tokens":["a","b"],"tags":["O","I-LOC"],"concepts":[[],["SEM:x:y"]]}"#;
        assert!(matches!(parse_corpus(bad), Err(Error::Validation(_))));

        assert!(parse_corpus("").unwrap().is_empty());

        let two = format!("{}\n\n{}\n", bad.replace("I-LOC", "B-LOC"), bad.replace("I-LOC", "O"));
        match parse_corpus(&two) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let uneven = r#"{"tokens":["a"],"tags":["O","O"],"concepts":[[]]}"#;
        assert!(matches!(parse_corpus(uneven), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_sizes() {
        let c = generate_corpus(&CorpusSpec::default_ner(10), 2).unwrap();
        let (a, b, d) = split_corpus(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a.len(), b.len(), d.len()), (8, 1, 1));
        let (a, b, d) = split_corpus(&c, (1.0, 0.0, 0.0), 5).unwrap();
        assert_eq!((a.len(), b.len(), d.len()), (10, 0, 0));
        let (a2, _, _) = split_corpus(&c, (0.8, 0.1, 0.1), 5).unwrap();
        let (a3, _, _) = split_corpus(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(a2, a3);
        assert!(split_corpus(&c, (0.5, 0.1, 0.1), 5).is_err());
        let small = generate_corpus(&CorpusSpec::default_ner(2), 2).unwrap();
        assert!(matches!(
            split_corpus(&small, (0.8, 0.1, 0.1), 5),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn binary_labels() {
        let c = generate_corpus(&tiny_spec(), 7).unwrap();
        let l = concept_binary_labels(&c, &label("SEM:named_entity:location"));
        assert_eq!(l.labels, vec![false, false, true]);
        assert!(l.diagnostic.is_none());
        let absent = concept_binary_labels(&c, &label("SEM:time"));
        assert!(absent.labels.iter().all(|&b| !b));
        assert!(absent.diagnostic.is_some());

        let mut spec = tiny_spec();
        spec.lexicons.remove(&label("SEM:named_entity:location"));
        spec.lexicons.insert(label("SEM:named_entity:location:usa"), vec!["boston".into()]);
        let c = generate_corpus(&spec, 7).unwrap();
        let l = concept_binary_labels(&c, &label("SEM:named_entity:location"));
        assert_eq!(l.labels, vec![false, false, true]);
    }

    #[test]
    fn default_spec_vocab_size() {
        let spec = CorpusSpec::default_ner(10);
        spec.validate().unwrap();
        let mut words: BTreeSet<&String> = spec.lexicons.values().flatten().collect();
        for t in &spec.templates {
            for item in &t.0 {
                if let TemplateItem::Literal(w) = item {
                    words.insert(w);
                }
            }
        }
        assert!((1800..=2300).contains(&words.len()), "{}", words.len());
    }
}
