//! Sentences, triplets, the `tokens####[triplets]` line format and a
//! deterministic two-domain synthetic corpus.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator between the token list and the triplet list of a record.
pub const FIELD_SEPARATOR: &str = "####";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSentence("sentence has no tokens".into()));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::InvalidSentence(format!(
                "token {bad:?} is empty or contains whitespace"
            )));
        }
        Ok(Sentence { tokens })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Sentence::new(text.split_whitespace().map(str::to_owned).collect())
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

/// Inclusive token interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn single(i: usize) -> Self {
        Span { start: i, end: i }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn fits(&self, n: usize) -> bool {
        self.start <= self.end && self.end < n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Pos,
    Neu,
    Neg,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Pos, Polarity::Neu, Polarity::Neg];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neu => "NEU",
            Polarity::Neg => "NEG",
        }
    }

    /// Class index used by the region classifier (POS=0, NEU=1, NEG=2).
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "POS" => Ok(Polarity::Pos),
            "NEU" => Ok(Polarity::Neu),
            "NEG" => Ok(Polarity::Neg),
            other => Err(Error::Parse {
                line: None,
                cause: format!("unknown polarity {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub aspect: Span,
    pub opinion: Span,
    pub polarity: Polarity,
}

impl Triplet {
    pub fn new(aspect: Span, opinion: Span, polarity: Polarity) -> Self {
        Triplet {
            aspect,
            opinion,
            polarity,
        }
    }

    pub fn pair(&self) -> (Span, Span) {
        (self.aspect, self.opinion)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub sentence: Sentence,
    pub triplets: Vec<Triplet>,
}

impl LabeledSentence {
    pub fn new(sentence: Sentence, triplets: Vec<Triplet>) -> Result<Self> {
        let n = sentence.len();
        for (k, t) in triplets.iter().enumerate() {
            if !t.aspect.fits(n) || !t.opinion.fits(n) {
                return Err(Error::SpanOutOfBounds(format!(
                    "triplet {k} ({:?}, {:?}) exceeds sentence length {n}",
                    t.aspect, t.opinion
                )));
            }
            if triplets[..k].contains(t) {
                return Err(Error::InvalidSentence(format!("duplicate triplet {k}")));
            }
        }
        Ok(LabeledSentence { sentence, triplets })
    }

    pub fn unlabeled(sentence: Sentence) -> Self {
        LabeledSentence {
            sentence,
            triplets: Vec::new(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        self.sentence.tokens()
    }

    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    /// Copy with the gold triplets removed.
    pub fn strip_labels(&self) -> Self {
        LabeledSentence::unlabeled(self.sentence.clone())
    }
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, want: char) -> std::result::Result<(), String> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(c) => Err(format!("expected '{want}' at offset {}, found '{c}'", self.pos)),
            None => Err(format!("expected '{want}', found end of input")),
        }
    }

    fn eat(&mut self, want: char) -> bool {
        if self.peek() == Some(want) {
            self.pos += want.len_utf8();
            true
        } else {
            false
        }
    }

    fn integer(&mut self) -> std::result::Result<usize, String> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest.chars().take_while(char::is_ascii_digit).count();
        if len == 0 {
            return Err(format!("expected an index at offset {}", self.pos));
        }
        self.pos += len;
        rest[..len]
            .parse()
            .map_err(|e| format!("bad index {:?}: {e}", &rest[..len]))
    }

    fn quoted(&mut self) -> std::result::Result<&'a str, String> {
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(format!("expected a quoted polarity at offset {}", self.pos)),
        };
        self.pos += 1;
        let rest = &self.src[self.pos..];
        let close = rest
            .find(quote)
            .ok_or_else(|| "unterminated polarity string".to_string())?;
        self.pos += close + 1;
        Ok(&rest[..close])
    }

    fn index_list(&mut self, n: usize) -> std::result::Result<Span, String> {
        self.expect('[')?;
        let mut idx = Vec::new();
        if !self.eat(']') {
            loop {
                idx.push(self.integer()?);
                if self.eat(']') {
                    break;
                }
                self.expect(',')?;
            }
        }
        let (&first, &last) = match (idx.first(), idx.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err("empty index list".into()),
        };
        if idx.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(format!("index list {idx:?} is not contiguous"));
        }
        if last >= n {
            return Err(format!("index {last} out of range for {n} tokens"));
        }
        Ok(Span::new(first, last))
    }
}

/// Parses one `tokens####[([a..], [o..], 'POL'), ...]` record.
pub fn parse_aste_line(line: &str) -> Result<LabeledSentence> {
    let fail = |cause: String| Error::Parse {
        line: None,
        cause: format!("{cause} in {line:?}"),
    };
    let (text, labels) = line
        .split_once(FIELD_SEPARATOR)
        .ok_or_else(|| fail(format!("missing '{FIELD_SEPARATOR}' separator")))?;
    let sentence = Sentence::from_text(text).map_err(|e| fail(e.to_string()))?;
    let n = sentence.len();

    let mut cur = Cursor {
        src: labels,
        pos: 0,
    };
    let mut triplets = Vec::new();
    let parsed: std::result::Result<(), String> = (|| {
        cur.expect('[')?;
        if cur.eat(']') {
            return Ok(());
        }
        loop {
            cur.expect('(')?;
            let aspect = cur.index_list(n)?;
            cur.expect(',')?;
            let opinion = cur.index_list(n)?;
            cur.expect(',')?;
            let pol = cur.quoted()?;
            let polarity = pol
                .parse::<Polarity>()
                .map_err(|_| format!("unknown polarity {pol:?}"))?;
            cur.expect(')')?;
            triplets.push(Triplet::new(aspect, opinion, polarity));
            if cur.eat(']') {
                return Ok(());
            }
            cur.expect(',')?;
        }
    })();
    parsed.map_err(fail)?;
    if cur.peek().is_some() {
        return Err(fail("trailing characters after triplet list".into()));
    }
    LabeledSentence::new(sentence, triplets).map_err(|e| fail(e.to_string()))
}

fn write_indices(out: &mut String, span: Span) {
    out.push('[');
    for i in span.start..=span.end {
        if i > span.start {
            out.push_str(", ");
        }
        out.push_str(&i.to_string());
    }
    out.push(']');
}

pub fn serialize_aste_line(ls: &LabeledSentence) -> String {
    let mut out = ls.tokens().join(" ");
    out.push_str(FIELD_SEPARATOR);
    out.push('[');
    for (k, t) in ls.triplets.iter().enumerate() {
        if k > 0 {
            out.push_str(", ");
        }
        out.push('(');
        write_indices(&mut out, t.aspect);
        out.push_str(", ");
        write_indices(&mut out, t.opinion);
        out.push_str(", '");
        out.push_str(t.polarity.as_str());
        out.push_str("')");
    }
    out.push(']');
    out
}

/// Reads one record per line; blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_aste_line(line).map_err(|e| match e {
            Error::Parse { cause, .. } => Error::Parse {
                line: Some(k + 1),
                cause,
            },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[LabeledSentence]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serialize_aste_line(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Built-in review domains with disjoint aspect and opinion vocabularies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Restaurant,
    Laptop,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "restaurant" => Ok(Domain::Restaurant),
            "laptop" => Ok(Domain::Laptop),
            other => Err(Error::InvalidConfig(format!("unknown domain {other:?}"))),
        }
    }
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Restaurant => "restaurant",
            Domain::Laptop => "laptop",
        }
    }

    fn heads(self) -> &'static [&'static str] {
        match self {
            Domain::Restaurant => &[
                "rice", "pasta", "pizza", "sushi", "soup", "salad", "steak", "noodles", "service",
                "waiter", "staff", "menu", "dessert", "wine", "coffee", "bread", "curry", "burger",
                "decor", "ambience", "portions", "chef", "tea", "fish", "chicken", "sauce", "cake",
                "atmosphere", "bartender", "dumplings",
            ],
            Domain::Laptop => &[
                "screen", "battery", "keyboard", "trackpad", "processor", "memory", "fan",
                "speakers", "charger", "display", "webcam", "hinge", "ports", "chassis",
                "software", "drivers", "touchpad", "storage", "drive", "motherboard", "cooling",
                "microphone", "bezel", "firmware", "warranty", "adapter", "mouse", "bluetooth",
                "wifi", "gpu",
            ],
        }
    }

    fn modifiers(self) -> &'static [&'static str] {
        match self {
            Domain::Restaurant => &[
                "fried", "grilled", "roast", "lunch", "dinner", "brunch", "garlic", "lemon",
                "sesame", "seafood",
            ],
            Domain::Laptop => &[
                "usb", "power", "backlit", "retina", "wireless", "touch", "audio", "boot",
                "startup", "ssd",
            ],
        }
    }

    fn opinions(self, polarity: Polarity) -> &'static [&'static str] {
        match (self, polarity) {
            (Domain::Restaurant, Polarity::Pos) => &[
                "delicious", "tasty", "yummy", "flavorful", "savory", "scrumptious", "succulent",
                "mouthwatering", "appetizing", "tender",
            ],
            (Domain::Restaurant, Polarity::Neu) => &[
                "ordinary", "plain", "standard", "typical", "moderate", "basic", "simple",
                "regular", "usual", "unremarkable",
            ],
            (Domain::Restaurant, Polarity::Neg) => &[
                "bland", "stale", "greasy", "soggy", "burnt", "overcooked", "salty", "rude",
                "undercooked", "tasteless",
            ],
            (Domain::Laptop, Polarity::Pos) => &[
                "fast", "sleek", "responsive", "crisp", "sturdy", "snappy", "lightweight",
                "reliable", "bright", "powerful",
            ],
            (Domain::Laptop, Polarity::Neu) => &[
                "adequate", "acceptable", "decent", "passable", "fair", "sufficient",
                "serviceable", "tolerable", "okay", "middling",
            ],
            (Domain::Laptop, Polarity::Neg) => &[
                "laggy", "flimsy", "noisy", "buggy", "dim", "sluggish", "glitchy", "overheating",
                "unresponsive", "clunky",
            ],
        }
    }
}

/// Domain-independent filler words.
const CONTEXT_WORDS: &[&str] = &[
    "the", "is", "was", "and", "but", "i", "found", "thought", "here", "overall", ",", ".",
];

/// Polarity-correlated intensifiers shared by every domain.
fn cue_word(polarity: Polarity) -> &'static str {
    match polarity {
        Polarity::Pos => "truly",
        Polarity::Neu => "fairly",
        Polarity::Neg => "too",
    }
}

/// Word lists of one domain after truncation to the configured sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainLexicon {
    pub domain: Domain,
    pub heads: Vec<String>,
    pub modifiers: Vec<String>,
    /// Polarity assignment table: each opinion word has exactly one polarity.
    pub opinions: Vec<(String, Polarity)>,
}

impl DomainLexicon {
    pub fn new(
        domain: Domain,
        num_heads: usize,
        num_modifiers: usize,
        opinions_per_polarity: usize,
    ) -> Result<Self> {
        let take = |pool: &[&str], k: usize, what: &str| -> Result<Vec<String>> {
            if k == 0 || k > pool.len() {
                return Err(Error::LexiconExhausted(format!(
                    "{} {what}: requested {k}, available 1..={}",
                    domain.name(),
                    pool.len()
                )));
            }
            Ok(pool[..k].iter().map(|s| s.to_string()).collect())
        };
        let heads = take(domain.heads(), num_heads, "aspect heads")?;
        let modifiers = take(domain.modifiers(), num_modifiers, "aspect modifiers")?;
        let mut opinions = Vec::new();
        for p in Polarity::ALL {
            for w in take(domain.opinions(p), opinions_per_polarity, "opinion words")? {
                opinions.push((w, p));
            }
        }
        Ok(DomainLexicon {
            domain,
            heads,
            modifiers,
            opinions,
        })
    }

    pub fn polarity_of(&self, word: &str) -> Option<Polarity> {
        self.opinions
            .iter()
            .find(|(w, _)| w == word)
            .map(|&(_, p)| p)
    }

    /// Aspect and opinion words of the domain.
    pub fn content_words(&self) -> Vec<String> {
        let mut out: Vec<String> = self.heads.clone();
        out.extend(self.modifiers.iter().cloned());
        out.extend(self.opinions.iter().map(|(w, _)| w.clone()));
        out
    }

    /// Every token the generator can emit for this domain.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut out = self.content_words();
        out.extend(CONTEXT_WORDS.iter().map(|s| s.to_string()));
        out.extend(Polarity::ALL.iter().map(|&p| cue_word(p).to_string()));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_source: usize,
    pub num_dev: usize,
    pub num_target: usize,
    pub num_test: usize,
    pub seed: u64,
    pub source_domain: Domain,
    pub target_domain: Domain,
    pub num_heads: usize,
    pub num_modifiers: usize,
    pub opinions_per_polarity: usize,
    pub max_len: usize,
    /// Probability that a sentence carries a second triplet.
    pub two_triplet_rate: f64,
    /// Probability that an aspect phrase has a modifier (two tokens).
    pub modifier_rate: f64,
    /// Probability that an opinion word is preceded by its polarity cue.
    pub cue_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_source: 50,
            num_dev: 20,
            num_target: 50,
            num_test: 50,
            seed: 7,
            source_domain: Domain::Restaurant,
            target_domain: Domain::Laptop,
            num_heads: 8,
            num_modifiers: 4,
            opinions_per_polarity: 3,
            max_len: 24,
            two_triplet_rate: 0.4,
            modifier_rate: 0.3,
            cue_rate: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_source == 0 || self.num_dev == 0 || self.num_target == 0 || self.num_test == 0
        {
            return bad("corpus counts must be at least 1");
        }
        if self.source_domain == self.target_domain {
            return bad("source and target domains must differ");
        }
        for (name, p) in [
            ("two_triplet_rate", self.two_triplet_rate),
            ("modifier_rate", self.modifier_rate),
            ("cue_rate", self.cue_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        // longest clause pair: 6 + 1 + 6 + 1 tokens
        if self.max_len < 14 {
            return bad("max_len must be at least 14");
        }
        Ok(())
    }

    pub fn lexicon(&self, domain: Domain) -> Result<DomainLexicon> {
        DomainLexicon::new(
            domain,
            self.num_heads,
            self.num_modifiers,
            self.opinions_per_polarity,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub source_train: Vec<LabeledSentence>,
    pub source_dev: Vec<LabeledSentence>,
    /// Target sentences with labels removed.
    pub target_unlabeled: Vec<LabeledSentence>,
    pub target_test: Vec<LabeledSentence>,
    pub source_lexicon: DomainLexicon,
    pub target_lexicon: DomainLexicon,
}

struct ClauseBuilder<'a> {
    lex: &'a DomainLexicon,
    cfg: &'a SynthConfig,
}

impl ClauseBuilder<'_> {
    /// Appends one clause to `tokens`; returns its triplet.
    fn clause(
        &self,
        rng: &mut ChaCha8Rng,
        tokens: &mut Vec<String>,
        used_heads: &[String],
    ) -> Triplet {
        let push = |tokens: &mut Vec<String>, w: &str| tokens.push(w.to_string());
        let template = rng.gen_range(0..3);
        match template {
            0 => push(tokens, "the"),
            1 => {
                push(tokens, "i");
                push(tokens, if rng.gen_bool(0.5) { "found" } else { "thought" });
                push(tokens, "the");
            }
            _ => {
                push(tokens, "overall");
                push(tokens, "the");
            }
        }
        let head = loop {
            let h = self.lex.heads.choose(rng).expect("non-empty lexicon");
            if !used_heads.contains(h) {
                break h.clone();
            }
        };
        let a_start = tokens.len();
        if rng.gen_bool(self.cfg.modifier_rate) {
            push(tokens, self.lex.modifiers.choose(rng).expect("non-empty lexicon"));
        }
        tokens.push(head);
        let aspect = Span::new(a_start, tokens.len() - 1);
        match template {
            1 => {}
            _ => push(tokens, if rng.gen_bool(0.5) { "is" } else { "was" }),
        }
        let (word, polarity) = self.lex.opinions.choose(rng).expect("non-empty lexicon");
        if rng.gen_bool(self.cfg.cue_rate) {
            push(tokens, cue_word(*polarity));
        }
        let o = tokens.len();
        push(tokens, word);
        Triplet::new(aspect, Span::single(o), *polarity)
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> LabeledSentence {
        let mut tokens = Vec::new();
        let mut triplets = Vec::new();
        let first = self.clause(rng, &mut tokens, &[]);
        triplets.push(first);
        if rng.gen_bool(self.cfg.two_triplet_rate) && self.lex.heads.len() > 1 {
            tokens.push(if rng.gen_bool(0.5) { "," } else { "but" }.to_string());
            let used = tokens[first.aspect.end..=first.aspect.end].to_vec();
            let second = self.clause(rng, &mut tokens, &used);
            triplets.push(second);
        }
        if rng.gen_bool(0.3) {
            tokens.push("here".to_string());
        }
        tokens.push(".".to_string());
        let sentence = Sentence::new(tokens).expect("generated tokens are valid");
        LabeledSentence::new(sentence, triplets).expect("generated spans are in bounds")
    }
}

fn generate(
    cfg: &SynthConfig,
    lex: &DomainLexicon,
    count: usize,
    stream: u64,
) -> Result<Vec<LabeledSentence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let builder = ClauseBuilder { lex, cfg };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = builder.sentence(&mut rng);
        if s.len() > cfg.max_len {
            return Err(Error::InvalidConfig(format!(
                "generated sentence of length {} exceeds max_len {}",
                s.len(),
                cfg.max_len
            )));
        }
        out.push(s);
    }
    Ok(out)
}

/// Generates source train/dev and target unlabeled/test splits. Pure in `cfg`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let source_lexicon = cfg.lexicon(cfg.source_domain)?;
    let target_lexicon = cfg.lexicon(cfg.target_domain)?;
    let target_words = target_lexicon.content_words();
    if source_lexicon
        .vocabulary()
        .iter()
        .any(|w| target_words.contains(w))
    {
        return Err(Error::InvalidConfig(
            "source and target lexicons overlap".into(),
        ));
    }
    let target_unlabeled = generate(cfg, &target_lexicon, cfg.num_target, 3)?
        .iter()
        .map(LabeledSentence::strip_labels)
        .collect();
    Ok(SynthCorpus {
        source_train: generate(cfg, &source_lexicon, cfg.num_source, 1)?,
        source_dev: generate(cfg, &source_lexicon, cfg.num_dev, 2)?,
        target_unlabeled,
        target_test: generate(cfg, &target_lexicon, cfg.num_test, 4)?,
        source_lexicon,
        target_lexicon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fried_rice_example() {
        let ls = parse_aste_line("The fried rice is amazing here .####[([1, 2], [4], 'POS')]")
            .unwrap();
        assert_eq!(
            ls.tokens(),
            &["The", "fried", "rice", "is", "amazing", "here", "."]
        );
        assert_eq!(
            ls.triplets,
            vec![Triplet::new(Span::new(1, 2), Span::new(4, 4), Polarity::Pos)]
        );
    }

    #[test]
    fn parses_empty_triplet_list() {
        let ls = parse_aste_line("ok .####[]").unwrap();
        assert_eq!(ls.len(), 2);
        assert!(ls.triplets.is_empty());
    }

    #[test]
    fn serializes_forced_format() {
        let ls = LabeledSentence::new(
            Sentence::from_text("a b").unwrap(),
            vec![Triplet::new(Span::single(0), Span::single(1), Polarity::Neg)],
        )
        .unwrap();
        assert_eq!(serialize_aste_line(&ls), "a b####[([0], [1], 'NEG')]");
        let empty = LabeledSentence::unlabeled(Sentence::from_text("a b").unwrap());
        assert_eq!(serialize_aste_line(&empty), "a b####[]");
    }

    #[test]
    fn rejects_malformed_records() {
        for (line, needle) in [
            ("no separator here", "separator"),
            ("a b c####[([0, 2], [1], 'POS')]", "contiguous"),
            ("a b####[([0], [5], 'POS')]", "out of range"),
            ("a b####[([0], [1], 'GOOD')]", "polarity"),
            ("a b####[([0], [1], 'POS')", "expected"),
            ("####[]", "no tokens"),
        ] {
            let err = parse_aste_line(line).unwrap_err().to_string();
            assert!(err.contains(needle), "{line}: {err}");
        }
    }

    #[test]
    fn accepts_double_quotes_and_loose_spacing() {
        let ls = parse_aste_line("x y z####[ ( [0] ,[1,2],\"NEU\" ) ]").unwrap();
        assert_eq!(
            ls.triplets,
            vec![Triplet::new(Span::single(0), Span::new(1, 2), Polarity::Neu)]
        );
    }

    #[test]
    fn dataset_errors_name_the_line() {
        let text = "a b####[]\n\nc d####[([0], [9], 'POS')]\n";
        match parse_dataset(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(parse_dataset("").unwrap().len(), 0);
        assert_eq!(
            parse_dataset("a####[]\nb####[]\nc####[]").unwrap().len(),
            3
        );
    }

    #[test]
    fn synth_is_deterministic_and_disjoint() {
        let cfg = SynthConfig {
            seed: 7,
            ..SynthConfig::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source_train.len(), cfg.num_source);
        assert_eq!(a.target_test.len(), cfg.num_test);

        let target_words = a.target_lexicon.content_words();
        for ls in a.source_train.iter().chain(&a.source_dev) {
            assert!(ls.tokens().iter().all(|t| !target_words.contains(t)));
        }
        for (ls, lex) in a
            .source_train
            .iter()
            .map(|s| (s, &a.source_lexicon))
            .chain(a.target_test.iter().map(|s| (s, &a.target_lexicon)))
        {
            assert!(!ls.triplets.is_empty() && ls.triplets.len() <= 2);
            for t in &ls.triplets {
                assert!(t.aspect.fits(ls.len()) && t.opinion.fits(ls.len()));
                assert!(t.aspect.len() <= 2);
                let word = &ls.tokens()[t.opinion.start];
                assert_eq!(lex.polarity_of(word), Some(t.polarity));
            }
        }
        assert!(a.target_unlabeled.iter().all(|s| s.triplets.is_empty()));
    }

    #[test]
    fn synth_rejects_oversized_lexicon() {
        let cfg = SynthConfig {
            num_heads: 500,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_corpus(&cfg),
            Err(Error::LexiconExhausted(_))
        ));
    }
}
