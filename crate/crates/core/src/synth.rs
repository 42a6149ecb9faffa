//! Deterministic synthetic bilingual NER corpus.
//!
//! Source sentences are filled templates. The target language is a word
//! cipher of the source: context words are transformed token by token and
//! entity phrases go through the bilingual lexicon, which can change their
//! length. Target sentences keep their gold labels so pseudo-label quality is
//! measurable, but training code only ever sees them unlabeled.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bio_from_spans, EntitySpan, Label, LabeledSentence, TagSchema};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cipher {
    Identity,
    /// Reverse the characters and append [`CIPHER_SUFFIX`]: `london` becomes
    /// `nodnol_q`. In the lexicon, a multi-token phrase whose first token has
    /// odd length also gains a trailing [`PARTICLE`] token.
    ReverseSuffix,
}

pub const CIPHER_SUFFIX: &str = "_q";
pub const PARTICLE: &str = "ak_q";

impl Cipher {
    pub fn word(self, w: &str) -> String {
        match self {
            Cipher::Identity => w.to_string(),
            Cipher::ReverseSuffix => {
                let mut s: String = w.chars().rev().collect();
                s.push_str(CIPHER_SUFFIX);
                s
            }
        }
    }

    pub fn phrase(self, phrase: &[String]) -> Vec<String> {
        let mut out: Vec<String> = phrase.iter().map(|w| self.word(w)).collect();
        if self == Cipher::ReverseSuffix && phrase.len() > 1 && phrase[0].chars().count() % 2 == 1 {
            out.push(PARTICLE.to_string());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub schema: TagSchema,
    /// Space-separated tokens; `{TYPE}` marks an entity slot. Built-in
    /// templates when absent.
    pub templates: Option<Vec<String>>,
    /// Type name to phrases (space-separated tokens). Procedurally built
    /// from `gazetteer_seed` when absent.
    pub gazetteers: Option<BTreeMap<String, Vec<String>>>,
    pub gazetteer_size: usize,
    pub gazetteer_seed: u64,
    pub cipher: Cipher,
    pub seed: u64,
    pub source_language: String,
    pub target_language: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sentences: 2000,
            schema: TagSchema::xtreme(),
            templates: None,
            gazetteers: None,
            gazetteer_size: 120,
            gazetteer_seed: 7,
            cipher: Cipher::ReverseSuffix,
            seed: 0,
            source_language: "src".into(),
            target_language: "tgt".into(),
        }
    }
}

const TEMPLATES: &[&str] = &[
    "{PER} was born in {LOC} and later moved away",
    "yesterday {PER} arrived in {LOC} for the summit",
    "the mayor of {LOC} met {PER} on monday",
    "{PER} joined {ORG} after leaving school",
    "{ORG} opened a new office in {LOC}",
    "shares of {ORG} fell sharply on friday",
    "{PER} , a spokesman for {ORG} , declined to comment",
    "officials in {LOC} said the road would stay closed",
    "{PER} told reporters that {ORG} would appeal",
    "the team from {LOC} beat {ORG} in the final",
    "{ORG} and {ORG} agreed to merge next year",
    "heavy rain flooded parts of {LOC} overnight",
    "{PER} thanked the fans after the match",
    "according to {PER} , talks with {ORG} went well",
    "the border between {LOC} and {LOC} remains quiet",
    "{PER} will travel to {LOC} next month",
    "a report by {ORG} praised the new plan",
    "police in {LOC} arrested two men on sunday",
    "{PER} and {PER} shared the prize",
    "the concert in {LOC} was cancelled",
    "{ORG} hired {PER} as its new director",
    "she moved from {LOC} to {LOC} in the spring",
    "{PER} lost the election by a narrow margin",
    "investors expect {ORG} to report higher profits",
    "prices rose again last quarter",
    "the weather stayed calm all week",
    "{PER} criticized the decision of {ORG}",
    "tourists crowded the streets of {LOC}",
    "{ORG} signed a deal with the government of {LOC}",
    "coach {PER} praised the young players",
    "the museum in {LOC} reopened after repairs",
    "workers at {ORG} went on strike",
    "{PER} scored twice in the second half",
    "the river near {LOC} burst its banks",
    "{PER} resigned from {ORG} on tuesday",
    "nobody expected such a result",
    "{ORG} was founded by {PER} in the old town",
    "the minister visited {LOC} and {LOC}",
    "fans of {ORG} celebrated late into the night",
    "{PER} said the plan was a mistake",
];

const SYLLABLES: [&[&str]; 4] = [
    // LOC
    &["var", "ost", "mel", "dor", "ker", "lun", "brav", "tor", "sel", "gar", "vik", "nor"],
    // PER
    &["an", "el", "ma", "ri", "jo", "sa", "li", "ton", "ka", "be", "mi", "ro"],
    // ORG
    &["tek", "corp", "zen", "ax", "ion", "mar", "dyn", "ply", "flux", "nex", "tro", "qua"],
    // MISC and any further types
    &["ur", "pha", "gol", "deb", "sim", "wex", "hal", "prin", "cos", "ul", "fer", "ty"],
];

const SECOND_WORDS: [&[&str]; 4] = [
    &["city", "bay", "valley", "heights", "falls", "port"],
    &[],
    &["group", "bank", "union", "institute", "labs", "partners", "motors"],
    &["cup", "festival", "awards", "games"],
];

fn syllable_word<R: Rng>(rng: &mut R, syl: &[&str]) -> String {
    let k = rng.gen_range(2..=3);
    (0..k).map(|_| *syl.choose(rng).unwrap()).collect()
}

/// Procedural gazetteer: per type, `size` distinct phrases of 1 to 3 tokens.
pub fn build_gazetteers(schema: &TagSchema, size: usize, seed: u64) -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    for (t, name) in schema.types().iter().enumerate() {
        let style = t.min(3);
        let syl = SYLLABLES[style];
        let second = SECOND_WORDS[style];
        let mut rng = rng_for(seed, "synth.gazetteer", t as u64);
        let mut seen = BTreeSet::new();
        let mut phrases = Vec::new();
        let mut attempts = 0;
        while phrases.len() < size && attempts < size * 50 {
            attempts += 1;
            let roll: f64 = rng.gen();
            let phrase = if style == 1 {
                // person: first [last]
                let first = syllable_word(&mut rng, syl);
                if roll < 0.6 {
                    format!("{first} {}", syllable_word(&mut rng, syl))
                } else {
                    first
                }
            } else if roll < 0.45 {
                syllable_word(&mut rng, syl)
            } else if roll < 0.85 {
                format!("{} {}", syllable_word(&mut rng, syl), second.choose(&mut rng).unwrap())
            } else {
                format!(
                    "{} {} {}",
                    syllable_word(&mut rng, syl),
                    syllable_word(&mut rng, syl),
                    second.choose(&mut rng).unwrap()
                )
            };
            if seen.insert(phrase.clone()) {
                phrases.push(phrase);
            }
        }
        out.insert(name.clone(), phrases);
    }
    out
}

/// Source phrase to target phrase, both as token sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BilingualLexicon {
    entries: BTreeMap<Vec<String>, Vec<String>>,
}

impl BilingualLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, src: Vec<String>, tgt: Vec<String>) -> Result<()> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data("lexicon phrases must be non-empty".into()));
        }
        if self.entries.contains_key(&src) {
            return Err(Error::Data(format!("duplicate lexicon entry `{}`", src.join(" "))));
        }
        self.entries.insert(src, tgt);
        Ok(())
    }

    pub fn get(&self, src: &[String]) -> Option<&[String]> {
        self.entries.get(src).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[String], &[String])> {
        self.entries.iter().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    /// Adds the entries of `other` whose source phrase is not present yet.
    pub fn merge(&mut self, other: &BilingualLexicon) {
        for (a, b) in &other.entries {
            self.entries.entry(a.clone()).or_insert_with(|| b.clone());
        }
    }

    /// Longest source phrase, in tokens.
    pub fn max_source_len(&self) -> usize {
        self.entries.keys().map(Vec::len).max().unwrap_or(0)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.entries {
            s.push_str(&a.join(" "));
            s.push('\t');
            s.push_str(&b.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lex = BilingualLexicon::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Format { line: k + 1, msg };
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `source<TAB>target`".into()))?;
            let src: Vec<String> = a.split_whitespace().map(String::from).collect();
            let tgt: Vec<String> = b.split_whitespace().map(String::from).collect();
            lex.insert(src, tgt).map_err(|e| bad(e.to_string()))?;
        }
        Ok(lex)
    }
}

impl SynthConfig {
    pub fn templates(&self) -> Vec<String> {
        self.templates
            .clone()
            .unwrap_or_else(|| TEMPLATES.iter().map(|s| s.to_string()).collect())
    }

    pub fn gazetteers(&self) -> BTreeMap<String, Vec<String>> {
        self.gazetteers
            .clone()
            .unwrap_or_else(|| build_gazetteers(&self.schema, self.gazetteer_size, self.gazetteer_seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 {
            return Err(Error::Config("n_sentences must be positive".into()));
        }
        let gaz = self.gazetteers();
        for t in self.templates() {
            for tok in t.split_whitespace() {
                if let Some(ty) = slot_type(tok) {
                    if self.schema.index_of(ty).is_none() {
                        return Err(Error::Config(format!("template slot {{{ty}}} is not in the schema")));
                    }
                    if gaz.get(ty).is_none_or(|g| g.is_empty()) {
                        return Err(Error::Config(format!("empty gazetteer for slot type {ty}")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot_type(tok: &str) -> Option<&str> {
    tok.strip_prefix('{').and_then(|t| t.strip_suffix('}'))
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Sentence `index` of the corpus; depends only on `(seed, index)`.
pub fn gen_sentence(cfg: &SynthConfig, templates: &[String], gaz: &BTreeMap<String, Vec<String>>, index: usize) -> Result<LabeledSentence> {
    let mut rng = rng_for(cfg.seed, "synth.sentence", index as u64);
    let template = templates.choose(&mut rng).ok_or_else(|| Error::Config("no templates".into()))?;
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for tok in template.split_whitespace() {
        match slot_type(tok) {
            Some(ty) => {
                let t = cfg
                    .schema
                    .index_of(ty)
                    .ok_or_else(|| Error::Config(format!("template slot {{{ty}}} is not in the schema")))?;
                let phrase = gaz
                    .get(ty)
                    .and_then(|g| g.choose(&mut rng))
                    .ok_or_else(|| Error::Config(format!("empty gazetteer for slot type {ty}")))?;
                let w = words(phrase);
                let start = tokens.len();
                tokens.extend(w);
                spans.push(EntitySpan::new(start, tokens.len() - 1, t));
            }
            None => tokens.push(tok.to_string()),
        }
    }
    let labels = bio_from_spans(&spans, tokens.len())?;
    LabeledSentence::new(format!("s{index}"), cfg.source_language.clone(), tokens, Some(labels))
}

pub fn gen_source(cfg: &SynthConfig) -> Result<Vec<LabeledSentence>> {
    cfg.validate()?;
    let templates = cfg.templates();
    let gaz = cfg.gazetteers();
    (0..cfg.n_sentences)
        .map(|i| gen_sentence(cfg, &templates, &gaz, i))
        .collect()
}

pub fn derive_lexicon(cfg: &SynthConfig) -> BilingualLexicon {
    let mut lex = BilingualLexicon::new();
    let mut seen = BTreeSet::new();
    for phrases in cfg.gazetteers().values() {
        for p in phrases {
            let src = words(p);
            if seen.insert(src.clone()) {
                let tgt = cfg.cipher.phrase(&src);
                lex.insert(src, tgt).expect("distinct non-empty phrases");
            }
        }
    }
    lex
}

/// Word-level dictionary for the non-slot words of the templates, through
/// the cipher: the part of a bilingual dictionary that covers ordinary
/// vocabulary rather than names.
pub fn derive_context_lexicon(cfg: &SynthConfig) -> BilingualLexicon {
    let mut lex = BilingualLexicon::new();
    for t in cfg.templates() {
        for tok in t.split_whitespace().filter(|t| slot_type(t).is_none()) {
            let src = vec![tok.to_string()];
            if lex.get(&src).is_none() {
                lex.insert(src, vec![cfg.cipher.word(tok)]).expect("new non-empty entry");
            }
        }
    }
    lex
}

/// Translates a labeled source sentence: entity phrases via the lexicon,
/// everything else word by word through the cipher.
pub fn derive_target(sentence: &LabeledSentence, lexicon: &BilingualLexicon, cipher: Cipher, language: &str) -> Result<LabeledSentence> {
    let labels = sentence
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sentence {} has no labels", sentence.id)))?;
    let spans = sentence.spans();
    let mut tokens = Vec::new();
    let mut new_spans = Vec::new();
    let mut i = 0;
    let mut next = spans.iter().peekable();
    while i < sentence.len() {
        match next.peek() {
            Some(s) if s.start == i => {
                let src = &sentence.tokens[s.start..=s.end];
                let tgt = lexicon
                    .get(src)
                    .ok_or_else(|| Error::Coverage(src.join(" ")))?;
                let start = tokens.len();
                tokens.extend(tgt.iter().cloned());
                new_spans.push(EntitySpan::new(start, tokens.len() - 1, s.etype));
                i = s.end + 1;
                next.next();
            }
            _ => {
                debug_assert_eq!(labels[i], Label::O);
                tokens.push(cipher.word(&sentence.tokens[i]));
                i += 1;
            }
        }
    }
    let labels = bio_from_spans(&new_spans, tokens.len())?;
    LabeledSentence::new(sentence.id.clone(), language, tokens, Some(labels))
}

/// Source corpus, its target translation (gold labels kept) and lexicon.
pub struct SynthCorpus {
    pub source: Vec<LabeledSentence>,
    pub target: Vec<LabeledSentence>,
    pub lexicon: BilingualLexicon,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let source = gen_source(cfg)?;
    let lexicon = derive_lexicon(cfg);
    let target = source
        .iter()
        .map(|s| derive_target(s, &lexicon, cfg.cipher, &cfg.target_language))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus { source, target, lexicon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll, write_conll};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_sentences: 100,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = gen_source(&small(3)).unwrap();
        let b = gen_source(&small(3)).unwrap();
        assert_eq!(a.len(), 100);
        let s = TagSchema::xtreme();
        assert_eq!(write_conll(&a, &s), write_conll(&b, &s));
        let c = gen_source(&small(4)).unwrap();
        assert_ne!(write_conll(&a, &s), write_conll(&c, &s));
    }

    #[test]
    fn labels_are_valid_and_round_trip() {
        let s = TagSchema::xtreme();
        let corpus = generate(&small(1)).unwrap();
        for set in [&corpus.source, &corpus.target] {
            let text = write_conll(set, &s);
            let parsed = crate::corpus::parse_conll_with_diagnostics(&text, &s, "src").unwrap();
            assert!(parsed.repairs.is_empty());
            assert_eq!(&parse_conll(&text, &s).unwrap(), set);
        }
    }

    #[test]
    fn cipher_rule() {
        assert_eq!(Cipher::ReverseSuffix.word("london"), "nodnol_q");
        let p = |s: &str| words(s);
        assert_eq!(Cipher::ReverseSuffix.phrase(&p("new york")), p("wen_q kroy_q ak_q"));
        assert_eq!(Cipher::ReverseSuffix.phrase(&p("york city")), p("kroy_q ytic_q"));
        assert_eq!(Cipher::ReverseSuffix.phrase(&p("rome")), p("emor_q"));
    }

    #[test]
    fn identity_cipher_keeps_sentence() {
        let cfg = SynthConfig {
            cipher: Cipher::Identity,
            ..small(2)
        };
        let corpus = generate(&cfg).unwrap();
        for (s, t) in corpus.source.iter().zip(&corpus.target) {
            assert_eq!(s.tokens, t.tokens);
            assert_eq!(s.labels, t.labels);
            assert_eq!(t.language, "tgt");
        }
    }

    #[test]
    fn longer_translation_is_respanned() {
        let mut lex = BilingualLexicon::new();
        lex.insert(words("new york"), words("a b c")).unwrap();
        let src = LabeledSentence::new(
            "x",
            "src",
            words("to new york ."),
            Some(vec![Label::O, Label::B(0), Label::I(0), Label::O]),
        )
        .unwrap();
        let t = derive_target(&src, &lex, Cipher::Identity, "tgt").unwrap();
        assert_eq!(t.tokens, words("to a b c ."));
        assert_eq!(
            t.labels.unwrap(),
            vec![Label::O, Label::B(0), Label::I(0), Label::I(0), Label::O]
        );
    }

    #[test]
    fn missing_phrase_is_a_coverage_error() {
        let src = LabeledSentence::new("x", "src", words("paris"), Some(vec![Label::B(0)])).unwrap();
        let err = derive_target(&src, &BilingualLexicon::new(), Cipher::Identity, "tgt").unwrap_err();
        assert!(matches!(err, Error::Coverage(ref p) if p == "paris"));
    }

    #[test]
    fn target_spans_map_back_through_lexicon() {
        let cfg = small(5);
        let corpus = generate(&cfg).unwrap();
        let inverse: BTreeMap<Vec<String>, Vec<String>> =
            corpus.lexicon.iter().map(|(a, b)| (b.to_vec(), a.to_vec())).collect();
        for (s, t) in corpus.source.iter().zip(&corpus.target) {
            let (ss, ts) = (s.spans(), t.spans());
            assert_eq!(ss.len(), ts.len());
            for (a, b) in ss.iter().zip(&ts) {
                assert_eq!(a.etype, b.etype);
                let back = &inverse[&t.tokens[b.start..=b.end].to_vec()];
                assert_eq!(back.as_slice(), &s.tokens[a.start..=a.end]);
            }
        }
    }

    #[test]
    fn lexicon_size_and_tsv() {
        let cfg = small(0);
        let lex = derive_lexicon(&cfg);
        let gaz = cfg.gazetteers();
        let distinct: BTreeSet<&String> = gaz.values().flatten().collect();
        assert_eq!(lex.len(), distinct.len());
        assert_eq!(BilingualLexicon::parse_tsv(&lex.to_tsv()).unwrap(), lex);
        let empty = SynthConfig {
            gazetteers: Some(BTreeMap::new()),
            ..small(0)
        };
        assert!(derive_lexicon(&empty).is_empty());
    }

    #[test]
    fn empty_gazetteer_is_a_config_error() {
        let mut gaz = BTreeMap::new();
        gaz.insert("LOC".to_string(), vec![]);
        let cfg = SynthConfig {
            gazetteers: Some(gaz),
            templates: Some(vec!["in {LOC}".into()]),
            ..small(0)
        };
        assert!(matches!(gen_source(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn context_lexicon_translates_every_context_word() {
        let cfg = small(3);
        let ctx = derive_context_lexicon(&cfg);
        let mut full = derive_lexicon(&cfg);
        let before = full.len();
        full.merge(&ctx);
        assert!(full.len() > before);
        for s in gen_source(&cfg).unwrap() {
            let t = derive_target(&s, &full, cfg.cipher, "tgt").unwrap();
            let spans = s.spans();
            for (i, tok) in s.tokens.iter().enumerate() {
                if !spans.iter().any(|sp| sp.start <= i && i <= sp.end) {
                    let img = full.get(std::slice::from_ref(tok)).unwrap();
                    assert!(t.tokens.contains(&img[0]));
                }
            }
        }
    }
}
