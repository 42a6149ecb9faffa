//! Sentences, BIO labels, entity spans, CoNLL column I/O and entity-level F1.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered entity type inventory. The order fixes every class index
/// downstream (BIO labels, relation classes, checkpoints).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagSchema {
    entity_types: Vec<String>,
}

impl TagSchema {
    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = types.into_iter().map(Into::into).collect();
        if entity_types.is_empty() {
            return Err(Error::Config("tag schema must name at least one entity type".into()));
        }
        let mut seen = HashSet::new();
        for t in &entity_types {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity type name `{t}`")));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate entity type `{t}`")));
            }
        }
        Ok(TagSchema { entity_types })
    }

    /// LOC, PER, ORG.
    pub fn xtreme() -> Self {
        TagSchema::new(["LOC", "PER", "ORG"]).unwrap()
    }

    /// LOC, PER, ORG, MISC.
    pub fn conll() -> Self {
        TagSchema::new(["LOC", "PER", "ORG", "MISC"]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.entity_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_types.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entity_types[index]
    }

    pub fn types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn parse_label(&self, tag: &str) -> std::result::Result<Label, String> {
        if tag == "O" {
            return Ok(Label::O);
        }
        let (prefix, ty) = tag
            .split_once('-')
            .ok_or_else(|| format!("malformed tag `{tag}`"))?;
        let t = self.index_of(ty).ok_or_else(|| ty.to_string())?;
        match prefix {
            "B" => Ok(Label::B(t)),
            "I" => Ok(Label::I(t)),
            _ => Err(format!("malformed tag `{tag}`")),
        }
    }

    pub fn label_str(&self, label: Label) -> String {
        match label {
            Label::O => "O".to_string(),
            Label::B(t) => format!("B-{}", self.name(t)),
            Label::I(t) => format!("I-{}", self.name(t)),
        }
    }
}

impl TryFrom<Vec<String>> for TagSchema {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        TagSchema::new(v)
    }
}

impl From<TagSchema> for Vec<String> {
    fn from(s: TagSchema) -> Self {
        s.entity_types
    }
}

/// BIO tag; the payload is the entity type index in the schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    O,
    B(usize),
    I(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSentence {
    pub id: String,
    pub language: String,
    pub tokens: Vec<String>,
    /// `None` for raw text.
    pub labels: Option<Vec<Label>>,
}

impl LabeledSentence {
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        tokens: Vec<String>,
        labels: Option<Vec<Label>>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("sentence has no tokens".into()));
        }
        if let Some(tok) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::Contract(format!("invalid token `{tok}`")));
        }
        if let Some(labels) = &labels {
            if labels.len() != tokens.len() {
                return Err(Error::Contract(format!(
                    "{} labels for {} tokens",
                    labels.len(),
                    tokens.len()
                )));
            }
            if let Some(i) = first_orphan(labels) {
                return Err(Error::Contract(format!("orphan I- tag at token {i}")));
            }
        }
        Ok(LabeledSentence {
            id: id.into(),
            language: language.into(),
            tokens,
            labels,
        })
    }

    pub fn raw(id: impl Into<String>, language: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        Self::new(id, language, tokens, None)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold spans, or an empty list for raw sentences.
    pub fn spans(&self) -> Vec<EntitySpan> {
        self.labels.as_deref().map(spans_from_bio).unwrap_or_default()
    }

    /// Same tokens, no labels.
    pub fn unlabeled(&self) -> LabeledSentence {
        LabeledSentence {
            labels: None,
            ..self.clone()
        }
    }
}

fn first_orphan(labels: &[Label]) -> Option<usize> {
    let mut prev = Label::O;
    for (i, &l) in labels.iter().enumerate() {
        if let Label::I(t) = l {
            match prev {
                Label::B(p) | Label::I(p) if p == t => {}
                _ => return Some(i),
            }
        }
        prev = l;
    }
    None
}

/// Inclusive token span `[start, end]` with an entity type index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: usize,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: usize) -> Self {
        debug_assert!(start <= end);
        EntitySpan { start, end, etype }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},#{})", self.start, self.end, self.etype)
    }
}

/// Maximal `B-t (I-t)*` runs, sorted by start. Labels must be valid BIO.
pub fn spans_from_bio(labels: &[Label]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Label::I(t) if open.is_some_and(|(_, ot)| ot == t) => {}
            Label::B(t) | Label::I(t) => {
                if let Some((s, ot)) = open.take() {
                    spans.push(EntitySpan::new(s, i - 1, ot));
                }
                open = Some((i, t));
            }
            Label::O => {
                if let Some((s, ot)) = open.take() {
                    spans.push(EntitySpan::new(s, i - 1, ot));
                }
            }
        }
    }
    if let Some((s, ot)) = open {
        spans.push(EntitySpan::new(s, labels.len() - 1, ot));
    }
    spans
}

/// Exact inverse of [`spans_from_bio`] on non-overlapping in-bounds spans.
pub fn bio_from_spans(spans: &[EntitySpan], n: usize) -> Result<Vec<Label>> {
    check_spans(spans, n)?;
    let mut labels = vec![Label::O; n];
    for s in spans {
        labels[s.start] = Label::B(s.etype);
        for l in &mut labels[s.start + 1..=s.end] {
            *l = Label::I(s.etype);
        }
    }
    Ok(labels)
}

/// Bounds and pairwise overlap check.
pub fn check_spans(spans: &[EntitySpan], n: usize) -> Result<()> {
    for s in spans {
        if s.start > s.end || s.end >= n {
            return Err(Error::Contract(format!("span {s} out of bounds for length {n}")));
        }
    }
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0].overlaps(w[1]) {
            return Err(Error::Overlap {
                first: w[0].to_string(),
                second: w[1].to_string(),
            });
        }
    }
    Ok(())
}

/// An orphan `I-t` rewritten to `B-t` while reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repair {
    pub line: usize,
    pub sentence: usize,
    pub token: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCorpus {
    pub sentences: Vec<LabeledSentence>,
    pub repairs: Vec<Repair>,
}

/// Reads CoNLL column text. Raw sentences are token-only lines.
pub fn parse_conll(text: &str, schema: &TagSchema) -> Result<Vec<LabeledSentence>> {
    parse_conll_with_diagnostics(text, schema, "und").map(|p| p.sentences)
}

#[derive(Default)]
struct Block {
    first_line: usize,
    id: Option<String>,
    lang: Option<String>,
    tokens: Vec<String>,
    tags: Vec<Option<Label>>,
    tag_lines: Vec<usize>,
}

pub fn parse_conll_with_diagnostics(
    text: &str,
    schema: &TagSchema,
    default_language: &str,
) -> Result<ParsedCorpus> {
    let mut out = ParsedCorpus::default();
    let mut block = Block::default();

    let flush = |block: &mut Block, out: &mut ParsedCorpus| -> Result<()> {
        let b = std::mem::take(block);
        if b.tokens.is_empty() {
            return Ok(());
        }
        let labeled = b.tags.iter().filter(|t| t.is_some()).count();
        let labels = if labeled == 0 {
            None
        } else if labeled == b.tags.len() {
            let mut labels: Vec<Label> = b.tags.into_iter().map(Option::unwrap).collect();
            let idx = out.sentences.len();
            let mut prev = Label::O;
            for (i, l) in labels.iter_mut().enumerate() {
                if let Label::I(t) = *l {
                    let continues = matches!(prev, Label::B(p) | Label::I(p) if p == t);
                    if !continues {
                        log::warn!(
                            "line {}: orphan I-{} repaired to B-{}",
                            b.tag_lines[i],
                            schema.name(t),
                            schema.name(t)
                        );
                        out.repairs.push(Repair {
                            line: b.tag_lines[i],
                            sentence: idx,
                            token: i,
                        });
                        *l = Label::B(t);
                    }
                }
                prev = *l;
            }
            Some(labels)
        } else {
            return Err(Error::Format {
                line: b.first_line,
                msg: "sentence mixes labeled and unlabeled lines".into(),
            });
        };
        let id = b.id.unwrap_or_else(|| out.sentences.len().to_string());
        let lang = b.lang.unwrap_or_else(|| default_language.to_string());
        out.sentences.push(LabeledSentence {
            id,
            language: lang,
            tokens: b.tokens,
            labels,
        });
        Ok(())
    };

    for (lineno, raw_line) in text.split('\n').enumerate() {
        let line_no = lineno + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            flush(&mut block, &mut out)?;
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        if let Some(id) = line.strip_prefix("# id = ") {
            flush(&mut block, &mut out)?;
            block.id = Some(id.trim().to_string());
            continue;
        }
        if let Some(lang) = line.strip_prefix("# lang = ") {
            if !block.tokens.is_empty() {
                flush(&mut block, &mut out)?;
            }
            block.lang = Some(lang.trim().to_string());
            continue;
        }
        if line.starts_with(char::is_whitespace) {
            return Err(Error::Format {
                line: line_no,
                msg: "empty token".into(),
            });
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if block.tokens.is_empty() {
            block.first_line = line_no;
        }
        block.tokens.push(cols[0].to_string());
        block.tag_lines.push(line_no);
        if cols.len() == 1 {
            block.tags.push(None);
        } else {
            let tag = cols[cols.len() - 1];
            let label = schema.parse_label(tag).map_err(|e| {
                if e.starts_with("malformed") {
                    Error::Format { line: line_no, msg: e }
                } else {
                    Error::Schema { line: line_no, etype: e }
                }
            })?;
            block.tags.push(Some(label));
        }
    }
    flush(&mut block, &mut out)?;
    Ok(out)
}

/// Serializer symmetric to [`parse_conll`]; emits `# id` / `# lang`
/// comment lines so a round trip is lossless. Always LF.
pub fn write_conll(sentences: &[LabeledSentence], schema: &TagSchema) -> String {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        out.push_str("# id = ");
        out.push_str(&s.id);
        out.push('\n');
        out.push_str("# lang = ");
        out.push_str(&s.language);
        out.push('\n');
        for (i, tok) in s.tokens.iter().enumerate() {
            out.push_str(tok);
            if let Some(labels) = &s.labels {
                out.push('\t');
                out.push_str(&schema.label_str(labels[i]));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Report {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        F1Report {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn csv_header() -> &'static str {
        "tp,fp,fn,precision,recall,f1"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }
}

impl fmt::Display for F1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision {:.2}  recall {:.2}  F1 {:.2}  (tp {}, fp {}, fn {})",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            self.tp,
            self.fp,
            self.fn_
        )
    }
}

/// Micro-averaged exact-match entity F1 over paired sentences.
pub fn entity_f1(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<F1Report> {
    if gold.len() != pred.len() {
        return Err(Error::Pairing {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs: HashSet<&EntitySpan> = g.iter().collect();
        let ps: HashSet<&EntitySpan> = p.iter().collect();
        let hit = gs.intersection(&ps).count();
        tp += hit;
        fp += ps.len() - hit;
        fn_ += gs.len() - hit;
    }
    Ok(F1Report::from_counts(tp, fp, fn_))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn schema() -> TagSchema {
        TagSchema::xtreme()
    }

    const LOC: usize = 0;
    const PER: usize = 1;

    #[test]
    fn schema_rejects_empty_and_duplicates() {
        assert!(TagSchema::new(Vec::<String>::new()).is_err());
        assert!(TagSchema::new(["LOC", "LOC"]).is_err());
    }

    #[test]
    fn two_line_block() {
        let s = parse_conll("John B-PER\n.\tO\n", &schema()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, vec!["John", "."]);
        assert_eq!(s[0].labels, Some(vec![Label::B(PER), Label::O]));
    }

    #[test]
    fn orphan_inside_tag_is_repaired_and_logged() {
        let p = parse_conll_with_diagnostics("Paris I-LOC\nis O\n", &schema(), "en").unwrap();
        assert_eq!(p.sentences[0].labels, Some(vec![Label::B(LOC), Label::O]));
        assert_eq!(p.repairs, vec![Repair { line: 1, sentence: 0, token: 0 }]);
    }

    #[test]
    fn type_switch_inside_run_is_repaired() {
        let p = parse_conll_with_diagnostics("a B-PER\nb I-LOC\n", &schema(), "en").unwrap();
        assert_eq!(p.sentences[0].labels, Some(vec![Label::B(PER), Label::B(LOC)]));
        assert_eq!(p.repairs.len(), 1);
    }

    #[test]
    fn blocks_keep_order_and_skip_docstart() {
        let text = "-DOCSTART- -X- O O\n\nA B-LOC\n\r\nB O\nC B-PER\r\n";
        let s = parse_conll(text, &schema()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].tokens, vec!["A"]);
        assert_eq!(s[1].tokens, vec!["B", "C"]);
    }

    #[test]
    fn extra_columns_use_last_as_tag() {
        let s = parse_conll("EU NNP B-NP B-ORG\nrejects VBZ B-VP O\n", &schema()).unwrap();
        assert_eq!(s[0].labels, Some(vec![Label::B(2), Label::O]));
    }

    #[test]
    fn unknown_type_names_the_line() {
        let err = parse_conll("a O\nb B-FOO\n", &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_token_is_a_format_error() {
        let err = parse_conll("a O\n\tO\n", &schema()).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn raw_sentences_have_no_labels() {
        let s = parse_conll("x\ny\n", &schema()).unwrap();
        assert_eq!(s[0].labels, None);
        assert!(parse_conll("x O\ny\n", &schema()).is_err());
    }

    #[test]
    fn spans_from_bio_examples() {
        assert_eq!(
            spans_from_bio(&[Label::B(LOC), Label::I(LOC), Label::O]),
            vec![EntitySpan::new(0, 1, LOC)]
        );
        assert!(spans_from_bio(&[Label::O; 3]).is_empty());
        assert_eq!(
            spans_from_bio(&[Label::B(PER), Label::B(LOC), Label::I(LOC), Label::O, Label::B(PER)]),
            vec![
                EntitySpan::new(0, 0, PER),
                EntitySpan::new(1, 2, LOC),
                EntitySpan::new(4, 4, PER)
            ]
        );
    }

    #[test]
    fn bio_from_spans_examples() {
        assert_eq!(bio_from_spans(&[], 3).unwrap(), vec![Label::O; 3]);
        assert_eq!(
            bio_from_spans(&[EntitySpan::new(0, 1, LOC)], 3).unwrap(),
            vec![Label::B(LOC), Label::I(LOC), Label::O]
        );
        let err = bio_from_spans(&[EntitySpan::new(0, 2, LOC), EntitySpan::new(2, 3, PER)], 5)
            .unwrap_err();
        assert!(matches!(err, Error::Overlap { .. }));
    }

    /// Every set of non-overlapping spans over `n` tokens and `types` types.
    pub(crate) fn all_span_sets(n: usize, types: usize) -> Vec<Vec<EntitySpan>> {
        fn rec(pos: usize, n: usize, types: usize, cur: &mut Vec<EntitySpan>, out: &mut Vec<Vec<EntitySpan>>) {
            if pos >= n {
                out.push(cur.clone());
                return;
            }
            rec(pos + 1, n, types, cur, out);
            for end in pos..n {
                for t in 0..types {
                    cur.push(EntitySpan::new(pos, end, t));
                    rec(end + 1, n, types, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(0, n, types, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn bio_round_trip_exhaustive() {
        for n in 1..=6 {
            let sets = all_span_sets(n, 3);
            // Each token is O or starts/continues one of 3 types: the count of
            // distinct valid labelings.
            assert_eq!(sets.len(), count_bio_sequences(n, 3));
            for spans in sets {
                let labels = bio_from_spans(&spans, n).unwrap();
                assert_eq!(spans_from_bio(&labels), spans);
            }
        }
    }

    /// Brute-force count of valid BIO sequences by enumerating all 7^n tag
    /// strings and discarding orphans.
    fn count_bio_sequences(n: usize, types: usize) -> usize {
        let alphabet = 1 + 2 * types;
        let mut count = 0;
        let total = alphabet.pow(n as u32);
        for mut code in 0..total {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let c = code % alphabet;
                code /= alphabet;
                labels.push(match c {
                    0 => Label::O,
                    c if c <= types => Label::B(c - 1),
                    c => Label::I(c - 1 - types),
                });
            }
            if first_orphan(&labels).is_none() {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn f1_examples() {
        let g = vec![vec![
            EntitySpan::new(0, 0, 0),
            EntitySpan::new(1, 1, 0),
            EntitySpan::new(2, 3, 1),
            EntitySpan::new(5, 5, 2),
            EntitySpan::new(7, 8, 0),
        ]];
        let r = entity_f1(&g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let r = entity_f1(&g, &[vec![]]).unwrap();
        assert_eq!((r.recall, r.f1), (0.0, 0.0));

        let r = F1Report::from_counts(1, 1, 2);
        assert!((r.precision - 0.5).abs() < 1e-12);
        assert!((r.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.4).abs() < 1e-12);

        assert!(matches!(entity_f1(&g, &[]), Err(Error::Pairing { gold: 1, pred: 0 })));
    }

    #[test]
    fn zero_denominators_give_zero() {
        let r = F1Report::from_counts(0, 0, 0);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_sentence() -> impl Strategy<Value = LabeledSentence> {
            (1usize..8, any::<u64>(), prop::bool::ANY).prop_map(|(n, bits, labeled)| {
                let tokens: Vec<String> = (0..n).map(|i| format!("w{}_{}", i, bits % 97)).collect();
                let labels = labeled.then(|| {
                    let sets = all_span_sets(n.min(4), 3);
                    let spans = &sets[(bits as usize) % sets.len()];
                    bio_from_spans(spans, n).unwrap()
                });
                LabeledSentence::new(format!("id{bits}"), "en", tokens, labels).unwrap()
            })
        }

        proptest! {
            #[test]
            fn conll_round_trip(sents in prop::collection::vec(arb_sentence(), 0..6)) {
                let schema = TagSchema::xtreme();
                let text = write_conll(&sents, &schema);
                let back = parse_conll(&text, &schema).unwrap();
                prop_assert_eq!(back, sents);
            }

            #[test]
            fn f1_swap_exchanges_precision_and_recall(
                a in prop::collection::vec(0usize..40, 0..10),
                b in prop::collection::vec(0usize..40, 0..10),
            ) {
                let sets = all_span_sets(3, 3);
                let g: Vec<Vec<EntitySpan>> = a.iter().map(|&i| sets[i % sets.len()].clone()).collect();
                let p: Vec<Vec<EntitySpan>> = b.iter().chain(std::iter::repeat(&0)).take(g.len())
                    .map(|&i| sets[i % sets.len()].clone()).collect();
                let r1 = entity_f1(&g, &p).unwrap();
                let r2 = entity_f1(&p, &g).unwrap();
                prop_assert_eq!(r1.precision, r2.recall);
                prop_assert_eq!(r1.recall, r2.precision);
                prop_assert!((r1.f1 - r2.f1).abs() < 1e-12);
            }
        }
    }
}
