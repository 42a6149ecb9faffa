//! Code-switched counterparts and the token / relation-cell alignments
//! between a source sentence and its counterpart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bio_from_spans, EntitySpan, LabeledSentence};
use crate::error::{Error, Result};
use crate::relcodec::{RelationClass, RelationGrid};
use crate::rng::{fnv1a64, mix64, rng_for};
use crate::synth::BilingualLexicon;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    EntitiesOnly,
    /// Also non-entity phrases found verbatim in the lexicon, matched
    /// greedily left to right, longest first.
    EntitiesAndPhrases,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeSwitchConfig {
    pub p_substitute: f64,
    pub scope: Scope,
    pub seed: u64,
}

impl Default for CodeSwitchConfig {
    fn default() -> Self {
        CodeSwitchConfig {
            p_substitute: 0.5,
            scope: Scope::EntitiesOnly,
            seed: 0,
        }
    }
}

impl CodeSwitchConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.p_substitute) {
            Ok(())
        } else {
            Err(Error::Config(format!("p_substitute {} outside [0, 1]", self.p_substitute)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub source: LabeledSentence,
    pub switched: LabeledSentence,
    /// Inclusive image `(lo, hi)` of every source token.
    pub token_map: Vec<(usize, usize)>,
    /// Replaced source phrases `(start, end)`, inclusive, sorted.
    pub substituted: Vec<(usize, usize)>,
}

impl AlignedPair {
    /// The trivial pair of a sentence with itself.
    pub fn identity(sentence: &LabeledSentence) -> Self {
        AlignedPair {
            source: sentence.clone(),
            switched: sentence.clone(),
            token_map: (0..sentence.len()).map(|i| (i, i)).collect(),
            substituted: Vec::new(),
        }
    }

    fn phrase_of(&self, i: usize) -> Option<(usize, usize)> {
        self.substituted.iter().copied().find(|&(s, e)| s <= i && i <= e)
    }

    fn image_len(&self, (s, e): (usize, usize)) -> usize {
        self.token_map[e].1 + 1 - self.token_map[s].0
    }
}

/// Aligned relation cells: `((i, j) in the source grid, (a, b) in the
/// counterpart grid)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAlignment {
    pub pairs: Vec<((usize, usize), (usize, usize))>,
}

impl RelationAlignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every non-`NONE` cell of `grid` aligned with itself.
    pub fn identity(grid: &RelationGrid) -> Self {
        RelationAlignment {
            pairs: grid.non_none().into_iter().map(|(i, j, _)| ((i, j), (i, j))).collect(),
        }
    }
}

/// Candidate phrases `(start, end, is_entity)`, sorted by start.
fn candidates(sentence: &LabeledSentence, lexicon: &BilingualLexicon, scope: Scope) -> Vec<(usize, usize, bool)> {
    let spans = sentence.spans();
    let mut out: Vec<(usize, usize, bool)> = spans.iter().map(|s| (s.start, s.end, true)).collect();
    if scope == Scope::EntitiesAndPhrases {
        let mut outside = vec![true; sentence.len()];
        for s in &spans {
            outside[s.start..=s.end].iter_mut().for_each(|o| *o = false);
        }
        let max_len = lexicon.max_source_len();
        let mut i = 0;
        while i < sentence.len() {
            let mut matched = 0;
            if outside[i] {
                for len in (1..=max_len.min(sentence.len() - i)).rev() {
                    if outside[i..i + len].iter().all(|&o| o) && lexicon.get(&sentence.tokens[i..i + len]).is_some() {
                        matched = len;
                        break;
                    }
                }
            }
            if matched > 0 {
                out.push((i, i + matched - 1, false));
                i += matched;
            } else {
                i += 1;
            }
        }
    }
    out.sort();
    out
}

/// One code-switch draw. `draw` selects an independent re-sample for the
/// same sentence (0 for the fixed per-corpus draw).
pub fn make_codeswitch_draw(sentence: &LabeledSentence, lexicon: &BilingualLexicon, cfg: &CodeSwitchConfig, draw: u64) -> Result<AlignedPair> {
    let labels = sentence
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sentence {} has no labels", sentence.id)))?;
    let mut rng = rng_for(
        mix64(cfg.seed ^ draw.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        "codeswitch",
        fnv1a64(sentence.id.as_bytes()),
    );
    let mut chosen = Vec::new();
    for (s, e, is_entity) in candidates(sentence, lexicon, cfg.scope) {
        let u: f64 = rng.gen();
        if u >= cfg.p_substitute {
            continue;
        }
        match lexicon.get(&sentence.tokens[s..=e]) {
            Some(img) => chosen.push((s, e, img.to_vec())),
            None => {
                debug_assert!(is_entity);
                log::debug!(
                    "sentence {}: no lexicon entry for `{}`, kept in source language",
                    sentence.id,
                    sentence.tokens[s..=e].join(" ")
                );
            }
        }
    }

    let mut tokens = Vec::new();
    let mut token_map = vec![(0, 0); sentence.len()];
    let mut substituted = Vec::new();
    let mut next = chosen.into_iter().peekable();
    let mut i = 0;
    while i < sentence.len() {
        match next.peek() {
            Some((s, _, _)) if *s == i => {
                let (s, e, img) = next.next().unwrap();
                let lo = tokens.len();
                let (l, m) = (e - s + 1, img.len());
                for k in 0..l {
                    token_map[s + k] = if m >= l {
                        (lo + k * m / l, lo + (k + 1) * m / l - 1)
                    } else {
                        let p = lo + k * m / l;
                        (p, p)
                    };
                }
                tokens.extend(img);
                substituted.push((s, e));
                i = e + 1;
            }
            _ => {
                token_map[i] = (tokens.len(), tokens.len());
                tokens.push(sentence.tokens[i].clone());
                i += 1;
            }
        }
    }
    let spans: Vec<EntitySpan> = sentence
        .spans()
        .iter()
        .map(|sp| EntitySpan::new(token_map[sp.start].0, token_map[sp.end].1, sp.etype))
        .collect();
    debug_assert_eq!(labels.len(), sentence.len());
    let new_labels = bio_from_spans(&spans, tokens.len())?;
    let switched = LabeledSentence::new(sentence.id.clone(), sentence.language.clone(), tokens, Some(new_labels))?;
    Ok(AlignedPair {
        source: sentence.clone(),
        switched,
        token_map,
        substituted,
    })
}

pub fn make_codeswitch(sentence: &LabeledSentence, lexicon: &BilingualLexicon, cfg: &CodeSwitchConfig) -> Result<AlignedPair> {
    make_codeswitch_draw(sentence, lexicon, cfg, 0)
}

pub fn align_relations(pair: &AlignedPair, src_grid: &RelationGrid) -> RelationAlignment {
    let map = &pair.token_map;
    let mut pairs = Vec::new();
    for (i, j, c) in src_grid.non_none() {
        match c {
            RelationClass::Se(_) if j <= i => pairs.push(((i, j), (map[i].1, map[j].0))),
            RelationClass::Nb if j == i + 1 => {
                let (pi, pj) = (pair.phrase_of(i), pair.phrase_of(j));
                let inside_resized = match (pi, pj) {
                    (Some(a), Some(b)) => a != b || pair.image_len(a) != a.1 - a.0 + 1,
                    _ => false,
                };
                if !inside_resized {
                    pairs.push(((i, j), (map[i].1, map[j].0)));
                }
            }
            _ => {}
        }
    }
    RelationAlignment { pairs }
}

/// One line of the alignment sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub id: String,
    pub token_map: Vec<(usize, usize)>,
    pub substituted: Vec<(usize, usize)>,
    pub pairs: Vec<((usize, usize), (usize, usize))>,
}

impl SidecarRecord {
    pub fn new(pair: &AlignedPair, alignment: &RelationAlignment) -> Self {
        SidecarRecord {
            id: pair.source.id.clone(),
            token_map: pair.token_map.clone(),
            substituted: pair.substituted.clone(),
            pairs: alignment.pairs.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, TagSchema};
    use crate::relcodec::{decode_grid, encode_grid};
    use crate::synth::{generate, SynthConfig};

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn sent(tokens: &str, labels: Vec<Label>) -> LabeledSentence {
        LabeledSentence::new("t1", "src", w(tokens), Some(labels)).unwrap()
    }

    fn full(p: f64) -> CodeSwitchConfig {
        CodeSwitchConfig {
            p_substitute: p,
            ..Default::default()
        }
    }

    #[test]
    fn p_zero_is_identity() {
        let corpus = generate(&SynthConfig {
            n_sentences: 50,
            ..Default::default()
        })
        .unwrap();
        for s in &corpus.source {
            let pair = make_codeswitch(s, &corpus.lexicon, &full(0.0)).unwrap();
            assert_eq!(pair, AlignedPair::identity(s));
            let g = encode_grid(&s.spans(), s.len(), &TagSchema::xtreme()).unwrap();
            assert_eq!(align_relations(&pair, &g), RelationAlignment::identity(&g));
        }
    }

    #[test]
    fn equal_length_full_substitution_keeps_length() {
        let mut lex = BilingualLexicon::new();
        lex.insert(w("great wall"), w("chang cheng")).unwrap();
        let s = sent("see the great wall", vec![Label::O, Label::O, Label::B(0), Label::I(0)]);
        let pair = make_codeswitch(&s, &lex, &full(1.0)).unwrap();
        assert_eq!(pair.switched.tokens, w("see the chang cheng"));
        assert_eq!(pair.switched.len(), s.len());
        let g = encode_grid(&s.spans(), 4, &TagSchema::xtreme()).unwrap();
        let a = align_relations(&pair, &g);
        // SE cell and the internal NB cell
        assert_eq!(a.len(), 2);
        assert_eq!(a.pairs, vec![((2, 3), (2, 3)), ((3, 2), (3, 2))]);
    }

    #[test]
    fn mixed_sentence_keeps_both_labels() {
        // one entity stays in the source language, a second phrase is replaced
        let mut lex = BilingualLexicon::new();
        lex.insert(w("great wall"), w("chang cheng")).unwrap();
        lex.insert(w("i want to go to"), w("wo yao qu")).unwrap();
        let s = sent(
            "i want to go to beijing to see the great wall",
            vec![
                Label::O,
                Label::O,
                Label::O,
                Label::O,
                Label::O,
                Label::B(0),
                Label::O,
                Label::O,
                Label::O,
                Label::B(0),
                Label::I(0),
            ],
        );
        let cfg = CodeSwitchConfig {
            p_substitute: 1.0,
            scope: Scope::EntitiesAndPhrases,
            seed: 0,
        };
        let pair = make_codeswitch(&s, &lex, &cfg).unwrap();
        assert_eq!(pair.switched.tokens, w("wo yao qu beijing to see the chang cheng"));
        assert_eq!(
            pair.switched.spans(),
            vec![EntitySpan::new(3, 3, 0), EntitySpan::new(7, 8, 0)]
        );
        assert_eq!(pair.substituted, vec![(0, 4), (9, 10)]);
    }

    #[test]
    fn longer_image_maps_se_to_outer_tokens() {
        let mut lex = BilingualLexicon::new();
        lex.insert(w("new york"), w("nu yo ku")).unwrap();
        let s = sent("in new york today", vec![Label::O, Label::B(0), Label::I(0), Label::O]);
        let pair = make_codeswitch(&s, &lex, &full(1.0)).unwrap();
        assert_eq!(pair.token_map, vec![(0, 0), (1, 1), (2, 3), (4, 4)]);
        let g = encode_grid(&s.spans(), 4, &TagSchema::xtreme()).unwrap();
        let a = align_relations(&pair, &g);
        // NB inside a resized phrase is not aligned
        assert_eq!(a.pairs, vec![((2, 1), (3, 1))]);
    }

    #[test]
    fn shorter_image_collapses_tokens() {
        let mut lex = BilingualLexicon::new();
        lex.insert(w("a b c"), w("x y")).unwrap();
        let s = sent("a b c", vec![Label::B(1), Label::I(1), Label::I(1)]);
        let pair = make_codeswitch(&s, &lex, &full(1.0)).unwrap();
        assert_eq!(pair.token_map, vec![(0, 0), (0, 0), (1, 1)]);
        assert_eq!(pair.switched.spans(), vec![EntitySpan::new(0, 1, 1)]);
    }

    #[test]
    fn missing_entry_is_skipped() {
        let s = sent("rome", vec![Label::B(0)]);
        let pair = make_codeswitch(&s, &BilingualLexicon::new(), &full(1.0)).unwrap();
        assert_eq!(pair, AlignedPair::identity(&s));
    }

    #[test]
    fn deterministic_per_seed_and_id() {
        let corpus = generate(&SynthConfig {
            n_sentences: 40,
            ..Default::default()
        })
        .unwrap();
        let cfg = full(0.5);
        let mut differs = false;
        for s in &corpus.source {
            let a = make_codeswitch(s, &corpus.lexicon, &cfg).unwrap();
            let b = make_codeswitch(s, &corpus.lexicon, &cfg).unwrap();
            assert_eq!(a, b);
            let c = make_codeswitch_draw(s, &corpus.lexicon, &cfg, 1).unwrap();
            differs |= c != a;
        }
        assert!(differs);
    }

    #[test]
    fn mapped_se_cells_reproduce_switched_spans() {
        let schema = TagSchema::xtreme();
        let corpus = generate(&SynthConfig {
            n_sentences: 200,
            ..Default::default()
        })
        .unwrap();
        for p in [0.3, 0.5, 1.0] {
            for s in &corpus.source {
                let pair = make_codeswitch(s, &corpus.lexicon, &full(p)).unwrap();
                let g = encode_grid(&s.spans(), s.len(), &schema).unwrap();
                let a = align_relations(&pair, &g);
                let sw_spans = pair.switched.spans();
                let sw_grid = encode_grid(&sw_spans, pair.switched.len(), &schema).unwrap();
                let mut mapped = RelationGrid::empty(pair.switched.len());
                for &((i, j), (x, y)) in &a.pairs {
                    mapped.set(x, y, g.get(i, j));
                    assert_eq!(sw_grid.get(x, y), g.get(i, j));
                }
                // SE cells of the image plus the image's NB chain decode exactly
                for i in 0..pair.switched.len().saturating_sub(1) {
                    if sw_grid.get(i, i + 1) == RelationClass::Nb {
                        mapped.set(i, i + 1, RelationClass::Nb);
                    }
                }
                assert_eq!(decode_grid(&mapped), sw_spans);
                let non_none = g.non_none().len();
                assert!(a.len() <= non_none);
                if pair.substituted.iter().all(|&(a, b)| pair.image_len((a, b)) == b - a + 1) {
                    assert_eq!(a.len(), non_none);
                }
            }
        }
    }
}
