//! Entity spans as token-pair relation grids.
//!
//! A span `(s, e, t)` becomes `SE(t)` at cell `(e, s)` (lower triangle, the
//! diagonal for single tokens) plus `NB` at every `(i, i+1)` with
//! `s <= i < e`. Everything else is `NONE`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{check_spans, EntitySpan, TagSchema};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelationClass {
    None,
    Nb,
    Se(usize),
}

impl RelationClass {
    pub fn index(self) -> usize {
        match self {
            RelationClass::None => 0,
            RelationClass::Nb => 1,
            RelationClass::Se(t) => 2 + t,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => RelationClass::None,
            1 => RelationClass::Nb,
            t => RelationClass::Se(t - 2),
        }
    }

    /// `NONE`, `NB` or `SE-<type>`.
    pub fn name(self, schema: &TagSchema) -> String {
        match self {
            RelationClass::None => "NONE".into(),
            RelationClass::Nb => "NB".into(),
            RelationClass::Se(t) => format!("SE-{}", schema.name(t)),
        }
    }

    pub fn parse(name: &str, schema: &TagSchema) -> Option<Self> {
        match name {
            "NONE" => Some(RelationClass::None),
            "NB" => Some(RelationClass::Nb),
            _ => name
                .strip_prefix("SE-")
                .and_then(|t| schema.index_of(t))
                .map(RelationClass::Se),
        }
    }
}

/// Number of relation classes for a schema.
pub fn num_classes(schema: &TagSchema) -> usize {
    2 + schema.len()
}

#[derive(Clone, PartialEq, Eq)]
pub struct RelationGrid {
    n: usize,
    cells: Vec<RelationClass>,
}

impl fmt::Debug for RelationGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "RelationGrid n={}", self.n)?;
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.get(i, j).index().to_string()).collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        Ok(())
    }
}

impl RelationGrid {
    pub fn empty(n: usize) -> Self {
        RelationGrid {
            n,
            cells: vec![RelationClass::None; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> RelationClass {
        self.cells[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, c: RelationClass) {
        self.cells[i * self.n + j] = c;
    }

    pub fn cells(&self) -> &[RelationClass] {
        &self.cells
    }

    /// Class indices in row-major order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.index()).collect()
    }

    /// `(i, j, class)` for every non-`NONE` cell, row-major.
    pub fn non_none(&self) -> Vec<(usize, usize, RelationClass)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                let c = self.get(i, j);
                if c != RelationClass::None {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    /// Whether `c` may legally sit at `(i, j)`.
    pub fn placement_ok(i: usize, j: usize, c: RelationClass) -> bool {
        match c {
            RelationClass::None => true,
            RelationClass::Nb => j == i + 1,
            RelationClass::Se(_) => j <= i,
        }
    }
}

pub fn encode_grid(spans: &[EntitySpan], n: usize, schema: &TagSchema) -> Result<RelationGrid> {
    check_spans(spans, n)?;
    let mut grid = RelationGrid::empty(n);
    for s in spans {
        if s.etype >= schema.len() {
            return Err(Error::Contract(format!("span {s} has no type in the schema")));
        }
        grid.set(s.end, s.start, RelationClass::Se(s.etype));
        for i in s.start..s.end {
            grid.set(i, i + 1, RelationClass::Nb);
        }
    }
    Ok(grid)
}

/// Decoding result with diagnostics.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Decoded {
    pub spans: Vec<EntitySpan>,
    /// Cells whose class is illegal at their position; read as `NONE`.
    pub misplaced: usize,
    /// Some `SE` cell had an incomplete `NB` chain.
    pub had_broken_chain: bool,
}

pub fn decode_grid(grid: &RelationGrid) -> Vec<EntitySpan> {
    decode_grid_detailed(grid).spans
}

pub fn decode_grid_detailed(grid: &RelationGrid) -> Decoded {
    let n = grid.n;
    let mut misplaced = 0;
    let mut nb = vec![false; n.saturating_sub(1)];
    let mut candidates = Vec::new();
    for (i, j, c) in grid.non_none() {
        if !RelationGrid::placement_ok(i, j, c) {
            misplaced += 1;
            continue;
        }
        match c {
            RelationClass::Nb => nb[i] = true,
            RelationClass::Se(t) => candidates.push(EntitySpan::new(j, i, t)),
            RelationClass::None => {}
        }
    }
    let mut had_broken_chain = false;
    candidates.retain(|s| {
        let ok = (s.start..s.end).all(|i| nb[i]);
        had_broken_chain |= !ok;
        ok
    });
    candidates.sort_by_key(|s| (std::cmp::Reverse(s.len()), s.start));
    let mut accepted: Vec<EntitySpan> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| !a.overlaps(&c)) {
            accepted.push(c);
        }
    }
    accepted.sort();
    Decoded {
        spans: accepted,
        misplaced,
        had_broken_chain,
    }
}

/// Per-cell class distributions, `n × n × R`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredGrid {
    n: usize,
    r: usize,
    probs: Vec<f64>,
}

impl ScoredGrid {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(n: usize, r: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * n * r || r == 0 {
            return Err(Error::Shape {
                op: "scored_grid",
                lhs: vec![n, n, r],
                rhs: vec![probs.len()],
            });
        }
        for (k, cell) in probs.chunks_exact(r).enumerate() {
            let sum: f64 = cell.iter().sum();
            if cell.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::numeric(
                    "scored_grid",
                    format!("cell ({}, {}) is not a distribution (sum {sum})", k / n, k % n),
                ));
            }
        }
        Ok(ScoredGrid { n, r, probs })
    }

    /// One-hot distributions of a hard grid.
    pub fn one_hot(grid: &RelationGrid, r: usize) -> Self {
        let mut probs = vec![0.0; grid.n * grid.n * r];
        for (k, c) in grid.cells.iter().enumerate() {
            probs[k * r + c.index()] = 1.0;
        }
        ScoredGrid { n: grid.n, r, probs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.r
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.n + j) * self.r;
        &self.probs[k..k + self.r]
    }

    /// Argmax class and its probability; ties go to the lowest index.
    pub fn argmax(&self, i: usize, j: usize) -> (usize, f64) {
        let cell = self.cell(i, j);
        let mut best = 0;
        for (c, &p) in cell.iter().enumerate().skip(1) {
            if p > cell[best] {
                best = c;
            }
        }
        (best, cell[best])
    }

    pub fn hard(&self) -> RelationGrid {
        let mut g = RelationGrid::empty(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                g.set(i, j, RelationClass::from_index(self.argmax(i, j).0));
            }
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDecode {
    pub spans: Vec<EntitySpan>,
    /// Minimum constituent-cell argmax probability, one per span.
    pub entity_confidence: Vec<f64>,
    /// Minimum over entities, 1.0 without entities.
    pub confidence: f64,
    pub had_broken_chain: bool,
    pub misplaced: usize,
}

pub fn decode_scored(scored: &ScoredGrid) -> ScoredDecode {
    let d = decode_grid_detailed(&scored.hard());
    let entity_confidence: Vec<f64> = d
        .spans
        .iter()
        .map(|s| {
            let mut c = scored.argmax(s.end, s.start).1;
            for i in s.start..s.end {
                c = c.min(scored.argmax(i, i + 1).1);
            }
            c
        })
        .collect();
    let confidence = entity_confidence.iter().copied().fold(1.0, f64::min);
    ScoredDecode {
        spans: d.spans,
        entity_confidence,
        confidence,
        had_broken_chain: d.had_broken_chain,
        misplaced: d.misplaced,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoFilterConfig {
    pub confidence_threshold: f64,
    pub drop_all_o: bool,
    pub drop_discontinuous: bool,
}

impl Default for PseudoFilterConfig {
    fn default() -> Self {
        PseudoFilterConfig {
            confidence_threshold: 0.7,
            drop_all_o: true,
            drop_discontinuous: true,
        }
    }
}

impl PseudoFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.confidence_threshold) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "confidence_threshold {} outside [0, 1]",
                self.confidence_threshold
            )))
        }
    }
}

/// A decoded sentence awaiting filtering. `payload` rides along untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoItem<P> {
    pub payload: P,
    pub spans: Vec<EntitySpan>,
    pub confidence: f64,
    pub had_broken_chain: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub total: usize,
    pub kept: usize,
    pub dropped_all_o: usize,
    pub dropped_discontinuous: usize,
    pub dropped_threshold: usize,
}

/// Applies the rules in order all-O, discontinuous, threshold; each dropped
/// item is attributed to the first rule that fires. Order is preserved.
pub fn filter_pseudo<P>(items: Vec<PseudoItem<P>>, cfg: &PseudoFilterConfig) -> (Vec<PseudoItem<P>>, FilterCounts) {
    let mut counts = FilterCounts {
        total: items.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for item in items {
        if cfg.drop_all_o && item.spans.is_empty() {
            counts.dropped_all_o += 1;
        } else if cfg.drop_discontinuous && item.had_broken_chain {
            counts.dropped_discontinuous += 1;
        } else if item.confidence < cfg.confidence_threshold {
            counts.dropped_threshold += 1;
        } else {
            kept.push(item);
        }
    }
    counts.kept = kept.len();
    (kept, counts)
}

pub const GRID_CSV_HEADER: &str = "sentence,i,j,class";
pub const PROBS_CSV_HEADER: &str = "sentence,i,j,class,prob";

/// All `n²` cells, row-major.
pub fn grid_csv_rows(sentence: &str, grid: &RelationGrid, schema: &TagSchema, out: &mut String) {
    for i in 0..grid.n {
        for j in 0..grid.n {
            out.push_str(&format!("{sentence},{i},{j},{}\n", grid.get(i, j).name(schema)));
        }
    }
}

pub fn probs_csv_rows(sentence: &str, scored: &ScoredGrid, schema: &TagSchema, out: &mut String) {
    for i in 0..scored.n {
        for j in 0..scored.n {
            for (c, p) in scored.cell(i, j).iter().enumerate() {
                let name = RelationClass::from_index(c).name(schema);
                out.push_str(&format!("{sentence},{i},{j},{name},{p}\n"));
            }
        }
    }
}

/// Reads grid CSV back into `(sentence id, grid)` pairs in first-seen
/// order. Cells not listed are `NONE`; `n` is one past the largest index.
pub fn parse_grid_csv(text: &str, schema: &TagSchema) -> Result<Vec<(String, RelationGrid)>> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: std::collections::HashMap<String, Vec<(usize, usize, RelationClass)>> = Default::default();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (k == 0 && line == GRID_CSV_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::Format {
            line: line_no,
            msg: msg.to_string(),
        };
        if f.len() != 4 {
            return Err(bad("expected 4 comma-separated fields"));
        }
        let i: usize = f[1].parse().map_err(|_| bad("bad row index"))?;
        let j: usize = f[2].parse().map_err(|_| bad("bad column index"))?;
        let c = RelationClass::parse(f[3], schema).ok_or_else(|| Error::Schema {
            line: line_no,
            etype: f[3].to_string(),
        })?;
        if !cells.contains_key(f[0]) {
            order.push(f[0].to_string());
        }
        cells.entry(f[0].to_string()).or_default().push((i, j, c));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let list = &cells[&id];
            let n = list.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
            let mut g = RelationGrid::empty(n);
            for &(i, j, c) in list {
                g.set(i, j, c);
            }
            (id, g)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::all_span_sets;
    use proptest::prelude::*;

    fn schema() -> TagSchema {
        TagSchema::xtreme()
    }
    const LOC: usize = 0;
    const PER: usize = 1;

    #[test]
    fn class_indices() {
        assert_eq!(num_classes(&schema()), 5);
        assert_eq!(num_classes(&TagSchema::conll()), 6);
        for i in 0..5 {
            assert_eq!(RelationClass::from_index(i).index(), i);
        }
        assert_eq!(RelationClass::Se(PER).name(&schema()), "SE-PER");
        assert_eq!(RelationClass::parse("SE-ORG", &schema()), Some(RelationClass::Se(2)));
    }

    #[test]
    fn encode_empty() {
        let g = encode_grid(&[], 3, &schema()).unwrap();
        assert_eq!(g, RelationGrid::empty(3));
    }

    #[test]
    fn encode_multi_token_span() {
        let g = encode_grid(&[EntitySpan::new(1, 3, PER)], 5, &schema()).unwrap();
        assert_eq!(g.get(3, 1), RelationClass::Se(PER));
        assert_eq!(g.get(1, 2), RelationClass::Nb);
        assert_eq!(g.get(2, 3), RelationClass::Nb);
        let none = g.cells().iter().filter(|&&c| c == RelationClass::None).count();
        assert_eq!(none, 22);
    }

    #[test]
    fn encode_single_token_on_diagonal() {
        let g = encode_grid(&[EntitySpan::new(2, 2, LOC)], 4, &schema()).unwrap();
        assert_eq!(g.non_none(), vec![(2, 2, RelationClass::Se(LOC))]);
    }

    #[test]
    fn encode_rejects_overlap() {
        let spans = [EntitySpan::new(0, 2, LOC), EntitySpan::new(2, 3, PER)];
        assert!(matches!(encode_grid(&spans, 5, &schema()), Err(Error::Overlap { .. })));
    }

    #[test]
    fn round_trip_exhaustive() {
        for n in 1..=6 {
            for spans in all_span_sets(n, 3) {
                let g = encode_grid(&spans, n, &schema()).unwrap();
                let nb: usize = spans.iter().map(|s| s.len() - 1).sum();
                assert_eq!(g.non_none().len(), spans.len() + nb);
                let d = decode_grid_detailed(&g);
                assert_eq!(d.spans, spans);
                assert!(!d.had_broken_chain);
                assert_eq!(d.misplaced, 0);
            }
        }
    }

    #[test]
    fn broken_chain_rejects() {
        let mut g = RelationGrid::empty(5);
        g.set(3, 1, RelationClass::Se(LOC));
        g.set(1, 2, RelationClass::Nb);
        let d = decode_grid_detailed(&g);
        assert!(d.spans.is_empty());
        assert!(d.had_broken_chain);
    }

    #[test]
    fn longer_span_wins_overlap() {
        let mut g = RelationGrid::empty(4);
        g.set(2, 0, RelationClass::Se(PER));
        g.set(0, 1, RelationClass::Nb);
        g.set(1, 2, RelationClass::Nb);
        g.set(1, 1, RelationClass::Se(LOC));
        assert_eq!(decode_grid(&g), vec![EntitySpan::new(0, 2, PER)]);
    }

    #[test]
    fn equal_length_tie_goes_left() {
        let mut g = RelationGrid::empty(3);
        g.set(0, 1, RelationClass::Nb);
        g.set(1, 2, RelationClass::Nb);
        g.set(1, 0, RelationClass::Se(LOC));
        g.set(2, 1, RelationClass::Se(PER));
        assert_eq!(decode_grid(&g), vec![EntitySpan::new(0, 1, LOC)]);
    }

    #[test]
    fn misplaced_cells_are_ignored_and_counted() {
        let mut g = RelationGrid::empty(3);
        g.set(0, 2, RelationClass::Se(LOC));
        g.set(2, 0, RelationClass::Nb);
        let d = decode_grid_detailed(&g);
        assert!(d.spans.is_empty());
        assert_eq!(d.misplaced, 2);
    }

    fn uniform(n: usize, r: usize) -> ScoredGrid {
        ScoredGrid::new(n, r, vec![1.0 / r as f64; n * n * r]).unwrap()
    }

    #[test]
    fn scored_one_hot_matches_hard_decode() {
        for spans in all_span_sets(4, 3) {
            let g = encode_grid(&spans, 4, &schema()).unwrap();
            let d = decode_scored(&ScoredGrid::one_hot(&g, 5));
            assert_eq!(d.spans, decode_grid(&g));
            assert_eq!(d.confidence, 1.0);
        }
    }

    #[test]
    fn scored_confidence_is_weakest_cell() {
        let g = encode_grid(&[EntitySpan::new(0, 1, LOC)], 2, &schema()).unwrap();
        let mut s = ScoredGrid::one_hot(&g, 5);
        // NB cell (0,1): 0.62 on NB, rest spread
        let k = 5;
        s.probs[k..2 * k].copy_from_slice(&[0.2, 0.62, 0.1, 0.05, 0.03]);
        let s = ScoredGrid::new(2, 5, s.probs).unwrap();
        let d = decode_scored(&s);
        assert_eq!(d.spans, vec![EntitySpan::new(0, 1, LOC)]);
        assert!((d.confidence - 0.62).abs() < 1e-12);
        assert_eq!(d.entity_confidence, vec![d.confidence]);
    }

    #[test]
    fn uniform_scores_decode_to_nothing() {
        let d = decode_scored(&uniform(4, 5));
        assert!(d.spans.is_empty());
        assert_eq!(d.confidence, 1.0);
    }

    #[test]
    fn scored_grid_validates_normalization() {
        assert!(ScoredGrid::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(ScoredGrid::new(1, 2, vec![0.5]).is_err());
    }

    fn item(name: &str, spans: usize, conf: f64, broken: bool) -> PseudoItem<String> {
        PseudoItem {
            payload: name.to_string(),
            spans: (0..spans).map(|i| EntitySpan::new(i, i, 0)).collect(),
            confidence: conf,
            had_broken_chain: broken,
        }
    }

    #[test]
    fn filter_rules() {
        let cfg = PseudoFilterConfig::default();
        let (kept, c) = filter_pseudo(vec![item("o", 0, 1.0, false)], &cfg);
        assert!(kept.is_empty());
        assert_eq!(c.dropped_all_o, 1);

        let (kept, _) = filter_pseudo(vec![item("edge", 1, 0.71, false)], &cfg);
        assert_eq!(kept.len(), 1);

        let batch = vec![
            item("all-o", 0, 1.0, false),
            item("broken", 1, 0.9, true),
            item("weak", 1, 0.5, false),
            item("clean", 2, 0.8, false),
        ];
        let (kept, c) = filter_pseudo(batch, &cfg);
        assert_eq!(kept.iter().map(|i| i.payload.as_str()).collect::<Vec<_>>(), ["clean"]);
        assert_eq!(
            (c.dropped_all_o, c.dropped_discontinuous, c.dropped_threshold, c.kept, c.total),
            (1, 1, 1, 1, 4)
        );
    }

    #[test]
    fn filter_attribution_is_first_match() {
        let cfg = PseudoFilterConfig::default();
        let (_, c) = filter_pseudo(vec![item("x", 0, 0.1, true), item("y", 1, 0.1, true)], &cfg);
        assert_eq!((c.dropped_all_o, c.dropped_discontinuous, c.dropped_threshold), (1, 1, 0));
    }

    #[test]
    fn grid_csv_round_trip() {
        let s = schema();
        let g = encode_grid(&[EntitySpan::new(0, 1, PER), EntitySpan::new(3, 3, LOC)], 4, &s).unwrap();
        let mut text = format!("{GRID_CSV_HEADER}\n");
        grid_csv_rows("s1", &g, &s, &mut text);
        assert_eq!(text.lines().count(), 17);
        let back = parse_grid_csv(&text, &s).unwrap();
        assert_eq!(back, vec![("s1".to_string(), g)]);
    }

    fn arb_grid() -> impl Strategy<Value = RelationGrid> {
        (1usize..8).prop_flat_map(|n| {
            prop::collection::vec(prop_oneof![6 => Just(0usize), 2 => Just(1usize), 2 => 2usize..5], n * n)
                .prop_map(move |idx| {
                    let mut g = RelationGrid::empty(n);
                    for (k, c) in idx.into_iter().enumerate() {
                        let (i, j) = (k / n, k % n);
                        let c = RelationClass::from_index(c);
                        if RelationGrid::placement_ok(i, j, c) {
                            g.set(i, j, c);
                        }
                    }
                    g
                })
        })
    }

    fn belongs(i: usize, j: usize, s: &EntitySpan) -> bool {
        (i == s.end && j == s.start) || (j == i + 1 && s.start <= i && i < s.end)
    }

    proptest! {
        #[test]
        fn decoded_spans_are_disjoint_and_in_bounds(g in arb_grid()) {
            let spans = decode_grid(&g);
            prop_assert!(check_spans(&spans, g.n()).is_ok());
        }

        #[test]
        fn removing_foreign_cells_keeps_accepted(g in arb_grid()) {
            let before = decode_grid(&g);
            for (i, j, _) in g.non_none() {
                if before.iter().any(|s| belongs(i, j, s)) {
                    continue;
                }
                let mut h = g.clone();
                h.set(i, j, RelationClass::None);
                prop_assert_eq!(&decode_grid(&h), &before);
            }
        }

        #[test]
        fn encode_cell_count(n in 1usize..12, seed in any::<u64>()) {
            // random non-overlapping spans from a seeded walk
            let mut spans = Vec::new();
            let mut pos = 0;
            let mut x = seed;
            while pos < n {
                x = crate::rng::mix64(x);
                if x % 3 == 0 {
                    let len = 1 + (x >> 8) as usize % 3;
                    let end = (pos + len - 1).min(n - 1);
                    spans.push(EntitySpan::new(pos, end, (x >> 16) as usize % 3));
                    pos = end + 2;
                } else {
                    pos += 1;
                }
            }
            let g = encode_grid(&spans, n, &schema()).unwrap();
            let want = spans.len() + spans.iter().map(|s| s.len() - 1).sum::<usize>();
            prop_assert_eq!(g.non_none().len(), want);
            prop_assert_eq!(decode_grid(&g), spans);
        }
    }
}
