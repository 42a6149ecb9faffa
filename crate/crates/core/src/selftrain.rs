//! Two-phase training.
//!
//! The source phase trains on gold source sentences, each paired with a
//! code-switched counterpart: relation cross-entropy on the source grid plus
//! sentence-level and relation-level contrastive terms. The trained model
//! then pseudo-labels raw target text, and a student initialized from it is
//! trained on the kept pseudo grids (cross-entropy, a same-sentence
//! two-dropout-view relation contrastive term, MSE to the frozen teacher's
//! distributions) with source batches interleaved. Rounds repeat the
//! pseudo-label/student cycle with the student as the next teacher.
//!
//! Everything is single-threaded and seeded, so identical inputs give
//! bit-identical parameters and logs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codeswitch::{align_relations, make_codeswitch_draw, CodeSwitchConfig, RelationAlignment};
use crate::corpus::{bio_from_spans, entity_f1, EntitySpan, F1Report, LabeledSentence};
use crate::diff::{AdamW, AdamWConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{scored_from_logits, Network};
use crate::objectives::{ce_loss, mse_loss, plan_tc_for, sc_loss, tc_loss, total_source, total_target, weighted_sum, LossWeights};
use crate::relcodec::{decode_scored, encode_grid, filter_pseudo, FilterCounts, PseudoFilterConfig, PseudoItem, RelationGrid, ScoredDecode, ScoredGrid};
use crate::rng::{derive_seed, rng_for};
use crate::synth::BilingualLexicon;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_source: usize,
    pub epochs_target: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub filter: PseudoFilterConfig,
    pub codeswitch: CodeSwitchConfig,
    /// Pseudo-label / student cycles.
    pub rounds: usize,
    pub seed: u64,
    /// Draw fresh code-switched counterparts every source epoch instead of
    /// one fixed draw.
    pub resample_codeswitch_per_epoch: bool,
    /// Source batches per pseudo-target batch in the target phase.
    pub source_per_target: usize,
    /// Also apply the relation cross-entropy to the code-switched
    /// counterparts, whose labels are carried over from the source.
    pub ce_on_counterparts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs_source: 8,
            epochs_target: 4,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            filter: PseudoFilterConfig::default(),
            codeswitch: CodeSwitchConfig::default(),
            rounds: 1,
            seed: 0,
            resample_codeswitch_per_epoch: false,
            source_per_target: 1,
            ce_on_counterparts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs_source == 0 || self.epochs_target == 0 || self.rounds == 0 {
            return Err(Error::Config("batch_size, epochs and rounds must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.filter.validate()?;
        self.codeswitch.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Source,
    Target,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Source => "source",
            Phase::Target => "target",
        }
    }
}

/// Loss components of one batch, or their mean over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub sc: f64,
    pub tc: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.ce += o.ce;
        self.sc += o.sc;
        self.tc += o.tc;
        self.mse += o.mse;
        self.total += o.total;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.ce *= f;
        self.sc *= f;
        self.tc *= f;
        self.mse *= f;
        self.total *= f;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 for the source phase.
    pub round: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub losses: LossParts,
    /// Mean cross-entropy of the interleaved source batches (target phase).
    pub source_ce: Option<f64>,
    pub val_f1: Option<f64>,
    /// Unfiltered quality of this round's pseudo labels against hidden gold.
    pub pseudo_f1: Option<f64>,
    pub filter: Option<FilterCounts>,
}

pub const RUNLOG_CSV_HEADER: &str =
    "round,phase,epoch,steps,ce,sc,tc,mse,total,source_ce,val_f1,pseudo_f1,pseudo_total,kept,dropped_all_o,dropped_discontinuous,dropped_threshold";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// Unfiltered pseudo-label F1 of the final model on the raw target set.
    pub final_pseudo_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_source_val_f1: Option<f64>,
    pub best_target_val_f1: Option<f64>,
    pub pseudo_f1_per_round: Vec<Option<f64>>,
    pub filter_per_round: Vec<FilterCounts>,
    pub final_pseudo_f1: Option<f64>,
    pub final_losses: Option<LossParts>,
}

impl RunLog {
    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
        if other.final_pseudo_f1.is_some() {
            self.final_pseudo_f1 = other.final_pseudo_f1;
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(RUNLOG_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let l = &r.losses;
            let counts = match &r.filter {
                Some(c) => format!(
                    "{},{},{},{},{}",
                    c.total, c.kept, c.dropped_all_o, c.dropped_discontinuous, c.dropped_threshold
                ),
                None => ",,,,".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                r.round,
                r.phase.as_str(),
                r.epoch,
                r.steps,
                l.ce,
                l.sc,
                l.tc,
                l.mse,
                l.total,
                opt(r.source_ce),
                opt(r.val_f1),
                opt(r.pseudo_f1),
                counts
            );
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        let best = |phase: Phase| {
            self.records
                .iter()
                .filter(|r| r.phase == phase)
                .filter_map(|r| r.val_f1)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        };
        let mut pseudo = Vec::new();
        let mut filters = Vec::new();
        let mut round = 0;
        for r in self.records.iter().filter(|r| r.phase == Phase::Target) {
            if r.round != round {
                round = r.round;
                pseudo.push(r.pseudo_f1);
                if let Some(c) = &r.filter {
                    filters.push(*c);
                }
            }
        }
        RunSummary {
            epochs: self.records.len(),
            best_source_val_f1: best(Phase::Source),
            best_target_val_f1: best(Phase::Target),
            pseudo_f1_per_round: pseudo,
            filter_per_round: filters,
            final_pseudo_f1: self.final_pseudo_f1,
            final_losses: self.records.last().map(|r| r.losses),
        }
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// A gold source sentence with its grid and, when built with a lexicon, a
/// code-switched counterpart.
#[derive(Clone, Debug)]
pub struct SourceExample {
    pub sentence: LabeledSentence,
    pub gold: RelationGrid,
    pub counterpart: Option<Counterpart>,
}

#[derive(Clone, Debug)]
pub struct Counterpart {
    pub sentence: LabeledSentence,
    pub gold: RelationGrid,
    /// Source cell to counterpart cell.
    pub alignment: RelationAlignment,
}

pub fn build_source_examples(
    corpus: &[LabeledSentence],
    net: &Network,
    lexicon: Option<(&BilingualLexicon, &CodeSwitchConfig)>,
    draw: u64,
) -> Result<Vec<SourceExample>> {
    corpus
        .iter()
        .map(|s| {
            if s.labels.is_none() {
                return Err(Error::Data(format!("source sentence {} has no labels", s.id)));
            }
            let gold = encode_grid(&s.spans(), s.len(), &net.config.schema)?;
            let counterpart = match lexicon {
                Some((lex, cs)) => {
                    let pair = make_codeswitch_draw(s, lex, cs, draw)?;
                    let alignment = align_relations(&pair, &gold);
                    let cgold = encode_grid(&pair.switched.spans(), pair.switched.len(), &net.config.schema)?;
                    Some(Counterpart {
                        sentence: pair.switched,
                        gold: cgold,
                        alignment,
                    })
                }
                None => None,
            };
            Ok(SourceExample {
                sentence: s.clone(),
                gold,
                counterpart,
            })
        })
        .collect()
}

/// A kept pseudo-labeled target sentence. `sentence.labels` holds the
/// decoded pseudo labels; `teacher` the teacher's distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSentence {
    pub sentence: LabeledSentence,
    pub confidence: f64,
    pub teacher: ScoredGrid,
}

fn mean_of(tape: &mut Tape<f32>, xs: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = xs.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &x in rest {
        acc = tape.add(acc, x)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / xs.len() as f64)))
}

fn value(tape: &Tape<f32>, v: Option<Var>) -> Result<f64> {
    Ok(match v {
        Some(v) => tape.scalar(v)? as f64,
        None => 0.0,
    })
}

/// Source-phase loss of one batch. With `w = 0` the contrastive branches
/// are not built at all, so the run is exactly the supervised baseline.
/// `ce_counterparts` adds the counterparts' grids to the cross-entropy mean.
pub fn source_batch_loss(
    tape: &mut Tape<f32>,
    net: &Network,
    params: &ParamStore<f32>,
    batch: &[&SourceExample],
    weights: &LossWeights,
    ce_counterparts: bool,
    seed: u64,
) -> Result<(Var, LossParts)> {
    let contrastive = weights.w > 0.0;
    let mut ces = Vec::with_capacity(batch.len());
    let mut tcs = Vec::new();
    let mut src_reps = Vec::new();
    let mut cpt_reps = Vec::new();
    for (k, ex) in batch.iter().enumerate() {
        let k = k as u64;
        let h = net.encode(tape, params, &ex.sentence.tokens, Some(derive_seed(seed, "dropout.src", k)))?;
        let rel = net.rel_rep(tape, params, h)?;
        let logits = net.classify_logits(tape, params, rel)?;
        ces.push(ce_loss(tape, logits, &ex.gold)?);
        if !contrastive && !ce_counterparts {
            continue;
        }
        let cp = ex
            .counterpart
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sentence {} has no code-switched counterpart", ex.sentence.id)))?;
        let hc = net.encode(tape, params, &cp.sentence.tokens, Some(derive_seed(seed, "dropout.cs", k)))?;
        let relc = net.rel_rep(tape, params, hc)?;
        if ce_counterparts {
            let logits = net.classify_logits(tape, params, relc)?;
            ces.push(ce_loss(tape, logits, &cp.gold)?);
        }
        if !contrastive {
            continue;
        }
        src_reps.push(net.sentence_rep(tape, h)?);
        cpt_reps.push(net.sentence_rep(tape, hc)?);
        let plan = plan_tc_for(ex.sentence.len(), cp.sentence.len(), &cp.alignment, weights.neg_cap, derive_seed(seed, "tc", k));
        if plan.is_empty() {
            continue;
        }
        let zs = net.project(tape, params, rel, &plan.src_cells)?;
        let zc = net.project(tape, params, relc, &plan.cpt_cells)?;
        if let Some(t) = tc_loss(tape, zs, zc, &plan, weights.tau)? {
            tcs.push(t);
        }
    }
    let ce = mean_of(tape, &ces)?.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let sc = if contrastive {
        let s = tape.stack_rows(&src_reps)?;
        let c = tape.stack_rows(&cpt_reps)?;
        Some(sc_loss(tape, s, c, weights.tau, weights.symmetric_sc)?)
    } else {
        None
    };
    let tc = mean_of(tape, &tcs)?;
    let mut parts = LossParts {
        ce: value(tape, Some(ce))?,
        sc: value(tape, sc)?,
        tc: value(tape, tc)?,
        ..Default::default()
    };
    parts.total = total_source(parts.ce, parts.sc, parts.tc, weights)?;
    let root = weighted_sum(tape, &[(Some(ce), 1.0), (sc, weights.w), (tc, weights.w)])?;
    Ok((root, parts))
}

/// A pseudo sentence prepared for training: its hard grid and the
/// identity alignment over its non-NONE cells.
struct TargetExample<'a> {
    item: &'a PseudoSentence,
    grid: RelationGrid,
    alignment: RelationAlignment,
}

fn target_batch_loss(
    tape: &mut Tape<f32>,
    net: &Network,
    params: &ParamStore<f32>,
    batch: &[&TargetExample],
    weights: &LossWeights,
    seed: u64,
) -> Result<(Var, LossParts)> {
    let (mut ces, mut tcs, mut mses) = (Vec::new(), Vec::new(), Vec::new());
    for (k, ex) in batch.iter().enumerate() {
        let k = k as u64;
        let tokens = &ex.item.sentence.tokens;
        let ha = net.encode(tape, params, tokens, Some(derive_seed(seed, "dropout.view_a", k)))?;
        let rel_a = net.rel_rep(tape, params, ha)?;
        let logits = net.classify_logits(tape, params, rel_a)?;
        ces.push(ce_loss(tape, logits, &ex.grid)?);
        if weights.w2 > 0.0 {
            let probs = tape.softmax(logits);
            mses.push(mse_loss(tape, probs, &ex.item.teacher)?);
        }
        if weights.w1 > 0.0 && !ex.alignment.is_empty() {
            let n = tokens.len();
            let plan = plan_tc_for(n, n, &ex.alignment, weights.neg_cap, derive_seed(seed, "tc", k));
            let hb = net.encode(tape, params, tokens, Some(derive_seed(seed, "dropout.view_b", k)))?;
            let rel_b = net.rel_rep(tape, params, hb)?;
            let za = net.project(tape, params, rel_a, &plan.src_cells)?;
            let zb = net.project(tape, params, rel_b, &plan.cpt_cells)?;
            if let Some(t) = tc_loss(tape, za, zb, &plan, weights.tau)? {
                tcs.push(t);
            }
        }
    }
    let ce = mean_of(tape, &ces)?.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let tc = mean_of(tape, &tcs)?;
    let mse = mean_of(tape, &mses)?;
    let mut parts = LossParts {
        ce: value(tape, Some(ce))?,
        tc: value(tape, tc)?,
        mse: value(tape, mse)?,
        ..Default::default()
    };
    parts.total = total_target(parts.ce, parts.tc, parts.mse, weights)?;
    let root = weighted_sum(tape, &[(Some(ce), 1.0), (tc, weights.w1), (mse, weights.w2)])?;
    Ok((root, parts))
}

fn step(tape: &mut Tape<f32>, root: Var, opt: &mut AdamW<f32>, params: &mut ParamStore<f32>) -> Result<()> {
    let grads = tape.backward(root)?.into_params();
    if !grads.all_finite() {
        return Err(Error::numeric("backward", "non-finite gradient"));
    }
    opt.step(params, &grads)
}

fn in_epoch(e: Error, phase: Phase, round: usize, epoch: usize) -> Error {
    match e {
        Error::Numeric { context, detail } => Error::Numeric {
            context: format!("{} phase round {round} epoch {epoch}: {context}", phase.as_str()),
            detail,
        },
        other => {
            log::error!("{} phase round {round} epoch {epoch} failed", phase.as_str());
            other
        }
    }
}

fn shuffled(len: usize, seed: u64, stream: &str, index: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, stream, index));
    order
}

/// Forward pass without dropout and scored decoding.
pub fn predict(net: &Network, params: &ParamStore<f32>, tokens: &[String]) -> Result<(ScoredGrid, ScoredDecode)> {
    let mut tape = Tape::new();
    let h = net.encode(&mut tape, params, tokens, None)?;
    let rel = net.rel_rep(&mut tape, params, h)?;
    let logits = net.classify_logits(&mut tape, params, rel)?;
    let scored = scored_from_logits(tape.value(logits), rel.n)?;
    let decoded = decode_scored(&scored);
    Ok((scored, decoded))
}

/// Entity-level F1 of the model's unfiltered predictions on gold
/// sentences.
pub fn evaluate(net: &Network, params: &ParamStore<f32>, sentences: &[LabeledSentence]) -> Result<F1Report> {
    let mut gold = Vec::with_capacity(sentences.len());
    let mut pred = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.labels.is_none() {
            return Err(Error::Data(format!("evaluation sentence {} has no labels", s.id)));
        }
        gold.push(s.spans());
        pred.push(predict(net, params, &s.tokens)?.1.spans);
    }
    entity_f1(&gold, &pred)
}

/// Keeps the best parameters by validation F1 (earliest on ties).
struct Selector {
    best: Option<(f64, ParamStore<f32>)>,
}

impl Selector {
    fn offer(&mut self, f1: Option<f64>, params: &ParamStore<f32>) {
        if let Some(f1) = f1 {
            if self.best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                self.best = Some((f1, params.clone()));
            }
        }
    }

    fn finish(self, last: ParamStore<f32>) -> ParamStore<f32> {
        self.best.map(|(_, p)| p).unwrap_or(last)
    }
}

/// Source phase. Returns the best parameters by F1 on `val` (the last ones
/// when `val` is absent) and one log record per epoch.
pub fn train_source(
    net: &Network,
    init: ParamStore<f32>,
    corpus: &[LabeledSentence],
    lexicon: &BilingualLexicon,
    val: Option<&[LabeledSentence]>,
    cfg: &TrainConfig,
) -> Result<(ParamStore<f32>, RunLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty source corpus".into()));
    }
    let contrastive = cfg.loss.w > 0.0;
    let needs_counterparts = contrastive || cfg.ce_on_counterparts;
    let lex = needs_counterparts.then_some((lexicon, &cfg.codeswitch));
    let mut examples = build_source_examples(corpus, net, lex, 0)?;
    let mut params = init;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &params);
    let mut tape = Tape::new();
    let mut log = RunLog::default();
    let mut selector = Selector { best: None };
    let mut global = 0u64;
    for epoch in 1..=cfg.epochs_source {
        if needs_counterparts && cfg.resample_codeswitch_per_epoch && epoch > 1 {
            examples = build_source_examples(corpus, net, lex, epoch as u64 - 1)?;
        }
        let order = shuffled(examples.len(), cfg.seed, "order.source", epoch as u64);
        let mut sum = LossParts::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            global += 1;
            let batch: Vec<&SourceExample> = chunk.iter().map(|&i| &examples[i]).collect();
            tape.reset();
            let run = |tape: &mut Tape<f32>, params: &mut ParamStore<f32>, opt: &mut AdamW<f32>| -> Result<LossParts> {
                let (root, parts) = source_batch_loss(tape, net, params, &batch, &cfg.loss, cfg.ce_on_counterparts, derive_seed(cfg.seed, "step.source", global))?;
                step(tape, root, opt, params)?;
                Ok(parts)
            };
            let parts = run(&mut tape, &mut params, &mut opt).map_err(|e| in_epoch(e, Phase::Source, 0, epoch))?;
            sum.add(&parts);
            steps += 1;
        }
        let val_f1 = match val {
            Some(v) => Some(evaluate(net, &params, v)?.f1),
            None => None,
        };
        selector.offer(val_f1, &params);
        let losses = sum.scaled(1.0 / steps as f64);
        log::info!(
            "source epoch {epoch}: ce {:.4} sc {:.4} tc {:.4} total {:.4} val_f1 {:?}",
            losses.ce,
            losses.sc,
            losses.tc,
            losses.total,
            val_f1
        );
        log.records.push(EpochRecord {
            round: 0,
            phase: Phase::Source,
            epoch,
            steps,
            losses,
            source_ce: None,
            val_f1,
            pseudo_f1: None,
            filter: None,
        });
    }
    Ok((selector.finish(params), log))
}

/// Result of labeling a raw target corpus.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    pub kept: Vec<PseudoSentence>,
    pub counts: FilterCounts,
    /// Decoded spans for every input sentence, in input order, before
    /// filtering.
    pub predictions: Vec<Vec<EntitySpan>>,
    /// Unfiltered F1 against hidden gold, when every input carries labels.
    pub quality: Option<F1Report>,
    /// F1 of the kept sentences only, under the same condition.
    pub quality_kept: Option<F1Report>,
}

/// Labels raw target sentences with the model and filters the result.
/// Any labels on the input are treated as hidden gold: they are used only
/// to report quality and never reach the output sentences.
pub fn pseudo_label(net: &Network, params: &ParamStore<f32>, raw: &[LabeledSentence], filter: &PseudoFilterConfig) -> Result<PseudoLabels> {
    filter.validate()?;
    let mut items = Vec::with_capacity(raw.len());
    let mut predictions = Vec::with_capacity(raw.len());
    for (idx, s) in raw.iter().enumerate() {
        let (scored, decoded) = predict(net, params, &s.tokens)?;
        predictions.push(decoded.spans.clone());
        items.push(PseudoItem {
            payload: (idx, scored),
            spans: decoded.spans,
            confidence: decoded.confidence,
            had_broken_chain: decoded.had_broken_chain,
        });
    }
    let (kept_items, counts) = filter_pseudo(items, filter);
    let has_gold = !raw.is_empty() && raw.iter().all(|s| s.labels.is_some());
    let gold: Vec<Vec<EntitySpan>> = if has_gold { raw.iter().map(|s| s.spans()).collect() } else { Vec::new() };
    let quality = if has_gold { Some(entity_f1(&gold, &predictions)?) } else { None };
    let quality_kept = if has_gold {
        let g: Vec<_> = kept_items.iter().map(|it| gold[it.payload.0].clone()).collect();
        let p: Vec<_> = kept_items.iter().map(|it| it.spans.clone()).collect();
        Some(entity_f1(&g, &p)?)
    } else {
        None
    };
    let kept = kept_items
        .into_iter()
        .map(|it| {
            let src = &raw[it.payload.0];
            let labels = bio_from_spans(&it.spans, src.len())?;
            Ok(PseudoSentence {
                sentence: LabeledSentence::new(src.id.clone(), src.language.clone(), src.tokens.clone(), Some(labels))?,
                confidence: it.confidence,
                teacher: it.payload.1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabels {
        kept,
        counts,
        predictions,
        quality,
        quality_kept,
    })
}

/// Teacher grids and confidences for sentences whose labels already hold
/// pseudo labels (for example read back from a pseudo-labeled file).
pub fn teacher_targets(net: &Network, teacher: &ParamStore<f32>, labeled: &[LabeledSentence]) -> Result<Vec<PseudoSentence>> {
    labeled
        .iter()
        .map(|s| {
            if s.labels.is_none() {
                return Err(Error::Data(format!("pseudo-labeled sentence {} has no labels", s.id)));
            }
            let (teacher, decoded) = predict(net, teacher, &s.tokens)?;
            Ok(PseudoSentence {
                sentence: s.clone(),
                confidence: decoded.confidence,
                teacher,
            })
        })
        .collect()
}

/// Target phase. The student starts from the teacher's weights; the
/// teacher is only read, and its checksum is verified afterwards.
#[allow(clippy::too_many_arguments)]
pub fn train_target(
    net: &Network,
    teacher: &ParamStore<f32>,
    pseudo: &[PseudoSentence],
    source: &[LabeledSentence],
    val: Option<&[LabeledSentence]>,
    cfg: &TrainConfig,
    round: usize,
) -> Result<(ParamStore<f32>, RunLog)> {
    cfg.validate()?;
    if pseudo.is_empty() {
        return Err(Error::Config(
            "no pseudo-labeled sentences survived filtering; review the confidence threshold and drop rules".into(),
        ));
    }
    let checksum = teacher.checksum();
    let targets = pseudo
        .iter()
        .map(|item| {
            let grid = encode_grid(&item.sentence.spans(), item.sentence.len(), &net.config.schema)?;
            let alignment = RelationAlignment::identity(&grid);
            Ok(TargetExample { item, grid, alignment })
        })
        .collect::<Result<Vec<_>>>()?;
    let sources = build_source_examples(source, net, None, 0)?;
    let ce_only = LossWeights { w: 0.0, ..cfg.loss.clone() };
    let round_seed = derive_seed(cfg.seed, "round", round as u64);

    let mut params = teacher.clone();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &params);
    let mut tape = Tape::new();
    let mut log = RunLog::default();
    let mut selector = Selector { best: None };
    let mut global = 0u64;
    let mut src_pass = 0u64;
    let mut src_order = shuffled(sources.len(), round_seed, "order.interleave", src_pass);
    let mut src_cursor = 0;
    for epoch in 1..=cfg.epochs_target {
        let order = shuffled(targets.len(), round_seed, "order.target", epoch as u64);
        let mut sum = LossParts::default();
        let mut src_ce = 0.0;
        let mut src_steps = 0usize;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            global += 1;
            let batch: Vec<&TargetExample> = chunk.iter().map(|&i| &targets[i]).collect();
            tape.reset();
            let seed = derive_seed(round_seed, "step.target", global);
            let parts = target_batch_loss(&mut tape, net, &params, &batch, &cfg.loss, seed)
                .and_then(|(root, parts)| step(&mut tape, root, &mut opt, &mut params).map(|_| parts))
                .map_err(|e| in_epoch(e, Phase::Target, round, epoch))?;
            sum.add(&parts);
            steps += 1;
            for s in 0..cfg.source_per_target {
                if sources.is_empty() {
                    break;
                }
                let mut idx = Vec::with_capacity(cfg.batch_size);
                while idx.len() < cfg.batch_size.min(sources.len()) {
                    if src_cursor == src_order.len() {
                        src_pass += 1;
                        src_order = shuffled(sources.len(), round_seed, "order.interleave", src_pass);
                        src_cursor = 0;
                    }
                    idx.push(src_order[src_cursor]);
                    src_cursor += 1;
                }
                let batch: Vec<&SourceExample> = idx.iter().map(|&i| &sources[i]).collect();
                tape.reset();
                let seed = derive_seed(seed, "interleave", s as u64);
                let parts = source_batch_loss(&mut tape, net, &params, &batch, &ce_only, false, seed)
                    .and_then(|(root, parts)| step(&mut tape, root, &mut opt, &mut params).map(|_| parts))
                    .map_err(|e| in_epoch(e, Phase::Target, round, epoch))?;
                src_ce += parts.ce;
                src_steps += 1;
            }
        }
        let val_f1 = match val {
            Some(v) => Some(evaluate(net, &params, v)?.f1),
            None => None,
        };
        selector.offer(val_f1, &params);
        let losses = sum.scaled(1.0 / steps as f64);
        log::info!(
            "target round {round} epoch {epoch}: ce {:.4} tc {:.4} mse {:.5} total {:.4} val_f1 {:?}",
            losses.ce,
            losses.tc,
            losses.mse,
            losses.total,
            val_f1
        );
        log.records.push(EpochRecord {
            round,
            phase: Phase::Target,
            epoch,
            steps,
            losses,
            source_ce: (src_steps > 0).then(|| src_ce / src_steps as f64),
            val_f1,
            pseudo_f1: None,
            filter: None,
        });
    }
    if teacher.checksum() != checksum {
        return Err(Error::Contract("teacher parameters changed during target training".into()));
    }
    Ok((selector.finish(params), log))
}

/// Pseudo-label / student rounds starting from a source-trained teacher.
/// Round `k`'s student is round `k + 1`'s teacher.
pub fn self_train(
    net: &Network,
    teacher: ParamStore<f32>,
    raw_target: &[LabeledSentence],
    source: &[LabeledSentence],
    val: Option<&[LabeledSentence]>,
    cfg: &TrainConfig,
) -> Result<(ParamStore<f32>, RunLog)> {
    cfg.validate()?;
    let mut teacher = teacher;
    let mut log = RunLog::default();
    for round in 1..=cfg.rounds {
        let labels = pseudo_label(net, &teacher, raw_target, &cfg.filter)?;
        let pseudo_f1 = labels.quality.as_ref().map(|q| q.f1);
        log::info!(
            "round {round}: kept {}/{} pseudo sentences, pseudo F1 {:?}",
            labels.counts.kept,
            labels.counts.total,
            pseudo_f1
        );
        let (student, mut round_log) = train_target(net, &teacher, &labels.kept, source, val, cfg, round)?;
        for r in &mut round_log.records {
            r.pseudo_f1 = pseudo_f1;
            r.filter = Some(labels.counts);
        }
        log.extend(round_log);
        teacher = student;
    }
    let last = pseudo_label(net, &teacher, raw_target, &cfg.filter)?;
    log.final_pseudo_f1 = last.quality.map(|q| q.f1);
    Ok((teacher, log))
}

/// Output of the full pipeline.
pub struct PipelineOutput {
    pub source_params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub log: RunLog,
}

/// Source phase followed by self-training.
pub fn run_pipeline(
    net: &Network,
    init: ParamStore<f32>,
    source: &[LabeledSentence],
    lexicon: &BilingualLexicon,
    raw_target: &[LabeledSentence],
    val: Option<&[LabeledSentence]>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput> {
    let (source_params, mut log) = train_source(net, init, source, lexicon, val, cfg)?;
    let (final_params, st_log) = self_train(net, source_params.clone(), raw_target, source, val, cfg)?;
    log.extend(st_log);
    Ok(PipelineOutput {
        source_params,
        final_params,
        log,
    })
}
