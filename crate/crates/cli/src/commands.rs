use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use serde::Serialize;
use xlner::benchmark::{alignment_stats, projections, relation_similarity};
use xlner::codeswitch::{align_relations, make_codeswitch, CodeSwitchConfig, SidecarRecord};
use xlner::corpus::{entity_f1, write_conll, F1Report, LabeledSentence, TagSchema};
use xlner::diff::ParamStore;
use xlner::gradcheck::{run_suite, GradCheckConfig};
use xlner::model::Network;
use xlner::relcodec::{decode_grid, encode_grid, grid_csv_rows, parse_grid_csv, FilterCounts, GRID_CSV_HEADER};
use xlner::selftrain::{evaluate, pseudo_label, run_pipeline, teacher_targets, train_source, train_target, RunLog};
use xlner::synth::{derive_context_lexicon, generate, BilingualLexicon};
use xlner::{Error, Result};

use crate::config::{Config, Explicit};
use crate::io::{load_model, model_bytes, read_corpus, read_lexicon, read_text, with_suffix, Run};
use crate::{Cli, Command};

pub fn run(cli: Cli, matches: &ArgMatches, argv: &[String]) -> Result<()> {
    let (name, sub) = matches
        .subcommand()
        .ok_or_else(|| Error::Config("no command given".into()))?;
    let on = Explicit(sub);
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match &cli.command {
        Command::GenSynth { synth, .. } => synth.apply(&mut cfg.synth, &on),
        Command::Codeswitch { switch, .. } => switch.apply(&mut cfg.train.codeswitch, &on),
        Command::TrainSrc {
            model,
            train_flags,
            switch,
            ..
        } => {
            model.apply(&mut cfg.model, &on);
            train_flags.apply(&mut cfg.train, &on);
            switch.apply(&mut cfg.train.codeswitch, &on);
        }
        Command::PseudoLabel { filter, .. } => filter.apply(&mut cfg.train, &on),
        Command::TrainTgt { train_flags, .. } => train_flags.apply(&mut cfg.train, &on),
        Command::Selftrain {
            model,
            train_flags,
            filter,
            switch,
            ..
        } => {
            model.apply(&mut cfg.model, &on);
            train_flags.apply(&mut cfg.train, &on);
            filter.apply(&mut cfg.train, &on);
            switch.apply(&mut cfg.train.codeswitch, &on);
        }
        _ => {}
    }
    cfg.set_seed(cli.seed);
    cfg.validate()?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    // the program path is left out so manifests do not depend on it
    let args = &argv[1.min(argv.len())..];
    let seed = cli.seed;
    match cli.command {
        Command::GenSynth {
            out_dir,
            entities_only_lexicon,
            ..
        } => gen_synth(Run::new(name, args, seed, &cfg), &out_dir, entities_only_lexicon),
        Command::Codeswitch {
            input,
            lexicon,
            out,
            sidecar,
            ..
        } => codeswitch(Run::new(name, args, seed, &cfg), &input, &lexicon, out, sidecar),
        Command::Encode { input, out } => encode(Run::new(name, args, seed, &cfg), &input, out),
        Command::Decode { input, out, text } => decode(Run::new(name, args, seed, &cfg), &input, out, text.as_deref()),
        Command::TrainSrc {
            train, lexicon, dev, out, ..
        } => train_src(Run::new(name, args, seed, &cfg), &train, lexicon.as_deref(), dev.as_deref(), out),
        Command::PseudoLabel {
            checkpoint, input, out, ..
        } => {
            let (net, params) = load_model(&checkpoint)?;
            cfg.model = net.config.clone();
            let mut run = Run::new(name, args, seed, &cfg);
            run.input(&checkpoint)?;
            pseudo(run, &net, &params, &input, out)
        }
        Command::TrainTgt {
            teacher,
            pseudo,
            source,
            dev,
            out,
            ..
        } => {
            let (net, params) = load_model(&teacher)?;
            cfg.model = net.config.clone();
            let mut run = Run::new(name, args, seed, &cfg);
            run.input(&teacher)?;
            train_tgt(run, &net, &params, &pseudo, &source, dev.as_deref(), out)
        }
        Command::Selftrain {
            source,
            lexicon,
            raw,
            dev,
            out,
            source_out,
            ..
        } => selftrain(Run::new(name, args, seed, &cfg), &source, &lexicon, &raw, dev.as_deref(), out, source_out),
        Command::Eval {
            gold,
            checkpoint,
            pred,
            out,
        } => eval(Run::new(name, args, seed, &cfg), &gold, checkpoint.as_deref(), pred.as_deref(), out),
        Command::InspectSim {
            checkpoint,
            input,
            lexicon,
            out,
            sentence,
            p_substitute,
            scope,
            projections,
        } => {
            let (net, params) = load_model(&checkpoint)?;
            cfg.model = net.config.clone();
            let cs = CodeSwitchConfig {
                p_substitute,
                scope: scope.into(),
                seed,
            };
            cs.validate()?;
            let mut run = Run::new(name, args, seed, &cfg);
            run.input(&checkpoint)?;
            inspect_sim(run, &net, &params, &input, &lexicon, &cs, sentence, out, projections)
        }
        Command::Gradcheck {
            d_model,
            n,
            eps,
            tolerance,
            coords,
        } => gradcheck(&GradCheckConfig {
            d_model,
            n,
            eps,
            tolerance,
            coords_per_tensor: coords,
            seed,
            ..Default::default()
        }),
    }
}

fn schema(run: &Run) -> TagSchema {
    run.config.model.schema.clone()
}

fn gen_synth(mut run: Run, dir: &Path, entities_only: bool) -> Result<()> {
    let synth = &run.config.synth;
    let corpus = generate(synth)?;
    let mut lexicon = corpus.lexicon;
    if !entities_only {
        lexicon.merge(&derive_context_lexicon(synth));
    }
    let schema = &synth.schema;
    println!(
        "{} source sentences, {} target sentences, {} lexicon entries",
        corpus.source.len(),
        corpus.target.len(),
        lexicon.len()
    );
    let source = write_conll(&corpus.source, schema).into_bytes();
    let target = write_conll(&corpus.target, schema).into_bytes();
    run.output(dir.join("source.conll"), source);
    run.output(dir.join("target.conll"), target);
    run.output(dir.join("lexicon.tsv"), lexicon.to_tsv().into_bytes());
    run.finish()
}

fn codeswitch(mut run: Run, input: &Path, lexicon: &Path, out: PathBuf, sidecar: Option<PathBuf>) -> Result<()> {
    let schema = schema(&run);
    let corpus = read_corpus(input, &schema)?;
    let lex = read_lexicon(lexicon)?;
    run.input(input)?;
    run.input(lexicon)?;
    let cs = &run.config.train.codeswitch;
    let mut switched = Vec::with_capacity(corpus.len());
    let mut lines = String::new();
    let mut substituted = 0;
    for s in &corpus {
        let pair = make_codeswitch(s, &lex, cs)?;
        let grid = encode_grid(&s.spans(), s.len(), &schema)?;
        let alignment = align_relations(&pair, &grid);
        substituted += pair.substituted.len();
        lines.push_str(&serde_json::to_string(&SidecarRecord::new(&pair, &alignment))?);
        lines.push('\n');
        switched.push(pair.switched);
    }
    println!("{} sentences, {substituted} phrases substituted", corpus.len());
    let sidecar = sidecar.unwrap_or_else(|| with_suffix(&out, ".align.jsonl"));
    run.output(out, write_conll(&switched, &schema).into_bytes());
    run.output(sidecar, lines.into_bytes());
    run.finish()
}

fn encode(mut run: Run, input: &Path, out: PathBuf) -> Result<()> {
    let schema = schema(&run);
    let corpus = read_corpus(input, &schema)?;
    run.input(input)?;
    let mut csv = format!("{GRID_CSV_HEADER}\n");
    for s in &corpus {
        if s.labels.is_none() {
            return Err(Error::Data(format!("sentence {} has no labels to encode", s.id)));
        }
        let grid = encode_grid(&s.spans(), s.len(), &schema)?;
        grid_csv_rows(&s.id, &grid, &schema, &mut csv);
    }
    run.output(out, csv.into_bytes());
    run.finish()
}

fn decode(mut run: Run, input: &Path, out: PathBuf, text: Option<&Path>) -> Result<()> {
    let schema = schema(&run);
    let grids = parse_grid_csv(&read_text(input)?, &schema)?;
    run.input(input)?;
    let texts: HashMap<String, LabeledSentence> = match text {
        Some(path) => {
            run.input(path)?;
            read_corpus(path, &schema)?.into_iter().map(|s| (s.id.clone(), s)).collect()
        }
        None => HashMap::new(),
    };
    let mut sentences = Vec::with_capacity(grids.len());
    for (id, grid) in &grids {
        let (tokens, language) = match texts.get(id) {
            Some(s) if s.len() == grid.n() => (s.tokens.clone(), s.language.clone()),
            Some(s) => {
                return Err(Error::Pairing {
                    gold: s.len(),
                    pred: grid.n(),
                })
            }
            None if text.is_some() => return Err(Error::Data(format!("sentence {id} missing from the text file"))),
            None => (vec!["_".to_string(); grid.n()], "und".to_string()),
        };
        let labels = xlner::corpus::bio_from_spans(&decode_grid(grid), grid.n())?;
        sentences.push(LabeledSentence::new(id.clone(), language, tokens, Some(labels))?);
    }
    run.output(out, write_conll(&sentences, &schema).into_bytes());
    run.finish()
}

fn log_outputs(run: &mut Run, out: &Path, log: &RunLog) -> Result<()> {
    run.output(with_suffix(out, ".log.csv"), log.to_csv().into_bytes());
    run.output(with_suffix(out, ".summary.json"), log.summary_json()?.into_bytes());
    Ok(())
}

fn print_epochs(log: &RunLog) {
    for r in &log.records {
        let val = r.val_f1.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());
        println!(
            "round {} {} epoch {}: loss {:.4} (ce {:.4}, sc {:.4}, tc {:.4}, mse {:.4}), val F1 {val}",
            r.round,
            r.phase.as_str(),
            r.epoch,
            r.losses.total,
            r.losses.ce,
            r.losses.sc,
            r.losses.tc,
            r.losses.mse
        );
    }
}

fn train_src(mut run: Run, train: &Path, lexicon: Option<&Path>, dev: Option<&Path>, out: PathBuf) -> Result<()> {
    let schema = schema(&run);
    let corpus = read_corpus(train, &schema)?;
    run.input(train)?;
    let lex = match lexicon {
        Some(p) => {
            run.input(p)?;
            read_lexicon(p)?
        }
        None => BilingualLexicon::new(),
    };
    let dev = match dev {
        Some(p) => {
            run.input(p)?;
            Some(read_corpus(p, &schema)?)
        }
        None => None,
    };
    let cfg = run.config;
    let (net, init) = Network::init(cfg.model.clone(), cfg.train.seed)?;
    let (params, log) = train_source(&net, init, &corpus, &lex, dev.as_deref(), &cfg.train)?;
    print_epochs(&log);
    run.output(out.clone(), model_bytes(&params, &net.config)?);
    log_outputs(&mut run, &out, &log)?;
    run.finish()
}

#[derive(Serialize)]
struct PseudoStats {
    counts: FilterCounts,
    /// Against labels found in the input, all sentences.
    quality: Option<F1Report>,
    /// Same, kept sentences only.
    quality_kept: Option<F1Report>,
}

fn pseudo(mut run: Run, net: &Network, params: &ParamStore<f32>, input: &Path, out: PathBuf) -> Result<()> {
    let schema = net.config.schema.clone();
    let raw = read_corpus(input, &schema)?;
    run.input(input)?;
    let labels = pseudo_label(net, params, &raw, &run.config.train.filter)?;
    let c = &labels.counts;
    println!(
        "kept {} of {} (dropped: all-O {}, discontinuous {}, below threshold {})",
        c.kept, c.total, c.dropped_all_o, c.dropped_discontinuous, c.dropped_threshold
    );
    if let Some(q) = &labels.quality {
        println!("pseudo-label quality: {q}");
    }
    let kept: Vec<LabeledSentence> = labels.kept.iter().map(|p| p.sentence.clone()).collect();
    let stats = PseudoStats {
        counts: labels.counts,
        quality: labels.quality,
        quality_kept: labels.quality_kept,
    };
    run.output(with_suffix(&out, ".stats.json"), serde_json::to_string_pretty(&stats)?.into_bytes());
    run.output(out, write_conll(&kept, &schema).into_bytes());
    run.finish()
}

fn train_tgt(
    mut run: Run,
    net: &Network,
    teacher: &ParamStore<f32>,
    pseudo: &Path,
    source: &Path,
    dev: Option<&Path>,
    out: PathBuf,
) -> Result<()> {
    let schema = net.config.schema.clone();
    let labeled = read_corpus(pseudo, &schema)?;
    let src = read_corpus(source, &schema)?;
    run.input(pseudo)?;
    run.input(source)?;
    let dev = match dev {
        Some(p) => {
            run.input(p)?;
            Some(read_corpus(p, &schema)?)
        }
        None => None,
    };
    let targets = teacher_targets(net, teacher, &labeled)?;
    let (student, log) = train_target(net, teacher, &targets, &src, dev.as_deref(), &run.config.train, 1)?;
    print_epochs(&log);
    run.output(out.clone(), model_bytes(&student, &net.config)?);
    log_outputs(&mut run, &out, &log)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
fn selftrain(
    mut run: Run,
    source: &Path,
    lexicon: &Path,
    raw: &Path,
    dev: Option<&Path>,
    out: PathBuf,
    source_out: Option<PathBuf>,
) -> Result<()> {
    let schema = schema(&run);
    let src = read_corpus(source, &schema)?;
    let lex = read_lexicon(lexicon)?;
    let target = read_corpus(raw, &schema)?;
    for p in [source, lexicon, raw] {
        run.input(p)?;
    }
    let dev = match dev {
        Some(p) => {
            run.input(p)?;
            Some(read_corpus(p, &schema)?)
        }
        None => None,
    };
    let cfg = run.config;
    let (net, init) = Network::init(cfg.model.clone(), cfg.train.seed)?;
    let result = run_pipeline(&net, init, &src, &lex, &target, dev.as_deref(), &cfg.train)?;
    print_epochs(&result.log);
    if let Some(f1) = result.log.final_pseudo_f1 {
        println!("final pseudo-label F1 {:.2}", 100.0 * f1);
    }
    if let Some(p) = source_out {
        run.output(p, model_bytes(&result.source_params, &net.config)?);
    }
    run.output(out.clone(), model_bytes(&result.final_params, &net.config)?);
    log_outputs(&mut run, &out, &result.log)?;
    run.finish()
}

fn eval(mut run: Run, gold: &Path, checkpoint: Option<&Path>, pred: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let report = match (checkpoint, pred) {
        (Some(ckpt), _) => {
            let (net, params) = load_model(ckpt)?;
            let sentences = read_corpus(gold, &net.config.schema)?;
            run.input(ckpt)?;
            evaluate(&net, &params, &sentences)?
        }
        (None, Some(pred)) => {
            let schema = schema(&run);
            let g = read_corpus(gold, &schema)?;
            let p = read_corpus(pred, &schema)?;
            run.input(pred)?;
            entity_f1(&g.iter().map(|s| s.spans()).collect::<Vec<_>>(), &p.iter().map(|s| s.spans()).collect::<Vec<_>>())?
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --pred".into())),
    };
    run.input(gold)?;
    let csv = format!("{}\n{}\n", F1Report::csv_header(), report.csv_row());
    println!("{report}");
    print!("{csv}");
    match out {
        Some(path) => {
            run.output(path, csv.into_bytes());
            run.finish()
        }
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn inspect_sim(
    mut run: Run,
    net: &Network,
    params: &ParamStore<f32>,
    input: &Path,
    lexicon: &Path,
    cs: &CodeSwitchConfig,
    index: usize,
    out: PathBuf,
    proj_out: Option<PathBuf>,
) -> Result<()> {
    let schema = net.config.schema.clone();
    let corpus = read_corpus(input, &schema)?;
    let lex = read_lexicon(lexicon)?;
    run.input(input)?;
    run.input(lexicon)?;
    let s = corpus
        .get(index)
        .ok_or_else(|| Error::Config(format!("sentence index {index} out of range ({} sentences)", corpus.len())))?;
    let pair = make_codeswitch(s, &lex, cs)?;
    let grid = encode_grid(&s.spans(), s.len(), &schema)?;
    let alignment = align_relations(&pair, &grid);
    if alignment.is_empty() {
        return Err(Error::Data(format!("sentence {} has no aligned relation cells", s.id)));
    }
    let sim = relation_similarity(net, params, s, &pair.switched, &alignment)?;

    let k = sim.len();
    let mut matrix = String::from("pair");
    for b in 0..k {
        let _ = write!(matrix, ",{b}");
    }
    matrix.push('\n');
    for (a, row) in sim.iter().enumerate() {
        let _ = write!(matrix, "{a}");
        for v in row {
            let _ = write!(matrix, ",{v:.6}");
        }
        matrix.push('\n');
    }
    let mut pairs = String::from("pair,src_i,src_j,cpt_i,cpt_j,class\n");
    for (a, &((i, j), (ci, cj))) in alignment.pairs.iter().enumerate() {
        let _ = writeln!(pairs, "{a},{i},{j},{ci},{cj},{}", grid.get(i, j).name(&schema));
    }

    let diag: f64 = (0..k).map(|a| sim[a][a]).sum::<f64>() / k as f64;
    println!("sentence {}: {k} aligned cells, mean aligned similarity {diag:.4}", s.id);
    let stats = alignment_stats(net, params, &corpus, &lex, cs, usize::MAX)?;
    println!(
        "aligned mean {:.4}, non-aligned mean {:.4}, gap {:.4} over {} sentence pairs",
        stats.diagonal_mean,
        stats.off_diagonal_mean,
        stats.gap(),
        stats.pairs
    );

    if let Some(path) = proj_out {
        let (zs, zc) = projections(net, params, s, &pair.switched, &alignment)?;
        let d = zs.last_dim();
        let mut csv = String::from("side,pair,i,j");
        for c in 0..d {
            let _ = write!(csv, ",z{c}");
        }
        csv.push('\n');
        for (side, z, pick) in [("src", &zs, 0usize), ("cpt", &zc, 1)] {
            for (a, cells) in alignment.pairs.iter().enumerate() {
                let (i, j) = if pick == 0 { cells.0 } else { cells.1 };
                let _ = write!(csv, "{side},{a},{i},{j}");
                for v in z.row(a) {
                    let _ = write!(csv, ",{v:.6}");
                }
                csv.push('\n');
            }
        }
        run.output(path, csv.into_bytes());
    }
    run.output(with_suffix(&out, ".pairs.csv"), pairs.into_bytes());
    run.output(out, matrix.into_bytes());
    run.finish()
}

fn gradcheck(cfg: &GradCheckConfig) -> Result<()> {
    let report = run_suite(cfg)?;
    for c in &report.checks {
        println!(
            "{:<18} max rel err {:.3e}  ({} coords, {} kink skips){}",
            c.name,
            c.max_rel_err,
            c.coords,
            c.skipped_kinks,
            if c.passed(report.tolerance) { "" } else { "  FAIL" }
        );
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err(), report.tolerance);
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric {
            context: "gradient check".into(),
            detail: format!("max relative error {:.3e} above {:.0e}", report.max_rel_err(), report.tolerance),
        })
    }
}
