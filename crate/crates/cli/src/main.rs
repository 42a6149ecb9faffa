//! `xlner`: corpus generation, code-switching, grid conversion, training,
//! pseudo-labeling, evaluation and inspection.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure. Failures print one `ERROR[code]: ...` line on
//! stderr.

mod commands;
mod config;
mod io;

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{FilterFlags, ModelFlags, SwitchFlags, SynthFlags, TrainFlags};

#[derive(Parser, Debug)]
#[command(name = "xlner", version, about = "Cross-lingual NER with token-pair relation grids")]
pub struct Cli {
    /// JSON configuration (or a run manifest); flags given on the command
    /// line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled source corpus, its target-language
    /// translation and the bilingual lexicon.
    GenSynth {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Write only entity phrases to the lexicon, without the context
        /// vocabulary.
        #[arg(long)]
        entities_only_lexicon: bool,
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Write code-switched copies of a labeled corpus plus an alignment
    /// sidecar (JSON lines).
    Codeswitch {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Alignment sidecar path [default: <out>.align.jsonl]
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[command(flatten)]
        switch: SwitchFlags,
    },
    /// Convert a labeled CoNLL file to relation-grid CSV.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert relation-grid CSV back to CoNLL.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CoNLL file supplying tokens and languages, matched by sentence
        /// id; tokens are written as `_` without it.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Train on labeled source data and its code-switched counterparts.
    TrainSrc {
        #[arg(long)]
        train: PathBuf,
        /// Bilingual lexicon; without it counterparts equal the source.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Labeled validation set for checkpoint selection.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Checkpoint; the run log goes to <out>.log.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[command(flatten)]
        switch: SwitchFlags,
    },
    /// Label raw target text with a trained model and filter the result.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target CoNLL; labels, when present, are only used to score the
        /// pseudo labels.
        #[arg(long)]
        input: PathBuf,
        /// Kept pseudo-labeled sentences; statistics go to <out>.stats.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        filter: FilterFlags,
    },
    /// Distill a student from a frozen teacher on pseudo-labeled target
    /// text, interleaved with labeled source batches.
    TrainTgt {
        #[arg(long)]
        teacher: PathBuf,
        /// Output of pseudo-label.
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Source training followed by pseudo-label / student rounds.
    Selftrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Raw target text.
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Final checkpoint; the run log goes to <out>.log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also write the source-phase checkpoint here.
        #[arg(long)]
        source_out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[command(flatten)]
        filter: FilterFlags,
        #[command(flatten)]
        switch: SwitchFlags,
    },
    /// Entity-level precision, recall and F1 against gold labels.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        /// Predict with this checkpoint.
        #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        /// Or score an existing prediction file.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarities between relation projections of a sentence's
    /// aligned cells and its code-switched counterpart's.
    InspectSim {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled source CoNLL.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Similarity matrix CSV for the chosen sentence; its pair list goes
        /// to <out>.pairs.csv.
        #[arg(long)]
        out: PathBuf,
        /// Index of the sentence in the input.
        #[arg(long, default_value_t = 0)]
        sentence: usize,
        #[arg(long, default_value_t = 1.0)]
        p_substitute: f64,
        #[arg(long, value_enum, default_value_t = config::ScopeArg::EntitiesOnly)]
        scope: config::ScopeArg,
        /// Dump the raw projection vectors of the chosen sentence as CSV.
        #[arg(long, value_name = "PATH")]
        projections: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = xlner::gradcheck::GradCheckConfig::default().d_model)]
        d_model: usize,
        /// Sentence length.
        #[arg(long, default_value_t = xlner::gradcheck::GradCheckConfig::default().n)]
        n: usize,
        #[arg(long, default_value_t = xlner::gradcheck::GradCheckConfig::default().eps)]
        eps: f64,
        #[arg(long, default_value_t = xlner::gradcheck::GradCheckConfig::default().tolerance)]
        tolerance: f64,
        /// Coordinates probed per tensor.
        #[arg(long, default_value_t = xlner::gradcheck::GradCheckConfig::default().coords_per_tensor)]
        coords: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let text = e.render().to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("ERROR[1]: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            std::process::exit(1);
        }
    };
    let code = match Cli::from_arg_matches(&matches)
        .map_err(|e| xlner::Error::Config(e.to_string()))
        .and_then(|cli| commands::run(cli, &matches, &argv))
    {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("ERROR[{code}]: {}", e.to_string().replace('\n', " "));
            code
        }
    };
    std::process::exit(code);
}
