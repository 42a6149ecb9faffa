//! Resolved run configuration: library defaults, then the JSON file given
//! with `--config`, then flags typed on the command line, then `--seed`.

use std::path::Path;

use clap::{ArgMatches, Args, ValueEnum};
use clap::parser::ValueSource;
use serde::{Deserialize, Serialize};
use xlner::codeswitch::{CodeSwitchConfig, Scope};
use xlner::model::ModelConfig;
use xlner::selftrain::TrainConfig;
use xlner::synth::{Cipher, SynthConfig};
use xlner::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Reads either a plain configuration or a run manifest, whose
    /// `config` member is used.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let value = match value.get("command").and(value.get("config")) {
            Some(inner) => inner.clone(),
            None => value,
        };
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.train.codeswitch.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.synth.schema != self.model.schema {
            return Err(Error::Config(format!(
                "synth schema {:?} differs from model schema {:?}",
                self.synth.schema.types(),
                self.model.schema.types()
            )));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// Whether the user typed `id` on the command line.
pub struct Explicit<'a>(pub &'a ArgMatches);

impl Explicit<'_> {
    pub fn has(&self, id: &str) -> bool {
        matches!(self.0.try_get_raw(id), Ok(Some(_))) && self.0.value_source(id) == Some(ValueSource::CommandLine)
    }
}

fn model_defaults() -> ModelConfig {
    ModelConfig::default()
}

fn train_defaults() -> TrainConfig {
    TrainConfig::default()
}

fn synth_defaults() -> SynthConfig {
    SynthConfig::default()
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    #[arg(long, default_value_t = model_defaults().d_model)]
    pub d_model: usize,
    #[arg(long, default_value_t = model_defaults().d_rel)]
    pub d_rel: usize,
    /// Relation projection width for the contrastive head.
    #[arg(long, default_value_t = model_defaults().d_proj)]
    pub d_proj: usize,
    /// Hashed character n-gram embedding rows.
    #[arg(long, default_value_t = model_defaults().vocab_buckets)]
    pub vocab_buckets: usize,
    #[arg(long, default_value_t = model_defaults().dropout)]
    pub dropout: f64,
}

impl ModelFlags {
    pub fn apply(&self, m: &mut ModelConfig, on: &Explicit) {
        if on.has("d_model") {
            m.d_model = self.d_model;
        }
        if on.has("d_rel") {
            m.d_rel = self.d_rel;
        }
        if on.has("d_proj") {
            m.d_proj = self.d_proj;
        }
        if on.has("vocab_buckets") {
            m.vocab_buckets = self.vocab_buckets;
        }
        if on.has("dropout") {
            m.dropout = self.dropout;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value_t = train_defaults().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = train_defaults().epochs_source)]
    pub epochs_source: usize,
    #[arg(long, default_value_t = train_defaults().epochs_target)]
    pub epochs_target: usize,
    #[arg(long, default_value_t = train_defaults().optimizer.lr)]
    pub lr: f64,
    #[arg(long, default_value_t = train_defaults().optimizer.weight_decay)]
    pub weight_decay: f64,
    /// Contrastive temperature.
    #[arg(long, default_value_t = train_defaults().loss.tau)]
    pub tau: f64,
    /// Weight of both contrastive terms in the source phase; 0 gives the
    /// supervised baseline.
    #[arg(long, default_value_t = train_defaults().loss.w)]
    pub w: f64,
    /// Relation contrastive weight in the target phase.
    #[arg(long, default_value_t = train_defaults().loss.w1)]
    pub w1: f64,
    /// Distillation (MSE) weight in the target phase.
    #[arg(long, default_value_t = train_defaults().loss.w2)]
    pub w2: f64,
    /// Negatives per aligned relation pair.
    #[arg(long, default_value_t = train_defaults().loss.neg_cap)]
    pub neg_cap: usize,
    /// Pseudo-label / student cycles.
    #[arg(long, default_value_t = train_defaults().rounds)]
    pub rounds: usize,
}

impl TrainFlags {
    pub fn apply(&self, t: &mut TrainConfig, on: &Explicit) {
        if on.has("batch_size") {
            t.batch_size = self.batch_size;
        }
        if on.has("epochs_source") {
            t.epochs_source = self.epochs_source;
        }
        if on.has("epochs_target") {
            t.epochs_target = self.epochs_target;
        }
        if on.has("lr") {
            t.optimizer.lr = self.lr;
            t.optimizer.lr_encoder = self.lr;
        }
        if on.has("weight_decay") {
            t.optimizer.weight_decay = self.weight_decay;
        }
        if on.has("tau") {
            t.loss.tau = self.tau;
        }
        if on.has("w") {
            t.loss.w = self.w;
        }
        if on.has("w1") {
            t.loss.w1 = self.w1;
        }
        if on.has("w2") {
            t.loss.w2 = self.w2;
        }
        if on.has("neg_cap") {
            t.loss.neg_cap = self.neg_cap;
        }
        if on.has("rounds") {
            t.rounds = self.rounds;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct FilterFlags {
    /// Sentences whose weakest entity cell is below this are dropped.
    #[arg(long, default_value_t = train_defaults().filter.confidence_threshold)]
    pub threshold: f64,
    /// Keep sentences with no predicted entity.
    #[arg(long)]
    pub keep_all_o: bool,
    /// Keep sentences with a broken entity chain.
    #[arg(long)]
    pub keep_discontinuous: bool,
}

impl FilterFlags {
    pub fn apply(&self, t: &mut TrainConfig, on: &Explicit) {
        if on.has("threshold") {
            t.filter.confidence_threshold = self.threshold;
        }
        if on.has("keep_all_o") {
            t.filter.drop_all_o = !self.keep_all_o;
        }
        if on.has("keep_discontinuous") {
            t.filter.drop_discontinuous = !self.keep_discontinuous;
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    EntitiesOnly,
    EntitiesAndPhrases,
}

impl From<Scope> for ScopeArg {
    fn from(s: Scope) -> Self {
        match s {
            Scope::EntitiesOnly => ScopeArg::EntitiesOnly,
            Scope::EntitiesAndPhrases => ScopeArg::EntitiesAndPhrases,
        }
    }
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::EntitiesOnly => Scope::EntitiesOnly,
            ScopeArg::EntitiesAndPhrases => Scope::EntitiesAndPhrases,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SwitchFlags {
    /// Probability of replacing each candidate phrase.
    #[arg(long, default_value_t = CodeSwitchConfig::default().p_substitute)]
    pub p_substitute: f64,
    #[arg(long, value_enum, default_value_t = ScopeArg::from(CodeSwitchConfig::default().scope))]
    pub scope: ScopeArg,
}

impl SwitchFlags {
    pub fn apply(&self, c: &mut CodeSwitchConfig, on: &Explicit) {
        if on.has("p_substitute") {
            c.p_substitute = self.p_substitute;
        }
        if on.has("scope") {
            c.scope = self.scope.into();
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum CipherArg {
    Identity,
    ReverseSuffix,
}

impl From<Cipher> for CipherArg {
    fn from(c: Cipher) -> Self {
        match c {
            Cipher::Identity => CipherArg::Identity,
            Cipher::ReverseSuffix => CipherArg::ReverseSuffix,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SynthFlags {
    #[arg(long, default_value_t = synth_defaults().n_sentences)]
    pub n_sentences: usize,
    /// Phrases per entity type in the generated gazetteers.
    #[arg(long, default_value_t = synth_defaults().gazetteer_size)]
    pub gazetteer_size: usize,
    #[arg(long, default_value_t = synth_defaults().gazetteer_seed)]
    pub gazetteer_seed: u64,
    #[arg(long, value_enum, default_value_t = CipherArg::from(synth_defaults().cipher))]
    pub cipher: CipherArg,
}

impl SynthFlags {
    pub fn apply(&self, s: &mut SynthConfig, on: &Explicit) {
        if on.has("n_sentences") {
            s.n_sentences = self.n_sentences;
        }
        if on.has("gazetteer_size") {
            s.gazetteer_size = self.gazetteer_size;
        }
        if on.has("gazetteer_seed") {
            s.gazetteer_seed = self.gazetteer_seed;
        }
        if on.has("cipher") {
            s.cipher = match self.cipher {
                CipherArg::Identity => Cipher::Identity,
                CipherArg::ReverseSuffix => Cipher::ReverseSuffix,
            };
        }
    }
}
