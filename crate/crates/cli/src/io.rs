use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use xlner::corpus::{parse_conll_with_diagnostics, LabeledSentence, TagSchema};
use xlner::diff::{checkpoint, ParamStore};
use xlner::model::{ModelConfig, Network};
use xlner::synth::BilingualLexicon;
use xlner::{Error, Result};

use crate::config::Config;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_corpus(path: &Path, schema: &TagSchema) -> Result<Vec<LabeledSentence>> {
    let parsed = parse_conll_with_diagnostics(&read_text(path)?, schema, "und")?;
    for r in &parsed.repairs {
        log::warn!("{}: line {}: orphan I- tag rewritten to B-", path.display(), r.line);
    }
    Ok(parsed.sentences)
}

pub fn read_lexicon(path: &Path) -> Result<BilingualLexicon> {
    BilingualLexicon::parse_tsv(&read_text(path)?)
}

pub fn model_bytes(params: &ParamStore<f32>, model: &ModelConfig) -> Result<Vec<u8>> {
    checkpoint::to_bytes(params, &serde_json::to_value(model)?)
}

pub fn load_model(path: &Path) -> Result<(Network, ParamStore<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let (params, meta) = checkpoint::from_bytes(&bytes)?;
    let config: ModelConfig =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: bad model metadata: {e}", path.display())))?;
    let net = Network::for_store(config, &params)?;
    Ok((net, params))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    config: &'a Config,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Collects a command's inputs and outputs, then writes every output and a
/// `<output>.manifest.json` beside each one.
pub struct Run<'a> {
    pub command: &'a str,
    pub argv: &'a [String],
    pub seed: u64,
    pub config: &'a Config,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl<'a> Run<'a> {
    pub fn new(command: &'a str, argv: &'a [String], seed: u64, config: &'a Config) -> Self {
        Run {
            command,
            argv,
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.outputs.push((path, bytes));
    }

    pub fn finish(self) -> Result<()> {
        let checksums: BTreeMap<String, String> = self
            .outputs
            .iter()
            .map(|(p, b)| (p.display().to_string(), sha256_hex(b)))
            .collect();
        let manifest = Manifest {
            command: self.command,
            argv: self.argv,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: checksums,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes)?;
            write_atomic(&with_suffix(path, ".manifest.json"), json.as_bytes())?;
            log::info!("wrote {}", path.display());
        }
        Ok(())
    }
}
