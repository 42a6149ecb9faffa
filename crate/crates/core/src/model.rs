//! Hashed character-trigram encoder with one residual self-attention
//! fusion layer, biaffine and conditional-layer-norm relation layers, and
//! the projection and classifier heads.
//!
//! Every forward function is generic over the scalar type so the gradient
//! checker runs exactly the training code in `f64`.
//!
//! Canonical parameter names, in checkpoint order:
//!
//! | name | shape |
//! |---|---|
//! | `embed.table` | `[V, d]` |
//! | `fusion.wq`, `fusion.wk`, `fusion.wv`, `fusion.wo` | `[d, d]` |
//! | `fusion.ln_gain`, `fusion.ln_bias` | `[d]` |
//! | `rel.head.w` / `.b`, `rel.tail.w` / `.b` | `[d, d]` / `[d]` |
//! | `rel.biaffine.w1` | `[d, d_rel, d]` |
//! | `rel.biaffine.w2` | `[d_rel, 2d]` |
//! | `rel.biaffine.b` | `[d_rel]` |
//! | `rel.cln.alpha.w`, `rel.cln.beta.w` | `[d, d]` |
//! | `rel.cln.alpha.b`, `rel.cln.beta.b` | `[d]` |
//! | `rel.adapter.w` / `.b` | `[d_rel, d]` / `[d_rel]` |
//! | `proj.hidden.w` / `.b` | `[d_rel, d_rel]` / `[d_rel]` |
//! | `proj.out.w` / `.b` | `[d_proj, d_rel]` / `[d_proj]` |
//! | `cls.hidden.w` / `.b` | `[d_rel, d_rel]` / `[d_rel]` |
//! | `cls.out.w` / `.b` | `[R, d_rel]` / `[R]` |
//!
//! Linear weights are stored `[out, in]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TagSchema;
use crate::diff::tape::softmax_in_place;
use crate::diff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::relcodec::{num_classes, ScoredGrid};
use crate::rng::{fnv1a64, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_rel: usize,
    pub d_proj: usize,
    pub vocab_buckets: usize,
    pub n_gram: usize,
    pub heads: usize,
    pub dropout: f64,
    pub schema: TagSchema,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_rel: 64,
            d_proj: 128,
            vocab_buckets: 1 << 15,
            n_gram: 3,
            heads: 1,
            dropout: 0.1,
            schema: TagSchema::xtreme(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_rel == 0 || self.d_proj == 0 || self.vocab_buckets == 0 || self.n_gram == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads != 1 {
            return Err(Error::Config("only a single fusion head is supported".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        num_classes(&self.schema)
    }
}

/// Embedding buckets of one token: FNV-1a of each character n-gram of
/// `^token$`, modulo `buckets`. Strings shorter than `n` give one n-gram.
pub fn token_buckets(token: &str, n: usize, buckets: usize) -> Vec<usize> {
    let marked: Vec<char> = std::iter::once('^').chain(token.chars()).chain(std::iter::once('$')).collect();
    let grams = if marked.len() <= n {
        vec![&marked[..]]
    } else {
        marked.windows(n).collect()
    };
    grams
        .into_iter()
        .map(|g| {
            let s: String = g.iter().collect();
            (fnv1a64(s.as_bytes()) % buckets as u64) as usize
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    head: Linear,
    tail: Linear,
    w1: ParamId,
    w2: ParamId,
    b: ParamId,
    alpha: Linear,
    beta: Linear,
    adapter: Linear,
    proj_hidden: Linear,
    proj_out: Linear,
    cls_hidden: Linear,
    cls_out: Linear,
}

/// Architecture description: configuration plus parameter handles. The
/// parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    ids: Ids,
}

/// Relation representations of one sentence, flattened to `[n², d_rel]`
/// with cell `(i, j)` at row `i·n + j`.
#[derive(Clone, Copy, Debug)]
pub struct RelRep {
    pub n: usize,
    pub rows: Var,
}

struct Init {
    seed: u64,
    k: u64,
}

impl Init {
    fn weight(&mut self, s: &mut ParamStore<f32>, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.k += 1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        s.add(name, uniform(&mut rng_for(self.seed, "init", self.k), shape, bound))
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl Network {
    /// Fresh parameters. Weights are uniform in ±1/√fan_in, biases zero,
    /// the layer-norm gain one, and the biaffine `W1` zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Network, ParamStore<f32>)> {
        config.validate()?;
        let (d, dr, dp, r) = (config.d_model, config.d_rel, config.d_proj, config.num_classes());
        let mut s = ParamStore::new();
        let mut init = Init { seed, k: 0 };
        let embed = init.weight(&mut s, "embed.table", &[config.vocab_buckets, d], d)?;
        let wq = init.weight(&mut s, "fusion.wq", &[d, d], d)?;
        let wk = init.weight(&mut s, "fusion.wk", &[d, d], d)?;
        let wv = init.weight(&mut s, "fusion.wv", &[d, d], d)?;
        let wo = init.weight(&mut s, "fusion.wo", &[d, d], d)?;
        let ln_gain = s.add("fusion.ln_gain", Tensor::full(&[d], 1.0))?;
        let ln_bias = s.add("fusion.ln_bias", Tensor::zeros(&[d]))?;
        let linear = |init: &mut Init, s: &mut ParamStore<f32>, name: &str, out: usize, inp: usize| -> Result<Linear> {
            let w = init.weight(s, &format!("{name}.w"), &[out, inp], inp)?;
            let b = s.add(format!("{name}.b"), Tensor::zeros(&[out]))?;
            Ok(Linear { w, b: Some(b) })
        };
        let head = linear(&mut init, &mut s, "rel.head", d, d)?;
        let tail = linear(&mut init, &mut s, "rel.tail", d, d)?;
        let w1 = s.add("rel.biaffine.w1", Tensor::zeros(&[d, dr, d]))?;
        let w2 = init.weight(&mut s, "rel.biaffine.w2", &[dr, 2 * d], 2 * d)?;
        let b = s.add("rel.biaffine.b", Tensor::zeros(&[dr]))?;
        let alpha = linear(&mut init, &mut s, "rel.cln.alpha", d, d)?;
        let beta = linear(&mut init, &mut s, "rel.cln.beta", d, d)?;
        let adapter = linear(&mut init, &mut s, "rel.adapter", dr, d)?;
        let proj_hidden = linear(&mut init, &mut s, "proj.hidden", dr, dr)?;
        let proj_out = linear(&mut init, &mut s, "proj.out", dp, dr)?;
        let cls_hidden = linear(&mut init, &mut s, "cls.hidden", dr, dr)?;
        let cls_out = linear(&mut init, &mut s, "cls.out", r, dr)?;
        // b_alpha = 1 so the CLN gain starts near one.
        let ba = alpha.b.unwrap();
        s.get_mut(ba).data_mut().iter_mut().for_each(|v| *v = 1.0);
        let ids = Ids {
            embed,
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
            head,
            tail,
            w1,
            w2,
            b,
            alpha,
            beta,
            adapter,
            proj_hidden,
            proj_out,
            cls_hidden,
            cls_out,
        };
        Ok((Network { config, ids }, s))
    }

    /// Rebuilds the handles for an existing store (e.g. a loaded checkpoint).
    pub fn for_store(config: ModelConfig, store: &ParamStore<f32>) -> Result<Network> {
        let (net, fresh) = Network::init(config, 0)?;
        if fresh.names() != store.names() {
            return Err(Error::Checkpoint("parameter names do not match the model layout".into()));
        }
        for ((name, a), (_, b)) in fresh.iter().zip(store.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(net)
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, l: Linear, x: Var) -> Result<Var> {
        let w = p.bind(tape, l.w);
        let y = tape.matmul_nt(x, w)?;
        match l.b {
            Some(b) => {
                let b = p.bind(tape, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Mean of hashed n-gram rows per token, `[n, d_model]`.
    pub fn hash_embed<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, tokens: &[String]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot embed an empty sentence".into()));
        }
        let bags = tokens
            .iter()
            .map(|t| token_buckets(t, self.config.n_gram, self.config.vocab_buckets))
            .collect();
        tape.embed_bag(self.ids.embed, p.get(self.ids.embed), bags)
    }

    /// `LN(E + softmax(QKᵀ/√d) V W_o)`, then dropout when a seed is given.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, tokens: &[String], dropout_seed: Option<u64>) -> Result<Var> {
        let e = self.hash_embed(tape, p, tokens)?;
        let h = self.fuse(tape, p, e)?;
        match dropout_seed {
            Some(seed) if self.config.dropout > 0.0 => {
                let numel = tape.value(h).numel();
                let mask = dropout_mask(numel, self.config.dropout, seed);
                tape.apply_mask(h, mask)
            }
            _ => Ok(h),
        }
    }

    /// The fusion layer alone, on given embeddings `[n, d]`.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, e: Var) -> Result<Var> {
        let d = self.config.d_model;
        let no_bias = |w| Linear { w, b: None };
        let q = self.linear(tape, p, no_bias(self.ids.wq), e)?;
        let k = self.linear(tape, p, no_bias(self.ids.wk), e)?;
        let v = self.linear(tape, p, no_bias(self.ids.wv), e)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(scores);
        let mixed = tape.matmul(attn, v)?;
        let out = self.linear(tape, p, no_bias(self.ids.wo), mixed)?;
        let res = tape.add(e, out)?;
        let norm = tape.standardize(res);
        let gain = p.bind(tape, self.ids.ln_gain);
        let bias = p.bind(tape, self.ids.ln_bias);
        let g = tape.mul_bias(norm, gain)?;
        tape.add_bias(g, bias)
    }

    /// `r_ij = h̃_iᵀ W1 h̃_j + W2 (h̃_i ⊕ h̃_j) + b`, `[n, n, d_rel]`.
    pub fn biaffine_rel<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, h: Var) -> Result<Var> {
        let d = self.config.d_model;
        let hh = self.linear(tape, p, self.ids.head, h)?;
        let ht = self.linear(tape, p, self.ids.tail, h)?;
        let w1 = p.bind(tape, self.ids.w1);
        let bil = tape.bilinear(hh, w1, ht)?;
        let w2 = p.bind(tape, self.ids.w2);
        let w2a = tape.narrow(w2, 0, d)?;
        let w2b = tape.narrow(w2, d, d)?;
        let ua = tape.matmul_nt(hh, w2a)?;
        let ub = tape.matmul_nt(ht, w2b)?;
        let lin = tape.pair_add(ua, ub)?;
        let sum = tape.add(bil, lin)?;
        let b = p.bind(tape, self.ids.b);
        tape.add_bias(sum, b)
    }

    /// `r′_ij = γ_i ⊙ standardize(h_j) + λ_i`, `[n, n, d_model]`.
    pub fn cln_rel<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, h: Var) -> Result<Var> {
        let gamma = self.linear(tape, p, self.ids.alpha, h)?;
        let lambda = self.linear(tape, p, self.ids.beta, h)?;
        let norm = tape.standardize(h);
        let scaled = tape.pair_mul(gamma, norm)?;
        let zeros = tape.constant(Tensor::zeros(tape.shape(h)));
        let shift = tape.pair_add(lambda, zeros)?;
        tape.add(scaled, shift)
    }

    /// Biaffine plus adapted CLN branch, flattened to `[n², d_rel]`.
    pub fn rel_rep<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, h: Var) -> Result<RelRep> {
        let n = tape.shape(h)[0];
        let (d, dr) = (self.config.d_model, self.config.d_rel);
        let bi = self.biaffine_rel(tape, p, h)?;
        let bi = tape.reshape(bi, &[n * n, dr])?;
        let cln = self.cln_rel(tape, p, h)?;
        let cln = tape.reshape(cln, &[n * n, d])?;
        let adapted = self.linear(tape, p, self.ids.adapter, cln)?;
        let rows = tape.add(bi, adapted)?;
        Ok(RelRep { n, rows })
    }

    /// Class logits per cell, `[n², R]`.
    pub fn classify_logits<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, rel: RelRep) -> Result<Var> {
        let hidden = self.linear(tape, p, self.ids.cls_hidden, rel.rows)?;
        let hidden = tape.relu(hidden);
        self.linear(tape, p, self.ids.cls_out, hidden)
    }

    /// Class probabilities per cell, `[n², R]`.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, rel: RelRep) -> Result<Var> {
        let logits = self.classify_logits(tape, p, rel)?;
        Ok(tape.softmax(logits))
    }

    /// Projections of the listed cells (flat indices `i·n + j`),
    /// `[cells.len(), d_proj]`.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, rel: RelRep, cells: &[usize]) -> Result<Var> {
        let rows = tape.take_rows(rel.rows, cells)?;
        let hidden = self.linear(tape, p, self.ids.proj_hidden, rows)?;
        let hidden = tape.tanh(hidden);
        self.linear(tape, p, self.ids.proj_out, hidden)
    }

    /// Projections of every cell, `[n², d_proj]`.
    pub fn project_all<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, rel: RelRep) -> Result<Var> {
        let cells: Vec<usize> = (0..rel.n * rel.n).collect();
        self.project(tape, p, rel, &cells)
    }

    /// Mean of the rows of `H`.
    pub fn sentence_rep<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        tape.mean_rows(h)
    }

    /// Inference: the sentence's class distributions, no dropout.
    pub fn predict(&self, p: &ParamStore<f32>, tokens: &[String]) -> Result<ScoredGrid> {
        let mut tape = Tape::new();
        let h = self.encode(&mut tape, p, tokens, None)?;
        let rel = self.rel_rep(&mut tape, p, h)?;
        let logits = self.classify_logits(&mut tape, p, rel)?;
        scored_from_logits(tape.value(logits), rel.n)
    }
}

/// Softmax in 64-bit from `[n², R]` logits.
pub fn scored_from_logits<T: Real>(logits: &Tensor<T>, n: usize) -> Result<ScoredGrid> {
    logits.check_finite("classifier logits")?;
    let r = logits.last_dim();
    let mut probs = logits.to_f64_vec();
    for cell in probs.chunks_exact_mut(r) {
        softmax_in_place(cell);
    }
    ScoredGrid::new(n, r, probs)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_mask<T: Real>(numel: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = rng_for(seed, "dropout", numel as u64);
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..numel)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::STANDARDIZE_EPS;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_rel: 6,
            d_proj: 4,
            vocab_buckets: 97,
            ..Default::default()
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn set(store: &mut ParamStore<f64>, name: &str, f: impl Fn(&[usize], usize) -> f64) {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        let t = store.get_mut(id);
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = f(&shape, k);
        }
    }

    #[test]
    fn buckets_of_single_char_token() {
        let b = token_buckets("a", 3, 1000);
        assert_eq!(b, vec![(fnv1a64(b"^a$") % 1000) as usize]);
        assert_eq!(token_buckets("ab", 3, 1000).len(), 2);
    }

    #[test]
    fn embed_shape_and_repeats() {
        let (net, p) = Network::init(small(), 1).unwrap();
        let mut tape = Tape::new();
        let e = net.hash_embed(&mut tape, &p, &toks("x word x")).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), &[3, 8]);
        assert_eq!(v.row(0), v.row(2));
        let mut tape = Tape::new();
        let e = net.hash_embed(&mut tape, &p, &toks("a")).unwrap();
        let bucket = token_buckets("a", 3, 97)[0];
        assert_eq!(tape.value(e).data(), p.by_name("embed.table").unwrap().row(bucket));
    }

    #[test]
    fn encode_is_deterministic_without_dropout() {
        let (net, p) = Network::init(small(), 2).unwrap();
        let run = |seed| {
            let mut tape = Tape::new();
            let h = net.encode(&mut tape, &p, &toks("one two three"), seed).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(Some(5)), run(Some(5)));
        assert_ne!(run(Some(5)), run(Some(6)));
    }

    #[test]
    fn single_token_fusion_closed_form() {
        // n = 1: attention weight is 1, so H = LN(e + e Wvᵀ Woᵀ)
        let (net, p) = Network::init(small(), 3).unwrap();
        let p = p.cast::<f64>();
        let mut tape = Tape::new();
        let h = net.encode(&mut tape, &p, &toks("solo"), None).unwrap();
        let mut t2 = Tape::new();
        let e = net.hash_embed(&mut t2, &p, &toks("solo")).unwrap();
        let e = t2.value(e).data().to_vec();
        let mat = |name: &str, x: &[f64]| -> Vec<f64> {
            let w = p.by_name(name).unwrap();
            (0..8).map(|o| (0..8).map(|i| w.data()[o * 8 + i] * x[i]).sum()).collect()
        };
        let v = mat("fusion.wv", &e);
        let o = mat("fusion.wo", &v);
        let r: Vec<f64> = e.iter().zip(&o).map(|(a, b)| a + b).collect();
        let mean = r.iter().sum::<f64>() / 8.0;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        let want: Vec<f64> = r.iter().map(|x| (x - mean) / (var + STANDARDIZE_EPS).sqrt()).collect();
        for (a, b) in tape.value(h).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn biaffine_reduces_to_bias_and_dot_product() {
        let cfg = ModelConfig { d_rel: 1, ..small() };
        let (net, p) = Network::init(cfg, 4).unwrap();
        let mut p = p.cast::<f64>();
        set(&mut p, "rel.biaffine.w2", |_, _| 0.0);
        set(&mut p, "rel.biaffine.b", |_, _| 0.75);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_f64(&[2, 8], &(0..16).map(|k| k as f64 * 0.1).collect::<Vec<_>>()).unwrap());
        let r = net.biaffine_rel(&mut tape, &p, h).unwrap();
        assert_eq!(tape.shape(r), &[2, 2, 1]);
        assert!(tape.value(r).data().iter().all(|&v| v == 0.75));

        // identity MLPs, W1 = I, W2 = 0, b = 0
        set(&mut p, "rel.biaffine.b", |_, _| 0.0);
        set(&mut p, "rel.head.w", |_, k| if k / 8 == k % 8 { 1.0 } else { 0.0 });
        set(&mut p, "rel.tail.w", |_, k| if k / 8 == k % 8 { 1.0 } else { 0.0 });
        set(&mut p, "rel.biaffine.w1", |_, k| if k / 8 == k % 8 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let hv: Vec<f64> = (0..16).map(|k| (k as f64 * 0.7).sin()).collect();
        let h = tape.constant(Tensor::from_f64(&[2, 8], &hv).unwrap());
        let r = net.biaffine_rel(&mut tape, &p, h).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = (0..8).map(|c| hv[i * 8 + c] * hv[j * 8 + c]).sum();
                assert!((tape.value(r).data()[i * 2 + j] - dot).abs() < 1e-12);
            }
        }
        // doubling h quadruples the bilinear term
        let mut tape = Tape::new();
        let h2 = tape.constant(Tensor::from_f64(&[2, 8], &hv.iter().map(|x| 2.0 * x).collect::<Vec<_>>()).unwrap());
        let r2 = net.biaffine_rel(&mut tape, &p, h2).unwrap();
        let first = tape.value(r2).data()[1];
        let dot: f64 = (0..8).map(|c| hv[c] * hv[8 + c]).sum();
        assert!((first - 4.0 * dot).abs() < 1e-12);
    }

    #[test]
    fn cln_reduces_to_standardization() {
        let (net, p) = Network::init(small(), 5).unwrap();
        let mut p = p.cast::<f64>();
        set(&mut p, "rel.cln.alpha.w", |_, _| 0.0);
        set(&mut p, "rel.cln.alpha.b", |_, _| 1.0);
        set(&mut p, "rel.cln.beta.w", |_, _| 0.0);
        set(&mut p, "rel.cln.beta.b", |_, _| 0.0);
        let hv: Vec<f64> = (0..24).map(|k| (k as f64 * 1.3).cos() * 2.0).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_f64(&[3, 8], &hv).unwrap());
        let r = net.cln_rel(&mut tape, &p, h).unwrap();
        let norm = tape.standardize(h);
        let (rv, nv) = (tape.value(r).data(), tape.value(norm).data());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(&rv[(i * 3 + j) * 8..(i * 3 + j + 1) * 8], &nv[j * 8..(j + 1) * 8]);
            }
        }
    }

    #[test]
    fn cln_constant_row_gives_shift() {
        let (net, p) = Network::init(small(), 6).unwrap();
        let p = p.cast::<f64>();
        let mut hv: Vec<f64> = (0..16).map(|k| k as f64 * 0.2).collect();
        hv[8..].iter_mut().for_each(|v| *v = 3.0);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_f64(&[2, 8], &hv).unwrap());
        let r = net.cln_rel(&mut tape, &p, h).unwrap();
        // lambda_i = W_beta h_i + b_beta
        let w = p.by_name("rel.cln.beta.w").unwrap().data();
        for i in 0..2 {
            for c in 0..8 {
                let lambda: f64 = (0..8).map(|k| w[c * 8 + k] * hv[i * 8 + k]).sum();
                let got = tape.value(r).data()[(i * 2 + 1) * 8 + c];
                assert!((got - lambda).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cln_hand_computed_three_dims() {
        let cfg = ModelConfig { d_model: 3, ..small() };
        let (net, p) = Network::init(cfg, 7).unwrap();
        let mut p = p.cast::<f64>();
        let wa = [0.5, -1.0, 0.25, 0.0, 2.0, 1.0, -0.5, 0.0, 1.5];
        let wb = [1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, -1.0, 2.0];
        set(&mut p, "rel.cln.alpha.w", |_, k| wa[k]);
        set(&mut p, "rel.cln.alpha.b", |_, k| [0.1, 0.2, 0.3][k]);
        set(&mut p, "rel.cln.beta.w", |_, k| wb[k]);
        set(&mut p, "rel.cln.beta.b", |_, k| [-0.1, 0.0, 0.1][k]);
        let hv = [1.0, 2.0, 4.0, -1.0, 0.5, 0.0];
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_f64(&[2, 3], &hv).unwrap());
        let r = net.cln_rel(&mut tape, &p, h).unwrap();
        let affine = |w: &[f64], b: [f64; 3], x: &[f64]| -> Vec<f64> {
            (0..3).map(|o| b[o] + (0..3).map(|k| w[o * 3 + k] * x[k]).sum::<f64>()).collect()
        };
        for i in 0..2 {
            let g = affine(&wa, [0.1, 0.2, 0.3], &hv[i * 3..i * 3 + 3]);
            let l = affine(&wb, [-0.1, 0.0, 0.1], &hv[i * 3..i * 3 + 3]);
            for j in 0..2 {
                let x = &hv[j * 3..j * 3 + 3];
                let mu = x.iter().sum::<f64>() / 3.0;
                let sd = (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 3.0 + 1e-5).sqrt();
                for c in 0..3 {
                    let want = g[c] * (x[c] - mu) / sd + l[c];
                    let got = tape.value(r).data()[(i * 2 + j) * 3 + c];
                    assert!((got - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rel_rep_branches_and_shapes() {
        let (net, p) = Network::init(small(), 8).unwrap();
        let mut p = p.cast::<f64>();
        let t = toks("a b c d e");
        let run = |p: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let h = net.encode(&mut tape, p, &t, None).unwrap();
            let rel = net.rel_rep(&mut tape, p, h).unwrap();
            let bi = net.biaffine_rel(&mut tape, p, h).unwrap();
            (tape.value(rel.rows).clone(), tape.value(bi).data().to_vec())
        };
        let (full, _) = run(&p);
        assert_eq!(full.shape(), &[25, 6]);
        // zero CLN branch through the adapter
        set(&mut p, "rel.adapter.w", |_, _| 0.0);
        let (rel, bi) = run(&p);
        assert_eq!(rel.data(), &bi[..]);
    }

    #[test]
    fn classify_and_project_shapes() {
        let (net, p) = Network::init(small(), 9).unwrap();
        let scored = net.predict(&p, &toks("a b c d e")).unwrap();
        assert_eq!((scored.n(), scored.classes()), (5, 5));
        let mut tape = Tape::new();
        let h = net.encode(&mut tape, &p, &toks("a b c d e"), None).unwrap();
        let rel = net.rel_rep(&mut tape, &p, h).unwrap();
        let z = net.project_all(&mut tape, &p, rel).unwrap();
        assert_eq!(tape.shape(z), &[25, 4]);
        let s = net.sentence_rep(&mut tape, h).unwrap();
        assert_eq!(tape.shape(s), &[8]);

        let zero = Tensor::<f64>::zeros(&[3, 5]);
        let g = scored_from_logits(&zero, 1).unwrap_err();
        assert!(matches!(g, Error::Shape { .. }));
        let zero = Tensor::<f64>::zeros(&[4, 5]);
        let g = scored_from_logits(&zero, 2).unwrap();
        assert!(g.probs().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let shifted = Tensor::<f64>::from_f64(&[1, 3], &[101.0, 103.0, 102.0]).unwrap();
        assert_eq!(scored_from_logits(&shifted, 1).unwrap().argmax(0, 0).0, 1);
    }

    #[test]
    fn sentence_rep_of_constant_rows() {
        let (net, _) = Network::init(small(), 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_f64(&[3, 2], &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap());
        let s = net.sentence_rep(&mut tape, h).unwrap();
        assert_eq!(tape.value(s).data(), &[1.5, -2.0]);
    }

    #[test]
    fn for_store_checks_layout() {
        let (_, p) = Network::init(small(), 1).unwrap();
        assert!(Network::for_store(small(), &p).is_ok());
        let other = ModelConfig { d_rel: 7, ..small() };
        assert!(Network::for_store(other, &p).is_err());
    }
}
