//! Central finite-difference checks of the reverse-mode gradients, run in
//! `f64` through exactly the training code paths.
//!
//! Error metric per coordinate: `|a − f| / max(|a|, |f|, floor)` where `a`
//! is the analytic and `f` the numeric derivative. Coordinates whose `±ε`
//! evaluations put some ReLU input on the other side of zero are not
//! differentiable there; they are skipped and counted.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codeswitch::RelationAlignment;
use crate::corpus::{EntitySpan, TagSchema};
use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network, RelRep};
use crate::objectives::{ce_loss, mse_loss, plan_tc_for, sc_loss, tc_loss};
use crate::relcodec::{encode_grid, ScoredGrid};
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub d_model: usize,
    /// Sentence length.
    pub n: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates probed per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            d_model: 8,
            n: 5,
            eps: 1e-3,
            tolerance: 1e-3,
            floor: 1e-4,
            coords_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    pub coords: usize,
    pub skipped_kinks: usize,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance && self.coords > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

fn evaluate<F>(store: &ParamStore<f64>, build: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, store)?;
    Ok((tape.scalar(root)?, tape.relu_pattern()))
}

/// Checks `d build / d θ` for every tensor in `store` against central
/// differences. `build` must produce a scalar.
pub fn check<F>(name: &str, store: &mut ParamStore<f64>, build: F, cfg: &GradCheckConfig) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, store)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(root)?.into_params();
    let mut result = CheckResult {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        coords: 0,
        skipped_kinks: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for (t, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        let analytic = match grads.get(id) {
            Some(g) => g.to_dense(&shape).into_data(),
            None => vec![0.0; store.get(id).numel()],
        };
        for k in probe_coords(&analytic, cfg.coords_per_tensor, derive_seed(cfg.seed, name, t as u64)) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + cfg.eps;
            let plus = evaluate(store, &build);
            store.get_mut(id).data_mut()[k] = orig - cfg.eps;
            let minus = evaluate(store, &build);
            store.get_mut(id).data_mut()[k] = orig;
            let ((fp, pp), (fm, pm)) = (plus?, minus?);
            if pp != base_pattern || pm != base_pattern {
                result.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if !err.is_finite() {
                return Err(Error::numeric(format!("gradcheck {name}"), format!("{} coordinate {k}", store.name(id))));
            }
            result.coords += 1;
            if err > result.max_rel_err || result.worst.is_empty() {
                result.max_rel_err = err;
                result.worst = store.name(id).to_string();
            }
        }
    }
    Ok(result)
}

/// Coordinates to probe: up to `cap`, preferring ones with non-zero
/// analytic gradient, plus a few arbitrary ones so that spurious zeros are
/// caught too.
fn probe_coords(analytic: &[f64], cap: usize, seed: u64) -> Vec<usize> {
    if analytic.len() <= cap {
        return (0..analytic.len()).collect();
    }
    let mut rng = rng_for(seed, "gradcheck.coords", 0);
    let live: Vec<usize> = (0..analytic.len()).filter(|&k| analytic[k] != 0.0).collect();
    let extra = 4.min(cap);
    let take_live = (cap - extra).min(live.len());
    let mut out: Vec<usize> = sample(&mut rng, live.len(), take_live).into_iter().map(|i| live[i]).collect();
    out.extend(sample(&mut rng, analytic.len(), cap - take_live));
    out.sort_unstable();
    out.dedup();
    out
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], centre: f64, half: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| centre + rng.gen_range(-half..half)).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`: reduces any layer output to a scalar
/// whose gradient exercises every output entry.
fn probe<R: Rng>(tape: &mut Tape<f64>, out: Var, rng: &mut R) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random_tensor(rng, &shape, 0.0, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn words(seed: u64, n: usize) -> Vec<String> {
    let mut rng = rng_for(seed, "gradcheck.words", n as u64);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..7);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
        })
        .collect()
}

/// Model for the checks: small vocabulary so every embedding row is
/// reachable, dropout on so the mask path is covered.
fn check_model(cfg: &GradCheckConfig) -> Result<(Network, ParamStore<f64>)> {
    let config = ModelConfig {
        d_model: cfg.d_model,
        d_rel: cfg.d_model,
        d_proj: cfg.d_model.saturating_sub(2).max(2),
        vocab_buckets: 64,
        dropout: 0.25,
        schema: TagSchema::xtreme(),
        ..Default::default()
    };
    let (net, store) = Network::init(config, cfg.seed)?;
    let mut store = store.cast::<f64>();
    // a generic point: W1 non-zero, gains not exactly one
    let mut rng = rng_for(cfg.seed, "gradcheck.params", 0);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let name = store.name(id).to_string();
        let centre = if name.ends_with("gain") || name == "rel.cln.alpha.b" { 1.0 } else { 0.0 };
        // weights at their init scale, vectors spread by ±0.5
        let half = if shape.len() > 1 { 1.0 / (*shape.last().unwrap() as f64).sqrt() } else { 0.5 };
        *store.get_mut(id) = random_tensor(&mut rng, &shape, centre, half);
    }
    Ok((net, store))
}

/// Gradient checks of every layer and every loss.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.n < 2 || cfg.d_model < 2 || !(cfg.eps > 0.0) {
        return Err(Error::Config(format!("invalid gradcheck settings {cfg:?}")));
    }
    let (net, base) = check_model(cfg)?;
    let n = cfg.n;
    let d = cfg.d_model;
    let mut rng = rng_for(cfg.seed, "gradcheck.inputs", 0);
    let tokens = words(cfg.seed, n);
    let other = words(cfg.seed + 1, n - 1);
    let mut checks = Vec::new();
    let probe_seed = derive_seed(cfg.seed, "gradcheck.probe", 0);

    // layers, on a free input matrix registered as an extra parameter
    let with_input = |name: &str, rng: &mut rand_chacha::ChaCha8Rng| -> Result<(ParamStore<f64>, ParamId)> {
        let mut s = base.clone();
        let id = s.add(name, random_tensor(rng, &[n, d], 0.0, 1.0))?;
        Ok((s, id))
    };

    let (mut s, e) = with_input("input.e", &mut rng)?;
    checks.push(check(
        "fusion",
        &mut s,
        |t, p| {
            let x = p.bind(t, e);
            let out = net.fuse(t, p, x)?;
            probe(t, out, &mut rng_for(probe_seed, "fusion", 0))
        },
        cfg,
    )?);

    let (mut s, h) = with_input("input.h", &mut rng)?;
    checks.push(check(
        "biaffine",
        &mut s,
        |t, p| {
            let x = p.bind(t, h);
            let out = net.biaffine_rel(t, p, x)?;
            probe(t, out, &mut rng_for(probe_seed, "biaffine", 0))
        },
        cfg,
    )?);
    checks.push(check(
        "cln",
        &mut s,
        |t, p| {
            let x = p.bind(t, h);
            let out = net.cln_rel(t, p, x)?;
            probe(t, out, &mut rng_for(probe_seed, "cln", 0))
        },
        cfg,
    )?);
    let cells: Vec<usize> = (0..n * n).step_by(3).collect();
    checks.push(check(
        "projection",
        &mut s,
        |t, p| {
            let x = p.bind(t, h);
            let rel = net.rel_rep(t, p, x)?;
            let out = net.project(t, p, rel, &cells)?;
            probe(t, out, &mut rng_for(probe_seed, "projection", 0))
        },
        cfg,
    )?);
    checks.push(check(
        "classifier",
        &mut s,
        |t, p| {
            let x = p.bind(t, h);
            let rel = net.rel_rep(t, p, x)?;
            let out = net.classify(t, p, rel)?;
            probe(t, out, &mut rng_for(probe_seed, "classifier", 0))
        },
        cfg,
    )?);

    // encoder end to end: hashed embeddings, fusion, dropout mask
    let mut s = base.clone();
    checks.push(check(
        "encoder",
        &mut s,
        |t, p| {
            let out = net.encode(t, p, &tokens, Some(5))?;
            probe(t, out, &mut rng_for(probe_seed, "encoder", 0))
        },
        cfg,
    )?);

    // losses through the whole network
    let schema = net.config.schema.clone();
    let gold = encode_grid(&[EntitySpan::new(0, 1, 0), EntitySpan::new(3, 3, 2)], n, &schema)?;
    checks.push(check(
        "loss_ce",
        &mut s,
        |t, p| {
            let hv = net.encode(t, p, &tokens, None)?;
            let rel = net.rel_rep(t, p, hv)?;
            let logits = net.classify_logits(t, p, rel)?;
            ce_loss(t, logits, &gold)
        },
        cfg,
    )?);

    let batch: Vec<(Vec<String>, Vec<String>)> = (0..3)
        .map(|b| (words(cfg.seed + 10 + b, n), words(cfg.seed + 20 + b, n - 1)))
        .collect();
    for symmetric in [false, true] {
        let name = if symmetric { "loss_sc_symmetric" } else { "loss_sc" };
        checks.push(check(
            name,
            &mut s,
            |t, p| {
                let mut src = Vec::new();
                let mut cpt = Vec::new();
                for (a, b) in &batch {
                    let ha = net.encode(t, p, a, None)?;
                    let hb = net.encode(t, p, b, None)?;
                    src.push(net.sentence_rep(t, ha)?);
                    cpt.push(net.sentence_rep(t, hb)?);
                }
                let src = t.stack_rows(&src)?;
                let cpt = t.stack_rows(&cpt)?;
                sc_loss(t, src, cpt, 0.5, symmetric)
            },
            cfg,
        )?);
    }

    let alignment = RelationAlignment {
        pairs: vec![((0, 0), (0, 0)), ((1, 0), (1, 0)), ((2, 3), (1, 2)), ((4, 4), (3, 3))],
    };
    let plan = plan_tc_for(n, n - 1, &alignment, 6, cfg.seed);
    checks.push(check(
        "loss_tc",
        &mut s,
        |t, p| {
            let ha = net.encode(t, p, &tokens, None)?;
            let hb = net.encode(t, p, &other, None)?;
            let ra = net.rel_rep(t, p, ha)?;
            let rb: RelRep = net.rel_rep(t, p, hb)?;
            let zs = net.project(t, p, ra, &plan.src_cells)?;
            let zc = net.project(t, p, rb, &plan.cpt_cells)?;
            tc_loss(t, zs, zc, &plan, 0.5)?.ok_or_else(|| Error::Contract("empty tc plan".into()))
        },
        cfg,
    )?);

    let r = net.config.num_classes();
    let mut probs = random_tensor(&mut rng, &[n * n * r], 1.0, 0.9).into_data();
    for cell in probs.chunks_mut(r) {
        let z: f64 = cell.iter().sum();
        cell.iter_mut().for_each(|v| *v /= z);
    }
    let teacher = ScoredGrid::new(n, r, probs)?;
    checks.push(check(
        "loss_mse",
        &mut s,
        |t, p| {
            let hv = net.encode(t, p, &tokens, Some(9))?;
            let rel = net.rel_rep(t, p, hv)?;
            let probs = net.classify(t, p, rel)?;
            mse_loss(t, probs, &teacher)
        },
        cfg,
    )?);

    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> GradCheckConfig {
        GradCheckConfig::default()
    }

    #[test]
    fn suite_passes() {
        let report = run_suite(&cfg()).unwrap();
        for c in &report.checks {
            assert!(c.passed(report.tolerance), "{c:?}");
            assert!(c.coords > 20, "{c:?}");
        }
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        for want in ["fusion", "biaffine", "cln", "projection", "classifier", "loss_ce", "loss_sc", "loss_tc", "loss_mse"] {
            assert!(names.contains(&want), "{want}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // exp(x) recorded with the value of x² has the wrong derivative
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![0.7, -0.3])).unwrap();
        let res = check(
            "bad",
            &mut s,
            |t, p| {
                let x = p.bind(t, id);
                let sq = t.mul(x, x)?;
                let wrong = t.exp(x);
                let v = t.value(sq).clone();
                let c = t.constant(v);
                let diff = t.sub(wrong, wrong)?;
                let fake = t.add(diff, c)?;
                Ok(t.sum(fake))
            },
            &cfg(),
        )
        .unwrap();
        assert!(!res.passed(1e-3));
    }

    #[test]
    fn relu_kink_is_skipped() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![1e-4, 0.5])).unwrap();
        let res = check(
            "relu",
            &mut s,
            |t, p| {
                let x = p.bind(t, id);
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &cfg(),
        )
        .unwrap();
        assert_eq!(res.skipped_kinks, 1);
        assert_eq!(res.coords, 1);
        assert!(res.max_rel_err < 1e-9);
    }

    /// Rows with norm at least 0.3 and, when wider than one, a standard
    /// deviation of at least 0.2: near those degenerate points cosine and
    /// standardization curve so sharply that ε = 1e-3 differences stop
    /// being accurate.
    fn mat(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(r * c);
        while data.len() < r * c {
            let row = random_tensor(rng, &[c], 0.0, 1.0).into_data();
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            if row.iter().map(|v| v * v).sum::<f64>() >= 0.09 && (c == 1 || var >= 0.04) {
                data.extend(row);
            }
        }
        Tensor::new(vec![r, c], data).unwrap()
    }

    type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

    fn op_cases() -> Vec<(&'static str, Build, Vec<(usize, usize)>)> {
        // operand shapes index the drawn dims: (r, c) is [dims[r], dims[c]]
        vec![
            ("add", |t, v| t.add(v[0], v[1]), vec![(0, 1), (0, 1)]),
            ("sub", |t, v| t.sub(v[0], v[1]), vec![(0, 1), (0, 1)]),
            ("mul", |t, v| t.mul(v[0], v[1]), vec![(0, 1), (0, 1)]),
            ("matmul", |t, v| t.matmul(v[0], v[1]), vec![(0, 1), (1, 2)]),
            ("matmul_nt", |t, v| t.matmul_nt(v[0], v[1]), vec![(0, 1), (2, 1)]),
            ("concat", |t, v| t.concat(&[v[0], v[1]]), vec![(0, 1), (0, 2)]),
            ("stack_rows", |t, v| t.stack_rows(&[v[0], v[1]]), vec![(0, 1), (2, 1)]),
            ("sum", |t, v| Ok(t.sum(v[0])), vec![(0, 1)]),
            ("mean", |t, v| t.mean(v[0]), vec![(0, 1)]),
            ("mean_rows", |t, v| t.mean_rows(v[0]), vec![(0, 1)]),
            ("sqrt", |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let pos = t.add_scalar(sq, 0.5);
                Ok(t.sqrt(pos))
            }, vec![(0, 1)]),
            ("exp", |t, v| Ok(t.exp(v[0])), vec![(0, 1)]),
            ("log", |t, v| {
                let e = t.exp(v[0]);
                let pos = t.add_scalar(e, 0.1);
                Ok(t.log(pos))
            }, vec![(0, 1)]),
            ("relu", |t, v| Ok(t.relu(v[0])), vec![(0, 1)]),
            ("tanh", |t, v| Ok(t.tanh(v[0])), vec![(0, 1)]),
            ("softmax", |t, v| Ok(t.softmax(v[0])), vec![(0, 1)]),
            ("log_softmax", |t, v| Ok(t.log_softmax(v[0])), vec![(0, 1)]),
            ("standardize", |t, v| Ok(t.standardize(v[0])), vec![(0, 1)]),
            ("cosine", |t, v| t.cosine(v[0], v[1]), vec![(0, 1), (2, 1)]),
            ("pair_add", |t, v| t.pair_add(v[0], v[1]), vec![(0, 1), (2, 1)]),
            ("pair_mul", |t, v| t.pair_mul(v[0], v[1]), vec![(0, 1), (2, 1)]),
            ("narrow", |t, v| t.narrow(v[0], 0, 1), vec![(0, 1)]),
            ("take_rows", |t, v| {
                let rows = t.shape(v[0])[0];
                t.take_rows(v[0], &[rows - 1, 0, rows - 1])
            }, vec![(0, 1)]),
            ("add_bias", |t, v| {
                let b = t.narrow(v[1], 0, 1)?;
                let b = t.reshape(b, &[t.shape(v[0])[1]])?;
                t.add_bias(v[0], b)
            }, vec![(0, 1), (1, 1)]),
            ("mul_bias", |t, v| {
                let b = t.narrow(v[1], 0, 1)?;
                let b = t.reshape(b, &[t.shape(v[0])[1]])?;
                t.mul_bias(v[0], b)
            }, vec![(0, 1), (1, 1)]),
            ("apply_mask", |t, v| {
                let numel = t.value(v[0]).numel();
                let mask = (0..numel).map(|k| [0.0, 2.0, 0.5][k % 3]).collect();
                t.apply_mask(v[0], mask)
            }, vec![(0, 1)]),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn every_op_matches_finite_differences(dims in proptest::collection::vec(1usize..5, 3), seed in 0u64..1000) {
            let dims = [dims[0] + 1, dims[1] + 1, dims[2]];
            for (name, op, operands) in op_cases() {
                let mut rng = rng_for(seed, name, 0);
                let mut s = ParamStore::new();
                let ids: Vec<ParamId> = operands
                    .iter()
                    .enumerate()
                    .map(|(k, &(r, c))| {
                        s.add(format!("x{k}"), mat(&mut rng, dims[r], dims[c])).unwrap()
                    })
                    .collect();
                let res = check(
                    name,
                    &mut s,
                    |t, p| {
                        let vars: Vec<Var> = ids.iter().map(|&id| p.bind(t, id)).collect();
                        let out = op(t, &vars)?;
                        probe(t, out, &mut rng_for(seed, "probe", 0))
                    },
                    &cfg(),
                )
                .unwrap();
                prop_assert!(res.passed(1e-3) || res.coords == 0 && res.skipped_kinks > 0, "{name}: {res:?}");
            }
        }

        #[test]
        fn bilinear_matches_finite_differences(n in 1usize..4, m in 1usize..4, k in 1usize..4, r in 1usize..3, l in 1usize..4, seed in 0u64..1000) {
            let mut rng = rng_for(seed, "bilinear", 0);
            let mut s = ParamStore::new();
            let a = s.add("left", mat(&mut rng, n, k)).unwrap();
            let w = s.add("w", random_tensor(&mut rng, &[k, r, l], 0.0, 1.0)).unwrap();
            let b = s.add("right", mat(&mut rng, m, l)).unwrap();
            let res = check(
                "bilinear",
                &mut s,
                |t, p| {
                    let (a, w, b) = (p.bind(t, a), p.bind(t, w), p.bind(t, b));
                    let out = t.bilinear(a, w, b)?;
                    probe(t, out, &mut rng_for(seed, "probe", 0))
                },
                &cfg(),
            )
            .unwrap();
            prop_assert!(res.passed(1e-3), "{res:?}");
        }

        #[test]
        fn embed_bag_matches_finite_differences(bags in proptest::collection::vec(proptest::collection::vec(0usize..6, 1..4), 1..4), seed in 0u64..1000) {
            let mut rng = rng_for(seed, "embed", 0);
            let mut s = ParamStore::new();
            let id = s.add("table", mat(&mut rng, 6, 3)).unwrap();
            let res = check(
                "embed_bag",
                &mut s,
                |t, p| {
                    let out = t.embed_bag(id, p.get(id), bags.clone())?;
                    probe(t, out, &mut rng_for(seed, "probe", 0))
                },
                &cfg(),
            )
            .unwrap();
            prop_assert!(res.passed(1e-3), "{res:?}");
        }
    }
}
