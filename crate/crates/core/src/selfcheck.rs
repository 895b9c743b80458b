//! Self-verification suites: finite-difference gradient checks in f64,
//! mutual-information identities, EM monotonicity and cluster recovery, and
//! metric oracles written independently of [`crate::metrics`].
//!
//! A gradient bug can be injected into one named check to confirm that the
//! harness reports it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::localizer::{e_step, gmm_em_fit_traced, EmConfig, Features};
use crate::metrics::{self, ConfusionCounts, Metric};
use crate::mi::{self, HistogramSpec};
use crate::network::{build_graph, rf_penalty, total_loss, LossConfig, ModelParams, RfMode};
use crate::tensor::{ops, BatchStats, Mode, Padding, Tape, Tensor, Var};

/// Relative tolerance for primitives and the filter penalty.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Relative tolerance for the soft MI regulariser and the full loss.
pub const MI_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Sizes of each suite.
#[derive(Clone, Copy, Debug)]
pub struct SuiteSizes {
    pub gradient_instances: usize,
    pub network_instances: usize,
    pub mi_trials: usize,
    pub em_datasets: usize,
    pub em_restarts: usize,
    pub auc_trials: usize,
    pub threshold_trials: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            gradient_instances: 20,
            network_instances: 2,
            mi_trials: 1000,
            em_datasets: 50,
            em_restarts: 100,
            auc_trials: 1000,
            threshold_trials: 100,
        }
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Primitive checks in the order they run; these are the valid names for
/// bug injection.
pub const GRADIENT_CHECKS: &[&str] = &[
    "conv2d_valid",
    "conv2d_same",
    "batch_norm_train",
    "batch_norm_infer",
    "relu",
    "add",
    "mul",
    "dropout",
    "dense",
    "reshape_sum",
    "softmax_cross_entropy",
    "combine",
    "rf_penalty",
    "rf_penalty_per_channel",
    "mi_regularizer",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, scale).expect("valid");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("sized")
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Evaluates `sum(w * op(inputs))` (or the op itself when scalar).
fn scalar_loss(tape: &mut Tape<f64>, out: Var, weights: &Option<Tensor<f64>>) -> Result<Var> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let wv = tape.constant(w.clone());
            let p = tape.mul(out, wv)?;
            Ok(tape.sum(p))
        }
    }
}

fn output_weights(
    inputs: &[Tensor<f64>],
    build: &Build,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars)?;
    let v = tape.value(out);
    Ok(if v.is_scalar() {
        None
    } else {
        Some(randn(rng, v.shape(), 1.0))
    })
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build, w: &Option<Tensor<f64>>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, w)?;
    Ok(tape.value(loss).item())
}

/// Relative gradient error `max|num - ana| / max(max|num|, max|ana|)` over
/// every coordinate (or a random subset of `coords` per input).
#[allow(clippy::too_many_arguments)]
fn gradient_error(
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    build: &Build,
    h: f64,
    coords: Option<usize>,
    corrupt: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let w = output_weights(inputs, build, rng)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, &w)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vars
        .iter()
        .zip(differentiable)
        .map(|(v, &d)| d.then(|| grads.get(*v).cloned()).flatten())
        .collect();
    if corrupt {
        if let Some(g) = analytic.iter_mut().flatten().next() {
            let scale = g.data().iter().fold(1.0f64, |a, b| a.max(b.abs()));
            g.data_mut()[0] += 0.01 * scale;
        }
    }
    let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
    for (i, input) in inputs.iter().enumerate() {
        let Some(ana) = &analytic[i] else { continue };
        // A subset always contains the first coordinate and the largest
        // analytic entries, which is where min/max paths concentrate.
        let idx: Vec<usize> = match coords {
            Some(k) if k < input.len() => {
                let mut order: Vec<usize> = (0..input.len()).collect();
                order.sort_by(|&a, &b| ana.data()[b].abs().total_cmp(&ana.data()[a].abs()));
                let mut idx = vec![0];
                idx.extend(&order[..k / 10]);
                idx.extend((0..k).map(|_| rng.gen_range(0..input.len())));
                idx
            }
            _ => (0..input.len()).collect(),
        };
        for j in idx {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let num = (evaluate(&plus, build, &w)? - evaluate(&minus, build, &w)?) / (2.0 * h);
            let a = ana.data()[j];
            max_diff = max_diff.max((num - a).abs());
            max_mag = max_mag.max(num.abs()).max(a.abs());
        }
    }
    Ok(if max_mag == 0.0 {
        max_diff
    } else {
        max_diff / max_mag
    })
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    differentiable: Vec<bool>,
    build: Box<Build>,
    h: f64,
    coords: Option<usize>,
    tol: f64,
}

fn case(inputs: Vec<Tensor<f64>>, build: Box<Build>) -> Case {
    let differentiable = vec![true; inputs.len()];
    Case {
        inputs,
        differentiable,
        build,
        h: 1e-6,
        coords: None,
        tol: PRIMITIVE_TOL,
    }
}

fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let m = rng.gen_range(2..4);
    Ok(match name {
        "conv2d_valid" => {
            let (cin, cout, k) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                [1, 3, 5][rng.gen_range(0..3)],
            );
            let hw = k + rng.gen_range(0..4);
            case(
                vec![
                    randn(rng, &[m, hw, hw + 1, cin], 1.0),
                    randn(rng, &[k, k, cin, cout], 0.5),
                    randn(rng, &[cout], 0.5),
                ],
                Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Valid)),
            )
        }
        "conv2d_same" => {
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let hw = rng.gen_range(2..7);
            case(
                vec![
                    randn(rng, &[m, hw + 1, hw, cin], 1.0),
                    randn(rng, &[3, 3, cin, cout], 0.5),
                ],
                Box::new(|t, v| t.conv2d(v[0], v[1], None, Padding::Same)),
            )
        }
        "batch_norm_train" | "batch_norm_infer" => {
            let mode = if name.ends_with("train") {
                Mode::Train
            } else {
                Mode::Infer
            };
            let c = rng.gen_range(1..5);
            let running = BatchStats {
                mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
            };
            case(
                vec![
                    randn(rng, &[m, 3, 2, c], 1.5),
                    randn(rng, &[c], 1.0),
                    randn(rng, &[c], 1.0),
                ],
                Box::new(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], mode, &running)?.0)),
            )
        }
        "relu" => case(
            vec![away_from_zero(rng, &[m, 4, 3])],
            Box::new(|t, v| Ok(t.relu(v[0]))),
        ),
        "add" => case(
            vec![randn(rng, &[m, 5], 1.0), randn(rng, &[m, 5], 1.0)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "mul" => case(
            vec![randn(rng, &[m, 5], 1.0), randn(rng, &[m, 5], 1.0)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        "dropout" => {
            let seed: u64 = rng.gen();
            case(
                vec![randn(rng, &[m, 10], 1.0)],
                Box::new(move |t, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    t.dropout(v[0], 0.8, Mode::Train, &mut r)
                }),
            )
        }
        "dense" => {
            let (d, n) = (rng.gen_range(1..8), rng.gen_range(1..6));
            case(
                vec![
                    randn(rng, &[m, d], 1.0),
                    randn(rng, &[d, n], 0.5),
                    randn(rng, &[n], 0.5),
                ],
                Box::new(|t, v| t.dense(v[0], v[1], v[2])),
            )
        }
        "reshape_sum" => case(
            vec![randn(rng, &[m, 3, 4], 1.0)],
            Box::new(move |t, v| {
                let r = t.reshape(v[0], &[m, 12])?;
                let sq = t.mul(r, r)?;
                Ok(t.sum(sq))
            }),
        ),
        "softmax_cross_entropy" => {
            let c = rng.gen_range(2..6);
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
            let onehot = ops::one_hot::<f64>(&labels, c)?;
            case(
                vec![randn(rng, &[m, c], 2.0)],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &onehot)),
            )
        }
        "combine" => {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            case(
                vec![randn(rng, &[4], 1.0), randn(rng, &[3], 1.0)],
                Box::new(move |t, v| {
                    let p = t.mul(v[0], v[0])?;
                    let s1 = t.sum(p);
                    let s2 = t.sum(v[1]);
                    t.combine(&[(s1, a), (s2, b)])
                }),
            )
        }
        "rf_penalty" | "rf_penalty_per_channel" => {
            let mode = if name.ends_with("per_channel") {
                RfMode::PerChannel
            } else {
                RfMode::ChannelSummed
            };
            let filters = rng.gen_range(1..9);
            case(
                vec![randn(rng, &[5, 5, 3, filters], 0.2)],
                Box::new(move |t, v| {
                    let (val, g) = rf_penalty(t.value(v[0]), mode)?;
                    t.scalar_fn(&[v[0]], val, vec![g])
                }),
            )
        }
        "mi_regularizer" => {
            let patches: Vec<f64> = (0..m * 72 * 72 * 3).map(|_| rng.gen()).collect();
            let patches = Tensor::new(vec![m, 72, 72, 3], patches)?;
            let pre = randn(rng, &[m, 56, 56], 1.0);
            Case {
                inputs: vec![patches, pre],
                differentiable: vec![false, true],
                build: Box::new(|t, v| {
                    let (val, g) =
                        mi::mi_regularizer(t.value(v[0]), t.value(v[1]), HistogramSpec::soft())?;
                    t.scalar_fn(&[v[1]], val, vec![g.expect("soft gradient")])
                }),
                h: 1e-7,
                coords: Some(300),
                tol: MI_TOL,
            }
        }
        _ => return Err(Error::Parameter(format!("unknown gradient check '{name}'"))),
    })
}

fn check_inject(inject: Option<&str>) -> Result<()> {
    match inject {
        Some(n) if !GRADIENT_CHECKS.contains(&n) && n != "network" => {
            Err(Error::Parameter(format!(
                "unknown primitive '{n}'; expected one of {}, network",
                GRADIENT_CHECKS.join(", ")
            )))
        }
        _ => Ok(()),
    }
}

/// Finite-difference checks of every primitive and both regularisers on
/// `instances` random cases each, plus directional checks of the full
/// training loss on `network_instances` small batches.
pub fn gradient_suite(
    instances: usize,
    network_instances: usize,
    inject: Option<&str>,
) -> Result<Vec<CheckOutcome>> {
    check_inject(inject)?;
    let mut out = Vec::new();
    for (k, &name) in GRADIENT_CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + k as u64);
        let mut worst = 0.0f64;
        let mut tol = PRIMITIVE_TOL;
        for _ in 0..instances {
            let c = make_case(name, &mut rng)?;
            tol = c.tol;
            let e = gradient_error(
                &c.inputs,
                &c.differentiable,
                &c.build,
                c.h,
                c.coords,
                inject == Some(name),
                &mut rng,
            )?;
            worst = worst.max(e);
        }
        out.push(CheckOutcome {
            suite: "gradient",
            name: name.to_string(),
            passed: worst < tol,
            detail: format!(
                "max relative error {worst:.3e} over {instances} instances (tol {tol:.0e})"
            ),
        });
    }
    if network_instances > 0 {
        out.push(network_check(network_instances, inject == Some("network"))?);
    }
    Ok(out)
}

const NETWORK_DIRECTIONS: usize = 3;
const NETWORK_ATTEMPTS: usize = 12;
const NETWORK_TAPS: usize = 8;

/// Directional derivative of the total training loss (batch statistics,
/// fixed dropout mask) against central differences along random directions.
fn network_check(instances: usize, corrupt: bool) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e7);
    let (mut worst, mut skipped) = (0.0f64, 0usize);
    let config = LossConfig::default();
    for inst in 0..instances {
        let params: ModelParams<f64> = ModelParams::<f32>::build(3, inst as u64)?.cast();
        let patches = Tensor::new(
            vec![2, 72, 72, 3],
            (0..2 * 72 * 72 * 3).map(|_| rng.gen()).collect(),
        )?;
        let labels = ops::one_hot::<f64>(&[0, 2], 3)?;
        let dropout_seed: u64 = rng.gen();
        let loss_at =
            |p: &ModelParams<f64>, grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
                let mut tape = Tape::new();
                let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
                let g = build_graph(&mut tape, p, patches.clone(), Mode::Train, grads, &mut r)?;
                let terms = total_loss(&mut tape, &g, p, &labels, &config)?;
                let value = tape.value(terms.total).item();
                if !grads {
                    return Ok((value, Vec::new()));
                }
                let gr = tape.backward(terms.total)?;
                Ok((
                    value,
                    g.param_vars
                        .iter()
                        .map(|v| v.and_then(|v| gr.get(v).cloned()))
                        .collect(),
                ))
            };
        let (_, grads) = loss_at(&params, true)?;
        let mut accepted = 0;
        for _ in 0..NETWORK_ATTEMPTS {
            if accepted == NETWORK_DIRECTIONS {
                break;
            }
            // Sparse directions keep the number of ReLU and bin boundaries
            // the stencil can straddle small.
            let dirs: Vec<Option<Tensor<f64>>> = params
                .params()
                .iter()
                .zip(&grads)
                .map(|(p, g)| {
                    g.as_ref().map(|_| {
                        let mut d = Tensor::zeros(p.tensor.shape().to_vec());
                        let n = d.len();
                        for _ in 0..NETWORK_TAPS.min(n) {
                            d.data_mut()[rng.gen_range(0..n)] =
                                rng.sample::<f64, _>(rand_distr::StandardNormal);
                        }
                        d
                    })
                })
                .collect();
            let mut ana: f64 = grads
                .iter()
                .zip(&dirs)
                .filter_map(|(g, d)| Some((g.as_ref()?, d.as_ref()?)))
                .map(|(g, d)| {
                    g.data()
                        .iter()
                        .zip(d.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum();
            if corrupt {
                ana *= 1.01;
            }
            let h = 1e-9;
            let shifted = |sign: f64| -> Result<f64> {
                let mut p = params.clone();
                for (i, d) in dirs.iter().enumerate() {
                    if let Some(d) = d {
                        for (x, dx) in p.tensor_mut(i).data_mut().iter_mut().zip(d.data()) {
                            *x += sign * h * dx;
                        }
                    }
                }
                Ok(loss_at(&p, false)?.0)
            };
            // A central difference that changes between h and 2h means a
            // non-smooth point lies inside the stencil.
            let num = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
            let wide = (shifted(2.0)? - shifted(-2.0)?) / (4.0 * h);
            if (num - wide).abs() > 1e-5 * num.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-12));
            accepted += 1;
        }
        if accepted < NETWORK_DIRECTIONS {
            return Ok(CheckOutcome {
                suite: "gradient",
                name: "network".into(),
                passed: false,
                detail: format!(
                    "only {accepted} of {NETWORK_ATTEMPTS} directions avoided non-smooth points"
                ),
            });
        }
    }
    Ok(CheckOutcome {
        suite: "gradient",
        name: "network".into(),
        passed: worst < MI_TOL,
        detail: format!(
            "max relative directional error {worst:.3e} over {instances} batches, {skipped} non-smooth directions redrawn (tol {MI_TOL:.0e})"
        ),
    })
}

/// Entropy of the hard-binned, min-max normalised sample, in nats.
fn hard_entropy(x: &[f64], bins: usize) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi <= lo {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &v in x {
        let u = (v - lo) / (hi - lo);
        counts[((u * bins as f64).floor() as usize).min(bins - 1)] += 1;
    }
    let n = x.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `MI(X, X) = H(X)`, exact independence and non-negativity of the hard
/// estimator over `trials` random cases each.
pub fn mi_suite(trials: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f0);
    let spec = HistogramSpec::hard();
    let (mut self_err, mut indep_err, mut min_mi) = (0.0f64, 0.0f64, f64::INFINITY);
    for t in 0..trials {
        let n = rng.gen_range(4..400);
        let x: Vec<f64> = if t % 3 == 0 {
            (0..n).map(|_| rng.gen_range(0..7) as f64).collect()
        } else {
            (0..n).map(|_| rng.gen::<f64>().powi(3)).collect()
        };
        let mi_xx = mi::mutual_information(&x, &x, spec)?;
        self_err = self_err.max((mi_xx - hard_entropy(&x, spec.bins)).abs());

        // Independent by construction: every pairing of a value of A with a
        // value of B occurs exactly once.
        let (a, b) = (rng.gen_range(2..20), rng.gen_range(2..20));
        let va: Vec<f64> = (0..a).map(|_| rng.gen()).collect();
        let vb: Vec<f64> = (0..b).map(|_| rng.gen()).collect();
        let xs: Vec<f64> = (0..a * b).map(|i| va[i % a]).collect();
        let ys: Vec<f64> = (0..a * b).map(|i| vb[i / a]).collect();
        if xs.len() >= 4 {
            indep_err = indep_err.max(mi::mutual_information(&xs, &ys, spec)?.abs());
        }

        let y: Vec<f64> = (0..n)
            .map(|i| if rng.gen_bool(0.5) { x[i] } else { rng.gen() })
            .collect();
        min_mi = min_mi.min(mi::mutual_information(&x, &y, spec)?);
    }
    Ok(vec![
        CheckOutcome {
            suite: "mi",
            name: "self_information".into(),
            passed: self_err <= 1e-9,
            detail: format!("max |MI(X,X) - H(X)| = {self_err:.3e} over {trials} trials"),
        },
        CheckOutcome {
            suite: "mi",
            name: "independence".into(),
            passed: indep_err <= 1e-9,
            detail: format!("max |MI| of independent pairs = {indep_err:.3e}"),
        },
        CheckOutcome {
            suite: "mi",
            name: "non_negative".into(),
            passed: min_mi >= 0.0,
            detail: format!("min hard MI = {min_mi:.3e}"),
        },
    ])
}

/// Log-likelihood monotonicity over `datasets` random problems with
/// `restarts` restarts each, and two-cluster recovery at ±10 with σ = 0.1.
pub fn em_suite(datasets: usize, restarts: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe3);
    let (mut worst_drop, mut best_ok) = (0.0f64, true);
    for _ in 0..datasets {
        let n = rng.gen_range(8..60);
        let d = rng.gen_range(1..8);
        let shift = rng.gen_range(0.0..4.0);
        let data: Vec<f64> = (0..n * d)
            .map(|i| {
                let c = if (i / d) % 3 == 0 { shift } else { 0.0 };
                c + rng.gen_range(-1.0..1.0)
            })
            .collect();
        let x = Features::new(n, d, data)?;
        let cfg = EmConfig {
            restarts,
            seed: rng.gen(),
            ..EmConfig::default()
        };
        let (best, histories) = gmm_em_fit_traced(&x, &cfg)?;
        for h in &histories {
            for w in h.windows(2) {
                worst_drop = worst_drop.min(w[1] - w[0]);
            }
            best_ok &= best.log_likelihood >= *h.last().expect("non-empty");
        }
    }

    let noise = Normal::new(0.0, 0.1).expect("valid");
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (label, centre) in [(0usize, -10.0), (1, 10.0)] {
        for _ in 0..100 {
            rows.push(vec![
                centre + noise.sample(&mut rng),
                centre + noise.sample(&mut rng),
            ]);
            truth.push(label);
        }
    }
    let x = Features::from_rows(&rows)?;
    let cfg = EmConfig {
        restarts,
        seed: 7,
        ..EmConfig::default()
    };
    let (model, _) = gmm_em_fit_traced(&x, &cfg)?;
    let (resp, _) = e_step(&model, &x);
    let hi = usize::from(model.means[1][0] > model.means[0][0]);
    let correct = resp
        .iter()
        .zip(&truth)
        .filter(|(r, &t)| usize::from(r[hi] > 0.5) == t)
        .count();
    let acc = correct as f64 / truth.len() as f64;
    Ok(vec![
        CheckOutcome {
            suite: "em",
            name: "monotone_log_likelihood".into(),
            passed: worst_drop >= -1e-9,
            detail: format!("smallest per-iteration change {worst_drop:.3e} over {datasets} datasets x {restarts} restarts"),
        },
        CheckOutcome {
            suite: "em",
            name: "best_restart".into(),
            passed: best_ok,
            detail: "returned log-likelihood dominates every restart".into(),
        },
        CheckOutcome {
            suite: "em",
            name: "cluster_recovery".into(),
            passed: acc >= 0.99,
            detail: format!("assignment accuracy {acc:.4}"),
        },
    ])
}

fn enumerate_counts(pred: &[bool], gt: &[bool]) -> (f64, f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, false) => c.2 += 1.0,
            (false, true) => c.3 += 1.0,
        }
    }
    c
}

fn oracle_f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    if tp + tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn oracle_mcc(tp: f64, fp: f64, tn: f64, fn_: f64) -> f64 {
    let d = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if d == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / d.sqrt()
    }
}

fn oracle_auc(s: &[f64], gt: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in s.iter().enumerate() {
        for (j, &sj) in s.iter().enumerate() {
            if gt[i] && !gt[j] {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn two_class_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    loop {
        let g: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
        if g.iter().any(|&b| b) && g.iter().any(|&b| !b) {
            return g;
        }
    }
}

/// Metric oracles: exhaustive 3x3 masks, pairwise AUC and a 256-point
/// threshold sweep on 8-bit maps.
pub fn metric_suite(auc_trials: usize, threshold_trials: usize) -> Result<Vec<CheckOutcome>> {
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for g in 0u32..512 {
        let gt: Vec<bool> = (0..9).map(|i| g >> i & 1 == 1).collect();
        if g == 0 || g == 511 {
            continue;
        }
        for p in 0u32..512 {
            let pred: Vec<bool> = (0..9).map(|i| p >> i & 1 == 1).collect();
            let (tp, fp, tn, fn_) = enumerate_counts(&pred, &gt);
            let c = ConfusionCounts::from_masks(&pred, &gt)?;
            pairs += 1;
            if c.f1() != oracle_f1(tp, fp, fn_) || c.mcc() != oracle_mcc(tp, fp, tn, fn_) {
                mismatches += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    let mut auc_err = 0.0f64;
    for t in 0..auc_trials {
        let gt = two_class_mask(&mut rng, 64);
        let levels = if t % 2 == 0 { 8 } else { 1 << 24 };
        let s: Vec<f64> = (0..64)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        auc_err = auc_err.max((metrics::roc_auc(&s, &gt)? - oracle_auc(&s, &gt)).abs());
    }

    let mut sweep_err = 0.0f64;
    for _ in 0..threshold_trials {
        let gt = two_class_mask(&mut rng, 8);
        let s: Vec<f64> = (0..8)
            .map(|_| rng.gen_range(0..256) as f64 / 255.0)
            .collect();
        for metric in [Metric::F1, Metric::Mcc] {
            let mut dense = f64::NEG_INFINITY;
            for k in 0..256 {
                let pred: Vec<bool> = s.iter().map(|&v| v >= k as f64 / 255.0).collect();
                let (tp, fp, tn, fn_) = enumerate_counts(&pred, &gt);
                dense = dense.max(match metric {
                    Metric::F1 => oracle_f1(tp, fp, fn_),
                    Metric::Mcc => oracle_mcc(tp, fp, tn, fn_),
                });
            }
            let (best, _) = metrics::optimal_threshold_score(&s, &gt, metric)?;
            sweep_err = sweep_err.max((best - dense).abs());
        }
    }
    Ok(vec![
        CheckOutcome {
            suite: "metrics",
            name: "f1_mcc_enumeration".into(),
            passed: mismatches == 0,
            detail: format!("{mismatches} mismatches over {pairs} mask pairs"),
        },
        CheckOutcome {
            suite: "metrics",
            name: "roc_auc_pairwise".into(),
            passed: auc_err <= 1e-12,
            detail: format!("max |AUC - pairwise| = {auc_err:.3e} over {auc_trials} instances"),
        },
        CheckOutcome {
            suite: "metrics",
            name: "optimal_threshold_sweep".into(),
            passed: sweep_err == 0.0,
            detail: format!(
                "max |optimum - dense sweep| = {sweep_err:.3e} over {threshold_trials} instances"
            ),
        },
    ])
}

/// Every suite at full size.
pub fn run_all(inject: Option<&str>) -> Result<Vec<CheckOutcome>> {
    run_with(SuiteSizes::default(), inject)
}

pub fn run_with(sizes: SuiteSizes, inject: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_suite(sizes.gradient_instances, sizes.network_instances, inject)?;
    out.extend(mi_suite(sizes.mi_trials)?);
    out.extend(em_suite(sizes.em_datasets, sizes.em_restarts)?);
    out.extend(metric_suite(sizes.auc_trials, sizes.threshold_trials)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injected_bug_is_named() {
        let out = gradient_suite(2, 0, Some("dense")).unwrap();
        let failed: Vec<&str> = out
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.name.as_str())
            .collect();
        assert_eq!(failed, ["dense"]);
        assert!(gradient_suite(1, 0, Some("nope")).is_err());
    }
}
