//! Finite-difference checks of every differentiable op and of the full
//! network, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelConfig, ModelError, ParamVars};
use crate::tensor::{grad_check, BatchNormStats, GradCheckOptions, GradCheckReport, Graph, Mode, Tensor, TensorError, Var};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Spatial size of the full-network input.
    pub size: usize,
    pub seed: u64,
    /// Coordinates sampled per network tensor; every coordinate of the
    /// primitive inputs is checked.
    pub network_coords: usize,
    /// Adds a case whose backward pass is deliberately wrong.
    pub include_broken: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            size: 16,
            seed: 0,
            network_coords: 6,
            include_broken: false,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks are rarely hit.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(y ⊙ r)` for a fixed random `r`, giving every output a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var, TensorError> {
    let r = g.constant(r.clone());
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect()
}

type Closure = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Name, function, inputs and optional coordinate sample size.
type Case = (&'static str, Closure, Vec<Tensor<f64>>, Option<usize>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();

    let r = random(&[2, 4, 6, 6], rng);
    cases.push((
        "conv2d",
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            project(g, y, &r)
        }),
        vec![random(&[2, 3, 6, 6], rng), random(&[4, 3, 3, 3], rng)],
        None,
    ));

    let r = random(&[1, 2, 4, 4], rng);
    cases.push((
        "conv2d_strided",
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 2)?;
            project(g, y, &r)
        }),
        vec![random(&[1, 3, 7, 7], rng), random(&[2, 3, 5, 5], rng)],
        None,
    ));

    let r = random(&[1, 2, 8, 8], rng);
    cases.push((
        "conv_transpose2d",
        Box::new(move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], 2, 1)?;
            project(g, y, &r)
        }),
        vec![random(&[1, 3, 4, 4], rng), random(&[3, 2, 4, 4], rng)],
        None,
    ));

    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_infer", Mode::Infer)] {
        let r = random(&[2, 2, 3, 3], rng);
        let stats = BatchNormStats {
            mean: vec![0.2, -0.1],
            var: vec![0.7, 1.3],
        };
        cases.push((
            name,
            Box::new(move |g, v| {
                let mut s = stats.clone();
                let y = g.batch_norm(v[0], v[1], v[2], &mut s, mode, 1e-5, 0.1)?;
                project(g, y, &r)
            }),
            vec![random(&[2, 2, 3, 3], rng), random(&[2], rng), random(&[2], rng)],
            None,
        ));
    }

    let r = random(&[2, 3, 4, 4], rng);
    cases.push((
        "relu",
        Box::new(move |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, &r)
        }),
        vec![away_from_zero(&[2, 3, 4, 4], rng)],
        None,
    ));

    let r = random(&[2, 3, 4, 4], rng);
    cases.push((
        "dropout",
        Box::new(move |g, v| {
            // same seed on every evaluation: the mask is frozen
            let y = g.dropout(v[0], 0.4, Mode::Train, 17)?;
            project(g, y, &r)
        }),
        vec![random(&[2, 3, 4, 4], rng)],
        None,
    ));

    let r = random(&[2, 3, 3, 3], rng);
    cases.push((
        "softmax_channels",
        Box::new(move |g, v| {
            let y = g.softmax_channels(v[0])?;
            project(g, y, &r)
        }),
        vec![random(&[2, 3, 3, 3], rng)],
        None,
    ));

    let target = labels(2 * 9, rng);
    let probs = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.random_range(0.05..1.0));
    cases.push((
        "weighted_cross_entropy",
        Box::new(move |g, v| g.weighted_cross_entropy(v[0], &target, &[0.5556, 5.0], None)),
        vec![probs],
        None,
    ));

    let target = labels(2 * 16, rng);
    let mask: Vec<bool> = (0..32).map(|i| i % 5 != 0).collect();
    cases.push((
        "softmax_cross_entropy",
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], &target, &[0.5556, 5.0], Some(&mask))),
        vec![random(&[2, 2, 4, 4], rng)],
        None,
    ));

    let r = random(&[2, 3, 2, 2], rng);
    cases.push((
        "add",
        Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, &r)
        }),
        vec![random(&[2, 3, 2, 2], rng), random(&[2, 3, 2, 2], rng)],
        None,
    ));

    let r = random(&[2, 3, 2, 2], rng);
    cases.push((
        "mul",
        Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, &r)
        }),
        vec![random(&[2, 3, 2, 2], rng), random(&[2, 3, 2, 2], rng)],
        None,
    ));

    let r = random(&[2, 3, 2, 2], rng);
    cases.push((
        "add_channel_bias",
        Box::new(move |g, v| {
            let y = g.add_channel_bias(v[0], v[1])?;
            project(g, y, &r)
        }),
        vec![random(&[2, 3, 2, 2], rng), random(&[3], rng)],
        None,
    ));

    let target = labels(64, rng);
    cases.push((
        "conv_softmax_cross_entropy",
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            let p = g.softmax_channels(y)?;
            g.weighted_cross_entropy(p, &target, &[0.5556, 5.0], None)
        }),
        vec![random(&[1, 3, 8, 8], rng), random(&[2, 3, 3, 3], rng)],
        None,
    ));

    cases
}

fn network_case(opts: &SuiteOptions, rng: &mut ChaCha8Rng) -> Result<(Closure, Vec<Tensor<f64>>), ModelError> {
    let model = Model::<f64>::build(ModelConfig::default(), opts.seed)?;
    let cfg = model.config().clone();
    let n = opts.size;
    let input = Tensor::uniform(&[1, cfg.in_channels, n, n], 0.0, 1.0, rng);
    model.check_input(input.shape())?;
    let target = labels(n * n, rng);
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut inputs = vec![input];
    inputs.extend(model.params().values().cloned());
    let closure: Closure = Box::new(move |g, v| {
        let mut m = model.clone();
        let vars: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let logits = m
            .forward_logits(g, &vars, v[0], Mode::Train, 23)
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::InvalidGeometry {
                    op: "network",
                    reason: other.to_string(),
                },
            })?;
        g.softmax_cross_entropy(logits, &target, &[0.5556, 5.0], None)
    });
    Ok((closure, inputs))
}

/// Runs every case and returns one result per op, in a fixed order.
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<OpCheck>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = primitive_cases(&mut rng);
    if opts.include_broken {
        let r = random(&[1, 2, 3, 3], &mut rng);
        cases.push((
            "broken_square",
            Box::new(move |g, v| {
                // derivative of v² given as v
                let y = g.map(v[0], |t| t * t, |t| t)?;
                project(g, y, &r)
            }),
            vec![away_from_zero(&[1, 2, 3, 3], &mut rng)],
            None,
        ));
    }
    let (net, net_inputs) = network_case(opts, &mut rng)?;
    cases.push(("network", net, net_inputs, Some(opts.network_coords)));

    let mut out = Vec::with_capacity(cases.len());
    for (name, f, inputs, coords) in cases {
        let check_opts = GradCheckOptions {
            max_coords: coords,
            seed: opts.seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check(f, &inputs, &check_opts)?;
        out.push(OpCheck { name, report });
    }
    Ok(out)
}
