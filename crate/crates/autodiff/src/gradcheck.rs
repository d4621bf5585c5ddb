//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Threshold used by the suite and the command-line check.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Elements whose one-sided slopes disagree in sign; excluded from the maximum.
    pub kinks: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.kinks.extend(other.kinks);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central differences.
///
/// `f` receives the inputs bound as trainable leaves, in order.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidStep(eps));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::checked();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item();
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.tensor(var);
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let fp = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let fm = eval(&probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            let right = (fp - f0) / eps;
            let left = (f0 - fm) / eps;
            if err > DEFAULT_TOLERANCE && right * left < 0.0 {
                report.kinks.push((i, e));
                continue;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

/// Result of checking one op over several random shapes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes_tried: usize,
    pub report: GradCheckReport,
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so piecewise-linear ops are differentiable
/// within one finite-difference step.
fn rand_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Reduces an op output to a scalar with fixed random weights so the check
/// covers the whole Jacobian rather than just its column sums.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn case_for(op: &'static str, rng: &mut ChaCha8Rng) -> Case {
    let w = rng.random::<u64>();
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            (
                vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    probe(g, y, w)
                }),
            )
        }
        "matmul_bt" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            (
                vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[n, k])],
                Box::new(move |g, v| {
                    let y = g.matmul_bt(v[0], v[1])?;
                    probe(g, y, w)
                }),
            )
        }
        "add" | "mul" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let is_add = op == "add";
            (
                vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)],
                Box::new(move |g, v| {
                    let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                    probe(g, y, w)
                }),
            )
        }
        "add_bias" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
            (
                vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
                Box::new(move |g, v| {
                    let y = g.add_bias(v[0], v[1])?;
                    probe(g, y, w)
                }),
            )
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
            (
                vec![rand_tensor(rng, &shape)],
                Box::new(move |g, v| {
                    let y = g.scale(v[0], s)?;
                    probe(g, y, w)
                }),
            )
        }
        "relu" | "gelu" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 6)];
            let is_relu = op == "relu";
            let x = if is_relu {
                rand_nonzero(rng, &shape)
            } else {
                rand_tensor(rng, &shape).map(|v| 3.0 * v)
            };
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = if is_relu { g.relu(v[0])? } else { g.gelu(v[0])? };
                    probe(g, y, w)
                }),
            )
        }
        "layernorm" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 6));
            (
                vec![
                    rand_tensor(rng, &[m, n]),
                    rand_tensor(rng, &[n]).map(|v| 1.0 + 0.5 * v),
                    rand_tensor(rng, &[n]),
                ],
                Box::new(move |g, v| {
                    let y = g.layernorm(v[0], v[1], v[2])?;
                    probe(g, y, w)
                }),
            )
        }
        "softmax" => {
            let rank = dim(rng, 1, 3);
            let shape: Vec<usize> = (0..rank).map(|_| dim(rng, 1, 4)).collect();
            let axis = rng.random_range(0..rank);
            (
                vec![rand_tensor(rng, &shape).map(|v| 2.0 * v)],
                Box::new(move |g, v| {
                    let y = g.softmax(v[0], axis)?;
                    probe(g, y, w)
                }),
            )
        }
        "embedding" | "gather_rows" => {
            let (rows, cols) = (dim(rng, 1, 5), dim(rng, 1, 4));
            let picks = dim(rng, 1, 7);
            let ids: Vec<usize> = (0..picks).map(|_| rng.random_range(0..rows)).collect();
            let is_emb = op == "embedding";
            (
                vec![rand_tensor(rng, &[rows, cols])],
                Box::new(move |g, v| {
                    let y = if is_emb {
                        g.embedding(v[0], &ids)?
                    } else {
                        g.gather_rows(v[0], &ids)?
                    };
                    probe(g, y, w)
                }),
            )
        }
        "concat_rows" => {
            let cols = dim(rng, 1, 4);
            let parts = dim(rng, 1, 3);
            let inputs = (0..parts)
                .map(|_| {
                    let r = dim(rng, 1, 3);
                    rand_tensor(rng, &[r, cols])
                })
                .collect();
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.concat_rows(v)?;
                    probe(g, y, w)
                }),
            )
        }
        "reshape" | "transpose" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let is_reshape = op == "reshape";
            (
                vec![rand_tensor(rng, &[m, n])],
                Box::new(move |g, v| {
                    let y = if is_reshape {
                        g.reshape(v[0], &[n, m])?
                    } else {
                        g.transpose(v[0])?
                    };
                    // a non-linear consumer makes element placement matter
                    let y = g.mul(y, y)?;
                    probe(g, y, w)
                }),
            )
        }
        "sum" | "mean" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let is_sum = op == "sum";
            (
                vec![rand_tensor(rng, &shape)],
                Box::new(move |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    if is_sum {
                        g.sum(sq)
                    } else {
                        g.mean(sq)
                    }
                }),
            )
        }
        "attention" | "causal_attention" => {
            let heads = dim(rng, 1, 2);
            let dh = dim(rng, 1, 3);
            let segs: Vec<usize> = (0..dim(rng, 1, 3)).map(|_| dim(rng, 1, 4)).collect();
            let rows: usize = segs.iter().sum();
            let causal = op == "causal_attention";
            (
                vec![rand_tensor(rng, &[rows, 3 * heads * dh]).map(|v| 1.5 * v)],
                Box::new(move |g, v| {
                    let y = g.attention(v[0], heads, &segs, causal)?;
                    probe(g, y, w)
                }),
            )
        }
        "cross_entropy" => {
            let (rows, vocab) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let mut targets: Vec<Option<usize>> = (0..rows)
                .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..vocab)))
                .collect();
            if targets.iter().all(|t| t.is_none()) {
                targets[0] = Some(0);
            }
            (
                vec![rand_tensor(rng, &[rows, vocab]).map(|v| 2.0 * v)],
                Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
            )
        }
        "softmax_cross_entropy" => {
            // scores -> softmax over keys -> mixing -> vocabulary logits -> loss
            let (rows, hidden, vocab) = (dim(rng, 1, 4), dim(rng, 2, 4), dim(rng, 2, 5));
            let targets: Vec<Option<usize>> =
                (0..rows).map(|_| Some(rng.random_range(0..vocab))).collect();
            (
                vec![
                    rand_tensor(rng, &[rows, rows]),
                    rand_tensor(rng, &[rows, hidden]),
                    rand_tensor(rng, &[hidden, vocab]),
                ],
                Box::new(move |g, v| {
                    let p = g.softmax(v[0], 1)?;
                    let h = g.matmul(p, v[1])?;
                    let logits = g.matmul(h, v[2])?;
                    g.cross_entropy(logits, &targets)
                }),
            )
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Every differentiable op on the tape.
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "matmul_bt",
    "add",
    "add_bias",
    "mul",
    "scale",
    "relu",
    "gelu",
    "layernorm",
    "softmax",
    "embedding",
    "gather_rows",
    "concat_rows",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "attention",
    "causal_attention",
    "cross_entropy",
    "softmax_cross_entropy",
];

/// Checks every op in [`SUITE_OPS`] on `shapes` random shapes each.
pub fn run_suite(seed: u64, shapes: usize, eps: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut report = GradCheckReport::default();
            for _ in 0..shapes {
                let (inputs, f) = case_for(op, &mut rng);
                report.merge(grad_check(f, &inputs, eps)?);
            }
            Ok(OpCheck {
                op,
                shapes_tried: shapes,
                report,
            })
        })
        .collect()
}
