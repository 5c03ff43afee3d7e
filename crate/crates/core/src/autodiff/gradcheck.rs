//! Central finite-difference checks against [`Tape::backward`].
//!
//! The numerical side only ever evaluates forward values, so it shares no
//! code path with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormMode, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares backward gradients of the scalar `f(inputs)` with central
/// differences using step `h = 1e-4 * (1 + |x|)`.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            let h = 1e-4 * (1.0 + x.abs());
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[i].data()[j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

type ApplyFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// One registered operator with a random-input generator.
pub struct OperatorCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub apply: ApplyFn,
}

impl OperatorCase {
    /// Runs the check with inputs drawn from `seed`. The operator output is
    /// reduced with fixed random weights so every output element matters.
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (self.make)(&mut rng);
        let apply = self.apply;
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = apply(&tape, &vars)?;
            out.shape()
        };
        let weights = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));
        check(&inputs, move |tape, vars| {
            let out = apply(tape, vars)?;
            let w = tape.constant(weights.clone());
            Ok(tape.sum(tape.mul(out, w)?))
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.05, 2]`, clear of the ReLU and clamp kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dims2(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.gen_range(1..5), rng.gen_range(1..5)]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = dims2(rng);
    vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)]
}

fn single(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn conv_inputs(rng: &mut ChaCha8Rng, transpose: bool) -> Vec<Tensor<f64>> {
    let batch = rng.gen_range(1..3);
    let c_in = rng.gen_range(1..4);
    let c_out = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let h = rng.gen_range(3..7);
    let w = rng.gen_range(3..7);
    let x = uniform(rng, &[batch, c_in, h, w], -1.0, 1.0);
    let weight = if transpose {
        uniform(rng, &[c_in, c_out, k, k], -1.0, 1.0)
    } else {
        uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0)
    };
    let bias = uniform(rng, &[c_out], -1.0, 1.0);
    vec![x, weight, bias]
}

/// Stride and padding are derived from the kernel size so that every
/// generated geometry is valid.
fn conv_stride_pad(kernel: usize) -> (usize, usize) {
    match kernel {
        1 => (1, 0),
        2 => (2, 0),
        _ => (2, 1),
    }
}

fn bn_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [rng.gen_range(2..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
    let c = shape[1];
    vec![
        uniform(rng, &shape, -2.0, 2.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ]
}

/// Every differentiable operator on the tape.
pub fn operator_cases() -> Vec<OperatorCase> {
    vec![
        OperatorCase {
            name: "add",
            make: pair,
            apply: |t, v| t.add(v[0], v[1]),
        },
        OperatorCase {
            name: "sub",
            make: pair,
            apply: |t, v| t.sub(v[0], v[1]),
        },
        OperatorCase {
            name: "mul",
            make: pair,
            apply: |t, v| t.mul(v[0], v[1]),
        },
        OperatorCase {
            name: "add_scalar",
            make: single,
            apply: |t, v| Ok(t.add_scalar(v[0], 0.75)),
        },
        OperatorCase {
            name: "mul_scalar",
            make: single,
            apply: |t, v| Ok(t.mul_scalar(v[0], -1.5)),
        },
        OperatorCase {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
                vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)]
            },
            apply: |t, v| t.matmul(v[0], v[1]),
        },
        OperatorCase {
            name: "linear",
            make: |rng| {
                let (n, i, o) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
                vec![
                    uniform(rng, &[n, i], -1.0, 1.0),
                    uniform(rng, &[o, i], -1.0, 1.0),
                    uniform(rng, &[o], -1.0, 1.0),
                ]
            },
            apply: |t, v| t.linear(v[0], v[1], Some(v[2])),
        },
        OperatorCase {
            name: "conv2d",
            make: |rng| conv_inputs(rng, false),
            apply: |t, v| {
                let (s, p) = conv_stride_pad(v[1].shape()[2]);
                t.conv2d(v[0], v[1], Some(v[2]), s, p)
            },
        },
        OperatorCase {
            name: "conv2d_transpose",
            make: |rng| conv_inputs(rng, true),
            apply: |t, v| {
                let (s, p) = conv_stride_pad(v[1].shape()[2]);
                t.conv2d_transpose(v[0], v[1], Some(v[2]), s, p)
            },
        },
        OperatorCase {
            name: "relu",
            make: |rng| {
                let s = dims2(rng);
                vec![away_from_zero(rng, &s)]
            },
            apply: |t, v| Ok(t.relu(v[0])),
        },
        OperatorCase {
            name: "batch_norm_train",
            make: bn_inputs,
            apply: |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?.0),
        },
        OperatorCase {
            name: "batch_norm_eval",
            make: bn_inputs,
            apply: |t, v| {
                let c = v[1].shape()[0];
                let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64 - 0.05).collect();
                let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
                let mode = BatchNormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                };
                Ok(t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.0)
            },
        },
        OperatorCase {
            name: "reshape",
            make: |rng| {
                let s = dims2(rng);
                vec![uniform(rng, &s, -1.0, 1.0)]
            },
            apply: |t, v| {
                let n = v[0].value().len();
                t.reshape(v[0], &[n])
            },
        },
        OperatorCase {
            name: "mean",
            make: single,
            apply: |t, v| Ok(t.mean(v[0])),
        },
        OperatorCase {
            name: "sum",
            make: single,
            apply: |t, v| Ok(t.sum(v[0])),
        },
        OperatorCase {
            name: "exp",
            make: single,
            apply: |t, v| Ok(t.exp(v[0])),
        },
        OperatorCase {
            name: "log",
            make: |rng| {
                let s = dims2(rng);
                vec![uniform(rng, &s, 0.5, 3.0)]
            },
            apply: |t, v| Ok(t.log(v[0])),
        },
        OperatorCase {
            name: "sigmoid",
            make: single,
            apply: |t, v| Ok(t.sigmoid(v[0])),
        },
        OperatorCase {
            name: "clamp",
            make: |rng| {
                let s = dims2(rng);
                let x = Tensor::from_fn(&s, |_| {
                    let m = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.9) } else { rng.gen_range(1.1..2.0) };
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                vec![x]
            },
            apply: |t, v| Ok(t.clamp(v[0], -1.0, 1.0)),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes_one_seed() {
        for case in operator_cases() {
            let r = case.run(1).unwrap();
            assert!(r.max_rel_err < 1e-5, "{}: {:?}", case.name, r);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert!(rel_err(1.0, 1.1) > 0.05);
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn flags_a_mismatched_gradient() {
        // The x^2 term enters as a constant, so only the numerical side sees
        // its slope 2x: the two agree at x = 0 and disagree at x = 1.
        for (at, expect_ok) in [(0.0, true), (1.0, false)] {
            let x = Tensor::new(&[1], vec![at]).unwrap();
            let r = check(&[x], |t, v| {
                let sq = v[0].value().data()[0].powi(2);
                let bump = t.constant(Tensor::new(&[1], vec![sq]).unwrap());
                let y = t.exp(v[0]);
                Ok(t.sum(t.add(y, bump)?))
            })
            .unwrap();
            assert_eq!(r.max_rel_err < 1e-5, expect_ok, "{r:?}");
        }
    }
}
