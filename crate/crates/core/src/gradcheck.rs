//! Central finite-difference checks of the autodiff engine.
//!
//! Every differentiable operation is registered as an [`OpCase`] that draws a
//! random instance and a scalar readout of the op's output. Composite cases
//! (encoder, decoupling head, InfoNCE, the full training loss) are registered
//! alongside so one runner covers the whole stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{OpKind, Real, Result, Tape, Tensor, TensorError, Var};

/// Relative error tolerance for single operations.
pub const OP_TOLERANCE: Real = 1e-4;
/// Relative error tolerance for composite pipelines.
pub const PIPELINE_TOLERANCE: Real = 1e-3;
/// Central-difference step.
pub const FD_STEP: Real = 1e-5;

/// Minimum distance of every relu input from its kink for an instance to be
/// checked; closer instances are redrawn.
pub const KINK_MARGIN: Real = 1e-4;
const MAX_DRAWS: usize = 1000;

/// Outcome for one named input block of a checked function.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub rel_err: Real,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub case: String,
    pub tolerance: Real,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Real {
        self.blocks.iter().map(|b| b.rel_err).fold(0.0, Real::max)
    }

    /// Names of blocks whose analytic gradient disagrees with finite differences.
    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| !(b.rel_err < self.tolerance))
            .map(|b| b.name.as_str())
            .collect()
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, falling back to the absolute error when both
/// gradients vanish.
pub fn relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<Real>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<Real>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<Real>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of the scalar built by `build` with respect to
/// each element of each input.
pub fn numeric_gradients<F>(inputs: &[Tensor], build: &F, step: Real) -> Result<Vec<Vec<Real>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for b in 0..inputs.len() {
        let mut g = vec![0.0; inputs[b].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[b].data()[i];
            work[b].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[b].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[b].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `inputs` are placed on the tape as variables in order. `fault` is forwarded
/// to the analytic tape only.
pub fn check_gradients<F>(
    case: &str,
    inputs: &[(String, Tensor)],
    build: F,
    tolerance: Real,
    fault: Option<OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            t
        })
        .collect();

    let mut tape = Tape::new().with_fault(fault);
    let vars = tensors.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let analytic = tape.backward(out)?;

    let numeric = numeric_gradients(&tensors, &build, FD_STEP)?;
    let blocks = inputs
        .iter()
        .zip(&vars)
        .zip(&numeric)
        .map(|(((name, t), &v), n)| BlockReport {
            name: name.clone(),
            rel_err: relative_error(&analytic.get_or_zeros(v, t.len()), n),
        })
        .collect();
    Ok(GradCheckReport { case: case.to_string(), tolerance, blocks })
}

type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A random problem instance: named inputs plus the scalar function of them.
pub struct Instance {
    pub inputs: Vec<(String, Tensor)>,
    pub build: BuildFn,
}

/// A registered gradient-check case.
pub struct OpCase {
    pub name: &'static str,
    pub tolerance: Real,
    pub sample: fn(&mut ChaCha8Rng) -> Result<Instance>,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: Real, hi: Real) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Values bounded away from zero so relu kinks stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Scalar readout `Σ y ⊙ w` with a fixed random weight `w`.
fn readout(tape: &mut Tape, y: Var, w: &[Real]) -> Result<Var> {
    let wv = tape.constant(tape.shape(y).to_vec(), w.to_vec())?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn unary(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    out_len: usize,
    f: fn(&mut Tape, Var) -> Result<Var>,
) -> Instance {
    let w = weights(rng, out_len);
    Instance {
        inputs: vec![("x".into(), x)],
        build: Box::new(move |tape, v| {
            let y = f(tape, v[0])?;
            readout(tape, y, &w)
        }),
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor,
    b: Tensor,
    out_len: usize,
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Instance {
    let w = weights(rng, out_len);
    Instance {
        inputs: vec![("a".into(), a), ("b".into(), b)],
        build: Box::new(move |tape, v| {
            let y = f(tape, v[0], v[1])?;
            readout(tape, y, &w)
        }),
    }
}

fn op_case_list() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let a = uniform(rng, vec![3, 4], -1.0, 1.0);
                let b = uniform(rng, vec![4, 2], -1.0, 1.0);
                Ok(binary(rng, a, b, 6, |t, a, b| t.matmul(a, b)))
            },
        },
        OpCase {
            name: "add",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let a = uniform(rng, vec![2, 3], -1.0, 1.0);
                let b = uniform(rng, vec![2, 3], -1.0, 1.0);
                Ok(binary(rng, a, b, 6, |t, a, b| t.add(a, b)))
            },
        },
        OpCase {
            name: "sub",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let a = uniform(rng, vec![5], -1.0, 1.0);
                let b = uniform(rng, vec![5], -1.0, 1.0);
                Ok(binary(rng, a, b, 5, |t, a, b| t.sub(a, b)))
            },
        },
        OpCase {
            name: "mul",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let a = uniform(rng, vec![2, 2], -1.0, 1.0);
                let b = uniform(rng, vec![2, 2], -1.0, 1.0);
                Ok(binary(rng, a, b, 4, |t, a, b| t.mul(a, b)))
            },
        },
        OpCase {
            name: "scalar_mul",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![4], -1.0, 1.0);
                Ok(unary(rng, x, 4, |t, x| t.scalar_mul(x, -2.5)))
            },
        },
        OpCase {
            name: "add_scalar",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![4], -1.0, 1.0);
                Ok(unary(rng, x, 4, |t, x| t.add_scalar(x, 0.75)))
            },
        },
        OpCase {
            name: "exp",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![6], -2.0, 2.0);
                Ok(unary(rng, x, 6, |t, x| t.exp(x)))
            },
        },
        OpCase {
            name: "log",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![6], 0.5, 2.0);
                Ok(unary(rng, x, 6, |t, x| t.log(x)))
            },
        },
        OpCase {
            name: "relu",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = away_from_zero(rng, vec![8]);
                Ok(unary(rng, x, 8, |t, x| t.relu(x)))
            },
        },
        OpCase {
            name: "reshape",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![3, 4], -1.0, 1.0);
                Ok(unary(rng, x, 12, |t, x| t.reshape(x, vec![2, 6])))
            },
        },
        OpCase {
            name: "concat_flatten",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let a = uniform(rng, vec![2, 2], -1.0, 1.0);
                let b = uniform(rng, vec![3], -1.0, 1.0);
                Ok(binary(rng, a, b, 11, |t, a, b| t.concat_flatten(&[a, b, a])))
            },
        },
        OpCase {
            name: "mean_over_axes",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![3, 4, 2], -1.0, 1.0);
                Ok(unary(rng, x, 4, |t, x| t.mean_over_axes(x, &[0, 2])))
            },
        },
        OpCase {
            name: "sum",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![2, 3], -1.0, 1.0);
                Ok(Instance { inputs: vec![("x".into(), x)], build: Box::new(|t, v| t.sum(v[0])) })
            },
        },
        OpCase {
            name: "softmax_cross_entropy",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![5], -3.0, 3.0);
                let target = rng.gen_range(0..5);
                Ok(Instance {
                    inputs: vec![("logits".into(), x)],
                    build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], target)),
                })
            },
        },
        OpCase {
            name: "l2_normalize",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![5], -1.0, 1.0);
                Ok(unary(rng, x, 5, |t, x| t.l2_normalize(x)))
            },
        },
        OpCase {
            name: "gather",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![5], -1.0, 1.0);
                Ok(unary(rng, x, 4, |t, x| t.gather(x, &[4, 0, 4, 2])))
            },
        },
        OpCase {
            name: "add_bias",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let a = uniform(rng, vec![3, 2], -1.0, 1.0);
                let b = uniform(rng, vec![2], -1.0, 1.0);
                Ok(binary(rng, a, b, 6, |t, a, b| t.add_bias(a, b)))
            },
        },
        OpCase {
            name: "unfold_time",
            tolerance: OP_TOLERANCE,
            sample: |rng| {
                let x = uniform(rng, vec![2, 5, 2], -1.0, 1.0);
                // J·ceil(5/2) rows × 3·2 columns
                Ok(unary(rng, x, 2 * 3 * 6, |t, x| t.unfold_time(x, 3, 2)))
            },
        },
    ]
}

/// All registered cases: single operations first, then composite pipelines.
pub fn registered_cases() -> Vec<OpCase> {
    let mut cases = op_case_list();
    cases.extend(crate::train::gradcheck_cases());
    cases
}

/// Draw an instance whose relu inputs all sit at least [`KINK_MARGIN`] away
/// from zero, where the function is not differentiable.
fn draw_smooth(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<Instance> {
    for _ in 0..MAX_DRAWS {
        let inst = (case.sample)(rng)?;
        let mut tape = Tape::new();
        let vars = inst.inputs.iter().map(|(_, t)| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        (inst.build)(&mut tape, &vars)?;
        if tape.relu_margin() >= KINK_MARGIN {
            return Ok(inst);
        }
    }
    Err(TensorError::Domain { op: "gradcheck", detail: format!("{}: no instance away from relu kinks", case.name) })
}

/// Run `instances` random instances of every case whose name matches
/// `filter` (all cases when `None`).
pub fn run_cases(
    filter: Option<&str>,
    instances: usize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in registered_cases() {
        if filter.is_some_and(|f| f != case.name) {
            continue;
        }
        for i in 0..instances {
            let inst = draw_smooth(&case, &mut rng)?;
            let name = format!("{}#{}", case.name, i);
            reports.push(check_gradients(&name, &inst.inputs, inst.build, case.tolerance, fault)?);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_handles_zero_gradients() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[1.0, 0.0]) < 1e-15);
        assert!((relative_error(&[1.0], &[-1.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = uniform(&mut rng, vec![3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, vec![4, 2], -1.0, 1.0);
        let inst = binary(&mut rng, a, b, 6, |t, a, b| t.matmul(a, b));
        let r = check_gradients("matmul", &inst.inputs, inst.build, 1e-6, None).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn cross_entropy_gradient_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = uniform(&mut rng, vec![6], -2.0, 2.0);
            let target = rng.gen_range(0..6);
            let r = check_gradients(
                "ce",
                &[("logits".into(), x)],
                move |t, v| t.softmax_cross_entropy(v[0], target),
                1e-6,
                None,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn l2_normalize_gradient_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform(&mut rng, vec![4], -1.0, 1.0);
        let inst = unary(&mut rng, x, 4, |t, x| t.l2_normalize(x));
        let r = check_gradients("l2", &inst.inputs, inst.build, 1e-6, None).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_op_passes_twenty_instances() {
        let names: Vec<&str> = op_case_list().iter().map(|c| c.name).collect();
        for name in names {
            let reports = run_cases(Some(name), 20, 11, None).unwrap();
            assert_eq!(reports.len(), 20);
            for r in &reports {
                assert!(r.passed(), "{} worst {:e}", r.case, r.worst());
            }
        }
    }

    #[test]
    fn every_differentiable_op_is_registered() {
        let names: Vec<&str> = op_case_list().iter().map(|c| c.name).collect();
        for k in OpKind::DIFFERENTIABLE {
            assert!(names.contains(&k.name()), "{} missing", k.name());
        }
    }

    #[test]
    fn injected_sign_flip_is_caught_and_named() {
        let reports = run_cases(Some("matmul"), 1, 1, Some(OpKind::MatMul)).unwrap();
        assert!(!reports[0].passed());
        assert_eq!(reports[0].failing_blocks(), vec!["a", "b"]);
    }
}
