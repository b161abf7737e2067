//! Finite-difference verification of every backward pass.
//!
//! Each check builds a scalar from random 64-bit inputs, runs the tape's
//! backward pass and compares against a five-point central difference.
//! Entries whose perturbation flips a ReLU sign or a max-pool winner are
//! skipped, since the difference quotient straddles a kink there.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::losses::{loss_on_tape, ClassWeights, LossKind, LossSpec, DEFAULT_DICE_SMOOTH};
use crate::models::{Architecture, Model};
use crate::nn::Mode;
use crate::params::{ParamId, ParamKind};
use crate::tensor::Tensor;

pub const PRIMITIVE_STEP: f64 = 1e-3;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const NETWORK_STEP: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Inputs to ReLU/max-pool checks keep at least this distance from kinks.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Name of a check whose analytic gradient is deliberately scaled, to
    /// exercise the failure path.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.skipped
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn five_point(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    ((f(x - 2.0 * h) - f(x + 2.0 * h)) + 8.0 * (f(x + h) - f(x - h))) / (12.0 * h)
}

fn selected(len: usize, max_entries: Option<usize>) -> impl Iterator<Item = usize> {
    let stride = match max_entries {
        Some(m) if m > 0 && len > m => len.div_ceil(m),
        _ => 1,
    };
    (0..len).step_by(stride)
}

struct Accum {
    max: f64,
    checked: usize,
    skipped: usize,
}

impl Accum {
    fn new() -> Self {
        Self { max: 0.0, checked: 0, skipped: 0 }
    }

    fn finish(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            max_rel_err: self.max,
            tolerance,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

/// Evaluate `f` at every perturbation of the stencil, refusing if any
/// evaluation lands in a different smooth piece than the unperturbed one.
fn stencil(h: f64, base_sig: u64, mut eval: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<Option<f64>> {
    let mut vals = [0.0; 4];
    for (slot, k) in vals.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
        let (v, sig) = eval(k * h)?;
        if sig != base_sig {
            return Ok(None);
        }
        *slot = v;
    }
    Ok(Some(((vals[3] - vals[0]) + 8.0 * (vals[1] - vals[2])) / (12.0 * h)))
}

/// Check the gradient of the scalar built by `build` with respect to each
/// of `inputs`.
pub fn check_function<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
    corrupt: bool,
    build: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &leaves)?;
        Ok((tape, leaves, root))
    };
    let (tape, leaves, root) = run(inputs)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(root)?;
    let mut acc = Accum::new();
    let mut work = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let Some(g) = grads.get(*leaf) else { continue };
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            let fd = stencil(h, base_sig, |d| {
                work[k].data_mut()[j] = x0 + d;
                let (t, _, r) = run(&work)?;
                Ok((t.value(r).data()[0], t.branch_signature()))
            })?;
            work[k].data_mut()[j] = x0;
            let Some(fd) = fd else {
                acc.skipped += 1;
                continue;
            };
            let a = if corrupt { g.data()[j] * 1.5 + 1e-3 } else { g.data()[j] };
            acc.max = acc.max.max(relative_error(a, fd));
            acc.checked += 1;
        }
    }
    Ok(acc.finish(name, tolerance))
}

/// Cross-entropy of a model's softmax output against `gt`, checked with
/// respect to the input and a sample of every trainable tensor.
pub fn check_model(
    name: &str,
    model: &Model<f64>,
    input: &Tensor<f64>,
    gt: &Tensor<f64>,
    max_entries: Option<usize>,
    corrupt: bool,
) -> Result<CheckResult> {
    let spec = LossSpec {
        kind: LossKind::Ce,
        gamma: 0.0,
        weights: ClassWeights::uniform(model.out_classes()),
        dice_smooth: DEFAULT_DICE_SMOOTH,
    };
    let run = |m: &Model<f64>, x: &Tensor<f64>| -> Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pred = m.forward(&mut tape, xv, Mode::Train)?;
        let root = loss_on_tape(&mut tape, pred.probs, gt, &spec)?;
        Ok((tape, xv, root))
    };
    let (tape, xv, root) = run(model, input)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(root)?;
    let mut acc = Accum::new();

    let mut x = input.clone();
    if let Some(g) = grads.get(xv) {
        for j in selected(input.len(), max_entries) {
            let x0 = input.data()[j];
            let fd = stencil(NETWORK_STEP, base_sig, |d| {
                x.data_mut()[j] = x0 + d;
                let (t, _, r) = run(model, &x)?;
                Ok((t.value(r).data()[0], t.branch_signature()))
            })?;
            x.data_mut()[j] = x0;
            match fd {
                Some(fd) => {
                    let a = if corrupt { g.data()[j] * 1.5 + 1e-3 } else { g.data()[j] };
                    acc.max = acc.max.max(relative_error(a, fd));
                    acc.checked += 1;
                }
                None => acc.skipped += 1,
            }
        }
    }

    let param_grads: Vec<(ParamId, Tensor<f64>)> = grads.params().map(|(id, g)| (id, g.clone())).collect();
    let mut work = model.clone();
    for (id, g) in param_grads {
        if work.store().param(id).kind != ParamKind::Trainable {
            continue;
        }
        for j in selected(g.len(), max_entries) {
            let p0 = model.store().get(id).data()[j];
            let fd = stencil(NETWORK_STEP, base_sig, |d| {
                work.store_mut().get_mut(id).data_mut()[j] = p0 + d;
                let (t, _, r) = run(&work, input)?;
                Ok((t.value(r).data()[0], t.branch_signature()))
            })?;
            work.store_mut().get_mut(id).data_mut()[j] = p0;
            match fd {
                Some(fd) => {
                    let a = if corrupt { g.data()[j] * 1.5 + 1e-3 } else { g.data()[j] };
                    acc.max = acc.max.max(relative_error(a, fd));
                    acc.checked += 1;
                }
                None => acc.skipped += 1,
            }
        }
    }
    Ok(acc.finish(name, NETWORK_TOLERANCE))
}

fn normal(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Values bounded away from zero by [`KINK_MARGIN`].
fn off_kink(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let mag = rng.random_range(2.0 * KINK_MARGIN..1.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

/// Distinct values on a grid of spacing 0.05 with small jitter, so no
/// max-pool window has a near tie.
fn separated(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(dims, |i| order[i] as f64 * 0.05 - 0.5 * n as f64 * 0.05 + rng.random_range(-0.01..0.01))
}

fn one_hot(rng: &mut ChaCha8Rng, n: usize, m: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[n, m, h, w]);
    for b in 0..n {
        for i in 0..h * w {
            let c = rng.random_range(0..m);
            t.data_mut()[(b * m + c) * h * w + i] = 1.0;
        }
    }
    t
}

/// Sum of the output weighted by fixed random coefficients.
fn project(tape: &mut Tape<f64>, v: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = normal(&mut rng, tape.value(v).dims(), 1.0);
    tape.weighted_sum(v, w)
}

/// Names of every check in [`run_suite`], in order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "conv2d", "conv2d_stride2", "conv2d_1x1", "batchnorm", "relu", "maxpool2", "upsample2",
        "concat_channels", "softmax_channels", "add",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(LossKind::ALL.iter().map(|k| format!("loss_{k}")));
    names.push("mfm_end_to_end".into());
    names
}

/// The full suite: every primitive, every loss through softmax, and the
/// toy MFM end to end.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let corrupt = |name: &str| opts.corrupt.as_deref() == Some(name);
    let (h, tol) = (PRIMITIVE_STEP, PRIMITIVE_TOLERANCE);
    let seed = opts.seed;

    let conv_cases: [(&str, [usize; 4], usize, usize); 3] = [
        ("conv2d", [2, 2, 5, 5], 3, 1),
        ("conv2d_stride2", [1, 2, 6, 6], 3, 2),
        ("conv2d_1x1", [2, 3, 3, 3], 1, 1),
    ];
    for (name, dims, k, stride) in conv_cases {
        let inputs = vec![
            normal(&mut rng, &dims, 1.0),
            normal(&mut rng, &[3, dims[1], k, k], 0.5),
            normal(&mut rng, &[3], 0.5),
        ];
        report.checks.push(check_function(name, &inputs, h, tol, corrupt(name), |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
            project(t, y, seed)
        })?);
    }

    let inputs = vec![
        normal(&mut rng, &[3, 2, 3, 3], 1.0),
        normal(&mut rng, &[2], 1.0),
        normal(&mut rng, &[2], 1.0),
    ];
    report.checks.push(check_function("batchnorm", &inputs, h, tol, corrupt("batchnorm"), |t, v| {
        let (y, _, _) = t.batchnorm(v[0], v[1], v[2], None, 1e-5)?;
        project(t, y, seed)
    })?);

    let inputs = vec![off_kink(&mut rng, &[2, 2, 3, 3])];
    report.checks.push(check_function("relu", &inputs, h, tol, corrupt("relu"), |t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })?);

    let inputs = vec![separated(&mut rng, &[2, 2, 4, 4])];
    report.checks.push(check_function("maxpool2", &inputs, h, tol, corrupt("maxpool2"), |t, v| {
        let y = t.maxpool2(v[0])?;
        project(t, y, seed)
    })?);

    let inputs = vec![normal(&mut rng, &[2, 2, 3, 3], 1.0)];
    report.checks.push(check_function("upsample2", &inputs, h, tol, corrupt("upsample2"), |t, v| {
        let y = t.upsample2(v[0])?;
        project(t, y, seed)
    })?);

    let inputs = vec![normal(&mut rng, &[2, 2, 3, 3], 1.0), normal(&mut rng, &[2, 3, 3, 3], 1.0)];
    report.checks.push(check_function(
        "concat_channels",
        &inputs,
        h,
        tol,
        corrupt("concat_channels"),
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, seed)
        },
    )?);

    let inputs = vec![normal(&mut rng, &[2, 4, 3, 3], 1.5)];
    report.checks.push(check_function(
        "softmax_channels",
        &inputs,
        h,
        tol,
        corrupt("softmax_channels"),
        |t, v| {
            let y = t.softmax_channels(v[0])?;
            project(t, y, seed)
        },
    )?);

    let inputs = vec![normal(&mut rng, &[2, 2, 3, 3], 1.0), normal(&mut rng, &[2, 2, 3, 3], 1.0)];
    report.checks.push(check_function("add", &inputs, h, tol, corrupt("add"), |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })?);

    for kind in LossKind::ALL {
        let name = format!("loss_{kind}");
        let gt = one_hot(&mut rng, 2, 4, 4, 4);
        let spec = LossSpec::new(kind, 4)?;
        let inputs = vec![normal(&mut rng, &[2, 4, 4, 4], 1.5)];
        report.checks.push(check_function(&name, &inputs, h, tol, corrupt(&name), |t, v| {
            let p = t.softmax_channels(v[0])?;
            loss_on_tape(t, p, &gt, &spec)
        })?);
    }

    let model = Model::<f64>::new(&Architecture::toy_mfm(4), opts.seed)?;
    let input = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let gt = one_hot(&mut rng, 1, 4, 16, 16);
    report.checks.push(check_model(
        "mfm_end_to_end",
        &model,
        &input,
        &gt,
        Some(12),
        corrupt("mfm_end_to_end"),
    )?);
    Ok(report)
}
