//! Central finite-difference gradient checking in 64-bit.
//!
//! Every check builds its function on a fresh `Graph<f64>`, reduces the output
//! to a scalar through a fixed random projection, and compares the analytic
//! gradient of each input element with the fourth-order central difference
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Elements whose
//! perturbation moves a relu, max-pool, or clamp across a branch boundary are
//! non-differentiable points and are skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{CaConfig, CoordinateAttention, RicaBlock};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::network::{ArchConfig, RicauNet};
use crate::tensor::{Axis, BnState, Graph, Mask, RunningMoments, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Per-operation tolerance on the relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite blocks and the whole network.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error. Gradient entries below this
/// magnitude are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// A differentiable function of some input tensors, evaluated on a fresh graph.
pub trait Probe {
    fn eval(&self, g: &mut Graph<f64>, inputs: &[Var]) -> Result<Var>;
}

impl<F> Probe for F
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn eval(&self, g: &mut Graph<f64>, inputs: &[Var]) -> Result<Var> {
        self(g, inputs)
    }
}

struct Evaluated {
    loss: f64,
    signature: u64,
}

fn scalarize(g: &mut Graph<f64>, out: Var, projection: &Option<Tensor<f64>>) -> Result<Var> {
    match projection {
        None => Ok(out),
        Some(p) => {
            let p = g.constant(p.clone())?;
            let prod = g.mul(out, p)?;
            let n = g.value(prod).len() as f64;
            let m = g.mean_all(prod)?;
            g.affine(m, n, 0.0)
        }
    }
}

fn evaluate(probe: &dyn Probe, inputs: &[Tensor<f64>], projection: &Option<Tensor<f64>>) -> Result<Evaluated> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = probe.eval(&mut g, &vars)?;
    let loss = scalarize(&mut g, out, projection)?;
    Ok(Evaluated {
        loss: g.value(loss).data()[0],
        signature: g.kink_signature(),
    })
}

/// Checks the gradient of `probe` with respect to each tensor in `inputs`.
///
/// `max_elements` bounds how many elements of each input are perturbed; the
/// selection is a seeded random subset when an input is larger.
pub fn check(
    name: &str,
    probe: &dyn Probe,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    max_elements: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = probe.eval(&mut g, &vars)?;
    let projection = if g.value(out).len() == 1 {
        None
    } else {
        let dims = g.dims(out).to_vec();
        Some(Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))?)
    };
    let loss = scalarize(&mut g, out, &projection)?;
    let base_signature = g.kink_signature();
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| t.map(|_| 0.0)))
        .collect();

    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut indices: Vec<usize> = (0..input.len()).collect();
        if indices.len() > max_elements {
            for i in 0..max_elements {
                let j = rng.gen_range(i..indices.len());
                indices.swap(i, j);
            }
            indices.truncate(max_elements);
            indices.sort_unstable();
        }
        for i in indices {
            let orig = input.data()[i];
            let mut at = |offset: f64| {
                work[k].data_mut()[i] = orig + offset;
                evaluate(probe, &work, &projection)
            };
            let samples = [at(2.0 * FD_STEP)?, at(FD_STEP)?, at(-FD_STEP)?, at(-2.0 * FD_STEP)?];
            work[k].data_mut()[i] = orig;
            if samples.iter().any(|e| e.signature != base_signature) {
                report.skipped += 1;
                continue;
            }
            let [p2, p1, m1, m2] = samples.map(|e| e.loss);
            // fourth-order central stencil
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let err = relative_error(analytic[k].data()[i], numeric);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(lo..hi)).expect("valid dims")
}

/// Uniform in `±[margin, 1]`, keeping samples away from a kink at zero.
fn away_from_zero(dims: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid dims")
}

/// Random labels in `0..6` for an `[N, H, W]` grid.
pub fn random_mask(n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Mask {
    Mask::new(vec![n, h, w], (0..n * h * w).map(|_| rng.gen_range(0..6u8)).collect()).expect("valid dims")
}

/// Every primitive operation of the tensor engine.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = OP_TOLERANCE;
    let all = usize::MAX;
    let mut out = Vec::new();

    let x = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let w = uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = uniform(&[4], -0.5, 0.5, &mut rng);
    out.push(check(
        "conv2d",
        &|g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        &[x.clone(), w, b],
        tol,
        all,
        seed,
    )?);
    let w2 = uniform(&[2, 3, 3, 3], -0.5, 0.5, &mut rng);
    out.push(check(
        "conv2d_stride2",
        &|g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], None, 2, 0),
        &[x, w2],
        tol,
        all,
        seed,
    )?);

    let xb = uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
    let gamma = uniform(&[3], 0.5, 1.5, &mut rng);
    let beta = uniform(&[3], -0.5, 0.5, &mut rng);
    out.push(check(
        "batchnorm2d_train",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let mut m = RunningMoments::new(3);
            g.batchnorm2d(v[0], v[1], v[2], BnState::Train(&mut m))
        },
        &[xb.clone(), gamma.clone(), beta.clone()],
        tol,
        all,
        seed,
    )?);
    let moments = RunningMoments {
        mean: uniform(&[3], -0.5, 0.5, &mut rng),
        var: uniform(&[3], 0.5, 2.0, &mut rng),
    };
    out.push(check(
        "batchnorm2d_eval",
        &|g: &mut Graph<f64>, v: &[Var]| g.batchnorm2d(v[0], v[1], v[2], BnState::Eval(&moments)),
        &[xb, gamma, beta],
        tol,
        all,
        seed,
    )?);

    let xa = away_from_zero(&[1, 2, 4, 4], 0.01, &mut rng);
    out.push(check("relu", &|g: &mut Graph<f64>, v: &[Var]| g.relu(v[0]), &[xa.clone()], tol, all, seed)?);
    let xs = uniform(&[1, 2, 4, 4], -4.0, 4.0, &mut rng);
    out.push(check("sigmoid", &|g: &mut Graph<f64>, v: &[Var]| g.sigmoid(v[0]), &[xs.clone()], tol, all, seed)?);
    out.push(check("hardswish", &|g: &mut Graph<f64>, v: &[Var]| g.hardswish(v[0]), &[xs], tol, all, seed)?);
    let logits = uniform(&[2, 6, 3, 3], -3.0, 3.0, &mut rng);
    out.push(check(
        "softmax_channel",
        &|g: &mut Graph<f64>, v: &[Var]| g.softmax_channel(v[0]),
        &[logits],
        tol,
        all,
        seed,
    )?);
    let xp = uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
    out.push(check("maxpool2", &|g: &mut Graph<f64>, v: &[Var]| g.maxpool2(v[0]), &[xp], tol, all, seed)?);

    let a = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let c = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    out.push(check(
        "upsample_bilinear2",
        &|g: &mut Graph<f64>, v: &[Var]| g.upsample_bilinear2(v[0]),
        &[a.clone()],
        tol,
        all,
        seed,
    )?);
    out.push(check(
        "concat_channels",
        &|g: &mut Graph<f64>, v: &[Var]| g.concat_channels(v[0], v[1]),
        &[a.clone(), c],
        tol,
        all,
        seed,
    )?);
    out.push(check(
        "directional_avgpool_height",
        &|g: &mut Graph<f64>, v: &[Var]| g.directional_avgpool(v[0], Axis::Height),
        &[a.clone()],
        tol,
        all,
        seed,
    )?);
    out.push(check(
        "directional_avgpool_width",
        &|g: &mut Graph<f64>, v: &[Var]| g.directional_avgpool(v[0], Axis::Width),
        &[a.clone()],
        tol,
        all,
        seed,
    )?);
    out.push(check(
        "narrow_reshape",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let n = g.narrow(v[0], 2, 1, 2)?;
            g.reshape(n, &[1, 2, 1, 8])
        },
        &[a.clone()],
        tol,
        all,
        seed,
    )?);

    let row = uniform(&[1, 2, 1, 4], 0.5, 1.5, &mut rng);
    let col = uniform(&[1, 2, 4, 1], 0.5, 1.5, &mut rng);
    out.push(check(
        "mul_broadcast",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let t = g.mul(v[0], v[1])?;
            g.mul(t, v[2])
        },
        &[a.clone(), row, col],
        tol,
        all,
        seed,
    )?);
    let pos = uniform(&[1, 2, 4, 4], 0.5, 2.0, &mut rng);
    let pos2 = uniform(&[1, 2, 4, 4], 0.5, 2.0, &mut rng);
    out.push(check(
        "add_div",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let s = g.add(v[0], v[1])?;
            g.div(s, v[1])
        },
        &[a, pos.clone()],
        tol,
        all,
        seed,
    )?);
    out.push(check(
        "ln_pow_affine",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let l = g.ln(v[0])?;
            let p = g.pow(v[1], 0.3)?;
            let s = g.add(l, p)?;
            g.affine(s, -0.7, 0.2)
        },
        &[pos, pos2],
        tol,
        all,
        seed,
    )?);
    let cl = uniform(&[1, 1, 4, 4], -2.0, 2.0, &mut rng);
    out.push(check(
        "clamp_sum_mean",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let c = g.clamp(v[0], -1.0, 1.0)?;
            let s = g.sum_axes(c, &[2])?;
            let m = g.mean_all(c)?;
            let sq = g.mul(s, s)?;
            let total = g.mean_all(sq)?;
            g.add(total, m)
        },
        &[cl],
        tol,
        all,
        seed,
    )?);
    Ok(out)
}

fn params_of(store: &crate::network::ParameterStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    store.params().map(|(k, v)| (k.to_string(), v.clone())).unzip()
}

/// Coordinate attention, the RICA block, every loss variant, and the whole
/// network, all in training mode.
pub fn model_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = Vec::new();

    // Coordinate attention with a small mid width so every branch is exercised.
    let ca_cfg = CaConfig {
        reduction_ratio: 2,
        min_mid_channels: 2,
        ..CaConfig::default()
    };
    let ca = CoordinateAttention::new("ca", 4, ca_cfg.clone())?;
    let ca_store = ca.init_store::<f64>(seed)?;
    let (names, tensors) = params_of(&ca_store);
    let x = uniform(&[2, 4, 5, 6], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(tensors);
    out.push(check(
        "coordinate_attention",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let mut store = ca_store.clone();
            let bound = store.bind_vars(&names, &v[1..]);
            ca.forward(g, &bound, &mut store.train_access(), v[0])
        },
        &inputs,
        END_TO_END_TOLERANCE,
        usize::MAX,
        seed,
    )?);

    let rica = RicaBlock::new("enc0.rica", 3, 8, ca_cfg)?;
    let rica_store = rica.init_store::<f64>(seed)?;
    let (names, tensors) = params_of(&rica_store);
    let x = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(tensors);
    out.push(check(
        "rica_block",
        &|g: &mut Graph<f64>, v: &[Var]| {
            let mut store = rica_store.clone();
            let bound = store.bind_vars(&names, &v[1..]);
            rica.forward(g, &bound, &mut store.train_access(), v[0])
        },
        &inputs,
        END_TO_END_TOLERANCE,
        usize::MAX,
        seed,
    )?);

    let target = random_mask(1, 4, 4, &mut rng);
    for variant in LossVariant::ALL {
        let cfg = LossConfig {
            variant,
            class_weights: vec![0.5, 0.8, 1.6, 1.2, 1.0, 0.9],
            ..LossConfig::default()
        };
        let logits = uniform(&[1, 6, 4, 4], -2.0, 2.0, &mut rng);
        out.push(check(
            &format!("loss_{}", variant.name()),
            &|g: &mut Graph<f64>, v: &[Var]| crate::losses::loss(g, v[0], &target, &cfg),
            &[logits],
            OP_TOLERANCE,
            usize::MAX,
            seed,
        )?);
    }

    out.push(network_check(seed, &mut rng)?);
    Ok(out)
}

/// End-to-end check through a 2-level, base-2 RICAU-Net on a 1×1×16×16 input
/// with the default loss.
fn network_check(seed: u64, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let arch = ArchConfig {
        levels: 2,
        base_channels: 2,
        ca: CaConfig {
            reduction_ratio: 2,
            min_mid_channels: 2,
            ..CaConfig::default()
        },
        ..ArchConfig::default()
    };
    let net = RicauNet::new(arch)?;
    let store = net.init_store::<f64>(seed)?;
    let (names, tensors) = params_of(&store);
    let x = uniform(&[1, 1, 16, 16], 0.0, 1.0, rng);
    let target = random_mask(1, 16, 16, rng);
    let cfg = LossConfig {
        class_weights: vec![0.5, 0.8, 1.6, 1.2, 1.0, 0.9],
        ..LossConfig::default()
    };
    let probe = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let mut st = store.clone();
        let bound = st.bind_vars(&names, v);
        let input = g.constant(x.clone())?;
        let logits = net.forward_bound(g, &bound, &mut st.train_access(), input)?;
        crate::losses::loss(g, logits, &target, &cfg)
    };
    check("ricau_net_end_to_end", &probe, &tensors, END_TO_END_TOLERANCE, usize::MAX, seed)
}

/// Runs both suites.
pub fn full_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = op_suite(seed)?;
    reports.extend(model_suite(seed)?);
    Ok(reports)
}

pub fn render_table(reports: &[CheckReport]) -> String {
    let mut s = String::from("op\tmax_rel_err\ttolerance\tchecked\tskipped\tstatus\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{:.3e}\t{:.0e}\t{}\t{}\t{}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

pub(crate) fn ensure_all_passed(reports: &[CheckReport]) -> Result<()> {
    match reports.iter().find(|r| !r.passed()) {
        None => Ok(()),
        Some(r) => Err(Error::Contract(format!(
            "gradient check `{}` failed: max relative error {:.3e} ≥ {:.0e}",
            r.name, r.max_rel_err, r.tolerance
        ))),
    }
}
