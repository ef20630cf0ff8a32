//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams, RefineConfig, Session, SetAutoencoder, Variant};
use crate::nn::{self, BatchNormMode, FSPoolSpec, LayerSpec};
use crate::tensor::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Checks the gradient of the scalar `f(x)` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, tol)
}

/// Like [`grad_check`] for a function of several tensors; every coordinate
/// of every input is perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out, &vars, false)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, tol };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("requested gradient").clone();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            if rel.is_nan() || rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Perturbation used by the standard suite.
pub const SUITE_EPS: f64 = 1e-5;
/// Tolerance for single primitives and second-order checks.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for Hessian-vector products.
pub const SECOND_ORDER_TOL: f64 = 1e-3;
/// Tolerance for the unrolled end-to-end pipeline.
pub const PIPELINE_TOL: f64 = 1e-3;

/// One named entry of [`standard_suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `[-1, -0.1] U [0.1, 1]`, away from the relu kink.
fn off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_tensor(shape, seed, -1.0, 1.0).map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v })
}

/// Reduces `y` to a scalar through fixed random weights, so every output
/// coordinate contributes a distinct amount.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(t.shape(y), seed, 0.5, 1.5);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Hessian-vector products of `inner` through its first gradient: the
/// returned scalar is `<v, d inner / d x0>` with the gradient kept on the
/// graph, so its own gradient is checked against finite differences.
fn hvp_entry<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, inner: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let v = rand_tensor(inputs[0].shape(), seed, -1.0, 1.0);
    let report = grad_check_many(
        |t, xs| {
            let l = inner(t, xs)?;
            let g = t.backward(l, &[xs[0]], true)?;
            let g = g.node(xs[0]).expect("create_graph yields nodes");
            let vv = t.constant(v.clone());
            let p = t.mul(g, vv)?;
            t.sum(p)
        },
        &inputs,
        SUITE_EPS,
        SECOND_ORDER_TOL,
    )?;
    Ok(SuiteEntry { name: name.to_string(), report })
}

/// Finite-difference checks of every primitive, the layers built on them,
/// second-order checks of the set encoder, and the unrolled pipeline.
pub fn standard_suite() -> Result<Vec<SuiteEntry>> {
    type F = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    type DynOp<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    let mut out = Vec::new();
    let mut op = |name: &str, inputs: Vec<Tensor<f64>>, f: DynOp| -> Result<()> {
        let report = grad_check_many(|t, v| f(t, v), &inputs, SUITE_EPS, OP_TOL)?;
        out.push(SuiteEntry { name: name.to_string(), report });
        Ok(())
    };
    let a = || rand_tensor(&[2, 3], 1, -1.0, 1.0);
    let b = || rand_tensor(&[2, 3], 2, -1.0, 1.0);
    let pos = || rand_tensor(&[2, 3], 3, 0.5, 2.0);

    let binary: [(&str, F); 4] = [
        ("add", |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 9) }),
        ("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 9) }),
        ("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 9) }),
        ("div", |t, v| { let y = t.div(v[0], v[1])?; weighted_sum(t, y, 9) }),
    ];
    for (name, f) in binary {
        let rhs = if name == "div" { pos() } else { b() };
        op(name, vec![a(), rhs], &f)?;
    }
    op("add (broadcast)", vec![a(), rand_tensor(&[3], 4, -1.0, 1.0)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 9)
    })?;
    let unary: [(&str, F); 7] = [
        ("scale", |t, v| { let y = t.scale(v[0], -2.5)?; weighted_sum(t, y, 9) }),
        ("add_scalar", |t, v| { let y = t.add_scalar(v[0], 0.7)?; weighted_sum(t, y, 9) }),
        ("pow", |t, v| { let y = t.pow(v[0], 1.5)?; weighted_sum(t, y, 9) }),
        ("square", |t, v| { let y = t.square(v[0])?; weighted_sum(t, y, 9) }),
        ("exp", |t, v| { let y = t.exp(v[0])?; weighted_sum(t, y, 9) }),
        ("sigmoid", |t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y, 9) }),
        ("relu", |t, v| { let y = t.relu(v[0])?; weighted_sum(t, y, 9) }),
    ];
    for (name, f) in unary {
        let x = match name {
            "pow" => pos(),
            "relu" => off_kink(&[2, 3], 5),
            _ => a(),
        };
        op(name, vec![x], &f)?;
    }
    let shape_ops: [(&str, F); 6] = [
        ("reshape", |t, v| { let y = t.reshape(v[0], &[3, 2])?; weighted_sum(t, y, 9) }),
        ("permute", |t, v| { let y = t.permute(v[0], &[1, 0])?; weighted_sum(t, y, 9) }),
        ("broadcast_to", |t, v| { let y = t.broadcast_to(v[0], &[4, 2, 3])?; weighted_sum(t, y, 9) }),
        ("sum_to", |t, v| { let y = t.sum_to(v[0], &[1, 3])?; weighted_sum(t, y, 9) }),
        ("sum_axis", |t, v| { let y = t.sum_axis(v[0], 0, true)?; weighted_sum(t, y, 9) }),
        ("mean", |t, v| { let y = t.square(v[0])?; t.mean(y) }),
    ];
    for (name, f) in shape_ops {
        op(name, vec![a()], &f)?;
    }
    op("matmul", vec![a(), rand_tensor(&[3, 4], 6, -1.0, 1.0)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 9)
    })?;
    op("softmax", vec![rand_tensor(&[2, 4, 3], 7, -2.0, 2.0)], &|t, v| {
        let y = nn::softmax(t, v[0], 1)?;
        weighted_sum(t, y, 9)
    })?;
    op("mse", vec![a(), b()], &|t, v| nn::mse(t, v[0], v[1]))?;
    op("linear", vec![a(), rand_tensor(&[4, 3], 8, -1.0, 1.0), rand_tensor(&[4], 10, -1.0, 1.0)], &|t, v| {
        let y = nn::linear(t, v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, 9)
    })?;
    op(
        "conv2d",
        vec![rand_tensor(&[2, 2, 6, 6], 11, -1.0, 1.0), rand_tensor(&[3, 2, 4, 4], 12, -1.0, 1.0), rand_tensor(&[3], 13, -1.0, 1.0)],
        &|t, v| {
            let y = nn::conv2d(t, v[0], v[1], Some(v[2]), &LayerSpec::conv2d(2, 3, 4, 2, 1).with_bias(true))?;
            weighted_sum(t, y, 9)
        },
    )?;
    op(
        "conv_transpose2d",
        vec![rand_tensor(&[2, 3, 3, 3], 14, -1.0, 1.0), rand_tensor(&[3, 2, 4, 4], 15, -1.0, 1.0)],
        &|t, v| {
            let y = nn::conv_transpose2d(t, v[0], v[1], None, &LayerSpec::conv_transpose2d(3, 2, 4, 2, 1))?;
            weighted_sum(t, y, 9)
        },
    )?;
    op(
        "conv1d_group_project",
        vec![rand_tensor(&[2, 4, 3], 16, -1.0, 1.0), rand_tensor(&[5, 4, 1], 17, -1.0, 1.0), rand_tensor(&[5], 18, -1.0, 1.0)],
        &|t, v| {
            let y = nn::conv1d_group_project(t, v[0], v[1], Some(v[2]), &LayerSpec::conv1d(4, 5))?;
            weighted_sum(t, y, 9)
        },
    )?;
    op(
        "batch_norm (train)",
        vec![rand_tensor(&[4, 3, 2, 2], 19, -1.0, 1.0), rand_tensor(&[3], 20, 0.5, 1.5), rand_tensor(&[3], 21, -1.0, 1.0)],
        &|t, v| {
            let (rm, rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
            let (y, _) = nn::batch_norm(t, v[0], v[1], v[2], &rm, &rv, nn::BatchNormMode::Train)?;
            weighted_sum(t, y, 9)
        },
    )?;
    op("fspool", vec![rand_tensor(&[2, 5, 3], 22, -1.0, 1.0), rand_tensor(&[3, 5], 23, 0.0, 2.0)], &|t, v| {
        let y = nn::fspool(t, v[0], v[1], &FSPoolSpec { feature_dim: 3, pieces: 4 })?;
        weighted_sum(t, y, 9)
    })?;

    out.push(hvp_entry(
        "fspool (second order)",
        vec![rand_tensor(&[2, 5, 3], 24, -1.0, 1.0), rand_tensor(&[3, 5], 25, 0.0, 2.0)],
        26,
        |t, v| {
            let y = nn::fspool(t, v[0], v[1], &FSPoolSpec { feature_dim: 3, pieces: 4 })?;
            let y = t.square(y)?;
            t.sum(y)
        },
    )?);
    out.push(hvp_entry(
        "set encoder inner loss (second order)",
        vec![
            rand_tensor(&[2, 3, 4], 27, -1.0, 1.0),
            rand_tensor(&[6, 4], 28, -1.0, 1.0),
            rand_tensor(&[6], 29, 0.2, 0.6),
            rand_tensor(&[5, 6], 30, -1.0, 1.0),
            rand_tensor(&[5, 5], 31, 0.0, 2.0),
            rand_tensor(&[2, 5], 32, -1.0, 1.0),
        ],
        33,
        |t, v| {
            let h = t.reshape(v[0], &[6, 4])?;
            let h = nn::linear(t, h, v[1], Some(v[2]))?;
            let h = t.relu(h)?;
            let h = nn::linear(t, h, v[3], None)?;
            let h = t.reshape(h, &[2, 3, 5])?;
            let h = nn::fspool(t, h, v[4], &FSPoolSpec { feature_dim: 5, pieces: 4 })?;
            let d = t.sub(h, v[5])?;
            let d = t.square(d)?;
            t.sum(d)
        },
    )?);
    out.push(pipeline_entry()?);
    Ok(out)
}

/// Outer-loss gradients of a tiny refined autoencoder (set size 3,
/// element size 4, embedding 5, two inner steps) against finite
/// differences over every trainable parameter.
pub fn pipeline_entry() -> Result<SuiteEntry> {
    let cfg = ModelConfig {
        image_size: 16,
        set_size: 3,
        elem_dim: 4,
        embed_dim: 5,
        hidden_dim: 6,
        fspool_pieces: 4,
        encoder_channels: [2, 2, 2, 3],
        decoder_channels: [2, 2, 2],
        batch_norm: true,
    };
    let model = SetAutoencoder::new(cfg, Variant::Srn, RefineConfig { steps: 2, inner_lr: 0.1, truncate_grad: false })?;
    let mut params: ModelParams<f64> = model.init_params(21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Nonzero biases keep pre-activations off the relu kinks.
    for (name, t) in params.iter_mut() {
        if !crate::model::is_buffer(name) {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let x = rand_tensor(&[3, 3, 16, 16], 8, 0.0, 1.0);
    let report = model_grad_check(&model, &params, &x, SUITE_EPS, PIPELINE_TOL)?;
    Ok(SuiteEntry { name: "unrolled refiner pipeline".into(), report })
}

/// Sum-of-squares reconstruction loss gradients of `model` checked against
/// central differences in every trainable coordinate.
pub fn model_grad_check(
    model: &SetAutoencoder,
    params: &ModelParams<f64>,
    x: &Tensor<f64>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    type Grads = Vec<(String, Tensor<f64>)>;
    let run = |p: &ModelParams<f64>, grads: bool| -> Result<(f64, Grads)> {
        let mut sess = Session::new(p, BatchNormMode::Train);
        let xv = sess.tape.constant(x.clone());
        let out = model.forward(&mut sess, xv, false)?;
        let d = sess.tape.sub(out.recon, xv)?;
        let sq = sess.tape.square(d)?;
        let l = sess.tape.sum(sq)?;
        let value = sess.tape.value(l).item();
        let g = if grads { sess.param_grads(l)? } else { Vec::new() };
        Ok((value, g))
    };
    let (_, grads) = run(params, true)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, tol };
    let mut probe = params.clone();
    for (name, g) in &grads {
        for i in 0..g.numel() {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = run(&probe, false)?.0;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = run(&probe, false)?.0;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = rel_err(g.data()[i], numeric);
            if rel.is_nan() || rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.max_abs_err = report.max_abs_err.max((g.data()[i] - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn standard_suite_passes() {
        let entries = standard_suite().unwrap();
        assert!(entries.len() > 25);
        for e in &entries {
            assert!(e.report.passed(), "{}: {:?}", e.name, e.report);
            assert!(e.report.checked > 0, "{}", e.name);
        }
    }
}
