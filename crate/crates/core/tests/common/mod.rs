#![allow(dead_code)]

use std::path::PathBuf;

use erfcond_core::blocks::{non_bt_1d_forward, residual_basic_forward, NonBt1DSpec, ResidualSpec};
use erfcond_core::graph::{Bindings, BufferDecl, BufferStore, Ctx, NormConfig, ParamDecl, ParamStore};
use erfcond_core::tensor::{ConvGeometry, DeconvGeometry, Tape};
use erfcond_core::{Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const STEP: f64 = 1e-6;
const ZERO_GRADIENT: f64 = 1e-6;

/// Reduces a tape output to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let m = tape.mask(out, weights.to_vec())?;
    Ok(tape.sum(m))
}

/// Largest relative error, `|g - g_fd| / max(|g|, |g_fd|)` in the 2-norm,
/// between tape gradients and central differences over all inputs. Inputs
/// whose gradient norm is below `ZERO_GRADIENT` on both sides are skipped.
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let n_out = tape.value(out).numel();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = project(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = build(&mut t, &vs)?;
        let l = project(&mut t, o, &weights)?;
        Ok(t.value(l).item())
    };

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = base - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = base;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        // Structurally zero gradients (a bias feeding batch norm) leave only
        // rounding noise on both sides, which has no meaningful ratio.
        if scale >= ZERO_GRADIENT {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    Ok(worst)
}

/// Named gradient checks over every tape primitive, for one seed.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    let x = random_tensor(r, &[2, 3, 5, 6], 1.0);
    let w = random_tensor(r, &[4, 3, 3, 3], 0.5);
    let b = random_tensor(r, &[4], 0.5);
    let geom = ConvGeometry {
        stride: (2, 1),
        padding: (1, 2),
        dilation: (1, 2),
    };
    out.push((
        "conv2d",
        grad_check(&[x.clone(), w, b], seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom))?,
    ));

    let w = random_tensor(r, &[3, 2, 3, 3], 0.5);
    let b = random_tensor(r, &[2], 0.5);
    out.push((
        "conv_transpose2d",
        grad_check(&[x.clone(), w, b], seed, |t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), DeconvGeometry::new(2, 1, 1))
        })?,
    ));

    let gamma = Tensor::from_fn(&[3], |_| r.random_range(0.5..1.5));
    let beta = random_tensor(r, &[3], 0.5);
    for (name, training) in [("batch_norm2d_train", true), ("batch_norm2d_eval", false)] {
        let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
        out.push((
            name,
            grad_check(&[x.clone(), gamma.clone(), beta.clone()], seed, |t, v| {
                let (mut m, mut s) = (mean.clone(), var.clone());
                t.batch_norm2d(v[0], v[1], v[2], &mut m, &mut s, 1e-3, 0.1, training)
            })?,
        ));
    }

    out.push(("relu", grad_check(&[x.clone()], seed, |t, v| Ok(t.relu(v[0])))?));
    let y = random_tensor(r, &[2, 3, 5, 6], 1.0);
    out.push(("add", grad_check(&[x.clone(), y], seed, |t, v| t.add(v[0], v[1]))?));
    let even = random_tensor(r, &[2, 3, 4, 6], 1.0);
    out.push(("maxpool2", grad_check(&[even], seed, |t, v| t.maxpool2(v[0]))?));
    let z = random_tensor(r, &[2, 2, 5, 6], 1.0);
    out.push((
        "concat_channels",
        grad_check(&[x.clone(), z], seed, |t, v| t.concat_channels(&[v[0], v[1]]))?,
    ));
    let mask: Vec<f64> = (0..x.numel()).map(|_| if r.random_bool(0.3) { 0.0 } else { 1.25 }).collect();
    out.push(("mask", grad_check(&[x.clone()], seed, |t, v| t.mask(v[0], mask.clone()))?));
    out.push(("sum", grad_check(&[x.clone()], seed, |t, v| Ok(t.sum(v[0])))?));
    out.push(("scale", grad_check(&[x.clone()], seed, |t, v| Ok(t.scale(v[0], -0.7)))?));
    out.push((
        "gather_pixel",
        grad_check(&[x.clone()], seed, |t, v| t.gather_pixel(v[0], 1, 3, 4))?,
    ));

    let feat = random_tensor(r, &[2, 3, 4, 5], 1.0);
    let kernel = random_tensor(r, &[4], 1.0);
    out.push((
        "dynamic_conv1x1",
        grad_check(&[feat.clone(), kernel.clone()], seed, |t, v| t.dynamic_conv1x1(v[0], 1, v[1]))?,
    ));
    let rw = random_tensor(r, &[3], 1.0);
    let rb = random_tensor(r, &[1], 1.0);
    out.push((
        "row_pool_linear",
        grad_check(&[feat.clone(), kernel, rw, rb], seed, |t, v| {
            let logits = t.dynamic_conv1x1(v[0], 0, v[1])?;
            t.row_pool_linear(v[0], 0, logits, v[2], v[3])
        })?,
    ));

    let logits = random_tensor(r, &[2, 1, 4, 5], 2.0);
    let mut target = Tensor::from_fn(&[2, 1, 4, 5], |_| r.random_range(0.0..0.95));
    target.data_mut()[3] = 1.0;
    target.data_mut()[27] = 1.0;
    out.push((
        "focal_loss",
        grad_check(&[logits], seed, |t, v| t.focal_loss(v[0], &target, 2.0, 4.0))?,
    ));
    let rows = random_tensor(r, &[4, 6], 2.0);
    let cols = [Some(2), None, Some(5), Some(0)];
    out.push((
        "row_cross_entropy",
        grad_check(&[rows], seed, |t, v| t.row_cross_entropy(v[0], &cols))?,
    ));
    let range = random_tensor(r, &[6], 2.0);
    let bits = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    out.push((
        "binary_cross_entropy",
        grad_check(&[range], seed, |t, v| t.binary_cross_entropy(v[0], &bits))?,
    ));
    Ok(out)
}

/// Gradient check of a block with respect to its input and every parameter,
/// with batch norm in training mode.
pub fn block_check<F>(decls: &[ParamDecl], buffers: &[BufferDecl], input_shape: &[usize], seed: u64, forward: F) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::<f64>::initialize(decls, &mut rng)?;
    let mut inputs = vec![random_tensor(&mut rng, input_shape, 1.0)];
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in store.iter() {
        // Zero-initialized shifts would park units exactly on ReLU kinks.
        let t = if name.ends_with(".bias") {
            random_tensor(&mut rng, t.shape(), 0.3)
        } else {
            t.clone()
        };
        inputs.push(t);
    }
    grad_check(&inputs, seed, |tape, vars| {
        let mut bindings = Bindings::default();
        for (name, v) in names.iter().zip(&vars[1..]) {
            bindings.insert(name, *v);
        }
        let mut bufs = BufferStore::<f64>::initialize(buffers);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            tape,
            params: &bindings,
            buffers: &mut bufs,
            rng: &mut rng,
            training: true,
            norm: NormConfig::default(),
        };
        forward(&mut ctx, vars[0])
    })
}

pub fn non_bt_check(seed: u64) -> Result<f64> {
    let spec = NonBt1DSpec::new(3, 2, 0.0)?;
    block_check(&spec.param_decls("b"), &spec.buffer_decls("b"), &[2, 3, 5, 5], seed, |ctx, x| {
        non_bt_1d_forward(ctx, x, &spec, "b")
    })
}

pub fn residual_check(seed: u64, stride: usize, cin: usize, cout: usize) -> Result<f64> {
    let spec = ResidualSpec::new(cin, cout, stride)?;
    block_check(&spec.param_decls("r"), &spec.buffer_decls("r"), &[2, cin, 6, 6], seed, |ctx, x| {
        residual_basic_forward(ctx, x, &spec, "r")
    })
}
