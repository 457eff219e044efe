//! Finite-difference checks of the autodiff engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::LN_EPS;
use super::{
    label_smoothing_cross_entropy, numeric_gradient, smooth_l1, Array, LayerNorm, Linear, Module,
    NormMlp, Tensor,
};
use crate::error::Result;

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// flattened gradients of all inputs.
    pub rel_error: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = l2(analytic).max(l2(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the gradient of `f` with respect to every entry of `inputs`.
/// Non-scalar outputs are contracted with fixed random weights first.
pub fn check_fn(
    name: impl Into<String>,
    inputs: &[Array<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheck> {
    let params: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let probe_shape = f(&params)?.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights = Tensor::constant(Array::from_fn(probe_shape, |_| rng.random_range(-1.0..1.0)));
    let objective = |ts: &[Tensor<f64>]| -> Result<Tensor<f64>> { f(ts)?.mul(&weights)?.sum() };

    objective(&params)?.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().unwrap_or_else(|| Array::zeros(p.shape()));
        analytic.extend(g.data());
        let mut failure = None;
        numeric.extend(numeric_gradient(inputs[i].data(), FD_STEP, |x| {
            let mut ts: Vec<Tensor<f64>> =
                inputs.iter().map(|a| Tensor::constant(a.clone())).collect();
            ts[i] = Tensor::constant(
                Array::new(inputs[i].shape().to_vec(), x.to_vec()).expect("same shape"),
            );
            match objective(&ts) {
                Ok(v) => v.item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        }));
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(GradCheck {
        name: name.into(),
        rel_error: relative_error(&analytic, &numeric),
    })
}

/// Gradient check with respect to all parameters of a module.
pub fn check_module<M: Module<f64>>(
    name: impl Into<String>,
    module: &M,
    f: impl Fn(&M) -> Result<Tensor<f64>>,
) -> Result<GradCheck> {
    let inputs: Vec<Array<f64>> = module
        .named_params("")
        .into_iter()
        .map(|(_, t)| t.to_array())
        .collect();
    check_fn(name, &inputs, |ts| {
        let mut it = ts.iter();
        let m = module.map_params(&mut |_| it.next().expect("one tensor per parameter").clone());
        f(&m)
    })
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Distinct values, spaced so a max never switches under the step.
fn spread_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Array::new(shape.to_vec(), vals).expect("sized")
}

/// One check per differentiable tensor operation and building block.
pub fn check_all_ops() -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = &mut rng;
    let a23 = rand_array(r, &[2, 3]);
    let b23 = rand_array(r, &[2, 3]);
    let b3 = rand_array(r, &[3]);
    let x234 = rand_array(r, &[2, 3, 4]);
    let m45 = rand_array(r, &[4, 5]);
    let b145 = rand_array(r, &[1, 4, 5]);
    let spread = spread_array(r, &[2, 5, 3]);
    let targets = Array::from_fn(vec![2, 3, 4], |i| {
        x234.data()[i] + [0.3, -3.0, 1.5, -0.1][i % 4]
    });
    let logits = rand_array(r, &[4, 3]);

    let mut out = vec![
        check_fn("add", &[a23.clone(), b3.clone()], |t| t[0].add(&t[1]))?,
        check_fn("sub", &[a23.clone(), b23.clone()], |t| t[0].sub(&t[1]))?,
        check_fn("mul", &[a23.clone(), b3.clone()], |t| t[0].mul(&t[1]))?,
        check_fn("scale", std::slice::from_ref(&a23), |t| t[0].scale(-1.7))?,
        check_fn("neg", std::slice::from_ref(&a23), |t| t[0].neg())?,
        check_fn("add_scalar", std::slice::from_ref(&a23), |t| t[0].add_scalar(0.25))?,
        check_fn("square", std::slice::from_ref(&a23), |t| t[0].square())?,
        check_fn("gelu", std::slice::from_ref(&x234), |t| t[0].gelu())?,
        check_fn("matmul", &[x234.clone(), m45.clone()], |t| {
            t[0].matmul(&t[1])
        })?,
        check_fn("matmul_batched", &[x234.clone(), b145.clone()], |t| {
            t[0].matmul(&t[1])
        })?,
        check_fn("sum", std::slice::from_ref(&x234), |t| t[0].square()?.sum())?,
        check_fn("mean", std::slice::from_ref(&x234), |t| t[0].square()?.mean())?,
        check_fn("sum_axis", std::slice::from_ref(&x234), |t| t[0].sum_axis(1, false))?,
        check_fn("mean_axis", std::slice::from_ref(&x234), |t| t[0].mean_axis(2, true))?,
        check_fn("max_axis", std::slice::from_ref(&spread), |t| t[0].max_axis(1, false))?,
        check_fn("reshape", std::slice::from_ref(&x234), |t| t[0].reshape(vec![4, 6]))?,
        check_fn("permute", std::slice::from_ref(&x234), |t| t[0].permute(&[2, 0, 1]))?,
        check_fn("transpose_last", std::slice::from_ref(&x234), |t| t[0].transpose_last())?,
        check_fn("broadcast_to", std::slice::from_ref(&b3), |t| {
            t[0].broadcast_to(&[4, 3])
        })?,
        check_fn("concat", &[a23.clone(), b23.clone()], |t| {
            Tensor::concat(&[&t[0], &t[1]], 1)
        })?,
        check_fn("gather_rows", std::slice::from_ref(&m45), |t| {
            t[0].gather_rows(&[3, 0, 3, 1])
        })?,
        check_fn("layer_norm", std::slice::from_ref(&x234), |t| {
            t[0].layer_norm(LN_EPS, None)
        })?,
        check_fn(
            "layer_norm_affine",
            &[x234.clone(), rand_array(r, &[4]), rand_array(r, &[4])],
            |t| t[0].layer_norm(LN_EPS, Some((&t[1], &t[2]))),
        )?,
        check_fn("softmax", std::slice::from_ref(&x234), |t| t[0].softmax())?,
        check_fn("dropout", std::slice::from_ref(&x234), |t| {
            t[0].dropout(0.3, true, &mut ChaCha8Rng::seed_from_u64(1))
        })?,
        check_fn("drop_path", std::slice::from_ref(&x234), |t| {
            t[0].drop_path(0.5, true, &mut ChaCha8Rng::seed_from_u64(3))
        })?,
        check_fn("smooth_l1", std::slice::from_ref(&x234), |t| {
            smooth_l1(&t[0], &Tensor::constant(targets.clone()), 2.0)
        })?,
        check_fn("label_smoothing_cross_entropy", &[logits], |t| {
            label_smoothing_cross_entropy(&t[0], &[0, 2, 1, 2], 0.2)
        })?,
    ];

    let x = Tensor::constant(x234.clone());
    let linear = Linear::<f64>::new(4, 5, true, r);
    out.push(check_module("linear", &linear, |m| m.forward(&x))?);
    let mut norm = LayerNorm::<f64>::new(4);
    norm = norm.map_params(&mut |t| Tensor::param(t.to_array().map(|v| v + 0.3)));
    out.push(check_module("layer_norm_module", &norm, |m| m.forward(&x))?);
    let mlp = NormMlp::<f64>::new(4, 6, 3, r);
    out.push(check_module("norm_mlp", &mlp, |m| m.forward(&x))?);
    Ok(out)
}
