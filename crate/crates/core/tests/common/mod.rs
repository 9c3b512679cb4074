#![allow(dead_code)]

pub mod replay;

use fedfd::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use fedfd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks every input gradient of `build` against central differences.
///
/// Non-scalar outputs are contracted with a fixed random weighting so that
/// symmetric errors cannot cancel. Returns the worst relative error, or
/// `None` when the point sits too close to a relu/clamp kink.
pub fn op_gradient_error<F>(inputs: &[Tensor], seed: u64, build: F) -> Option<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        if g.kink_margin() < 1e-3 {
            return None;
        }
        let shape = g.shape(out).to_vec();
        uniform(&mut rng(seed), &shape, 0.5, 1.5)
    };
    let contract = |g: &mut Graph, out: Var| {
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        g.sum(prod)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars);
    let loss = contract(&mut g, out);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap().to_vec();
        let numeric = central_difference(
            |x| {
                let mut h = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == i {
                            h.constant(Tensor::new(t.shape(), x.to_vec()).unwrap())
                        } else {
                            h.constant(t.clone())
                        }
                    })
                    .collect();
                let o = build(&mut h, &vs);
                let l = contract(&mut h, o);
                h.data(l)[0]
            },
            input.data(),
            DEFAULT_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Some(worst)
}

pub fn flatten(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten_into(ts: Vec<&mut Tensor>, flat: &[f64]) {
    let mut at = 0;
    for t in ts {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    assert_eq!(at, flat.len());
}

/// Central differences of a scalar function of a flat parameter vector,
/// compared against `analytic`.
pub fn flat_gradient_error(analytic: &[f64], point: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let numeric = central_difference(f, point, DEFAULT_STEP);
    max_relative_error(analytic, &numeric)
}

pub type Build = fn(&mut Graph, &[Var]) -> Var;

/// Every differentiable primitive, each with inputs drawn in [-2, 2]
/// (shifted where the op needs a positive domain).
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, f64, Build)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| {
            g.add(v[0], v[1]).unwrap()
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| {
            g.sub(v[0], v[1]).unwrap()
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| {
            g.mul(v[0], v[1]).unwrap()
        }),
        ("div", vec![vec![3, 4], vec![3, 4]], 3.0, |g, v| {
            g.div(v[0], v[1]).unwrap()
        }),
        ("scale", vec![vec![5]], 0.0, |g, v| g.scale(v[0], -1.7)),
        ("add_scalar", vec![vec![5]], 0.0, |g, v| g.add_scalar(v[0], 0.3)),
        ("one_minus", vec![vec![5]], 0.0, |g, v| g.one_minus(v[0])),
        ("relu", vec![vec![4, 5]], 0.0, |g, v| g.relu(v[0])),
        ("sqrt", vec![vec![6]], 3.0, |g, v| g.sqrt(v[0])),
        ("clamp", vec![vec![8]], 0.0, |g, v| g.clamp(v[0], -0.5, 0.5)),
        ("reshape", vec![vec![2, 6]], 0.0, |g, v| {
            g.reshape(v[0], &[3, 4]).unwrap()
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], 0.0, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], 0.0, |g, v| {
            g.add_bias(v[0], v[1]).unwrap()
        }),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]], 0.0, |g, v| {
            g.conv2d(v[0], v[1], 2, 1).unwrap()
        }),
        ("global_avg_pool", vec![vec![2, 3, 4, 4]], 0.0, |g, v| {
            g.global_avg_pool(v[0]).unwrap()
        }),
        ("spatial_var", vec![vec![2, 3, 4, 4]], 0.0, |g, v| {
            g.spatial_var(v[0]).unwrap()
        }),
        ("channel_mean", vec![vec![2, 3, 4, 4]], 0.0, |g, v| {
            g.channel_mean(v[0]).unwrap()
        }),
        ("channel_var", vec![vec![2, 3, 4, 4]], 0.0, |g, v| {
            g.channel_var(v[0]).unwrap()
        }),
        ("expand_rows", vec![vec![3]], 0.0, |g, v| {
            g.expand_rows(v[0], 4).unwrap()
        }),
        ("expand_cols", vec![vec![3]], 0.0, |g, v| {
            g.expand_cols(v[0], 4).unwrap()
        }),
        (
            "normalize",
            vec![vec![2, 3, 3, 3], vec![2, 3], vec![2, 3]],
            0.0,
            |g, v| {
                // keep sigma away from zero
                let s = g.mul(v[2], v[2]).unwrap();
                let s = g.add_scalar(s, 0.5);
                g.normalize(v[0], v[1], s).unwrap()
            },
        ),
        (
            "channel_affine",
            vec![vec![2, 3, 3, 3], vec![3], vec![3]],
            0.0,
            |g, v| g.channel_affine(v[0], v[1], v[2]).unwrap(),
        ),
        ("column", vec![vec![4, 3]], 0.0, |g, v| g.column(v[0], 1).unwrap()),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], 0.0, |g, v| {
            g.concat_cols(v[0], v[1]).unwrap()
        }),
        ("sum", vec![vec![3, 3]], 0.0, |g, v| g.sum(v[0])),
        ("softmax_cross_entropy", vec![vec![4, 3]], 0.0, |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| {
            g.mse(v[0], v[1]).unwrap()
        }),
    ]
}
