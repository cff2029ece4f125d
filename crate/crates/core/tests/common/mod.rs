//! Independent oracles shared by the integration tests. Everything here is
//! written as plain loops over flat data, without the library's kernels.
#![allow(dead_code)]

use selrcn::pipeline::synth::{synth_generate, SynthConfig, SynthDataset};
use selrcn::autodiff::Var;
use selrcn::{rng, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::seeded(seed))
}

pub fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Per-channel plane means of a `C×H×W` tensor.
pub fn plane_means(u: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += u.get(&[ch, y, x]);
                }
            }
            acc / (h * w) as f64
        })
        .collect()
}

/// Means of each row of a `T×C` matrix.
pub fn row_means(u: &Tensor<f64>) -> Vec<f64> {
    let (t, c) = (u.shape()[0], u.shape()[1]);
    (0..t).map(|i| (0..c).map(|j| u.get(&[i, j])).sum::<f64>() / c as f64).collect()
}

/// Means of each column of a `T×C` matrix.
pub fn col_means(u: &Tensor<f64>) -> Vec<f64> {
    let (t, c) = (u.shape()[0], u.shape()[1]);
    (0..c).map(|j| (0..t).map(|i| u.get(&[i, j])).sum::<f64>() / t as f64).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(W2 · relu(W1 · z))` with explicit loops.
pub fn excite(z: &[f64], w1: &Tensor<f64>, w2: &Tensor<f64>) -> Vec<f64> {
    let (h, d) = (w1.shape()[0], w1.shape()[1]);
    let hidden: Vec<f64> = (0..h).map(|i| (0..d).map(|j| w1.get(&[i, j]) * z[j]).sum::<f64>().max(0.0)).collect();
    (0..d).map(|i| sigmoid((0..h).map(|j| w2.get(&[i, j]) * hidden[j]).sum())).collect()
}

/// Row-wise softmax of an `R×K` matrix.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Synthetic train and held-out sets for one seed.
pub fn synth_split(samples: usize, frames: usize, noise: f64, seed: u64) -> (SynthDataset, SynthDataset) {
    let train = synth_generate(&SynthConfig::new(4, samples, frames, noise, 1000 + seed)).unwrap();
    let held = synth_generate(&SynthConfig::new(4, samples / 2, frames, noise, 2000 + seed)).unwrap();
    (train, held)
}

pub type Unary = for<'t> fn(Var<'t, f64>) -> selrcn::Result<Var<'t, f64>>;

/// Every differentiable primitive, wrapped to a scalar readout.
pub fn primitives() -> Vec<(&'static str, Vec<usize>, Unary)> {
    fn weighted<'t>(y: Var<'t, f64>) -> selrcn::Result<Var<'t, f64>> {
        let w = y.tape().constant(Tensor::from_fn(&y.shape(), |i| ((i * 7 % 5) as f64 - 2.0) * 0.3));
        Ok(y.mul(&w)?.sum())
    }
    vec![
        ("relu", vec![3, 4], |x| weighted(x.relu())),
        ("sigmoid", vec![3, 4], |x| weighted(x.sigmoid())),
        ("tanh", vec![3, 4], |x| weighted(x.tanh())),
        ("softmax", vec![3, 4], |x| weighted(x.softmax(1)?)),
        ("mean_axis", vec![3, 4, 2], |x| weighted(x.mean_axis(1)?)),
        ("global_avg_pool", vec![2, 3, 3, 3], |x| weighted(x.global_avg_pool()?)),
        ("max_pool", vec![1, 2, 5, 5], |x| weighted(x.max_pool2d(3, 2, 1)?)),
        ("transpose", vec![3, 4], |x| weighted(x.t()?)),
        ("slice", vec![3, 4], |x| weighted(x.slice(1, 1, 2)?)),
        ("concat", vec![3, 4], |x| weighted(Var::concat(&[x, x.slice(1, 0, 2)?], 1)?)),
        ("scale", vec![4], |x| weighted(x.scale(-1.7))),
        ("matmul_self", vec![3, 3], |x| weighted(x.matmul(&x)?)),
        ("conv_self", vec![2, 2, 3, 3], |x| {
            let w = x.slice(0, 0, 1)?.slice(2, 0, 2)?.slice(3, 0, 2)?;
            weighted(x.conv2d(&w.reshape(&[1, 2, 2, 2])?.broadcast_mul(&x.slice(0, 1, 1)?.slice(2, 0, 2)?.slice(3, 0, 2)?)?, 1, 0)?)
        }),
        ("broadcast_mul", vec![2, 3, 2], |x| {
            let s = x.mean_axis(2)?.reshape(&[2, 3, 1])?;
            weighted(x.broadcast_mul(&s)?)
        }),
        ("broadcast_add", vec![2, 3, 2], |x| {
            let s = x.mean_axis(0)?.reshape(&[1, 3, 2])?.tanh();
            weighted(x.broadcast_add(&s)?.mul(&x)?)
        }),
        ("batch_norm", vec![4, 3, 2, 2], |x| {
            let gamma = x.slice(0, 0, 1)?.slice(2, 0, 1)?.slice(3, 0, 1)?.reshape(&[3])?;
            let beta = x.slice(0, 1, 1)?.slice(2, 1, 1)?.slice(3, 1, 1)?.reshape(&[3])?;
            weighted(x.batch_norm(&gamma, &beta, 1e-5)?.0)
        }),
        ("cross_entropy", vec![4, 5], |x| x.cross_entropy(&[0, 1, 4, 2])),
    ]
}
