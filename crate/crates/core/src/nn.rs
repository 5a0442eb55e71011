//! Parameter initialization and small layer helpers shared by the model
//! modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Glorot-uniform `[out, in]` weight.
pub fn glorot(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor {
    let a = (6.0 / (out + inp) as f64).sqrt();
    let data = (0..out * inp).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![out, inp], data).expect("weight shape")
}

/// Registers `{name}.w: [out, in]` and `{name}.b: [out]` (zero bias).
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) {
    store.insert(format!("{name}.w"), glorot(rng, out, inp));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, 1e-5)?;
    let gain = g.param(store, &format!("{name}.g"))?;
    let bias = g.param(store, &format!("{name}.b"))?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

/// `x * sigmoid(x)`.
pub fn swish(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.sigmoid(x)?;
    g.mul(x, s)
}

/// Standard sinusoidal table `[rows, dim]`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for p in 0..rows {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * k / dim as f64);
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![rows, dim], data).expect("positions shape")
}
