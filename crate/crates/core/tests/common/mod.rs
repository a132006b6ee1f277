#![allow(dead_code)]

use mmae::model::{channels, Bound, ModalityTokens, ModelConfig, ModelError, ModelParams};
use mmae::rng;
use mmae::{Graph, Tensor, Var};
use rand::seq::index;
use rand::Rng;

pub fn random_tokens(cfg: &ModelConfig, seed: u64) -> ModalityTokens {
    let grid = cfg.grid().unwrap();
    let mut r = rng::stream(seed, &[]);
    cfg.encoder
        .modality_list()
        .iter()
        .map(|&m| {
            let (rows, cols) = (grid.num_positions(), grid.token_len(channels(m)));
            let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
            (m, Tensor::matrix(rows, cols, data).unwrap())
        })
        .collect()
}

pub fn jitter(params: &mut ModelParams, seed: u64, amount: f64) {
    let mut r = rng::stream(seed, &[]);
    params.update(|_, t| t.data_mut().iter_mut().for_each(|v| *v += amount * r.random_range(-1.0..1.0)));
}

/// Central differences against the tape gradient for every parameter
/// tensor selected by `include`. Tensors with up to `per_tensor` entries are
/// checked entirely, larger ones at `per_tensor` random entries. Returns
/// `(name, relative L2 error)` per tensor.
pub fn fd_check_model<F>(
    params: &ModelParams,
    include: impl Fn(&str) -> bool,
    per_tensor: usize,
    step: f64,
    seed: u64,
    loss: F,
) -> Vec<(String, f64)>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, ModelError>,
{
    let value = |p: &ModelParams| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let l = loss(&mut g, &b).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| true);
    let l = loss(&mut g, &b).unwrap();
    g.backward(l).unwrap();
    let grads = b.grads(&g);

    let mut r = rng::stream(seed, &[]);
    let mut out = Vec::new();
    for name in params.names().filter(|n| include(n)).map(str::to_string).collect::<Vec<_>>() {
        let t = params.get(&name).unwrap();
        let n = t.numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            index::sample(&mut r, n, per_tensor).into_vec()
        };
        let mut diff = 0.0;
        let mut norm_fd = 0.0;
        let mut norm_an = 0.0;
        for &i in &picks {
            let mut probe = params.clone();
            let base = t.data()[i];
            let mut bumped = t.clone();
            bumped.data_mut()[i] = base + step;
            probe.set(&name, bumped.clone());
            let up = value(&probe);
            bumped.data_mut()[i] = base - step;
            probe.set(&name, bumped);
            let down = value(&probe);
            let fd = (up - down) / (2.0 * step);
            let an = grads[&name].data()[i];
            diff += (fd - an).powi(2);
            norm_fd += fd * fd;
            norm_an += an * an;
        }
        let scale = norm_fd.sqrt().max(norm_an.sqrt());
        let rel = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
        out.push((name, rel));
    }
    out
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[7]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative L2 error over `inputs` between the tape gradient of
/// `sum(f(inputs) ⊙ w)` (fixed random `w`) and central differences.
pub fn fd_check_op<F>(inputs: &[Tensor], f: F, step: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, mmae::TensorError>,
{
    let eval = |vals: &[Tensor], with_grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = g.constant(random_tensor(g.value(out).shape(), 4242));
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let l = g.value(loss).item();
        if with_grad {
            g.backward(loss).unwrap();
        }
        let grads: Vec<Option<Tensor>> = vars.iter().map(|v| g.grad(*v).cloned()).collect();
        (l, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let a = analytic[k].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut diff = 0.0;
        let mut nn = 0.0;
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * step);
            diff += (fd - a.data()[i]).powi(2);
            nn += fd * fd;
        }
        let scale = a.sq_norm().sqrt().max(nn.sqrt());
        worst = worst.max(if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale });
    }
    worst
}
