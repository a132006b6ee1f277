//! H&E stain separation by sparse non-negative matrix factorization.
//!
//! An RGB tile is mapped to optical density `V = ln(I0 / I)` (Beer-Lambert),
//! which is factored as `V ≈ W·H` by minimizing
//!
//! ```text
//! ½‖V − W·H‖²_F + λ·Σⱼ ‖H(j,:)‖₁   subject to  W, H ≥ 0,  ‖W(:,j)‖₂ = 1
//! ```
//!
//! with alternating minimization: a non-negative lasso coordinate descent for
//! `H` and a projected, column-renormalized gradient step for `W`. Both steps
//! are accepted only if the objective does not increase, so the recorded
//! objective trace is monotone. The single-stain images are then
//! `I0·exp(−H[j,:])`.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_I0: f64 = 255.0;

/// Solver starting point for hematoxylin, before normalization.
pub const HEMATOXYLIN_INIT: [f64; 3] = [0.65, 0.70, 0.29];
/// Solver starting point for eosin, before normalization.
pub const EOSIN_INIT: [f64; 3] = [0.07, 0.99, 0.11];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StainError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Optical density of an RGB tile: `v` is `[3 × n]`, one row per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalDensity {
    pub v: Tensor,
    pub i0: f64,
    pub width: u32,
    pub height: u32,
}

impl OpticalDensity {
    pub fn channels(&self) -> usize {
        self.v.rows()
    }

    pub fn pixels(&self) -> usize {
        self.v.cols()
    }

    /// Pixels of several tiles side by side, as one `[3 × Σn]` strip.
    pub fn concat(parts: &[OpticalDensity]) -> Result<OpticalDensity, StainError> {
        let first = parts
            .first()
            .ok_or_else(|| StainError::Contract("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.i0 != first.i0 || p.channels() != first.channels()) {
            return Err(StainError::Contract("tiles differ in I0 or channel count".into()));
        }
        let n: usize = parts.iter().map(OpticalDensity::pixels).sum();
        let c = first.channels();
        let mut data = Vec::with_capacity(c * n);
        for ch in 0..c {
            for p in parts {
                data.extend_from_slice(p.v.row(ch));
            }
        }
        Ok(OpticalDensity {
            v: Tensor::matrix(c, n, data).map_err(|e| StainError::Contract(e.to_string()))?,
            i0: first.i0,
            width: n as u32,
            height: 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StainModel {
    /// `[3 × r]` stain colors, unit-norm non-negative columns. Column 0 is
    /// hematoxylin, column 1 eosin.
    pub w: Tensor,
    /// `[r × n]` non-negative concentrations.
    pub h: Tensor,
    pub lambda: f64,
}

impl StainModel {
    pub fn rank(&self) -> usize {
        self.w.cols()
    }

    pub fn stain_vector(&self, j: usize) -> [f64; 3] {
        [self.w.at(0, j), self.w.at(1, j), self.w.at(2, j)]
    }
}

/// An RGB tile with its hematoxylin and eosin renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct StainTriplet {
    pub rgb: RgbImage,
    pub h_channel: RgbImage,
    pub e_channel: RgbImage,
}

impl StainTriplet {
    pub fn new(rgb: RgbImage, h_channel: RgbImage, e_channel: RgbImage) -> Result<Self, StainError> {
        if rgb.dimensions() != h_channel.dimensions() || rgb.dimensions() != e_channel.dimensions() {
            return Err(StainError::Contract(format!(
                "triplet sizes differ: {:?} {:?} {:?}",
                rgb.dimensions(),
                h_channel.dimensions(),
                e_channel.dimensions()
            )));
        }
        Ok(Self {
            rgb,
            h_channel,
            e_channel,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnmfConfig {
    pub rank: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Pixels whose summed optical density is below this are left out of
    /// the fit (they are still encoded).
    pub background_od: f64,
    /// Amplitude of the uniform jitter added to the initial stain vectors.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for SnmfConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            lambda: 0.005,
            max_iters: 200,
            tol: 1e-6,
            background_od: 0.15,
            init_noise: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SnmfFit {
    pub model: StainModel,
    pub converged: bool,
    pub iterations: usize,
    /// Objective on the fitted (foreground) pixels: the initial value, then
    /// one entry per alternating iteration.
    pub objective_trace: Vec<f64>,
}

/// `V = ln(I0 / clamp(I, 1, I0))` for interleaved RGB intensities.
pub fn optical_density_from_intensities(
    width: u32,
    height: u32,
    rgb: &[f64],
    i0: f64,
) -> Result<OpticalDensity, StainError> {
    if i0 <= 0.0 {
        return Err(StainError::Contract("I0 must be positive".into()));
    }
    let n = (width * height) as usize;
    if rgb.len() != 3 * n {
        return Err(StainError::Contract(format!(
            "{} intensities for a {width}x{height} RGB tile",
            rgb.len()
        )));
    }
    let lo = 1.0_f64.min(i0);
    let mut v = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let i = rgb[3 * p + c].clamp(lo, i0);
            v[c * n + p] = (i0 / i).ln();
        }
    }
    Ok(OpticalDensity {
        v: Tensor::matrix(3, n, v).expect("3 x n buffer"),
        i0,
        width,
        height,
    })
}

pub fn to_optical_density(image: &RgbImage, i0: f64) -> Result<OpticalDensity, StainError> {
    let rgb: Vec<f64> = image.as_raw().iter().map(|&b| b as f64).collect();
    optical_density_from_intensities(image.width(), image.height(), &rgb, i0)
}

fn normalize(col: &mut [f64]) -> bool {
    let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= 0.0 || !n.is_finite() {
        return false;
    }
    col.iter_mut().for_each(|v| *v /= n);
    true
}

/// Column-major copy of `[m × r]` W as `r` column vectors.
fn columns(w: &Tensor) -> Vec<Vec<f64>> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| w.at(i, j)).collect())
        .collect()
}

fn from_columns(cols: &[Vec<f64>]) -> Tensor {
    let m = cols[0].len();
    let r = cols.len();
    let mut data = vec![0.0; m * r];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..m {
            data[i * r + j] = c[i];
        }
    }
    Tensor::matrix(m, r, data).expect("m x r buffer")
}

/// Non-negative lasso for one pixel by cyclic coordinate descent:
/// minimizes `½hᵀGh − bᵀh + λ·Σh` over `h ≥ 0`, starting from `h`.
fn nn_lasso_cd(gram: &[f64], b: &[f64], lambda: f64, h: &mut [f64], max_sweeps: usize) {
    let r = b.len();
    for _ in 0..max_sweeps {
        let mut delta: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..r {
            let gjj = gram[j * r + j];
            if gjj <= 0.0 {
                h[j] = 0.0;
                continue;
            }
            let mut s = b[j] - lambda;
            for k in 0..r {
                if k != j {
                    s -= gram[j * r + k] * h[k];
                }
            }
            let next = (s / gjj).max(0.0);
            delta = delta.max((next - h[j]).abs());
            scale = scale.max(next.abs());
            h[j] = next;
        }
        if delta <= 1e-14 * (1.0 + scale) {
            break;
        }
    }
}

const CD_SWEEPS: usize = 1000;

/// Columns of `v` selected by `pixels` (all when `None`) and encoded with
/// warm starts taken from `h`, written back in place.
fn encode_into(v: &Tensor, w: &Tensor, lambda: f64, h: &mut [f64], pixels: &[usize]) {
    let (m, r) = (w.rows(), w.cols());
    let n = v.cols();
    let cols = columns(w);
    let mut gram = vec![0.0; r * r];
    for a in 0..r {
        for b in 0..r {
            gram[a * r + b] = (0..m).map(|i| cols[a][i] * cols[b][i]).sum();
        }
    }
    let mut b = vec![0.0; r];
    let mut hp = vec![0.0; r];
    let np = pixels.len();
    for (q, &p) in pixels.iter().enumerate() {
        for j in 0..r {
            b[j] = (0..m).map(|i| cols[j][i] * v.data()[i * n + p]).sum();
            hp[j] = h[j * np + q];
        }
        nn_lasso_cd(&gram, &b, lambda, &mut hp, CD_SWEEPS);
        for j in 0..r {
            h[j * np + q] = hp[j];
        }
    }
}

/// Solves the H-subproblem for every pixel with `W` held fixed.
pub fn sparse_encode(od: &OpticalDensity, w: &Tensor, lambda: f64) -> Result<Tensor, StainError> {
    check_stain_matrix(w, od.channels())?;
    let n = od.pixels();
    let r = w.cols();
    let mut h = vec![0.0; r * n];
    let all: Vec<usize> = (0..n).collect();
    encode_into(&od.v, w, lambda, &mut h, &all);
    Ok(Tensor::matrix(r, n, h).expect("r x n buffer"))
}

fn check_stain_matrix(w: &Tensor, m: usize) -> Result<(), StainError> {
    if w.rank() != 2 || w.rows() != m || w.cols() == 0 {
        return Err(StainError::Contract(format!(
            "stain matrix {:?} for {m} channels",
            w.shape()
        )));
    }
    for j in 0..w.cols() {
        let norm: f64 = (0..m).map(|i| w.at(i, j).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 || (0..m).any(|i| w.at(i, j) < 0.0) {
            return Err(StainError::Contract(format!(
                "stain column {j} must be non-negative with unit norm"
            )));
        }
    }
    Ok(())
}

/// `½‖V_S − W·H‖² + λ·Σ|H|` over the selected pixel columns `S`.
fn objective(v: &Tensor, pixels: &[usize], w: &[Vec<f64>], h: &[f64], lambda: f64) -> f64 {
    let m = v.rows();
    let n = v.cols();
    let np = pixels.len();
    let _r = w.len();
    let mut fit = 0.0;
    for (q, &p) in pixels.iter().enumerate() {
        for i in 0..m {
            let pred: f64 = w.iter().enumerate().map(|(j, wj)| wj[i] * h[j * np + q]).sum();
            let d = v.data()[i * n + p] - pred;
            fit += d * d;
        }
    }
    0.5 * fit + lambda * h.iter().sum::<f64>()
}

/// Successive projection: picks `r` pixel columns that span the data cone.
fn spa_init(v: &Tensor, pixels: &[usize], r: usize) -> Vec<Vec<f64>> {
    let m = v.rows();
    let n = v.cols();
    let mut resid: Vec<Vec<f64>> = pixels
        .iter()
        .map(|&p| (0..m).map(|i| v.data()[i * n + p]).collect())
        .collect();
    let mut picked = Vec::with_capacity(r);
    for _ in 0..r {
        let (best, _) = resid
            .iter()
            .enumerate()
            .map(|(q, c)| (q, c.iter().map(|x| x * x).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let p = pixels[best];
        let mut col: Vec<f64> = (0..m).map(|i| v.data()[i * n + p].max(0.0)).collect();
        if !normalize(&mut col) {
            col = vec![1.0 / (m as f64).sqrt(); m];
        }
        let mut u = resid[best].clone();
        if normalize(&mut u) {
            for c in resid.iter_mut() {
                let d: f64 = c.iter().zip(&u).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(&u).for_each(|(a, b)| *a -= d * b);
            }
        }
        picked.push(col);
    }
    picked
}

/// Order columns hematoxylin-first: larger red/green absorbance ratio wins,
/// ties go to the lexicographically larger column.
fn canonical_order(cols: &[Vec<f64>]) -> Vec<usize> {
    let ratio = |c: &Vec<f64>| {
        if c.len() < 2 {
            return c[0];
        }
        if c[1] > 0.0 {
            c[0] / c[1]
        } else if c[0] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let mut order: Vec<usize> = (0..cols.len()).collect();
    order.sort_by(|&a, &b| {
        ratio(&cols[b])
            .partial_cmp(&ratio(&cols[a]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                cols[b]
                    .partial_cmp(&cols[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    order
}

const W_INNER_STEPS: usize = 10;
const MAX_BACKTRACKS: usize = 30;

/// One W-step: projected gradient on `½‖V − WH‖²` with columns clamped at
/// zero and renormalized, backtracking until the objective does not grow.
fn w_step(v: &Tensor, pixels: &[usize], w: &mut Vec<Vec<f64>>, h: &[f64], lambda: f64) {
    let m = v.rows();
    let n = v.cols();
    let r = w.len();
    let np = pixels.len();
    // HHᵀ and VHᵀ make the gradient independent of the pixel count.
    let mut hht = vec![0.0; r * r];
    for a in 0..r {
        for b in 0..r {
            hht[a * r + b] = (0..np).map(|q| h[a * np + q] * h[b * np + q]).sum();
        }
    }
    let mut vht = vec![vec![0.0; m]; r];
    for (j, row) in vht.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            *cell = pixels
                .iter()
                .enumerate()
                .map(|(q, &p)| v.data()[i * n + p] * h[j * np + q])
                .sum();
        }
    }
    let lipschitz = hht.iter().map(|x| x * x).sum::<f64>().sqrt();
    if lipschitz <= 0.0 {
        return;
    }
    let mut current = objective(v, pixels, w, h, lambda);
    for _ in 0..W_INNER_STEPS {
        let grad: Vec<Vec<f64>> = (0..r)
            .map(|j| {
                (0..m)
                    .map(|i| (0..r).map(|k| w[k][i] * hht[k * r + j]).sum::<f64>() - vht[j][i])
                    .collect()
            })
            .collect();
        let mut step = 1.0 / lipschitz;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<Vec<f64>> = (0..r)
                .map(|j| {
                    let mut c: Vec<f64> =
                        (0..m).map(|i| (w[j][i] - step * grad[j][i]).max(0.0)).collect();
                    if !normalize(&mut c) {
                        c = w[j].clone();
                    }
                    c
                })
                .collect();
            let f = objective(v, pixels, &cand, h, lambda);
            if f <= current {
                accepted = f < current;
                *w = cand;
                current = f;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
}

/// Fits a stain model to one tile.
pub fn snmf_fit(od: &OpticalDensity, cfg: &SnmfConfig) -> Result<SnmfFit, StainError> {
    let m = od.channels();
    let n = od.pixels();
    let r = cfg.rank;
    if r == 0 {
        return Err(StainError::Contract("rank must be at least 1".into()));
    }
    if cfg.lambda < 0.0 {
        return Err(StainError::Contract("lambda must be non-negative".into()));
    }
    if n < r {
        return Err(StainError::Contract(format!("{n} pixels for rank {r}")));
    }
    if od.v.data().iter().all(|x| *x == 0.0) {
        return Err(StainError::Degenerate("blank image (all-zero optical density)".into()));
    }
    let pixels: Vec<usize> = (0..n)
        .filter(|&p| (0..m).map(|i| od.v.data()[i * n + p]).sum::<f64>() >= cfg.background_od)
        .collect();
    if pixels.len() < r {
        return Err(StainError::Degenerate(format!(
            "only {} pixels above the background threshold {}",
            pixels.len(),
            cfg.background_od
        )));
    }

    let mut w = if r == 2 && m == 3 {
        let mut rng = rng::stream(cfg.seed, &[rng::tag::STAIN]);
        [HEMATOXYLIN_INIT, EOSIN_INIT]
            .iter()
            .map(|base| {
                let mut c: Vec<f64> = base
                    .iter()
                    .map(|x| (x + cfg.init_noise * rng.random_range(-1.0..=1.0)).max(0.0))
                    .collect();
                normalize(&mut c);
                c
            })
            .collect()
    } else {
        spa_init(&od.v, &pixels, r)
    };

    let np = pixels.len();
    let mut h = vec![0.0; r * np];
    encode_into(&od.v, &from_columns(&w), cfg.lambda, &mut h, &pixels);
    let mut trace = vec![objective(&od.v, &pixels, &w, &h, cfg.lambda)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let prev = *trace.last().expect("trace starts non-empty");
        w_step(&od.v, &pixels, &mut w, &h, cfg.lambda);
        let mut h_next = h.clone();
        encode_into(&od.v, &from_columns(&w), cfg.lambda, &mut h_next, &pixels);
        let before = objective(&od.v, &pixels, &w, &h, cfg.lambda);
        let after = objective(&od.v, &pixels, &w, &h_next, cfg.lambda);
        let f = if after <= before {
            h = h_next;
            after
        } else {
            before
        };
        trace.push(f);
        if prev - f <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let order = canonical_order(&w);
    let w: Vec<Vec<f64>> = order.iter().map(|&j| w[j].clone()).collect();
    let w = from_columns(&w);
    let h = sparse_encode(od, &w, cfg.lambda)?;
    Ok(SnmfFit {
        model: StainModel {
            w,
            h,
            lambda: cfg.lambda,
        },
        converged,
        iterations,
        objective_trace: trace,
    })
}

fn to_u8_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Renders `I0·exp(−H[j,:])` for the two stain rows as gray RGB images.
pub fn recover_stain_channels(
    model: &StainModel,
    width: u32,
    height: u32,
    i0: f64,
) -> Result<(RgbImage, RgbImage), StainError> {
    if model.h.rows() != 2 {
        return Err(StainError::Contract(format!(
            "stain channel recovery needs 2 stains, model has {}",
            model.h.rows()
        )));
    }
    let n = (width * height) as usize;
    if model.h.cols() != n {
        return Err(StainError::Contract(format!(
            "{} concentrations for {width}x{height} pixels",
            model.h.cols()
        )));
    }
    let render = |row: usize| {
        let hr = model.h.row(row);
        RgbImage::from_fn(width, height, |x, y| {
            let g = to_u8_half_up(i0 * (-hr[(y * width + x) as usize]).exp());
            Rgb([g, g, g])
        })
    };
    Ok((render(0), render(1)))
}

/// Fits a model to `image` and returns its triplet.
pub fn separate(image: &RgbImage, cfg: &SnmfConfig) -> Result<(StainTriplet, SnmfFit), StainError> {
    let od = to_optical_density(image, DEFAULT_I0)?;
    let fit = snmf_fit(&od, cfg)?;
    let (h, e) = recover_stain_channels(&fit.model, image.width(), image.height(), DEFAULT_I0)?;
    Ok((StainTriplet::new(image.clone(), h, e)?, fit))
}

/// Encodes `image` against a stain matrix fitted elsewhere (shared model).
pub fn separate_with(image: &RgbImage, w: &Tensor, lambda: f64) -> Result<StainTriplet, StainError> {
    let od = to_optical_density(image, DEFAULT_I0)?;
    let h = sparse_encode(&od, w, lambda)?;
    let model = StainModel {
        w: w.clone(),
        h,
        lambda,
    };
    let (hi, ei) = recover_stain_channels(&model, image.width(), image.height(), DEFAULT_I0)?;
    StainTriplet::new(image.clone(), hi, ei)
}

/// Per-image fits over a batch.
pub fn separate_batch(
    images: &[RgbImage],
    cfg: &SnmfConfig,
    exec: Exec,
) -> Vec<Result<(StainTriplet, SnmfFit), StainError>> {
    exec.map(images.len(), |i| separate(&images[i], cfg))
}

/// Angle in degrees between two vectors.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}
