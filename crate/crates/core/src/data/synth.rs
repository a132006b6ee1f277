//! Synthetic H&E-like tiles with a known stain matrix.
//!
//! Each tile is built in concentration space: a smooth eosin wash, a faint
//! hematoxylin wash and a set of hematoxylin disks ("nuclei"). The RGB image
//! is `I0·exp(−W*·H*)` plus Gaussian noise, and the H/E images are rendered
//! straight from the rows of `H*`, so every tile carries its own ground truth
//! for stain separation and for classification.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Item, Split};
use crate::exec::Exec;
use crate::rng;
use crate::stain::StainTriplet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub name: String,
    /// Nuclei per 1000 pixels, drawn uniformly per tile.
    pub nuclei_density: (f64, f64),
    pub nucleus_radius: (f64, f64),
    /// Hematoxylin concentration inside a nucleus.
    pub nucleus_h: (f64, f64),
    /// Mean eosin concentration of the background wash.
    pub eosin_bg: (f64, f64),
    /// Hematoxylin concentration of the background wash.
    pub hema_bg: (f64, f64),
}

impl ClassParams {
    /// The four built-in tissue-like classes.
    pub fn presets() -> Vec<ClassParams> {
        vec![
            ClassParams {
                name: "dense_small_nuclei".into(),
                nuclei_density: (14.0, 20.0),
                nucleus_radius: (1.2, 2.0),
                nucleus_h: (1.0, 1.4),
                eosin_bg: (0.45, 0.6),
                hema_bg: (0.0, 0.02),
            },
            ClassParams {
                name: "sparse_large_nuclei".into(),
                nuclei_density: (2.0, 4.0),
                nucleus_radius: (3.5, 5.0),
                nucleus_h: (0.7, 1.0),
                eosin_bg: (0.75, 0.9),
                hema_bg: (0.0, 0.02),
            },
            ClassParams {
                name: "stroma".into(),
                nuclei_density: (1.0, 2.0),
                nucleus_radius: (1.2, 2.0),
                nucleus_h: (0.8, 1.1),
                eosin_bg: (1.0, 1.3),
                hema_bg: (0.0, 0.02),
            },
            ClassParams {
                name: "mucus".into(),
                nuclei_density: (0.5, 1.5),
                nucleus_radius: (1.5, 3.0),
                nucleus_h: (0.5, 0.7),
                eosin_bg: (0.28, 0.36),
                hema_bg: (0.0, 0.03),
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassParams>,
    pub image_size: u32,
    /// Total number of tiles; labels cycle through the classes.
    pub count: usize,
    /// Ground-truth hematoxylin and eosin color vectors (unit norm).
    pub stain_h: [f64; 3],
    pub stain_e: [f64; 3],
    /// Standard deviation of the additive intensity noise (8-bit units).
    pub noise_std: f64,
    pub i0: f64,
    pub seed: u64,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: ClassParams::presets(),
            image_size: 32,
            count: 400,
            stain_h: unit([0.58, 0.74, 0.34]),
            stain_e: unit([0.14, 0.95, 0.28]),
            noise_std: 2.0,
            i0: 255.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Keeps the first `k` preset classes.
    pub fn with_classes(mut self, k: usize) -> Result<Self, DataError> {
        if k == 0 || k > self.classes.len() {
            return Err(DataError::Spec(format!(
                "{k} classes requested, {} available",
                self.classes.len()
            )));
        }
        self.classes.truncate(k);
        Ok(self)
    }

    /// `W*` as a `[3 × 2]` tensor.
    pub fn stain_matrix(&self) -> Tensor {
        let (h, e) = (self.stain_h, self.stain_e);
        Tensor::matrix(3, 2, vec![h[0], e[0], h[1], e[1], h[2], e[2]]).expect("3x2")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(DataError::Spec("no classes".into()));
        }
        if self.image_size == 0 {
            return Err(DataError::Spec("image_size must be positive".into()));
        }
        for v in [self.stain_h, self.stain_e] {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 || v.iter().any(|x| *x < 0.0) {
                return Err(DataError::Spec(format!(
                    "stain vector {v:?} must be non-negative with unit norm"
                )));
            }
        }
        for c in &self.classes {
            let ranges = [
                c.nuclei_density,
                c.nucleus_radius,
                c.nucleus_h,
                c.eosin_bg,
                c.hema_bg,
            ];
            if ranges.iter().any(|(lo, hi)| *lo < 0.0 || hi < lo) {
                return Err(DataError::Spec(format!("bad ranges for class {}", c.name)));
            }
        }
        if self.noise_std < 0.0 || self.i0 <= 0.0 {
            return Err(DataError::Spec("noise_std >= 0 and i0 > 0 required".into()));
        }
        Ok(())
    }
}

/// One tile's concentration maps, before rendering.
#[derive(Clone, Debug)]
pub struct Concentrations {
    /// `[2 × n]`: hematoxylin row, eosin row.
    pub h: Tensor,
    pub nuclei: usize,
}

/// Fraction of the eosin wash left inside a nucleus.
const NUCLEUS_EOSIN: f64 = 0.05;

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn concentrations(spec: &SynthSpec, label: usize, index: usize) -> Concentrations {
    let class = &spec.classes[label];
    let size = spec.image_size as usize;
    let n = size * size;
    let mut rng = rng::stream(spec.seed, &[rng::tag::SYNTH, index as u64]);

    let e_base = draw(&mut rng, class.eosin_bg);
    let h_base = draw(&mut rng, class.hema_bg);
    let freq_x = rng.random_range(0.5..2.0) / size as f64;
    let freq_y = rng.random_range(0.5..2.0) / size as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut hema = vec![h_base; n];
    let mut eos = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let wave = (std::f64::consts::TAU * (freq_x * x as f64 + freq_y * y as f64) + phase).sin();
            eos[y * size + x] = e_base * (1.0 + 0.25 * wave);
        }
    }

    let density = draw(&mut rng, class.nuclei_density);
    let nuclei = (density * n as f64 / 1000.0).round() as usize;
    for _ in 0..nuclei {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let radius = draw(&mut rng, class.nucleus_radius);
        let conc = draw(&mut rng, class.nucleus_h);
        let r2 = radius * radius;
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    // nuclei displace the eosin-stained matrix
                    let p = y * size + x;
                    hema[p] = hema[p].max(conc);
                    eos[p] *= NUCLEUS_EOSIN;
                }
            }
        }
    }
    hema.extend_from_slice(&eos);
    Concentrations {
        h: Tensor::matrix(2, n, hema).expect("2 x n"),
        nuclei,
    }
}

fn to_u8(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Renders the RGB tile and the two ground-truth stain images.
pub fn render(spec: &SynthSpec, conc: &Concentrations, index: usize) -> StainTriplet {
    let size = spec.image_size;
    let n = (size * size) as usize;
    let w = [spec.stain_h, spec.stain_e];
    let mut rng = rng::stream(spec.seed, &[rng::tag::SYNTH, index as u64, 1]);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let h = conc.h.data();
    let mut raw = Vec::with_capacity(3 * n);
    for p in 0..n {
        for (wh, we) in w[0].iter().zip(&w[1]) {
            let od = wh * h[p] + we * h[n + p];
            let mut i = spec.i0 * (-od).exp();
            if spec.noise_std > 0.0 {
                i += noise.sample(&mut rng);
            }
            raw.push(to_u8(i.clamp(0.0, 255.0)));
        }
    }
    let rgb = RgbImage::from_raw(size, size, raw).expect("buffer size");
    let gray = |row: usize| {
        RgbImage::from_fn(size, size, |x, y| {
            let g = to_u8(spec.i0 * (-h[row * n + (y * size + x) as usize]).exp());
            Rgb([g, g, g])
        })
    };
    StainTriplet {
        rgb,
        h_channel: gray(0),
        e_channel: gray(1),
    }
}

/// Generates `spec.count` tiles; item `i` has label `i % num_classes`.
pub fn synth_generate(spec: &SynthSpec, exec: Exec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let k = spec.num_classes();
    let items = exec.map(spec.count, |i| {
        let label = i % k;
        let conc = concentrations(spec, label, i);
        Item {
            id: format!("{i:06}"),
            triplet: render(spec, &conc, i),
            label,
            nuclei: Some(conc.nuclei),
        }
    });
    Ok(Dataset {
        items,
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        split: Split::All,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_tissue_is_constant() {
        let mut spec = SynthSpec {
            noise_std: 0.0,
            count: 1,
            ..SynthSpec::default()
        };
        let c = &mut spec.classes[0];
        c.nuclei_density = (0.0, 0.0);
        c.eosin_bg = (0.0, 0.0);
        c.hema_bg = (0.2, 0.2);
        let ds = synth_generate(&spec, Exec::Sequential).unwrap();
        let rgb = &ds.items[0].triplet.rgb;
        let first = *rgb.get_pixel(0, 0);
        assert!(rgb.pixels().all(|p| *p == first));
        for c in 0..3 {
            let want = to_u8(255.0 * (-(spec.stain_h[c] * 0.2)).exp());
            assert_eq!(first.0[c], want);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            count: 12,
            seed: 3,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec, Exec::Sequential).unwrap();
        let b = synth_generate(&spec, Exec::Parallel).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.items[5].label, 1);
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SynthSpec {
            stain_h: [1.0, 1.0, 0.0],
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(SynthSpec::default().with_classes(9).is_err());
    }
}
