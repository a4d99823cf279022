//! Procedural try-on samples with known warps.
//!
//! A T-shirt silhouette with a low-frequency texture is warped by a random
//! affine TPS θ* onto a stick-figure body. The person representation encodes
//! the body silhouette, the head and six keypoints that move with θ*, so the
//! warp is recoverable from the inputs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::image_io::{quantize_image, read_pgm, read_ppm, write_pgm, write_ppm};
use crate::harness::rng::CitRng;
use crate::kernel::ops::bilinear_sample;
use crate::kernel::Tensor;
use crate::tps::TpsBasis;

pub const PERSON_CHANNELS: usize = 8;
/// Largest control-point offset of a generated θ*.
pub const THETA_BOUND: f64 = 0.25;

/// Fixed so that `I_GT` is a function of `(p, c_t, c_tm)`.
pub const SKIN: [f64; 3] = [0.85, 0.65, 0.5];
pub const BACKGROUND: [f64; 3] = [0.7, 0.75, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub grid_k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 64,
            width: 48,
            grid_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[8 × h × w]`: blurred body, head, then neck, shoulders, hips and torso-centre heatmaps.
    pub person: Tensor,
    pub cloth: Tensor,
    pub cloth_mask: Tensor,
    /// `warp(cloth, grid(θ*))`.
    pub target_cloth: Tensor,
    /// Warped cloth mask binarized at 0.5.
    pub target_mask: Tensor,
    /// Warped cloth over the body inside `target_mask`.
    pub image: Tensor,
    pub theta: Tensor,
    pub seed: u64,
}

impl SamplePair {
    pub fn coverage(&self) -> f64 {
        self.target_mask.mean()
    }
}

/// Affine map `src = (sx·x + sh·y + tx, sy·y + ty)` from output to cloth coordinates.
#[derive(Clone, Copy, Debug)]
struct Affine {
    sx: f64,
    sy: f64,
    sh: f64,
    tx: f64,
    ty: f64,
}

impl Affine {
    fn draw(rng: &mut CitRng) -> Self {
        // |sx-1| + |sh| + |tx| <= 0.25 keeps every control offset within THETA_BOUND.
        Affine {
            sx: rng.uniform_in(0.88, 1.12),
            sy: rng.uniform_in(0.88, 1.12),
            sh: rng.uniform_in(-0.05, 0.05),
            tx: rng.uniform_in(-0.08, 0.08),
            ty: rng.uniform_in(-0.08, 0.08),
        }
    }

    fn offset(&self, x: f64, y: f64) -> [f64; 2] {
        [
            (self.sx - 1.0) * x + self.sh * y + self.tx,
            (self.sy - 1.0) * y + self.ty,
        ]
    }

    /// Output position that samples cloth point `(u, v)`.
    fn inverse(&self, u: f64, v: f64) -> [f64; 2] {
        let y = (v - self.ty) / self.sy;
        [(u - self.tx - self.sh * y) / self.sx, y]
    }
}

/// Garment outline in normalized cloth coordinates.
#[derive(Clone, Copy, Debug)]
struct Shirt {
    half_width: f64,
    top: f64,
    bottom: f64,
    sleeve_end: f64,
    sleeve_bottom: f64,
    neck: f64,
}

impl Shirt {
    fn draw(rng: &mut CitRng) -> Self {
        let top = rng.uniform_in(-0.6, -0.5);
        Shirt {
            half_width: rng.uniform_in(0.38, 0.48),
            top,
            bottom: rng.uniform_in(0.65, 0.8),
            sleeve_end: rng.uniform_in(0.7, 0.85),
            sleeve_bottom: top + rng.uniform_in(0.3, 0.4),
            neck: rng.uniform_in(0.12, 0.18),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let ax = x.abs();
        let body = ax <= self.half_width && y >= self.top && y <= self.bottom;
        let sleeve = ax > self.half_width
            && ax <= self.sleeve_end
            && y >= self.top + 0.3 * (ax - self.half_width)
            && y <= self.sleeve_bottom;
        let neck = x * x + (y - self.top) * (y - self.top) < self.neck * self.neck;
        (body || sleeve) && !neck
    }

    /// Neck, shoulders, hips and torso centre.
    fn keypoints(&self) -> [[f64; 2]; 6] {
        let (w, t, b) = (self.half_width, self.top, self.bottom);
        [[0.0, t], [-w, t], [w, t], [-w, b], [w, b], [0.0, 0.5 * (t + b)]]
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Stripes { freq: f64, angle: f64, phase: f64 },
    Checker { freq: f64, phase: f64 },
    Blobs { centers: [[f64; 3]; 3] },
}

impl Pattern {
    fn draw(rng: &mut CitRng) -> Self {
        match rng.below(3) {
            0 => Pattern::Stripes {
                freq: rng.uniform_in(0.8, 1.6),
                angle: rng.uniform_in(0.0, std::f64::consts::PI),
                phase: rng.uniform_in(0.0, std::f64::consts::TAU),
            },
            1 => Pattern::Checker {
                freq: rng.uniform_in(1.0, 2.0),
                phase: rng.uniform_in(0.0, std::f64::consts::TAU),
            },
            _ => {
                let mut centers = [[0.0; 3]; 3];
                for c in &mut centers {
                    *c = [rng.uniform_in(-0.6, 0.6), rng.uniform_in(-0.6, 0.6), rng.uniform_in(0.25, 0.45)];
                }
                Pattern::Blobs { centers }
            }
        }
    }

    /// Mixing weight in `[0, 1]`.
    fn weight(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::{PI, TAU};
        match *self {
            Pattern::Stripes { freq, angle, phase } => {
                0.5 + 0.5 * (TAU * freq * (x * angle.cos() + y * angle.sin()) + phase).sin()
            }
            Pattern::Checker { freq, phase } => 0.5 + 0.5 * (PI * freq * x + phase).sin() * (PI * freq * y).sin(),
            Pattern::Blobs { centers } => {
                let s: f64 = centers
                    .iter()
                    .map(|[cx, cy, r]| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                s.min(1.0)
            }
        }
    }
}

fn coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

fn channel_image(c: usize, h: usize, w: usize, f: impl Fn(usize, f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(&[c, h, w], |i| f(i[0], coord(i[2], w), coord(i[1], h)))
}

/// `(2r+1)²` box mean with clamped borders.
fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += plane[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// 3×3 binary dilation.
fn dilate(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| plane[yy * w + xx] > 0.5));
            out[y * w + x] = hit as u8 as f64;
        }
    }
    out
}

fn to_f32(t: Tensor) -> Tensor {
    let mut t = t;
    t.round_to_f32();
    t
}

/// Deterministic sample factory for one canvas geometry.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: DataConfig,
    basis: TpsBasis,
}

impl Generator {
    pub fn new(config: DataConfig) -> Result<Self> {
        if config.height < 2 || config.width < 2 {
            return Err(Error::Invalid(format!("canvas too small: {config:?}")));
        }
        let basis = TpsBasis::new(config.grid_k, config.height, config.width)?;
        Ok(Generator { config, basis })
    }

    pub fn basis(&self) -> &TpsBasis {
        &self.basis
    }

    pub fn sample(&self, seed: u64) -> Result<SamplePair> {
        let (h, w, k) = (self.config.height, self.config.width, self.config.grid_k);
        let mut rng = CitRng::new(seed);
        let shirt = Shirt::draw(&mut rng);
        let pattern = Pattern::draw(&mut rng);
        let base: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(0.15, 0.85));
        let accent: [f64; 3] = std::array::from_fn(|c| (base[c] + rng.uniform_in(-0.5, 0.5)).clamp(0.05, 0.95));
        let affine = Affine::draw(&mut rng);

        let cloth_mask = channel_image(1, h, w, |_, x, y| shirt.contains(x, y) as u8 as f64);
        let cloth = quantize_image(&channel_image(3, h, w, |c, x, y| {
            if shirt.contains(x, y) {
                let s = pattern.weight(x, y);
                base[c] * (1.0 - s) + accent[c] * s
            } else {
                1.0
            }
        }));

        let lattice = crate::tps::lattice(k)?;
        let n = k * k;
        let theta = to_f32(Tensor::from_fn(&[2 * n], |i| {
            let [x, y] = lattice[i[0] % n];
            affine.offset(x, y)[i[0] / n]
        }));
        let grid = self.basis.grid(&theta)?;
        let target_cloth = bilinear_sample(&cloth, &grid)?;
        let target_mask = bilinear_sample(&cloth_mask, &grid)?.map(|v| (v >= 0.5) as u8 as f64);

        let keypoints = shirt.keypoints().map(|[u, v]| affine.inverse(u, v));
        let neck = keypoints[0];
        let head_c = [neck[0], neck[1] - 0.25];
        let in_head = |x: f64, y: f64| ((x - head_c[0]) / 0.16).powi(2) + ((y - head_c[1]) / 0.2).powi(2) <= 1.0;
        let in_neck = |x: f64, y: f64| (x - neck[0]).abs() < 0.08 && y >= head_c[1] && y <= neck[1] + 0.05;
        let head = channel_image(1, h, w, |_, x, y| in_head(x, y) as u8 as f64);
        let torso = dilate(target_mask.data(), h, w);
        let body: Vec<f64> = channel_image(1, h, w, |_, x, y| (in_head(x, y) || in_neck(x, y)) as u8 as f64)
            .data()
            .iter()
            .zip(&torso)
            .map(|(a, b)| a.max(*b))
            .collect();

        let sigma2 = 2.0 * 0.08 * 0.08;
        let heatmaps = channel_image(keypoints.len(), h, w, |c, x, y| {
            let [kx, ky] = keypoints[c];
            (-((x - kx).powi(2) + (y - ky).powi(2)) / sigma2).exp()
        });
        let mut planes = box_blur(&body, h, w, 2);
        planes.extend_from_slice(head.data());
        planes.extend_from_slice(heatmaps.data());
        let person = to_f32(Tensor::new(&[PERSON_CHANNELS, h, w], planes)?);

        let plane = h * w;
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let p = i[1] * w + i[2];
            let m = target_mask.data()[p];
            let under = if body[p] > 0.5 { SKIN[i[0]] } else { BACKGROUND[i[0]] };
            m * target_cloth.data()[i[0] * plane + p] + (1.0 - m) * under
        });

        Ok(SamplePair {
            person,
            cloth,
            cloth_mask,
            target_cloth,
            target_mask,
            image,
            theta,
            seed,
        })
    }
}

pub fn gen_sample(seed: u64, config: DataConfig) -> Result<SamplePair> {
    Generator::new(config)?.sample(seed)
}

/// Per-sample seeds of a dataset drawn from one run seed.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = CitRng::new(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// `count` samples in seed order; generation runs in parallel, output order is fixed.
pub fn gen_dataset(seed: u64, count: usize, config: DataConfig) -> Result<Vec<SamplePair>> {
    let generator = Generator::new(config)?;
    sample_seeds(seed, count)
        .into_par_iter()
        .map(|s| generator.sample(s))
        .collect()
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:06}"))
}

pub fn write_sample(dir: &Path, s: &SamplePair) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    s.person.save(&dir.join("p.citt"))?;
    write_ppm(&dir.join("c.ppm"), &s.cloth)?;
    write_pgm(&dir.join("cm.pgm"), &s.cloth_mask)?;
    write_ppm(&dir.join("ct.ppm"), &s.target_cloth)?;
    write_pgm(&dir.join("ctm.pgm"), &s.target_mask)?;
    write_ppm(&dir.join("gt.ppm"), &s.image)?;
    s.theta.save(&dir.join("theta.citt"))?;
    let seed = dir.join("seed.txt");
    std::fs::write(&seed, format!("{}\n", s.seed)).map_err(|e| Error::io(seed, e))
}

/// Reads a sample back; the three warped images carry 8-bit quantization.
pub fn read_sample(dir: &Path) -> Result<SamplePair> {
    let seed_path = dir.join("seed.txt");
    let seed_text = std::fs::read_to_string(&seed_path).map_err(|e| Error::io(&seed_path, e))?;
    let seed = seed_text
        .trim()
        .parse()
        .map_err(|_| Error::Corrupt(format!("{}: bad seed", seed_path.display())))?;
    Ok(SamplePair {
        person: Tensor::load(&dir.join("p.citt"))?,
        cloth: read_ppm(&dir.join("c.ppm"))?,
        cloth_mask: read_pgm(&dir.join("cm.pgm"))?,
        target_cloth: read_ppm(&dir.join("ct.ppm"))?,
        target_mask: read_pgm(&dir.join("ctm.pgm"))?,
        image: read_ppm(&dir.join("gt.ppm"))?,
        theta: Tensor::load(&dir.join("theta.citt"))?,
        seed,
    })
}

pub fn write_dataset(root: &Path, samples: &[SamplePair]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    samples
        .par_iter()
        .enumerate()
        .try_for_each(|(i, s)| write_sample(&sample_dir(root, i), s))
}

/// Every `sample_*` directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no sample_* directories in {}", root.display())));
    }
    dirs.par_iter().map(|d| read_sample(d)).collect()
}
