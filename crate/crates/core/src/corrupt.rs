//! Fifteen image corruptions at five severities, plus the Average Shift
//! instrument (mean absolute per-pixel change).
//!
//! Images are `[C, H, W]` tensors with values in `[0,1]`; every operator
//! clamps its output back into that range. Severity 0 is the identity.
//! Convolutions use symmetric (reflect) padding.

use rand_distr::{Distribution, Poisson};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    ZoomBlur,
    Fog,
    Frost,
    Snow,
    ElasticTransform,
    Contrast,
    Brightness,
    JpegCompression,
    Pixelate,
    GlassBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Fog,
        CorruptionKind::Frost,
        CorruptionKind::Snow,
        CorruptionKind::ElasticTransform,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::JpegCompression,
        CorruptionKind::Pixelate,
        CorruptionKind::GlassBlur,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Snow => "snow",
            CorruptionKind::ElasticTransform => "elastic_transform",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::JpegCompression => "jpeg_compression",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::GlassBlur => "glass_blur",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Kinds that draw from the supplied rng.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise
                | CorruptionKind::ShotNoise
                | CorruptionKind::ImpulseNoise
                | CorruptionKind::GlassBlur
                | CorruptionKind::ElasticTransform
                | CorruptionKind::Snow
                | CorruptionKind::Frost
        )
    }

    /// Whether a larger table parameter means a stronger distortion.
    pub fn param_increases_distortion(self) -> bool {
        !matches!(
            self,
            CorruptionKind::ShotNoise | CorruptionKind::Contrast | CorruptionKind::JpegCompression
        )
    }
}

/// Severity `0..=5`; 0 is the clean image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Severity(u8);

impl Severity {
    pub const MAX: u8 = 5;
    pub const CLEAN: Severity = Severity(0);

    pub fn new(t: u8) -> Result<Self> {
        if t > Self::MAX {
            return Err(Error::invalid(format!("unknown severity {t}, expected 0..=5")));
        }
        Ok(Severity(t))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// The five scored levels.
    pub fn scored() -> impl Iterator<Item = Severity> {
        (1..=Self::MAX).map(Severity)
    }
}

/// Main operator parameter per kind and severity 1..=5.
#[derive(Debug, Clone, PartialEq)]
pub struct SeverityTable {
    params: [[f64; 5]; 15],
}

impl Default for SeverityTable {
    fn default() -> Self {
        use CorruptionKind::*;
        let mut params = [[0.0; 5]; 15];
        let mut set = |k: CorruptionKind, v: [f64; 5]| params[k.index()] = v;
        // noise std
        set(GaussianNoise, [0.06, 0.11, 0.17, 0.23, 0.29]);
        // photon count scale (smaller = noisier)
        set(ShotNoise, [60.0, 25.0, 12.0, 6.0, 3.5]);
        // salt-and-pepper probability
        set(ImpulseNoise, [0.03, 0.07, 0.12, 0.18, 0.27]);
        // disk radius, px
        set(DefocusBlur, [1.0, 1.5, 2.0, 2.5, 3.0]);
        // diagonal line length, px
        set(MotionBlur, [3.0, 5.0, 7.0, 9.0, 11.0]);
        // largest zoom factor
        set(ZoomBlur, [1.06, 1.12, 1.18, 1.24, 1.30]);
        // plasma weight
        set(Fog, [0.3, 0.5, 0.75, 1.0, 1.3]);
        // frost blend weight
        set(Frost, [0.15, 0.25, 0.35, 0.45, 0.55]);
        // streak density per pixel
        set(Snow, [0.01, 0.02, 0.03, 0.045, 0.06]);
        // displacement amplitude, px
        set(ElasticTransform, [0.5, 1.0, 1.5, 2.0, 2.5]);
        // contrast factor (smaller = flatter)
        set(Contrast, [0.75, 0.6, 0.45, 0.3, 0.15]);
        // additive offset
        set(Brightness, [0.05, 0.1, 0.15, 0.2, 0.25]);
        // JPEG quality (smaller = coarser)
        set(JpegCompression, [80.0, 65.0, 50.0, 35.0, 20.0]);
        // block size, px
        set(Pixelate, [2.0, 3.0, 4.0, 5.0, 6.0]);
        // swap rounds (blur sigma follows)
        set(GlassBlur, [1.0, 2.0, 3.0, 4.0, 5.0]);
        SeverityTable { params }
    }
}

impl SeverityTable {
    /// Parameter at severity `t` (1..=5).
    pub fn get(&self, kind: CorruptionKind, t: Severity) -> f64 {
        assert!(t.0 >= 1, "severity 0 has no parameter");
        self.params[kind.index()][t.0 as usize - 1]
    }

    pub fn row(&self, kind: CorruptionKind) -> [f64; 5] {
        self.params[kind.index()]
    }

    pub fn set_row(&mut self, kind: CorruptionKind, row: [f64; 5]) {
        self.params[kind.index()] = row;
    }

    /// Every row strictly monotone in the distortion-increasing direction.
    pub fn is_monotone(&self) -> bool {
        CorruptionKind::ALL.iter().all(|&k| {
            let r = self.row(k);
            r.windows(2).all(|w| {
                if k.param_increases_distortion() {
                    w[1] > w[0]
                } else {
                    w[1] < w[0]
                }
            })
        })
    }
}

/// Corrupt one `[C,H,W]` image with the default table.
pub fn apply(kind: CorruptionKind, t: Severity, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    apply_with(&SeverityTable::default(), kind, t, x, rng)
}

pub fn apply_with(
    table: &SeverityTable,
    kind: CorruptionKind,
    t: Severity,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let [c, h, w] = match *x.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::invalid(format!(
                "expected a [C,H,W] image, got {:?}",
                x.shape()
            )))
        }
    };
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
    }
    if t == Severity::CLEAN {
        return Ok(x.clone());
    }
    let p = table.get(kind, t);
    let img = Image {
        c,
        h,
        w,
        data: x.data().to_vec(),
    };
    let out = match kind {
        CorruptionKind::GaussianNoise => gaussian_noise(img, p, rng),
        CorruptionKind::ShotNoise => shot_noise(img, p, rng),
        CorruptionKind::ImpulseNoise => impulse_noise(img, p, rng),
        CorruptionKind::DefocusBlur => defocus_blur(img, p),
        CorruptionKind::MotionBlur => motion_blur(img, p),
        CorruptionKind::ZoomBlur => zoom_blur(img, p),
        CorruptionKind::Fog => fog(img, p),
        CorruptionKind::Frost => frost(img, p, rng),
        CorruptionKind::Snow => snow(img, p, rng),
        CorruptionKind::ElasticTransform => elastic(img, p, rng),
        CorruptionKind::Contrast => contrast(img, p),
        CorruptionKind::Brightness => img.map(|v| v + p),
        CorruptionKind::JpegCompression => jpeg(img, p),
        CorruptionKind::Pixelate => pixelate(img, p as usize),
        CorruptionKind::GlassBlur => glass_blur(img, p as usize, rng),
    };
    let data = out.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape(), data)
}

/// Mean absolute per-pixel difference `‖x − x'‖₁ / (c·h·w)`.
pub fn average_shift(x: &Tensor, x_corr: &Tensor) -> Result<f64> {
    if x.shape() != x_corr.shape() {
        return Err(Error::shape(x.shape(), x_corr.shape()));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_corr.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / x.len() as f64)
}

/// Mean Average Shift over a corpus at severities 1..=5. Image `i` at
/// severity `t` uses the child rng `rng.derive_path([t, i])`.
pub fn shift_profile(kind: CorruptionKind, corpus: &LabeledDataset, rng: &Rng) -> Result<[f64; 5]> {
    shift_profile_with(&SeverityTable::default(), kind, corpus, rng)
}

pub fn shift_profile_with(
    table: &SeverityTable,
    kind: CorruptionKind,
    corpus: &LabeledDataset,
    rng: &Rng,
) -> Result<[f64; 5]> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut out = [0.0; 5];
    for t in Severity::scored() {
        let mut total = 0.0;
        for i in 0..corpus.len() {
            let x = corpus.image(i);
            let mut r = rng.derive_path(&[t.get() as u64, i as u64]);
            total += average_shift(&x, &apply_with(table, kind, t, &x, &mut r)?)?;
        }
        out[t.get() as usize - 1] = total / corpus.len() as f64;
    }
    Ok(out)
}

/// Corrupt every image of a batch tensor `[N,C,H,W]`; image `i` uses
/// `rng.derive(i)`.
pub fn apply_batch(kind: CorruptionKind, t: Severity, batch: &Tensor, rng: &Rng) -> Result<Tensor> {
    let n = batch.shape()[0];
    let mut out = batch.clone();
    for i in 0..n {
        let img = batch.index(i);
        let c = apply(kind, t, &img, &mut rng.derive(i as u64))?;
        out.item_mut(i).copy_from_slice(c.data());
    }
    Ok(out)
}

/// Working image buffer, `[c][h][w]` row-major.
#[derive(Clone)]
struct Image {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    fn map(mut self, f: impl Fn(f64) -> f64) -> Image {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    fn map_planes(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
        let data = (0..self.c).flat_map(|ch| f(self.plane(ch))).collect();
        Image { data, ..*self }
    }
}

/// Symmetric reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// 2-D correlation with a centered odd-sized kernel and reflect padding.
fn convolve(plane: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..kh {
                let sy = reflect(y as isize + ky as isize - ry, h);
                for kx in 0..kw {
                    let k = kernel[ky * kw + kx];
                    if k != 0.0 {
                        let sx = reflect(x as isize + kx as isize - rx, w);
                        acc += k * plane[sy * w + sx];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel_1d(sigma);
    let horiz = convolve(plane, h, w, &k, 1, k.len());
    convolve(&horiz, h, w, &k, k.len(), 1)
}

/// Bilinear sample with edge clamping.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn gaussian_noise(img: Image, sigma: f64, rng: &mut Rng) -> Image {
    img.map_noise(|v, r| v + sigma * r.normal(), rng)
}

impl Image {
    fn map_noise(mut self, f: impl Fn(f64, &mut Rng) -> f64, rng: &mut Rng) -> Image {
        for v in &mut self.data {
            *v = f(*v, rng);
        }
        self
    }
}

fn shot_noise(img: Image, lambda: f64, rng: &mut Rng) -> Image {
    img.map_noise(
        |v, r| {
            let mean = v * lambda;
            if mean <= 0.0 {
                0.0
            } else {
                Poisson::new(mean).expect("positive mean").sample(r) / lambda
            }
        },
        rng,
    )
}

fn impulse_noise(img: Image, p: f64, rng: &mut Rng) -> Image {
    img.map_noise(
        |v, r| {
            if r.uniform() < p {
                if r.uniform() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            } else {
                v
            }
        },
        rng,
    )
}

fn defocus_blur(img: Image, radius: f64) -> Image {
    let r = radius.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k: Vec<f64> = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            k.push(if d2 <= radius * radius { 1.0 } else { 0.0 });
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (img.h, img.w);
    img.map_planes(|p| convolve(p, h, w, &k, size, size))
}

fn motion_blur(img: Image, length: f64) -> Image {
    let n = length as usize;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0 / n as f64;
    }
    let (h, w) = (img.h, img.w);
    img.map_planes(|p| convolve(p, h, w, &k, n, n))
}

fn zoom_blur(img: Image, max_zoom: f64) -> Image {
    let steps = ((max_zoom - 1.0) / 0.02).round().max(1.0) as usize;
    let factors: Vec<f64> = (0..=steps)
        .map(|i| 1.0 + (max_zoom - 1.0) * i as f64 / steps as f64)
        .collect();
    let (h, w) = (img.h, img.w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    img.map_planes(|p| {
        let mut acc = vec![0.0; h * w];
        for &f in &factors {
            for y in 0..h {
                for x in 0..w {
                    let sy = cy + (y as f64 - cy) / f;
                    let sx = cx + (x as f64 - cx) / f;
                    acc[y * w + x] += bilinear(p, h, w, sy, sx);
                }
            }
        }
        acc.into_iter().map(|v| v / factors.len() as f64).collect()
    })
}

/// Diamond-square plasma on a `(2^k+1)²` grid, normalised to `[0,1]`.
fn plasma(size_at_least: usize, roughness: f64, rng: &mut Rng) -> (Vec<f64>, usize) {
    let mut n = 1;
    while n + 1 < size_at_least {
        n *= 2;
    }
    let side = n + 1;
    let mut g = vec![0.0; side * side];
    let mut step = n;
    let mut scale = 1.0;
    while step > 1 {
        let half = step / 2;
        // diamond
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let avg = (g[(y - half) * side + x - half]
                    + g[(y - half) * side + x + half]
                    + g[(y + half) * side + x - half]
                    + g[(y + half) * side + x + half])
                    / 4.0;
                g[y * side + x] = avg + scale * rng.uniform_range(-1.0, 1.0);
            }
        }
        // square
        for y in (0..=n).step_by(half) {
            let start = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (start..=n).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let yy = y as isize + dy * half as isize;
                    let xx = x as isize + dx * half as isize;
                    if (0..=n as isize).contains(&yy) && (0..=n as isize).contains(&xx) {
                        sum += g[yy as usize * side + xx as usize];
                        cnt += 1.0;
                    }
                }
                g[y * side + x] = sum / cnt + scale * rng.uniform_range(-1.0, 1.0);
            }
        }
        step = half;
        scale *= roughness;
    }
    let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    (g.into_iter().map(|v| (v - lo) / span).collect(), side)
}

/// Seed of the fixed fog field; fog depends only on the image and severity.
const FOG_FIELD_SEED: u64 = 0xF06;

fn fog(img: Image, weight: f64) -> Image {
    let (h, w) = (img.h, img.w);
    let (field, side) = plasma(h.max(w), 0.55, &mut Rng::new(FOG_FIELD_SEED));
    let max = img.data.iter().cloned().fold(0.0, f64::max);
    let denom = max + weight;
    let mut out = img.clone();
    for ch in 0..img.c {
        for y in 0..h {
            for x in 0..w {
                let i = ch * h * w + y * w + x;
                out.data[i] = (img.data[i] + weight * field[y * side + x]) * max / denom;
            }
        }
    }
    out
}

/// Band-pass noise (difference of Gaussians) sharpened into bright
/// crystalline streaks, blended into the image.
fn frost(img: Image, weight: f64, rng: &mut Rng) -> Image {
    let (h, w) = (img.h, img.w);
    let scale = h.min(w) as f64 / 32.0;
    let white: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
    let fine = gaussian_blur(&white, h, w, 0.6 * scale);
    let coarse = gaussian_blur(&white, h, w, 1.8 * scale);
    let band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let lo = band.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = band.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let ice: Vec<f64> = band
        .iter()
        .map(|v| 0.55 + 0.45 * ((v - lo) / span).powf(0.7))
        .collect();
    let mut out = img.clone();
    for ch in 0..img.c {
        for k in 0..h * w {
            let i = ch * h * w + k;
            out.data[i] = (1.0 - weight) * img.data[i] + weight * ice[k];
        }
    }
    out
}

fn snow(img: Image, density: f64, rng: &mut Rng) -> Image {
    let (c, h, w) = (img.c, img.h, img.w);
    // desaturate toward a bright gray
    let desat = (3.0 * density).min(1.0);
    let mut out = img.clone();
    for k in 0..h * w {
        let gray = (0..c).map(|ch| img.data[ch * h * w + k]).sum::<f64>() / c as f64;
        let lifted = gray * 1.5 + 0.5;
        for ch in 0..c {
            let i = ch * h * w + k;
            out.data[i] = (1.0 - desat) * img.data[i] + desat * img.data[i].max(lifted);
        }
    }
    // streaks falling down-left
    let flakes = (density * (h * w) as f64).round() as usize;
    let mut layer = vec![0.0f64; h * w];
    for _ in 0..flakes {
        let mut y = rng.uniform_range(0.0, h as f64);
        let mut x = rng.uniform_range(0.0, w as f64);
        let len = 2 + rng.below(4);
        let bright = rng.uniform_range(0.75, 1.0);
        for _ in 0..len {
            let (yi, xi) = (y as usize, x as usize);
            if yi < h && xi < w {
                layer[yi * w + xi] = layer[yi * w + xi].max(bright);
            }
            y += 1.0;
            x -= 0.5;
            if x < 0.0 {
                break;
            }
        }
    }
    for ch in 0..c {
        for k in 0..h * w {
            let i = ch * h * w + k;
            out.data[i] = out.data[i].max(layer[k]);
        }
    }
    out
}

fn elastic(img: Image, amplitude: f64, rng: &mut Rng) -> Image {
    let (h, w) = (img.h, img.w);
    let scale = h.min(w) as f64 / 32.0;
    let field = |rng: &mut Rng| {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let smooth = gaussian_blur(&raw, h, w, 3.0 * scale);
        let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        smooth
            .into_iter()
            .map(|v| v / peak * amplitude * scale)
            .collect::<Vec<f64>>()
    };
    let dy = field(rng);
    let dx = field(rng);
    img.map_planes(|p| {
        (0..h * w)
            .map(|k| {
                let (y, x) = ((k / w) as f64, (k % w) as f64);
                bilinear(p, h, w, y + dy[k], x + dx[k])
            })
            .collect()
    })
}

fn contrast(img: Image, factor: f64) -> Image {
    let hw = img.h * img.w;
    img.map_planes(|p| {
        let mean = p.iter().sum::<f64>() / hw as f64;
        // factor·x + (1−factor)·mean is exact at factor 1
        p.iter().map(|&v| factor * v + (1.0 - factor) * mean).collect()
    })
}

const JPEG_LUMA: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn jpeg_quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&JPEG_LUMA) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

fn jpeg(img: Image, quality: f64) -> Image {
    let q = jpeg_quant_table(quality);
    let basis = dct_basis();
    let (h, w) = (img.h, img.w);
    img.map_planes(|p| {
        let mut out = vec![0.0; h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // edge-replicated block, level-shifted to [-128, 127]
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = p[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += basis[u][y] * basis[v][x] * block[y][x];
                            }
                        }
                        let qv = q[u * 8 + v];
                        coef[u][v] = (s / qv).round() * qv;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u][y] * basis[v][x] * coef[u][v];
                            }
                        }
                        out[(by + y) * w + bx + x] = ((s + 128.0).round().clamp(0.0, 255.0)) / 255.0;
                    }
                }
            }
        }
        out
    })
}

fn pixelate(img: Image, block: usize) -> Image {
    let (h, w) = (img.h, img.w);
    let block = block.max(1);
    img.map_planes(|p| {
        let mut out = vec![0.0; h * w];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut s = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        s += p[y * w + x];
                    }
                }
                let mean = s / ((ey - by) * (ex - bx)) as f64;
                for y in by..ey {
                    for x in bx..ex {
                        out[y * w + x] = mean;
                    }
                }
            }
        }
        out
    })
}

fn glass_blur(img: Image, rounds: usize, rng: &mut Rng) -> Image {
    let (c, h, w) = (img.c, img.h, img.w);
    let sigma = 0.3 + 0.1 * rounds as f64;
    let mut out = img.map_planes(|p| gaussian_blur(p, h, w, sigma));
    for _ in 0..rounds {
        for y in 0..h {
            for x in 0..w {
                let ny = reflect(y as isize + rng.below(3) as isize - 1, h);
                let nx = reflect(x as isize + rng.below(3) as isize - 1, w);
                for ch in 0..c {
                    out.data.swap(ch * h * w + y * w + x, ch * h * w + ny * w + nx);
                }
            }
        }
    }
    out
}
