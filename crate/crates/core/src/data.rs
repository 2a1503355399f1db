//! Labeled image datasets, the synthetic two-domain generator, the TDS
//! container format and binary PPM ingestion.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TDS_MAGIC: &[u8; 4] = b"TDS1";

/// Images `N×C×H×W` in `[0,1]` plus class labels.
///
/// Label access goes through [`LabeledDataset::labels`], which counts reads so
/// training code can be audited for never touching target labels.
#[derive(Debug)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    domain_tag: String,
    label_reads: AtomicUsize,
}

impl Clone for LabeledDataset {
    fn clone(&self) -> Self {
        LabeledDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            class_count: self.class_count,
            domain_tag: self.domain_tag.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for LabeledDataset {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.labels == other.labels
            && self.class_count == other.class_count
            && self.domain_tag == other.domain_tag
    }
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!(
                "images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::shape(&[n], &[labels.len()]));
        }
        if class_count < 1 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            domain_tag: domain_tag.into(),
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index(i)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select(indices)
    }

    /// Audited label access.
    pub fn labels(&self) -> &[usize] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn reset_label_reads(&self) {
        self.label_reads.store(0, Ordering::Relaxed);
    }

    /// Subset by index, preserving the domain tag.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(
            self.images.select(indices)?,
            labels,
            self.class_count,
            self.domain_tag.clone(),
        )
    }

    /// Same labels, different pixels (e.g. a corrupted copy).
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::shape(self.images.shape(), images.shape()));
        }
        LabeledDataset::new(
            images,
            self.labels.clone(),
            self.class_count,
            self.domain_tag.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
}

impl DomainPair {
    pub fn new(source: LabeledDataset, target: LabeledDataset) -> Result<Self> {
        if source.class_count() != target.class_count() {
            return Err(Error::invalid(format!(
                "class counts differ: source {} vs target {}",
                source.class_count(),
                target.class_count()
            )));
        }
        if source.image_shape() != target.image_shape() {
            return Err(Error::shape(&source.image_shape(), &target.image_shape()));
        }
        Ok(DomainPair { source, target })
    }
}

/// Rendering parameters for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    pub background: [f64; 3],
    pub fill: [f64; 3],
    pub stroke: [f64; 3],
    /// Outline width in pixels at 32×32 scale.
    pub stroke_width: f64,
    /// Added to every pixel before clamping.
    pub brightness: f64,
    /// Amplitude of a diagonal sinusoidal texture.
    pub texture: f64,
    /// Per-image color jitter half-width.
    pub color_jitter: f64,
}

impl DomainStyle {
    pub fn source_default() -> Self {
        DomainStyle {
            background: [0.12, 0.14, 0.30],
            fill: [0.80, 0.78, 0.70],
            stroke: [0.95, 0.85, 0.30],
            stroke_width: 1.0,
            brightness: 0.0,
            texture: 0.0,
            color_jitter: 0.06,
        }
    }

    pub fn target_default() -> Self {
        DomainStyle {
            background: [0.26, 0.18, 0.20],
            fill: [0.80, 0.78, 0.70],
            stroke: [0.30, 0.60, 0.90],
            stroke_width: 2.0,
            brightness: 0.04,
            texture: 0.04,
            color_jitter: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_domain: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            per_domain: 500,
            channels: 3,
            height: 32,
            width: 32,
            source_style: DomainStyle::source_default(),
            target_style: DomainStyle::target_default(),
        }
    }
}

/// Glyph shapes as (points, star); a class picks one shape and one size tier.
const SHAPES: [(usize, bool); 5] = [(3, false), (4, false), (8, false), (4, true), (6, true)];

/// Outline for class `c`: shape `c mod 5` at size tier `c / 5`, near upright
/// with a small random tilt and per-vertex radial jitter.
fn glyph_vertices(class: usize, classes: usize, rng: &mut Rng, scale: f64, cx: f64, cy: f64) -> Vec<(f64, f64)> {
    let (points, star) = SHAPES[class % SHAPES.len()];
    let tiers = classes.div_ceil(SHAPES.len());
    let tier = class / SHAPES.len();
    let nominal = if tiers > 1 {
        6.0 + 6.0 * tier as f64 / (tiers - 1) as f64
    } else {
        10.0
    };
    let radius = scale * nominal * rng.uniform_range(0.92, 1.08);
    let rotation = -std::f64::consts::FRAC_PI_2 + rng.uniform_range(-0.2, 0.2);
    let count = if star { 2 * points } else { points };
    (0..count)
        .map(|i| {
            let base = if star && i % 2 == 1 { 0.45 } else { 1.0 };
            let r = radius * base * rng.uniform_range(0.93, 1.07);
            let a = rotation + std::f64::consts::TAU * i as f64 / count as f64;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
    }
    c
}

fn edge_distance(poly: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (ax, ay) = poly[i];
            let (bx, by) = poly[(i + 1) % n];
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (ax + t * dx, ay + t * dy);
            ((x - px).powi(2) + (y - py).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn jitter(base: [f64; 3], amount: f64, rng: &mut Rng) -> [f64; 3] {
    let mut out = base;
    for v in &mut out {
        *v = (*v + rng.uniform_range(-amount, amount)).clamp(0.0, 1.0);
    }
    out
}

fn render(class: usize, style: &DomainStyle, spec: &SynthSpec, rng: &mut Rng) -> Vec<f64> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let scale = h.min(w) as f64 / 32.0;
    let cx = w as f64 / 2.0 + rng.uniform_range(-3.0, 3.0) * scale;
    let cy = h as f64 / 2.0 + rng.uniform_range(-3.0, 3.0) * scale;
    let poly = glyph_vertices(class, spec.classes, rng, scale, cx, cy);
    let bg = jitter(style.background, style.color_jitter, rng);
    let fill = jitter(style.fill, style.color_jitter, rng);
    let stroke = jitter(style.stroke, style.color_jitter, rng);
    let half_stroke = style.stroke_width * scale / 2.0;
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);

    let mut img = vec![0.0; c * h * w];
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let (px, py) = (x as f64 + sx, y as f64 + sy);
                    let color = if edge_distance(&poly, px, py) <= half_stroke {
                        &stroke
                    } else if inside(&poly, px, py) {
                        &fill
                    } else {
                        &bg
                    };
                    for k in 0..3 {
                        acc[k] += color[k] / 4.0;
                    }
                }
            }
            let tex = style.texture * (0.9 * (x as f64 + y as f64) / scale + phase).sin();
            for ch in 0..c {
                let v = acc[ch % 3] + style.brightness + tex;
                img[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn render_domain(spec: &SynthSpec, style: &DomainStyle, tag: &str, mut rng: Rng) -> Result<LabeledDataset> {
    let n = spec.per_domain;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * spec.channels * spec.height * spec.width);
    for &label in &labels {
        data.extend(render(label, style, spec, &mut rng));
    }
    let images = Tensor::new(&[n, spec.channels, spec.height, spec.width], data)?;
    LabeledDataset::new(images, labels, spec.classes, tag)
}

/// Two domains of procedural glyphs that share a label space but differ by a
/// fixed photometric and geometric style shift.
pub fn generate_synthetic_pair(rng: &Rng, spec: &SynthSpec) -> Result<DomainPair> {
    if !(2..=16).contains(&spec.classes) {
        return Err(Error::invalid(format!(
            "class count {} outside 2..=16",
            spec.classes
        )));
    }
    if spec.per_domain == 0 {
        return Err(Error::invalid("per-domain sample count must be positive"));
    }
    if spec.channels == 0 || spec.height < 8 || spec.width < 8 {
        return Err(Error::invalid("image must be at least 1×8×8"));
    }
    let source = render_domain(spec, &spec.source_style, "source", rng.derive(0))?;
    let target = render_domain(spec, &spec.target_style, "target", rng.derive(1))?;
    DomainPair::new(source, target)
}

/// Write `ds` as `TDS1 | N C H W S (u32 LE) | f32 pixels | u32 labels`.
pub fn save_tds(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tds.partial");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(TDS_MAGIC)?;
        let [c, h, wd] = ds.image_shape();
        for v in [ds.len(), c, h, wd, ds.class_count()] {
            let v = u32::try_from(v).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for &p in ds.images().data() {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        for &l in &ds.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "expected {n} bytes of {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_tds(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4, "magic")? != TDS_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut dims = [0usize; 5];
    for (d, name) in dims.iter_mut().zip(["N", "C", "H", "W", "S"]) {
        *d = r.u32(name)? as usize;
    }
    let [n, c, h, w, s] = dims;
    if n == 0 || c == 0 || h == 0 || w == 0 || s == 0 {
        return Err(Error::invalid(format!("zero dimension in header {dims:?}")));
    }
    let count = n * c * h * w;
    let pixels = r.take(count * 4, "pixels")?;
    let data: Vec<f64> = pixels
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u32("labels")? as usize;
        if l >= s {
            return Err(Error::invalid(format!("label {l} >= class count {s}")));
        }
        labels.push(l);
    }
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(Tensor::new(&[n, c, h, w], data)?, labels, s, tag)
}

/// Parse a binary PPM (P6, maxval 255) into `[3, H, W]` values in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let err = |msg: &str| Error::Ingest {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(err("not a binary PPM (P6)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("malformed header"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(err(&format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(err("zero image dimension"));
    }
    let raster = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| err("truncated raster"))?;
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Load every `*.ppm` in `dir` (sorted by file name) with labels from a
/// `name<TAB>class` file. The class count is one past the largest label.
pub fn ingest_ppm_dir(dir: impl AsRef<Path>, labels_file: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let labels_path = labels_file.as_ref();
    let text = fs::read_to_string(labels_path)?;
    let mut label_map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, class) = line.split_once('\t').ok_or_else(|| Error::Ingest {
            path: labels_path.to_path_buf(),
            msg: format!("line {}: expected `filename<TAB>class_index`", lineno + 1),
        })?;
        let class: usize = class.trim().parse().map_err(|_| Error::Ingest {
            path: labels_path.to_path_buf(),
            msg: format!("line {}: bad class index `{class}`", lineno + 1),
        })?;
        label_map.insert(name.to_string(), class);
    }

    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            msg: "no .ppm files".into(),
        });
    }
    if let Some(unknown) = label_map.keys().find(|k| !names.contains(k)) {
        return Err(Error::Ingest {
            path: labels_path.to_path_buf(),
            msg: format!("unknown filename `{unknown}`"),
        });
    }

    let mut images = Vec::with_capacity(names.len());
    let mut labels = Vec::with_capacity(names.len());
    for name in &names {
        let path = dir.join(name);
        let img = read_ppm(&path)?;
        if let Some(first) = images.first() {
            let first: &Tensor = first;
            if first.shape() != img.shape() {
                return Err(Error::Ingest {
                    path,
                    msg: format!("size {:?} differs from {:?}", img.shape(), first.shape()),
                });
            }
        }
        let label = *label_map.get(name).ok_or_else(|| Error::Ingest {
            path: path.clone(),
            msg: "no label in labels file".into(),
        })?;
        images.push(img);
        labels.push(label);
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let tag = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(Tensor::stack(&images)?, labels, classes, tag)
}
