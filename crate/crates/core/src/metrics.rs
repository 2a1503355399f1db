//! Corruption Error, mCE, clean accuracy and severity curves.

use std::fmt::Write as _;

use crate::corrupt::{self, CorruptionKind, Severity};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 128;

/// Top-1 error rates of one model: 15 kinds × severities 1..=5, plus clean.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    pub model: String,
    pub errors: [[f64; 5]; 15],
    pub clean: f64,
}

impl ErrorGrid {
    pub fn new(model: impl Into<String>, errors: [[f64; 5]; 15], clean: f64) -> Result<Self> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(clean) || !errors.iter().flatten().all(|&v| ok(v)) {
            return Err(Error::invalid("error rates must lie in [0,1]"));
        }
        Ok(ErrorGrid {
            model: model.into(),
            errors,
            clean,
        })
    }

    pub fn get(&self, kind: CorruptionKind, t: Severity) -> f64 {
        self.errors[kind.index()][t.get() as usize - 1]
    }

    pub fn kind_sum(&self, kind: CorruptionKind) -> f64 {
        self.errors[kind.index()].iter().sum()
    }

    pub fn clean_accuracy(&self) -> f64 {
        1.0 - self.clean
    }
}

/// Worker count from `CRDA_THREADS`; defaults to 1.
pub fn thread_count() -> usize {
    std::env::var("CRDA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn predictions(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&images.select(chunk)?)?);
    }
    Ok(out)
}

fn error_rate(pred: &[usize], labels: &[usize]) -> f64 {
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len() as f64
}

pub fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    let pred = predictions(model, ds.images())?;
    Ok(1.0 - error_rate(&pred, ds.labels()))
}

/// The deterministic corruption stream for one grid cell.
pub fn cell_rng(rng: &Rng, kind: CorruptionKind, t: Severity) -> Rng {
    rng.derive_path(&[kind.index() as u64, t.get() as u64])
}

/// Error grid of a single model.
pub fn error_grid(model: &Model, target: &LabeledDataset, rng: &Rng) -> Result<ErrorGrid> {
    Ok(error_grids(&[(model.role.as_str(), model)], target, rng)?.remove(0))
}

/// Error grids of several models on identical corrupted images. Each cell is
/// corrupted once and shared by every model.
pub fn error_grids(models: &[(&str, &Model)], target: &LabeledDataset, rng: &Rng) -> Result<Vec<ErrorGrid>> {
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    let labels = target.labels().to_vec();
    let cells: Vec<(CorruptionKind, Severity)> = CorruptionKind::ALL
        .iter()
        .flat_map(|&k| Severity::scored().map(move |t| (k, t)))
        .collect();

    let eval_cell = |kind: CorruptionKind, t: Severity| -> Result<Vec<f64>> {
        let x = corrupt::apply_batch(kind, t, target.images(), &cell_rng(rng, kind, t))?;
        models
            .iter()
            .map(|(_, m)| Ok(error_rate(&predictions(m, &x)?, &labels)))
            .collect()
    };

    let threads = thread_count().min(cells.len());
    let results: Vec<Result<Vec<f64>>> = if threads <= 1 {
        cells.iter().map(|&(k, t)| eval_cell(k, t)).collect()
    } else {
        let per = cells.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .chunks(per)
                .map(|chunk| s.spawn(|| chunk.iter().map(|&(k, t)| eval_cell(k, t)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let mut grids = Vec::with_capacity(models.len());
    for (name, m) in models {
        let clean = error_rate(&predictions(m, target.images())?, &labels);
        grids.push(ErrorGrid {
            model: name.to_string(),
            errors: [[0.0; 5]; 15],
            clean,
        });
    }
    for (&(kind, t), res) in cells.iter().zip(results) {
        let errs = res?;
        for (g, e) in grids.iter_mut().zip(errs) {
            g.errors[kind.index()][t.get() as usize - 1] = e;
        }
    }
    Ok(grids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeReport {
    pub model: String,
    pub reference: String,
    /// `None` for kinds excluded because the reference never errs on them.
    pub per_kind: Vec<(CorruptionKind, Option<f64>)>,
    pub excluded: Vec<CorruptionKind>,
    pub mce: f64,
}

impl CeReport {
    pub fn ce(&self, kind: CorruptionKind) -> Option<f64> {
        self.per_kind[kind.index()].1
    }

    /// mCE over the kinds not in `held`, e.g. scoring an augmented model only
    /// on corruptions it never trained on. `None` if nothing remains.
    pub fn mce_excluding(&self, held: &[CorruptionKind]) -> Option<f64> {
        let kept: Vec<f64> = self
            .per_kind
            .iter()
            .filter(|(k, _)| !held.contains(k))
            .filter_map(|(_, c)| *c)
            .collect();
        (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
    }
}

/// `CE_k = Σ_t E_model / Σ_t E_ref`; mCE is the mean over non-excluded kinds.
pub fn ce(model_grid: &ErrorGrid, ref_grid: &ErrorGrid) -> Result<CeReport> {
    let mut per_kind = Vec::with_capacity(15);
    let mut excluded = Vec::new();
    for &kind in &CorruptionKind::ALL {
        let denom = ref_grid.kind_sum(kind);
        if denom > 0.0 {
            per_kind.push((kind, Some(model_grid.kind_sum(kind) / denom)));
        } else {
            excluded.push(kind);
            per_kind.push((kind, None));
        }
    }
    let kept: Vec<f64> = per_kind.iter().filter_map(|(_, c)| *c).collect();
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "reference `{}` has zero error on every corruption",
            ref_grid.model
        )));
    }
    Ok(CeReport {
        model: model_grid.model.clone(),
        reference: ref_grid.model.clone(),
        mce: kept.iter().sum::<f64>() / kept.len() as f64,
        per_kind,
        excluded,
    })
}

/// `model,kind,CE` rows followed by a `model,mCE,value` row per report.
pub fn metrics_csv(reports: &[CeReport]) -> String {
    let mut s = String::from("model,kind,CE\n");
    for r in reports {
        for (kind, c) in &r.per_kind {
            match c {
                Some(v) => writeln!(s, "{},{},{v}", r.model, kind.name()).unwrap(),
                None => writeln!(s, "{},{},excluded", r.model, kind.name()).unwrap(),
            }
        }
        writeln!(s, "{},mCE,{}", r.model, r.mce).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub svg: String,
    pub csv: String,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Error-vs-severity polylines, one panel per kind and one series per label.
pub fn severity_curves(grids: &[(String, ErrorGrid)]) -> Result<Curves> {
    if grids.is_empty() {
        return Err(Error::invalid("severity_curves needs at least one grid"));
    }
    let mut csv = String::from("label,kind,t,error\n");
    for (label, g) in grids {
        writeln!(csv, "{label},clean,0,{}", g.clean).unwrap();
        for &kind in &CorruptionKind::ALL {
            for t in 1..=5u8 {
                writeln!(csv, "{label},{},{t},{}", kind.name(), g.errors[kind.index()][t as usize - 1]).unwrap();
            }
        }
    }

    let (pw, ph, cols) = (180.0, 140.0, 5usize);
    let (ml, mt, plot_w, plot_h) = (30.0, 22.0, 140.0, 96.0);
    let legend_h = 20.0 * grids.len() as f64 + 10.0;
    let width = pw * cols as f64;
    let height = ph * 3.0 + legend_h;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    )
    .unwrap();
    for (i, &kind) in CorruptionKind::ALL.iter().enumerate() {
        let ox = (i % cols) as f64 * pw + ml;
        let oy = (i / cols) as f64 * ph + mt;
        writeln!(svg, r#"<g transform="translate({ox},{oy})">"#).unwrap();
        writeln!(svg, r#"<text x="0" y="-8">{}</text>"#, kind.name()).unwrap();
        writeln!(
            svg,
            r##"<rect x="0" y="0" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>"##
        )
        .unwrap();
        writeln!(svg, r#"<text x="-24" y="4">1.0</text><text x="-24" y="{plot_h}">0.0</text>"#).unwrap();
        for t in 1..=5 {
            let x = (t - 1) as f64 / 4.0 * plot_w;
            writeln!(svg, r#"<text x="{}" y="{}">{t}</text>"#, x - 3.0, plot_h + 12.0).unwrap();
        }
        for (si, (_, g)) in grids.iter().enumerate() {
            let pts: Vec<String> = (0..5)
                .map(|t| {
                    let x = t as f64 / 4.0 * plot_w;
                    let y = (1.0 - g.errors[kind.index()][t]) * plot_h;
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                pts.join(" "),
                PALETTE[si % PALETTE.len()]
            )
            .unwrap();
        }
        svg.push_str("</g>\n");
    }
    for (si, (label, g)) in grids.iter().enumerate() {
        let y = ph * 3.0 + 14.0 + 20.0 * si as f64;
        writeln!(
            svg,
            r#"<rect x="10" y="{}" width="12" height="12" fill="{}"/><text x="28" y="{}">{} (clean error {:.3})</text>"#,
            y - 10.0,
            PALETTE[si % PALETTE.len()],
            y,
            xml_escape(label),
            g.clean
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(Curves { svg, csv })
}
