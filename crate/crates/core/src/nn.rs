//! A small sequential network `m = f ∘ c` with hand-written reverse-mode
//! gradients for parameters and inputs.
//!
//! The feature extractor `f` is an ordered list of [`Layer`]s; the classifier
//! `c` is a single affine head. A forward [`Pass`] keeps every intermediate
//! needed by [`Model::backward`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
    Reference,
    Discriminator,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Reference => "reference",
            Role::Discriminator => "discriminator",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "teacher" => Role::Teacher,
            "student" => Role::Student,
            "reference" => Role::Reference,
            "discriminator" => Role::Discriminator,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv3x3 { in_ch: usize, out_ch: usize },
    Affine { inputs: usize, outputs: usize },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    L2Normalize,
    /// Fixed scalar multiplier with no parameters.
    Gain(f64),
}

impl LayerSpec {
    fn describe(&self) -> String {
        match self {
            LayerSpec::Conv3x3 { in_ch, out_ch } => format!("conv3x3({in_ch}->{out_ch})"),
            LayerSpec::Affine { inputs, outputs } => format!("affine({inputs}->{outputs})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool2 => "maxpool2".into(),
            LayerSpec::GlobalAvgPool => "gap".into(),
            LayerSpec::L2Normalize => "l2norm".into(),
            // Gain carries no parameters and does not change the checkpoint layout.
            LayerSpec::Gain(_) => "gain".into(),
        }
    }

    /// Per-sample output shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || {
            Error::invalid(format!(
                "layer {} cannot take per-sample input {input:?}",
                self.describe()
            ))
        };
        Ok(match (self, input) {
            (LayerSpec::Conv3x3 { in_ch, out_ch }, &[c, h, w]) if c == *in_ch => vec![*out_ch, h, w],
            (LayerSpec::Affine { inputs, outputs }, &[d]) if d == *inputs => vec![*outputs],
            (LayerSpec::Relu | LayerSpec::Gain(_), s) => s.to_vec(),
            (LayerSpec::MaxPool2, &[c, h, w]) if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
            (LayerSpec::GlobalAvgPool, &[c, _, _]) => vec![c],
            (LayerSpec::L2Normalize, &[d]) => vec![d],
            _ => return Err(bad()),
        })
    }
}

/// Layer stack description; fixes the parameter layout and checkpoint hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Per-sample input shape, e.g. `[3, 32, 32]` or `[64]`.
    pub input: Vec<usize>,
    pub features: Vec<LayerSpec>,
    pub head_outputs: usize,
}

impl Architecture {
    /// The reference network: two conv/pool stages, global pooling and a
    /// 64-d unit-norm embedding, followed by a linear classifier.
    pub fn reference(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Architecture {
            input: vec![channels, height, width],
            features: vec![
                LayerSpec::Conv3x3 { in_ch: channels, out_ch: 8 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv3x3 { in_ch: 8, out_ch: 16 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Affine { inputs: 16, outputs: 64 },
                LayerSpec::L2Normalize,
            ],
            head_outputs: classes,
        }
    }

    /// Domain discriminator over `dim`-d features with a single logit.
    pub fn discriminator(dim: usize, hidden: usize) -> Self {
        Architecture {
            input: vec![dim],
            features: vec![
                LayerSpec::Affine { inputs: dim, outputs: hidden },
                LayerSpec::Relu,
            ],
            head_outputs: 1,
        }
    }

    /// Per-sample shapes: input, then the output of each feature layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.clone()];
        for l in &self.features {
            let next = l.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        if shapes.last().unwrap().len() != 1 {
            return Err(Error::invalid(format!(
                "feature extractor must end in a vector, got {:?}",
                shapes.last().unwrap()
            )));
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap()[0])
    }

    pub fn describe(&self) -> String {
        let layers: Vec<String> = self.features.iter().map(LayerSpec::describe).collect();
        format!(
            "in{:?}|{}|head->{}",
            self.input,
            layers.join(","),
            self.head_outputs
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3x3 { weight: Tensor, bias: Tensor },
    Affine { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    L2Normalize,
    Gain(f64),
}

/// Per-layer forward state needed by backward, beyond the layer input.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Norms(Vec<f64>),
}

impl Layer {
    fn init(spec: &LayerSpec, rng: &mut Rng) -> Result<Layer> {
        Ok(match *spec {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let std = (2.0 / (in_ch * 9) as f64).sqrt();
                Layer::Conv3x3 {
                    weight: Tensor::gaussian(rng, &[out_ch, in_ch, 3, 3], 0.0, std)?,
                    bias: Tensor::zeros(&[out_ch]),
                }
            }
            LayerSpec::Affine { inputs, outputs } => {
                let std = (2.0 / inputs as f64).sqrt();
                Layer::Affine {
                    weight: Tensor::gaussian(rng, &[outputs, inputs], 0.0, std)?,
                    bias: Tensor::zeros(&[outputs]),
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2 => Layer::MaxPool2,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::L2Normalize => Layer::L2Normalize,
            LayerSpec::Gain(g) => Layer::Gain(g),
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv3x3 { weight, bias } | Layer::Affine { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv3x3 { weight, bias } | Layer::Affine { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        match self {
            Layer::Conv3x3 { weight, bias } => Ok((conv3x3_forward(x, weight, bias)?, Aux::None)),
            Layer::Affine { weight, bias } => Ok((affine_forward(x, weight, bias)?, Aux::None)),
            Layer::Relu => Ok((x.map(|v| v.max(0.0))?, Aux::None)),
            Layer::Gain(g) => Ok((x.mul(*g)?, Aux::None)),
            Layer::MaxPool2 => {
                let (y, idx) = maxpool2_forward(x)?;
                Ok((y, Aux::Argmax(idx)))
            }
            Layer::GlobalAvgPool => Ok((gap_forward(x)?, Aux::None)),
            Layer::L2Normalize => {
                let (y, norms) = l2norm_forward(x)?;
                Ok((y, Aux::Norms(norms)))
            }
        }
    }

    /// Returns the input gradient (if requested) and parameter gradients.
    fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        aux: &Aux,
        gy: &Tensor,
        need_gx: bool,
        need_gp: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        match (self, aux) {
            (Layer::Conv3x3 { weight, .. }, _) => {
                let (gx, gw, gb) = conv3x3_backward(x, weight, gy, need_gx, need_gp);
                Ok((gx, vec![gw, gb]))
            }
            (Layer::Affine { weight, .. }, _) => {
                let (gx, gw, gb) = affine_backward(x, weight, gy, need_gx);
                Ok((gx, vec![gw, gb]))
            }
            (Layer::Relu, _) => {
                // subgradient at exactly 0 is 0
                let mut gx = gy.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok((Some(gx), Vec::new()))
            }
            (Layer::Gain(g), _) => Ok((Some(gy.mul(*g)?), Vec::new())),
            (Layer::MaxPool2, Aux::Argmax(idx)) => {
                let mut gx = Tensor::zeros_like(x);
                let d = gx.data_mut();
                for (&i, &g) in idx.iter().zip(gy.data()) {
                    d[i] += g;
                }
                Ok((Some(gx), Vec::new()))
            }
            (Layer::GlobalAvgPool, _) => {
                let s = x.shape();
                let hw = s[2] * s[3];
                let mut gx = Tensor::zeros_like(x);
                for (plane, &g) in gx.data_mut().chunks_exact_mut(hw).zip(gy.data()) {
                    plane.fill(g / hw as f64);
                }
                Ok((Some(gx), Vec::new()))
            }
            (Layer::L2Normalize, Aux::Norms(norms)) => {
                let d = x.shape()[1];
                let mut gx = Tensor::zeros_like(x);
                for (n, &norm) in norms.iter().enumerate() {
                    let yr = &y.data()[n * d..(n + 1) * d];
                    let gr = &gy.data()[n * d..(n + 1) * d];
                    let out = &mut gx.data_mut()[n * d..(n + 1) * d];
                    if norm > NORM_EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            out[k] = (gr[k] - yr[k] * dot) / norm;
                        }
                    } else {
                        for k in 0..d {
                            out[k] = gr[k] / NORM_EPS;
                        }
                    }
                }
                Ok((Some(gx), Vec::new()))
            }
            _ => Err(Error::invalid("layer state does not match layer kind")),
        }
    }
}

fn conv3x3_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weight.shape();
    let (out_ch, in_ch) = (ws[0], ws[1]);
    let s = x.shape();
    if s.len() != 4 || s[1] != in_ch {
        return Err(Error::shape(s, &[0, in_ch, 0, 0]));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let mut out = vec![0.0; n * out_ch * hw];
    let wd = weight.data();
    for b in 0..n {
        let xin = &x.data()[b * in_ch * hw..(b + 1) * in_ch * hw];
        for oc in 0..out_ch {
            let plane = &mut out[(b * out_ch + oc) * hw..(b * out_ch + oc + 1) * hw];
            plane.fill(bias.data()[oc]);
            for ic in 0..in_ch {
                let xp = &xin[ic * hw..(ic + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = (dy.min(0).unsigned_abs(), (h as isize - dy.max(0)) as usize);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let wv = wd[((oc * in_ch + ic) * 3 + ky) * 3 + kx];
                        let (x0, x1) = (dx.min(0).unsigned_abs(), (w as isize - dx.max(0)) as usize);
                        for yy in y0..y1 {
                            let sy = (yy as isize + dy) as usize;
                            let src = &xp[sy * w..sy * w + w];
                            let dst = &mut plane[yy * w..yy * w + w];
                            let sx0 = (x0 as isize + dx) as usize;
                            for (o, &v) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + (x1 - x0)]) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, out_ch, h, w], out)
}

fn conv3x3_backward(
    x: &Tensor,
    weight: &Tensor,
    gy: &Tensor,
    need_gx: bool,
    need_gp: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let ws = weight.shape();
    let (out_ch, in_ch) = (ws[0], ws[1]);
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let wd = weight.data();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; out_ch];
    let mut gx = if need_gx { vec![0.0; x.len()] } else { Vec::new() };
    for b in 0..n {
        let xin = &x.data()[b * in_ch * hw..(b + 1) * in_ch * hw];
        for oc in 0..out_ch {
            let g = &gy.data()[(b * out_ch + oc) * hw..(b * out_ch + oc + 1) * hw];
            gb[oc] += g.iter().sum::<f64>();
            for ic in 0..in_ch {
                let xp = &xin[ic * hw..(ic + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = (dy.min(0).unsigned_abs(), (h as isize - dy.max(0)) as usize);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let widx = ((oc * in_ch + ic) * 3 + ky) * 3 + kx;
                        let (x0, x1) = (dx.min(0).unsigned_abs(), (w as isize - dx.max(0)) as usize);
                        let sx0 = (x0 as isize + dx) as usize;
                        let span = x1 - x0;
                        if need_gp {
                            let mut acc = 0.0;
                            for yy in y0..y1 {
                                let sy = (yy as isize + dy) as usize;
                                let grow = &g[yy * w + x0..yy * w + x0 + span];
                                let xrow = &xp[sy * w + sx0..sy * w + sx0 + span];
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[widx] += acc;
                        }
                        if need_gx {
                            let wv = wd[widx];
                            let gxp = &mut gx[(b * in_ch + ic) * hw..(b * in_ch + ic + 1) * hw];
                            for yy in y0..y1 {
                                let sy = (yy as isize + dy) as usize;
                                let grow = &g[yy * w + x0..yy * w + x0 + span];
                                let dst = &mut gxp[sy * w + sx0..sy * w + sx0 + span];
                                for (o, &gv) in dst.iter_mut().zip(grow) {
                                    *o += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = need_gx.then(|| Tensor::new(s, gx).expect("finite conv input gradient"));
    (
        gx,
        Tensor::new(ws, gw).expect("finite conv weight gradient"),
        Tensor::new(&[out_ch], gb).expect("finite conv bias gradient"),
    )
}

fn affine_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (outputs, inputs) = (weight.shape()[0], weight.shape()[1]);
    let s = x.shape();
    if s.len() != 2 || s[1] != inputs {
        return Err(Error::shape(s, &[0, inputs]));
    }
    let n = s[0];
    let mut out = vec![0.0; n * outputs];
    for b in 0..n {
        let xr = x.item(b);
        for o in 0..outputs {
            let wr = &weight.data()[o * inputs..(o + 1) * inputs];
            out[b * outputs + o] = bias.data()[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Tensor::new(&[n, outputs], out)
}

fn affine_backward(
    x: &Tensor,
    weight: &Tensor,
    gy: &Tensor,
    need_gx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (outputs, inputs) = (weight.shape()[0], weight.shape()[1]);
    let n = x.shape()[0];
    let mut gw = vec![0.0; outputs * inputs];
    let mut gb = vec![0.0; outputs];
    let mut gx = if need_gx { vec![0.0; n * inputs] } else { Vec::new() };
    for b in 0..n {
        let xr = x.item(b);
        let gr = gy.item(b);
        for o in 0..outputs {
            let g = gr[o];
            gb[o] += g;
            let wrow = &mut gw[o * inputs..(o + 1) * inputs];
            for (acc, &xv) in wrow.iter_mut().zip(xr) {
                *acc += g * xv;
            }
            if need_gx {
                let wr = &weight.data()[o * inputs..(o + 1) * inputs];
                for (acc, &wv) in gx[b * inputs..(b + 1) * inputs].iter_mut().zip(wr) {
                    *acc += g * wv;
                }
            }
        }
    }
    let gx = need_gx.then(|| Tensor::new(&[n, inputs], gx).expect("finite affine input gradient"));
    (
        gx,
        Tensor::new(&[outputs, inputs], gw).expect("finite affine weight gradient"),
        Tensor::new(&[outputs], gb).expect("finite affine bias gradient"),
    )
}

fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let d = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, idx))
}

fn gap_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let hw = s[2] * s[3];
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[s[0], s[1]], out)
}

fn l2norm_forward(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = x.shape()[1];
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.shape()[0]);
    for row in out.data_mut().chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= denom);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Saved intermediates of one forward call.
#[derive(Debug, Clone)]
pub struct Pass {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    pub features: Tensor,
    pub logits: Tensor,
}

/// Parameter gradients in declaration order, plus an optional input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn zeros_for(model: &Model) -> Self {
        Gradients {
            params: model.params().into_iter().map(Tensor::zeros_like).collect(),
            input: None,
        }
    }

    /// `self += alpha * other` over parameter gradients.
    pub fn accumulate(&mut self, other: &Gradients, alpha: f64) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(&[self.params.len()], &[other.params.len()]));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
            && self.input.as_ref().is_none_or(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
    head: Layer,
    pub role: Role,
}

impl Model {
    /// He-normal weights, zero biases.
    pub fn new(arch: Architecture, role: Role, rng: &mut Rng) -> Result<Self> {
        let dim = arch.feature_dim()?;
        let layers = arch
            .features
            .iter()
            .map(|s| Layer::init(s, rng))
            .collect::<Result<_>>()?;
        let head = Layer::init(
            &LayerSpec::Affine {
                inputs: dim,
                outputs: arch.head_outputs,
            },
            rng,
        )?;
        Ok(Model {
            arch,
            layers,
            head,
            role,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn feature_dim(&self) -> usize {
        match &self.head {
            Layer::Affine { weight, .. } => weight.shape()[1],
            _ => unreachable!("head is always affine"),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.arch.head_outputs
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(Layer::params)
            .chain(self.head.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(Layer::params_mut)
            .chain(self.head.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Digest of every parameter bit; equal iff parameters are bit-identical.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy of this model under a different role.
    pub fn with_role(&self, role: Role) -> Model {
        Model {
            role,
            ..self.clone()
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.arch.input.len() + 1 || x.shape()[1..] != self.arch.input[..] {
            let mut expected = vec![0];
            expected.extend(&self.arch.input);
            return Err(Error::shape(x.shape(), &expected));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Pass> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, a) = layer.forward(&cur)?;
            inputs.push(cur);
            aux.push(a);
            cur = next;
        }
        let (logits, _) = self.head.forward(&cur)?;
        Ok(Pass {
            inputs,
            aux,
            features: cur,
            logits,
        })
    }

    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?.0;
        }
        Ok(cur)
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_logits(x)?))
    }

    /// Reverse-mode pass. The upstream gradient may enter at the features,
    /// the logits, or both (summed).
    pub fn backward(
        &self,
        pass: &Pass,
        grad_features: Option<&Tensor>,
        grad_logits: Option<&Tensor>,
        want_input_grad: bool,
    ) -> Result<Gradients> {
        self.backward_impl(pass, grad_features, grad_logits, want_input_grad, true)
    }

    /// Gradient of a feature-space objective with respect to the input only.
    pub fn input_gradient(&self, pass: &Pass, grad_features: &Tensor) -> Result<Tensor> {
        let g = self.backward_impl(pass, Some(grad_features), None, true, false)?;
        g.input.ok_or_else(|| Error::invalid("input gradient unavailable"))
    }

    fn backward_impl(
        &self,
        pass: &Pass,
        grad_features: Option<&Tensor>,
        grad_logits: Option<&Tensor>,
        want_input_grad: bool,
        want_param_grads: bool,
    ) -> Result<Gradients> {
        if pass.inputs.len() != self.layers.len() {
            return Err(Error::invalid("forward pass does not belong to this model"));
        }
        let mut g = match grad_features {
            Some(gf) => {
                if gf.shape() != pass.features.shape() {
                    return Err(Error::shape(pass.features.shape(), gf.shape()));
                }
                gf.clone()
            }
            None => Tensor::zeros_like(&pass.features),
        };
        let mut head_grads = vec![
            Tensor::zeros_like(self.head.params()[0]),
            Tensor::zeros_like(self.head.params()[1]),
        ];
        if let Some(gl) = grad_logits {
            if gl.shape() != pass.logits.shape() {
                return Err(Error::shape(pass.logits.shape(), gl.shape()));
            }
            let (gx, pg) =
                self.head
                    .backward(&pass.features, &pass.logits, &Aux::None, gl, true, true)?;
            g.axpy(1.0, &gx.unwrap())?;
            head_grads = pg;
        }

        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = if i + 1 < self.layers.len() {
                &pass.inputs[i + 1]
            } else {
                &pass.features
            };
            let need_gx = i > 0 || want_input_grad;
            let (gx, pg) = layer.backward(&pass.inputs[i], y, &pass.aux[i], &g, need_gx, want_param_grads)?;
            per_layer.push(pg);
            match gx {
                Some(gx) if i > 0 => g = gx,
                Some(gx) => input_grad = Some(gx),
                None => {}
            }
        }
        if self.layers.is_empty() && want_input_grad {
            input_grad = Some(g);
        }
        let mut params: Vec<Tensor> = per_layer.into_iter().rev().flatten().collect();
        params.extend(head_grads);
        let grads = Gradients {
            params,
            input: input_grad,
        };
        if !grads.all_finite() {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(grads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.partial");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(CKPT_MAGIC)?;
            w.write_all(&self.arch.hash().to_le_bytes())?;
            let role = self.role.as_str().as_bytes();
            w.write_all(&(role.len() as u32).to_le_bytes())?;
            w.write_all(role)?;
            for p in self.params() {
                w.write_all(&(p.len() as u64).to_le_bytes())?;
                for v in p.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Overwrite this model's parameters from a checkpoint with the same
    /// architecture hash. Returns the role recorded in the file; the model
    /// keeps its own role.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<Role> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Truncated(format!("checkpoint ends at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CKPT_MAGIC {
            return Err(Error::BadMagic);
        }
        let found = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let expected = self.arch.hash();
        if found != expected {
            return Err(Error::ArchitectureMismatch { expected, found });
        }
        let role_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let role_str = String::from_utf8_lossy(take(role_len)?).into_owned();
        let role = Role::parse(&role_str)
            .ok_or_else(|| Error::invalid(format!("unknown role tag `{role_str}`")))?;
        let mut loaded = Vec::new();
        for p in self.params() {
            let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if count != p.len() {
                return Err(Error::shape(p.shape(), &[count]));
            }
            let data: Vec<f64> = take(count * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            loaded.push(Tensor::new(p.shape(), data)?);
        }
        for (dst, src) in self.params_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(role)
    }

    /// Build a model for `arch` and fill it from a checkpoint.
    pub fn load(arch: Architecture, role: Role, path: impl AsRef<Path>) -> Result<Model> {
        let mut model = Model::new(arch, role, &mut Rng::new(0))?;
        model.load_params(path)?;
        Ok(model)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape()[1];
    logits
        .data()
        .chunks_exact(s)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Classical momentum SGD with L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "bad SGD hyperparameters lr={lr} momentum={momentum} wd={weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let mut params = model.params_mut();
        if grads.params.len() != params.len() {
            return Err(Error::shape(&[params.len()], &[grads.params.len()]));
        }
        for (p, g) in params.iter().zip(&grads.params) {
            if p.shape() != g.shape() {
                return Err(Error::shape(p.shape(), g.shape()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros_like(p)).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(&grads.params).zip(&mut self.velocity) {
            let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
            for k in 0..pd.len() {
                let step = gd[k] + self.weight_decay * pd[k];
                vd[k] = self.momentum * vd[k] + step;
                pd[k] -= self.lr * vd[k];
            }
        }
        Ok(())
    }
}

/// Single update on fresh optimizer state.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(lr, momentum, weight_decay)?.step(model, grads)
}
