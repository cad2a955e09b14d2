//! Neural layer zoo and the declarative shape resolver.
//!
//! Layers operate on batched tensors laid out (N, H, W, C) row-major; conv
//! weights are (kh, kw, c_in, c_out) and dense weights (n_in, n_out). A
//! network is declared as a sequence of [`LayerSpec`]s wired by name;
//! [`resolve_shapes`] computes every output shape up front and fails loudly
//! when a declared shape cannot be reproduced, reporting which padding would
//! fix it.

use crate::tensor::{GradStore, Tape, TapeOp, Tensor, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("layer {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("layer {layer}: resolved output {computed:?} != declared {declared:?}; {hint}")]
    DeclaredMismatch {
        layer: String,
        computed: Vec<usize>,
        declared: Vec<usize>,
        hint: String,
    },
    #[error("layer {layer}: unknown input '{input}'")]
    UnknownInput { layer: String, input: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

// ── Layer declarations ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output ceil(in/stride); total padding split with the lighter half on
    /// the top/left edge.
    Same,
    /// No padding; output (in - kernel)/stride + 1.
    Valid,
    Explicit {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolRounding {
    Floor,
    Ceil,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub enum LayerKind {
    Conv {
        kernel: (usize, usize),
        stride: (usize, usize),
        channels_out: usize,
        padding: Padding,
        activation: Activation,
    },
    /// Nearest-neighbor spatial upsample by `factor`, then a stride-1
    /// same-padded convolution of `kernel`.
    Upconv {
        factor: (usize, usize),
        kernel: (usize, usize),
        channels_out: usize,
        activation: Activation,
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
        rounding: PoolRounding,
    },
    Dense {
        features_out: usize,
        activation: Activation,
    },
    /// Removes rows from the bottom edge and columns from the right edge.
    Crop { target: (usize, usize) },
    /// Flattens every wired input per sample and concatenates the features.
    Concat,
    Flatten,
}

#[derive(Clone, Debug)]
pub enum Wiring {
    /// Output of the preceding layer in the sequence.
    Prev,
    Named(String),
    Many(Vec<String>),
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub input: Wiring,
    pub kind: LayerKind,
    /// Expected per-sample output shape; resolution fails if it disagrees.
    pub declared: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(name: &str, input: Wiring, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            input,
            kind,
            declared: None,
        }
    }

    pub fn declared(mut self, shape: &[usize]) -> Self {
        self.declared = Some(shape.to_vec());
        self
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv { .. } | LayerKind::Upconv { .. } | LayerKind::Dense { .. }
        )
    }

    pub fn activation(&self) -> Activation {
        match self.kind {
            LayerKind::Conv { activation, .. }
            | LayerKind::Upconv { activation, .. }
            | LayerKind::Dense { activation, .. } => activation,
            _ => Activation::Linear,
        }
    }
}

// ── Shape resolution ─────────────────────────────────────────────────

/// Per-layer resolved output shapes, in declaration order. Shapes are
/// per-sample: (h, w, c) for spatial layers, (features,) for flat ones.
#[derive(Clone, Debug)]
pub struct ShapeLedger {
    pub rows: Vec<(String, Vec<usize>)>,
}

impl ShapeLedger {
    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }
}

fn conv_extent(
    layer: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    axis: &str,
) -> Result<(usize, usize, usize)> {
    // Returns (output extent, pad before, pad after).
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            let before = total / 2;
            Ok((out, before, total - before))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(LayerError::Shape {
                    layer: layer.to_string(),
                    detail: format!(
                        "{axis} extent {input} smaller than kernel {kernel} (valid padding)"
                    ),
                });
            }
            Ok(((input - kernel) / stride + 1, 0, 0))
        }
        Padding::Explicit {
            top,
            bottom,
            left,
            right,
        } => {
            let (before, after) = if axis == "height" {
                (top, bottom)
            } else {
                (left, right)
            };
            let padded = input + before + after;
            if padded < kernel {
                return Err(LayerError::Shape {
                    layer: layer.to_string(),
                    detail: format!("padded {axis} extent {padded} smaller than kernel {kernel}"),
                });
            }
            Ok(((padded - kernel) / stride + 1, before, after))
        }
    }
}

fn pool_extent(
    layer: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    rounding: PoolRounding,
    axis: &str,
) -> Result<usize> {
    if input < kernel && rounding == PoolRounding::Floor {
        return Err(LayerError::Shape {
            layer: layer.to_string(),
            detail: format!("{axis} extent {input} smaller than pool kernel {kernel}"),
        });
    }
    let mut out = match rounding {
        PoolRounding::Floor => (input - kernel) / stride + 1,
        PoolRounding::Ceil => input.saturating_sub(kernel).div_ceil(stride) + 1,
    };
    // A window may not start past the input edge.
    if (out - 1) * stride >= input {
        out -= 1;
    }
    Ok(out)
}

/// Hint text for a declared-shape mismatch on a windowed layer: what each
/// padding policy yields, and the explicit padding that would reproduce the
/// declared extent if one exists.
fn padding_hint(
    input: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    declared: &[usize],
) -> String {
    if declared.len() != 3 {
        return "declared shape is not spatial".to_string();
    }
    let mut notes = Vec::new();
    for (axis, inp, k, s, want) in [
        ("height", input.0, kernel.0, stride.0, declared[0]),
        ("width", input.1, kernel.1, stride.1, declared[1]),
    ] {
        let same = inp.div_ceil(s);
        let valid = if inp >= k {
            ((inp - k) / s + 1).to_string()
        } else {
            "n/a".to_string()
        };
        let needed = (want - 1) * s + k;
        if needed >= inp {
            notes.push(format!(
                "{axis}: same->{same}, valid->{valid}, explicit total padding {} -> {want}",
                needed - inp
            ));
        } else {
            notes.push(format!(
                "{axis}: no padding policy reaches {want} (same->{same}, valid->{valid}; would need negative padding)"
            ));
        }
    }
    notes.join("; ")
}

fn resolve_one(spec: &LayerSpec, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
        if s.len() == 3 {
            Ok((s[0], s[1], s[2]))
        } else {
            Err(LayerError::Shape {
                layer: spec.name.clone(),
                detail: format!("expected spatial (h,w,c) input, got {s:?}"),
            })
        }
    };
    match &spec.kind {
        LayerKind::Conv {
            kernel,
            stride,
            channels_out,
            padding,
            ..
        } => {
            let (h, w, _c) = spatial(inputs[0])?;
            let (oh, _, _) = conv_extent(&spec.name, h, kernel.0, stride.0, *padding, "height")?;
            let (ow, _, _) = conv_extent(&spec.name, w, kernel.1, stride.1, *padding, "width")?;
            Ok(vec![oh, ow, *channels_out])
        }
        LayerKind::Upconv {
            factor,
            channels_out,
            ..
        } => {
            let (h, w, _c) = spatial(inputs[0])?;
            Ok(vec![h * factor.0, w * factor.1, *channels_out])
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            rounding,
        } => {
            let (h, w, c) = spatial(inputs[0])?;
            let oh = pool_extent(&spec.name, h, kernel.0, stride.0, *rounding, "height")?;
            let ow = pool_extent(&spec.name, w, kernel.1, stride.1, *rounding, "width")?;
            Ok(vec![oh, ow, c])
        }
        LayerKind::Dense { features_out, .. } => {
            if inputs[0].len() != 1 {
                return Err(LayerError::Shape {
                    layer: spec.name.clone(),
                    detail: format!("dense expects flat input, got {:?}", inputs[0]),
                });
            }
            Ok(vec![*features_out])
        }
        LayerKind::Crop { target } => {
            let (h, w, c) = spatial(inputs[0])?;
            if target.0 > h || target.1 > w {
                return Err(LayerError::Shape {
                    layer: spec.name.clone(),
                    detail: format!("crop target {target:?} larger than input ({h}, {w})"),
                });
            }
            Ok(vec![target.0, target.1, c])
        }
        LayerKind::Concat => {
            let total: usize = inputs.iter().map(|s| s.iter().product::<usize>()).sum();
            Ok(vec![total])
        }
        LayerKind::Flatten => Ok(vec![inputs[0].iter().product()]),
    }
}

/// Computes every layer's per-sample output shape for the given input
/// (h, w, c). Fails on the first layer whose resolved shape disagrees with
/// its declared one, reporting the padding that would fix it.
pub fn resolve_shapes(specs: &[LayerSpec], input: (usize, usize, usize)) -> Result<ShapeLedger> {
    let mut ledger = ShapeLedger { rows: Vec::new() };
    let input_shape = vec![input.0, input.1, input.2];
    let mut prev: Vec<usize> = input_shape.clone();
    for spec in specs {
        let shapes: Vec<Vec<usize>> = match &spec.input {
            Wiring::Prev => vec![prev.clone()],
            Wiring::Named(n) => vec![lookup(&ledger, &input_shape, &spec.name, n)?],
            Wiring::Many(ns) => {
                let mut v = Vec::with_capacity(ns.len());
                for n in ns {
                    v.push(lookup(&ledger, &input_shape, &spec.name, n)?);
                }
                v
            }
        };
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let computed = resolve_one(spec, &shape_refs)?;
        if let Some(declared) = &spec.declared {
            if *declared != computed {
                let hint = match &spec.kind {
                    LayerKind::Conv { kernel, stride, .. }
                    | LayerKind::MaxPool { kernel, stride, .. } => {
                        padding_hint((shape_refs[0][0], shape_refs[0][1]), *kernel, *stride, declared)
                    }
                    _ => "no padding policy applies to this layer kind".to_string(),
                };
                return Err(LayerError::DeclaredMismatch {
                    layer: spec.name.clone(),
                    computed,
                    declared: declared.clone(),
                    hint,
                });
            }
        }
        ledger.rows.push((spec.name.clone(), computed.clone()));
        prev = computed;
    }
    Ok(ledger)
}

fn lookup(
    ledger: &ShapeLedger,
    input_shape: &[usize],
    layer: &str,
    name: &str,
) -> Result<Vec<usize>> {
    if name == "input" {
        return Ok(input_shape.to_vec());
    }
    ledger
        .shape_of(name)
        .map(|s| s.to_vec())
        .ok_or_else(|| LayerError::UnknownInput {
            layer: layer.to_string(),
            input: name.to_string(),
        })
}

// ── Convolution ──────────────────────────────────────────────────────

struct ConvOp {
    x: TensorId,
    w: TensorId,
    b: TensorId,
    stride: (usize, usize),
    pad: (usize, usize), // (top, left); bottom/right are implied by shapes
}

/// 2-D convolution over (N, H, W, C) input with (kh, kw, c_in, c_out)
/// weights and a per-output-channel bias.
pub fn conv2d(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    stride: (usize, usize),
    padding: Padding,
) -> Result<TensorId> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if xs.len() != 4 {
        return Err(LayerError::Shape {
            layer: "conv2d".to_string(),
            detail: format!("input must be (N,H,W,C), got {xs:?}"),
        });
    }
    if ws.len() != 4 || ws[2] != xs[3] {
        return Err(LayerError::Shape {
            layer: "conv2d".to_string(),
            detail: format!("weights (kh,kw,c_in,c_out) = {ws:?} incompatible with input {xs:?}"),
        });
    }
    let (nb, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
    if tape.value(b).shape() != [cout] {
        return Err(LayerError::Shape {
            layer: "conv2d".to_string(),
            detail: format!("bias shape {:?}, expected [{cout}]", tape.value(b).shape()),
        });
    }
    let (oh, pt, _) = conv_extent("conv2d", h, kh, stride.0, padding, "height")?;
    let (ow, pl, _) = conv_extent("conv2d", wd, kw, stride.1, padding, "width")?;

    let xv = tape.value(x).values();
    let wv = tape.value(w).values();
    let bv = tape.value(b).values();
    let mut out = vec![0.0; nb * oh * ow * cout];
    let mut acc = vec![0.0; cout];
    for n in 0..nb {
        for oi in 0..oh {
            for oj in 0..ow {
                acc.copy_from_slice(bv);
                for ka in 0..kh {
                    let p = (oi * stride.0 + ka) as isize - pt as isize;
                    if p < 0 || p >= h as isize {
                        continue;
                    }
                    for kb in 0..kw {
                        let q = (oj * stride.1 + kb) as isize - pl as isize;
                        if q < 0 || q >= wd as isize {
                            continue;
                        }
                        let xoff = ((n * h + p as usize) * wd + q as usize) * cin;
                        let woff = (ka * kw + kb) * cin * cout;
                        for ci in 0..cin {
                            let xval = xv[xoff + ci];
                            let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                            for (a, w_o) in acc.iter_mut().zip(wrow) {
                                *a += xval * w_o;
                            }
                        }
                    }
                }
                let ooff = ((n * oh + oi) * ow + oj) * cout;
                out[ooff..ooff + cout].copy_from_slice(&acc);
            }
        }
    }
    let t = Tensor::new(vec![nb, oh, ow, cout], out)?;
    Ok(tape.push(
        t,
        Box::new(ConvOp {
            x,
            w,
            b,
            stride,
            pad: (pt, pl),
        }),
    ))
}

impl TapeOp for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, v: &[Tensor], out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.x.0];
        let w = &v[self.w.0];
        let (nb, h, wd, cin) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (kh, kw, cout) = {
            let s = w.shape();
            (s[0], s[1], s[3])
        };
        let (oh, ow) = (out.shape()[1], out.shape()[2]);
        let (pt, pl) = self.pad;
        let xv = x.values();
        let wv = w.values();
        let gv = g.values();

        let mut dx = vec![0.0; xv.len()];
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; cout];
        for n in 0..nb {
            for oi in 0..oh {
                for oj in 0..ow {
                    let goff = ((n * oh + oi) * ow + oj) * cout;
                    let grow = &gv[goff..goff + cout];
                    for (d, g_o) in db.iter_mut().zip(grow) {
                        *d += g_o;
                    }
                    for ka in 0..kh {
                        let p = (oi * self.stride.0 + ka) as isize - pt as isize;
                        if p < 0 || p >= h as isize {
                            continue;
                        }
                        for kb in 0..kw {
                            let q = (oj * self.stride.1 + kb) as isize - pl as isize;
                            if q < 0 || q >= wd as isize {
                                continue;
                            }
                            let xoff = ((n * h + p as usize) * wd + q as usize) * cin;
                            let woff = (ka * kw + kb) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xoff + ci];
                                let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                                let dwrow = &mut dw[woff + ci * cout..woff + (ci + 1) * cout];
                                let mut acc = 0.0;
                                for ((dw_o, w_o), g_o) in dwrow.iter_mut().zip(wrow).zip(grow) {
                                    *dw_o += xval * g_o;
                                    acc += w_o * g_o;
                                }
                                dx[xoff + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
        grads.accumulate(self.x, Tensor::new(x.shape().to_vec(), dx).unwrap());
        grads.accumulate(self.w, Tensor::new(w.shape().to_vec(), dw).unwrap());
        grads.accumulate(self.b, Tensor::new(vec![cout], db).unwrap());
    }
}

// ── Max pooling ──────────────────────────────────────────────────────

struct MaxPoolOp {
    x: TensorId,
    /// Flat input index of the window maximum, per output element.
    argmax: Vec<usize>,
}

/// Max pooling with floor or ceil output rounding. Ceil-mode windows that
/// overrun the edge are clipped to the valid region. Ties resolve to the
/// first element in scan order.
pub fn maxpool2d(
    tape: &mut Tape,
    x: TensorId,
    kernel: (usize, usize),
    stride: (usize, usize),
    rounding: PoolRounding,
) -> Result<TensorId> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(LayerError::Shape {
            layer: "maxpool".to_string(),
            detail: format!("input must be (N,H,W,C), got {xs:?}"),
        });
    }
    let (nb, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = pool_extent("maxpool", h, kernel.0, stride.0, rounding, "height")?;
    let ow = pool_extent("maxpool", wd, kernel.1, stride.1, rounding, "width")?;

    let xv = tape.value(x).values();
    let mut out = vec![0.0; nb * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for n in 0..nb {
        for oi in 0..oh {
            let p0 = oi * stride.0;
            let p1 = (p0 + kernel.0).min(h);
            for oj in 0..ow {
                let q0 = oj * stride.1;
                let q1 = (q0 + kernel.1).min(wd);
                let ooff = ((n * oh + oi) * ow + oj) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for p in p0..p1 {
                        for q in q0..q1 {
                            let idx = ((n * h + p) * wd + q) * c + ch;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[ooff + ch] = best;
                    argmax[ooff + ch] = best_idx;
                }
            }
        }
    }
    let t = Tensor::new(vec![nb, oh, ow, c], out)?;
    Ok(tape.push(t, Box::new(MaxPoolOp { x, argmax })))
}

impl TapeOp for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.x.0];
        let mut dx = vec![0.0; x.len()];
        for (gi, &src) in self.argmax.iter().enumerate() {
            dx[src] += g.values()[gi];
        }
        grads.accumulate(self.x, Tensor::new(x.shape().to_vec(), dx).unwrap());
    }
}

// ── Nearest-neighbor upsampling ──────────────────────────────────────

struct UpsampleOp {
    x: TensorId,
    factor: (usize, usize),
}

pub fn upsample_nearest(tape: &mut Tape, x: TensorId, factor: (usize, usize)) -> Result<TensorId> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(LayerError::Shape {
            layer: "upsample".to_string(),
            detail: format!("input must be (N,H,W,C), got {xs:?}"),
        });
    }
    let (nb, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h * factor.0, wd * factor.1);
    let xv = tape.value(x).values();
    let mut out = vec![0.0; nb * oh * ow * c];
    for n in 0..nb {
        for oi in 0..oh {
            let p = oi / factor.0;
            for oj in 0..ow {
                let q = oj / factor.1;
                let src = ((n * h + p) * wd + q) * c;
                let dst = ((n * oh + oi) * ow + oj) * c;
                out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            }
        }
    }
    let t = Tensor::new(vec![nb, oh, ow, c], out)?;
    Ok(tape.push(t, Box::new(UpsampleOp { x, factor })))
}

impl TapeOp for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample"
    }
    fn backward(&self, v: &[Tensor], out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.x.0];
        let s = x.shape();
        let (nb, h, wd, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (out.shape()[1], out.shape()[2]);
        let gv = g.values();
        let mut dx = vec![0.0; x.len()];
        for n in 0..nb {
            for oi in 0..oh {
                let p = oi / self.factor.0;
                for oj in 0..ow {
                    let q = oj / self.factor.1;
                    let src = ((n * h + p) * wd + q) * c;
                    let goff = ((n * oh + oi) * ow + oj) * c;
                    for ch in 0..c {
                        dx[src + ch] += gv[goff + ch];
                    }
                }
            }
        }
        grads.accumulate(self.x, Tensor::new(s.to_vec(), dx).unwrap());
    }
}

/// Upsample-then-convolve decoder block: nearest-neighbor growth by
/// `factor` followed by a stride-1 same-padded convolution.
pub fn upconv(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    factor: (usize, usize),
) -> Result<TensorId> {
    let up = upsample_nearest(tape, x, factor)?;
    conv2d(tape, up, w, b, (1, 1), Padding::Same)
}

// ── Crop ─────────────────────────────────────────────────────────────

struct CropOp {
    x: TensorId,
}

/// Keeps the top-left (target_h, target_w) region, removing bottom rows and
/// right columns.
pub fn crop2d(tape: &mut Tape, x: TensorId, target: (usize, usize)) -> Result<TensorId> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(LayerError::Shape {
            layer: "crop".to_string(),
            detail: format!("input must be (N,H,W,C), got {xs:?}"),
        });
    }
    let (nb, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
    if target.0 > h || target.1 > wd {
        return Err(LayerError::Shape {
            layer: "crop".to_string(),
            detail: format!("target {target:?} exceeds input ({h}, {wd})"),
        });
    }
    let xv = tape.value(x).values();
    let (th, tw) = target;
    let mut out = vec![0.0; nb * th * tw * c];
    for n in 0..nb {
        for i in 0..th {
            let src = (n * h + i) * wd * c;
            let dst = (n * th + i) * tw * c;
            out[dst..dst + tw * c].copy_from_slice(&xv[src..src + tw * c]);
        }
    }
    let t = Tensor::new(vec![nb, th, tw, c], out)?;
    Ok(tape.push(t, Box::new(CropOp { x })))
}

impl TapeOp for CropOp {
    fn name(&self) -> &'static str {
        "crop"
    }
    fn backward(&self, v: &[Tensor], out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.x.0];
        let s = x.shape();
        let (nb, h, wd, c) = (s[0], s[1], s[2], s[3]);
        let (th, tw) = (out.shape()[1], out.shape()[2]);
        let gv = g.values();
        let mut dx = vec![0.0; x.len()];
        for n in 0..nb {
            for i in 0..th {
                let dst = (n * h + i) * wd * c;
                let src = (n * th + i) * tw * c;
                dx[dst..dst + tw * c].copy_from_slice(&gv[src..src + tw * c]);
            }
        }
        grads.accumulate(self.x, Tensor::new(s.to_vec(), dx).unwrap());
    }
}

// ── Dense ────────────────────────────────────────────────────────────

struct DenseOp {
    x: TensorId,
    w: TensorId,
    b: TensorId,
}

/// Fully connected layer: (N, in) × (in, out) + bias.
pub fn dense(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(LayerError::Shape {
            layer: "dense".to_string(),
            detail: format!("input {xs:?} incompatible with weights {ws:?}"),
        });
    }
    let (nb, fin, fout) = (xs[0], xs[1], ws[1]);
    if tape.value(b).shape() != [fout] {
        return Err(LayerError::Shape {
            layer: "dense".to_string(),
            detail: format!("bias shape {:?}, expected [{fout}]", tape.value(b).shape()),
        });
    }
    let xv = tape.value(x).values();
    let wv = tape.value(w).values();
    let bv = tape.value(b).values();
    let mut out = vec![0.0; nb * fout];
    for n in 0..nb {
        let orow = &mut out[n * fout..(n + 1) * fout];
        orow.copy_from_slice(bv);
        for i in 0..fin {
            let xval = xv[n * fin + i];
            let wrow = &wv[i * fout..(i + 1) * fout];
            for (o, w_o) in orow.iter_mut().zip(wrow) {
                *o += xval * w_o;
            }
        }
    }
    let t = Tensor::new(vec![nb, fout], out)?;
    Ok(tape.push(t, Box::new(DenseOp { x, w, b })))
}

impl TapeOp for DenseOp {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn backward(&self, v: &[Tensor], _out: &Tensor, g: &Tensor, grads: &mut GradStore) {
        let x = &v[self.x.0];
        let w = &v[self.w.0];
        let (nb, fin) = (x.shape()[0], x.shape()[1]);
        let fout = w.shape()[1];
        let xv = x.values();
        let wv = w.values();
        let gv = g.values();
        let mut dx = vec![0.0; xv.len()];
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; fout];
        for n in 0..nb {
            let grow = &gv[n * fout..(n + 1) * fout];
            for (d, g_o) in db.iter_mut().zip(grow) {
                *d += g_o;
            }
            for i in 0..fin {
                let xval = xv[n * fin + i];
                let wrow = &wv[i * fout..(i + 1) * fout];
                let dwrow = &mut dw[i * fout..(i + 1) * fout];
                let mut acc = 0.0;
                for ((dw_o, w_o), g_o) in dwrow.iter_mut().zip(wrow).zip(grow) {
                    *dw_o += xval * g_o;
                    acc += w_o * g_o;
                }
                dx[n * fin + i] = acc;
            }
        }
        grads.accumulate(self.x, Tensor::new(x.shape().to_vec(), dx).unwrap());
        grads.accumulate(self.w, Tensor::new(w.shape().to_vec(), dw).unwrap());
        grads.accumulate(self.b, Tensor::new(vec![fout], db).unwrap());
    }
}

/// Flattens (N, ...) to (N, features).
pub fn flatten(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let xs = tape.value(x).shape().to_vec();
    if xs.is_empty() {
        return Err(LayerError::Shape {
            layer: "flatten".to_string(),
            detail: "scalar input".to_string(),
        });
    }
    let features: usize = xs[1..].iter().product();
    Ok(tape.reshape(x, vec![xs[0], features])?)
}

// ── Gradient suite ───────────────────────────────────────────────────

fn layer_to_tensor_err(e: LayerError) -> TensorError {
    match e {
        LayerError::Tensor(t) => t,
        other => TensorError::Domain {
            op: "layer",
            detail: other.to_string(),
        },
    }
}

/// Finite-difference checks for every layer kind at reduced shapes, across
/// `seeds` random initializations. Used by the gradcheck CLI and the
/// acceptance suite.
pub fn gradient_suite(seeds: u64) -> crate::tensor::Result<crate::tensor::CheckReport> {
    use crate::tensor::check_gradients;

    let mut report = crate::tensor::CheckReport::default();
    for seed in 0..seeds {
        let mut rng = crate::rng::Rng::stream(0xC0FFEE, seed);
        let mut rand = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
            )
            .unwrap()
        };
        let tag = |s: &str| format!("{s}[seed {seed}]");

        let params = [
            ("x", rand(&[2, 8, 10, 2])),
            ("w", rand(&[3, 3, 2, 3])),
            ("b", rand(&[3])),
        ];
        report.merge(check_gradients(&tag("conv-same-s2"), &params, |tape, ids| {
            let y = conv2d(tape, ids[0], ids[1], ids[2], (2, 2), Padding::Same)
                .map_err(layer_to_tensor_err)?;
            let a = tape.relu(y);
            tape.mean(a)
        })?);

        let params = [
            ("x", rand(&[1, 7, 9, 2])),
            ("w", rand(&[3, 4, 2, 2])),
            ("b", rand(&[2])),
        ];
        report.merge(check_gradients(&tag("conv-valid"), &params, |tape, ids| {
            let y = conv2d(tape, ids[0], ids[1], ids[2], (1, 1), Padding::Valid)
                .map_err(layer_to_tensor_err)?;
            let s = tape.sigmoid(y);
            tape.mean(s)
        })?);

        let params = [
            ("x", rand(&[1, 3, 4, 3])),
            ("w", rand(&[3, 3, 3, 2])),
            ("b", rand(&[2])),
        ];
        report.merge(check_gradients(&tag("upconv-x2"), &params, |tape, ids| {
            let y = upconv(tape, ids[0], ids[1], ids[2], (2, 2)).map_err(layer_to_tensor_err)?;
            tape.mean(y)
        })?);

        let params = [("x", rand(&[2, 7, 9, 2]))];
        report.merge(check_gradients(&tag("maxpool-floor"), &params, |tape, ids| {
            let y = maxpool2d(tape, ids[0], (2, 2), (2, 2), PoolRounding::Floor)
                .map_err(layer_to_tensor_err)?;
            let sq = tape.square(y);
            tape.mean(sq)
        })?);
        report.merge(check_gradients(&tag("maxpool-ceil"), &params, |tape, ids| {
            let y = maxpool2d(tape, ids[0], (3, 3), (2, 2), PoolRounding::Ceil)
                .map_err(layer_to_tensor_err)?;
            let sq = tape.square(y);
            tape.mean(sq)
        })?);

        let params = [
            ("x", rand(&[3, 5])),
            ("w", rand(&[5, 4])),
            ("b", rand(&[4])),
        ];
        report.merge(check_gradients(&tag("dense"), &params, |tape, ids| {
            let y = dense(tape, ids[0], ids[1], ids[2]).map_err(layer_to_tensor_err)?;
            let a = tape.relu(y);
            Ok(tape.sum(a))
        })?);

        let params = [("x", rand(&[2, 5, 6, 2]))];
        report.merge(check_gradients(&tag("crop"), &params, |tape, ids| {
            let y = crop2d(tape, ids[0], (4, 4)).map_err(layer_to_tensor_err)?;
            let sq = tape.square(y);
            tape.mean(sq)
        })?);

        let params = [("a", rand(&[2, 3, 4, 2])), ("b", rand(&[2, 2, 2, 2]))];
        report.merge(check_gradients(&tag("concat"), &params, |tape, ids| {
            let fa = flatten(tape, ids[0]).map_err(layer_to_tensor_err)?;
            let fb = flatten(tape, ids[1]).map_err(layer_to_tensor_err)?;
            let c = tape.concat(&[fa, fb], 1)?;
            let sq = tape.square(c);
            tape.mean(sq)
        })?);

        let params = [("x", rand(&[4, 6]))];
        report.merge(check_gradients(&tag("relu-sigmoid"), &params, |tape, ids| {
            let a = tape.relu(ids[0]);
            let s = tape.sigmoid(a);
            let sq = tape.square(s);
            tape.mean(sq)
        })?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn spatial(h: usize, w: usize, c: usize, rng: &mut Rng) -> Tensor {
        let n = h * w * c;
        Tensor::new(
            vec![1, h, w, c],
            (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn weights(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut Rng) -> Tensor {
        let n = kh * kw * cin * cout;
        Tensor::new(
            vec![kh, kw, cin, cout],
            (0..n).map(|_| rng.range(-0.5, 0.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_padding_reproduces_strided_table_rows() {
        let (o, _, _) = conv_extent("t", 94, 7, 2, Padding::Same, "height").unwrap();
        assert_eq!(o, 47);
        let (o, _, _) = conv_extent("t", 300, 7, 2, Padding::Same, "width").unwrap();
        assert_eq!(o, 150);
        let (o, _, _) = conv_extent("t", 47, 3, 4, Padding::Same, "height").unwrap();
        assert_eq!(o, 12);
        let (o, _, _) = conv_extent("t", 150, 3, 4, Padding::Same, "width").unwrap();
        assert_eq!(o, 38);
    }

    #[test]
    fn valid_and_pool_extents() {
        let (o, _, _) = conv_extent("t", 94, 3, 2, Padding::Valid, "height").unwrap();
        assert_eq!(o, 46);
        let (o, _, _) = conv_extent("t", 300, 3, 2, Padding::Valid, "width").unwrap();
        assert_eq!(o, 149);
        assert_eq!(
            pool_extent("t", 46, 4, 4, PoolRounding::Ceil, "height").unwrap(),
            12
        );
        assert_eq!(
            pool_extent("t", 149, 4, 4, PoolRounding::Ceil, "width").unwrap(),
            38
        );
        assert_eq!(
            pool_extent("t", 46, 4, 4, PoolRounding::Floor, "height").unwrap(),
            11
        );
    }

    #[test]
    fn ceil_pool_never_starts_past_the_edge() {
        // kernel 1, stride 4 on extent 4: a second window would start at 4.
        assert_eq!(pool_extent("t", 4, 1, 4, PoolRounding::Ceil, "h").unwrap(), 1);
    }

    #[test]
    fn identity_one_by_one_conv() {
        let mut rng = Rng::seed_from(2);
        let mut tape = Tape::new();
        let x = tape.leaf(spatial(5, 6, 3, &mut rng));
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.values_mut()[c * 3 + c] = 1.0;
        }
        let w = tape.leaf(w);
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = conv2d(&mut tape, x, w, b, (1, 1), Padding::Same).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(x).values());
    }

    #[test]
    fn hand_dense_example() {
        // W = [[1,1],[1,-1]], b = [0.5, 0], x = [2,3] -> [5.5, -1]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![0.5, 0.0]).unwrap());
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[5.5, -1.0]);
    }

    #[test]
    fn dense_identity_weights_pass_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.values_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(eye);
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pool_constant_input_is_idempotent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 12, 38, 2], 3.25));
        let y = maxpool2d(&mut tape, x, (2, 2), (2, 2), PoolRounding::Floor).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 6, 19, 2]);
        assert!(tape.value(y).values().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn upconv_and_crop_shapes() {
        let mut rng = Rng::seed_from(3);
        let mut tape = Tape::new();
        let x = tape.leaf(spatial(12, 38, 4, &mut rng));
        let w = tape.leaf(weights(3, 3, 4, 6, &mut rng));
        let b = tape.leaf(Tensor::zeros(&[6]));
        let y = upconv(&mut tape, x, w, b, (4, 4)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 48, 152, 6]);
        let cropped = crop2d(&mut tape, y, (47, 150)).unwrap();
        assert_eq!(tape.value(cropped).shape(), &[1, 47, 150, 6]);
    }

    #[test]
    fn crop_removes_bottom_and_right() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..12).map(f64::from).collect();
        let x = tape.leaf(Tensor::new(vec![1, 3, 4, 1], vals).unwrap());
        let y = crop2d(&mut tape, x, (2, 2)).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn resolver_rejects_wrong_declared_shape_with_hint() {
        let specs = vec![LayerSpec::new(
            "c1",
            Wiring::Prev,
            LayerKind::Conv {
                kernel: (3, 3),
                stride: (2, 2),
                channels_out: 8,
                padding: Padding::Valid,
                activation: Activation::Relu,
            },
        )
        .declared(&[47, 150, 8])];
        let err = resolve_shapes(&specs, (94, 300, 2)).unwrap_err();
        match err {
            LayerError::DeclaredMismatch { hint, computed, .. } => {
                assert_eq!(computed, vec![46, 149, 8]);
                assert!(hint.contains("same->47"), "hint: {hint}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn resolver_reports_unknown_wiring() {
        let specs = vec![LayerSpec::new(
            "cat",
            Wiring::Many(vec!["missing".to_string()]),
            LayerKind::Concat,
        )];
        assert!(matches!(
            resolve_shapes(&specs, (8, 8, 2)),
            Err(LayerError::UnknownInput { .. })
        ));
    }

    #[test]
    fn full_gradient_suite_single_seed() {
        let report = gradient_suite(1).unwrap();
        assert!(report.passed(), "{:?}", report.lines());
    }
}
