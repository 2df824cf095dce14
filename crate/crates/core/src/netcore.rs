//! Small differentiable classifiers.
//!
//! The layer set is closed (dense, relu, small conv2d, flatten), so forward,
//! reverse-mode parameter gradients, and a forward-mode Jacobian-vector
//! product over logits are written as explicit per-layer rules rather than a
//! general tape. The two primitives the meta-gradient needs are
//! [`Network::grad_params`] (reverse mode) and [`Network::logits_jvp`]
//! (forward mode).

use std::io::{Read, Write};
use std::path::Path;

use crate::labelbank::SoftLabelMatrix;
use crate::ndcore::{entropy, softmax_rows, Rng, Tensor};
use crate::{Error, Result};

/// A layer descriptor. Shapes are fully explicit; nothing is inferred.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Dense { inp: usize, out: usize },
    Relu,
    /// Stride-1, valid-padding convolution over an explicit input extent.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        in_h: usize,
        in_w: usize,
    },
    Flatten,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { inp, out } => inp * out + out,
            Layer::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                ..
            } => out_ch * in_ch * kh * kw + out_ch,
            Layer::Relu | Layer::Flatten => 0,
        }
    }

    fn descriptor(&self) -> String {
        match *self {
            Layer::Dense { inp, out } => format!("dense:{inp},{out}"),
            Layer::Relu => "relu".to_string(),
            Layer::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                in_h,
                in_w,
            } => format!("conv:{in_ch},{out_ch},{kh},{kw},{in_h},{in_w}"),
            Layer::Flatten => "flatten".to_string(),
        }
    }
}

/// Ordered layer stack plus the (explicit) input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    /// `[d]` for flat features or `[c, h, w]` for images.
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Topology {
    pub fn new(input: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let t = Topology { input, layers };
        t.stage_shapes()?;
        Ok(t)
    }

    /// Shape after each layer; validates the whole stack.
    fn stage_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.iter().any(|&e| e == 0) {
            return Err(Error::dimension(
                "Topology",
                format!("bad input shape {:?}", self.input),
            ));
        }
        let mut shapes = vec![self.input.clone()];
        for (li, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match *layer {
                Layer::Dense { inp, out } => {
                    if cur.len() != 1 || cur[0] != inp {
                        return Err(Error::dimension(
                            "Topology",
                            format!("layer {li}: dense expects flat [{inp}], got {cur:?}"),
                        ));
                    }
                    vec![out]
                }
                Layer::Relu => cur,
                Layer::Conv2d {
                    in_ch,
                    kh,
                    kw,
                    in_h,
                    in_w,
                    out_ch,
                } => {
                    if cur != [in_ch, in_h, in_w] {
                        return Err(Error::dimension(
                            "Topology",
                            format!(
                                "layer {li}: conv expects [{in_ch}, {in_h}, {in_w}], got {cur:?}"
                            ),
                        ));
                    }
                    if kh == 0 || kw == 0 || kh > in_h || kw > in_w {
                        return Err(Error::dimension(
                            "Topology",
                            format!("layer {li}: kernel {kh}x{kw} too large for {in_h}x{in_w}"),
                        ));
                    }
                    vec![out_ch, in_h - kh + 1, in_w - kw + 1]
                }
                Layer::Flatten => vec![cur.iter().product()],
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Length of the final layer's output (the class count for classifiers).
    pub fn output_len(&self) -> Result<usize> {
        Ok(self.stage_shapes()?.last().unwrap().iter().product())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Compact text form, e.g. `input:1x28x28|conv:1,8,3,3,28,28|relu|flatten|dense:5408,10`.
    pub fn descriptor(&self) -> String {
        let dims: Vec<String> = self.input.iter().map(|d| d.to_string()).collect();
        let mut parts = vec![format!("input:{}", dims.join("x"))];
        parts.extend(self.layers.iter().map(Layer::descriptor));
        parts.join("|")
    }

    pub fn parse_descriptor(s: &str) -> Result<Topology> {
        let mut input = None;
        let mut layers = Vec::new();
        let bad = |detail: String| Error::argument("Topology::parse_descriptor", detail);
        let ints = |spec: &str, n: usize| -> Result<Vec<usize>> {
            let vals: std::result::Result<Vec<usize>, _> =
                spec.split(',').map(str::parse).collect();
            let vals = vals.map_err(|e| bad(format!("bad integer in {spec:?}: {e}")))?;
            if vals.len() != n {
                return Err(bad(format!("expected {n} fields in {spec:?}")));
            }
            Ok(vals)
        };
        for part in s.split('|') {
            if let Some(dims) = part.strip_prefix("input:") {
                let vals: std::result::Result<Vec<usize>, _> =
                    dims.split('x').map(str::parse).collect();
                input = Some(vals.map_err(|e| bad(format!("bad input dims {dims:?}: {e}")))?);
            } else if let Some(spec) = part.strip_prefix("dense:") {
                let v = ints(spec, 2)?;
                layers.push(Layer::Dense { inp: v[0], out: v[1] });
            } else if let Some(spec) = part.strip_prefix("conv:") {
                let v = ints(spec, 6)?;
                layers.push(Layer::Conv2d {
                    in_ch: v[0],
                    out_ch: v[1],
                    kh: v[2],
                    kw: v[3],
                    in_h: v[4],
                    in_w: v[5],
                });
            } else if part == "relu" {
                layers.push(Layer::Relu);
            } else if part == "flatten" {
                layers.push(Layer::Flatten);
            } else {
                return Err(bad(format!("unknown layer {part:?}")));
            }
        }
        let input = input.ok_or_else(|| bad("descriptor missing input:".to_string()))?;
        Topology::new(input, layers)
    }
}

/// `[d] -> hidden... -> classes` dense stack with relu between layers.
pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Topology> {
    let mut layers = Vec::new();
    let mut cur = input_dim;
    for &h in hidden {
        layers.push(Layer::Dense { inp: cur, out: h });
        layers.push(Layer::Relu);
        cur = h;
    }
    layers.push(Layer::Dense { inp: cur, out: classes });
    Topology::new(vec![input_dim], layers)
}

/// Two small conv layers then two dense layers. Kernel extents shrink to fit
/// tiny inputs, so the same constructor serves images and low-dimensional
/// feature rows viewed as `[1, 1, d]`.
pub fn small_convnet(input: [usize; 3], channels: usize, dense_width: usize, classes: usize) -> Result<Topology> {
    let [c, h, w] = input;
    let (kh, kw) = (h.min(3), w.min(3));
    let (h1, w1) = (h - kh + 1, w - kw + 1);
    let flat = channels * h1 * w1;
    Topology::new(
        vec![c, h, w],
        vec![
            Layer::Conv2d { in_ch: c, out_ch: channels, kh, kw, in_h: h, in_w: w },
            Layer::Relu,
            Layer::Conv2d { in_ch: channels, out_ch: channels, kh: 1, kw: 1, in_h: h1, in_w: w1 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense { inp: flat, out: dense_width },
            Layer::Relu,
            Layer::Dense { inp: dense_width, out: classes },
        ],
    )
}

/// A classifier: a topology plus its flat `f64` parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    topology: Topology,
    params: Vec<f64>,
}

struct ForwardTrace {
    /// `acts[0]` is the input batch; `acts[i + 1]` is layer `i`'s output.
    acts: Vec<Tensor>,
}

impl Network {
    /// He-style init: dense and conv weights from a zero-mean normal with
    /// `std = sqrt(2 / fan_in)`, biases zero.
    pub fn init(topology: Topology, rng: &mut Rng) -> Network {
        let mut params = vec![0.0; topology.param_count()];
        let mut off = 0;
        for layer in &topology.layers {
            match *layer {
                Layer::Dense { inp, out } => {
                    let std = (2.0 / inp as f64).sqrt();
                    for p in &mut params[off..off + inp * out] {
                        *p = std * rng.normal();
                    }
                    off += inp * out + out;
                }
                Layer::Conv2d { in_ch, out_ch, kh, kw, .. } => {
                    let fan_in = in_ch * kh * kw;
                    let n_w = out_ch * fan_in;
                    let std = (2.0 / fan_in as f64).sqrt();
                    for p in &mut params[off..off + n_w] {
                        *p = std * rng.normal();
                    }
                    off += n_w + out_ch;
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        Network { topology, params }
    }

    pub fn zeros(topology: Topology) -> Network {
        let n = topology.param_count();
        Network { topology, params: vec![0.0; n] }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dimension(
                "Network::set_params",
                format!("{} values for {} params", params.len(), self.params.len()),
            ));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Network> {
        if params.len() != self.params.len() {
            return Err(Error::dimension(
                "Network::with_params",
                format!("{} values for {} params", params.len(), self.params.len()),
            ));
        }
        Ok(Network { topology: self.topology.clone(), params })
    }

    pub fn class_count(&self) -> usize {
        self.topology.output_len().expect("validated at construction")
    }

    fn check_input(&self, x: &Tensor, op: &'static str) -> Result<usize> {
        if x.rank() != 2 || x.cols() != self.topology.input_len() {
            return Err(Error::dimension(
                op,
                format!(
                    "input shape {:?}, expected [batch, {}]",
                    x.shape(),
                    self.topology.input_len()
                ),
            ));
        }
        Ok(x.rows())
    }

    /// Logits for a batch of flattened inputs, shape `[batch, classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.acts.pop().unwrap())
    }

    fn forward_trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x, "Network::forward")?;
        let mut acts = vec![x.clone()];
        let mut off = 0;
        for layer in &self.topology.layers {
            let cur = acts.last().unwrap();
            let next = self.layer_forward(layer, off, cur);
            off += layer.param_count();
            acts.push(next);
        }
        Ok(ForwardTrace { acts })
    }

    fn layer_forward(&self, layer: &Layer, off: usize, x: &Tensor) -> Tensor {
        let b = x.rows();
        match *layer {
            Layer::Dense { inp, out } => {
                let w = &self.params[off..off + inp * out];
                let bias = &self.params[off + inp * out..off + inp * out + out];
                dense_forward(x, w, bias, inp, out)
            }
            Layer::Relu => Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            )
            .unwrap(),
            Layer::Conv2d { in_ch, out_ch, kh, kw, in_h, in_w } => {
                let n_w = out_ch * in_ch * kh * kw;
                let w = &self.params[off..off + n_w];
                let bias = &self.params[off + n_w..off + n_w + out_ch];
                let (oh, ow) = (in_h - kh + 1, in_w - kw + 1);
                let mut out = Tensor::zeros(&[b, out_ch * oh * ow]);
                for bi in 0..b {
                    conv_forward(
                        x.row(bi),
                        w,
                        Some(bias),
                        out.row_mut(bi),
                        in_ch,
                        out_ch,
                        kh,
                        kw,
                        in_h,
                        in_w,
                    );
                }
                out
            }
            Layer::Flatten => x.clone(),
        }
    }

    /// Mean soft cross-entropy over the batch.
    pub fn loss_ce_soft(&self, x: &Tensor, labels: &SoftLabelMatrix) -> Result<f64> {
        let logits = self.forward(x)?;
        ce_soft(&logits, labels)
    }

    /// Exact reverse-mode gradient of the mean batch CE w.r.t. the flat
    /// parameter vector, plus the loss value from the same pass.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &SoftLabelMatrix) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward_trace(x)?;
        let logits = trace.acts.last().unwrap();
        check_label_shape(logits, labels.tensor(), "Network::loss_and_grad")?;
        let loss = ce_rows(logits, labels.tensor());
        let dlogits = ce_logit_grad(logits, labels)?;
        let grad = self.backward_from_logit_grad(&trace, &dlogits);
        Ok((loss, grad))
    }

    pub fn grad_params(&self, x: &Tensor, labels: &SoftLabelMatrix) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(x, labels)?.1)
    }

    /// Reverse pass from an arbitrary gradient w.r.t. the logits. This is the
    /// shared backbone behind every loss in the crate.
    pub fn grad_from_logit_grad(&self, x: &Tensor, dlogits: &Tensor) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        let logits = trace.acts.last().unwrap();
        if dlogits.shape() != logits.shape() {
            return Err(Error::dimension(
                "Network::grad_from_logit_grad",
                format!("dlogits {:?} vs logits {:?}", dlogits.shape(), logits.shape()),
            ));
        }
        Ok(self.backward_from_logit_grad(&trace, dlogits))
    }

    fn backward_from_logit_grad(&self, trace: &ForwardTrace, dlogits: &Tensor) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut d_out = dlogits.clone();
        let mut offsets = Vec::with_capacity(self.topology.layers.len());
        let mut off = 0;
        for layer in &self.topology.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        for (li, layer) in self.topology.layers.iter().enumerate().rev() {
            let x = &trace.acts[li];
            let off = offsets[li];
            let b = x.rows();
            d_out = match *layer {
                Layer::Dense { inp, out } => {
                    let w = &self.params[off..off + inp * out];
                    dense_backward(x, w, &d_out, &mut grad[off..off + inp * out + out], inp, out)
                }
                Layer::Relu => Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(d_out.data())
                        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
                        .collect(),
                )
                .unwrap(),
                Layer::Conv2d { in_ch, out_ch, kh, kw, in_h, in_w } => {
                    let n_w = out_ch * in_ch * kh * kw;
                    let w = &self.params[off..off + n_w];
                    let mut d_in = Tensor::zeros(&[b, in_ch * in_h * in_w]);
                    let (gw, gb) = grad[off..off + n_w + out_ch].split_at_mut(n_w);
                    for bi in 0..b {
                        conv_backward(
                            x.row(bi),
                            w,
                            d_out.row(bi),
                            d_in.row_mut(bi),
                            gw,
                            gb,
                            in_ch,
                            out_ch,
                            kh,
                            kw,
                            in_h,
                            in_w,
                        );
                    }
                    d_in
                }
                Layer::Flatten => d_out,
            };
        }
        grad
    }

    /// Forward-mode Jacobian-vector product of the logits w.r.t. the
    /// parameters: row `i` is `(d logits_i / d theta) . direction`.
    pub fn logits_jvp(&self, x: &Tensor, direction: &[f64]) -> Result<Tensor> {
        self.check_input(x, "Network::logits_jvp")?;
        if direction.len() != self.params.len() {
            return Err(Error::dimension(
                "Network::logits_jvp",
                format!("direction length {} vs {} params", direction.len(), self.params.len()),
            ));
        }
        let b = x.rows();
        let mut act = x.clone();
        let mut tan = Tensor::zeros(&[b, x.cols()]);
        let mut off = 0;
        for layer in &self.topology.layers {
            let (next_act, next_tan) = match *layer {
                Layer::Dense { inp, out } => {
                    let w = &self.params[off..off + inp * out];
                    let bias = &self.params[off + inp * out..off + inp * out + out];
                    let dw = &direction[off..off + inp * out];
                    let dbias = &direction[off + inp * out..off + inp * out + out];
                    let a = dense_forward(&act, w, bias, inp, out);
                    // dy = x dW^T + dx W^T + db
                    let t1 = dense_forward(&act, dw, dbias, inp, out);
                    let t2 = dense_forward(&tan, w, &vec![0.0; out], inp, out);
                    (a, t1.add(&t2).unwrap())
                }
                Layer::Relu => {
                    let a = self.layer_forward(layer, off, &act);
                    let t = Tensor::new(
                        act.shape().to_vec(),
                        act.data()
                            .iter()
                            .zip(tan.data())
                            .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
                            .collect(),
                    )
                    .unwrap();
                    (a, t)
                }
                Layer::Conv2d { in_ch, out_ch, kh, kw, in_h, in_w } => {
                    let n_w = out_ch * in_ch * kh * kw;
                    let w = &self.params[off..off + n_w];
                    let bias = &self.params[off + n_w..off + n_w + out_ch];
                    let dw = &direction[off..off + n_w];
                    let dbias = &direction[off + n_w..off + n_w + out_ch];
                    let (oh, ow) = (in_h - kh + 1, in_w - kw + 1);
                    let mut a = Tensor::zeros(&[b, out_ch * oh * ow]);
                    let mut t = Tensor::zeros(&[b, out_ch * oh * ow]);
                    for bi in 0..b {
                        conv_forward(act.row(bi), w, Some(bias), a.row_mut(bi), in_ch, out_ch, kh, kw, in_h, in_w);
                        // dy = conv(x, dW) + db  +  conv(dx, W)
                        conv_forward(act.row(bi), dw, Some(dbias), t.row_mut(bi), in_ch, out_ch, kh, kw, in_h, in_w);
                        let mut t2 = vec![0.0; out_ch * oh * ow];
                        conv_forward(tan.row(bi), w, None, &mut t2, in_ch, out_ch, kh, kw, in_h, in_w);
                        for (tv, &t2v) in t.row_mut(bi).iter_mut().zip(&t2) {
                            *tv += t2v;
                        }
                    }
                    (a, t)
                }
                Layer::Flatten => (act.clone(), tan.clone()),
            };
            off += layer.param_count();
            act = next_act;
            tan = next_tan;
        }
        Ok(tan)
    }

    /// Argmax-accuracy against hard targets.
    pub fn accuracy(&self, x: &Tensor, targets: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        if targets.len() != logits.rows() {
            return Err(Error::dimension(
                "Network::accuracy",
                format!("{} targets for {} rows", targets.len(), logits.rows()),
            ));
        }
        let mut hits = 0usize;
        for (i, &y) in targets.iter().enumerate() {
            if argmax(logits.row(i)) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / targets.len() as f64)
    }
}

/// Index of the largest entry; ties break toward the smaller index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn dense_forward(x: &Tensor, w: &[f64], bias: &[f64], inp: usize, out: usize) -> Tensor {
    let b = x.rows();
    debug_assert_eq!(x.cols(), inp);
    let mut y = Tensor::zeros(&[b, out]);
    for bi in 0..b {
        let xr = x.row(bi);
        let yr = y.row_mut(bi);
        yr.copy_from_slice(bias);
        for (o, yo) in yr.iter_mut().enumerate() {
            let wrow = &w[o * inp..(o + 1) * inp];
            let mut acc = 0.0;
            for (wv, xv) in wrow.iter().zip(xr) {
                acc += wv * xv;
            }
            *yo += acc;
        }
    }
    y
}

/// Returns d_in; accumulates weight/bias gradients into `grad`.
fn dense_backward(x: &Tensor, w: &[f64], d_out: &Tensor, grad: &mut [f64], inp: usize, out: usize) -> Tensor {
    let b = x.rows();
    let (gw, gb) = grad.split_at_mut(inp * out);
    let mut d_in = Tensor::zeros(&[b, inp]);
    for bi in 0..b {
        let xr = x.row(bi);
        let dr = d_out.row(bi);
        let di = d_in.row_mut(bi);
        for o in 0..out {
            let d = dr[o];
            gb[o] += d;
            let gw_row = &mut gw[o * inp..(o + 1) * inp];
            let w_row = &w[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gw_row[i] += d * xr[i];
                di[i] += d * w_row[i];
            }
        }
    }
    d_in
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    in_ch: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    in_h: usize,
    in_w: usize,
) {
    let (oh, ow) = (in_h - kh + 1, in_w - kw + 1);
    for oc in 0..out_ch {
        let base = if let Some(b) = bias { b[oc] } else { 0.0 };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = base;
                for ic in 0..in_ch {
                    let w_base = ((oc * in_ch + ic) * kh) * kw;
                    let x_base = ic * in_h * in_w;
                    for ky in 0..kh {
                        let wr = &w[w_base + ky * kw..w_base + (ky + 1) * kw];
                        let xr = &x[x_base + (oy + ky) * in_w + ox..x_base + (oy + ky) * in_w + ox + kw];
                        for (wv, xv) in wr.iter().zip(xr) {
                            acc += wv * xv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    d_in: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    in_ch: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    in_h: usize,
    in_w: usize,
) {
    let (oh, ow) = (in_h - kh + 1, in_w - kw + 1);
    for oc in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = d_out[(oc * oh + oy) * ow + ox];
                gb[oc] += d;
                for ic in 0..in_ch {
                    let w_base = ((oc * in_ch + ic) * kh) * kw;
                    let x_base = ic * in_h * in_w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let xi = x_base + (oy + ky) * in_w + (ox + kx);
                            gw[w_base + ky * kw + kx] += d * x[xi];
                            d_in[xi] += d * w[w_base + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
}

fn check_label_shape(logits: &Tensor, rows: &Tensor, op: &'static str) -> Result<()> {
    if logits.shape() != rows.shape() {
        return Err(Error::dimension(
            op,
            format!("labels {:?} vs logits {:?}", rows.shape(), logits.shape()),
        ));
    }
    Ok(())
}

/// Mean over the batch of `-sum_k p_k log softmax(logits)_k`.
pub fn ce_soft(logits: &Tensor, labels: &SoftLabelMatrix) -> Result<f64> {
    check_label_shape(logits, labels.tensor(), "ce_soft")?;
    Ok(ce_rows(logits, labels.tensor()))
}

/// CE against arbitrary (not necessarily normalized) label rows. The
/// finite-difference meta-gradient route perturbs single label entries, so
/// this path must not require distribution rows.
pub(crate) fn ce_rows(logits: &Tensor, rows: &Tensor) -> f64 {
    let b = logits.rows();
    let mut total = 0.0;
    for i in 0..b {
        let lp = crate::ndcore::log_softmax(logits.row(i));
        total += rows
            .row(i)
            .iter()
            .zip(&lp)
            .map(|(&p, &l)| -p * l)
            .sum::<f64>();
    }
    total / b as f64
}

/// Gradient of the mean batch CE w.r.t. the logits:
/// `(softmax(logits) - p) / batch_size`, row by row.
pub fn ce_logit_grad(logits: &Tensor, labels: &SoftLabelMatrix) -> Result<Tensor> {
    check_label_shape(logits, labels.tensor(), "ce_logit_grad")?;
    let b = logits.rows() as f64;
    let s = softmax_rows(logits);
    Ok(Tensor::new(
        logits.shape().to_vec(),
        s.data()
            .iter()
            .zip(labels.tensor().data())
            .map(|(&sv, &pv)| (sv - pv) / b)
            .collect(),
    )?)
}

/// Logit gradient of mean CE against arbitrary rows: since CE is affine in
/// the label row, `d/dlogit_j = (softmax_j * sum(p) - p_j) / B`, which
/// reduces to `(softmax - p) / B` for distribution rows.
pub(crate) fn ce_rows_logit_grad(logits: &Tensor, rows: &Tensor) -> Tensor {
    let b = logits.rows();
    let s = softmax_rows(logits);
    let mut out = Tensor::zeros(&[b, logits.cols()]);
    for i in 0..b {
        let psum: f64 = rows.row(i).iter().sum();
        let sr = s.row(i);
        let pr = rows.row(i);
        let or = out.row_mut(i);
        for j in 0..sr.len() {
            or[j] = (sr[j] * psum - pr[j]) / b as f64;
        }
    }
    out
}

/// Mean entropy of the batch's softmax predictions (nats).
pub fn mean_prediction_entropy(logits: &Tensor) -> f64 {
    let s = softmax_rows(logits);
    (0..s.rows()).map(|i| entropy(s.row(i))).sum::<f64>() / s.rows() as f64
}

/// SGD with classic momentum, decoupled-in-name-only L2 weight decay folded
/// into the gradient, and a piecewise-constant learning-rate multiplier
/// schedule keyed by epoch:
///
/// ```text
/// g'  = g + weight_decay * theta
/// v   = momentum * v + g'
/// theta = theta - lr * mult(epoch) * v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)` pairs, ascending by epoch; the last pair whose
    /// epoch is `<= current` wins. Empty means multiplier 1 throughout.
    pub schedule: Vec<(usize, f64)>,
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, schedule: Vec<(usize, f64)>) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::argument("SgdState::new", format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::argument(
                "SgdState::new",
                format!("momentum must be in [0, 1), got {momentum}"),
            ));
        }
        if weight_decay < 0.0 {
            return Err(Error::argument(
                "SgdState::new",
                format!("weight_decay must be nonnegative, got {weight_decay}"),
            ));
        }
        if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::argument(
                "SgdState::new",
                "schedule epochs must be strictly ascending",
            ));
        }
        Ok(SgdState { lr, momentum, weight_decay, schedule, velocity: Vec::new() })
    }

    pub fn plain(lr: f64) -> Self {
        SgdState::new(lr, 0.0, 0.0, Vec::new()).expect("positive lr")
    }

    /// Effective learning rate at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mult = self
            .schedule
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .last()
            .map_or(1.0, |&(_, m)| m);
        self.lr * mult
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], epoch: usize) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::dimension(
                "sgd_step",
                format!("{} params vs {} grads", params.len(), grad.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; params.len()];
        } else if self.velocity.len() != params.len() {
            return Err(Error::dimension(
                "sgd_step",
                format!("velocity length {} vs {} params", self.velocity.len(), params.len()),
            ));
        }
        let lr = self.lr_at(epoch);
        for ((p, &g), v) in params.iter_mut().zip(grad).iter_mut_zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

// Small zip helper so the update loop reads linearly.
trait IterMutZip<'a, T>: Sized {
    fn iter_mut_zip(self, other: &'a mut [T]) -> std::iter::Zip<Self, std::slice::IterMut<'a, T>>
    where
        Self: Iterator;
}

impl<'a, I: Iterator, T> IterMutZip<'a, T> for I {
    fn iter_mut_zip(self, other: &'a mut [T]) -> std::iter::Zip<Self, std::slice::IterMut<'a, T>> {
        self.zip(other.iter_mut())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SOFTNET1";

/// Writes a parameter checkpoint: magic, topology descriptor, param count,
/// then the flat little-endian `f64` parameter array.
pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    let desc = net.topology.descriptor();
    w.write_all(&(desc.len() as u32).to_le_bytes())?;
    w.write_all(desc.as_bytes())?;
    w.write_all(&(net.params.len() as u64).to_le_bytes())?;
    for &p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |offset: usize, detail: &str| Error::format(path, offset as u64, detail);

    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let mut off = 8usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fail(*off, "truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let desc_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let desc = std::str::from_utf8(take(&mut off, desc_len)?)
        .map_err(|_| fail(off, "descriptor is not utf-8"))?
        .to_string();
    let topology = Topology::parse_descriptor(&desc)?;
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    if count != topology.param_count() {
        return Err(fail(off, "param count disagrees with topology"));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    if off != bytes.len() {
        return Err(fail(off, "trailing bytes"));
    }
    Ok(Network { topology, params })
}
