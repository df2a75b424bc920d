//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! The tape only knows the handful of layer kinds a sub-model is built from:
//! grouped 2-D convolution, batch standardization without affine terms,
//! ReLU, elementwise add, channel concatenation, global average pooling and
//! a fully connected layer.

use std::borrow::Cow;

use super::tensor::Tensor;

/// Variance floor inside the batch-norm denominator.
pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2-D convolution.
///
/// Output position `o` along an axis reads input position
/// `o * stride + tap + offset - padding`. A non-zero `offset` shifts the
/// sampling grid, which is how the second path of a factorized reduction
/// samples the odd pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub offset: usize,
}

impl ConvGeom {
    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        let span = input + 2 * self.padding;
        assert!(
            span >= kernel + self.offset,
            "kernel {kernel} (offset {}) does not fit input {input}",
            self.offset
        );
        (span - kernel - self.offset) / self.stride + 1
    }

    /// Output indices `o` in `0..out` whose input position is inside `0..input`.
    fn valid_range(&self, tap: usize, input: usize, out: usize) -> (usize, usize) {
        let shift = (tap + self.offset) as isize - self.padding as isize;
        let s = self.stride as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) + s - 1) / s
        };
        // largest o with o*s + shift <= input - 1
        let top = input as isize - 1 - shift;
        let hi = if top < 0 {
            0
        } else {
            (top / s + 1).min(out as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Concat { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`]; `None` for values that do not feed the output
/// or do not require gradients.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Cow<'a, Tensor>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(Cow::Owned(out), Op::Conv { x, w, geom }, rg)
    }

    pub fn batch_norm(&mut self, x: Var) -> Var {
        let (out, inv_std) = batch_norm_forward(self.value(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::BatchNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::Add { a, b }, rg)
    }

    /// Concatenates two `(N, C, H, W)` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.dims4();
        let (nb, cb, hb, wb) = tb.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            data.extend_from_slice(&ta.data()[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], data).expect("concat shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::Concat { a, b }, rg)
    }

    /// `(N, C, H, W) -> (N, C)`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let plane = h * w;
        let data = t
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data).expect("pool shape");
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::GlobalAvgPool { x }, rg)
    }

    /// `x: (N, in)`, `w: (out, in)`, `b: (out)` to `(N, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, fin) = tx.dims2();
        let (fout, win) = tw.dims2();
        assert_eq!(fin, win, "linear input mismatch");
        assert_eq!(tb.shape(), [fout], "linear bias mismatch");
        let mut data = vec![0.0; n * fout];
        for s in 0..n {
            let row = &tx.data()[s * fin..(s + 1) * fin];
            for o in 0..fout {
                let wr = &tw.data()[o * fin..(o + 1) * fin];
                data[s * fout + o] =
                    tb.data()[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![n, fout], data).expect("linear shape");
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Cow::Owned(out), Op::Linear { x, w, b }, rg)
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `output`) through the tape.
    pub fn backward(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, geom } => {
                    let (dx, dw) =
                        conv2d_backward(self.value(*x), self.value(*w), &dy, *geom, self.rg(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::BatchNorm { x, inv_std } => {
                    let dx = batch_norm_backward(&node.value, inv_std, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy.clone());
                    }
                    accumulate(&mut grads, *a, dy);
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4();
                    let cb = self.value(*b).dims4().1;
                    let plane = h * w;
                    let mut da = Vec::with_capacity(n * ca * plane);
                    let mut db = Vec::with_capacity(n * cb * plane);
                    for s in 0..n {
                        let base = s * (ca + cb) * plane;
                        da.extend_from_slice(&dy.data()[base..base + ca * plane]);
                        db.extend_from_slice(
                            &dy.data()[base + ca * plane..base + (ca + cb) * plane],
                        );
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, ca, h, w], da).unwrap());
                    accumulate(&mut grads, *b, Tensor::new(vec![n, cb, h, w], db).unwrap());
                }
                Op::GlobalAvgPool { x } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let plane = h * w;
                    let inv = 1.0 / plane as f64;
                    let mut data = Vec::with_capacity(n * c * plane);
                    for &g in dy.data() {
                        data.extend(std::iter::repeat_n(g * inv, plane));
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, c, h, w], data).unwrap());
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, fin) = tx.dims2();
                    let fout = tw.dims2().0;
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * fin];
                        for s in 0..n {
                            for o in 0..fout {
                                let g = dy.data()[s * fout + o];
                                let wr = &tw.data()[o * fin..(o + 1) * fin];
                                for (d, wv) in dx[s * fin..(s + 1) * fin].iter_mut().zip(wr) {
                                    *d += g * wv;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(vec![n, fin], dx).unwrap());
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; fout * fin];
                        for s in 0..n {
                            let row = &tx.data()[s * fin..(s + 1) * fin];
                            for o in 0..fout {
                                let g = dy.data()[s * fout + o];
                                for (d, xv) in dw[o * fin..(o + 1) * fin].iter_mut().zip(row) {
                                    *d += g * xv;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::new(vec![fout, fin], dw).unwrap());
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; fout];
                        for s in 0..n {
                            for o in 0..fout {
                                db[o] += dy.data()[s * fout + o];
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![fout], db).unwrap());
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, cin_g, kh, kw) = w.dims4();
    let groups = geom.groups;
    assert!(
        groups > 0 && cin % groups == 0 && cout % groups == 0,
        "bad groups"
    );
    assert_eq!(cin / groups, cin_g, "conv weight input channels");
    let cout_g = cout / groups;
    let ho = geom.output_len(h, kh);
    let wo = geom.output_len(wd, kw);
    let mut out = vec![0.0; n * cout * ho * wo];
    let xd = x.data();
    let wdata = w.data();
    let s = geom.stride;
    let base = geom.offset as isize - geom.padding as isize;

    for sample in 0..n {
        for oc in 0..cout {
            let g = oc / cout_g;
            let o_plane =
                &mut out[(sample * cout + oc) * ho * wo..(sample * cout + oc + 1) * ho * wo];
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let x_plane = &xd[(sample * cin + ic) * h * wd..(sample * cin + ic + 1) * h * wd];
                for ki in 0..kh {
                    let (oh_lo, oh_hi) = geom.valid_range(ki, h, ho);
                    for kj in 0..kw {
                        let wv = wdata[((oc * cin_g + icl) * kh + ki) * kw + kj];
                        let (ow_lo, ow_hi) = geom.valid_range(kj, wd, wo);
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * s) as isize + ki as isize + base;
                            let xrow = &x_plane[ih as usize * wd..];
                            let orow = &mut o_plane[oh * wo..(oh + 1) * wo];
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + kj as isize + base) as usize;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Tensor) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, cin_g, kh, kw) = w.dims4();
    let cout_g = cout / geom.groups;
    let (_, _, ho, wo) = dy.dims4();
    let xd = x.data();
    let wdata = w.data();
    let dyd = dy.data();
    let s = geom.stride;
    let base = geom.offset as isize - geom.padding as isize;
    let mut dw = vec![0.0; w.len()];
    let mut dx = if need_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };

    for sample in 0..n {
        for oc in 0..cout {
            let g = oc / cout_g;
            let dy_plane = &dyd[(sample * cout + oc) * ho * wo..(sample * cout + oc + 1) * ho * wo];
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let plane_start = (sample * cin + ic) * h * wd;
                let x_plane = &xd[plane_start..plane_start + h * wd];
                for ki in 0..kh {
                    let (oh_lo, oh_hi) = geom.valid_range(ki, h, ho);
                    for kj in 0..kw {
                        let widx = ((oc * cin_g + icl) * kh + ki) * kw + kj;
                        let wv = wdata[widx];
                        let (ow_lo, ow_hi) = geom.valid_range(kj, wd, wo);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * s) as isize + ki as isize + base) as usize;
                            let dyrow = &dy_plane[oh * wo..(oh + 1) * wo];
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + kj as isize + base) as usize;
                                acc += dyrow[ow] * x_plane[ih * wd + iw];
                                if need_dx {
                                    dx[plane_start + ih * wd + iw] += wv * dyrow[ow];
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).unwrap());
    (dx, Tensor::new(w.shape().to_vec(), dw).unwrap())
}

/// Per-channel standardization over `(N, H, W)` using the batch's own statistics.
fn batch_norm_forward(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            let start = (s * c + ch) * plane;
            sum += xd[start..start + plane].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for s in 0..n {
            let start = (s * c + ch) * plane;
            sq += xd[start..start + plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        let inv_std = 1.0 / (sq / count + BN_EPSILON).sqrt();
        for s in 0..n {
            let start = (s * c + ch) * plane;
            for i in start..start + plane {
                out[i] = (xd[i] - mean) * inv_std;
            }
        }
        inv_stds.push(inv_std);
    }
    (Tensor::new(x.shape().to_vec(), out).unwrap(), inv_stds)
}

fn batch_norm_backward(xhat: &Tensor, inv_std: &[f64], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = xhat.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let xh = xhat.data();
    let g = dy.data();
    let mut dx = vec![0.0; xhat.len()];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for s in 0..n {
            let start = (s * c + ch) * plane;
            for i in start..start + plane {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        let k = inv_std[ch] / count;
        for s in 0..n {
            let start = (s * c + ch) * plane;
            for i in start..start + plane {
                dx[i] = k * (count * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    Tensor::new(xhat.shape().to_vec(), dx).unwrap()
}
