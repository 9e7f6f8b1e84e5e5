use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::{Element, Tensor};
use super::AutodiffError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shapes involved in one valid-padding convolution. Activations use a
/// channel-major `[C, N, H, W]` layout so the GEMM output is already in
/// the layout the next layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn columns(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ChannelsToBatch {
        x: Var,
        channels: usize,
        batch: usize,
        spatial: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Elu(Var),
    Sigmoid(Var),
    ReluStraightThrough(Var),
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    AddConst(Var),
    Mix {
        alpha: Var,
        row: usize,
        inputs: Vec<Var>,
    },
    BinaryCrossEntropy {
        p: Var,
        target: Vec<T>,
        eps: T,
    },
    SquaredError {
        p: Var,
        target: Vec<T>,
        weight: Option<Vec<T>>,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape itself is a topological order and backward simply walks it in
/// reverse.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

fn gemm<T: Element>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    beta: T,
    c: &mut [T],
) {
    let av = if a_trans {
        ArrayView2::from_shape((k, m), a)
            .expect("gemm lhs")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if b_trans {
        ArrayView2::from_shape((n, k), b)
            .expect("gemm rhs")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let plane = g.height * g.width;
    let per_sample = g.out_height * g.out_width;
    let ncols = g.columns();
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    for c in 0..g.channels {
        for a in 0..kh {
            for b in 0..kw {
                let r = (c * kh + a) * kw + b;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(c * g.batch + n) * plane..(c * g.batch + n + 1) * plane];
                    for oy in 0..g.out_height {
                        let line = &src[(oy * sh + a) * g.width..(oy * sh + a + 1) * g.width];
                        let dst = &mut row[n * per_sample + oy * g.out_width
                            ..n * per_sample + (oy + 1) * g.out_width];
                        if sw == 1 {
                            dst.copy_from_slice(&line[b..b + g.out_width]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = line[ox * sw + b];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(dcols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let plane = g.height * g.width;
    let per_sample = g.out_height * g.out_width;
    let ncols = g.columns();
    let mut dx = vec![T::zero(); g.channels * g.batch * plane];
    for c in 0..g.channels {
        for a in 0..kh {
            for b in 0..kw {
                let r = (c * kh + a) * kw + b;
                let row = &dcols[r * ncols..(r + 1) * ncols];
                for n in 0..g.batch {
                    let base = (c * g.batch + n) * plane;
                    for oy in 0..g.out_height {
                        let src = &row[n * per_sample + oy * g.out_width
                            ..n * per_sample + (oy + 1) * g.out_width];
                        let line_start = base + (oy * sh + a) * g.width;
                        for (ox, &v) in src.iter().enumerate() {
                            dx[line_start + ox * sw + b] = dx[line_start + ox * sw + b] + v;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same forward value as `x`; backward stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.numel()).expect("count");
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[C, N, H, W]` activations to `[N, C*H*W]` rows for dense layers.
    pub fn channels_to_batch(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err(format!(
                "channels_to_batch expects [C,N,H,W], got {shape:?}"
            )));
        }
        let (c, n, s) = (shape[0], shape[1], shape[2] * shape[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * n * s];
        for ci in 0..c {
            for ni in 0..n {
                out[ni * c * s + ci * s..ni * c * s + (ci + 1) * s]
                    .copy_from_slice(&src[(ci * n + ni) * s..(ci * n + ni + 1) * s]);
            }
        }
        let value = Tensor::new(vec![n, c * s], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::ChannelsToBatch {
                x,
                channels: c,
                batch: n,
                spatial: s,
            },
            rg,
        ))
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(shape_err(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * out];
        gemm(
            (n, inp, out),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut y,
        );
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v = *v + bb;
            }
        }
        let value = Tensor::new(vec![n, out], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Valid-padding 2-D convolution on `[C, N, H, W]` input with
    /// `[OC, C, KH, KW]` kernels, producing `[OC, N, OH, OW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
    ) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(shape_err(format!("conv2d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if ws[1] != xs[0] || ws[0] != bs[0] || ws[2] > xs[2] || ws[3] > xs[3] {
            return Err(shape_err(format!("conv2d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d: zero stride".into()));
        }
        let geom = ConvGeometry {
            channels: xs[0],
            batch: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: (ws[2], ws[3]),
            stride,
            out_height: (xs[2] - ws[2]) / stride.0 + 1,
            out_width: (xs[3] - ws[3]) / stride.1 + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.columns();
        let mut y = vec![T::zero(); geom.out_channels * ncols];
        gemm(
            (geom.out_channels, geom.patch_len(), ncols),
            self.value(w).data(),
            false,
            &cols,
            false,
            T::zero(),
            &mut y,
        );
        let bias = self.value(b).data();
        for (row, &bb) in y.chunks_mut(ncols).zip(bias) {
            for v in row {
                *v = *v + bb;
            }
        }
        let value = Tensor::new(
            vec![
                geom.out_channels,
                geom.batch,
                geom.out_height,
                geom.out_width,
            ],
            y,
        )?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        // Columns are only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Max pooling over the last two axes with stride equal to the kernel;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(shape_err(format!(
                "max_pool2d: {shape:?} kernel {kernel:?}"
            )));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / kernel.0, w / kernel.1);
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!(
                "max_pool2d: {shape:?} kernel {kernel:?}"
            )));
        }
        let lead: usize = shape[..r - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(lead * oh * ow);
        let mut argmax = Vec::with_capacity(lead * oh * ow);
        if kernel == (1, 2) {
            for (line, row) in src.chunks_exact(w).enumerate() {
                for (ox, pair) in row.chunks_exact(2).enumerate() {
                    let i = line * w + 2 * ox;
                    let (v, best) = if pair[1] > pair[0] {
                        (pair[1], i + 1)
                    } else {
                        (pair[0], i)
                    };
                    out.push(v);
                    argmax.push(best);
                }
            }
        } else {
            for l in 0..lead {
                let base = l * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * kernel.0 * w + ox * kernel.1;
                        for a in 0..kernel.0 {
                            for b in 0..kernel.1 {
                                let i = base + (oy * kernel.0 + a) * w + ox * kernel.1 + b;
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let mut out_shape = shape[..r - 2].to_vec();
        out_shape.extend([oh, ow]);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Exponential linear unit with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(Element::elu);
        let rg = self.rg(x);
        self.push(value, Op::Elu(x), rg)
    }

    /// `elu(x) ⊙ scale + shift` with constant `scale` and `shift`, as one
    /// node. Its local derivative is a constant per element, so it is
    /// recorded as a [`Graph::mul_const`] with that derivative.
    pub fn elu_scale_shift(
        &mut self,
        x: Var,
        scale: Vec<T>,
        shift: &[T],
    ) -> Result<Var, AutodiffError> {
        let n = self.value(x).numel();
        if scale.len() != n || shift.len() != n {
            return Err(shape_err(format!(
                "elu_scale_shift: {:?} vs {} scales, {} shifts",
                self.shape(x),
                scale.len(),
                shift.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        let mut factor = scale;
        for ((&v, f), &s) in self
            .value(x)
            .data()
            .iter()
            .zip(factor.iter_mut())
            .zip(shift)
        {
            let e = v.elu();
            out.push(e * *f + s);
            if v <= T::zero() {
                *f = *f * (e + T::one());
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst { x, factor }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `max(0, x)` forward, identity backward.
    pub fn relu_straight_through(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::ReluStraightThrough(x), rg)
    }

    /// `x ⊙ factor` where `factor` is a constant (no gradient to it).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var, AutodiffError> {
        if factor.len() != self.value(x).numel() {
            return Err(shape_err(format!(
                "mul_const: {:?} vs {} factors",
                self.shape(x),
                factor.len()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factor)
            .map(|(&v, &f)| v * f)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst { x, factor }, rg))
    }

    /// `x + offset` where `offset` is a constant.
    pub fn add_const(&mut self, x: Var, offset: &[T]) -> Result<Var, AutodiffError> {
        if offset.len() != self.value(x).numel() {
            return Err(shape_err(format!(
                "add_const: {:?} vs {} offsets",
                self.shape(x),
                offset.len()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(offset)
            .map(|(&v, &o)| v + o)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    /// Linear combination `Σ_j alpha[row, j] · inputs[j]` with a trainable
    /// `[M, M]` mixing matrix.
    pub fn mix(&mut self, alpha: Var, row: usize, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let m = inputs.len();
        if m == 0 || self.shape(alpha) != [m, m] || row >= m {
            return Err(shape_err(format!(
                "mix: alpha {:?}, row {row}, {m} inputs",
                self.shape(alpha)
            )));
        }
        for &z in &inputs[1..] {
            self.same_shape(inputs[0], z, "mix")?;
        }
        let coeffs = &self.value(alpha).data()[row * m..(row + 1) * m];
        let mut out = vec![T::zero(); self.value(inputs[0]).numel()];
        for (&c, &z) in coeffs.iter().zip(inputs) {
            for (o, &v) in out.iter_mut().zip(self.value(z).data()) {
                *o = *o + c * v;
            }
        }
        let value = Tensor::new(self.shape(inputs[0]).to_vec(), out)?;
        let rg = self.rg(alpha) || inputs.iter().any(|&z| self.rg(z));
        Ok(self.push(
            value,
            Op::Mix {
                alpha,
                row,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(
        &mut self,
        p: Var,
        target: Vec<T>,
        eps: T,
    ) -> Result<Var, AutodiffError> {
        let pv = self.value(p);
        if pv.numel() != target.len() || target.is_empty() {
            return Err(shape_err(format!(
                "binary_cross_entropy: {:?} vs {} targets",
                pv.shape(),
                target.len()
            )));
        }
        let hi = T::one() - eps;
        let mut acc = T::zero();
        for (&pp, &y) in pv.data().iter().zip(&target) {
            let pc = pp.max(eps).min(hi);
            acc = acc + y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        let n = T::from_usize(target.len()).expect("count");
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(-acc / n),
            Op::BinaryCrossEntropy { p, target, eps },
            rg,
        ))
    }

    /// `Σ w_i (p_i - y_i)² / Σ w_i`; unweighted it is the plain mean. An
    /// all-zero weight vector yields 0.
    pub fn squared_error(
        &mut self,
        p: Var,
        target: Vec<T>,
        weight: Option<Vec<T>>,
    ) -> Result<Var, AutodiffError> {
        let pv = self.value(p);
        if pv.numel() != target.len()
            || target.is_empty()
            || weight.as_ref().is_some_and(|w| w.len() != target.len())
        {
            return Err(shape_err(format!(
                "squared_error: {:?} vs {} targets",
                pv.shape(),
                target.len()
            )));
        }
        let denom = match &weight {
            Some(w) => w.iter().fold(T::zero(), |a, &v| a + v),
            None => T::from_usize(target.len()).expect("count"),
        };
        let mut acc = T::zero();
        for (i, (&pp, &y)) in pv.data().iter().zip(&target).enumerate() {
            let d = pp - y;
            let w = weight.as_ref().map_or(T::one(), |w| w[i]);
            acc = acc + w * d * d;
        }
        let loss = if denom > T::zero() {
            acc / denom
        } else {
            T::zero()
        };
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                p,
                target,
                weight,
                denom,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `root`, seeded with 1. Only leaf
    /// gradients are kept in the result.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.value(root).numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| {
                    g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                })
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adds `scale * g` into the gradient of `v` without a temporary.
    fn accumulate_scaled(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], scale: T) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(g) {
                    *e = *e + scale * c;
                }
            }
            slot @ None => *slot = Some(g.iter().map(|&c| scale * c).collect()),
        }
    }

    fn propagate(&self, i: usize, mut g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.accumulate_scaled(grads, *b, &g, T::one());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    for (gg, &x) in g.iter_mut().zip(av) {
                        *gg = *gg * x;
                    }
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, f) => self.accumulate_scaled(grads, *x, &g, *f),
            Op::Sum(x) => self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_usize(n).expect("count");
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::Reshape(x) | Op::ReluStraightThrough(x) | Op::AddConst(x) => {
                self.accumulate(grads, *x, g)
            }
            Op::ChannelsToBatch {
                x,
                channels,
                batch,
                spatial,
            } => {
                let (c, n, s) = (*channels, *batch, *spatial);
                let mut dx = vec![T::zero(); c * n * s];
                for ci in 0..c {
                    for ni in 0..n {
                        dx[(ci * n + ni) * s..(ci * n + ni + 1) * s]
                            .copy_from_slice(&g[ni * c * s + ci * s..ni * c * s + (ci + 1) * s]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, inp, out) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    gemm(
                        (n, out, inp),
                        &g,
                        false,
                        self.value(*w).data(),
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(
                        (out, n, inp),
                        &g,
                        true,
                        self.value(*x).data(),
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); out];
                    for row in g.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ncols = geom.columns();
                let k = geom.patch_len();
                let oc = geom.out_channels;
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); oc * k];
                    gemm((oc, ncols, k), &g, false, cols, true, T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let db = g
                        .chunks(ncols)
                        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.accumulate(grads, *b, db);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); k * ncols];
                    gemm(
                        (k, oc, ncols),
                        self.value(*w).data(),
                        true,
                        &g,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    self.accumulate(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gg) in argmax.iter().zip(&g) {
                    dx[src] = dx[src] + gg;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Elu(x) => {
                for (gg, &yy) in g.iter_mut().zip(node.value.data()) {
                    if yy <= T::zero() {
                        *gg = *gg * (yy + T::one());
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                for (gg, &yy) in g.iter_mut().zip(node.value.data()) {
                    *gg = *gg * yy * (T::one() - yy);
                }
                self.accumulate(grads, *x, g);
            }
            Op::MulConst { x, factor } => {
                for (gg, &f) in g.iter_mut().zip(factor) {
                    *gg = *gg * f;
                }
                self.accumulate(grads, *x, g);
            }
            Op::Mix { alpha, row, inputs } => {
                let m = inputs.len();
                if self.rg(*alpha) {
                    let mut da = vec![T::zero(); m * m];
                    for (j, &z) in inputs.iter().enumerate() {
                        da[row * m + j] = g
                            .iter()
                            .zip(self.value(z).data())
                            .fold(T::zero(), |a, (&gg, &v)| a + gg * v);
                    }
                    self.accumulate(grads, *alpha, da);
                }
                let coeffs = &self.value(*alpha).data()[row * m..(row + 1) * m];
                for (&c, &z) in coeffs.iter().zip(inputs) {
                    self.accumulate_scaled(grads, z, &g, c);
                }
            }
            Op::BinaryCrossEntropy { p, target, eps } => {
                let hi = T::one() - *eps;
                let n = T::from_usize(target.len()).expect("count");
                let scale = g[0] / n;
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pp, &y)| {
                        if pp < *eps || pp > hi {
                            T::zero()
                        } else {
                            -scale * (y / pp - (T::one() - y) / (T::one() - pp))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
            Op::SquaredError {
                p,
                target,
                weight,
                denom,
            } => {
                let two = T::one() + T::one();
                let dp = if *denom > T::zero() {
                    let scale = g[0] * two / *denom;
                    self.value(*p)
                        .data()
                        .iter()
                        .zip(target)
                        .enumerate()
                        .map(|(i, (&pp, &y))| {
                            let w = weight.as_ref().map_or(T::one(), |w| w[i]);
                            scale * w * (pp - y)
                        })
                        .collect()
                } else {
                    vec![T::zero(); target.len()]
                };
                self.accumulate(grads, *p, dp);
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`]. Nodes that do not
/// require gradient, or that the root does not depend on, have none.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape when none reached it.
    pub fn get_or_zeros(&self, v: Var, graph: &Graph<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}
