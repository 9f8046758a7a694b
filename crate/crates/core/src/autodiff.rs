//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in construction order (which is
//! topological), storing forward values; [`Tape::backward`] replays the
//! records in reverse, accumulating exact gradients. Only the ops the
//! grid-world model needs are implemented: dense matmul, 3×3-style conv2d
//! with zero or periodic padding at stride 1, relu, element add/sub, scalar
//! scaling, bias broadcasts, reshape, reductions, mean-squared error, row
//! gather, stop-gradient, spatial broadcast, and channel concatenation. The
//! vector-quantization bottleneck is built from these with a straight-through
//! gradient.

use crate::Mat;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("vq_bottleneck requires a non-empty codebook")]
    EmptyCodebook,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense tensor: shape plus row-major (last index fastest) doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Tensor { shape: vec![m.rows(), m.cols()], data: m.data().to_vec() }
    }

    pub fn to_mat(&self) -> Mat {
        assert_eq!(self.shape.len(), 2, "to_mat on shape {:?}", self.shape);
        Mat::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(AutodiffError::Shape { op, detail: format!("expected 4-d, got {:?}", self.shape) });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::Shape { op, detail: format!("expected 2-d, got {:?}", self.shape) });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Padding behavior for conv2d (stride 1, odd kernel, same-size output).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Periodic,
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Matmul(Var, Var),
    AddRowVec(Var, Var),
    AddChanVec(Var, Var),
    Conv2d { input: Var, kernel: Var, pad: PadMode },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
    GatherRows { src: Var, indices: Vec<usize> },
    Detach,
    BroadcastSpatial { src: Var, h: usize, w: usize },
    ConcatChannels(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients returned by [`Tape::backward`], indexed by `Var`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a variable, zeros if no gradient flowed to it.
    pub fn take(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Operation tape. One forward/backward pass per tape instance.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Register an input/parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(AutodiffError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(AutodiffError::Shape {
                op: "sub",
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x * s).collect() };
        self.push(Op::Scale(a, s), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        self.push(Op::Relu(a), out)
    }

    /// 2-D matmul: (n×k)·(k×m).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.nodes[a.0].value.dims2("matmul")?;
        let (k2, m) = self.nodes[b.0].value.dims2("matmul")?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * m..(p + 1) * m];
                let orow = &mut data[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Op::Matmul(a, b), Tensor { shape: vec![n, m], data }))
    }

    /// (n×m) plus a length-m row vector broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, m) = self.nodes[a.0].value.dims2("add_row_vec")?;
        let tv = &self.nodes[v.0].value;
        if tv.shape != [m] {
            return Err(AutodiffError::Shape {
                op: "add_row_vec",
                detail: format!("vector {:?} vs row width {m}", tv.shape),
            });
        }
        let ta = &self.nodes[a.0].value;
        let mut data = ta.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += tv.data[j];
            }
        }
        Ok(self.push(Op::AddRowVec(a, v), Tensor { shape: vec![n, m], data }))
    }

    /// (b,c,h,w) plus a length-c channel vector.
    pub fn add_chan_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[a.0].value.dims4("add_chan_vec")?;
        let tv = &self.nodes[v.0].value;
        if tv.shape != [c] {
            return Err(AutodiffError::Shape {
                op: "add_chan_vec",
                detail: format!("vector {:?} vs channels {c}", tv.shape),
            });
        }
        let ta = &self.nodes[a.0].value;
        let hw = h * w;
        let mut data = ta.data.clone();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let bias = tv.data[ci];
                for x in &mut data[base..base + hw] {
                    *x += bias;
                }
            }
        }
        Ok(self.push(Op::AddChanVec(a, v), Tensor { shape: vec![b, c, h, w], data }))
    }

    /// Stride-1 2-D convolution, same-size output, odd square kernel.
    /// Input (b, c_in, h, w), kernel (c_out, c_in, kh, kw).
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: PadMode) -> Result<Var> {
        let (b, c_in, h, w) = self.nodes[input.0].value.dims4("conv2d")?;
        let (c_out, kc, kh, kw) = self.nodes[kernel.0].value.dims4("conv2d")?;
        if kc != c_in {
            return Err(AutodiffError::Shape {
                op: "conv2d",
                detail: format!("kernel expects {kc} input channels, input has {c_in}"),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::Shape {
                op: "conv2d",
                detail: format!("kernel must be odd-sized, got {kh}x{kw}"),
            });
        }
        let value = conv2d_forward(&self.nodes[input.0].value, &self.nodes[kernel.0].value, pad, b, c_in, h, w, c_out, kh, kw);
        Ok(self.push(Op::Conv2d { input, kernel, pad }, value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", ta.shape, shape),
            });
        }
        let out = Tensor { shape: shape.to_vec(), data: ta.data.clone() };
        Ok(self.push(Op::Reshape(a), out))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(s))
    }

    /// Mean over all elements of (a − b)².
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(AutodiffError::Shape {
                op: "mse",
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let s: f64 =
            ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ta.numel() as f64;
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(s)))
    }

    /// Select rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = self.nodes[src.0].value.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of {n}"),
            });
        }
        let ts = &self.nodes[src.0].value;
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&ts.data[i * m..(i + 1) * m]);
        }
        Ok(self.push(
            Op::GatherRows { src, indices: indices.to_vec() },
            Tensor { shape: vec![indices.len(), m], data },
        ))
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.clone();
        self.push(Op::Detach, out)
    }

    /// (b, c) -> (b, c, h, w), value repeated over the spatial grid.
    pub fn broadcast_spatial(&mut self, src: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c) = self.nodes[src.0].value.dims2("broadcast_spatial")?;
        let ts = &self.nodes[src.0].value;
        let mut data = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let v = ts.data[bi * c + ci];
                let base = (bi * c + ci) * h * w;
                for x in &mut data[base..base + h * w] {
                    *x = v;
                }
            }
        }
        Ok(self.push(Op::BroadcastSpatial { src, h, w }, Tensor { shape: vec![b, c, h, w], data }))
    }

    /// Concatenate two (b, c, h, w) tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.nodes[a.0].value.dims4("concat_channels")?;
        let (bb, cb, hb, wb) = self.nodes[b.0].value.dims4("concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(AutodiffError::Shape {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].value.shape, self.nodes[b.0].value.shape),
            });
        }
        let hw = ha * wa;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            data.extend_from_slice(&ta.data[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&tb.data[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        Ok(self.push(Op::ConcatChannels(a, b), Tensor { shape: vec![ba, ca + cb, ha, wa], data }))
    }

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss.0].value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| -x).collect() };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(a, s) => {
                    let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| x * s).collect() };
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let input = &self.nodes[a.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&input.data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape.clone(), data });
                }
                Op::Matmul(a, b) => {
                    let ta = self.nodes[a.0].value.to_mat();
                    let tb = self.nodes[b.0].value.to_mat();
                    let gm = g.to_mat();
                    accumulate(&mut grads, *a, Tensor::from_mat(&gm.matmul_nt(&tb)));
                    accumulate(&mut grads, *b, Tensor::from_mat(&ta.matmul_tn(&gm)));
                }
                Op::AddRowVec(a, v) => {
                    let (n, m) = (g.shape[0], g.shape[1]);
                    let mut gv = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gv[j] += g.data[i * m + j];
                        }
                    }
                    accumulate(&mut grads, *v, Tensor { shape: vec![m], data: gv });
                    accumulate(&mut grads, *a, g);
                }
                Op::AddChanVec(a, v) => {
                    let (b_, c, h, w) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
                    let hw = h * w;
                    let mut gv = vec![0.0; c];
                    for bi in 0..b_ {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            gv[ci] += g.data[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads, *v, Tensor { shape: vec![c], data: gv });
                    accumulate(&mut grads, *a, g);
                }
                Op::Conv2d { input, kernel, pad } => {
                    let (gi, gk) = conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &g,
                        *pad,
                    );
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape.clone();
                    accumulate(&mut grads, *a, Tensor { shape, data: g.data });
                }
                Op::SumAll(a) => {
                    let t = &self.nodes[a.0].value;
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor { shape: t.shape.clone(), data: vec![gv; t.numel()] });
                }
                Op::MeanAll(a) => {
                    let t = &self.nodes[a.0].value;
                    let gv = g.item() / t.numel() as f64;
                    accumulate(&mut grads, *a, Tensor { shape: t.shape.clone(), data: vec![gv; t.numel()] });
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let c = 2.0 * g.item() / ta.numel() as f64;
                    let ga: Vec<f64> =
                        ta.data.iter().zip(&tb.data).map(|(x, y)| c * (x - y)).collect();
                    let gb: Vec<f64> = ga.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *a, Tensor { shape: ta.shape.clone(), data: ga });
                    accumulate(&mut grads, *b, Tensor { shape: tb.shape.clone(), data: gb });
                }
                Op::GatherRows { src, indices } => {
                    let ts = &self.nodes[src.0].value;
                    let m = ts.shape[1];
                    let mut gs = vec![0.0; ts.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            gs[i * m + j] += g.data[r * m + j];
                        }
                    }
                    accumulate(&mut grads, *src, Tensor { shape: ts.shape.clone(), data: gs });
                }
                Op::Detach => {}
                Op::BroadcastSpatial { src, h, w } => {
                    let (b_, c) = (g.shape[0], g.shape[1]);
                    let hw = h * w;
                    let mut gs = vec![0.0; b_ * c];
                    for bi in 0..b_ {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            gs[bi * c + ci] = g.data[base..base + hw].iter().sum();
                        }
                    }
                    accumulate(&mut grads, *src, Tensor { shape: vec![b_, c], data: gs });
                }
                Op::ConcatChannels(a, b) => {
                    let ca = self.nodes[a.0].value.shape[1];
                    let cb = self.nodes[b.0].value.shape[1];
                    let (bn, _, h, w) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
                    let hw = h * w;
                    let mut ga = vec![0.0; bn * ca * hw];
                    let mut gb = vec![0.0; bn * cb * hw];
                    for bi in 0..bn {
                        let src = &g.data[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
                        ga[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                        gb[bi * cb * hw..(bi + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
                    }
                    accumulate(&mut grads, *a, Tensor { shape: vec![bn, ca, h, w], data: ga });
                    accumulate(&mut grads, *b, Tensor { shape: vec![bn, cb, h, w], data: gb });
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Patch-index table for an im2col lowering: for each output pixel and kernel
/// tap, the flat source pixel (or None outside a zero pad).
fn patch_offsets(h: usize, w: usize, kh: usize, kw: usize, pad: PadMode) -> Vec<Option<usize>> {
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut table = Vec::with_capacity(h * w * kh * kw);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ky in 0..kh as isize {
                for kx in 0..kw as isize {
                    let (sy, sx) = (y + ky - ph, x + kx - pw);
                    let entry = match pad {
                        PadMode::Zero => {
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                None
                            } else {
                                Some((sy * w as isize + sx) as usize)
                            }
                        }
                        PadMode::Periodic => {
                            let sy = sy.rem_euclid(h as isize) as usize;
                            let sx = sx.rem_euclid(w as isize) as usize;
                            Some(sy * w + sx)
                        }
                    };
                    table.push(entry);
                }
            }
        }
    }
    table
}

/// Lower the input to patch rows: (b·h·w) × (c_in·kh·kw).
fn im2col(input: &Tensor, table: &[Option<usize>], c_in: usize, h: usize, w: usize, kk: usize) -> Mat {
    let b = input.shape[0];
    let hw = h * w;
    let mut cols = Mat::zeros(b * hw, c_in * kk);
    for bi in 0..b {
        for pix in 0..hw {
            let row = cols.row_mut(bi * hw + pix);
            let tab = &table[pix * kk..(pix + 1) * kk];
            for ci in 0..c_in {
                let plane = &input.data[(bi * c_in + ci) * hw..(bi * c_in + ci + 1) * hw];
                let dst = &mut row[ci * kk..(ci + 1) * kk];
                for (d, &src) in dst.iter_mut().zip(tab) {
                    if let Some(s) = src {
                        *d = plane[s];
                    }
                }
            }
        }
    }
    cols
}

// Convolution via im2col plus dense matmul; the backward pass reuses the same
// lowering (kernel gradient) and its transpose scatter (input gradient).
#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    pad: PadMode,
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let kk = kh * kw;
    let hw = h * w;
    let table = patch_offsets(h, w, kh, kw, pad);
    let cols = im2col(input, &table, c_in, h, w, kk);
    let kernel_2d = Mat::from_vec(c_out, c_in * kk, kernel.data.clone());
    let prod = cols.matmul_nt(&kernel_2d); // (b·hw) × c_out
    let mut out = vec![0.0; b * c_out * hw];
    for bi in 0..b {
        for pix in 0..hw {
            let row = prod.row(bi * hw + pix);
            for (co, &v) in row.iter().enumerate() {
                out[(bi * c_out + co) * hw + pix] = v;
            }
        }
    }
    Tensor { shape: vec![b, c_out, h, w], data: out }
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, g: &Tensor, pad: PadMode) -> (Tensor, Tensor) {
    let (b, c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (c_out, _, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    let kk = kh * kw;
    let hw = h * w;
    let table = patch_offsets(h, w, kh, kw, pad);
    let cols = im2col(input, &table, c_in, h, w, kk);

    // Gradient rows aligned with the im2col layout: (b·hw) × c_out.
    let mut g_rows = Mat::zeros(b * hw, c_out);
    for bi in 0..b {
        for pix in 0..hw {
            let row = g_rows.row_mut(bi * hw + pix);
            for (co, slot) in row.iter_mut().enumerate() {
                *slot = g.data[(bi * c_out + co) * hw + pix];
            }
        }
    }

    let gk = g_rows.matmul_tn(&cols); // c_out × (c_in·kk)
    let gcols = g_rows.matmul(&Mat::from_vec(c_out, c_in * kk, kernel.data.clone()));

    let mut gi = vec![0.0; input.numel()];
    for bi in 0..b {
        for pix in 0..hw {
            let row = gcols.row(bi * hw + pix);
            let tab = &table[pix * kk..(pix + 1) * kk];
            for ci in 0..c_in {
                let plane = &mut gi[(bi * c_in + ci) * hw..(bi * c_in + ci + 1) * hw];
                let src = &row[ci * kk..(ci + 1) * kk];
                for (&v, &slot) in src.iter().zip(tab) {
                    if let Some(s) = slot {
                        plane[s] += v;
                    }
                }
            }
        }
    }
    (
        Tensor { shape: input.shape.clone(), data: gi },
        Tensor { shape: kernel.shape.clone(), data: gk.data().to_vec() },
    )
}

/// Output of the vector-quantization bottleneck.
pub struct VqOutput {
    /// Quantized latent with a straight-through gradient to the encoder.
    pub z_q: Var,
    /// Selected codebook row per input row (ties break to the lowest index).
    pub indices: Vec<usize>,
    /// ‖sg\[z_e\] − c‖² (mean): pulls selected codes toward encoder outputs.
    pub codebook_loss: Var,
    /// β·‖z_e − sg\[c\]‖² (mean): pulls encoder outputs toward their codes.
    pub commitment_loss: Var,
}

/// Nearest-code quantization with straight-through gradients.
pub fn vq_bottleneck(tape: &mut Tape, z_e: Var, codebook: Var, beta: f64) -> Result<VqOutput> {
    let (n, d) = tape.value(z_e).dims2("vq_bottleneck")?;
    let (k, dc) = tape.value(codebook).dims2("vq_bottleneck")?;
    if k == 0 {
        return Err(AutodiffError::EmptyCodebook);
    }
    if d != dc {
        return Err(AutodiffError::Shape {
            op: "vq_bottleneck",
            detail: format!("latent dim {d} vs codebook dim {dc}"),
        });
    }
    let ze = tape.value(z_e).data.clone();
    let cb = tape.value(codebook).data.clone();
    let mut indices = Vec::with_capacity(n);
    for i in 0..n {
        let row = &ze[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (ki, code) in cb.chunks(d).enumerate() {
            let dist: f64 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = ki;
            }
        }
        indices.push(best);
    }
    let selected = tape.gather_rows(codebook, &indices)?;
    // Straight-through: value is the selected code, gradient flows to z_e.
    let delta = tape.sub(selected, z_e)?;
    let delta_sg = tape.detach(delta);
    let z_q = tape.add(z_e, delta_sg)?;

    let z_e_sg = tape.detach(z_e);
    let codebook_loss = tape.mse(selected, z_e_sg)?;
    let sel_sg = tape.detach(selected);
    let commit = tape.mse(z_e, sel_sg)?;
    let commitment_loss = tape.scale(commit, beta);
    Ok(VqOutput { z_q, indices, codebook_loss, commitment_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.normal();
        }
        t
    }

    /// Central finite differences on a leaf against the tape gradient.
    fn gradcheck(build: impl Fn(&mut Tape, &Tensor) -> Var, x0: &Tensor, tol: f64) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, x0);
        let mut grads = tape.backward(loss).unwrap();
        // Leaf is always var 0 by construction in these tests.
        let g = grads.take(Var(0), &x0.shape);
        let h = 1e-5;
        let mut fd = Tensor::zeros(&x0.shape);
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data[i] += h;
            let mut tp = Tape::new();
            let lp = build(&mut tp, &plus);
            let mut minus = x0.clone();
            minus.data[i] -= h;
            let mut tm = Tape::new();
            let lm = build(&mut tm, &minus);
            fd.data[i] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
        }
        let num: f64 = fd.data.iter().zip(&g.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = fd.data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        assert!(num / den <= tol, "gradcheck relative error {} > {tol}", num / den);
    }

    #[test]
    fn identity_conv_is_identity() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let x = tape.leaf(rand_tensor(&[2, 3, 4, 4], &mut rng));
        // 1×1 kernel selecting each channel: kernel[c][c][0][0] = 1.
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data[c * 3 + c] = 1.0;
        }
        let kv = tape.leaf(k);
        let y = tape.conv2d(x, kv, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn relu_clamps_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor { shape: vec![3], data: vec![-2.0, 0.0, 1.5] });
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 1.5]);
        let s = tape.sum_all(y);
        let mut grads = tape.backward(s).unwrap();
        let g = grads.take(x, &[3]);
        assert_eq!(g.data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = Rng::new(2);
        let b = rand_tensor(&[3, 2], &mut rng);
        gradcheck(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let bv = tape.leaf(b.clone());
                let y = tape.matmul(xv, bv).unwrap();
                let t = tape.leaf(Tensor::zeros(&[4, 2]));
                tape.mse(y, t).unwrap()
            },
            &rand_tensor(&[4, 3], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn conv2d_gradcheck_both_pad_modes_and_kernel() {
        let mut rng = Rng::new(3);
        for pad in [PadMode::Zero, PadMode::Periodic] {
            let k = rand_tensor(&[2, 3, 3, 3], &mut rng);
            gradcheck(
                |tape, x| {
                    let xv = tape.leaf(x.clone());
                    let kv = tape.leaf(k.clone());
                    let y = tape.conv2d(xv, kv, pad).unwrap();
                    tape.mean_all(y)
                },
                &rand_tensor(&[2, 3, 4, 4], &mut rng),
                1e-6,
            );
            let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
            gradcheck(
                |tape, kt| {
                    let kv = tape.leaf(kt.clone());
                    let xv = tape.leaf(x.clone());
                    // leaf order: kernel first so gradcheck probes it
                    let y = tape.conv2d(xv, kv, pad).unwrap();
                    tape.mean_all(y)
                },
                &rand_tensor(&[2, 3, 3, 3], &mut rng),
                1e-6,
            );
        }
    }

    #[test]
    fn composite_graph_gradcheck() {
        let mut rng = Rng::new(4);
        let w = rand_tensor(&[8, 3], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        let target = rand_tensor(&[2, 3], &mut rng);
        gradcheck(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let wv = tape.leaf(w.clone());
                let bv = tape.leaf(bias.clone());
                let tv = tape.leaf(target.clone());
                let flat = tape.reshape(xv, &[2, 8]).unwrap();
                let y = tape.matmul(flat, wv).unwrap();
                let y = tape.add_row_vec(y, bv).unwrap();
                let y = tape.relu(y);
                let l1 = tape.mse(y, tv).unwrap();
                let l2 = tape.mean_all(y);
                let l2s = tape.scale(l2, 0.3);
                tape.add(l1, l2s).unwrap()
            },
            &rand_tensor(&[2, 2, 2, 2], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn broadcast_concat_chanvec_gradcheck() {
        let mut rng = Rng::new(5);
        let other = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let cv = rand_tensor(&[3], &mut rng);
        gradcheck(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let ov = tape.leaf(other.clone());
                let cvv = tape.leaf(cv.clone());
                let b = tape.broadcast_spatial(xv, 3, 3).unwrap();
                let cat = tape.concat_channels(ov, b).unwrap();
                let cat = tape.add_chan_vec(cat, cvv).unwrap();
                tape.mean_all(cat)
            },
            &rand_tensor(&[2, 2], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor { shape: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] });
        let y = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = tape.sum_all(y);
        let mut grads = tape.backward(s).unwrap();
        let g = grads.take(x, &[2, 2]);
        assert_eq!(g.data, vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn vq_exact_code_has_zero_losses() {
        let mut tape = Tape::new();
        let code = vec![0.5, -1.0, 0.25];
        let cb = tape.leaf(Tensor { shape: vec![2, 3], data: vec![0.5, -1.0, 0.25, 9.0, 9.0, 9.0] });
        let z = tape.leaf(Tensor { shape: vec![1, 3], data: code.clone() });
        let vq = vq_bottleneck(&mut tape, z, cb, 0.25).unwrap();
        assert_eq!(vq.indices, vec![0]);
        assert_eq!(tape.value(vq.z_q).data, code);
        assert_eq!(tape.value(vq.codebook_loss).item(), 0.0);
        assert_eq!(tape.value(vq.commitment_loss).item(), 0.0);
    }

    #[test]
    fn vq_tie_breaks_to_lowest_index() {
        let mut tape = Tape::new();
        let cb = tape.leaf(Tensor { shape: vec![3, 1], data: vec![1.0, -1.0, 1.0] });
        let z = tape.leaf(Tensor { shape: vec![1, 1], data: vec![0.0] });
        let vq = vq_bottleneck(&mut tape, z, cb, 0.25).unwrap();
        assert_eq!(vq.indices, vec![0]);
    }

    #[test]
    fn vq_empty_codebook_is_an_error() {
        let mut tape = Tape::new();
        let cb = tape.leaf(Tensor { shape: vec![0, 3], data: vec![] });
        let z = tape.leaf(Tensor { shape: vec![1, 3], data: vec![0.0; 3] });
        assert!(matches!(vq_bottleneck(&mut tape, z, cb, 0.25), Err(AutodiffError::EmptyCodebook)));
    }

    // Straight-through contract: the gradient of a downstream loss w.r.t. the
    // encoder output equals the gradient w.r.t. the quantized value.
    #[test]
    fn vq_straight_through_gradient() {
        let mut rng = Rng::new(6);
        let cb_t = rand_tensor(&[4, 3], &mut rng);
        let z_t = rand_tensor(&[2, 3], &mut rng);
        let w_t = rand_tensor(&[3, 2], &mut rng);

        let mut tape = Tape::new();
        let z = tape.leaf(z_t.clone());
        let cb = tape.leaf(cb_t.clone());
        let vq = vq_bottleneck(&mut tape, z, cb, 0.25).unwrap();
        let w = tape.leaf(w_t.clone());
        let y = tape.matmul(vq.z_q, w).unwrap();
        let loss = tape.mean_all(y);
        let mut grads = tape.backward(loss).unwrap();
        let g_ze = grads.take(z, &[2, 3]);

        // Reference: same downstream graph with the quantized value as a leaf.
        let mut tape2 = Tape::new();
        let zq_leaf = tape2.leaf(Tensor {
            shape: vec![2, 3],
            data: tape.value(vq.z_q).data.clone(),
        });
        let w2 = tape2.leaf(w_t);
        let y2 = tape2.matmul(zq_leaf, w2).unwrap();
        let loss2 = tape2.mean_all(y2);
        let mut grads2 = tape2.backward(loss2).unwrap();
        let g_zq = grads2.take(zq_leaf, &[2, 3]);

        for (a, b) in g_ze.data.iter().zip(&g_zq.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let mut rng = Rng::new(7);
        let x_t = rand_tensor(&[3, 3], &mut rng);
        let w_t = rand_tensor(&[3, 3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let w = tape.leaf(w_t.clone());
            let y = tape.matmul(x, w).unwrap();
            let r = tape.relu(y);
            let l = tape.mean_all(r);
            let mut grads = tape.backward(l).unwrap();
            grads.take(x, &[3, 3]).data
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }
}
