use std::cell::{Cell, RefCell};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::numel;
use crate::{Result, Scalar, Tensor, TensorError};

enum Op<T> {
    Conv2d { stride: usize, padding: usize },
    Relu,
    Add,
    Sub,
    Mul,
    Scale(T),
    /// output = input / scalar, gradient flows into both.
    DivScalar,
    Abs,
    Sum,
    L1Norm,
    SqL2Norm,
    BatchSelect(usize),
    /// Externally computed scalar with a fixed gradient w.r.t. its input
    /// (envelope-theorem style losses).
    ExternalScalar { grad: Vec<T> },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
}

/// Ordered tape of the primitive operations applied during one forward pass.
///
/// Every operation that produces a gradient-requiring output appends a node.
/// [`Graph::backward`] walks the tape once, in reverse; a second call is an
/// error — build a fresh graph for the next forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn record(&self, op: Op<T>, inputs: Vec<Tensor<T>>, output: &Tensor<T>) {
        if output.requires_grad() {
            self.nodes.borrow_mut().push(Node {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    fn result_of(&self, shape: Vec<usize>, data: Vec<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        Tensor::from_vec(shape, data, requires_grad)
    }

    /// 2-D cross-correlation of `input` `[N,Cin,H,W]` with `kernel`
    /// `[Cout,Cin,kh,kw]`, optional per-channel `bias` `[Cout]`.
    pub fn conv2d(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let ishape = input.shape();
        let kshape = kernel.shape();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "expected 4-D input and kernel, got input {ishape:?}, kernel {kshape:?}"
                ),
            });
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {cin} channels but kernel expects {kcin}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        if let Some(b) = bias {
            if b.len() != cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias length {} != output channels {cout}", b.len()),
                });
            }
        }

        let oh = conv_out_extent(h, kh, stride, padding);
        let ow = conv_out_extent(w, kw, stride, padding);
        let ckk = cin * kh * kw;
        let spatial = oh * ow;

        let mut out = vec![T::zero(); n * cout * spatial];
        {
            let xin = input.borrow();
            let ker = kernel.borrow();
            let kmat = ArrayView2::from_shape((cout, ckk), ker.data.as_slice())
                .expect("kernel layout is contiguous");
            let mut col = vec![T::zero(); ckk * spatial];
            for ni in 0..n {
                let xslice = &xin.data[ni * cin * h * w..(ni + 1) * cin * h * w];
                im2col(xslice, cin, h, w, kh, kw, stride, padding, oh, ow, &mut col);
                let colv = ArrayView2::from_shape((ckk, spatial), col.as_slice()).unwrap();
                let oslice = &mut out[ni * cout * spatial..(ni + 1) * cout * spatial];
                let mut ov = ArrayViewMut2::from_shape((cout, spatial), oslice).unwrap();
                general_mat_mul(T::one(), &kmat, &colv, T::zero(), &mut ov);
            }
            if let Some(b) = bias {
                let bv = b.borrow();
                for ni in 0..n {
                    for co in 0..cout {
                        let base = (ni * cout + co) * spatial;
                        let bval = bv.data[co];
                        for v in &mut out[base..base + spatial] {
                            *v += bval;
                        }
                    }
                }
            }
        }

        let mut input_list: Vec<&Tensor<T>> = vec![input, kernel];
        if let Some(b) = bias {
            input_list.push(b);
        }
        let output = self.result_of(vec![n, cout, oh, ow], out, &input_list)?;
        self.record(
            Op::Conv2d { stride, padding },
            input_list.into_iter().cloned().collect(),
            &output,
        );
        Ok(output)
    }

    pub fn relu(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let data = input
            .borrow()
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let output = self.result_of(input.shape(), data, &[input])?;
        self.record(Op::Relu, vec![input.clone()], &output);
        Ok(output)
    }

    pub fn abs(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let data = input.borrow().data.iter().map(|v| v.abs()).collect();
        let output = self.result_of(input.shape(), data, &[input])?;
        self.record(Op::Abs, vec![input.clone()], &output);
        Ok(output)
    }

    fn binary(&self, op: Op<T>, name: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let ashape = a.shape();
        let bshape = b.shape();
        if ashape != bshape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{ashape:?} vs {bshape:?} (no implicit broadcasting)"),
            });
        }
        let data = {
            let av = a.borrow();
            let bv = b.borrow();
            av.data
                .iter()
                .zip(bv.data.iter())
                .map(|(&x, &y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    _ => unreachable!(),
                })
                .collect()
        };
        let output = self.result_of(ashape, data, &[a, b])?;
        self.record(op, vec![a.clone(), b.clone()], &output);
        Ok(output)
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(Op::Mul, "mul", a, b)
    }

    /// Multiply every element by a compile-time constant (no gradient into it).
    pub fn scale(&self, input: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        let data = input.borrow().data.iter().map(|&v| v * factor).collect();
        let output = self.result_of(input.shape(), data, &[input])?;
        self.record(Op::Scale(factor), vec![input.clone()], &output);
        Ok(output)
    }

    /// Divide every element by a rank-0 tensor; gradients flow into both
    /// operands (this is what normalizing a density map by its mass needs).
    pub fn div_scalar(&self, input: &Tensor<T>, divisor: &Tensor<T>) -> Result<Tensor<T>> {
        if divisor.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "div_scalar",
                shape: divisor.shape(),
            });
        }
        let s = divisor.item()?;
        let data = input.borrow().data.iter().map(|&v| v / s).collect();
        let output = self.result_of(input.shape(), data, &[input, divisor])?;
        self.record(Op::DivScalar, vec![input.clone(), divisor.clone()], &output);
        Ok(output)
    }

    fn reduce(&self, op: Op<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let total = {
            let iv = input.borrow();
            match op {
                Op::Sum => iv.data.iter().fold(T::zero(), |acc, &v| acc + v),
                Op::L1Norm => iv.data.iter().fold(T::zero(), |acc, &v| acc + v.abs()),
                Op::SqL2Norm => iv.data.iter().fold(T::zero(), |acc, &v| acc + v * v),
                _ => unreachable!(),
            }
        };
        let output = self.result_of(vec![], vec![total], &[input])?;
        self.record(op, vec![input.clone()], &output);
        Ok(output)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.reduce(Op::Sum, input)
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.reduce(Op::L1Norm, input)
    }

    /// Sum of squares.
    pub fn sq_l2_norm(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.reduce(Op::SqL2Norm, input)
    }

    /// Slice one sample out of a batched tensor, keeping a leading dim of 1.
    pub fn batch_select(&self, input: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
        let shape = input.shape();
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "batch_select",
                detail: "cannot batch-select from a rank-0 tensor".into(),
            });
        }
        if index >= shape[0] {
            return Err(TensorError::BatchIndex {
                index,
                batch: shape[0],
            });
        }
        let per = numel(&shape[1..]);
        let data = input.borrow().data[index * per..(index + 1) * per].to_vec();
        let mut oshape = vec![1];
        oshape.extend_from_slice(&shape[1..]);
        let output = self.result_of(oshape, data, &[input])?;
        self.record(Op::BatchSelect(index), vec![input.clone()], &output);
        Ok(output)
    }

    /// Attach an externally computed scalar loss whose gradient with respect
    /// to `input` is already known (e.g. from an optimal-transport dual).
    pub fn external_scalar(&self, input: &Tensor<T>, value: T, grad: Vec<T>) -> Result<Tensor<T>> {
        if grad.len() != input.len() {
            return Err(TensorError::DataLength {
                shape: input.shape(),
                expected: input.len(),
                got: grad.len(),
            });
        }
        let output = self.result_of(vec![], vec![value], &[input])?;
        self.record(Op::ExternalScalar { grad }, vec![input.clone()], &output);
        Ok(output)
    }

    /// Reverse pass from a rank-0 loss: accumulates gradients into every
    /// reachable tensor with `requires_grad`, then marks the tape consumed.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if self.consumed.replace(true) {
            return Err(TensorError::GraphConsumed);
        }
        if loss.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss.shape(),
            });
        }
        if !loss.requires_grad() {
            // Nothing reachable requires a gradient.
            return Ok(());
        }
        loss.accumulate_grad(&[T::one()]);

        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let upstream = match node.output.grad() {
                Some(g) => g,
                None => continue,
            };
            backward_node(node, &upstream);
        }
        Ok(())
    }
}

fn backward_node<T: Scalar>(node: &Node<T>, upstream: &[T]) {
    match &node.op {
        Op::Conv2d { stride, padding } => conv2d_backward(node, upstream, *stride, *padding),
        Op::Relu => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let delta: Vec<T> = {
                    let iv = input.borrow();
                    iv.data
                        .iter()
                        .zip(upstream)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect()
                };
                input.accumulate_grad(&delta);
            }
        }
        Op::Abs => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let delta: Vec<T> = {
                    let iv = input.borrow();
                    iv.data
                        .iter()
                        .zip(upstream)
                        .map(|(&x, &g)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                };
                input.accumulate_grad(&delta);
            }
        }
        Op::Add => {
            for input in &node.inputs {
                if input.requires_grad() {
                    input.accumulate_grad(upstream);
                }
            }
        }
        Op::Sub => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            if a.requires_grad() {
                a.accumulate_grad(upstream);
            }
            if b.requires_grad() {
                let neg: Vec<T> = upstream.iter().map(|&g| -g).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            if a.requires_grad() {
                let delta: Vec<T> = {
                    let bv = b.borrow();
                    bv.data.iter().zip(upstream).map(|(&y, &g)| g * y).collect()
                };
                a.accumulate_grad(&delta);
            }
            if b.requires_grad() {
                let delta: Vec<T> = {
                    let av = a.borrow();
                    av.data.iter().zip(upstream).map(|(&x, &g)| g * x).collect()
                };
                b.accumulate_grad(&delta);
            }
        }
        Op::Scale(factor) => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let delta: Vec<T> = upstream.iter().map(|&g| g * *factor).collect();
                input.accumulate_grad(&delta);
            }
        }
        Op::DivScalar => {
            let (input, divisor) = (&node.inputs[0], &node.inputs[1]);
            let s = divisor.item().expect("validated rank-0 divisor");
            if input.requires_grad() {
                let delta: Vec<T> = upstream.iter().map(|&g| g / s).collect();
                input.accumulate_grad(&delta);
            }
            if divisor.requires_grad() {
                let acc = {
                    let iv = input.borrow();
                    iv.data
                        .iter()
                        .zip(upstream)
                        .fold(T::zero(), |acc, (&x, &g)| acc - g * x / (s * s))
                };
                divisor.accumulate_grad(&[acc]);
            }
        }
        Op::Sum => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let g = upstream[0];
                let delta = vec![g; input.len()];
                input.accumulate_grad(&delta);
            }
        }
        Op::L1Norm => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let g = upstream[0];
                let delta: Vec<T> = {
                    let iv = input.borrow();
                    iv.data
                        .iter()
                        .map(|&x| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                };
                input.accumulate_grad(&delta);
            }
        }
        Op::SqL2Norm => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let g = upstream[0];
                let two = T::one() + T::one();
                let delta: Vec<T> = {
                    let iv = input.borrow();
                    iv.data.iter().map(|&x| g * two * x).collect()
                };
                input.accumulate_grad(&delta);
            }
        }
        Op::BatchSelect(index) => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let per = upstream.len();
                let mut delta = vec![T::zero(); input.len()];
                delta[index * per..(index + 1) * per].copy_from_slice(upstream);
                input.accumulate_grad(&delta);
            }
        }
        Op::ExternalScalar { grad } => {
            let input = &node.inputs[0];
            if input.requires_grad() {
                let g = upstream[0];
                let delta: Vec<T> = grad.iter().map(|&d| g * d).collect();
                input.accumulate_grad(&delta);
            }
        }
    }
}

fn conv2d_backward<T: Scalar>(node: &Node<T>, upstream: &[T], stride: usize, padding: usize) {
    let input = &node.inputs[0];
    let kernel = &node.inputs[1];
    let bias = node.inputs.get(2);

    let ishape = input.shape();
    let kshape = kernel.shape();
    let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let ckk = cin * kh * kw;
    let spatial = oh * ow;

    let want_input = input.requires_grad();
    let want_kernel = kernel.requires_grad();
    let want_bias = bias.is_some_and(|b| b.requires_grad());

    let mut dinput = want_input.then(|| vec![T::zero(); n * cin * h * w]);
    let mut dkernel = want_kernel.then(|| vec![T::zero(); cout * ckk]);
    let mut dbias = want_bias.then(|| vec![T::zero(); cout]);

    {
        let xin = input.borrow();
        let ker = kernel.borrow();
        let kmat = ArrayView2::from_shape((cout, ckk), ker.data.as_slice()).unwrap();
        let mut col = vec![T::zero(); ckk * spatial];
        let mut colgrad = vec![T::zero(); ckk * spatial];
        for ni in 0..n {
            let gout = &upstream[ni * cout * spatial..(ni + 1) * cout * spatial];
            let gview = ArrayView2::from_shape((cout, spatial), gout).unwrap();

            if let Some(dk) = dkernel.as_mut() {
                let xslice = &xin.data[ni * cin * h * w..(ni + 1) * cin * h * w];
                im2col(xslice, cin, h, w, kh, kw, stride, padding, oh, ow, &mut col);
                let colv = ArrayView2::from_shape((ckk, spatial), col.as_slice()).unwrap();
                let mut dkview = ArrayViewMut2::from_shape((cout, ckk), dk.as_mut_slice()).unwrap();
                general_mat_mul(T::one(), &gview, &colv.t(), T::one(), &mut dkview);
            }
            if let Some(di) = dinput.as_mut() {
                let mut cgview =
                    ArrayViewMut2::from_shape((ckk, spatial), colgrad.as_mut_slice()).unwrap();
                general_mat_mul(T::one(), &kmat.t(), &gview, T::zero(), &mut cgview);
                let dslice = &mut di[ni * cin * h * w..(ni + 1) * cin * h * w];
                col2im_add(&colgrad, cin, h, w, kh, kw, stride, padding, oh, ow, dslice);
            }
            if let Some(db) = dbias.as_mut() {
                for co in 0..cout {
                    let base = co * spatial;
                    let mut acc = T::zero();
                    for &g in &gout[base..base + spatial] {
                        acc += g;
                    }
                    db[co] += acc;
                }
            }
        }
    }

    if let Some(di) = dinput {
        input.accumulate_grad(&di);
    }
    if let Some(dk) = dkernel {
        kernel.accumulate_grad(&dk);
    }
    if let (Some(db), Some(b)) = (dbias, bias) {
        b.accumulate_grad(&db);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let spatial = oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let spatial = oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
