//! Dense NCHW `f32` tensors and the forward/backward primitives the feature
//! network and the Laplacian filters are built from.
//!
//! Convolution is cross-correlation (no kernel flip). It is lowered to a
//! matrix product over im2col patches, processed in chunks of whole output
//! rows so the patch buffer stays bounded for large images.

use std::fmt;

use thiserror::Error;

/// Upper bound on the number of floats held by one im2col patch buffer.
const PATCH_BUFFER_FLOATS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("tensor data has {len} elements but shape {shape} needs {}", shape.len())]
    DataLength { shape: Shape, len: usize },
    #[error("{op}: output would be empty for input {input}")]
    EmptyOutput { op: &'static str, input: Shape },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense 4-D tensor, row-major with `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f32) -> Result<()> {
        self.expect_same_shape("add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1`.
    #[default]
    Valid,
    /// Zero padding of `(k - 1) / 2` on every side (odd kernels only).
    Same,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(
    op: &'static str,
    input: Shape,
    kernel: Shape,
    padding: Padding,
    stride: usize,
) -> Result<ConvGeometry> {
    if input.c != kernel.c {
        return Err(TensorError::ShapeMismatch {
            op,
            left: input,
            right: kernel,
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: "stride must be at least 1".into(),
        });
    }
    let (pad_h, pad_w) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            if kernel.h % 2 == 0 || kernel.w % 2 == 0 {
                return Err(TensorError::InvalidArgument {
                    op,
                    msg: format!("same padding needs an odd kernel, got {}x{}", kernel.h, kernel.w),
                });
            }
            (kernel.h / 2, kernel.w / 2)
        }
    };
    let span_h = input.h + 2 * pad_h;
    let span_w = input.w + 2 * pad_w;
    if kernel.h == 0 || kernel.w == 0 || span_h < kernel.h || span_w < kernel.w || input.n == 0 {
        return Err(TensorError::EmptyOutput { op, input });
    }
    Ok(ConvGeometry {
        pad_h,
        pad_w,
        out_h: (span_h - kernel.h) / stride + 1,
        out_w: (span_w - kernel.w) / stride + 1,
    })
}

/// Layout of one chunk of im2col patches: output rows `[row0, row0 + rows)`.
struct PatchChunk {
    row0: usize,
    rows: usize,
}

fn patch_chunks(out_h: usize, out_w: usize, patch_rows: usize) -> impl Iterator<Item = PatchChunk> {
    let per_chunk = (PATCH_BUFFER_FLOATS / (patch_rows * out_w).max(1)).clamp(1, out_h);
    (0..out_h).step_by(per_chunk).map(move |row0| PatchChunk {
        row0,
        rows: per_chunk.min(out_h - row0),
    })
}

struct Im2Col<'a> {
    input: &'a [f32],
    in_shape: Shape,
    kernel: Shape,
    geom: ConvGeometry,
    stride: usize,
}

impl Im2Col<'_> {
    fn patch_rows(&self) -> usize {
        self.kernel.c * self.kernel.h * self.kernel.w
    }

    /// Fills `cols` (patch_rows x chunk_len) for one image plane-set.
    fn gather(&self, chunk: &PatchChunk, cols: &mut [f32]) {
        let ow = self.geom.out_w;
        let len = chunk.rows * ow;
        let (h, w) = (self.in_shape.h, self.in_shape.w);
        let mut r = 0;
        for ic in 0..self.kernel.c {
            let plane = &self.input[ic * h * w..(ic + 1) * h * w];
            for ki in 0..self.kernel.h {
                for kj in 0..self.kernel.w {
                    let dst = &mut cols[r * len..(r + 1) * len];
                    for (local_row, oy) in (chunk.row0..chunk.row0 + chunk.rows).enumerate() {
                        let out_row = &mut dst[local_row * ow..(local_row + 1) * ow];
                        let iy = (oy * self.stride + ki) as isize - self.geom.pad_h as isize;
                        if iy < 0 || iy as usize >= h {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.geom.pad_w as isize;
                            *v = if ix < 0 || ix as usize >= w { 0.0 } else { src[ix as usize] };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adds patch gradients `cols` back onto the input-plane gradient.
    fn scatter(&self, chunk: &PatchChunk, cols: &[f32], grad_in: &mut [f32]) {
        let ow = self.geom.out_w;
        let len = chunk.rows * ow;
        let (h, w) = (self.in_shape.h, self.in_shape.w);
        let mut r = 0;
        for ic in 0..self.kernel.c {
            let plane = &mut grad_in[ic * h * w..(ic + 1) * h * w];
            for ki in 0..self.kernel.h {
                for kj in 0..self.kernel.w {
                    let src = &cols[r * len..(r + 1) * len];
                    for (local_row, oy) in (chunk.row0..chunk.row0 + chunk.rows).enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.geom.pad_h as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in src[local_row * ow..(local_row + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.geom.pad_w as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// 2-D cross-correlation. `kernel` is laid out as (out_c, in_c, kh, kw).
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d_forward";
    let in_shape = input.shape();
    let k_shape = kernel.shape();
    let geom = conv_geometry(OP, in_shape, k_shape, padding, stride)?;
    if bias.len() != k_shape.n {
        return Err(TensorError::InvalidArgument {
            op: OP,
            msg: format!("bias has {} entries for {} output channels", bias.len(), k_shape.n),
        });
    }
    let out_shape = Shape::new(in_shape.n, k_shape.n, geom.out_h, geom.out_w);
    let mut out = Tensor::zeros(out_shape);
    let out_plane = out_shape.plane();
    let in_image = in_shape.c * in_shape.plane();
    let out_image = out_shape.c * out_plane;

    for b in 0..in_shape.n {
        let lowering = Im2Col {
            input: &input.data[b * in_image..(b + 1) * in_image],
            in_shape,
            kernel: k_shape,
            geom,
            stride,
        };
        let patch_rows = lowering.patch_rows();
        let out_img = &mut out.data[b * out_image..(b + 1) * out_image];
        let mut cols = Vec::new();
        for chunk in patch_chunks(geom.out_h, geom.out_w, patch_rows) {
            let len = chunk.rows * geom.out_w;
            cols.resize(patch_rows * len, 0.0);
            lowering.gather(&chunk, &mut cols);
            let offset = chunk.row0 * geom.out_w;
            // SAFETY: every pointer/stride pair describes a region inside the
            // corresponding buffer: kernel is out_c x patch_rows, cols is
            // patch_rows x len, and the output block is out_c rows of `len`
            // floats starting at `offset` with row stride `out_plane`.
            unsafe {
                matrixmultiply::sgemm(
                    k_shape.n,
                    patch_rows,
                    len,
                    1.0,
                    kernel.data.as_ptr(),
                    patch_rows as isize,
                    1,
                    cols.as_ptr(),
                    len as isize,
                    1,
                    0.0,
                    out_img.as_mut_ptr().add(offset),
                    out_plane as isize,
                    1,
                );
            }
        }
        for (oc, &bv) in bias.iter().enumerate() {
            out_img[oc * out_plane..(oc + 1) * out_plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradient of `sum(grad_output * conv2d_forward(input, kernel, ..))` with
/// respect to `input`. Bias does not affect the input gradient.
pub fn conv2d_backward(
    grad_output: &Tensor,
    input_shape: Shape,
    kernel: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d_backward";
    let k_shape = kernel.shape();
    let geom = conv_geometry(OP, input_shape, k_shape, padding, stride)?;
    let expected = Shape::new(input_shape.n, k_shape.n, geom.out_h, geom.out_w);
    if grad_output.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: grad_output.shape(),
            right: expected,
        });
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let out_plane = expected.plane();
    let in_image = input_shape.c * input_shape.plane();
    let out_image = expected.c * out_plane;

    for b in 0..input_shape.n {
        let lowering = Im2Col {
            input: &[],
            in_shape: input_shape,
            kernel: k_shape,
            geom,
            stride,
        };
        let patch_rows = lowering.patch_rows();
        let g_img = &grad_output.data[b * out_image..(b + 1) * out_image];
        let gi_img = &mut grad_in.data[b * in_image..(b + 1) * in_image];
        let mut cols = Vec::new();
        for chunk in patch_chunks(geom.out_h, geom.out_w, patch_rows) {
            let len = chunk.rows * geom.out_w;
            cols.resize(patch_rows * len, 0.0);
            let offset = chunk.row0 * geom.out_w;
            // SAFETY: kernel is read transposed (patch_rows x out_c with unit
            // row stride), the gradient block is out_c rows of `len` floats
            // with row stride `out_plane`, and cols is patch_rows x len.
            unsafe {
                matrixmultiply::sgemm(
                    patch_rows,
                    k_shape.n,
                    len,
                    1.0,
                    kernel.data.as_ptr(),
                    1,
                    patch_rows as isize,
                    g_img.as_ptr().add(offset),
                    out_plane as isize,
                    1,
                    0.0,
                    cols.as_mut_ptr(),
                    len as isize,
                    1,
                );
            }
            lowering.scatter(&chunk, &cols, gi_img);
        }
    }
    Ok(grad_in)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` where `x > 0`; the gradient at exactly zero is zero.
pub fn relu_backward(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    grad.expect_same_shape("relu_backward", x)?;
    let data = grad
        .data
        .iter()
        .zip(&x.data)
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: grad.shape,
        data,
    })
}

/// Output shape of a `p x p`, stride-`p` pool. Remainder rows/cols are dropped.
pub fn pooled_shape(op: &'static str, input: Shape, p: usize) -> Result<Shape> {
    if p == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: "pool size must be at least 1".into(),
        });
    }
    let out = Shape::new(input.n, input.c, input.h / p, input.w / p);
    if out.is_empty() {
        return Err(TensorError::EmptyOutput { op, input });
    }
    Ok(out)
}

pub fn avgpool_forward(x: &Tensor, p: usize) -> Result<Tensor> {
    let in_shape = x.shape();
    let out_shape = pooled_shape("avgpool_forward", in_shape, p)?;
    if p == 1 {
        return Ok(x.clone());
    }
    let inv = 1.0 / (p * p) as f64;
    let mut out = Tensor::zeros(out_shape);
    for nc in 0..in_shape.n * in_shape.c {
        let src = &x.data[nc * in_shape.plane()..(nc + 1) * in_shape.plane()];
        let dst = &mut out.data[nc * out_shape.plane()..(nc + 1) * out_shape.plane()];
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut acc = 0.0f64;
                for dy in 0..p {
                    let row = (oy * p + dy) * in_shape.w + ox * p;
                    acc += src[row..row + p].iter().map(|&v| v as f64).sum::<f64>();
                }
                dst[oy * out_shape.w + ox] = (acc * inv) as f32;
            }
        }
    }
    Ok(out)
}

/// Spreads each pooled gradient uniformly (`/ p^2`) over its block.
pub fn avgpool_backward(grad: &Tensor, input_shape: Shape, p: usize) -> Result<Tensor> {
    const OP: &str = "avgpool_backward";
    let out_shape = pooled_shape(OP, input_shape, p)?;
    if grad.shape() != out_shape {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: grad.shape(),
            right: out_shape,
        });
    }
    if p == 1 {
        return Ok(grad.clone());
    }
    let inv = 1.0 / (p * p) as f32;
    let mut out = Tensor::zeros(input_shape);
    for nc in 0..input_shape.n * input_shape.c {
        let src = &grad.data[nc * out_shape.plane()..(nc + 1) * out_shape.plane()];
        let dst = &mut out.data[nc * input_shape.plane()..(nc + 1) * input_shape.plane()];
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let g = src[oy * out_shape.w + ox] * inv;
                for dy in 0..p {
                    let row = (oy * p + dy) * input_shape.w + ox * p;
                    dst[row..row + p].iter_mut().for_each(|v| *v = g);
                }
            }
        }
    }
    Ok(out)
}

/// Flat input positions selected by a max pool, one per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape,
    output_shape: Shape,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max pool; ties go to the first cell in row-major scan order.
pub fn maxpool_forward(x: &Tensor, p: usize) -> Result<(Tensor, PoolIndices)> {
    let in_shape = x.shape();
    let out_shape = pooled_shape("maxpool_forward", in_shape, p)?;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.len()];
    for nc in 0..in_shape.n * in_shape.c {
        let base = nc * in_shape.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best_idx = base + oy * p * in_shape.w + ox * p;
                let mut best = x.data[best_idx];
                for dy in 0..p {
                    for dx in 0..p {
                        let idx = base + (oy * p + dy) * in_shape.w + ox * p + dx;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * out_shape.plane() + oy * out_shape.w + ox;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: in_shape,
            output_shape: out_shape,
            argmax,
        },
    ))
}

pub fn maxpool_backward(grad: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad.shape() != indices.output_shape {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool_backward",
            left: grad.shape(),
            right: indices.output_shape,
        });
    }
    let mut out = Tensor::zeros(indices.input_shape);
    for (&g, &idx) in grad.data.iter().zip(&indices.argmax) {
        out.data[idx] += g;
    }
    Ok(out)
}
