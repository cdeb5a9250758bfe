//! Loss terms and their gradients: feature-space content loss, Gram-matrix
//! style loss, and the pooled image-Laplacian loss (with a 5x5 LoG variant),
//! combined into one weighted objective over the stylized image's pixels.
//!
//! Loss values are accumulated and reported in `f64`; gradients are `f32`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::net::{NetError, NetworkGraph, DEFAULT_CONTENT_TAP, DEFAULT_STYLE_TAPS};
use crate::tensor::{self, Padding, Shape, Tensor, TensorError};

/// The discrete 3x3 Laplacian filter.
pub const LAPLACIAN_3X3: [f32; 9] = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];

/// A common 5x5 discrete Laplacian-of-Gaussian; coefficients sum to zero.
#[rustfmt::skip]
pub const LOG_5X5: [f32; 25] = [
    0.0, 0.0,   1.0, 0.0, 0.0,
    0.0, 1.0,   2.0, 1.0, 0.0,
    1.0, 2.0, -16.0, 2.0, 1.0,
    0.0, 1.0,   2.0, 1.0, 0.0,
    0.0, 0.0,   1.0, 0.0, 0.0,
];

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{term}: shape mismatch between {left} and {right}")]
    ShapeMismatch { term: String, left: Shape, right: Shape },
    #[error("{term}: image {shape} is too small for this filter")]
    ImageTooSmall { term: String, shape: Shape },
    #[error("{term}: activation cache has no layer `{layer}`")]
    MissingLayer { term: String, layer: String },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("{term}: {source}")]
    Net {
        term: String,
        #[source]
        source: Box<NetError>,
    },
    #[error("{term}: {source}")]
    Tensor {
        term: String,
        #[source]
        source: Box<TensorError>,
    },
}

pub type Result<T> = std::result::Result<T, LossError>;

fn tensor_err(term: &str) -> impl Fn(TensorError) -> LossError + '_ {
    move |source| LossError::Tensor {
        term: term.to_owned(),
        source: Box::new(source),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LapFilter {
    /// `p x p` average pooling followed by the 3x3 Laplacian.
    #[default]
    PooledLaplacian,
    /// Fixed 5x5 LoG, no pooling; the term's pool size is ignored.
    Log5,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LapTerm {
    pub pool: usize,
    pub gamma: f64,
}

impl LapTerm {
    pub const fn new(pool: usize, gamma: f64) -> Self {
        Self { pool, gamma }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleLayer {
    pub layer: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub content_layer: String,
    pub style_layers: Vec<StyleLayer>,
    pub lap_terms: Vec<LapTerm>,
    pub lap_filter: LapFilter,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 100.0,
            content_layer: DEFAULT_CONTENT_TAP.to_owned(),
            style_layers: DEFAULT_STYLE_TAPS
                .iter()
                .map(|l| StyleLayer {
                    layer: (*l).to_owned(),
                    weight: 1.0 / DEFAULT_STYLE_TAPS.len() as f64,
                })
                .collect(),
            lap_terms: vec![LapTerm::new(4, 100.0)],
            lap_filter: LapFilter::PooledLaplacian,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LossError::InvalidConfig(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("content weight must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("style weight must be >= 0, got {}", self.beta));
        }
        for s in &self.style_layers {
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return bad(format!("style layer `{}` needs a positive weight, got {}", s.layer, s.weight));
            }
        }
        for t in &self.lap_terms {
            if t.pool == 0 {
                return bad("Laplacian pool size must be at least 1".into());
            }
            if !(t.gamma >= 0.0 && t.gamma.is_finite()) {
                return bad(format!("Laplacian weight must be >= 0, got {}", t.gamma));
            }
        }
        Ok(())
    }

    /// Every activation the objective reads.
    pub fn taps(&self) -> Vec<String> {
        let mut taps = vec![self.content_layer.clone()];
        taps.extend(self.style_layers.iter().map(|s| s.layer.clone()));
        taps.sort();
        taps.dedup();
        taps
    }

    /// Column label for Laplacian term `k`, e.g. `p4` or `log5`.
    pub fn lap_label(&self, k: usize) -> String {
        match self.lap_filter {
            LapFilter::PooledLaplacian => format!("p{}", self.lap_terms[k].pool),
            LapFilter::Log5 if self.lap_terms.len() == 1 => "log5".to_owned(),
            LapFilter::Log5 => format!("log5_{k}"),
        }
    }
}

/// Unweighted term values of one objective evaluation, plus the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub lap: Vec<f64>,
}

impl LossReport {
    pub fn new(config: &LossConfig, content: f64, style: f64, lap: Vec<f64>) -> Self {
        let total = config.alpha * content
            + config.beta * style
            + config.lap_terms.iter().zip(&lap).map(|(t, l)| t.gamma * l).sum::<f64>();
        Self {
            total,
            content,
            style,
            lap,
        }
    }
}

/// Normalised Gram matrix `F F^T / M` of one layer's feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    n: usize,
    data: Vec<f32>,
}

impl Gram {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc: f32 = lanes.iter().sum();
    for i in chunks * 8..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Gram matrix of a (1, N, H, W) activation. Only the upper triangle is
/// computed; the result is exactly symmetric.
pub fn gram(features: &Tensor) -> Gram {
    let s = features.shape();
    let (n, m) = (s.n * s.c, s.plane());
    let inv_m = 1.0 / m as f32;
    let f = features.data();
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&f[i * m..(i + 1) * m], &f[j * m..(j + 1) * m]) * inv_m;
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Gram { n, data }
}

/// `out = alpha * a(rows x inner) * b(inner x cols)`, all row-major.
fn matmul(alpha: f32, a: &[f32], b: &[f32], rows: usize, inner: usize, cols: usize) -> Vec<f32> {
    assert_eq!(a.len(), rows * inner);
    assert_eq!(b.len(), inner * cols);
    let mut out = vec![0.0f32; rows * cols];
    // SAFETY: the three buffers hold exactly rows*inner, inner*cols and
    // rows*cols floats with the row-major strides passed here.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            inner,
            cols,
            alpha,
            a.as_ptr(),
            inner as isize,
            1,
            b.as_ptr(),
            cols as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
    out
}

fn sum_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// `(1 / (N M)) * sum (F_hat - F_c)^2` and its gradient `2 (F_hat - F_c) / (N M)`.
pub fn content_loss(f_hat: &Tensor, f_c: &Tensor) -> Result<(f64, Tensor)> {
    if f_hat.shape() != f_c.shape() {
        return Err(LossError::ShapeMismatch {
            term: "content".into(),
            left: f_hat.shape(),
            right: f_c.shape(),
        });
    }
    let s = f_c.shape();
    let norm = (s.c * s.plane()) as f64;
    let loss = sum_sq_diff(f_hat.data(), f_c.data()) / norm;
    let scale = (2.0 / norm) as f32;
    let grad: Vec<f32> = f_hat.data().iter().zip(f_c.data()).map(|(&a, &b)| scale * (a - b)).collect();
    Ok((loss, Tensor::from_vec(s, grad).expect("same shape")))
}

/// One layer's style energy `(1 / 4N^2) * sum (G_hat - G_s)^2` and its
/// gradient with respect to the layer activation.
pub fn style_layer_loss(f_hat: &Tensor, target: &Gram) -> Result<(f64, Tensor)> {
    let s = f_hat.shape();
    let n = s.n * s.c;
    if n != target.n {
        return Err(LossError::ShapeMismatch {
            term: "style".into(),
            left: s,
            right: Shape::new(1, target.n, target.n, 1),
        });
    }
    let g_hat = gram(f_hat);
    let diff: Vec<f32> = g_hat.data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
    let n2 = (n * n) as f64;
    let loss = diff.iter().map(|&d| d as f64 * d as f64).sum::<f64>() / (4.0 * n2);
    // dE/dF = (G_hat - G_s) F / (N^2 M), using symmetry of the difference.
    let alpha = (1.0 / (n2 * s.plane() as f64)) as f32;
    let grad = matmul(alpha, &diff, f_hat.data(), n, n, s.plane());
    Ok((loss, Tensor::from_vec(s, grad).expect("same shape")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleTarget {
    pub layer: String,
    pub weight: f64,
    pub gram: Gram,
}

/// `sum_l w_l E_l` over the style layers, with per-layer gradients already
/// scaled by `w_l`.
pub fn style_loss(
    cache: &crate::net::ActivationCache,
    targets: &[StyleTarget],
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for t in targets {
        let term = format!("style:{}", t.layer);
        let f = cache.get(&t.layer).ok_or_else(|| LossError::MissingLayer {
            term: term.clone(),
            layer: t.layer.clone(),
        })?;
        let (e, mut g) = style_layer_loss(f, &t.gram).map_err(|e| retag(e, &term))?;
        total += t.weight * e;
        g.scale(t.weight as f32);
        grads.push((t.layer.clone(), g));
    }
    Ok((total, grads))
}

fn retag(err: LossError, term: &str) -> LossError {
    match err {
        LossError::ShapeMismatch { left, right, .. } => LossError::ShapeMismatch {
            term: term.to_owned(),
            left,
            right,
        },
        other => other,
    }
}

fn replicated_kernel(taps: &[f32], side: usize, channels: usize) -> Tensor {
    let data = (0..channels).flat_map(|_| taps.iter().copied()).collect();
    Tensor::from_vec(Shape::new(1, channels, side, side), data).expect("kernel size")
}

fn check_filter_input(term: &str, image: &Tensor, pool: usize, side: usize) -> Result<Shape> {
    let s = image.shape();
    if s.n != 1 {
        return Err(LossError::ShapeMismatch {
            term: term.to_owned(),
            left: s,
            right: Shape::new(1, s.c, s.h, s.w),
        });
    }
    if pool == 0 || s.h / pool < side || s.w / pool < side {
        return Err(LossError::ImageTooSmall {
            term: term.to_owned(),
            shape: s,
        });
    }
    Ok(s)
}

/// Valid cross-correlation of every channel with the same `k x k` stencil,
/// summed over channels. Equivalent to one convolution with the stencil
/// replicated across input channels; accumulates in `f64` so zero-sum
/// stencils cancel offsets exactly.
fn channel_stencil(image: &Tensor, stencil: &[f32], k: usize) -> Tensor {
    let s = image.shape();
    let (oh, ow) = (s.h - k + 1, s.w - k + 1);
    let src = image.data();
    let mut out = vec![0.0f32; oh * ow];
    let mut acc = vec![0.0f64; ow];
    for y in 0..oh {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for c in 0..s.c {
            for ky in 0..k {
                let row = &src[(c * s.h + y + ky) * s.w..][..s.w];
                for kx in 0..k {
                    let w = stencil[ky * k + kx] as f64;
                    if w == 0.0 {
                        continue;
                    }
                    for (a, &v) in acc.iter_mut().zip(&row[kx..kx + ow]) {
                        *a += w * v as f64;
                    }
                }
            }
        }
        for (o, a) in out[y * ow..(y + 1) * ow].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Tensor::from_vec(Shape::new(1, 1, oh, ow), out).expect("stencil output shape")
}

/// Channel-summed Laplacian of the `p x p` average-pooled image, i.e. one
/// convolution whose kernel holds the 3x3 Laplacian in every input channel.
/// Valid padding, so the output is (1, 1, H/p - 2, W/p - 2).
pub fn laplacian(image: &Tensor, pool: usize) -> Result<Tensor> {
    let term = format!("lap_p{pool}");
    check_filter_input(&term, image, pool, 3)?;
    let pooled = tensor::avgpool_forward(image, pool).map_err(tensor_err(&term))?;
    Ok(channel_stencil(&pooled, &LAPLACIAN_3X3, 3))
}

pub fn laplacian_backward(grad: &Tensor, image_shape: Shape, pool: usize) -> Result<Tensor> {
    let term = format!("lap_p{pool}");
    let pooled_shape = tensor::pooled_shape("laplacian_backward", image_shape, pool).map_err(tensor_err(&term))?;
    let kernel = replicated_kernel(&LAPLACIAN_3X3, 3, image_shape.c);
    let g_pooled =
        tensor::conv2d_backward(grad, pooled_shape, &kernel, Padding::Valid, 1).map_err(tensor_err(&term))?;
    tensor::avgpool_backward(&g_pooled, image_shape, pool).map_err(tensor_err(&term))
}

/// Channel-summed 5x5 LoG response, valid padding, no pooling.
pub fn log_laplacian(image: &Tensor) -> Result<Tensor> {
    check_filter_input("lap_log5", image, 1, 5)?;
    Ok(channel_stencil(image, &LOG_5X5, 5))
}

pub fn log_laplacian_backward(grad: &Tensor, image_shape: Shape) -> Result<Tensor> {
    let kernel = replicated_kernel(&LOG_5X5, 5, image_shape.c);
    tensor::conv2d_backward(grad, image_shape, &kernel, Padding::Valid, 1).map_err(tensor_err("lap_log5"))
}

pub fn filter_response(filter: LapFilter, image: &Tensor, pool: usize) -> Result<Tensor> {
    match filter {
        LapFilter::PooledLaplacian => laplacian(image, pool),
        LapFilter::Log5 => log_laplacian(image),
    }
}

fn filter_backward(filter: LapFilter, grad: &Tensor, image_shape: Shape, pool: usize) -> Result<Tensor> {
    match filter {
        LapFilter::PooledLaplacian => laplacian_backward(grad, image_shape, pool),
        LapFilter::Log5 => log_laplacian_backward(grad, image_shape),
    }
}

/// `sum (D(x_c) - D(x_hat))^2` (no size normalisation) and its pixel gradient.
pub fn filter_loss(filter: LapFilter, x_hat: &Tensor, target: &Tensor, pool: usize) -> Result<(f64, Tensor)> {
    let response = filter_response(filter, x_hat, pool)?;
    if response.shape() != target.shape() {
        return Err(LossError::ShapeMismatch {
            term: match filter {
                LapFilter::PooledLaplacian => format!("lap_p{pool}"),
                LapFilter::Log5 => "lap_log5".into(),
            },
            left: response.shape(),
            right: target.shape(),
        });
    }
    let loss = sum_sq_diff(response.data(), target.data());
    let diff: Vec<f32> = response.data().iter().zip(target.data()).map(|(&a, &b)| 2.0 * (a - b)).collect();
    let diff = Tensor::from_vec(response.shape(), diff).expect("same shape");
    let grad = filter_backward(filter, &diff, x_hat.shape(), pool)?;
    Ok((loss, grad))
}

/// Pooled-Laplacian loss against a cached `laplacian(x_c, pool)`.
pub fn laplacian_loss(x_hat: &Tensor, content_laplacian: &Tensor, pool: usize) -> Result<(f64, Tensor)> {
    filter_loss(LapFilter::PooledLaplacian, x_hat, content_laplacian, pool)
}

/// Everything derived from the content and style images, computed once
/// before optimisation starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub content_features: Tensor,
    pub style: Vec<StyleTarget>,
    pub laplacians: Vec<Tensor>,
}

impl Targets {
    pub fn compute(graph: &NetworkGraph, config: &LossConfig, content: &Tensor, style: &Tensor) -> Result<Self> {
        config.validate()?;
        let net_err = |term: &str| {
            let term = term.to_owned();
            move |source| LossError::Net {
                term,
                source: Box::new(source),
            }
        };
        let content_cache = graph.forward(content).map_err(net_err("content"))?;
        let content_features = content_cache
            .tap(&config.content_layer)
            .map_err(net_err("content"))?
            .clone();
        let style_cache = graph.forward(style).map_err(net_err("style"))?;
        let mut style_targets = Vec::with_capacity(config.style_layers.len());
        for s in &config.style_layers {
            let f = style_cache.tap(&s.layer).map_err(net_err(&format!("style:{}", s.layer)))?;
            style_targets.push(StyleTarget {
                layer: s.layer.clone(),
                weight: s.weight,
                gram: gram(f),
            });
        }
        let laplacians = config
            .lap_terms
            .iter()
            .map(|t| filter_response(config.lap_filter, content, t.pool))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            content_features,
            style: style_targets,
            laplacians,
        })
    }
}

/// Evaluates the full objective at `x_hat`.
///
/// The content and style gradients are pulled back through the network;
/// the Laplacian gradients are taken directly in pixel space.
pub fn total_loss(
    graph: &NetworkGraph,
    x_hat: &Tensor,
    config: &LossConfig,
    targets: &Targets,
) -> Result<(LossReport, Tensor)> {
    let cache = graph.forward(x_hat).map_err(|source| LossError::Net {
        term: "forward".into(),
        source: Box::new(source),
    })?;
    let f_hat = cache.get(&config.content_layer).ok_or_else(|| LossError::MissingLayer {
        term: "content".into(),
        layer: config.content_layer.clone(),
    })?;
    let (content, content_grad) = content_loss(f_hat, &targets.content_features)?;
    let (style, style_grads) = style_loss(&cache, &targets.style)?;

    let mut grad = if config.alpha > 0.0 || config.beta > 0.0 {
        let mut tap_grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut add = |layer: &str, g: Tensor, w: f64| {
            let mut g = g;
            g.scale(w as f32);
            match tap_grads.get_mut(layer) {
                Some(acc) => acc.add_scaled(&g, 1.0).expect("same layer, same shape"),
                None => {
                    tap_grads.insert(layer.to_owned(), g);
                }
            }
        };
        if config.alpha > 0.0 {
            add(&config.content_layer, content_grad, config.alpha);
        }
        if config.beta > 0.0 {
            for (layer, g) in style_grads {
                add(&layer, g, config.beta);
            }
        }
        graph.backward_to_input(&cache, &tap_grads).map_err(|source| LossError::Net {
            term: "backward".into(),
            source: Box::new(source),
        })?
    } else {
        Tensor::zeros(x_hat.shape())
    };

    let mut lap = Vec::with_capacity(config.lap_terms.len());
    for (term, target) in config.lap_terms.iter().zip(&targets.laplacians) {
        let (value, g) = filter_loss(config.lap_filter, x_hat, target, term.pool)?;
        lap.push(value);
        if term.gamma > 0.0 {
            grad.add_scaled(&g, term.gamma as f32).expect("pixel gradient shape");
        }
    }
    Ok((LossReport::new(config, content, style, lap), grad))
}
