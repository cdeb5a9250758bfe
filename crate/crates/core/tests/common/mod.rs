//! Shared oracles and checks for the integration and acceptance tests.
//!
//! Everything named `*_ref` is a straightforward nested-loop evaluation in
//! `f64`, independent of the library's im2col/GEMM code paths.

#![allow(dead_code)]

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::process::Command;

use lapstyle::imageio::{self, RgbImage};
use lapstyle::loss::{self, LapFilter, LapTerm, LossConfig, Targets, LAPLACIAN_3X3, LOG_5X5};
use lapstyle::net::{build_tiny_vgg19, LayerKind, NetworkGraph, PoolingMode};
use lapstyle::optim::{AdamConfig, AdamState, LbfgsConfig, LbfgsState};
use lapstyle::synth::{synthesize_with, Init, Optimizer, SynthesisConfig};
use lapstyle::tensor::{self, Padding};
use lapstyle::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one acceptance check.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn seeded(shape: Shape, seed: u64, amp: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random_range(-amp..amp)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Smooth image with an edge, on the preprocessed pixel scale.
pub fn pattern(size: usize, phase: f32) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(1, 3, size, size));
    let s = size as f32;
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = 60.0 * ((x as f32 * 6.0 / s + phase + c as f32).sin() * (y as f32 * 4.0 / s).cos());
                t.data_mut()[(c * size + y) * size + x] = v + if x > size / 2 { 30.0 } else { -30.0 };
            }
        }
    }
    t
}

/// Single-image `c x h x w` array in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.n, 1);
        Self {
            c: s.c,
            h: s.h,
            w: s.w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }
}

/// Cross-correlation with zero padding `pad` and stride `stride`.
pub fn conv_ref(x: &Arr, kernel: &Tensor, bias: &[f32], pad: usize, stride: usize) -> Arr {
    let k = kernel.shape();
    assert_eq!(k.c, x.c);
    let oh = (x.h + 2 * pad - k.h) / stride + 1;
    let ow = (x.w + 2 * pad - k.w) / stride + 1;
    let mut out = Arr::zeros(k.n, oh, ow);
    for o in 0..k.n {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.get(o).copied().unwrap_or(0.0) as f64;
                for i in 0..k.c {
                    for ky in 0..k.h {
                        for kx in 0..k.w {
                            let sy = (y * stride + ky) as isize - pad as isize;
                            let sx = (xx * stride + kx) as isize - pad as isize;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += kernel.at(o, i, ky, kx) as f64 * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                *out.at_mut(o, y, xx) = acc;
            }
        }
    }
    out
}

pub fn relu_ref(x: &Arr) -> Arr {
    Arr {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

pub fn maxpool_ref(x: &Arr, p: usize) -> Arr {
    let mut out = Arr::zeros(x.c, x.h / p, x.w / p);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..p {
                    for dx in 0..p {
                        best = best.max(x.at(c, y * p + dy, xx * p + dx));
                    }
                }
                *out.at_mut(c, y, xx) = best;
            }
        }
    }
    out
}

pub fn avgpool_ref(x: &Arr, p: usize) -> Arr {
    let mut out = Arr::zeros(x.c, x.h / p, x.w / p);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                let mut sum = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        sum += x.at(c, y * p + dy, xx * p + dx);
                    }
                }
                *out.at_mut(c, y, xx) = sum / (p * p) as f64;
            }
        }
    }
    out
}

/// Output of every layer of `graph` for input `x`.
pub fn forward_ref(graph: &NetworkGraph, x: &Arr) -> HashMap<String, Arr> {
    let mut cur = x.clone();
    let mut out = HashMap::new();
    for layer in graph.layers() {
        cur = match &layer.kind {
            LayerKind::Conv { weights } => {
                let pad = weights.kernel.shape().h / 2;
                conv_ref(&cur, &weights.kernel, &weights.bias, pad, 1)
            }
            LayerKind::Relu => relu_ref(&cur),
            LayerKind::MaxPool { size } => maxpool_ref(&cur, *size),
            LayerKind::AvgPool { size } => avgpool_ref(&cur, *size),
        };
        out.insert(layer.name.clone(), cur.clone());
    }
    out
}

/// `F F^T / M` with `F` the `N x M` matrix of flattened channels.
pub fn gram_ref(f: &Arr) -> Vec<f64> {
    let m = f.h * f.w;
    let mut g = vec![0.0; f.c * f.c];
    for i in 0..f.c {
        for j in 0..f.c {
            let mut acc = 0.0;
            for p in 0..m {
                acc += f.data[i * m + p] * f.data[j * m + p];
            }
            g[i * f.c + j] = acc / m as f64;
        }
    }
    g
}

pub fn content_ref(f: &Arr, target: &Arr) -> f64 {
    let nm = f.data.len() as f64;
    f.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nm
}

pub fn style_energy_ref(f: &Arr, target_gram: &[f64]) -> f64 {
    let n = f.c as f64;
    let g = gram_ref(f);
    g.iter().zip(target_gram).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (4.0 * n * n)
}

/// Channel-summed response of a single-channel 2-D stencil, no padding.
fn stencil_ref(x: &Arr, stencil: &[f32], k: usize) -> Arr {
    let mut out = Arr::zeros(1, x.h - k + 1, x.w - k + 1);
    for y in 0..out.h {
        for xx in 0..out.w {
            let mut acc = 0.0;
            for c in 0..x.c {
                for ky in 0..k {
                    for kx in 0..k {
                        acc += stencil[ky * k + kx] as f64 * x.at(c, y + ky, xx + kx);
                    }
                }
            }
            *out.at_mut(0, y, xx) = acc;
        }
    }
    out
}

pub fn filter_ref(filter: LapFilter, x: &Arr, pool: usize) -> Arr {
    match filter {
        LapFilter::PooledLaplacian => stencil_ref(&avgpool_ref(x, pool), &LAPLACIAN_3X3, 3),
        LapFilter::Log5 => stencil_ref(x, &LOG_5X5, 5),
    }
}

/// Loss targets computed with the reference forward pass.
pub struct RefTargets {
    pub content: Arr,
    pub grams: Vec<Vec<f64>>,
    pub laplacians: Vec<Arr>,
}

impl RefTargets {
    pub fn new(graph: &NetworkGraph, config: &LossConfig, content: &Tensor, style: &Tensor) -> Self {
        let c = Arr::from_tensor(content);
        let content_acts = forward_ref(graph, &c);
        let style_acts = forward_ref(graph, &Arr::from_tensor(style));
        Self {
            content: content_acts[&config.content_layer].clone(),
            grams: config.style_layers.iter().map(|s| gram_ref(&style_acts[&s.layer])).collect(),
            laplacians: config
                .lap_terms
                .iter()
                .map(|t| filter_ref(config.lap_filter, &c, t.pool))
                .collect(),
        }
    }
}

/// Weighted objective at `x`, fully in `f64`.
pub fn objective_ref(graph: &NetworkGraph, config: &LossConfig, targets: &RefTargets, x: &Arr) -> f64 {
    let mut total = 0.0;
    if config.alpha > 0.0 || config.beta > 0.0 {
        let acts = forward_ref(graph, x);
        total += config.alpha * content_ref(&acts[&config.content_layer], &targets.content);
        for (s, g) in config.style_layers.iter().zip(&targets.grams) {
            total += config.beta * s.weight * style_energy_ref(&acts[&s.layer], g);
        }
    }
    for (t, target) in config.lap_terms.iter().zip(&targets.laplacians) {
        let l = filter_ref(config.lap_filter, x, t.pool);
        total += t.gamma * l.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    total
}

pub fn tiny_graph(config: &LossConfig, pooling: PoolingMode) -> NetworkGraph {
    build_tiny_vgg19(11, pooling)
        .with_taps(config.taps())
        .unwrap()
        .pruned()
}

/// Compares the library's pixel gradient with central differences of the
/// `f64` reference objective on every pixel. A coordinate passes when
/// `|a - n| / max(|a|, |n|, 1e-3 * max|n|) < 1e-3`.
pub fn gradient_check(name: &str, config: &LossConfig, size: usize, seed: u64) -> Check {
    let graph = tiny_graph(config, PoolingMode::Max);
    let shape = Shape::new(1, 3, size, size);
    let content = seeded(shape, seed, 60.0);
    let style = seeded(shape, seed + 1, 60.0);
    let x_hat = seeded(shape, seed + 2, 60.0);

    let targets = Targets::compute(&graph, config, &content, &style).unwrap();
    let (_, analytic) = loss::total_loss(&graph, &x_hat, config, &targets).unwrap();
    let ref_targets = RefTargets::new(&graph, config, &content, &style);

    let h = 1e-3;
    let base = Arr::from_tensor(&x_hat);
    let numeric: Vec<f64> = (0..base.data.len())
        .map(|i| {
            let mut plus = base.clone();
            plus.data[i] += h;
            let mut minus = base.clone();
            minus.data[i] -= h;
            (objective_ref(&graph, config, &ref_targets, &plus) - objective_ref(&graph, config, &ref_targets, &minus))
                / (2.0 * h)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut passed = 0;
    let mut worst = 0.0f64;
    for (a, n) in analytic.data().iter().zip(&numeric) {
        let a = *a as f64;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale);
        worst = worst.max(rel);
        if rel < 1e-3 {
            passed += 1;
        }
    }
    let checked = numeric.len();
    let pass = scale > 0.0 && passed as f64 >= 0.99 * checked as f64;
    Check::new(
        pass,
        format!("{name}: {passed}/{checked} coords within 1e-3 (worst rel {worst:.2e}, max|g| {scale:.3e})"),
    )
}

/// The gradient suite: one configuration per loss term plus the combined objective.
pub fn gradient_suite() -> Vec<(String, LossConfig)> {
    let none = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        lap_terms: vec![],
        ..LossConfig::default()
    };
    vec![
        (
            "content".into(),
            LossConfig {
                alpha: 1.0,
                ..none.clone()
            },
        ),
        (
            "content@relu2_2".into(),
            LossConfig {
                alpha: 1.0,
                content_layer: "relu2_2".into(),
                ..none.clone()
            },
        ),
        (
            "style".into(),
            LossConfig {
                beta: 1.0,
                ..none.clone()
            },
        ),
        (
            "laplacian p=2".into(),
            LossConfig {
                lap_terms: vec![LapTerm::new(2, 1.0)],
                ..none.clone()
            },
        ),
        (
            "laplacian p=4".into(),
            LossConfig {
                lap_terms: vec![LapTerm::new(4, 1.0)],
                ..none.clone()
            },
        ),
        (
            "log5".into(),
            LossConfig {
                lap_terms: vec![LapTerm::new(1, 1.0)],
                lap_filter: LapFilter::Log5,
                ..none.clone()
            },
        ),
        (
            "combined".into(),
            LossConfig {
                lap_terms: vec![LapTerm::new(4, 100.0), LapTerm::new(2, 10.0)],
                ..LossConfig::default()
            },
        ),
    ]
}

fn max_abs(a: &Tensor, b: &Arr) -> f64 {
    a.data().iter().zip(&b.data).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - y).abs()))
}

/// conv2d, avgpool, maxpool and gram against nested loops on `cases` seeded inputs each.
pub fn operator_oracles(cases: u64) -> Vec<Check> {
    let tol = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 4];
    for case in 0..cases {
        let c = rng.random_range(1..=4);
        let h = rng.random_range(5..=12);
        let w = rng.random_range(5..=12);
        let x = seeded(Shape::new(1, c, h, w), 100 + case, 1.0);
        let xa = Arr::from_tensor(&x);

        let oc = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let same = rng.random_bool(0.5);
        let kernel = seeded(Shape::new(oc, c, k, k), 500 + case, 1.0);
        let bias: Vec<f32> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (padding, pad) = if same { (Padding::Same, k / 2) } else { (Padding::Valid, 0) };
        let got = tensor::conv2d_forward(&x, &kernel, &bias, padding, stride).unwrap();
        worst[0] = worst[0].max(max_abs(&got, &conv_ref(&xa, &kernel, &bias, pad, stride)));

        let p = rng.random_range(1..=3);
        let got = tensor::avgpool_forward(&x, p).unwrap();
        worst[1] = worst[1].max(max_abs(&got, &avgpool_ref(&xa, p)));
        let (got, _) = tensor::maxpool_forward(&x, p).unwrap();
        worst[2] = worst[2].max(max_abs(&got, &maxpool_ref(&xa, p)));

        let g = loss::gram(&x);
        let oracle = gram_ref(&xa);
        let gram_err = g.data().iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((*a as f64 - b).abs()));
        worst[3] = worst[3].max(gram_err);
    }
    ["conv2d", "avgpool", "maxpool", "gram"]
        .iter()
        .zip(worst)
        .map(|(name, err)| Check::new(err < tol, format!("{name}: {cases} cases, max abs err {err:.2e} (tol {tol:.0e})")))
        .collect()
}

/// Offset invariance and zero response on constant images, for every filter.
pub fn laplacian_invariance(images: u64) -> Check {
    let tol = 1e-4;
    let mut worst_offset = 0.0f32;
    let mut worst_const = 0.0f32;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let filters = [
        (LapFilter::PooledLaplacian, 1),
        (LapFilter::PooledLaplacian, 2),
        (LapFilter::PooledLaplacian, 4),
        (LapFilter::Log5, 1),
    ];
    // Values and offsets on a quarter-level grid, so `x + offset` is exact in
    // f32 and any difference comes from the filters themselves.
    let quarter = |v: f32| (v * 4.0).round() / 4.0;
    for i in 0..images {
        let x = seeded(Shape::new(1, 3, 32, 32), 900 + i, 128.0).map(quarter);
        let offset: f32 = quarter(rng.random_range(-100.0..100.0));
        let shifted = x.map(|v| v + offset);
        let constant = Tensor::filled(x.shape(), rng.random_range(-128.0..128.0));
        for (filter, p) in filters {
            let a = loss::filter_response(filter, &x, p).unwrap();
            let b = loss::filter_response(filter, &shifted, p).unwrap();
            worst_offset = worst_offset.max(a.max_abs_diff(&b).unwrap());
            let z = loss::filter_response(filter, &constant, p).unwrap();
            worst_const = worst_const.max(z.data().iter().fold(0.0f32, |m, v| m.max(v.abs())));
        }
    }
    Check::new(
        worst_offset < tol && worst_const < tol,
        format!("{images} images: offset diff {worst_offset:.2e}, constant response {worst_const:.2e} (tol {tol:.0e})"),
    )
}

fn rosenbrock(x: &[f32]) -> Result<(f64, Vec<f32>), Infallible> {
    let (a, b) = (x[0] as f64, x[1] as f64);
    let f = 100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2);
    let da = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
    let db = 200.0 * (b - a * a);
    Ok((f, vec![da as f32, db as f32]))
}

pub fn lbfgs_rosenbrock() -> Check {
    let mut x = vec![-1.2f32, 1.0];
    let mut state = LbfgsState::new(LbfgsConfig::default());
    let mut f = rosenbrock(&x).unwrap().0;
    let mut iters = 0;
    while iters < 100 && f >= 1e-6 {
        f = state.step(&mut x, rosenbrock).unwrap().loss;
        iters += 1;
    }
    Check::new(f < 1e-6, format!("L-BFGS Rosenbrock: f = {f:.2e} after {iters} iterations"))
}

pub fn adam_quadratic() -> Check {
    let mut x = vec![3.0f32];
    let mut state = AdamState::new(
        1,
        AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        },
    );
    for _ in 0..500 {
        let g = 2.0 * x[0];
        state.step(&mut x, &[g]).unwrap();
    }
    Check::new(x[0].abs() < 1e-2, format!("Adam x^2: |x| = {:.2e} after 500 steps", x[0].abs()))
}

/// L-BFGS run with two Laplacian terms; checks the reported total against the
/// weighted sum of the reported terms at every iteration, and the initial
/// Laplacian values against the reference filters.
pub fn multi_laplacian_identity(iterations: usize) -> Check {
    let loss = LossConfig {
        lap_terms: vec![LapTerm::new(4, 100.0), LapTerm::new(16, 10.0)],
        ..LossConfig::default()
    };
    let graph = tiny_graph(&loss, PoolingMode::Max);
    let content = pattern(64, 0.4);
    let style = seeded(Shape::new(1, 3, 64, 64), 31, 80.0);
    let config = SynthesisConfig {
        loss: loss.clone(),
        optimizer: Optimizer::Lbfgs(LbfgsConfig::default()),
        iterations,
        init: Init::Random,
        seed: 9,
    };
    let mut worst = 0.0f64;
    let mut seen = 0;
    let result = synthesize_with(&graph, &content, &style, &config, |_, r| {
        let expected = loss.alpha * r.content
            + loss.beta * r.style
            + loss.lap_terms.iter().zip(&r.lap).map(|(t, l)| t.gamma * l).sum::<f64>();
        worst = worst.max((r.total - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
        seen += 1;
    });
    let result = match result {
        Ok(r) => r,
        Err(e) => return Check::new(false, format!("synthesis failed: {e}")),
    };
    let x0 = Arr::from_tensor(&lapstyle::synth::initial_image(&content, Init::Random, 9));
    let c = Arr::from_tensor(&content);
    let mut lap_err = 0.0f64;
    for (k, t) in loss.lap_terms.iter().enumerate() {
        let a = filter_ref(loss.lap_filter, &x0, t.pool);
        let b = filter_ref(loss.lap_filter, &c, t.pool);
        let oracle: f64 = a.data.iter().zip(&b.data).map(|(u, v)| (u - v).powi(2)).sum();
        lap_err = lap_err.max((result.initial.lap[k] - oracle).abs() / oracle);
    }
    Check::new(
        worst <= 1e-9 && lap_err < 1e-4 && seen == result.history.len() + 1,
        format!(
            "{} reports: worst total mismatch {worst:.2e} (tol 1e-9); initial lap vs reference {lap_err:.2e}",
            seen
        ),
    )
}

pub fn write_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let content = RgbImage::from_fn(40, 32, |x, y| {
        let v = ((x as f32 * 0.3).sin() * (y as f32 * 0.2).cos() * 100.0 + 128.0) as u8;
        if x > 20 { [v, 40, 200] } else { [200, v, 40] }
    })
    .unwrap();
    let style = RgbImage::from_fn(36, 36, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
    let c = dir.join("content.png");
    let s = dir.join("style.png");
    imageio::encode(&content, &c).unwrap();
    imageio::encode(&style, &s).unwrap();
    (c, s)
}

/// Runs the binary twice with identical flags and compares the loss CSVs and images byte for byte.
pub fn cli_determinism(bin: &str) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (c, s) = write_inputs(dir.path());
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("out{run}.png"));
        let csv = dir.path().join(format!("loss{run}.csv"));
        let status = Command::new(bin)
            .args(["transfer", "--tiny-net", "--size", "32", "--iters", "30", "--init", "uniform", "--seed", "3"])
            .args(["--lap", "4:100", "--lap", "2:10"])
            .arg("--content")
            .arg(&c)
            .arg("--style")
            .arg(&s)
            .arg("--out")
            .arg(&out)
            .arg("--loss-csv")
            .arg(&csv)
            .output()
            .unwrap();
        if !status.status.success() {
            return Check::new(
                false,
                format!("run {run} exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)),
            );
        }
        outputs.push((std::fs::read(&csv).unwrap(), std::fs::read(&out).unwrap()));
    }
    let rows = outputs[0].0.iter().filter(|&&b| b == b'\n').count();
    let same = outputs[0] == outputs[1];
    Check::new(
        same && rows >= 3,
        format!("two runs: CSV {} ({} lines), image {}", if outputs[0].0 == outputs[1].0 { "identical" } else { "differs" }, rows, if outputs[0].1 == outputs[1].1 { "identical" } else { "differs" }),
    )
}
