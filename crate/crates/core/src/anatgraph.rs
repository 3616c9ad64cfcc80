//! Patch graphs over token features: softmax adjacency, normalized Laplacian,
//! spatial and Chebyshev spectral graph convolutions.
//!
//! Graph structure (adjacency, Laplacian, `λ_max`, eigenbasis) is computed from
//! feature *values* and enters the tape as a constant; gradients reach the
//! node features and filter weights only through the propagation itself.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Bound, ParamId, ParamStore, Tensor, Var};
use crate::ssm::GatedEncoderParams;

/// Jacobi stops once the largest off-diagonal magnitude falls below this.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;


/// Image geometry for patch token layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("patch layout dimensions must be positive"));
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "patch size {patch} does not divide image {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `indices[i]` is the flat image offset that lands at flat token slot `i`.
    pub fn patchify_indices(&self) -> Vec<usize> {
        let (p, c, w) = (self.patch, self.channels, self.width);
        let (gh, gw) = self.grid();
        let mut idx = Vec::with_capacity(self.height * w * c);
        for by in 0..gh {
            for bx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let base = ((by * p + py) * w + bx * p + px) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        idx
    }

    pub fn unpatchify_indices(&self) -> Vec<usize> {
        let fwd = self.patchify_indices();
        let mut inv = vec![0; fwd.len()];
        for (slot, &src) in fwd.iter().enumerate() {
            inv[src] = slot;
        }
        inv
    }

    fn image_shape(&self) -> Vec<usize> {
        if self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.channels]
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let numel: usize = shape.iter().product();
        let ok = match shape {
            [h, w] => *h == self.height && *w == self.width && self.channels == 1,
            [h, w, c] => *h == self.height && *w == self.width && *c == self.channels,
            _ => false,
        };
        if !ok || numel != self.height * self.width * self.channels {
            return Err(Error::shape("patchify", shape, &self.image_shape()));
        }
        Ok(())
    }
}

fn layout_of(shape: &[usize], patch: usize) -> Result<PatchLayout> {
    match shape {
        [h, w] => PatchLayout::new(*h, *w, 1, patch),
        [h, w, c] => PatchLayout::new(*h, *w, *c, patch),
        _ => Err(Error::invalid(format!(
            "patchify expects an (H, W) or (H, W, C) image, got {shape:?}"
        ))),
    }
}

/// Splits an `(H, W)` or `(H, W, C)` image into raster-ordered `P×P` patches,
/// returning `(N, P·P·C)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let layout = layout_of(image.shape(), patch)?;
    let src = image.data();
    let data = layout.patchify_indices().iter().map(|&i| src[i]).collect();
    Tensor::new(&[layout.tokens(), layout.token_len()], data)
}

/// Inverse of [`patchify`]; single-channel layouts come back as `(H, W)`.
pub fn unpatchify(tokens: &Tensor, layout: &PatchLayout) -> Result<Tensor> {
    if tokens.shape() != [layout.tokens(), layout.token_len()] {
        return Err(Error::shape(
            "unpatchify",
            tokens.shape(),
            &[layout.tokens(), layout.token_len()],
        ));
    }
    let src = tokens.data();
    let data = layout.unpatchify_indices().iter().map(|&i| src[i]).collect();
    Tensor::new(&layout.image_shape(), data)
}

pub fn patchify_var<'t>(image: &Var<'t>, layout: &PatchLayout) -> Result<Var<'t>> {
    layout.check_image(image.shape())?;
    image.gather(
        Arc::new(layout.patchify_indices()),
        &[layout.tokens(), layout.token_len()],
    )
}

pub fn unpatchify_var<'t>(tokens: &Var<'t>, layout: &PatchLayout) -> Result<Var<'t>> {
    if tokens.shape() != [layout.tokens(), layout.token_len()] {
        return Err(Error::shape(
            "unpatchify",
            tokens.shape(),
            &[layout.tokens(), layout.token_len()],
        ));
    }
    tokens.gather(Arc::new(layout.unpatchify_indices()), &layout.image_shape())
}

/// `A_d = softmax_rows(H Hᵀ)`.
pub fn build_adjacency(h: &Tensor) -> Result<Tensor> {
    let (n, _) = h.dims2()?;
    if n < 2 {
        return Err(Error::invalid(format!("adjacency needs at least 2 nodes, got {n}")));
    }
    let gram = h.matmul(&h.transpose2()?)?;
    Ok(softmax_rows(&gram))
}

/// Symmetrized adjacency, its degrees and the normalized Laplacian
/// `I − D^{-1/2} A_sym D^{-1/2}`.
#[derive(Clone, Debug)]
pub struct Laplacian {
    pub laplacian: Tensor,
    pub sym: Tensor,
    pub degree: Vec<f64>,
}

pub fn normalized_laplacian(adj: &Tensor) -> Result<Laplacian> {
    let (n, m) = adj.dims2()?;
    if n != m {
        return Err(Error::shape("normalized_laplacian", adj.shape(), &[n, n]));
    }
    let mut sym = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, 0.5 * (adj.at(i, j) + adj.at(j, i)));
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| (0..n).map(|j| sym.at(i, j)).sum()).collect();
    if let Some(i) = degree.iter().position(|&d| d <= 0.0 || !d.is_finite()) {
        return Err(Error::invalid(format!(
            "node {i} has non-positive degree {}",
            degree[i]
        )));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut laplacian = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = -inv_sqrt[i] * sym.at(i, j) * inv_sqrt[j];
            laplacian.set(i, j, if i == j { 1.0 + v } else { v });
        }
    }
    // exact symmetry regardless of rounding order
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (laplacian.at(i, j) + laplacian.at(j, i));
            laplacian.set(i, j, v);
            laplacian.set(j, i, v);
        }
    }
    Ok(Laplacian {
        laplacian,
        sym,
        degree,
    })
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors as
/// the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

impl Eigen {
    /// `U diag(f(λ)) Uᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let n = self.values.len();
        let u = self.vectors.data();
        let g: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut scaled = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                scaled[i * n + k] = u[i * n + k] * g[k];
            }
        }
        let scaled = Tensor::new(&[n, n], scaled).expect("square");
        scaled
            .matmul(&self.vectors.transpose2().expect("matrix"))
            .expect("conforming")
    }

    pub fn reconstruct(&self) -> Tensor {
        self.apply_fn(|l| l)
    }
}

/// Cyclic Jacobi eigendecomposition.
pub fn eigendecompose(m: &Tensor) -> Result<Eigen> {
    let (n, c) = m.dims2()?;
    if n != c {
        return Err(Error::shape("eigendecompose", m.shape(), &[n, n]));
    }
    let mut a = m.data().to_vec();
    let mut v = Tensor::eye(n).into_data();
    let off_max = |a: &[f64]| {
        let mut best = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max(a[i * n + j].abs());
            }
        }
        best
    };
    let mut sweeps = 0;
    while off_max(&a) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence(format!(
                "Jacobi eigendecomposition after {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {:e})",
                off_max(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v[r * n + src]);
        }
    }
    Ok(Eigen { values, vectors })
}

/// Largest eigenvalue of a symmetric matrix: full Lanczos tridiagonalization
/// with reorthogonalization, then Sturm-sequence bisection on the tridiagonal.
pub fn largest_eigenvalue(m: &Tensor) -> Result<f64> {
    let (n, c) = m.dims2()?;
    if n != c {
        return Err(Error::shape("largest_eigenvalue", m.shape(), &[n, n]));
    }
    let a = m.data();
    let steps = n;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    let mut q: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * (1.7 * i as f64 + 0.3).sin()).collect();
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= norm);
    for _ in 0..steps {
        let mut w: Vec<f64> = (0..n)
            .map(|i| a[i * n..(i + 1) * n].iter().zip(&q).map(|(x, y)| x * y).sum())
            .collect();
        let alpha: f64 = w.iter().zip(&q).map(|(x, y)| x * y).sum();
        alphas.push(alpha);
        basis.push(q);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let beta = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if basis.len() == steps || beta < 1e-13 * alpha.abs().max(1.0) {
            break;
        }
        betas.push(beta);
        q = w.into_iter().map(|v| v / beta).collect();
    }
    Ok(tridiagonal_max_eigenvalue(&alphas, &betas))
}

/// Bisection on the Sturm count of a symmetric tridiagonal matrix.
fn tridiagonal_max_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let k = diag.len();
    let radius = |i: usize| {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < k { off[i].abs() } else { 0.0 };
        left + right
    };
    let mut lo = (0..k).map(|i| diag[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..k).map(|i| diag[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    // number of eigenvalues strictly below x
    let below = |x: f64| {
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..k {
            let b2 = if i > 0 { off[i - 1] * off[i - 1] } else { 0.0 };
            q = diag[i] - x - if i > 0 { b2 / q } else { 0.0 };
            if q == 0.0 {
                q = -f64::EPSILON * (diag[i].abs() + x.abs()).max(f64::MIN_POSITIVE);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) == k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Graph structure derived from one set of node features.
#[derive(Clone, Debug)]
pub struct PatchGraph {
    pub adjacency: Tensor,
    pub sym: Tensor,
    pub degree: Vec<f64>,
    pub laplacian: Tensor,
    pub lambda_max: f64,
}

impl PatchGraph {
    pub fn from_features(h: &Tensor) -> Result<Self> {
        let adjacency = build_adjacency(h)?;
        let Laplacian {
            laplacian,
            sym,
            degree,
        } = normalized_laplacian(&adjacency)?;
        let lambda_max = largest_eigenvalue(&laplacian)?;
        Ok(Self {
            adjacency,
            sym,
            degree,
            laplacian,
            lambda_max,
        })
    }

    pub fn nodes(&self) -> usize {
        self.degree.len()
    }

    /// Renormalized propagation `D̃^{-1/2}(A_sym + I)D̃^{-1/2}`.
    pub fn propagation(&self) -> Tensor {
        renormalized(&self.sym)
    }

    /// `L̂ = 2L/λ_max − I`.
    pub fn scaled_laplacian(&self) -> Result<Tensor> {
        scaled_laplacian(&self.laplacian, self.lambda_max)
    }

    pub fn eigen(&self) -> Result<Eigen> {
        eigendecompose(&self.laplacian)
    }
}

fn renormalized(sym: &Tensor) -> Tensor {
    let n = sym.shape()[0];
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + (0..n).map(|j| sym.at(i, j)).sum::<f64>())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let a = sym.at(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, a / (deg[i] * deg[j]).sqrt());
        }
    }
    out
}

pub fn scaled_laplacian(laplacian: &Tensor, lambda_max: f64) -> Result<Tensor> {
    if !(lambda_max >= 1e-12) {
        return Err(Error::invalid(format!(
            "degenerate graph: lambda_max = {lambda_max:e}"
        )));
    }
    let n = laplacian.shape()[0];
    let mut out = laplacian.map(|v| 2.0 * v / lambda_max);
    for i in 0..n {
        out.set(i, i, out.at(i, i) - 1.0);
    }
    Ok(out)
}

/// `sigmoid(Â H W_g)`, with `Â` built from the symmetrized adjacency and
/// degrees (self-loops added).
pub fn spatial_graph_conv<'t>(h: &Var<'t>, sym: &Tensor, w_g: &Var<'t>) -> Result<Var<'t>> {
    let (n, _) = h.value().dims2()?;
    if sym.shape() != [n, n] {
        return Err(Error::shape("spatial_graph_conv", sym.shape(), &[n, n]));
    }
    let a_hat = h.tape().constant(renormalized(sym));
    Ok(a_hat.matmul(h)?.matmul(w_g)?.sigmoid())
}

/// `Σ_k θ_k T_k(L̂) H` by the three-term recurrence applied to `H`.
pub fn chebyshev_filter<'t>(h: &Var<'t>, l_hat: &Tensor, theta: &Var<'t>) -> Result<Var<'t>> {
    let (n, d) = h.value().dims2()?;
    if l_hat.shape() != [n, n] {
        return Err(Error::shape("chebyshev_filter", l_hat.shape(), &[n, n]));
    }
    let k1 = theta.value().numel();
    if k1 == 0 || theta.shape().len() != 1 {
        return Err(Error::invalid("chebyshev_filter: theta must be a non-empty vector"));
    }
    let l = h.tape().constant(l_hat.clone());
    let mut terms: Vec<Var<'t>> = Vec::with_capacity(k1);
    terms.push(h.clone());
    if k1 > 1 {
        terms.push(l.matmul(h)?);
    }
    for k in 2..k1 {
        let next = l.matmul(&terms[k - 1])?.scale(2.0).sub(&terms[k - 2])?;
        terms.push(next);
    }
    let rows: Vec<Var<'t>> = terms
        .iter()
        .map(|t| t.reshape(&[1, n * d]))
        .collect::<Result<_>>()?;
    let stacked = Var::concat(&rows.iter().collect::<Vec<_>>(), 0)?;
    theta
        .reshape(&[1, k1])?
        .matmul(&stacked)?
        .reshape(&[n, d])
}

/// Fast path: `sigmoid((Σ_k θ_k T_k(L̂)) H W_g)` without an eigenbasis.
pub fn chebyshev_spectral_conv<'t>(
    h: &Var<'t>,
    graph: &PatchGraph,
    theta: &Var<'t>,
    w_g: &Var<'t>,
) -> Result<Var<'t>> {
    let l_hat = graph.scaled_laplacian()?;
    Ok(chebyshev_filter(h, &l_hat, theta)?.matmul(w_g)?.sigmoid())
}

/// Scalar Chebyshev series `Σ_k θ_k T_k(x)`.
pub fn chebyshev_series(theta: &[f64], x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    let mut acc = 0.0;
    for (k, &c) in theta.iter().enumerate() {
        let tk = match k {
            0 => 1.0,
            1 => x,
            _ => {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
                next
            }
        };
        acc += c * tk;
    }
    acc
}

/// `U g(Λ̂) Uᵀ` with `Λ̂ = 2Λ/λ_max − 1`.
pub fn spectral_operator(eigen: &Eigen, lambda_max: f64, theta: &[f64]) -> Result<Tensor> {
    if !(lambda_max >= 1e-12) {
        return Err(Error::invalid(format!(
            "degenerate graph: lambda_max = {lambda_max:e}"
        )));
    }
    Ok(eigen.apply_fn(|l| chebyshev_series(theta, 2.0 * l / lambda_max - 1.0)))
}

/// Slow reference path through the explicit eigenbasis.
pub fn chebyshev_spectral_conv_explicit<'t>(
    h: &Var<'t>,
    graph: &PatchGraph,
    theta: &[f64],
    w_g: &Var<'t>,
) -> Result<Var<'t>> {
    let op = spectral_operator(&graph.eigen()?, graph.lambda_max, theta)?;
    Ok(h.tape().constant(op).matmul(h)?.matmul(w_g)?.sigmoid())
}

/// Chebyshev coefficients and node-feature projection of a spectral filter.
#[derive(Clone, Copy, Debug)]
pub struct SpectralFilter {
    pub theta: ParamId,
    pub w_g: ParamId,
    pub order: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl SpectralFilter {
    /// `θ_k = 2^{-k}`, `W_g = 0`.
    pub fn new(store: &mut ParamStore, name: &str, order: usize, in_dim: usize, out_dim: usize) -> Self {
        let theta = (0..=order).map(|k| 0.5f64.powi(k as i32)).collect();
        Self {
            theta: store.add(
                format!("{name}.theta"),
                Tensor::new(&[order + 1], theta).expect("vector"),
            ),
            w_g: store.add(format!("{name}.w_g"), Tensor::zeros(&[in_dim, out_dim])),
            order,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.order + 1 + self.in_dim * self.out_dim
    }
}

/// Graph propagation applied to control features.
#[derive(Clone, Copy, Debug)]
pub enum GraphConv {
    Spatial { w_g: ParamId, dim: usize },
    Chebyshev(SpectralFilter),
}

impl GraphConv {
    pub fn spatial(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self::Spatial {
            w_g: store.add(format!("{name}.w_g"), Tensor::zeros(&[dim, dim])),
            dim,
        }
    }

    pub fn chebyshev(store: &mut ParamStore, name: &str, order: usize, dim: usize) -> Self {
        Self::Chebyshev(SpectralFilter::new(store, name, order, dim, dim))
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, h: &Var<'t>, graph: &PatchGraph) -> Result<Var<'t>> {
        match self {
            Self::Spatial { w_g, .. } => spatial_graph_conv(h, &graph.sym, &p[*w_g]),
            Self::Chebyshev(f) => chebyshev_spectral_conv(h, graph, &p[f.theta], &p[f.w_g]),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Spatial { dim, .. } => dim * dim,
            Self::Chebyshev(f) => f.param_count(),
        }
    }
}

/// Filtered node features together with the graph they were propagated on.
pub struct ControlFeatures<'t> {
    pub features: Var<'t>,
    pub graph: PatchGraph,
}

/// Encodes `tokens + temb` with the gated encoder, rebuilds the patch graph
/// from the resulting node features, and filters them on it.
pub fn control_representation<'t>(
    p: &Bound<'t>,
    tokens: &Var<'t>,
    temb: &Var<'t>,
    encoder: &GatedEncoderParams,
    conv: &GraphConv,
) -> Result<ControlFeatures<'t>> {
    let h = encoder.encode(p, &tokens.add(temb)?)?;
    let graph = PatchGraph::from_features(h.value())?;
    let features = conv.apply(p, &h, &graph)?;
    Ok(ControlFeatures { features, graph })
}
