//! Selective state-space layers.
//!
//! The state matrix is diagonal and negative (`A = -exp(a_log)`), so
//! zero-order-hold discretization is elementwise:
//! `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`. The recurrence
//! `h_i = Ā_i h_{i−1} + B̄_i x_i`, `y_i = C_i h_i + D x_i` is evaluated by a
//! fused tape operation with a hand-written reverse pass.

use std::f64::consts::LN_10;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{uniform, Bound, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

/// Below this `|ΔA|` the ZOH input factor uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// Added to `softplus(·)` so every step size is strictly positive.
pub const DELTA_FLOOR: f64 = 1e-4;

/// `(e^z − 1) / z`, continuous through `z = 0`.
fn phi(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`].
fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// [`phi`] to within a few ulps, reusing `e^z` away from zero.
fn phi_given_exp(z: f64, a_bar: f64) -> f64 {
    if z.abs() < 1e-2 {
        // truncation error below z^6/5040 < 2e-16
        1.0 + z * (1.0 / 2.0 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0))))
    } else {
        (a_bar - 1.0) / z
    }
}

/// [`phi_prime`] reusing `e^z` and `φ(z)`: `φ′ = (e^z − φ) / z`.
fn phi_prime_cached(z: f64, a_bar: f64, ph: f64) -> f64 {
    if z.abs() < 1e-3 {
        phi_prime(z)
    } else {
        (a_bar - ph) / z
    }
}

/// Zero-order-hold discretization of one diagonal entry.
pub fn zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("zoh: step size must be positive, got {delta}")));
    }
    let z = delta * a;
    Ok((z.exp(), delta * phi(z) * b))
}

/// Discretized diagonal parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedParams {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// Elementwise ZOH over diagonal entries `a`, input coefficients `b` and step
/// sizes `delta` (one per entry, or a single shared step).
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: &[f64]) -> Result<DiscretizedParams> {
    if a.len() != b.len() || !(delta.len() == 1 || delta.len() == a.len()) {
        return Err(Error::shape("zoh_discretize", &[a.len(), b.len()], &[delta.len()]));
    }
    let mut out = DiscretizedParams {
        a_bar: Vec::with_capacity(a.len()),
        b_bar: Vec::with_capacity(a.len()),
    };
    for i in 0..a.len() {
        let dt = if delta.len() == 1 { delta[0] } else { delta[i] };
        let (ab, bb) = zoh(a[i], b[i], dt)?;
        out.a_bar.push(ab);
        out.b_bar.push(bb);
    }
    Ok(out)
}

/// Raw operands of a selective scan, all row-major.
///
/// `x`, `delta`: (len, channels); `a`: (channels, state); `b`, `c`:
/// (len, state); `d`: (channels).
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub struct ScanOutput {
    /// (len, channels)
    pub y: Vec<f64>,
    /// Every hidden state, (len, channels, state).
    pub states: Vec<f64>,
}

impl ScanOutput {
    /// Hidden state after the last token, (channels, state).
    pub fn last_state(&self, channels: usize, state: usize) -> &[f64] {
        &self.states[self.states.len() - channels * state..]
    }
}

/// Linear-time recurrent scan starting from `h0` (zeros when `None`).
pub fn scan_forward(inp: &ScanInputs<'_>, h0: Option<&[f64]>) -> ScanOutput {
    scan_impl(inp, h0, None)
}

/// Per-element `Ā` and `φ(ΔA)` kept from the forward pass for the backward.
struct ScanCache {
    a_bar: Vec<f64>,
    phi: Vec<f64>,
}

fn scan_impl(inp: &ScanInputs<'_>, h0: Option<&[f64]>, mut cache: Option<&mut ScanCache>) -> ScanOutput {
    let (l, ch, n) = (inp.len, inp.channels, inp.state);
    let mut h = h0.map_or_else(|| vec![0.0; ch * n], <[f64]>::to_vec);
    let mut y = vec![0.0; l * ch];
    let mut states = vec![0.0; l * ch * n];
    for i in 0..l {
        let bi = &inp.b[i * n..(i + 1) * n];
        let ci = &inp.c[i * n..(i + 1) * n];
        for c in 0..ch {
            let xv = inp.x[i * ch + c];
            let dt = inp.delta[i * ch + c];
            let ac = &inp.a[c * n..(c + 1) * n];
            let hc = &mut h[c * n..(c + 1) * n];
            let base = (i * ch + c) * n;
            let mut acc = 0.0;
            for s in 0..n {
                let z = dt * ac[s];
                let a_bar = z.exp();
                let ph = phi_given_exp(z, a_bar);
                hc[s] = a_bar * hc[s] + dt * ph * bi[s] * xv;
                acc += ci[s] * hc[s];
                if let Some(cache) = cache.as_deref_mut() {
                    cache.a_bar[base + s] = a_bar;
                    cache.phi[base + s] = ph;
                }
            }
            states[base..base + n].copy_from_slice(hc);
            y[i * ch + c] = acc + inp.d[c] * xv;
        }
    }
    ScanOutput { y, states }
}

/// Differentiable selective scan; see [`ScanInputs`] for shapes.
pub fn selective_scan<'t>(
    x: &Var<'t>,
    delta: &Var<'t>,
    a: &Var<'t>,
    b: &Var<'t>,
    c: &Var<'t>,
    d: &Var<'t>,
) -> Result<Var<'t>> {
    let (l, ch) = x.value().dims2()?;
    let (ch_a, n) = a.value().dims2()?;
    if l == 0 {
        return Err(Error::invalid("selective_scan: empty sequence"));
    }
    if delta.shape() != x.shape() {
        return Err(Error::shape("selective_scan(delta)", x.shape(), delta.shape()));
    }
    if ch_a != ch || d.shape() != [ch] {
        return Err(Error::shape("selective_scan(a, d)", a.shape(), d.shape()));
    }
    if b.shape() != [l, n] || c.shape() != [l, n] {
        return Err(Error::shape("selective_scan(b, c)", b.shape(), c.shape()));
    }
    let vals: [Arc<Tensor>; 6] = [
        x.value_arc(),
        delta.value_arc(),
        a.value_arc(),
        b.value_arc(),
        c.value_arc(),
        d.value_arc(),
    ];
    let mut cache = ScanCache {
        a_bar: vec![0.0; l * ch * n],
        phi: vec![0.0; l * ch * n],
    };
    let out = {
        let inp = ScanInputs {
            x: vals[0].data(),
            delta: vals[1].data(),
            a: vals[2].data(),
            b: vals[3].data(),
            c: vals[4].data(),
            d: vals[5].data(),
            len: l,
            channels: ch,
            state: n,
        };
        scan_impl(&inp, None, Some(&mut cache))
    };
    let y = Tensor::new(&[l, ch], out.y)?;
    let states = out.states;
    let ids = [x.id(), delta.id(), a.id(), b.id(), c.id(), d.id()];
    Ok(x.tape().custom_op(y, &[x, delta, a, b, c, d], move |g, sink| {
        let [xv, dv, av, bv, cv, dd] = &vals;
        let (xs, ds, as_, bs, cs, dds) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), dd.data());
        let gy = g.data();
        let mut gx = vec![0.0; l * ch];
        let mut gdelta = vec![0.0; l * ch];
        let mut ga = vec![0.0; ch * n];
        let mut gb = vec![0.0; l * n];
        let mut gc = vec![0.0; l * n];
        let mut gd = vec![0.0; ch];
        // Gradient flowing into h_i from step i+1, per (channel, state).
        let mut carry = vec![0.0; ch * n];
        let zeros = vec![0.0; n];
        for i in (0..l).rev() {
            for c in 0..ch {
                let gyv = gy[i * ch + c];
                let xi = xs[i * ch + c];
                let dt = ds[i * ch + c];
                gd[c] += gyv * xi;
                let mut gxi = gyv * dds[c];
                let mut gdt = 0.0;
                let e0 = (i * ch + c) * n;
                let a_c = &as_[c * n..(c + 1) * n];
                let a_bars = &cache.a_bar[e0..e0 + n];
                let phis = &cache.phi[e0..e0 + n];
                let h_cur = &states[e0..e0 + n];
                let h_prev = if i > 0 { &states[e0 - ch * n..e0 - ch * n + n] } else { &zeros[..] };
                let b_i = &bs[i * n..(i + 1) * n];
                let c_i = &cs[i * n..(i + 1) * n];
                let gc_i = &mut gc[i * n..(i + 1) * n];
                let gb_i = &mut gb[i * n..(i + 1) * n];
                let ga_c = &mut ga[c * n..(c + 1) * n];
                let carry_c = &mut carry[c * n..(c + 1) * n];
                for s in 0..n {
                    let (a_cs, a_bar, ph, bis) = (a_c[s], a_bars[s], phis[s], b_i[s]);
                    let z = dt * a_cs;
                    let b_bar = dt * ph * bis;
                    gc_i[s] += gyv * h_cur[s];
                    let gh = c_i[s] * gyv + carry_c[s];
                    // h_i = a_bar h_prev + b_bar x_i
                    let g_abar = gh * h_prev[s];
                    let g_bbar = gh * xi;
                    gxi += gh * b_bar;
                    // d a_bar / d dt = a a_bar ; d b_bar / d dt = b a_bar
                    gdt += (g_abar * a_cs + g_bbar * bis) * a_bar;
                    // d a_bar / d a = dt a_bar ; d b_bar / d a = dt^2 b phi'(z)
                    ga_c[s] += g_abar * dt * a_bar + g_bbar * dt * dt * bis * phi_prime_cached(z, a_bar, ph);
                    gb_i[s] += g_bbar * dt * ph;
                    carry_c[s] = gh * a_bar;
                }
                gx[i * ch + c] = gxi;
                gdelta[i * ch + c] = gdt;
            }
        }
        let shapes: [&[usize]; 6] = [&[l, ch], &[l, ch], &[ch, n], &[l, n], &[l, n], &[ch]];
        for ((id, grad), shape) in ids.into_iter().zip([gx, gdelta, ga, gb, gc, gd]).zip(shapes) {
            if sink.wants(id) {
                sink.accumulate(id, Tensor::new(shape, grad).expect("scan gradient shape"));
            }
        }
    }))
}

/// Input-dependent SSM parameters for one scan direction.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// (channels, state); the state matrix is `-exp(a_log)`.
    pub a_log: ParamId,
    /// (channels) skip coefficients.
    pub d: ParamId,
    pub delta_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub channels: usize,
    pub state_dim: usize,
}

impl SsmParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, state_dim: usize) -> Self {
        // S4D-real initialization: A = -(1, 2, ..., N) for every channel.
        let a_log: Vec<f64> = (0..channels)
            .flat_map(|_| (1..=state_dim).map(|s| (s as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::new(&[channels, state_dim], a_log).expect("a_log shape"),
        );
        let d = store.add(format!("{name}.d"), Tensor::ones(&[channels]));
        let delta_proj = Linear::new(store, rng, &format!("{name}.delta_proj"), channels, channels, true);
        // Step sizes start log-uniform in [1e-3, 1e-1].
        let bias = store.get_mut(delta_proj.bias.expect("delta projection has a bias"));
        for v in bias.data_mut() {
            let dt = (rng.random_range(-3.0..-1.0) * LN_10).exp();
            *v = dt + (-(-dt).exp_m1()).ln();
        }
        let b_proj = Linear::new(store, rng, &format!("{name}.b_proj"), channels, state_dim, false);
        let c_proj = Linear::new(store, rng, &format!("{name}.c_proj"), channels, state_dim, false);
        Self {
            a_log,
            d,
            delta_proj,
            b_proj,
            c_proj,
            channels,
            state_dim,
        }
    }

    /// Step sizes `softplus(x W_Δ + b_Δ) + floor` for every token.
    pub fn step_sizes<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.delta_proj.forward(p, x)?.softplus().add_scalar(DELTA_FLOOR))
    }

    /// State matrix entries `-exp(a_log)`, strictly negative.
    pub fn state_matrix<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p[self.a_log].exp().neg()
    }

    pub fn scan<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let delta = self.step_sizes(p, x)?;
        let a = self.state_matrix(p);
        let b = self.b_proj.forward(p, x)?;
        let c = self.c_proj.forward(p, x)?;
        selective_scan(x, &delta, &a, &b, &c, &p[self.d])
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.state_dim
            + self.channels
            + self.delta_proj.param_count()
            + self.b_proj.param_count()
            + self.c_proj.param_count()
    }
}

/// Differentiable gated recurrence
/// `h_t = gate_t ⊙ (A h_{t−1} + u_t) + r_t`, with `h_0 = 0`.
///
/// `gate`, `u`, `r`: (len, dim); `a`: (dim, dim).
pub fn gated_recurrence<'t>(gate: &Var<'t>, u: &Var<'t>, r: &Var<'t>, a: &Var<'t>) -> Result<Var<'t>> {
    let (l, dim) = gate.value().dims2()?;
    if u.shape() != gate.shape() || r.shape() != gate.shape() {
        return Err(Error::shape("gated_recurrence", gate.shape(), u.shape()));
    }
    if a.shape() != [dim, dim] {
        return Err(Error::shape("gated_recurrence(a)", a.shape(), &[dim, dim]));
    }
    if l == 0 {
        return Err(Error::invalid("gated_recurrence: empty sequence"));
    }
    let (gv, uv, rv, av) = (gate.value_arc(), u.value_arc(), r.value_arc(), a.value_arc());
    let mut h = vec![0.0; l * dim];
    // Pre-gate values s_t = A h_{t-1} + u_t, kept for the reverse pass.
    let mut pre = vec![0.0; l * dim];
    for t in 0..l {
        for i in 0..dim {
            let mut s = uv.data()[t * dim + i];
            if t > 0 {
                let arow = &av.data()[i * dim..(i + 1) * dim];
                let hprev = &h[(t - 1) * dim..t * dim];
                s += arow.iter().zip(hprev).map(|(x, y)| x * y).sum::<f64>();
            }
            pre[t * dim + i] = s;
        }
        for i in 0..dim {
            let k = t * dim + i;
            h[k] = gv.data()[k] * pre[k] + rv.data()[k];
        }
    }
    let out = Tensor::new(&[l, dim], h.clone())?;
    let ids = [gate.id(), u.id(), r.id(), a.id()];
    Ok(gate.tape().custom_op(out, &[gate, u, r, a], move |g, sink| {
        let gd = g.data();
        let (gate_d, a_d) = (gv.data(), av.data());
        let mut g_gate = vec![0.0; l * dim];
        let mut g_u = vec![0.0; l * dim];
        let mut g_r = vec![0.0; l * dim];
        let mut g_a = vec![0.0; dim * dim];
        let mut carry = vec![0.0; dim];
        for t in (0..l).rev() {
            for i in 0..dim {
                let k = t * dim + i;
                let gh = gd[k] + carry[i];
                g_r[k] = gh;
                g_gate[k] = gh * pre[k];
                g_u[k] = gh * gate_d[k];
            }
            // carry_j = sum_i A_ij gs_i ; gA_ij += gs_i h_{t-1, j}
            carry.iter_mut().for_each(|c| *c = 0.0);
            if t > 0 {
                let hprev = &h[(t - 1) * dim..t * dim];
                for i in 0..dim {
                    let gs = g_u[t * dim + i];
                    if gs == 0.0 {
                        continue;
                    }
                    let arow = &a_d[i * dim..(i + 1) * dim];
                    let garow = &mut g_a[i * dim..(i + 1) * dim];
                    for j in 0..dim {
                        carry[j] += arow[j] * gs;
                        garow[j] += gs * hprev[j];
                    }
                }
            }
        }
        let shapes: [&[usize]; 4] = [&[l, dim], &[l, dim], &[l, dim], &[dim, dim]];
        for ((id, grad), shape) in ids.into_iter().zip([g_gate, g_u, g_r, g_a]).zip(shapes) {
            if sink.wants(id) {
                sink.accumulate(id, Tensor::new(shape, grad).expect("recurrence gradient shape"));
            }
        }
    }))
}

/// Gated Mamba encoder producing graph node features:
/// `h_t = σ(W₁x_t) · (A h_{t−1} + B x_t) + W₂ x_t`.
#[derive(Clone, Debug)]
pub struct GatedEncoderParams {
    pub w1: Linear,
    pub w2: Linear,
    pub a: ParamId,
    pub b: Linear,
    pub dim: usize,
}

impl GatedEncoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, dim: usize) -> Self {
        let w1 = Linear::new(store, rng, &format!("{name}.w1"), in_dim, dim, true);
        let w2 = Linear::new(store, rng, &format!("{name}.w2"), in_dim, dim, false);
        // Contractive start: A = 0.5 I plus a small perturbation.
        let mut a = uniform(rng, &[dim, dim], 0.1 / (dim as f64).sqrt());
        for i in 0..dim {
            a.data_mut()[i * dim + i] += 0.5;
        }
        let a = store.add(format!("{name}.a"), a);
        let b = Linear::new(store, rng, &format!("{name}.b"), in_dim, dim, false);
        Self { w1, w2, a, b, dim }
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        gated_encode(p, x, self)
    }

    pub fn param_count(&self) -> usize {
        self.w1.param_count() + self.w2.param_count() + self.dim * self.dim + self.b.param_count()
    }
}

/// Runs the gated encoder over a token sequence `(L, in_dim)`.
pub fn gated_encode<'t>(p: &Bound<'t>, x: &Var<'t>, params: &GatedEncoderParams) -> Result<Var<'t>> {
    let gate = params.w1.forward(p, x)?.sigmoid();
    let u = params.b.forward(p, x)?;
    let r = params.w2.forward(p, x)?;
    gated_recurrence(&gate, &u, &r, &p[params.a])
}

/// Sinusoidal embedding of a (diffusion) step.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    Tensor::new(&[dim], out).expect("embedding shape")
}

/// Pre-norm bidirectional Mamba block with a residual connection.
///
/// `x + W_out[(scan_fwd(u) + rev(scan_bwd(rev(u)))) ⊙ silu(z)]`, where
/// `[u, z] = W_in LN(x + temb)` and `u` passes through SiLU first.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub forward_ssm: SsmParams,
    pub backward_ssm: SsmParams,
    pub out_proj: Linear,
    pub dim: usize,
    pub inner: usize,
}

impl MambaBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        inner: usize,
        state_dim: usize,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            in_proj: Linear::new(store, rng, &format!("{name}.in_proj"), dim, 2 * inner, true),
            forward_ssm: SsmParams::new(store, rng, &format!("{name}.ssm_fwd"), inner, state_dim),
            backward_ssm: SsmParams::new(store, rng, &format!("{name}.ssm_bwd"), inner, state_dim),
            out_proj: Linear::new(store, rng, &format!("{name}.out_proj"), inner, dim, true),
            dim,
            inner,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, tokens: &Var<'t>, temb: &Var<'t>) -> Result<Var<'t>> {
        let (_, d) = tokens.value().dims2()?;
        if d != self.dim || temb.shape() != [d] {
            return Err(Error::shape("mamba_block", tokens.shape(), temb.shape()));
        }
        let x = tokens.add(temb)?;
        let xz = self.in_proj.forward(p, &self.norm.forward(p, &x)?)?;
        let u = xz.slice(1, 0, self.inner)?.silu();
        let z = xz.slice(1, self.inner, self.inner)?;
        let fwd = self.forward_ssm.scan(p, &u)?;
        let bwd = self.backward_ssm.scan(p, &u.reverse_rows()?)?.reverse_rows()?;
        let y = fwd.add(&bwd)?.mul(&z.silu())?;
        tokens.add(&self.out_proj.forward(p, &y)?)
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count()
            + self.in_proj.param_count()
            + self.forward_ssm.param_count()
            + self.backward_ssm.param_count()
            + self.out_proj.param_count()
    }
}
