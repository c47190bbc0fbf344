//! Selective state-space scan engine.
//!
//! The state matrix is diagonal, so zero-order-hold discretization reduces to
//! elementwise scalars per (inner channel, state) pair:
//! `Ā = exp(Δa)` and `B̄ = (exp(Δa) − 1)/a · b`.

use num_traits::Float;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{exp_fast, silu, softplus, Linear, Matrix};

/// Below this `|Δa|` the ZOH factor switches to its second-order Taylor form.
pub const ZOH_TAYLOR_THRESHOLD: f64 = 1e-4;

/// How continuous `(a, b)` become discrete `(Ā, B̄)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// Exact zero-order hold.
    #[default]
    Zoh,
    /// `B̄ ≈ Δb`. Only used to exercise the checks against a known-wrong variant.
    Euler,
}

/// `(exp(Δa) − 1)/a`, the factor multiplying `b` in `B̄`.
#[inline]
pub fn zoh_input_factor<T: Float>(delta: T, a: T) -> T {
    let da = delta * a;
    if da.abs() < T::from(ZOH_TAYLOR_THRESHOLD).unwrap() {
        let two = T::one() + T::one();
        delta * (T::one() + da / two)
    } else {
        da.exp_m1() / a
    }
}

#[inline]
fn input_factor<T: Float>(mode: Discretization, delta: T, a: T) -> T {
    match mode {
        Discretization::Zoh => zoh_input_factor(delta, a),
        Discretization::Euler => delta,
    }
}

/// Scalars the scan kernels run on.
pub trait ScanFloat: Float + Send + Sync {
    /// `(exp(Δa), (exp(Δa) − 1)/a)` for one state, given `recip_a = 1/a`.
    fn zoh_pair(delta: Self, a: Self, recip_a: Self) -> (Self, Self);
}

impl ScanFloat for f64 {
    #[inline(always)]
    fn zoh_pair(delta: f64, a: f64, _recip_a: f64) -> (f64, f64) {
        ((delta * a).exp(), zoh_input_factor(delta, a))
    }
}

impl ScanFloat for f32 {
    /// Branch-free so loops over it vectorize; near zero the factor comes from
    /// the series of `expm1(x)/x`, elsewhere from the polynomial `exp`.
    #[inline(always)]
    fn zoh_pair(delta: f32, a: f32, recip_a: f32) -> (f32, f32) {
        let x = delta * a;
        let ex = exp_fast(x);
        let series = delta * expm1_over_x(x);
        let factor = if x.abs() < 0.35 {
            series
        } else {
            (ex - 1.0) * recip_a
        };
        (ex, factor)
    }
}

/// Taylor series of `(e^x − 1)/x`, for `|x| < 0.35`.
#[inline(always)]
fn expm1_over_x(x: f32) -> f32 {
    1.0 + x
        * (1.0 / 2.0
            + x * (1.0 / 6.0
                + x * (1.0 / 24.0
                    + x * (1.0 / 120.0
                        + x * (1.0 / 720.0 + x * (1.0 / 5040.0 + x * (1.0 / 40320.0)))))))
}

#[inline(always)]
fn euler_pair<T: Float>(delta: T, a: T, _recip_a: T) -> (T, T) {
    ((delta * a).exp(), delta)
}

/// `A` and `1/A` transposed to state-major order, `[n · D_in + d]`, so the
/// kernels run long contiguous loops over inner channels.
struct StateMajor<T> {
    a: Vec<T>,
    recip: Vec<T>,
}

impl<T: ScanFloat> StateMajor<T> {
    fn new(a: &[T], d_inner: usize, d_state: usize) -> Self {
        let mut out = Self {
            a: vec![T::zero(); a.len()],
            recip: vec![T::zero(); a.len()],
        };
        for d in 0..d_inner {
            for n in 0..d_state {
                let v = a[d * d_state + n];
                out.a[n * d_inner + d] = v;
                out.recip[n * d_inner + d] = v.recip();
            }
        }
        out
    }
}

/// Discretizes one time step. `a` is `d_inner × d_state`, `b_t` has `d_state`
/// entries, `delta_t` has `d_inner`. Returns `(Ā, B̄)`, both `d_inner × d_state`.
pub fn zoh_discretize<T: Float>(a: &[T], b_t: &[T], delta_t: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    discretize(Discretization::Zoh, a, b_t, delta_t)
}

pub fn discretize<T: Float>(
    mode: Discretization,
    a: &[T],
    b_t: &[T],
    delta_t: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let (d_inner, d_state) = (delta_t.len(), b_t.len());
    if a.len() != d_inner * d_state {
        return Err(Error::ShapeMismatch(format!(
            "A has {} entries, expected {d_inner}x{d_state}",
            a.len()
        )));
    }
    if delta_t.iter().any(|&d| !(d > T::zero())) {
        return Err(Error::InvalidTensor("Δ must be strictly positive".into()));
    }
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for d in 0..d_inner {
        let dt = delta_t[d];
        for n in 0..d_state {
            let av = a[d * d_state + n];
            abar.push((dt * av).exp());
            bbar.push(input_factor(mode, dt, av) * b_t[n]);
        }
    }
    Ok((abar, bbar))
}

/// Per-sequence scan inputs, all row-major over time.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanInputs<T> {
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
    /// `len × d_inner`
    pub x: Vec<T>,
    /// `len × d_inner`, strictly positive
    pub delta: Vec<T>,
    /// `len × d_state`
    pub b: Vec<T>,
    /// `len × d_state`
    pub c: Vec<T>,
}

impl<T: Float> ScanInputs<T> {
    pub fn validate(&self, a: &[T], skip: &[T]) -> Result<()> {
        let (l, di, ds) = (self.len, self.d_inner, self.d_state);
        let ok = self.x.len() == l * di
            && self.delta.len() == l * di
            && self.b.len() == l * ds
            && self.c.len() == l * ds
            && a.len() == di * ds
            && skip.len() == di;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "scan inputs inconsistent with L={l}, D_in={di}, N_s={ds}"
            )));
        }
        if self.delta.iter().any(|&d| !(d > T::zero())) {
            return Err(Error::InvalidTensor("Δ must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Reference recurrence `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t + skip·x_t`, `h_0 = 0`.
pub fn selective_scan_seq<T: ScanFloat>(s: &ScanInputs<T>, a: &[T], skip: &[T]) -> Result<Vec<T>> {
    selective_scan_seq_with(Discretization::Zoh, s, a, skip)
}

pub fn selective_scan_seq_with<T: ScanFloat>(
    mode: Discretization,
    s: &ScanInputs<T>,
    a: &[T],
    skip: &[T],
) -> Result<Vec<T>> {
    s.validate(a, skip)?;
    let sm = StateMajor::new(a, s.d_inner, s.d_state);
    let mut h = vec![T::zero(); s.d_inner * s.d_state];
    let mut y = vec![T::zero(); s.len * s.d_inner];
    scan_range(mode, s, &sm, skip, 0..s.len, &mut h, &mut y);
    Ok(y)
}

/// Runs the recurrence over `range`, starting from the state-major state `h`,
/// writing `y` rows relative to `range.start`.
fn scan_range<T: ScanFloat>(
    mode: Discretization,
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    skip: &[T],
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was just detected
        return unsafe { scan_range_avx2(mode, s, sm, skip, range, h, y) };
    }
    scan_range_body(mode, s, sm, skip, range, h, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_range_avx2<T: ScanFloat>(
    mode: Discretization,
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    skip: &[T],
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    scan_range_body(mode, s, sm, skip, range, h, y)
}

#[inline(always)]
fn scan_range_body<T: ScanFloat>(
    mode: Discretization,
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    skip: &[T],
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    match mode {
        Discretization::Zoh => scan_steps(T::zoh_pair, s, sm, skip, range, h, y),
        Discretization::Euler => scan_steps(euler_pair, s, sm, skip, range, h, y),
    }
}

#[inline(always)]
fn scan_steps<T: ScanFloat>(
    pair: impl Fn(T, T, T) -> (T, T),
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    skip: &[T],
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    let (di, ds) = (s.d_inner, s.d_state);
    let start = range.start;
    for t in range {
        let dt = &s.delta[t * di..(t + 1) * di];
        let x = &s.x[t * di..(t + 1) * di];
        let yt = &mut y[(t - start) * di..(t - start + 1) * di];
        yt.fill(T::zero());
        for n in 0..ds {
            let lanes = n * di..(n + 1) * di;
            let (an, rn) = (&sm.a[lanes.clone()], &sm.recip[lanes.clone()]);
            let hn = &mut h[lanes];
            let (bn, cn) = (s.b[t * ds + n], s.c[t * ds + n]);
            for d in 0..di {
                let (abar, factor) = pair(dt[d], an[d], rn[d]);
                hn[d] = abar * hn[d] + factor * bn * x[d];
                yt[d] = yt[d] + cn * hn[d];
            }
        }
        for d in 0..di {
            yt[d] = yt[d] + skip[d] * x[d];
        }
    }
}

/// Composition of the step maps `h ↦ Ā h + B̄ x` over `range`, as state-major
/// (decay product, accumulated input).
fn chunk_summary<T: ScanFloat>(
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    range: std::ops::Range<usize>,
) -> (Vec<T>, Vec<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was just detected
        return unsafe { chunk_summary_avx2(s, sm, range) };
    }
    chunk_summary_body(s, sm, range)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn chunk_summary_avx2<T: ScanFloat>(
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    range: std::ops::Range<usize>,
) -> (Vec<T>, Vec<T>) {
    chunk_summary_body(s, sm, range)
}

#[inline(always)]
fn chunk_summary_body<T: ScanFloat>(
    s: &ScanInputs<T>,
    sm: &StateMajor<T>,
    range: std::ops::Range<usize>,
) -> (Vec<T>, Vec<T>) {
    let (di, ds) = (s.d_inner, s.d_state);
    let mut prod = vec![T::one(); di * ds];
    let mut acc = vec![T::zero(); di * ds];
    for t in range {
        let dt = &s.delta[t * di..(t + 1) * di];
        let x = &s.x[t * di..(t + 1) * di];
        for n in 0..ds {
            let lanes = n * di..(n + 1) * di;
            let (an, rn) = (&sm.a[lanes.clone()], &sm.recip[lanes.clone()]);
            let (pn, qn) = (&mut prod[lanes.clone()], &mut acc[lanes]);
            let bn = s.b[t * ds + n];
            for d in 0..di {
                let (abar, factor) = T::zoh_pair(dt[d], an[d], rn[d]);
                pn[d] = abar * pn[d];
                qn[d] = abar * qn[d] + factor * bn * x[d];
            }
        }
    }
    (prod, acc)
}

/// Chunked two-pass scan. Each chunk first composes its affine maps
/// `h ↦ a·h + b` independently, a sequential prefix over chunk summaries
/// yields every chunk's starting state, then chunks replay in parallel.
pub fn selective_scan_parallel<T: ScanFloat>(
    s: &ScanInputs<T>,
    a: &[T],
    skip: &[T],
    chunk: usize,
) -> Result<Vec<T>> {
    if chunk == 0 {
        return Err(Error::config("chunk", "must be at least 1"));
    }
    s.validate(a, skip)?;
    let (di, ds) = (s.d_inner, s.d_state);
    let width = di * ds;
    if s.len == 0 || di == 0 {
        return Ok(vec![T::zero(); s.len * di]);
    }
    let starts: Vec<usize> = (0..s.len).step_by(chunk).collect();
    let sm = StateMajor::new(a, di, ds);

    // pass 1: per-chunk composed (decay product, accumulated input)
    let summaries: Vec<(Vec<T>, Vec<T>)> = starts
        .par_iter()
        .map(|&t0| chunk_summary(s, &sm, t0..(t0 + chunk).min(s.len)))
        .collect();

    // pass 2: exclusive prefix of chunk starting states
    let mut states = Vec::with_capacity(starts.len());
    let mut h = vec![T::zero(); width];
    for (prod, acc) in &summaries {
        states.push(h.clone());
        for i in 0..width {
            h[i] = prod[i] * h[i] + acc[i];
        }
    }

    // pass 3: replay each chunk from its true starting state
    let mut y = vec![T::zero(); s.len * di];
    y.par_chunks_mut(chunk * di)
        .zip(starts.par_iter().zip(states.into_par_iter()))
        .for_each(|(y_chunk, (&t0, mut h0))| {
            let t1 = (t0 + chunk).min(s.len);
            scan_range(Discretization::Zoh, s, &sm, skip, t0..t1, &mut h0, y_chunk);
        });
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Fwd,
    Bwd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
}

impl MambaConfig {
    /// `N_s = 16`, `E = 2`, `k = 4`, Δ-rank `ceil(D/16)`.
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            dt_rank: d_model.div_ceil(16),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// Every learnable tensor of one unidirectional selective-SSM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaLayerParams {
    pub cfg: MambaConfig,
    /// `D → 2·D_in`, split into (u, gate).
    pub in_proj: Linear,
    /// Depthwise causal kernel, `D_in × k`; column `k − 1` weights the current step.
    pub conv_weight: Matrix,
    pub conv_bias: Vec<f32>,
    /// `D_in → dt_rank + 2·N_s`, split into (Δ low-rank, B, C).
    pub x_proj: Linear,
    /// `dt_rank → D_in`; its bias is the Δ bias.
    pub dt_proj: Linear,
    /// `D_in × N_s`; `A = −exp(a_log)`.
    pub a_log: Matrix,
    pub skip: Vec<f32>,
    /// `D_in → D`.
    pub out_proj: Linear,
}

impl MambaLayerParams {
    pub fn init<R: Rng>(cfg: MambaConfig, rng: &mut R) -> Self {
        let (d, di, ds, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.conv_width);
        let in_proj = Linear::init(d, 2 * di, rng);
        let conv_bound = 1.0 / (k as f32).sqrt();
        let conv_weight = Matrix::uniform(di, k, conv_bound, rng);
        let conv_bias = (0..di)
            .map(|_| rng.gen_range(-conv_bound..conv_bound))
            .collect();
        let x_proj = Linear::init(di, cfg.dt_rank + 2 * ds, rng);
        let mut dt_proj = Linear::init(cfg.dt_rank, di, rng);
        // softplus(bias) log-uniform in [1e-3, 1e-1]
        let (lo, hi) = (1e-3f32.ln(), 1e-1f32.ln());
        dt_proj.bias = (0..di)
            .map(|_| {
                let dt = rng.gen_range(lo..hi).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let a_log = Matrix::from_fn(di, ds, |_, n| ((n + 1) as f32).ln());
        Self {
            cfg,
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log,
            skip: vec![1.0; di],
            out_proj: Linear::init(di, d, rng),
        }
    }

    /// `A = −exp(a_log)`, row-major `D_in × N_s`.
    pub fn a(&self) -> Vec<f32> {
        self.a_log.as_slice().iter().map(|v| -v.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        let (d, di, ds) = (c.d_model, c.d_inner(), c.d_state);
        let checks = [
            (
                "in_proj",
                self.in_proj.weight.shape() == (d, 2 * di) && self.in_proj.bias.len() == 2 * di,
            ),
            (
                "conv_weight",
                self.conv_weight.shape() == (di, c.conv_width) && self.conv_bias.len() == di,
            ),
            (
                "x_proj",
                self.x_proj.weight.shape() == (di, c.dt_rank + 2 * ds),
            ),
            (
                "dt_proj",
                self.dt_proj.weight.shape() == (c.dt_rank, di) && self.dt_proj.bias.len() == di,
            ),
            ("a_log", self.a_log.shape() == (di, ds)),
            ("skip", self.skip.len() == di),
            (
                "out_proj",
                self.out_proj.weight.shape() == (di, d) && self.out_proj.bias.len() == d,
            ),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::ShapeMismatch(format!(
                "{name} inconsistent with layer config"
            ))),
            None => Ok(()),
        }
    }
}

/// One Mamba layer over an `L × D` sequence. `Bwd` reverses time before and after.
pub fn mamba_layer_forward(
    seq: &Matrix,
    p: &MambaLayerParams,
    direction: Direction,
) -> Result<Matrix> {
    if seq.cols() != p.cfg.d_model {
        return Err(Error::ShapeMismatch(format!(
            "sequence width {} but layer expects {}",
            seq.cols(),
            p.cfg.d_model
        )));
    }
    match direction {
        Direction::Fwd => Ok(mamba_core(seq, p)),
        Direction::Bwd => Ok(mamba_core(&seq.reversed_rows(), p).reversed_rows()),
    }
}

fn mamba_core(seq: &Matrix, p: &MambaLayerParams) -> Matrix {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was just detected
        return unsafe { mamba_core_avx2(seq, p) };
    }
    mamba_core_body(seq, p)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn mamba_core_avx2(seq: &Matrix, p: &MambaLayerParams) -> Matrix {
    mamba_core_body(seq, p)
}

#[inline(always)]
fn mamba_core_body(seq: &Matrix, p: &MambaLayerParams) -> Matrix {
    let cfg = &p.cfg;
    let (l, di, ds, k, r) = (
        seq.rows(),
        cfg.d_inner(),
        cfg.d_state,
        cfg.conv_width,
        cfg.dt_rank,
    );
    if l == 0 {
        return Matrix::zeros(0, cfg.d_model);
    }
    let xz = p.in_proj.forward(seq);

    // causal depthwise conv + SiLU over the u half
    let taps: Vec<Vec<f32>> = (0..k)
        .map(|j| (0..di).map(|d| p.conv_weight.get(d, j)).collect())
        .collect();
    let mut u = Matrix::zeros(l, di);
    for t in 0..l {
        let out = u.row_mut(t);
        out.copy_from_slice(&p.conv_bias);
        for (j, tap) in taps.iter().enumerate() {
            let Some(src) = (t + j + 1).checked_sub(k) else {
                continue;
            };
            let xin = &xz.row(src)[..di];
            for ((o, &w), &xv) in out.iter_mut().zip(tap).zip(xin) {
                *o += w * xv;
            }
        }
        for v in out.iter_mut() {
            *v = silu(*v);
        }
    }

    let proj = p.x_proj.forward(&u);
    let dt_low = proj.column_slice(0, r);
    let b = proj.column_slice(r, ds);
    let c = proj.column_slice(r + ds, ds);
    let mut delta = p.dt_proj.forward(&dt_low);
    for v in delta.as_mut_slice() {
        *v = softplus(*v);
    }

    let inputs = ScanInputs {
        len: l,
        d_inner: di,
        d_state: ds,
        x: u.into_vec(),
        delta: delta.into_vec(),
        b: b.into_vec(),
        c: c.into_vec(),
    };
    let y = selective_scan_seq(&inputs, &p.a(), &p.skip).expect("shapes fixed by layer config");
    let mut y = Matrix::from_vec(l, di, y);
    for t in 0..l {
        let gate = &xz.row(t)[di..];
        for (v, &g) in y.row_mut(t).iter_mut().zip(gate) {
            *v *= silu(g);
        }
    }
    p.out_proj.forward(&y)
}

/// Sum of a forward layer and an independently parameterized backward layer.
pub fn bidirectional_mamba(
    seq: &Matrix,
    p_fwd: &MambaLayerParams,
    p_bwd: &MambaLayerParams,
) -> Result<Matrix> {
    if p_fwd.cfg.d_model != p_bwd.cfg.d_model {
        return Err(Error::ShapeMismatch(
            "forward and backward widths differ".into(),
        ));
    }
    let mut out = mamba_layer_forward(seq, p_fwd, Direction::Fwd)?;
    out.add_assign(&mamba_layer_forward(seq, p_bwd, Direction::Bwd)?);
    Ok(out)
}

/// A width-preserving map over an `L × D` sequence.
pub trait SequenceLayer: Send + Sync {
    fn forward(&self, seq: &Matrix) -> Matrix;
}

/// Passes sequences through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl SequenceLayer for Identity {
    fn forward(&self, seq: &Matrix) -> Matrix {
        seq.clone()
    }
}

/// A Mamba layer, either forward-only or bidirectional.
#[derive(Clone, Debug, PartialEq)]
pub enum MambaLayer {
    Unidirectional(MambaLayerParams),
    Bidirectional {
        fwd: MambaLayerParams,
        bwd: MambaLayerParams,
    },
}

impl MambaLayer {
    pub fn init<R: Rng>(cfg: MambaConfig, bidirectional: bool, rng: &mut R) -> Self {
        let fwd = MambaLayerParams::init(cfg, rng);
        if bidirectional {
            let bwd = MambaLayerParams::init(cfg, rng);
            MambaLayer::Bidirectional { fwd, bwd }
        } else {
            MambaLayer::Unidirectional(fwd)
        }
    }

    pub fn params(&self) -> Vec<&MambaLayerParams> {
        match self {
            MambaLayer::Unidirectional(p) => vec![p],
            MambaLayer::Bidirectional { fwd, bwd } => vec![fwd, bwd],
        }
    }
}

impl SequenceLayer for MambaLayer {
    fn forward(&self, seq: &Matrix) -> Matrix {
        match self {
            MambaLayer::Unidirectional(p) => mamba_layer_forward(seq, p, Direction::Fwd),
            MambaLayer::Bidirectional { fwd, bwd } => bidirectional_mamba(seq, fwd, bwd),
        }
        .expect("layer width checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zoh_analytic_case() {
        let ln2 = std::f64::consts::LN_2;
        let (abar, bbar) = zoh_discretize(&[-1.0], &[3.0], &[ln2]).unwrap();
        assert!(close(abar[0], 0.5, 1e-12));
        assert!(close(bbar[0], 1.5, 1e-12));
    }

    #[test]
    fn zoh_small_delta_limit() {
        let (_, bbar) = zoh_discretize(&[-2.0], &[5.0], &[1e-7]).unwrap();
        assert!(close(bbar[0], 5e-7, 1e-12));
    }

    #[test]
    fn zoh_taylor_branch_is_continuous() {
        // either side of the switch point agree to well below 1e-12 relative
        let a = -1.0f64;
        let below = zoh_input_factor(0.99999e-4, a);
        let above = zoh_input_factor(1.00001e-4, a);
        assert!(((above - below) / 2e-9 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn nonpositive_delta_rejected() {
        assert!(zoh_discretize(&[-1.0f64], &[1.0], &[0.0]).is_err());
        assert!(zoh_discretize(&[-1.0f64], &[1.0], &[-0.5]).is_err());
    }

    #[test]
    fn single_step_scan() {
        let s = ScanInputs {
            len: 1,
            d_inner: 1,
            d_state: 1,
            x: vec![2.0f64],
            delta: vec![std::f64::consts::LN_2],
            b: vec![1.0],
            c: vec![3.0],
        };
        let y = selective_scan_seq(&s, &[-1.0], &[0.25]).unwrap();
        // B̄ = 0.5, h = 1, y = 3 + 0.5
        assert!(close(y[0], 3.5, 1e-12));
    }

    #[test]
    fn geometric_series() {
        // Ā = 0.5, B̄x = 1: a = −1, Δ = ln 2, b = 2, x = 1
        let l = 20;
        let s = ScanInputs {
            len: l,
            d_inner: 1,
            d_state: 1,
            x: vec![1.0f64; l],
            delta: vec![std::f64::consts::LN_2; l],
            b: vec![2.0; l],
            c: vec![1.0; l],
        };
        let y = selective_scan_seq(&s, &[-1.0], &[0.0]).unwrap();
        for (t, v) in y.iter().enumerate() {
            let expect = 2.0 * (1.0 - 0.5f64.powi(t as i32 + 1));
            assert!(close(*v, expect, 1e-12), "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn parallel_single_chunk_is_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, di, ds) = (33, 3, 4);
        let s = ScanInputs {
            len: l,
            d_inner: di,
            d_state: ds,
            x: (0..l * di).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            delta: (0..l * di).map(|_| rng.gen_range(0.01..0.5)).collect(),
            b: (0..l * ds).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..l * ds).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let a: Vec<f64> = (0..di * ds).map(|i| -((i % ds) as f64 + 1.0)).collect();
        let skip = vec![0.5; di];
        let seq = selective_scan_seq(&s, &a, &skip).unwrap();
        assert_eq!(selective_scan_parallel(&s, &a, &skip, l).unwrap(), seq);
        assert!(selective_scan_parallel(&s, &a, &skip, 0).is_err());
    }

    fn small_layer(seed: u64) -> MambaLayerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = MambaConfig::new(4);
        cfg.d_state = 3;
        MambaLayerParams::init(cfg, &mut rng)
    }

    #[test]
    fn init_is_consistent_and_stable() {
        let p = small_layer(1);
        p.validate().unwrap();
        assert!(p.a().iter().all(|&v| v < 0.0));
        for &b in &p.dt_proj.bias {
            let dt = softplus(b);
            assert!((0.999e-3..=1.001e-1).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let mut p = small_layer(3);
        p.in_proj.bias.fill(0.0);
        p.conv_bias.fill(0.0);
        p.dt_proj.bias.fill(0.0);
        p.out_proj.bias.fill(0.0);
        let out = mamba_layer_forward(&Matrix::zeros(6, 4), &p, Direction::Fwd).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_on_palindrome_is_reversed_forward() {
        let p = small_layer(4);
        let half = Matrix::from_fn(3, 4, |r, c| (r as f32 - c as f32) * 0.3);
        let seq = Matrix::vconcat(&[half.clone(), half.reversed_rows()], 4);
        let fwd = mamba_layer_forward(&seq, &p, Direction::Fwd).unwrap();
        let bwd = mamba_layer_forward(&seq, &p, Direction::Bwd).unwrap();
        assert!(bwd.max_abs_diff(&fwd.reversed_rows()) < 1e-6);
    }

    #[test]
    fn width_mismatch_rejected() {
        let p = small_layer(5);
        assert!(mamba_layer_forward(&Matrix::zeros(2, 5), &p, Direction::Fwd).is_err());
    }

    #[test]
    fn bidirectional_with_zero_backward_output_is_forward() {
        let p_fwd = small_layer(6);
        let mut p_bwd = small_layer(7);
        p_bwd.out_proj.weight = Matrix::zeros(p_bwd.cfg.d_inner(), 4);
        let seq = Matrix::from_fn(5, 4, |r, c| ((r * 4 + c) as f32).sin());
        let bi = bidirectional_mamba(&seq, &p_fwd, &p_bwd).unwrap();
        let uni = mamba_layer_forward(&seq, &p_fwd, Direction::Fwd).unwrap();
        assert_eq!(bi, uni);
    }

    #[test]
    fn forward_is_causal() {
        let p = small_layer(8);
        let seq = Matrix::from_fn(12, 4, |r, c| ((r + 2 * c) as f32 * 0.7).cos());
        let base = mamba_layer_forward(&seq, &p, Direction::Fwd).unwrap();
        let mut bumped = seq.clone();
        bumped.set(7, 2, bumped.get(7, 2) + 0.5);
        let out = mamba_layer_forward(&bumped, &p, Direction::Fwd).unwrap();
        for t in 0..12 {
            let diff: f32 = base
                .row(t)
                .iter()
                .zip(out.row(t))
                .map(|(a, b)| (a - b).abs())
                .sum();
            if t < 7 {
                assert_eq!(diff, 0.0, "row {t} changed");
            }
        }
        assert!(base.row(7) != out.row(7));
    }
}
