//! Global-feature branch: row softmax, row-wise top-k masking, the SA, kSA and
//! EkSA operators, and the residual scaled block that wraps them.
//!
//! Matrix-level functions take `n×d` row-major token matrices. The kernels
//! themselves work on channel-major `d×n` buffers, which is how a feature map
//! `N×d×h×w` stores its tokens, so the graph op needs no transposes.
//!
//! Top-k keeps the `k` largest entries of each row; ties go to the lowest
//! column index. The mask is treated as constant when differentiating.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Op, Ops};
use crate::nn::{conv_ref, ConvParams, ConvRef};
use crate::real::{Layout, Real};
use crate::tensor::Tensor;

/// Largest token count accepted by the kernels that build an `n×n` map.
pub const MAX_MAP_TOKENS: usize = 1 << 16;

thread_local! {
    static MAP_PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Clears this thread's attention-map instrumentation.
pub fn reset_map_peak() {
    MAP_PEAK.with(|c| c.set(0));
}

/// Largest attention map (in elements) materialized on this thread since the last reset.
pub fn map_peak_elements() -> usize {
    MAP_PEAK.with(Cell::get)
}

fn record_map(elements: usize) {
    MAP_PEAK.with(|c| c.set(c.get().max(elements)));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "kSA")]
    Ksa,
    #[serde(rename = "EkSA")]
    Eksa,
    #[serde(rename = "None")]
    None,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::Sa,
        AttentionVariant::Ksa,
        AttentionVariant::Eksa,
        AttentionVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Sa => "SA",
            AttentionVariant::Ksa => "kSA",
            AttentionVariant::Eksa => "EkSA",
            AttentionVariant::None => "None",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attention variant '{s}'")))
    }
}

/// Number of entries kept per row, or every entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TopKRepr", into = "TopKRepr")]
pub enum TopK {
    All,
    Count(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TopKRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<TopKRepr> for TopK {
    type Error = String;

    fn try_from(r: TopKRepr) -> std::result::Result<Self, String> {
        match r {
            TopKRepr::Count(0) => Err("k must be at least 1".into()),
            TopKRepr::Count(k) => Ok(TopK::Count(k)),
            TopKRepr::Word(w) if w.eq_ignore_ascii_case("all") => Ok(TopK::All),
            TopKRepr::Word(w) => Err(format!("k must be a positive integer or \"all\", got '{w}'")),
        }
    }
}

impl From<TopK> for TopKRepr {
    fn from(k: TopK) -> Self {
        match k {
            TopK::All => TopKRepr::Word("all".into()),
            TopK::Count(k) => TopKRepr::Count(k),
        }
    }
}

impl TopK {
    /// Concrete `k` for rows of `width` entries.
    pub fn resolve(self, width: usize, what: &str) -> Result<usize> {
        match self {
            TopK::All => Ok(width),
            TopK::Count(0) => Err(Error::Config(format!("{what}: k must be at least 1"))),
            TopK::Count(k) if k > width => Err(Error::Config(format!(
                "{what}: k = {k} exceeds the row length {width}"
            ))),
            TopK::Count(k) => Ok(k),
        }
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::Count(k) => write!(f, "{k}"),
        }
    }
}

/// `k` applies to EkSA (rows of length `d`), `k_tokens` to kSA (rows of length `n`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub k: TopK,
    pub k_tokens: TopK,
    pub residual: bool,
    pub scale_init: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            variant: AttentionVariant::Eksa,
            k: TopK::Count(50),
            k_tokens: TopK::Count(50),
            residual: true,
            scale_init: 0.0,
        }
    }
}

impl AttentionConfig {
    /// Kernel for `n` tokens of width `d`.
    pub fn kernel(&self, n: usize, d: usize) -> Result<AttentionKernel> {
        match self.variant {
            AttentionVariant::Sa => Ok(AttentionKernel::Sa),
            AttentionVariant::Ksa => Ok(AttentionKernel::Ksa(self.k_tokens.resolve(n, "kSA")?)),
            AttentionVariant::Eksa => Ok(AttentionKernel::Eksa(self.k.resolve(d, "EkSA")?)),
            AttentionVariant::None => Err(Error::Config(
                "attention variant None has no attention block".into(),
            )),
        }
    }
}

/// A concrete attention operator with its resolved `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKernel {
    /// `softmax(Q·Kᵀ)·V`
    Sa,
    /// `softmax(T_k(Q·Kᵀ))·V`
    Ksa(usize),
    /// `Q·softmax(T_k(Vᵀ·K))`
    Eksa(usize),
}

impl AttentionKernel {
    /// Shape of the attention map for `n` tokens of width `d`.
    pub fn map_dims(self, n: usize, d: usize) -> (usize, usize) {
        match self {
            AttentionKernel::Sa | AttentionKernel::Ksa(_) => (n, n),
            AttentionKernel::Eksa(_) => (d, d),
        }
    }

    fn top(self) -> Option<usize> {
        match self {
            AttentionKernel::Sa => None,
            AttentionKernel::Ksa(k) | AttentionKernel::Eksa(k) => Some(k),
        }
    }

    pub fn validate(self, n: usize, d: usize) -> Result<()> {
        if n == 0 || d == 0 {
            return Err(Error::Dimension("attention needs at least one token and channel".into()));
        }
        match self {
            AttentionKernel::Sa | AttentionKernel::Ksa(_) if n > MAX_MAP_TOKENS => {
                Err(Error::Dimension(format!(
                    "{n} tokens exceed the {MAX_MAP_TOKENS}-token limit of the n×n attention map"
                )))
            }
            AttentionKernel::Ksa(k) if k == 0 || k > n => Err(Error::Config(format!(
                "kSA needs 1 ≤ k ≤ n = {n}, got k = {k}"
            ))),
            AttentionKernel::Eksa(k) if k == 0 || k > d => Err(Error::Config(format!(
                "EkSA needs 1 ≤ k ≤ d = {d}, got k = {k}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Replaces all but the `k` largest entries of `row` with −∞.
fn mask_row<T: Real>(row: &mut [T], k: usize, order: &mut Vec<usize>) -> Result<()> {
    if let Some(v) = row.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("top-k input contains {v}")));
    }
    if k >= row.len() {
        return Ok(());
    }
    order.clear();
    order.extend(0..row.len());
    {
        let r: &[T] = row;
        order.select_nth_unstable_by(k, |&a, &b| {
            r[b].partial_cmp(&r[a]).expect("finite").then(a.cmp(&b))
        });
    }
    for &j in &order[k..] {
        row[j] = T::neg_infinity();
    }
    Ok(())
}

fn softmax_row<T: Real>(row: &mut [T]) -> Result<()> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax row has no finite entry".into()));
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Masked, normalized attention map from channel-major `qt, kt, vt` (`d×n`).
fn probabilities<T: Real>(kernel: AttentionKernel, qt: &[T], kt: &[T], vt: &[T], n: usize, d: usize) -> Result<Vec<T>> {
    let (rows, cols) = kernel.map_dims(n, d);
    record_map(rows * cols);
    let mut s = vec![T::zero(); rows * cols];
    match kernel {
        AttentionKernel::Sa | AttentionKernel::Ksa(_) => {
            T::gemm(n, d, n, qt, Layout::Transposed, kt, Layout::Normal, &mut s, false)
        }
        AttentionKernel::Eksa(_) => {
            T::gemm(d, n, d, vt, Layout::Normal, kt, Layout::Transposed, &mut s, false)
        }
    }
    let mut order = Vec::new();
    for row in s.chunks_mut(cols) {
        if let Some(k) = kernel.top() {
            mask_row(row, k, &mut order)?;
        }
        softmax_row(row)?;
    }
    Ok(s)
}

/// Writes the channel-major attention output `d×n` into `out`.
fn attend<T: Real>(kernel: AttentionKernel, qt: &[T], kt: &[T], vt: &[T], n: usize, d: usize, out: &mut [T]) -> Result<()> {
    let p = probabilities(kernel, qt, kt, vt, n, d)?;
    match kernel {
        AttentionKernel::Sa | AttentionKernel::Ksa(_) => {
            T::gemm(d, n, n, vt, Layout::Normal, &p, Layout::Transposed, out, false)
        }
        AttentionKernel::Eksa(_) => {
            T::gemm(d, d, n, &p, Layout::Transposed, qt, Layout::Normal, out, false)
        }
    }
    Ok(())
}

struct TokenGrads<'a, T> {
    dq: &'a mut [T],
    dk: &'a mut [T],
    dv: &'a mut [T],
}

/// Gradients of [`attend`] with the top-k mask held fixed. `g` is `d×n`.
#[allow(clippy::too_many_arguments)]
fn attend_backward<T: Real>(
    kernel: AttentionKernel,
    qt: &[T],
    kt: &[T],
    vt: &[T],
    n: usize,
    d: usize,
    g: &[T],
    out: TokenGrads<'_, T>,
) -> Result<()> {
    let p = probabilities(kernel, qt, kt, vt, n, d)?;
    let (rows, cols) = kernel.map_dims(n, d);
    let mut ds = vec![T::zero(); rows * cols];
    match kernel {
        AttentionKernel::Sa | AttentionKernel::Ksa(_) => {
            T::gemm(n, d, n, g, Layout::Transposed, vt, Layout::Normal, &mut ds, false);
            T::gemm(d, n, n, g, Layout::Normal, &p, Layout::Normal, out.dv, true);
        }
        AttentionKernel::Eksa(_) => {
            T::gemm(d, n, d, qt, Layout::Normal, g, Layout::Transposed, &mut ds, false);
            T::gemm(d, d, n, &p, Layout::Normal, g, Layout::Normal, out.dq, true);
        }
    }
    for (prow, drow) in p.chunks(cols).zip(ds.chunks_mut(cols)) {
        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
        for (dv, &pv) in drow.iter_mut().zip(prow) {
            *dv = pv * (*dv - dot);
        }
    }
    match kernel {
        AttentionKernel::Sa | AttentionKernel::Ksa(_) => {
            T::gemm(d, n, n, kt, Layout::Normal, &ds, Layout::Transposed, out.dq, true);
            T::gemm(d, n, n, qt, Layout::Normal, &ds, Layout::Normal, out.dk, true);
        }
        AttentionKernel::Eksa(_) => {
            T::gemm(d, d, n, &ds, Layout::Normal, kt, Layout::Normal, out.dv, true);
            T::gemm(d, d, n, &ds, Layout::Transposed, vt, Layout::Normal, out.dk, true);
        }
    }
    Ok(())
}

/// `(batch, d, n)` of a channel-major token tensor `N×d×…`.
fn token_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Dimension(format!(
            "attention tokens need shape N×d×…, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Core attention on channel-major feature maps. Inputs: `q, k, v`, each `N×d×h×w`.
pub struct AttentionOp {
    pub kernel: AttentionKernel,
}

impl<T: Real> Op<T> for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [q, k, v] = inputs else {
            return Err(Error::Dimension("attention takes (q, k, v)".into()));
        };
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape(q.shape(), if k.shape() != q.shape() { k.shape() } else { v.shape() }));
        }
        let (batch, d, n) = token_dims(q)?;
        self.kernel.validate(n, d)?;
        if !(q.all_finite() && k.all_finite() && v.all_finite()) {
            return Err(Error::NonFinite("attention inputs".into()));
        }
        let mut out = Tensor::zeros(q.shape());
        for b in 0..batch {
            attend(self.kernel, q.batch(b), k.batch(b), v.batch(b), n, d, out.batch_mut(b))?;
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (batch, d, n) = token_dims(q)?;
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(q.shape());
        let mut dv = Tensor::zeros(q.shape());
        for b in 0..batch {
            attend_backward(
                self.kernel,
                q.batch(b),
                k.batch(b),
                v.batch(b),
                n,
                d,
                grad.batch(b),
                TokenGrads {
                    dq: dq.batch_mut(b),
                    dk: dk.batch_mut(b),
                    dv: dv.batch_mut(b),
                },
            )?;
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn transpose<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax. `−∞` entries map to exactly zero.
pub fn softmax_rows<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = matrix_dims(y)?;
    if y.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::NonFinite("softmax input contains NaN or +∞".into()));
    }
    let mut out = y.clone();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_row(row)?;
        }
    }
    Ok(out)
}

/// Keeps the `k` largest entries of each row and sets the rest to `−∞`.
pub fn topk_mask<T: Real>(a: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (_, cols) = matrix_dims(a)?;
    if k == 0 {
        return Err(Error::Config("top-k needs k ≥ 1".into()));
    }
    let mut out = a.clone();
    let mut order = Vec::new();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            mask_row(row, k, &mut order)?;
        }
    }
    Ok(out)
}

fn qkv_dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    let dims = matrix_dims(q)?;
    for t in [k, v] {
        if t.shape() != q.shape() {
            return Err(Error::shape(q.shape(), t.shape()));
        }
    }
    Ok(dims)
}

/// The normalized attention map: `n×n` for SA and kSA, `d×d` for EkSA.
pub fn attention_map<T: Real>(kernel: AttentionKernel, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = qkv_dims(q, k, v)?;
    kernel.validate(n, d)?;
    let (qt, kt, vt) = (transpose(q.data(), n, d), transpose(k.data(), n, d), transpose(v.data(), n, d));
    let p = probabilities(kernel, &qt, &kt, &vt, n, d)?;
    let (rows, cols) = kernel.map_dims(n, d);
    Tensor::from_vec(&[rows, cols], p)
}

/// `X·Wᵀ + b` for tokens `X` (`n×d_in`) and a 1×1 convolution's parameters.
pub fn linear<T: Real>(x: &Tensor<T>, l: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, d) = matrix_dims(x)?;
    if l.kernel() != 1 || l.c_in() != d {
        return Err(Error::Dimension(format!(
            "linear map needs a 1×1 kernel over {d} inputs, got {}×{} over {}",
            l.kernel(),
            l.kernel(),
            l.c_in()
        )));
    }
    let d_out = l.c_out();
    let mut y = Tensor::from_fn(&[n, d_out], |i| l.bias.data()[i % d_out]);
    T::gemm(n, d, d_out, x.data(), Layout::Normal, l.weight.data(), Layout::Transposed, y.data_mut(), true);
    Ok(y)
}

/// `L[attention(Q, K, V)]·scale` with `n×d` token matrices.
pub fn attention<T: Real>(
    kernel: AttentionKernel,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    l: &ConvParams<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let (n, d) = qkv_dims(q, k, v)?;
    kernel.validate(n, d)?;
    let (qt, kt, vt) = (transpose(q.data(), n, d), transpose(k.data(), n, d), transpose(v.data(), n, d));
    let mut out = vec![T::zero(); n * d];
    attend(kernel, &qt, &kt, &vt, n, d, &mut out)?;
    let o = Tensor::from_vec(&[n, d], transpose(&out, d, n))?;
    Ok(linear(&o, l)?.map(|v| v * scale))
}

pub fn attention_sa<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, l: &ConvParams<T>, scale: T) -> Result<Tensor<T>> {
    attention(AttentionKernel::Sa, q, k, v, l, scale)
}

pub fn attention_ksa<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    top: usize,
    l: &ConvParams<T>,
    scale: T,
) -> Result<Tensor<T>> {
    attention(AttentionKernel::Ksa(top), q, k, v, l, scale)
}

pub fn attention_eksa<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    top: usize,
    l: &ConvParams<T>,
    scale: T,
) -> Result<Tensor<T>> {
    attention(AttentionKernel::Eksa(top), q, k, v, l, scale)
}

/// Weights of the attention branch: a two-layer stem from the 15 stacked
/// input channels, the per-token query/key/value/output maps, and `scale`.
#[derive(Debug)]
pub struct AttentionWeights<'a, V> {
    pub stem: [ConvRef<'a, V>; 2],
    pub query: ConvRef<'a, V>,
    pub key: ConvRef<'a, V>,
    pub value: ConvRef<'a, V>,
    pub out: ConvRef<'a, V>,
    pub scale: &'a V,
}

/// The attention branch on five `N×3×h×w` pictures, giving `N×C×h×w` features.
pub fn eksa_block<T: Real, O: Ops<T>>(
    ops: &mut O,
    pictures: &[O::V],
    cfg: &AttentionConfig,
    w: &AttentionWeights<'_, O::V>,
) -> Result<O::V> {
    if pictures.len() != 5 {
        return Err(Error::Dimension(format!(
            "attention branch takes 5 pictures, got {}",
            pictures.len()
        )));
    }
    let refs: Vec<&O::V> = pictures.iter().collect();
    let stacked = ops.concat_channels(&refs)?;
    let h = conv_ref(ops, &stacked, w.stem[0])?;
    let h = ops.relu(&h)?;
    let initial = conv_ref(ops, &h, w.stem[1])?;
    let (_, d, n) = token_dims(ops.value(&initial))?;
    let kernel = cfg.kernel(n, d)?;
    let q = conv_ref(ops, &initial, w.query)?;
    let k = conv_ref(ops, &initial, w.key)?;
    let v = conv_ref(ops, &initial, w.value)?;
    let a = ops.apply(AttentionOp { kernel }, &[&q, &k, &v])?;
    let a = conv_ref(ops, &a, w.out)?;
    let a = ops.scale(&a, w.scale)?;
    if cfg.residual {
        ops.add(&initial, &a)
    } else {
        Ok(a)
    }
}
