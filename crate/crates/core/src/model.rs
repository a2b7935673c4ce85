//! Dense towers of the toy DLRM.
//!
//! The dense arch maps dense features to a `D`-vector; the over arch maps the
//! concatenation of all pooled embeddings and the dense vector to one logit.
//! Both are ReLU MLPs stored as flat parameter vectors so they can be reduced
//! across data-parallel ranks in one pass.
//!
//! The towers are generic over the scalar type: training runs in `f32`, the
//! finite-difference gradient check runs the same code in `f64`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Sub};

use rand::Rng;

use crate::rng::{self, Lane};

pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline(always)]
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = R::ZERO;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline(always)]
fn axpy<R: Real>(y: &mut [R], a: R, x: &[R]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| std::is_x86_feature_detected!("avx2"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Offset of the `inputs x outputs` weight block; row `i` holds the
    /// weights leaving input `i`.
    w: usize,
    b: usize,
}

/// ReLU MLP; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<R> {
    layers: Vec<Layer>,
    pub params: Vec<R>,
}

/// Activations saved by the forward pass: `acts[l]` is the input to layer `l`
/// and the last entry is the output.
#[derive(Clone, Debug, Default)]
pub struct MlpCache<R> {
    acts: Vec<Vec<R>>,
    grads: Vec<Vec<R>>,
}

impl<R: Real> Mlp<R> {
    /// `sizes = [in, hidden..., out]`, weights `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], seed: u64, tag: u64) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs an input and an output size");
        let mut layers = Vec::new();
        let mut offset = 0;
        for pair in sizes.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            layers.push(Layer {
                inputs,
                outputs,
                w: offset,
                b: offset + inputs * outputs,
            });
            offset += inputs * outputs + outputs;
        }
        let mut params = vec![R::ZERO; offset];
        for (l, layer) in layers.iter().enumerate() {
            let mut rng = rng::stream(seed, Lane::DenseInit, &[tag, l as u64]);
            let bound = 1.0 / (layer.inputs.max(1) as f64).sqrt();
            for p in &mut params[layer.w..layer.b] {
                *p = R::from_f64(rng.random_range(-bound..bound));
            }
        }
        Self { layers, params }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let mut m = Self::new(sizes, 0, 0);
        m.params.iter_mut().for_each(|p| *p = R::ZERO);
        m
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Same architecture with parameters cast to another scalar type.
    pub fn cast<S: Real>(&self) -> Mlp<S> {
        Mlp {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| S::from_f64(p.to_f64())).collect(),
        }
    }

    pub fn cache(&self) -> MlpCache<R> {
        let mut acts = vec![vec![R::ZERO; self.input_dim()]];
        acts.extend(self.layers.iter().map(|l| vec![R::ZERO; l.outputs]));
        let grads = acts.clone();
        MlpCache { acts, grads }
    }

    pub fn forward<'c>(&self, x: &[R], cache: &'c mut MlpCache<R>) -> &'c [R] {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            unsafe { self.forward_avx2(x, cache) };
            return &cache.acts[self.layers.len()];
        }
        self.forward_impl(x, cache);
        &cache.acts[self.layers.len()]
    }

    /// Backpropagate `dout` through the cached forward pass, adding parameter
    /// gradients into `grad` and writing the input gradient to `dx` if given.
    pub fn backward(&self, cache: &mut MlpCache<R>, dout: &[R], grad: &mut [R], dx: Option<&mut [R]>) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.backward_avx2(cache, dout, grad, dx) };
        }
        self.backward_impl(cache, dout, grad, dx)
    }

    // Wider vectors change neither the per-element operations nor the fixed
    // reduction order of `dot`, so both builds give identical bits.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn forward_avx2(&self, x: &[R], cache: &mut MlpCache<R>) {
        self.forward_impl(x, cache)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn backward_avx2(&self, cache: &mut MlpCache<R>, dout: &[R], grad: &mut [R], dx: Option<&mut [R]>) {
        self.backward_impl(cache, dout, grad, dx)
    }

    #[inline(always)]
    fn forward_impl(&self, x: &[R], cache: &mut MlpCache<R>) {
        cache.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            out.copy_from_slice(&self.params[layer.b..layer.b + layer.outputs]);
            let w = &self.params[layer.w..layer.b];
            for (i, &xi) in input.iter().enumerate() {
                if xi != R::ZERO {
                    axpy(out, xi, &w[i * layer.outputs..(i + 1) * layer.outputs]);
                }
            }
            if l != last {
                for o in out.iter_mut() {
                    if *o < R::ZERO {
                        *o = R::ZERO;
                    }
                }
            }
        }
    }

    #[inline(always)]
    fn backward_impl(&self, cache: &mut MlpCache<R>, dout: &[R], grad: &mut [R], dx: Option<&mut [R]>) {
        let n = self.layers.len();
        cache.grads[n].copy_from_slice(dout);
        for l in (0..n).rev() {
            let layer = self.layers[l];
            let (before, after) = cache.grads.split_at_mut(l + 1);
            let delta = &after[0];
            let input = &cache.acts[l];
            axpy(&mut grad[layer.b..layer.b + layer.outputs], R::from_f64(1.0), delta);
            let w = &self.params[layer.w..layer.b];
            let gw = &mut grad[layer.w..layer.b];
            for (i, &xi) in input.iter().enumerate() {
                if xi != R::ZERO {
                    axpy(&mut gw[i * layer.outputs..(i + 1) * layer.outputs], xi, delta);
                }
            }
            if l == 0 && dx.is_none() {
                break;
            }
            let din = &mut before[l];
            for (i, d) in din.iter_mut().enumerate() {
                // Inputs of hidden layers are ReLU outputs: zero means inactive.
                *d = if l > 0 && input[i] == R::ZERO {
                    R::ZERO
                } else {
                    dot(&w[i * layer.outputs..(i + 1) * layer.outputs], delta)
                };
            }
        }
        if let Some(dx) = dx {
            dx.copy_from_slice(&cache.grads[0]);
        }
    }
}

/// Architecture of the toy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub tables: usize,
    /// Embedding dimension `D`.
    pub dim: usize,
    pub dense_features: usize,
    /// Width of the dense arch hidden layer; 0 means a single linear layer.
    pub dense_hidden: usize,
    /// Width of the over arch hidden layer; 0 means a single linear layer.
    pub over_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            tables: 8,
            dim: 16,
            dense_features: 8,
            dense_hidden: 32,
            over_hidden: 64,
        }
    }
}

impl ModelDims {
    fn dense_sizes(&self) -> Vec<usize> {
        hidden_sizes(self.dense_features, self.dense_hidden, self.dim)
    }

    fn over_sizes(&self) -> Vec<usize> {
        hidden_sizes(self.over_input(), self.over_hidden, 1)
    }

    pub fn over_input(&self) -> usize {
        self.tables * self.dim + self.dim
    }

    pub fn pooled_len(&self) -> usize {
        self.tables * self.dim
    }
}

fn hidden_sizes(input: usize, hidden: usize, output: usize) -> Vec<usize> {
    if hidden == 0 {
        vec![input, output]
    } else {
        vec![input, hidden, output]
    }
}

/// The data-parallel part of the toy DLRM, replicated on every rank.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel<R> {
    pub dims: ModelDims,
    pub dense_arch: Mlp<R>,
    pub over_arch: Mlp<R>,
}

/// Gradient buffers laid out like [`DenseModel`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<R> {
    pub dense_arch: Vec<R>,
    pub over_arch: Vec<R>,
}

impl<R: Real> DenseGrads<R> {
    pub fn zero(&mut self) {
        self.dense_arch.fill(R::ZERO);
        self.over_arch.fill(R::ZERO);
    }

    pub fn len(&self) -> usize {
        self.dense_arch.len() + self.over_arch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &R> {
        self.dense_arch.iter().chain(&self.over_arch)
    }
}

/// Per-sample scratch space.
#[derive(Clone, Debug)]
pub struct Workspace<R> {
    dense_cache: MlpCache<R>,
    over_cache: MlpCache<R>,
    over_in: Vec<R>,
    d_over_in: Vec<R>,
}

impl<R: Real> DenseModel<R> {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        Self {
            dims,
            dense_arch: Mlp::new(&dims.dense_sizes(), seed, 0),
            over_arch: Mlp::new(&dims.over_sizes(), seed, 1),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            dense_arch: Mlp::zeros(&dims.dense_sizes()),
            over_arch: Mlp::zeros(&dims.over_sizes()),
        }
    }

    pub fn cast<S: Real>(&self) -> DenseModel<S> {
        DenseModel {
            dims: self.dims,
            dense_arch: self.dense_arch.cast(),
            over_arch: self.over_arch.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.dense_arch.num_params() + self.over_arch.num_params()
    }

    pub fn params(&self) -> impl Iterator<Item = &R> {
        self.dense_arch.params.iter().chain(&self.over_arch.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut R> {
        self.dense_arch
            .params
            .iter_mut()
            .chain(self.over_arch.params.iter_mut())
    }

    pub fn grads(&self) -> DenseGrads<R> {
        DenseGrads {
            dense_arch: vec![R::ZERO; self.dense_arch.num_params()],
            over_arch: vec![R::ZERO; self.over_arch.num_params()],
        }
    }

    pub fn workspace(&self) -> Workspace<R> {
        Workspace {
            dense_cache: self.dense_arch.cache(),
            over_cache: self.over_arch.cache(),
            over_in: vec![R::ZERO; self.dims.over_input()],
            d_over_in: vec![R::ZERO; self.dims.over_input()],
        }
    }

    /// Logit for one sample given its pooled embeddings (`tables * D`, table
    /// major) and dense features.
    pub fn forward(&self, pooled: &[R], dense: &[R], ws: &mut Workspace<R>) -> R {
        let p = self.dims.pooled_len();
        ws.over_in[..p].copy_from_slice(pooled);
        let dense_out = self.dense_arch.forward(dense, &mut ws.dense_cache);
        ws.over_in[p..].copy_from_slice(dense_out);
        self.over_arch.forward(&ws.over_in, &mut ws.over_cache)[0]
    }

    /// Backpropagate `dlogit` from the last [`forward`](Self::forward) call.
    /// Parameter gradients are added to `grads`; the gradient with respect to
    /// the pooled embeddings is written to `dpooled`.
    pub fn backward(&self, dlogit: R, ws: &mut Workspace<R>, grads: &mut DenseGrads<R>, dpooled: &mut [R]) {
        self.over_arch.backward(
            &mut ws.over_cache,
            &[dlogit],
            &mut grads.over_arch,
            Some(&mut ws.d_over_in),
        );
        let p = self.dims.pooled_len();
        dpooled.copy_from_slice(&ws.d_over_in[..p]);
        self.dense_arch
            .backward(&mut ws.dense_cache, &ws.d_over_in[p..], &mut grads.dense_arch, None);
    }

    /// Flat little-endian dump of all parameters, prefixed by their count.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = (self.num_params() as u64).to_le_bytes().to_vec();
        for p in self.params() {
            out.extend_from_slice(&(p.to_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> crate::Result<()> {
        let bad = || crate::Error::Checkpoint("dense parameter blob does not match the model".into());
        if bytes.len() < 8 {
            return Err(bad());
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if n != self.num_params() || bytes.len() != 8 + 4 * n {
            return Err(bad());
        }
        for (p, c) in self.params_mut().zip(bytes[8..].chunks_exact(4)) {
            *p = R::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
        Ok(())
    }
}

/// Sum per-rank gradients in ascending rank order with 64-bit accumulation.
pub fn reduce_rank_grads(per_rank: &[DenseGrads<f32>], out: &mut Vec<f64>) {
    let (dl, ol) = per_rank
        .first()
        .map_or((0, 0), |g| (g.dense_arch.len(), g.over_arch.len()));
    out.clear();
    out.resize(dl + ol, 0.0);
    let (od, oo) = out.split_at_mut(dl);
    for g in per_rank {
        add_widened(od, &g.dense_arch);
        add_widened(oo, &g.over_arch);
    }
}

#[inline]
fn add_widened(acc: &mut [f64], xs: &[f32]) {
    for (a, &x) in acc.iter_mut().zip(xs) {
        *a += x as f64;
    }
}

/// `p -= eta * g / batch` for every dense parameter.
pub fn apply_dense_sgd(model: &mut DenseModel<f32>, summed: &[f64], batch: usize, eta: f64) {
    let scale = eta / batch as f64;
    let (gd, go) = summed.split_at(model.dense_arch.params.len());
    for (params, grads) in [(&mut model.dense_arch.params, gd), (&mut model.over_arch.params, go)] {
        for (p, g) in params.iter_mut().zip(grads) {
            *p = (*p as f64 - scale * g) as f32;
        }
    }
}

/// Numerically stable `log(1 + exp(z)) - y z`.
pub fn logistic_loss(logit: f64, label: u8) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - label as f64 * logit
}
