//! Causal single-head attention blocks with residual feed-forward, and
//! their reverse-mode gradients.
//!
//! Every block but the last runs over the whole sequence. The last block
//! only evaluates the final position, which is the only one pooled.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{EncoderParams, MixerLayer};
use crate::scalar::Scalar;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// In-place softmax over `row[..len]`; entries past `len` are set to zero.
fn masked_softmax<T: Scalar>(row: &mut [T], len: usize) {
    let max = row[..len].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in &mut row[..len] {
        *v = *v / sum;
    }
    for v in &mut row[len..] {
        *v = T::zero();
    }
}

/// `dst += a · b` for matrix views.
fn gemm_acc<T: Scalar>(dst: &mut Array2<T>, a: ArrayView2<T>, b: ArrayView2<T>) {
    general_mat_mul(T::one(), &a, &b, T::one(), dst);
}

/// `dst += a ⊗ b`.
fn outer_acc<T: Scalar>(dst: &mut Array2<T>, a: ArrayView1<T>, b: ArrayView1<T>) {
    gemm_acc(dst, a.insert_axis(Axis(1)), b.insert_axis(Axis(0)));
}

pub(crate) struct FullCache<T> {
    pub(crate) input: Array2<T>,
    pub(crate) q: Array2<T>,
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
    pub(crate) attn: Array2<T>,
    pub(crate) ctx: Array2<T>,
    pub(crate) mid: Array2<T>,
    pub(crate) pre: Array2<T>,
    pub(crate) act: Array2<T>,
}

pub(crate) struct LastCache<T> {
    pub(crate) input: Array2<T>,
    pub(crate) q: Array1<T>,
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
    pub(crate) attn: Array1<T>,
    pub(crate) ctx: Array1<T>,
    pub(crate) mid: Array1<T>,
    pub(crate) pre: Array1<T>,
    pub(crate) act: Array1<T>,
}

pub(crate) struct MixerCache<T> {
    pub(crate) full: Vec<FullCache<T>>,
    pub(crate) last: LastCache<T>,
}

impl<T> MixerCache<T> {
    /// Attention of the final position at each layer, over all positions.
    pub(crate) fn final_row_attention(&self) -> Vec<ArrayView1<'_, T>> {
        let mut rows: Vec<ArrayView1<'_, T>> = self
            .full
            .iter()
            .map(|c| c.attn.row(c.attn.nrows() - 1))
            .collect();
        rows.push(self.last.attn.view());
        rows
    }
}

fn scale_for<T: Scalar>(layer: &MixerLayer<T>) -> T {
    T::one() / T::lit(layer.wq.nrows() as f64).sqrt()
}

fn full_forward<T: Scalar>(input: Array2<T>, layer: &MixerLayer<T>) -> (Array2<T>, FullCache<T>) {
    let scale = scale_for(layer);
    let q = input.dot(&layer.wq);
    let k = input.dot(&layer.wk);
    let v = input.dot(&layer.wv);
    let mut attn = q.dot(&k.t()) * scale;
    for (i, mut row) in attn.axis_iter_mut(Axis(0)).enumerate() {
        masked_softmax(row.as_slice_mut().expect("standard layout"), i + 1);
    }
    let ctx = attn.dot(&v);
    let mid = &input + &ctx.dot(&layer.wo);
    let pre = mid.dot(&layer.ff_in);
    let act = pre.mapv(gelu);
    let out = &mid + &act.dot(&layer.ff_out);
    let cache = FullCache {
        input,
        q,
        k,
        v,
        attn,
        ctx,
        mid,
        pre,
        act,
    };
    (out, cache)
}

fn full_backward<T: Scalar>(
    c: &FullCache<T>,
    d_out: Array2<T>,
    layer: &MixerLayer<T>,
    g: &mut MixerLayer<T>,
) -> Array2<T> {
    let scale = scale_for(layer);
    gemm_acc(&mut g.ff_out, c.act.t(), d_out.view());
    let mut d_pre = d_out.dot(&layer.ff_out.t());
    d_pre.zip_mut_with(&c.pre, |d, &x| *d = *d * gelu_grad(x));
    gemm_acc(&mut g.ff_in, c.mid.t(), d_pre.view());
    let d_mid = d_out + d_pre.dot(&layer.ff_in.t());

    gemm_acc(&mut g.wo, c.ctx.t(), d_mid.view());
    let d_ctx = d_mid.dot(&layer.wo.t());
    let d_attn = d_ctx.dot(&c.v.t());
    let d_v = c.attn.t().dot(&d_ctx);

    let mut d_z = d_attn;
    for (mut dz, a) in d_z.axis_iter_mut(Axis(0)).zip(c.attn.axis_iter(Axis(0))) {
        let dot = dz.dot(&a);
        dz.zip_mut_with(&a, |d, &p| *d = p * (*d - dot) * scale);
    }
    let d_q = d_z.dot(&c.k);
    let d_k = d_z.t().dot(&c.q);

    gemm_acc(&mut g.wq, c.input.t(), d_q.view());
    gemm_acc(&mut g.wk, c.input.t(), d_k.view());
    gemm_acc(&mut g.wv, c.input.t(), d_v.view());

    let mut d_in = d_mid;
    gemm_acc(&mut d_in, d_q.view(), layer.wq.t());
    gemm_acc(&mut d_in, d_k.view(), layer.wk.t());
    gemm_acc(&mut d_in, d_v.view(), layer.wv.t());
    d_in
}

fn last_forward<T: Scalar>(input: Array2<T>, layer: &MixerLayer<T>) -> (Array1<T>, LastCache<T>) {
    let scale = scale_for(layer);
    let n = input.nrows();
    let x = input.row(n - 1);
    let q = x.dot(&layer.wq);
    let k = input.dot(&layer.wk);
    let v = input.dot(&layer.wv);
    let mut attn = k.dot(&q) * scale;
    masked_softmax(attn.as_slice_mut().expect("contiguous"), n);
    let ctx = attn.dot(&v);
    let mid = &x + &ctx.dot(&layer.wo);
    let pre = mid.dot(&layer.ff_in);
    let act = pre.mapv(gelu);
    let out = &mid + &act.dot(&layer.ff_out);
    let cache = LastCache {
        input,
        q,
        k,
        v,
        attn,
        ctx,
        mid,
        pre,
        act,
    };
    (out, cache)
}

fn last_backward<T: Scalar>(
    c: &LastCache<T>,
    d_out: &Array1<T>,
    layer: &MixerLayer<T>,
    g: &mut MixerLayer<T>,
) -> Array2<T> {
    let scale = scale_for(layer);
    let n = c.input.nrows();
    outer_acc(&mut g.ff_out, c.act.view(), d_out.view());
    let mut d_pre = layer.ff_out.dot(d_out);
    d_pre.zip_mut_with(&c.pre, |d, &x| *d = *d * gelu_grad(x));
    outer_acc(&mut g.ff_in, c.mid.view(), d_pre.view());
    let d_mid = d_out + &layer.ff_in.dot(&d_pre);

    outer_acc(&mut g.wo, c.ctx.view(), d_mid.view());
    let d_ctx = layer.wo.dot(&d_mid);
    let mut d_z = c.v.dot(&d_ctx);
    let d_v = c
        .attn
        .view()
        .insert_axis(Axis(1))
        .dot(&d_ctx.view().insert_axis(Axis(0)));
    let dot = d_z.dot(&c.attn);
    d_z.zip_mut_with(&c.attn, |d, &p| *d = p * (*d - dot) * scale);
    let d_q = c.k.t().dot(&d_z);
    let d_k = d_z
        .view()
        .insert_axis(Axis(1))
        .dot(&c.q.view().insert_axis(Axis(0)));

    let x = c.input.row(n - 1);
    outer_acc(&mut g.wq, x, d_q.view());
    gemm_acc(&mut g.wk, c.input.t(), d_k.view());
    gemm_acc(&mut g.wv, c.input.t(), d_v.view());

    let mut d_in = d_k.dot(&layer.wk.t());
    gemm_acc(&mut d_in, d_v.view(), layer.wv.t());
    let mut last = d_in.row_mut(n - 1);
    last.scaled_add(T::one(), &layer.wq.dot(&d_q));
    last.scaled_add(T::one(), &d_mid);
    d_in
}

/// Runs every mixer layer over `seq` and returns the final position's
/// hidden state.
pub(crate) fn forward<T: Scalar>(
    seq: Array2<T>,
    params: &EncoderParams<T>,
) -> (Array1<T>, MixerCache<T>) {
    let (last_layer, full_layers) = params
        .layers
        .split_last()
        .expect("at least one mixer layer");
    let mut hidden = seq;
    let mut full = Vec::with_capacity(full_layers.len());
    for layer in full_layers {
        let (next, cache) = full_forward(hidden, layer);
        full.push(cache);
        hidden = next;
    }
    let (pooled, last) = last_forward(hidden, last_layer);
    (pooled, MixerCache { full, last })
}

/// Accumulates mixer gradients into `grads` and returns the gradient with
/// respect to the input sequence.
pub(crate) fn backward<T: Scalar>(
    cache: &MixerCache<T>,
    d_pooled: &Array1<T>,
    params: &EncoderParams<T>,
    grads: &mut EncoderParams<T>,
) -> Array2<T> {
    let n = params.layers.len();
    let mut d = last_backward(
        &cache.last,
        d_pooled,
        &params.layers[n - 1],
        &mut grads.layers[n - 1],
    );
    for (i, c) in cache.full.iter().enumerate().rev() {
        d = full_backward(c, d, &params.layers[i], &mut grads.layers[i]);
    }
    d
}
