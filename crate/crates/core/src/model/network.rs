//! Pre-norm transformer over context and query tokens with hand-written
//! backpropagation.
//!
//! Context tokens attend to all context tokens; query tokens attend to
//! context tokens only. Keys and values are therefore computed from context
//! rows alone, and a query never influences any other token.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{lit, LayerParams, ModelParameters, Scalar};
use crate::episode::Episode;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Token matrix: context rows first, then query rows.
pub(crate) fn tokens<T: Scalar>(p: &ModelParameters<T>, ep: &Episode) -> Result<Array2<T>> {
    let d_max = p.config.d_max;
    if ep.d_max != d_max {
        return Err(Error::Contract(format!(
            "episode has {} covariate slots, model expects {d_max}",
            ep.d_max
        )));
    }
    let c = ep.context_len();
    let q = ep.query_len();
    if c == 0 || q == 0 {
        return Err(Error::Contract("episode needs context and query rows".into()));
    }
    if ep.context_x.len() != c * d_max
        || ep.context_y.len() != c
        || ep.query_x.len() != q * d_max
        || ep.targets.len() != q
    {
        return Err(Error::Contract("episode tensors have inconsistent lengths".into()));
    }
    let width = p.config.input_dim();
    let mut x = Array2::<T>::zeros((c + q, width));
    let conv = |v: f32| T::from(v).expect("f32 fits");
    for r in 0..c {
        let mut row = x.row_mut(r);
        for s in 0..d_max {
            row[s] = conv(ep.context_x[r * d_max + s]);
        }
        row[d_max] = conv(ep.context_t[r]);
        row[d_max + 1] = conv(ep.context_y[r]);
    }
    for r in 0..q {
        let mut row = x.row_mut(c + r);
        for s in 0..d_max {
            row[s] = conv(ep.query_x[r * d_max + s]);
        }
        row[d_max + 2] = T::one();
    }
    Ok(x)
}

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

fn layer_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>, bias: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = x.ncols();
    let inv_d = lit::<T>(1.0 / d as f64);
    let eps = lit::<T>(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::<T>::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |a, &v| a + v * v) * inv_d;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols();
    let inv_d = lit::<T>(1.0 / d as f64);
    let dxhat = dy * gain;
    let mut dx = Array2::<T>::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let sum_g = g.sum();
        let sum_gx = g.iter().zip(xh.iter()).fold(T::zero(), |a, (&u, &v)| a + u * v);
        let rs = cache.rstd[r];
        for k in 0..d {
            dx[[r, k]] = rs * (g[k] - inv_d * sum_g - xh[k] * inv_d * sum_gx);
        }
    }
    dx
}

fn gelu<T: Scalar>(u: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * a * u * u)
}

fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LnCache<T>,
    b: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

struct ForwardCache<T> {
    tokens: Array2<T>,
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    hf: Array2<T>,
    context: usize,
}

fn layer_forward<T: Scalar>(
    l: &LayerParams<T>,
    x: Array2<T>,
    context: usize,
    heads: usize,
) -> (Array2<T>, LayerCache<T>) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let (a, ln1) = layer_norm(&x, &l.ln1_gain, &l.ln1_bias);
    let ac = a.slice(s![..context, ..]);
    let q = a.dot(&l.wq) + &l.bq;
    let k = ac.dot(&l.wk) + &l.bk;
    let v = ac.dot(&l.wv) + &l.bv;
    let mut o = Array2::<T>::zeros((x.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let h2 = &x + &(o.dot(&l.wo) + &l.bo);
    let (b, ln2) = layer_norm(&h2, &l.ln2_gain, &l.ln2_bias);
    let u = b.dot(&l.w1) + &l.b1;
    let g = u.mapv(gelu);
    let out = &h2 + &(g.dot(&l.w2) + &l.b2);
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        o,
        ln2,
        b,
        u,
        g,
    };
    (out, cache)
}

fn forward_cached<T: Scalar>(p: &ModelParameters<T>, ep: &Episode) -> Result<(Array1<T>, ForwardCache<T>)> {
    let x = tokens(p, ep)?;
    let context = ep.context_len();
    let mut h = x.dot(&p.embed_w) + &p.embed_b;
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (next, cache) = layer_forward(l, h, context, p.config.n_heads);
        layers.push(cache);
        h = next;
    }
    let (hf, final_ln) = layer_norm(&h, &p.final_gain, &p.final_bias);
    let preds = hf.slice(s![context.., ..]).dot(&p.head_w) + p.head_b[0];
    Ok((
        preds,
        ForwardCache {
            tokens: x,
            layers,
            final_ln,
            hf,
            context,
        },
    ))
}

/// Predicted ITE (outcome-standardized units) for each query row.
pub fn forward<T: Scalar>(p: &ModelParameters<T>, ep: &Episode) -> Result<Vec<T>> {
    Ok(forward_cached(p, ep)?.0.to_vec())
}

/// Mean squared error.
pub fn loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Contract("predictions and targets differ in length".into()));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / predictions.len() as f64)
}

fn accumulate_linear<T: Scalar>(
    input: ArrayView2<T>,
    dout: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) {
    *dw += &input.t().dot(dout);
    *db += &dout.sum_axis(Axis(0));
}

fn layer_backward<T: Scalar>(
    l: &LayerParams<T>,
    g: &mut LayerParams<T>,
    cache: &LayerCache<T>,
    dout: Array2<T>,
    context: usize,
    heads: usize,
) -> Array2<T> {
    // Feed-forward block.
    let mut dh2 = dout.clone();
    accumulate_linear(cache.g.view(), &dout, &mut g.w2, &mut g.b2);
    let dg = dout.dot(&l.w2.t());
    let du = &dg * &cache.u.mapv(gelu_grad);
    accumulate_linear(cache.b.view(), &du, &mut g.w1, &mut g.b1);
    let db = du.dot(&l.w1.t());
    dh2 += &layer_norm_backward(&db, &cache.ln2, &l.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

    // Attention block.
    let mut dx = dh2.clone();
    accumulate_linear(cache.o.view(), &dh2, &mut g.wo, &mut g.bo);
    let d_o = dh2.dot(&l.wo.t());
    let d = d_o.ncols();
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::<T>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<T>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<T>::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let doh = d_o.slice(cols);
        let dp = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let total = row.sum();
            for (v, &pv) in row.iter_mut().zip(prow.iter()) {
                *v = (*v - pv * total) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let ac = cache.a.slice(s![..context, ..]);
    accumulate_linear(cache.a.view(), &dq, &mut g.wq, &mut g.bq);
    accumulate_linear(ac, &dk, &mut g.wk, &mut g.bk);
    accumulate_linear(ac, &dv, &mut g.wv, &mut g.bv);
    let mut da = dq.dot(&l.wq.t());
    {
        let mut dac = da.slice_mut(s![..context, ..]);
        dac += &dk.dot(&l.wk.t());
        dac += &dv.dot(&l.wv.t());
    }
    dx += &layer_norm_backward(&da, &cache.ln1, &l.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dx
}

/// Loss of one episode and its gradient, with the loss scaled by `weight`.
pub(crate) fn episode_loss_and_grad<T: Scalar>(
    p: &ModelParameters<T>,
    ep: &Episode,
    weight: T,
) -> Result<(T, ModelParameters<T>)> {
    let (preds, cache) = forward_cached(p, ep)?;
    let q = preds.len();
    let targets: Array1<T> = ep.targets.iter().map(|&t| T::from(t).unwrap()).collect();
    let diff = &preds - &targets;
    let loss = diff.iter().fold(T::zero(), |a, &v| a + v * v) / lit::<T>(q as f64);
    let dpred = diff * (lit::<T>(2.0 / q as f64) * weight);

    let mut g = ModelParameters::<T>::zeros(&p.config);
    let hq = cache.hf.slice(s![cache.context.., ..]);
    g.head_w = hq.t().dot(&dpred);
    g.head_b[0] = dpred.sum();
    let mut dhf = Array2::<T>::zeros(cache.hf.raw_dim());
    for (r, &dp) in dpred.iter().enumerate() {
        dhf.row_mut(cache.context + r).assign(&(&p.head_w * dp));
    }
    let mut dh = layer_norm_backward(&dhf, &cache.final_ln, &p.final_gain, &mut g.final_gain, &mut g.final_bias);
    for (i, l) in p.layers.iter().enumerate().rev() {
        dh = layer_backward(l, &mut g.layers[i], &cache.layers[i], dh, cache.context, p.config.n_heads);
    }
    accumulate_linear(cache.tokens.view(), &dh, &mut g.embed_w, &mut g.embed_b);
    Ok((loss, g))
}

/// Mean per-episode MSE over a batch and its gradient. Episodes are
/// processed in parallel and reduced in index order.
pub fn loss_and_grad<T: Scalar>(p: &ModelParameters<T>, batch: &[Episode]) -> Result<(f64, ModelParameters<T>)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if !p.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let weight = lit::<T>(1.0 / batch.len() as f64);
    let parts: Vec<(T, ModelParameters<T>)> = batch
        .par_iter()
        .map(|ep| episode_loss_and_grad(p, ep, weight))
        .collect::<Result<_>>()?;
    let mut total = ModelParameters::<T>::zeros(&p.config);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l.to_f64().unwrap_or(f64::NAN);
        total.accumulate(g);
    }
    let loss = loss / batch.len() as f64;
    if !loss.is_finite() || !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, total))
}

/// Mean batch loss without gradients.
pub fn batch_loss<T: Scalar>(p: &ModelParameters<T>, batch: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for ep in batch {
        let preds: Vec<f64> = forward(p, ep)?.iter().map(|v| v.to_f64().unwrap()).collect();
        let targets: Vec<f64> = ep.targets.iter().map(|&t| t as f64).collect();
        total += loss(&preds, &targets)?;
    }
    Ok(total / batch.len().max(1) as f64)
}
