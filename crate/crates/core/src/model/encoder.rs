//! Forward and backward passes of the pre-layer-norm self-attention
//! encoder. Every intermediate needed by the backward pass is kept in
//! [`EncodeCache`]; dropout masks are sampled in training mode only, so
//! evaluation is deterministic.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EncoderParams, LayerNormParams};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

struct LnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head row-softmax attention weights, each n x n.
    attn: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    concat: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln2: LnCache,
    f: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

/// Intermediates of one forward pass, consumed by [`encode_backward`].
pub struct EncodeCache {
    token_ids: Vec<u32>,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut x_hat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for (j, v) in row.iter().enumerate() {
            x_hat[[i, j]] = (v - mean) * istd;
        }
    }
    let y = &x_hat * &ln.gamma + &ln.beta;
    (y, LnCache { x_hat, inv_std })
}

/// Standard layer-norm backward; returns dx and accumulates dgamma/dbeta.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNormParams,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let n = dy.nrows();
    let d = dy.ncols();
    *dgamma += &(dy * &cache.x_hat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dx_hat = dy * &ln.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..n {
        let dxh = dx_hat.row(i);
        let xh = cache.x_hat.row(i);
        let sum_dxh: f64 = dxh.sum();
        let sum_dxh_xh: f64 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        let istd = cache.inv_std[i];
        for j in 0..d {
            dx[[i, j]] = istd / d as f64
                * (d as f64 * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn dropout_mask(
    rng: &mut ChaCha8Rng,
    p: f64,
    shape: (usize, usize),
) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Runs the encoder over `token_ids`, returning the n x d contextual
/// vectors and the cache for the backward pass. `rng` enables dropout;
/// pass `None` for deterministic evaluation.
pub fn encode(
    params: &EncoderParams,
    token_ids: &[u32],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, EncodeCache)> {
    let cfg = &params.config;
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::Shape("cannot encode an empty token sequence".into()));
    }
    if n > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence length {n} exceeds max_len {}",
            cfg.max_len
        )));
    }
    for &id in token_ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Shape(format!(
                "token id {id} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }

    let d = cfg.d;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let p = cfg.dropout;
    let dropping = p > 0.0 && rng.is_some();

    let mut x = Array2::zeros((n, d));
    for (i, &id) in token_ids.iter().enumerate() {
        let row = &params.tok_emb.row(id as usize) + &params.pos_emb.row(i);
        x.row_mut(i).assign(&row);
    }
    let emb_drop = dropping.then(|| dropout_mask(rng.as_mut().unwrap(), p, (n, d)));
    if let Some(mask) = &emb_drop {
        x *= mask;
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let x_in = x.clone();
        let (a, ln1) = layer_norm(&x_in, &layer.ln1);
        let q = a.dot(&layer.attn.wq) + &layer.attn.bq;
        let k = a.dot(&layer.attn.wk) + &layer.attn.bk;
        let v = a.dot(&layer.attn.wv) + &layer.attn.bv;

        let mut attn = Vec::with_capacity(n_heads);
        let mut concat = Array2::zeros((n, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let oh = scores.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            attn.push(scores);
        }
        let mut attn_out = concat.dot(&layer.attn.wo) + &layer.attn.bo;
        let attn_drop = dropping.then(|| dropout_mask(rng.as_mut().unwrap(), p, (n, d)));
        if let Some(mask) = &attn_drop {
            attn_out *= mask;
        }
        let x_mid = &x_in + &attn_out;

        let (f, ln2) = layer_norm(&x_mid, &layer.ln2);
        let z1 = f.dot(&layer.ffn.w1) + &layer.ffn.b1;
        let h1 = z1.mapv(gelu);
        let mut ffn_out = h1.dot(&layer.ffn.w2) + &layer.ffn.b2;
        let ffn_drop = dropping.then(|| dropout_mask(rng.as_mut().unwrap(), p, (n, d)));
        if let Some(mask) = &ffn_drop {
            ffn_out *= mask;
        }
        x = &x_mid + &ffn_out;

        layer_caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            attn,
            concat,
            attn_drop,
            ln2,
            f,
            z1,
            h1,
            ffn_drop,
        });
    }

    let (c, final_ln) = layer_norm(&x, &params.final_ln);
    let cache = EncodeCache {
        token_ids: token_ids.to_vec(),
        emb_drop,
        layers: layer_caches,
        final_ln,
    };
    Ok((c, cache))
}

/// Backpropagates `d_c` (gradient w.r.t. the contextual vectors) through
/// the cached forward pass, accumulating into `grads`.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    d_c: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    let cfg = &params.config;
    let n = cache.token_ids.len();
    let d = cfg.d;
    if d_c.dim() != (n, d) {
        return Err(Error::Shape(format!(
            "output gradient shape {:?} does not match ({n}, {d})",
            d_c.dim()
        )));
    }
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dx = layer_norm_backward(
        d_c,
        &cache.final_ln,
        &params.final_ln,
        &mut grads.final_ln.gamma,
        &mut grads.final_ln.beta,
    );

    for (layer, lc, lg) in itertools_rev(&params.layers, &cache.layers, &mut grads.layers) {
        // FFN block: x = x_mid + drop(gelu(f w1 + b1) w2 + b2)
        let mut d_ffn_out = dx.clone();
        if let Some(mask) = &lc.ffn_drop {
            d_ffn_out *= mask;
        }
        lg.ffn.b2 += &d_ffn_out.sum_axis(Axis(0));
        lg.ffn.w2 += &lc.h1.t().dot(&d_ffn_out);
        let dh1 = d_ffn_out.dot(&layer.ffn.w2.t());
        let dz1 = &dh1 * &lc.z1.mapv(gelu_grad);
        lg.ffn.b1 += &dz1.sum_axis(Axis(0));
        lg.ffn.w1 += &lc.f.t().dot(&dz1);
        let df = dz1.dot(&layer.ffn.w1.t());
        let d_x_mid_from_ln =
            layer_norm_backward(&df, &lc.ln2, &layer.ln2, &mut lg.ln2.gamma, &mut lg.ln2.beta);
        let d_x_mid = &dx + &d_x_mid_from_ln;

        // Attention block: x_mid = x_in + drop(concat wo + bo)
        let mut d_attn_out = d_x_mid.clone();
        if let Some(mask) = &lc.attn_drop {
            d_attn_out *= mask;
        }
        lg.attn.bo += &d_attn_out.sum_axis(Axis(0));
        lg.attn.wo += &lc.concat.t().dot(&d_attn_out);
        let d_concat = d_attn_out.dot(&layer.attn.wo.t());

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = d_concat.slice(cols);
            let a_h = &lc.attn[h];
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);

            let d_a = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&a_h.t().dot(&doh));
            // Softmax backward per row.
            let mut d_scores = Array2::zeros((n, n));
            for i in 0..n {
                let ai = a_h.row(i);
                let dai = d_a.row(i);
                let dot: f64 = ai.iter().zip(dai.iter()).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d_scores[[i, j]] = ai[j] * (dai[j] - dot);
                }
            }
            d_scores *= scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&kh));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&qh));
        }

        lg.attn.bq += &dq.sum_axis(Axis(0));
        lg.attn.wq += &lc.a.t().dot(&dq);
        lg.attn.bk += &dk.sum_axis(Axis(0));
        lg.attn.wk += &lc.a.t().dot(&dk);
        lg.attn.bv += &dv.sum_axis(Axis(0));
        lg.attn.wv += &lc.a.t().dot(&dv);

        let da = dq.dot(&layer.attn.wq.t()) + dk.dot(&layer.attn.wk.t()) + dv.dot(&layer.attn.wv.t());
        let d_x_in_from_ln =
            layer_norm_backward(&da, &lc.ln1, &layer.ln1, &mut lg.ln1.gamma, &mut lg.ln1.beta);
        dx = &d_x_mid + &d_x_in_from_ln;
    }

    if let Some(mask) = &cache.emb_drop {
        dx *= mask;
    }
    for (i, &id) in cache.token_ids.iter().enumerate() {
        let row = dx.row(i);
        let mut tok = grads.tok_emb.row_mut(id as usize);
        tok += &row;
        let mut pos = grads.pos_emb.row_mut(i);
        pos += &row;
    }
    Ok(())
}

/// Reverse lockstep iteration over layers, caches and gradient slots.
fn itertools_rev<'a>(
    layers: &'a [super::LayerParams],
    caches: &'a [LayerCache],
    grads: &'a mut [super::LayerParams],
) -> impl Iterator<Item = (&'a super::LayerParams, &'a LayerCache, &'a mut super::LayerParams)> {
    layers
        .iter()
        .rev()
        .zip(caches.iter().rev())
        .zip(grads.iter_mut().rev())
        .map(|((l, c), g)| (l, c, g))
}
