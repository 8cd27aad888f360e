//! Pre-norm transformer encoder with hand-written backward passes.
//!
//! Each sequence runs on its unpadded prefix, so `[PAD]` positions take no
//! part in attention and their hidden states are zero.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{EncoderParams, LayerParams};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, NormCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            xhat[[r, c]] = (row[c] - mean) * is;
        }
    }
    let y = &xhat * gain + bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns dx; accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, d) = dy.dim();
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros((rows, d));
    for r in 0..rows {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / d as f64;
        let mean_gx = g.dot(&xh) / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx[[r, c]] = is * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Row-wise softmax in place.
fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) struct LayerCache {
    attn_norm: NormCache,
    attn_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    ffn_norm: NormCache,
    ffn_in: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Everything the backward pass needs for one sequence.
pub struct SequenceCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

fn layer_forward(x: &Array2<f64>, p: &LayerParams, heads: usize) -> (Array2<f64>, LayerCache) {
    let (len, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (attn_in, attn_norm) = layer_norm(x, &p.attn_norm_gain, &p.attn_norm_bias);
    let q = linear(&attn_in, &p.wq, &p.bq);
    let k = linear(&attn_in, &p.wk, &p.bk);
    let v = linear(&attn_in, &p.wv, &p.bv);
    let mut context = Array2::zeros((len, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let x_mid = x + &linear(&context, &p.wo, &p.bo);
    let (ffn_in, ffn_norm) = layer_norm(&x_mid, &p.ffn_norm_gain, &p.ffn_norm_bias);
    let pre_act = linear(&ffn_in, &p.w1, &p.b1);
    let act = pre_act.mapv(gelu);
    let out = &x_mid + &linear(&act, &p.w2, &p.b2);
    let cache = LayerCache { attn_norm, attn_in, q, k, v, probs, context, ffn_norm, ffn_in, pre_act, act };
    (out, cache)
}

fn layer_backward(
    dout: Array2<f64>,
    cache: &LayerCache,
    p: &LayerParams,
    g: &mut LayerParams,
    heads: usize,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward block: out = x_mid + gelu(ffn_in W1 + b1) W2 + b2
    g.w2 += &cache.act.t().dot(&dout);
    g.b2 += &dout.sum_axis(Axis(0));
    let dact = dout.dot(&p.w2.t());
    let mut dpre = dact;
    dpre.zip_mut_with(&cache.pre_act, |dg, &u| *dg *= gelu_grad(u));
    g.w1 += &cache.ffn_in.t().dot(&dpre);
    g.b1 += &dpre.sum_axis(Axis(0));
    let dffn_in = dpre.dot(&p.w1.t());
    let mut dx_mid = dout;
    dx_mid += &layer_norm_backward(
        &dffn_in,
        &cache.ffn_norm,
        &p.ffn_norm_gain,
        &mut g.ffn_norm_gain,
        &mut g.ffn_norm_bias,
    );

    // attention block: x_mid = x + context Wo + bo
    g.wo += &cache.context.t().dot(&dx_mid);
    g.bo += &dx_mid.sum_axis(Axis(0));
    let dcontext = dx_mid.dot(&p.wo.t());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &cache.probs[h];
        let dctx_h = dcontext.slice(cols);
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let dprobs = dctx_h.dot(&cache.v.slice(cols).t());
        let mut dscores = dprobs;
        for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let inner = drow.dot(&prow);
            drow.zip_mut_with(&prow, |ds, &pr| *ds = pr * (*ds - inner) * scale);
        }
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    g.wq += &cache.attn_in.t().dot(&dq);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &cache.attn_in.t().dot(&dk);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &cache.attn_in.t().dot(&dv);
    g.bv += &dv.sum_axis(Axis(0));
    let dattn_in = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    let mut dx = dx_mid;
    dx += &layer_norm_backward(
        &dattn_in,
        &cache.attn_norm,
        &p.attn_norm_gain,
        &mut g.attn_norm_gain,
        &mut g.attn_norm_bias,
    );
    dx
}

/// Final hidden states (`len × d`) of one unpadded sequence, plus its cache.
/// Callers validate ids and length.
pub fn forward_sequence(ids: &[u32], params: &EncoderParams) -> (Array2<f64>, SequenceCache) {
    let d = params.config.hidden_dim;
    let len = ids.len();
    let mut x = Array2::zeros((len, d));
    for (pos, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(pos);
        row.assign(&params.token_embedding.row(id as usize));
        row += &params.position_embedding.row(pos);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (next, cache) = layer_forward(&x, lp, params.config.heads);
        layers.push(cache);
        x = next;
    }
    let (hidden, final_norm) = layer_norm(&x, &params.final_norm_gain, &params.final_norm_bias);
    (hidden, SequenceCache { ids: ids.to_vec(), layers, final_norm })
}

/// Backpropagates `d_hidden` (gradient w.r.t. final hidden states) into `grads`.
pub fn backward_sequence(
    d_hidden: &Array2<f64>,
    cache: &SequenceCache,
    params: &EncoderParams,
    grads: &mut EncoderParams,
) {
    let mut dx = layer_norm_backward(
        d_hidden,
        &cache.final_norm,
        &params.final_norm_gain,
        &mut grads.final_norm_gain,
        &mut grads.final_norm_bias,
    );
    for l in (0..params.layers.len()).rev() {
        dx = layer_backward(dx, &cache.layers[l], &params.layers[l], &mut grads.layers[l], params.config.heads);
    }
    for (pos, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(pos);
        let mut t = grads.token_embedding.row_mut(id as usize);
        t += &row;
        let mut p = grads.position_embedding.row_mut(pos);
        p += &row;
    }
}

/// Tied-weight vocabulary logits for selected rows of `hidden`.
pub fn mlm_logits_rows(hidden: &Array2<f64>, positions: &[usize], params: &EncoderParams) -> Array2<f64> {
    let rows = hidden.select(Axis(0), positions);
    rows.dot(&params.token_embedding.t()) + &params.mlm_bias
}

/// Backward of [`mlm_logits_rows`]; returns the gradient w.r.t. `hidden`.
pub fn mlm_logits_backward(
    dlogits: &Array2<f64>,
    hidden: &Array2<f64>,
    positions: &[usize],
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> Array2<f64> {
    let rows = hidden.select(Axis(0), positions);
    grads.token_embedding += &dlogits.t().dot(&rows);
    grads.mlm_bias += &dlogits.sum_axis(Axis(0));
    let drows = dlogits.dot(&params.token_embedding);
    let mut dhidden = Array2::zeros(hidden.dim());
    for (k, &pos) in positions.iter().enumerate() {
        let mut r = dhidden.row_mut(pos);
        r += &drows.row(k);
    }
    dhidden
}

/// Projected pair embeddings `Z = H P` (or `H` itself without projections).
pub fn pair_embeddings(h: ArrayView2<'_, f64>, params: &EncoderParams, task: usize) -> Array2<f64> {
    if params.config.project_pairs {
        h.dot(&params.task_projection[task])
    } else {
        h.to_owned()
    }
}

/// Backward of `S = Z Zᵀ` with `Z = H P`. Returns dH and accumulates dP.
pub fn pairwise_backward(
    ds: &Array2<f64>,
    h: ArrayView2<'_, f64>,
    params: &EncoderParams,
    task: usize,
    grads: &mut EncoderParams,
) -> Array2<f64> {
    let z = pair_embeddings(h, params, task);
    let dz = (ds + &ds.t()).dot(&z);
    if params.config.project_pairs {
        grads.task_projection[task] += &h.t().dot(&dz);
        dz.dot(&params.task_projection[task].t())
    } else {
        dz
    }
}
