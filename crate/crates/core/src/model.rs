//! Minimal autoregressive transformer realizing a parameterized kernel:
//! pre-norm, single-head causal attention, 4x GELU MLP, residual
//! connections, untied output projection. All math in f64, trained by
//! cross-entropy with hand-written reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{Distribution, SOFTMAX_TOL};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::vocab::{Context, Vocabulary};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Fixed at 1 in v1.
    pub n_heads: usize,
    /// Max context window L. The model conditions on the last L tokens;
    /// a leading PAD marks the sequence start when the window is short.
    pub context_len: usize,
    pub vocab_size: usize,
    pub pad_id: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads != 1 {
            return Err(Error::InvalidConfig("n_heads must be 1".into()));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.context_len == 0 {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig("d_model not divisible by n_heads".into()));
        }
        if self.pad_id >= self.vocab_size {
            return Err(Error::InvalidConfig("pad_id out of range".into()));
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>, // [d x d] row-major, y = W x
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>, // [4d x d]
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // [d x 4d]
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub tok_emb: Vec<f64>, // [V x d]
    pub pos_emb: Vec<f64>, // [L x d]
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub w_out: Vec<f64>, // [V x d], logits_v = w_out[v] . h
}

impl Parameters {
    /// Gaussian init scaled by `init_scale`; norm gains 1, biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_model;
        let mut gauss = |n: usize| -> Vec<f64> {
            (0..n).map(|_| config.init_scale * sample_gauss(&mut rng)).collect()
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: gauss(d * d),
                wk: gauss(d * d),
                wv: gauss(d * d),
                wo: gauss(d * d),
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: gauss(config.d_ff() * d),
                b1: vec![0.0; config.d_ff()],
                w2: gauss(d * config.d_ff()),
                b2: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            tok_emb: gauss(config.vocab_size * d),
            pos_emb: gauss(config.context_len * d),
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            w_out: gauss(config.vocab_size * d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &l.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &l.ln1_b));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ln2_g"), &l.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &l.ln2_b));
            out.push((format!("layer{i}.w1"), &l.w1));
            out.push((format!("layer{i}.b1"), &l.b1));
            out.push((format!("layer{i}.w2"), &l.w2));
            out.push((format!("layer{i}.b2"), &l.b2));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &mut l.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &mut l.ln1_b));
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.ln2_g"), &mut l.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &mut l.ln2_b));
            out.push((format!("layer{i}.w1"), &mut l.w1));
            out.push((format!("layer{i}.b1"), &mut l.b1));
            out.push((format!("layer{i}.w2"), &mut l.w2));
            out.push((format!("layer{i}.b2"), &mut l.b2));
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut off = idx;
        for (_, t) in self.tensors() {
            if off < t.len() {
                return t[off];
            }
            off -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn set_flat(&mut self, idx: usize, value: f64) {
        let mut off = idx;
        for (_, t) in self.tensors_mut() {
            if off < t.len() {
                t[off] = value;
                return;
            }
            off -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn sample_gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// y = W x, W is [rows x cols] row-major.
fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        y[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    y
}

// dW += dy (x)outer, dx += W^T dy.
fn matvec_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    dx: &mut [f64],
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * x[c];
            dx[c] += g * row[c];
        }
    }
}

struct LnCache {
    xhat: Vec<Vec<f64>>,
    rstd: Vec<f64>,
    /// g * xhat + b — the value actually fed to the next matmul.
    out: Vec<Vec<f64>>,
}

fn layernorm(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> LnCache {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat_all = Vec::with_capacity(x.len());
    let mut rstd_all = Vec::with_capacity(x.len());
    for row in x {
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
        out.push((0..d).map(|i| g[i] * xhat[i] + b[i]).collect());
        xhat_all.push(xhat);
        rstd_all.push(rstd);
    }
    LnCache { xhat: xhat_all, rstd: rstd_all, out }
}

fn layernorm_backward(
    cache: &LnCache,
    g: &[f64],
    dy: &[Vec<f64>],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [Vec<f64>],
) {
    let d = g.len();
    for t in 0..cache.xhat.len() {
        let xhat = &cache.xhat[t];
        let rstd = cache.rstd[t];
        let mut dxhat = vec![0.0; d];
        for i in 0..d {
            dg[i] += dy[t][i] * xhat[i];
            db[i] += dy[t][i];
            dxhat[i] = dy[t][i] * g[i];
        }
        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat: f64 =
            dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dx[t][i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_A: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_A * (u + GELU_B * u * u * u)).tanh())
}

fn gelu_deriv(u: f64) -> f64 {
    let s = GELU_A * (u + GELU_B * u * u * u);
    let t = s.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * u * u)
}

struct LayerCache {
    ln1: LnCache,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    att: Vec<Vec<f64>>, // att[t][j], j <= t
    mix: Vec<Vec<f64>>, // attention-weighted value sum, pre-Wo
    ln2: LnCache,
    u: Vec<Vec<f64>>, // pre-GELU
    gu: Vec<Vec<f64>>, // post-GELU
}

struct ForwardCache {
    input: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    probs: Vec<Vec<f64>>, // per position, PAD masked
}

/// Causal single-head forward over the whole input, returning per-position
/// next-token probabilities.
fn forward_all(params: &Parameters, config: &ModelConfig, input: &[usize]) -> ForwardCache {
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let n = input.len();
    let mut x: Vec<Vec<f64>> = input
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d).map(|i| params.tok_emb[id * d + i] + params.pos_emb[t * d + i]).collect()
        })
        .collect();

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let ln1 = layernorm(&x, &layer.ln1_g, &layer.ln1_b);
        let q: Vec<Vec<f64>> = ln1.out.iter().map(|h| matvec(&layer.wq, h, d, d)).collect();
        let k: Vec<Vec<f64>> = ln1.out.iter().map(|h| matvec(&layer.wk, h, d, d)).collect();
        let v: Vec<Vec<f64>> = ln1.out.iter().map(|h| matvec(&layer.wv, h, d, d)).collect();
        let mut att = Vec::with_capacity(n);
        let mut mix = Vec::with_capacity(n);
        for t in 0..n {
            let scores: Vec<f64> = (0..=t)
                .map(|j| q[t].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
            let mut m = vec![0.0; d];
            for (j, w) in weights.iter().enumerate() {
                for i in 0..d {
                    m[i] += w * v[j][i];
                }
            }
            att.push(weights);
            mix.push(m);
        }
        for t in 0..n {
            let o = matvec(&layer.wo, &mix[t], d, d);
            for i in 0..d {
                x[t][i] += o[i];
            }
        }
        let ln2 = layernorm(&x, &layer.ln2_g, &layer.ln2_b);
        let mut u_all = Vec::with_capacity(n);
        let mut gu_all = Vec::with_capacity(n);
        for t in 0..n {
            let mut u = matvec(&layer.w1, &ln2.out[t], config.d_ff(), d);
            for (ui, bi) in u.iter_mut().zip(&layer.b1) {
                *ui += bi;
            }
            let gu: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut y = matvec(&layer.w2, &gu, d, config.d_ff());
            for (yi, bi) in y.iter_mut().zip(&layer.b2) {
                *yi += bi;
            }
            for i in 0..d {
                x[t][i] += y[i];
            }
            u_all.push(u);
            gu_all.push(gu);
        }
        layer_caches.push(LayerCache { ln1, q, k, v, att, mix, ln2, u: u_all, gu: gu_all });
    }

    let lnf = layernorm(&x, &params.lnf_g, &params.lnf_b);
    let probs = lnf
        .out
        .iter()
        .map(|h| {
            let mut logits = vec![0.0; config.vocab_size];
            for vtok in 0..config.vocab_size {
                logits[vtok] =
                    params.w_out[vtok * d..(vtok + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum();
            }
            masked_softmax(&logits, config.pad_id)
        })
        .collect();

    ForwardCache { input: input.to_vec(), layers: layer_caches, lnf, probs }
}

fn masked_softmax(logits: &[f64], pad: usize) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pad)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if i == pad { 0.0 } else { (l - max).exp() })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.iter_mut().for_each(|e| *e /= total);
    exps
}

/// Model input for a context: a leading PAD marks sequence start, the
/// window keeps the last `context_len` tokens.
fn model_input(ctx: &[usize], config: &ModelConfig) -> Vec<usize> {
    let mut input = Vec::with_capacity(ctx.len() + 1);
    input.push(config.pad_id);
    input.extend_from_slice(ctx);
    let start = input.len().saturating_sub(config.context_len);
    input[start..].to_vec()
}

/// Next-token distribution for a context.
pub fn forward(params: &Parameters, config: &ModelConfig, ctx: &Context) -> Result<Distribution> {
    if ctx.is_empty() {
        return Err(Error::EmptyContext);
    }
    forward_padded(params, config, ctx.ids())
}

fn forward_padded(params: &Parameters, config: &ModelConfig, ctx: &[usize]) -> Result<Distribution> {
    for &id in ctx {
        if id >= config.vocab_size {
            return Err(Error::TokenOutOfRange { id, size: config.vocab_size });
        }
    }
    let input = model_input(ctx, config);
    let cache = forward_all(params, config, &input);
    Distribution::from_probs(cache.probs.last().expect("non-empty input").clone(), SOFTMAX_TOL)
}

/// Per-sequence supervision: model input and aligned targets, truncated
/// from the left to the context window.
fn supervision(seq: &[usize], config: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(seq.len());
    input.push(config.pad_id);
    input.extend_from_slice(&seq[..seq.len() - 1]);
    let mut targets = seq.to_vec();
    if input.len() > config.context_len {
        let cut = input.len() - config.context_len;
        input.drain(..cut);
        targets.drain(..cut);
    }
    (input, targets)
}

fn check_batch(batch: &[Vec<usize>], config: &ModelConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for seq in batch {
        if seq.is_empty() {
            return Err(Error::EmptyInput("sequence".into()));
        }
        for &id in seq {
            if id >= config.vocab_size {
                return Err(Error::TokenOutOfRange { id, size: config.vocab_size });
            }
            if id == config.pad_id {
                return Err(Error::PadInSequence);
            }
        }
    }
    Ok(())
}

/// Mean cross-entropy over all supervised positions of the batch, nats.
pub fn loss(params: &Parameters, config: &ModelConfig, batch: &[Vec<usize>]) -> Result<f64> {
    check_batch(batch, config)?;
    let mut total = 0.0;
    let mut positions = 0usize;
    for seq in batch {
        let (input, targets) = supervision(seq, config);
        let cache = forward_all(params, config, &input);
        for (t, &target) in targets.iter().enumerate() {
            total -= cache.probs[t][target].max(f64::MIN_POSITIVE).ln();
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

/// Loss together with its exact analytic gradient.
pub fn grad(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[Vec<usize>],
) -> Result<(f64, Parameters)> {
    check_batch(batch, config)?;
    let mut grads = params.zeros_like();
    let mut total_loss = 0.0;
    let mut positions = 0usize;
    for seq in batch {
        let (input, targets) = supervision(seq, config);
        let cache = forward_all(params, config, &input);
        for (t, &target) in targets.iter().enumerate() {
            total_loss -= cache.probs[t][target].max(f64::MIN_POSITIVE).ln();
        }
        positions += targets.len();
        backward_sequence(params, config, &cache, &targets, &mut grads);
    }
    let scale = 1.0 / positions as f64;
    grads.scale(scale);
    Ok((total_loss * scale, grads))
}

fn backward_sequence(
    params: &Parameters,
    config: &ModelConfig,
    cache: &ForwardCache,
    targets: &[usize],
    grads: &mut Parameters,
) {
    let d = config.d_model;
    let n = cache.input.len();
    let scale = 1.0 / (d as f64).sqrt();

    // Softmax cross-entropy: dlogits = p - onehot (PAD entry stays 0).
    let mut dhf: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    for t in 0..n {
        let probs = &cache.probs[t];
        let target = targets[t];
        for vtok in 0..config.vocab_size {
            let mut dl = probs[vtok];
            if vtok == target {
                dl -= 1.0;
            }
            if dl == 0.0 {
                continue;
            }
            let row = &params.w_out[vtok * d..(vtok + 1) * d];
            let drow = &mut grads.w_out[vtok * d..(vtok + 1) * d];
            for i in 0..d {
                drow[i] += dl * cache.lnf.out[t][i];
                dhf[t][i] += dl * row[i];
            }
        }
    }

    // Final norm.
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    layernorm_backward(&cache.lnf, &params.lnf_g, &dhf, &mut grads.lnf_g, &mut grads.lnf_b, &mut dx);

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // MLP block: x = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2.
        let mut dh2: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        for t in 0..n {
            let dy = &dx[t];
            let mut dgu = vec![0.0; config.d_ff()];
            matvec_backward(&layer.w2, &lc.gu[t], dy, &mut gl.w2, &mut dgu, d, config.d_ff());
            for (bi, yi) in gl.b2.iter_mut().zip(dy) {
                *bi += yi;
            }
            let du: Vec<f64> =
                dgu.iter().zip(&lc.u[t]).map(|(g, &u)| g * gelu_deriv(u)).collect();
            for (bi, ui) in gl.b1.iter_mut().zip(&du) {
                *bi += ui;
            }
            matvec_backward(&layer.w1, &lc.ln2.out[t], &du, &mut gl.w1, &mut dh2[t], config.d_ff(), d);
        }
        // Residual: dx continues into x_mid both directly and through ln2.
        layernorm_backward(&lc.ln2, &layer.ln2_g, &dh2, &mut gl.ln2_g, &mut gl.ln2_b, &mut dx);

        // Attention block: x_mid = x_in + Wo mix(ln1(x_in)).
        let mut dmix: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        for t in 0..n {
            matvec_backward(&layer.wo, &lc.mix[t], &dx[t], &mut gl.wo, &mut dmix[t], d, d);
        }
        let mut dq: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut dk: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut dv: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        for t in 0..n {
            let weights = &lc.att[t];
            let mut datt = vec![0.0; t + 1];
            for j in 0..=t {
                datt[j] = dmix[t].iter().zip(&lc.v[j]).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    dv[j][i] += weights[j] * dmix[t][i];
                }
            }
            let dot: f64 = weights.iter().zip(&datt).map(|(w, g)| w * g).sum();
            for j in 0..=t {
                let dscore = weights[j] * (datt[j] - dot) * scale;
                if dscore == 0.0 {
                    continue;
                }
                for i in 0..d {
                    dq[t][i] += dscore * lc.k[j][i];
                    dk[j][i] += dscore * lc.q[t][i];
                }
            }
        }
        let mut dh1: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        for t in 0..n {
            let h1 = &lc.ln1.out[t];
            matvec_backward(&layer.wq, h1, &dq[t], &mut gl.wq, &mut dh1[t], d, d);
            matvec_backward(&layer.wk, h1, &dk[t], &mut gl.wk, &mut dh1[t], d, d);
            matvec_backward(&layer.wv, h1, &dv[t], &mut gl.wv, &mut dh1[t], d, d);
        }
        layernorm_backward(&lc.ln1, &layer.ln1_g, &dh1, &mut gl.ln1_g, &mut gl.ln1_b, &mut dx);
    }

    // Embeddings.
    for (t, &id) in cache.input.iter().enumerate() {
        for i in 0..d {
            grads.tok_emb[id * d + i] += dx[t][i];
            grads.pos_emb[t * d + i] += dx[t][i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

/// Deterministic minibatch training; the loss curve records every step.
pub fn train(
    config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &[Vec<usize>],
) -> Result<(Parameters, Vec<f64>)> {
    check_batch(corpus, config)?;
    if train_config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut params = Parameters::init(config)?;
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.shuffle_seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut curve = Vec::with_capacity(train_config.steps);

    for step in 0..train_config.steps {
        let mut batch: Vec<Vec<usize>> = Vec::with_capacity(train_config.batch_size);
        while batch.len() < train_config.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let (batch_loss, grads) = grad(&params, config, &batch)?;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        curve.push(batch_loss);
        match train_config.optimizer {
            Optimizer::Sgd => {
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= train_config.lr * gi;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for (((_, p), (_, g)), ((_, mi), (_, vi))) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()))
                {
                    for k in 0..p.len() {
                        mi[k] = beta1 * mi[k] + (1.0 - beta1) * g[k];
                        vi[k] = beta2 * vi[k] + (1.0 - beta2) * g[k] * g[k];
                        let mhat = mi[k] / bc1;
                        let vhat = vi[k] / bc2;
                        p[k] -= train_config.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::Diverged(step));
        }
    }
    Ok((params, curve))
}

/// Central-difference gradient check over a seeded random coordinate
/// subset; returns the max relative error |a - n| / max(|a|, |n|, 1e-8).
pub fn finite_diff_check(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[Vec<usize>],
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    let (_, analytic) = grad(params, config, batch)?;
    finite_diff_check_against(params, config, batch, &analytic, eps, n_coords, seed)
}

/// Same check against a caller-supplied gradient (lets tests verify that
/// a corrupted gradient is detected).
pub fn finite_diff_check_against(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[Vec<usize>],
    analytic: &Parameters,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    let total = params.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = params.clone();
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let idx = rng.gen_range(0..total);
        let orig = scratch.get_flat(idx);
        scratch.set_flat(idx, orig + eps);
        let lp = loss(&scratch, config, batch)?;
        scratch.set_flat(idx, orig - eps);
        let lm = loss(&scratch, config, batch)?;
        scratch.set_flat(idx, orig);
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic.get_flat(idx);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// The trained model viewed as a Markov kernel of order `context_len`.
pub struct NeuralKernel {
    params: Parameters,
    config: ModelConfig,
    vocab: Vocabulary,
}

impl NeuralKernel {
    pub fn new(params: Parameters, config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size || vocab.pad() != config.pad_id {
            return Err(Error::InvalidConfig(format!(
                "vocabulary ({} tokens, pad {}) does not match model ({}, pad {})",
                vocab.len(),
                vocab.pad(),
                config.vocab_size,
                config.pad_id
            )));
        }
        Ok(Self { params, config, vocab })
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl Kernel for NeuralKernel {
    fn order(&self) -> usize {
        self.config.context_len
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn evaluate(&self, ctx: &Context) -> Result<Distribution> {
        let state = ctx.suffix(self.config.context_len);
        forward_padded(&self.params, &self.config, state)
    }

    fn kind_name(&self) -> &'static str {
        "neural"
    }
}

/// Model file: one JSON manifest line (config + tensor shapes), then one
/// decimal value per line at 17 significant digits.
#[derive(Serialize, Deserialize)]
struct ModelManifest {
    config: ModelConfig,
    tensors: Vec<(String, usize)>,
}

pub fn save_model(params: &Parameters, config: &ModelConfig, path: &std::path::Path) -> Result<()> {
    let manifest = ModelManifest {
        config: config.clone(),
        tensors: params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect(),
    };
    let mut out = serde_json::to_string(&manifest)?;
    out.push('\n');
    for (_, tensor) in params.tensors() {
        for v in tensor.iter() {
            out.push_str(&format!("{v:.16e}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<(Parameters, ModelConfig)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let manifest: ModelManifest = serde_json::from_str(
        lines.next().ok_or_else(|| Error::InvalidModelFile("empty file".into()))?,
    )?;
    let mut params = Parameters::init(&manifest.config)?;
    let expected: Vec<(String, usize)> =
        params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    if expected != manifest.tensors {
        return Err(Error::InvalidModelFile("tensor shapes do not match config".into()));
    }
    for (_, tensor) in params.tensors_mut() {
        for slot in tensor.iter_mut() {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidModelFile("truncated value section".into()))?;
            *slot = line
                .parse::<f64>()
                .map_err(|e| Error::InvalidModelFile(format!("bad value {line:?}: {e}")))?;
        }
    }
    if lines.next().is_some() {
        return Err(Error::InvalidModelFile("trailing data".into()));
    }
    Ok((params, manifest.config))
}
