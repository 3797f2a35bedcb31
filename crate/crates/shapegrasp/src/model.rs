//! Scale-conditioned shape/grasp autoencoder, written from scratch.
//!
//! The encoder is a shared per-point MLP followed by a coordinate-wise
//! max pool (permutation invariant by construction). The metric scale is
//! standardized and appended to the embedding; a fully-connected decoder
//! expands the result to `N x (3 + 1 + 3 + 3 + n_bins)` raw channels
//! which the output heads turn into positions, a sigmoid success score,
//! two raw grasp directions, and soft-maxed width bins.
//!
//! Training is plain adaptive-moment gradient descent on the gated loss
//! from [`crate::loss`]; the backward pass is hand-derived and checked
//! against finite differences in the tests. Per-sample work parallelizes
//! across a batch, and gradients reduce in fixed sample order, so results
//! are bit-identical regardless of thread count.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{CanonicalObjectSample, DenseGraspCloud};
use crate::error::{Error, Result};
use crate::gripper::{orthonormalize, GripperSpec};
use crate::loss::{total_loss, CloudGrad, LossConfig, LossReport};
use crate::seeding::seeded_rng;
use rand::Rng;

/// Architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// Decoder output point count.
    pub n_points: usize,
    /// Embedding dimension.
    pub embed_dim: usize,
    /// Encoder hidden widths (per-point MLP).
    pub encoder_widths: Vec<usize>,
    /// Decoder hidden widths.
    pub decoder_widths: Vec<usize>,
    pub n_width_bins: usize,
    pub learning_rate: f64,
    /// Cosine-decay the learning rate to `learning_rate * lr_floor` over
    /// the run; `lr_floor = 1.0` keeps it constant.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            n_points: 256,
            embed_dim: 64,
            encoder_widths: vec![64, 128],
            decoder_widths: vec![256, 512],
            n_width_bins: 10,
            learning_rate: 1e-3,
            lr_floor: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 {
            return Err(Error::config(format!("n_points must be >= 64, got {}", self.n_points)));
        }
        if self.embed_dim < 8 {
            return Err(Error::config(format!("embed_dim must be >= 8, got {}", self.embed_dim)));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) || self.decoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be >= 1".to_string()));
        }
        if self.n_width_bins < 2 {
            return Err(Error::config("n_width_bins must be >= 2".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::config("lr_floor must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// Raw decoder channels per point.
    pub fn point_channels(&self) -> usize {
        10 + self.n_width_bins
    }
}

/// Dense layer, weights `out x in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Linear {
        // Uniform fan-in scaling.
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
            b: (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    fn zeros_like(&self) -> Linear {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *out = self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Batched forward over `batch` contiguous input vectors; streams each
    /// weight row once across the whole batch.
    fn forward_batch(&self, xs: &[f64], ys: &mut [f64], batch: usize) {
        debug_assert_eq!(xs.len(), batch * self.in_dim);
        debug_assert_eq!(ys.len(), batch * self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let bias = self.b[o];
            for m in 0..batch {
                let x = &xs[m * self.in_dim..(m + 1) * self.in_dim];
                ys[m * self.out_dim + o] = bias + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            }
        }
    }

    /// `dx = W^T delta`.
    fn backward_input(&self, delta: &[f64], dx: &mut [f64]) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (x, w) in dx.iter_mut().zip(row) {
                *x += w * d;
            }
        }
    }
}

/// MLP with ReLU between layers and a linear final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Full parameter set plus the scale standardization recorded from the
/// training manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: AeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub scale_mean: f64,
    pub scale_std: f64,
}

impl ModelParams {
    /// Seeded initialization with uniform fan-in scaling.
    pub fn init(config: &AeConfig, scale_mean: f64, scale_std: f64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let mut enc_dims = vec![3];
        enc_dims.extend(&config.encoder_widths);
        enc_dims.push(config.embed_dim);
        let mut dec_dims = vec![config.embed_dim + 1];
        dec_dims.extend(&config.decoder_widths);
        dec_dims.push(config.n_points * config.point_channels());
        Ok(ModelParams {
            config: config.clone(),
            encoder: Mlp::init(&enc_dims, &mut rng),
            decoder: Mlp::init(&dec_dims, &mut rng),
            scale_mean,
            scale_std,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    fn standardize_scale(&self, scale: f64) -> f64 {
        (scale - self.scale_mean) / self.scale_std
    }
}

// ----------------------------------------------------------------------
// Forward passes.
// ----------------------------------------------------------------------

struct EncoderTrace {
    /// Per layer: pre-activation outputs for every point, `n x out` flat.
    pre: Vec<Vec<f64>>,
    /// Per embedding channel: index of the max point.
    argmax: Vec<usize>,
}

fn encoder_forward(params: &ModelParams, points: &[Vector3<f64>]) -> (Vec<f64>, EncoderTrace) {
    let n = points.len();
    let layers = &params.encoder.layers;
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut acts: Vec<f64> = Vec::with_capacity(n * 3);
    for p in points {
        acts.extend_from_slice(&[p.x, p.y, p.z]);
    }
    for (li, layer) in layers.iter().enumerate() {
        let mut out = vec![0.0; n * layer.out_dim];
        layer.forward_batch(&acts, &mut out, n);
        pre.push(out.clone());
        if li + 1 < layers.len() {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts = out;
    }

    let e = layers.last().expect("encoder has layers").out_dim;
    let mut embedding = vec![f64::NEG_INFINITY; e];
    let mut argmax = vec![0usize; e];
    for point in 0..n {
        for c in 0..e {
            let v = acts[point * e + c];
            if v > embedding[c] {
                embedding[c] = v;
                argmax[c] = point;
            }
        }
    }
    (embedding, EncoderTrace { pre, argmax })
}

/// Encoder: shared per-point MLP, coordinate-wise max pool.
pub fn encode(params: &ModelParams, points: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::NonFiniteInput(format!("point {:?}", p.as_slice())));
        }
    }
    Ok(encoder_forward(params, points).0)
}

struct DecoderTrace {
    /// Input vector (embedding + standardized scale).
    input: Vec<f64>,
    /// Per layer pre-activation outputs.
    pre: Vec<Vec<f64>>,
}

fn decoder_forward(params: &ModelParams, embedding: &[f64], scale: f64) -> (Vec<f64>, DecoderTrace) {
    let mut input = embedding.to_vec();
    input.push(params.standardize_scale(scale));
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(params.decoder.layers.len());
    let mut acts = input.clone();
    for (li, layer) in params.decoder.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.out_dim];
        layer.forward(&acts, &mut out);
        pre.push(out.clone());
        if li + 1 < params.decoder.layers.len() {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts = out;
    }
    (acts, DecoderTrace { input, pre })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Output heads: raw decoder channels to a dense grasp cloud. Points with
/// degenerate direction predictions get their success score forced to 0.
fn heads_forward(raw: &[f64], config: &AeConfig) -> DenseGraspCloud {
    let n = config.n_points;
    let bins = config.n_width_bins;
    let per = config.point_channels();
    let mut cloud = DenseGraspCloud::zeros(n, bins);
    for i in 0..n {
        let row = &raw[i * per..(i + 1) * per];
        cloud.positions[i] = Vector3::new(row[0], row[1], row[2]);
        cloud.gs[i] = sigmoid(row[3]);
        cloud.z1[i] = Vector3::new(row[4], row[5], row[6]);
        cloud.z2[i] = Vector3::new(row[7], row[8], row[9]);
        if orthonormalize(&cloud.z1[i], &cloud.z2[i]).is_err() {
            cloud.gs[i] = 0.0;
        }
        // Stable softmax over the width bins.
        let scores = &row[10..10 + bins];
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (b, &s) in scores.iter().enumerate() {
            let e = (s - max).exp();
            cloud.width_onehot[i * bins + b] = e;
            sum += e;
        }
        for b in 0..bins {
            cloud.width_onehot[i * bins + b] /= sum;
        }
    }
    cloud
}

/// Pulls a loss gradient on the grasp cloud back through the output heads
/// onto the raw decoder channels.
fn heads_backward(pred: &DenseGraspCloud, grad: &CloudGrad, config: &AeConfig) -> Vec<f64> {
    let n = config.n_points;
    let bins = config.n_width_bins;
    let per = config.point_channels();
    let mut d_raw = vec![0.0; n * per];
    for i in 0..n {
        let row = &mut d_raw[i * per..(i + 1) * per];
        row[0] = grad.positions[i].x;
        row[1] = grad.positions[i].y;
        row[2] = grad.positions[i].z;
        // Sigmoid head; the rare degenerate-direction override zeroes gs
        // discontinuously, and its BCE gradient is already clipped to 0.
        let s = pred.gs[i];
        row[3] = grad.gs[i] * s * (1.0 - s);
        row[4] = grad.z1[i].x;
        row[5] = grad.z1[i].y;
        row[6] = grad.z1[i].z;
        row[7] = grad.z2[i].x;
        row[8] = grad.z2[i].y;
        row[9] = grad.z2[i].z;
        // Softmax Jacobian: d_raw = s .* (g - <g, s>).
        let s_row = pred.width_row(i);
        let g_row = &grad.width_onehot[i * bins..(i + 1) * bins];
        let dot: f64 = s_row.iter().zip(g_row).map(|(s, g)| s * g).sum();
        for b in 0..bins {
            row[10 + b] = s_row[b] * (g_row[b] - dot);
        }
    }
    d_raw
}

/// Decoder: embedding + metric scale to a dense grasp cloud.
pub fn decode(params: &ModelParams, embedding: &[f64], scale: f64, _spec: &GripperSpec) -> DenseGraspCloud {
    let (raw, _) = decoder_forward(params, embedding, scale);
    heads_forward(&raw, &params.config)
}

/// Batched decode; weight matrices stream once across all requests.
pub fn decode_batch(
    params: &ModelParams,
    requests: &[(Vec<f64>, f64)],
    _spec: &GripperSpec,
) -> Vec<DenseGraspCloud> {
    let b = requests.len();
    if b == 0 {
        return Vec::new();
    }
    let in_dim = params.config.embed_dim + 1;
    let mut acts = Vec::with_capacity(b * in_dim);
    for (emb, scale) in requests {
        acts.extend_from_slice(emb);
        acts.push(params.standardize_scale(*scale));
    }
    let n_layers = params.decoder.layers.len();
    for (li, layer) in params.decoder.layers.iter().enumerate() {
        let mut out = vec![0.0; b * layer.out_dim];
        layer.forward_batch(&acts, &mut out, b);
        if li + 1 < n_layers {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts = out;
    }
    let per = params.config.n_points * params.config.point_channels();
    (0..b)
        .map(|m| heads_forward(&acts[m * per..(m + 1) * per], &params.config))
        .collect()
}

/// Encode-then-decode convenience.
pub fn reconstruct(
    params: &ModelParams,
    cloud: &crate::cloud::UnitCanonicalCloud,
    scale: f64,
    spec: &GripperSpec,
) -> Result<DenseGraspCloud> {
    let emb = encode(params, &cloud.points)?;
    Ok(decode(params, &emb, scale, spec))
}

// ----------------------------------------------------------------------
// Backward pass and training.
// ----------------------------------------------------------------------

/// Per-layer activation/delta pairs from one sample; weight gradients are
/// recovered later as outer products, in fixed sample order.
struct SampleGrads {
    /// Decoder: (input activations, delta) per layer.
    decoder: Vec<(Vec<f64>, Vec<f64>)>,
    /// Encoder: per layer, per contributing point: (input acts, delta).
    encoder: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

fn relu_mask(pre: &[f64], delta: &mut [f64]) {
    for (d, &p) in delta.iter_mut().zip(pre) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

fn relu(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&v| v.max(0.0)).collect()
}

/// Forward + loss + backward for one sample. Returns the loss report and
/// the activation/delta pairs for every parameterized layer.
fn sample_backward(
    params: &ModelParams,
    sample: &CanonicalObjectSample,
    spec: &GripperSpec,
    loss_cfg: &LossConfig,
) -> Result<(LossReport, SampleGrads)> {
    let (embedding, enc_trace) = encoder_forward(params, &sample.cloud.points);
    let (raw, dec_trace) = decoder_forward(params, &embedding, sample.scale);
    let pred = heads_forward(&raw, &params.config);
    let (report, cloud_grad) = total_loss(&pred, sample, loss_cfg, spec)?;
    let d_raw = heads_backward(&pred, &cloud_grad, &params.config);

    // Decoder backward.
    let dec_layers = &params.decoder.layers;
    let mut decoder_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(dec_layers.len());
    let mut delta = d_raw;
    for li in (0..dec_layers.len()).rev() {
        let input = if li == 0 {
            dec_trace.input.clone()
        } else {
            relu(&dec_trace.pre[li - 1])
        };
        let mut d_input = vec![0.0; dec_layers[li].in_dim];
        dec_layers[li].backward_input(&delta, &mut d_input);
        decoder_pairs.push((input, delta));
        if li > 0 {
            relu_mask(&dec_trace.pre[li - 1], &mut d_input);
        }
        delta = d_input;
    }
    decoder_pairs.reverse();

    // Split the decoder-input gradient: embedding channels flow into the
    // encoder; the scale input is data, not a parameter.
    let d_embedding = &delta[..params.config.embed_dim];

    // Max pool routes each embedding channel's gradient to its argmax
    // point; only those points need a backward pass.
    let enc_layers = &params.encoder.layers;
    let e = params.config.embed_dim;
    let mut point_deltas: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for c in 0..e {
        if d_embedding[c] != 0.0 {
            point_deltas
                .entry(enc_trace.argmax[c])
                .or_insert_with(|| vec![0.0; e])[c] += d_embedding[c];
        }
    }

    let mut encoder_pairs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); enc_layers.len()];
    for (&point, top_delta) in &point_deltas {
        let mut delta = top_delta.clone();
        for li in (0..enc_layers.len()).rev() {
            let input: Vec<f64> = if li == 0 {
                let p = sample.cloud.points[point];
                vec![p.x, p.y, p.z]
            } else {
                let prev = &enc_trace.pre[li - 1];
                relu(&prev[point * enc_layers[li].in_dim..(point + 1) * enc_layers[li].in_dim])
            };
            let mut d_input = vec![0.0; enc_layers[li].in_dim];
            enc_layers[li].backward_input(&delta, &mut d_input);
            encoder_pairs[li].push((input, delta));
            if li > 0 {
                let pre = &enc_trace.pre[li - 1];
                relu_mask(
                    &pre[point * enc_layers[li].in_dim..(point + 1) * enc_layers[li].in_dim],
                    &mut d_input,
                );
            }
            delta = d_input;
        }
    }

    Ok((
        report,
        SampleGrads {
            decoder: decoder_pairs,
            encoder: encoder_pairs,
        },
    ))
}

/// Accumulates `(x, delta)` pairs into dense weight/bias gradients.
fn accumulate(target: &mut Mlp, pairs_per_layer: &[Vec<(&Vec<f64>, &Vec<f64>)>]) {
    for (layer, pairs) in target.layers.iter_mut().zip(pairs_per_layer) {
        for (x, delta) in pairs {
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                layer.b[o] += d;
                let row = &mut layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, &xv) in row.iter_mut().zip(x.iter()) {
                    *w += d * xv;
                }
            }
        }
    }
}

/// Adam state mirroring the parameter shapes.
struct Adam {
    m_enc: Mlp,
    v_enc: Mlp,
    m_dec: Mlp,
    v_dec: Mlp,
    t: u64,
}

impl Adam {
    fn new(params: &ModelParams) -> Adam {
        Adam {
            m_enc: params.encoder.zeros_like(),
            v_enc: params.encoder.zeros_like(),
            m_dec: params.decoder.zeros_like(),
            v_dec: params.decoder.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, g_enc: &Mlp, g_dec: &Mlp, cfg: &AeConfig, lr: f64) {
        self.t += 1;
        update_mlp(&mut params.encoder, g_enc, &mut self.m_enc, &mut self.v_enc, cfg, self.t, lr);
        update_mlp(&mut params.decoder, g_dec, &mut self.m_dec, &mut self.v_dec, cfg, self.t, lr);
    }
}

fn update_mlp(p: &mut Mlp, g: &Mlp, m: &mut Mlp, v: &mut Mlp, cfg: &AeConfig, t: u64, lr: f64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for li in 0..p.layers.len() {
        let l = &mut p.layers[li];
        let gl = &g.layers[li];
        let ml = &mut m.layers[li];
        let vl = &mut v.layers[li];
        for (i, pv) in l.w.iter_mut().enumerate() {
            let gi = gl.w[i];
            ml.w[i] = cfg.beta1 * ml.w[i] + (1.0 - cfg.beta1) * gi;
            vl.w[i] = cfg.beta2 * vl.w[i] + (1.0 - cfg.beta2) * gi * gi;
            *pv -= lr * (ml.w[i] / bc1) / ((vl.w[i] / bc2).sqrt() + cfg.adam_eps);
        }
        for (i, pv) in l.b.iter_mut().enumerate() {
            let gi = gl.b[i];
            ml.b[i] = cfg.beta1 * ml.b[i] + (1.0 - cfg.beta1) * gi;
            vl.b[i] = cfg.beta2 * vl.b[i] + (1.0 - cfg.beta2) * gi * gi;
            *pv -= lr * (ml.b[i] / bc1) / ((vl.b[i] / bc2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Per-epoch training statistics; one JSON line each in the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_chamfer: f64,
    pub mean_gs: f64,
    pub mean_gw: f64,
    pub mean_sixdof: f64,
    /// Fraction of samples whose Chamfer loss cleared the gate.
    pub gate_open_fraction: f64,
    /// Max grasp-term magnitude among gate-closed samples; 0 by contract.
    pub closed_gate_grasp_max: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Trains the autoencoder on labeled samples. Deterministic under
/// `(dataset, config, seed)` at any thread count: per-sample gradients
/// are computed independently and reduced in sample order.
pub fn train(
    dataset: &[CanonicalObjectSample],
    config: &AeConfig,
    spec: &GripperSpec,
    loss_cfg: &LossConfig,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    loss_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty".to_string()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.labels.len() != s.cloud.len() {
            return Err(Error::config(format!("sample {i} is unlabeled")));
        }
    }

    let mean = dataset.iter().map(|s| s.scale).sum::<f64>() / dataset.len() as f64;
    let var = dataset.iter().map(|s| (s.scale - mean).powi(2)).sum::<f64>() / dataset.len() as f64;
    let std = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };

    let mut params = ModelParams::init(config, mean, std)?;
    let mut adam = Adam::new(&params);
    let mut rng = seeded_rng(crate::seeding::derive_seed(config.seed, "train-shuffle", 0));
    let mut log = TrainLog::default();

    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        // Cosine decay from learning_rate to learning_rate * lr_floor.
        let progress = epoch as f64 / config.epochs.max(1) as f64;
        let lr = config.learning_rate
            * (config.lr_floor
                + (1.0 - config.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        // Fisher-Yates with the seeded stream.
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }

        let mut sum = LossAccum::default();
        for batch in indices.chunks(config.batch_size) {
            let results: Vec<Result<(LossReport, SampleGrads)>> = batch
                .par_iter()
                .map(|&i| sample_backward(&params, &dataset[i], spec, loss_cfg))
                .collect();

            let mut g_enc = params.encoder.zeros_like();
            let mut g_dec = params.decoder.zeros_like();
            let mut n_ok = 0usize;
            let mut dec_pairs: Vec<Vec<(&Vec<f64>, &Vec<f64>)>> = vec![Vec::new(); params.decoder.layers.len()];
            let mut enc_pairs: Vec<Vec<(&Vec<f64>, &Vec<f64>)>> = vec![Vec::new(); params.encoder.layers.len()];
            let mut reports = Vec::with_capacity(batch.len());
            for res in &results {
                let (report, grads) = match res {
                    Ok(v) => v,
                    Err(e) => return Err(Error::DivergenceDetected(e.to_string())),
                };
                if !report.total.is_finite() {
                    return Err(Error::DivergenceDetected(format!("loss {}", report.total)));
                }
                reports.push(*report);
                n_ok += 1;
                for (li, (x, d)) in grads.decoder.iter().enumerate() {
                    dec_pairs[li].push((x, d));
                }
                for (li, pairs) in grads.encoder.iter().enumerate() {
                    for (x, d) in pairs {
                        enc_pairs[li].push((x, d));
                    }
                }
            }
            accumulate(&mut g_dec, &dec_pairs);
            accumulate(&mut g_enc, &enc_pairs);
            let inv = 1.0 / n_ok as f64;
            for mlp in [&mut g_enc, &mut g_dec] {
                for l in &mut mlp.layers {
                    l.w.iter_mut().for_each(|v| *v *= inv);
                    l.b.iter_mut().for_each(|v| *v *= inv);
                }
            }
            adam.step(&mut params, &g_enc, &g_dec, config, lr);
            for r in &reports {
                sum.add(r);
            }
        }
        log.epochs.push(sum.into_stats(epoch, dataset.len()));
    }
    Ok((params, log))
}

#[derive(Default)]
struct LossAccum {
    total: f64,
    chamfer: f64,
    gs: f64,
    gw: f64,
    sixdof: f64,
    open: usize,
    closed_grasp_max: f64,
}

impl LossAccum {
    fn add(&mut self, r: &LossReport) {
        self.total += r.total;
        self.chamfer += r.chamfer;
        self.gs += r.gs;
        self.gw += r.gw;
        self.sixdof += r.sixdof;
        if r.gate_open {
            self.open += 1;
        } else {
            let grasp = r.gs.abs() + r.gw.abs() + r.sixdof.abs();
            if grasp > self.closed_grasp_max {
                self.closed_grasp_max = grasp;
            }
        }
    }

    fn into_stats(self, epoch: usize, n: usize) -> EpochStats {
        let inv = 1.0 / n as f64;
        EpochStats {
            epoch,
            mean_total: self.total * inv,
            mean_chamfer: self.chamfer * inv,
            mean_gs: self.gs * inv,
            mean_gw: self.gw * inv,
            mean_sixdof: self.sixdof * inv,
            gate_open_fraction: self.open as f64 * inv,
            closed_gate_grasp_max: self.closed_grasp_max,
        }
    }
}

// Gradients with respect to parameters, for the finite-difference checks.
#[cfg(test)]
pub(crate) fn param_gradients(
    params: &ModelParams,
    sample: &CanonicalObjectSample,
    spec: &GripperSpec,
    loss_cfg: &LossConfig,
) -> Result<(f64, Mlp, Mlp)> {
    let (report, grads) = sample_backward(params, sample, spec, loss_cfg)?;
    let mut g_enc = params.encoder.zeros_like();
    let mut g_dec = params.decoder.zeros_like();
    let dec_pairs: Vec<Vec<(&Vec<f64>, &Vec<f64>)>> = grads
        .decoder
        .iter()
        .map(|(x, d)| vec![(x, d)])
        .collect();
    let enc_pairs: Vec<Vec<(&Vec<f64>, &Vec<f64>)>> = grads
        .encoder
        .iter()
        .map(|pairs| pairs.iter().map(|(x, d)| (x, d)).collect())
        .collect();
    accumulate(&mut g_dec, &dec_pairs);
    accumulate(&mut g_enc, &enc_pairs);
    Ok((report.total, g_enc, g_dec))
}
