//! Student-side training: a projection head, optionally behind a one-hidden-layer
//! encoder, fitted to frozen teacher text embeddings with the distillation loss.

use std::time::Instant;

use rand::Rng;

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::objective::{distill_loss, Temperature};
use crate::rng::{permutation, stream, StreamKind};
use crate::world::WorldView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterMode {
    LinearHeadOnly,
    MlpEncoderPlusHead,
}

impl AdapterMode {
    pub fn name(self) -> &'static str {
        match self {
            AdapterMode::LinearHeadOnly => "linear_head_only",
            AdapterMode::MlpEncoderPlusHead => "mlp_encoder_plus_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear_head_only" | "linear" => Some(AdapterMode::LinearHeadOnly),
            "mlp_encoder_plus_head" | "mlp" => Some(AdapterMode::MlpEncoderPlusHead),
            _ => None,
        }
    }
}

/// Layer sizes. In linear mode `d_in` must equal `d_student_in` and
/// `d_hidden` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterDims {
    pub d_student_in: usize,
    pub d_hidden: usize,
    pub d_in: usize,
    pub d_teacher: usize,
}

/// `relu(x W1^T + b1) W2^T + b2`
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayers {
    pub hidden_weight: Matrix,
    pub hidden_bias: Vec<f64>,
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    pub encoder: Option<EncoderLayers>,
    pub mode: AdapterMode,
}

impl AdapterParams {
    pub fn d_student_in(&self) -> usize {
        match &self.encoder {
            Some(e) => e.hidden_weight.cols(),
            None => self.head_weight.cols(),
        }
    }

    pub fn d_teacher(&self) -> usize {
        self.head_weight.rows()
    }

    /// Parameter tensors in a fixed order: head weight, head bias, then the
    /// encoder's hidden weight, hidden bias, output weight, output bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = vec![self.head_weight.as_slice(), &self.head_bias];
        if let Some(e) = &self.encoder {
            t.extend([
                e.hidden_weight.as_slice(),
                &e.hidden_bias[..],
                e.out_weight.as_slice(),
                &e.out_bias[..],
            ]);
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = vec![self.head_weight.as_mut_slice(), &mut self.head_bias];
        if let Some(e) = &mut self.encoder {
            t.push(e.hidden_weight.as_mut_slice());
            t.push(&mut e.hidden_bias);
            t.push(e.out_weight.as_mut_slice());
            t.push(&mut e.out_bias);
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> AdapterParams {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        AdapterParams {
            head_weight: z(&self.head_weight),
            head_bias: vec![0.0; self.head_bias.len()],
            encoder: self.encoder.as_ref().map(|e| EncoderLayers {
                hidden_weight: z(&e.hidden_weight),
                hidden_bias: vec![0.0; e.hidden_bias.len()],
                out_weight: z(&e.out_weight),
                out_bias: vec![0.0; e.out_bias.len()],
            }),
            mode: self.mode,
        }
    }
}

/// Glorot-uniform bound for a weight with the given fan-in and fan-out.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot(seed: u64, index: u64, rows: usize, cols: usize) -> Matrix {
    let a = glorot_bound(cols, rows);
    let mut rng = stream(seed, StreamKind::ParamInit, index);
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

pub fn init_params(seed: u64, dims: AdapterDims, mode: AdapterMode) -> Result<AdapterParams> {
    let AdapterDims {
        d_student_in,
        d_hidden,
        d_in,
        d_teacher,
    } = dims;
    if d_student_in == 0 || d_in == 0 || d_teacher == 0 {
        return Err(Error::InvalidConfig("adapter dimensions must be positive".into()));
    }
    let encoder = match mode {
        AdapterMode::LinearHeadOnly => {
            if d_in != d_student_in {
                return Err(Error::InvalidConfig(format!(
                    "linear_head_only needs d_in == d_student_in ({d_in} != {d_student_in})"
                )));
            }
            None
        }
        AdapterMode::MlpEncoderPlusHead => {
            if d_hidden == 0 {
                return Err(Error::InvalidConfig("d_hidden must be positive".into()));
            }
            Some(EncoderLayers {
                hidden_weight: glorot(seed, 2, d_hidden, d_student_in),
                hidden_bias: vec![0.0; d_hidden],
                out_weight: glorot(seed, 3, d_in, d_hidden),
                out_bias: vec![0.0; d_in],
            })
        }
    };
    Ok(AdapterParams {
        head_weight: glorot(seed, 1, d_teacher, d_in),
        head_bias: vec![0.0; d_teacher],
        encoder,
        mode,
    })
}

/// `x W^T + b`
pub(crate) fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut out = x.matmul_transposed(w)?;
    for i in 0..out.rows() {
        out.row_mut(i).iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
    }
    Ok(out)
}

pub(crate) fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        s.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    s
}

pub(crate) fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

struct ForwardCache {
    input: Matrix,
    hidden_pre: Option<Matrix>,
    hidden: Option<Matrix>,
    head_input: Matrix,
}

fn forward_cached(params: &AdapterParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != params.d_student_in() {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: (x.rows(), params.d_student_in()),
        });
    }
    let (hidden_pre, hidden, head_input) = match &params.encoder {
        Some(e) => {
            let pre = affine(x, &e.hidden_weight, &e.hidden_bias)?;
            let h = relu(&pre);
            let out = affine(&h, &e.out_weight, &e.out_bias)?;
            (Some(pre), Some(h), out)
        }
        None => (None, None, x.clone()),
    };
    let z = affine(&head_input, &params.head_weight, &params.head_bias)?;
    Ok((
        z,
        ForwardCache {
            input: x.clone(),
            hidden_pre,
            hidden,
            head_input,
        },
    ))
}

/// Projected student embeddings `g(f(x))`, before normalization.
pub fn forward_student(params: &AdapterParams, audio_features: &Matrix) -> Result<Matrix> {
    forward_cached(params, audio_features).map(|(z, _)| z)
}

fn backward(params: &AdapterParams, cache: &ForwardCache, grad_out: &Matrix) -> Result<AdapterParams> {
    let mut grads = params.zeros_like();
    let g_t = grad_out.transpose();
    grads.head_weight = g_t.matmul(&cache.head_input)?;
    grads.head_bias = column_sums(grad_out);
    if let (Some(e), Some(ge), Some(pre), Some(h)) = (
        &params.encoder,
        grads.encoder.as_mut(),
        &cache.hidden_pre,
        &cache.hidden,
    ) {
        let d_head_in = grad_out.matmul(&params.head_weight)?;
        ge.out_weight = d_head_in.transpose().matmul(h)?;
        ge.out_bias = column_sums(&d_head_in);
        let mut d_hidden = d_head_in.matmul(&e.out_weight)?;
        d_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(pre.as_slice())
            .for_each(|(g, p)| {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            });
        ge.hidden_weight = d_hidden.transpose().matmul(&cache.input)?;
        ge.hidden_bias = column_sums(&d_hidden);
    }
    Ok(grads)
}

/// Loss and gradient with respect to every adapter parameter for one batch.
pub fn adapter_gradients(
    params: &AdapterParams,
    audio_batch: &Matrix,
    teacher_batch: &Matrix,
    tau: Temperature,
) -> Result<(f64, AdapterParams)> {
    let (z, cache) = forward_cached(params, audio_batch)?;
    let out = distill_loss(&z, teacher_batch, tau)?;
    let grads = backward(params, &cache, &out.grad_student)?;
    Ok((out.loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd_momentum" | "sgd" => Some(OptimizerKind::SgdMomentum),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Probability of each prompt variant. Empty means uniform.
    pub prompt_mixture: Vec<f64>,
    /// Hidden width of the optional student encoder.
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-2,
            tau: 0.07,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            prompt_mixture: Vec::new(),
            hidden_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn temperature(&self) -> Result<Temperature> {
        Temperature::new(self.tau)
    }

    /// The mixture resolved against a variant count.
    pub fn mixture(&self, variant_count: usize) -> Result<Vec<f64>> {
        if self.prompt_mixture.is_empty() {
            return Ok(vec![1.0 / variant_count as f64; variant_count]);
        }
        if self.prompt_mixture.len() != variant_count {
            return Err(Error::InvalidConfig(format!(
                "prompt_mixture has {} entries, world has {variant_count} variants",
                self.prompt_mixture.len()
            )));
        }
        Ok(self.prompt_mixture.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        self.temperature()?;
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::InvalidConfig("momentum and betas must be in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        if !self.prompt_mixture.is_empty() {
            if self.prompt_mixture.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::InvalidConfig("prompt_mixture entries must be >= 0".into()));
            }
            let total: f64 = self.prompt_mixture.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("prompt_mixture sums to {total}, not 1")));
            }
        }
        Ok(())
    }
}

/// First-order optimizer over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub(crate) fn new(config: &TrainConfig, shapes: &[usize]) -> Self {
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            momentum: config.momentum,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub(crate) fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[k];
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((pi, gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = self.momentum * *mi + gi;
                        *pi -= self.lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[k];
                    for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Index-wise draw from a discrete distribution. Zero-probability entries are
/// never returned.
pub(crate) fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

/// Batches of one epoch: a seeded permutation cut into `batch_size` chunks,
/// with a trailing chunk of fewer than two items dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let perm = permutation(&mut stream(seed, StreamKind::EpochShuffle, epoch), n);
    perm.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub final_params: AdapterParams,
    pub steps: usize,
    pub wallclock: f64,
    /// How many times each prompt variant's teacher row was fetched.
    pub variant_fetches: Vec<u64>,
}

pub fn adapter_dims(view: &WorldView<'_>, config: &TrainConfig, mode: AdapterMode) -> AdapterDims {
    let wc = &view.world.config;
    AdapterDims {
        d_student_in: wc.d_student_in,
        d_hidden: config.hidden_dim,
        d_in: match mode {
            AdapterMode::LinearHeadOnly => wc.d_student_in,
            AdapterMode::MlpEncoderPlusHead => wc.d_student,
        },
        d_teacher: wc.d_teacher,
    }
}

/// Trains the student adapter on the audio rows of `view`.
///
/// Teacher text rows are only read. Every step draws a prompt variant per
/// item from the configured mixture and pairs the audio row with that
/// species' teacher row.
pub fn train_adapter(view: &WorldView<'_>, config: &TrainConfig, mode: AdapterMode) -> Result<TrainReport> {
    config.validate()?;
    let start = Instant::now();
    let world = view.world;
    let tau = config.temperature()?;
    let mixture = config.mixture(world.variant_count())?;
    let audio = view.audio();
    let n = audio.len();
    if n < 2 {
        return Err(Error::InvalidConfig("training view needs at least 2 audio rows".into()));
    }

    let mut params = init_params(config.seed, adapter_dims(view, config, mode), mode)?;
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(config, &shapes);
    let mut variant_fetches = vec![0u64; world.variant_count()];
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(n, config.batch_size, config.seed, epoch as u64);
        for batch in &batches {
            let mut variant_rng = stream(config.seed, StreamKind::PromptVariant, step as u64);
            let x = audio.matrix().select_rows(batch);
            let mut t = Matrix::zeros(batch.len(), world.config.d_teacher);
            for (r, &i) in batch.iter().enumerate() {
                let v = sample_index(&mut variant_rng, &mixture);
                variant_fetches[v] += 1;
                t.row_mut(r)
                    .copy_from_slice(world.teacher_row(audio.labels()[i] as usize, v));
            }
            let (z, cache) = forward_cached(&params, &x)?;
            if !z.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let out = distill_loss(&z, &t, tau)?;
            let loss = out.loss;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = backward(&params, &cache, &out.grad_student)?;
            opt.update(params.tensors_mut(), grads.tensors());
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            epoch_loss += loss;
            step += 1;
        }
        loss_curve.push(epoch_loss / batches.len() as f64);
    }

    Ok(TrainReport {
        loss_curve,
        final_params: params,
        steps: step,
        wallclock: start.elapsed().as_secs_f64(),
        variant_fetches,
    })
}

/// Mean distillation loss over the whole view, using common-name teacher rows
/// and a fixed, seed-independent batching.
pub fn dataset_loss(params: &AdapterParams, view: &WorldView<'_>, batch_size: usize, tau: Temperature) -> Result<f64> {
    let audio = view.audio();
    let batches = epoch_batches(audio.len(), batch_size.max(2), u64::MAX, 0);
    if batches.is_empty() {
        return Err(Error::InvalidConfig("view too small for a batch".into()));
    }
    let mut total = 0.0;
    for batch in &batches {
        let x = audio.matrix().select_rows(batch);
        let rows: Vec<&[f64]> = batch
            .iter()
            .map(|&i| view.world.teacher_row(audio.labels()[i] as usize, 0))
            .collect();
        let t = Matrix::from_rows(&rows)?;
        total += distill_loss(&forward_student(params, &x)?, &t, tau)?.loss;
    }
    Ok(total / batches.len() as f64)
}
