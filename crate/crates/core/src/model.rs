//! Trainable recognizer: a patch classifier, its ADADELTA optimizer, the
//! training loop against the lattice loss, and dataset evaluation.
//!
//! The classifier applies one shared network to every non-overlapping
//! `patch_h x patch_w` window of an image, producing the `H x W x Q` logit
//! grid the lattice loss consumes. Because the parameters are shared across
//! positions, anything learned about a glyph in one slot transfers to every
//! other slot, which is what makes training on whole unsegmented images work.
//!
//! Training is deterministic for a fixed seed: per-epoch shuffles come from
//! dedicated RNG streams, batch gradients are summed in sample order, and
//! parallelism only distributes the per-sample computations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{argmax_grid, decode_with_strategy, GroupingStrategy};
use crate::grid::{softmax_grid, LogitsGrid, ProbGrid};
use crate::labels::Alphabet;
use crate::lattice::{grad_wrt_logits, LambdaParams, LossMode};
use crate::metrics::{aggregate, match_sets, DatasetMetrics, MatchReport};
use crate::synthgen::SampleRecord;
use crate::{Error, Result};

/// Shared per-patch network: either affine (`hidden == 0`) or a single
/// ReLU hidden layer, on features scaled to `[0, 1]`.
///
/// Parameters live in one flat buffer so the optimizer and checkpoints treat
/// the model as an opaque vector. Layout: `[w1, b1, w2, b2]` with the hidden
/// layer, `[w, b]` without; all weight blocks are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    patch_h: usize,
    patch_w: usize,
    q: usize,
    hidden: usize,
    theta: Vec<f64>,
}

fn param_count(patch_h: usize, patch_w: usize, q: usize, hidden: usize) -> usize {
    let input = patch_h * patch_w;
    if hidden == 0 {
        q * input + q
    } else {
        hidden * input + hidden + q * hidden + q
    }
}

impl PatchClassifier {
    /// Fresh model with zero biases and Gaussian weights scaled by
    /// `1/sqrt(fan_in)`, drawn deterministically from `seed`.
    pub fn new(patch_h: usize, patch_w: usize, q: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut model = PatchClassifier::zeroed(patch_h, patch_w, q, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = patch_h * patch_w;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, theta: &mut [f64]| {
            let normal = Normal::new(0.0, (fan_in as f64).sqrt().recip()).expect("valid std");
            for slot in &mut theta[range] {
                *slot = normal.sample(&mut rng);
            }
        };
        if hidden == 0 {
            fill(0..q * input, input, &mut model.theta);
        } else {
            fill(0..hidden * input, input, &mut model.theta);
            let w2_start = hidden * input + hidden;
            fill(w2_start..w2_start + q * hidden, hidden, &mut model.theta);
        }
        Ok(model)
    }

    /// All-zero parameters: every cell then gets a uniform distribution.
    pub fn zeroed(patch_h: usize, patch_w: usize, q: usize, hidden: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 {
            return Err(Error::InvalidConfig("patch dimensions must be positive".into()));
        }
        if q < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {q}"
            )));
        }
        Ok(PatchClassifier {
            patch_h,
            patch_w,
            q,
            hidden,
            theta: vec![0.0; param_count(patch_h, patch_w, q, hidden)],
        })
    }

    pub fn patch_h(&self) -> usize {
        self.patch_h
    }

    pub fn patch_w(&self) -> usize {
        self.patch_w
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn grid_dims(&self, h: usize, w: usize, len: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || h % self.patch_h != 0 || w % self.patch_w != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} is not tiled by {}x{} patches",
                self.patch_h, self.patch_w
            )));
        }
        if len != h * w {
            return Err(Error::ShapeMismatch(format!(
                "pixel buffer length {len} != {h}*{w}"
            )));
        }
        Ok((h / self.patch_h, w / self.patch_w))
    }

    /// Features for the patch whose top-left pixel is `(y, x)`: the window's
    /// bytes in row-major order, scaled to `[0, 1]`.
    fn features(&self, pixels: &[u8], w: usize, y: usize, x: usize, out: &mut [f64]) {
        for py in 0..self.patch_h {
            let row = (y + py) * w + x;
            for px in 0..self.patch_w {
                out[py * self.patch_w + px] = pixels[row + px] as f64 / 255.0;
            }
        }
    }

    fn affine(
        theta: &[f64],
        w_start: usize,
        b_start: usize,
        input: &[f64],
        out: &mut [f64],
    ) {
        let n = input.len();
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &theta[w_start + o * n..w_start + (o + 1) * n];
            let mut acc = theta[b_start + o];
            for (wv, xv) in row.iter().zip(input) {
                acc += wv * xv;
            }
            *slot = acc;
        }
    }

    fn cell_logits(&self, feat: &[f64], logits: &mut [f64]) {
        let input = self.patch_h * self.patch_w;
        if self.hidden == 0 {
            Self::affine(&self.theta, 0, self.q * input, feat, logits);
        } else {
            let mut h_act = vec![0.0; self.hidden];
            Self::affine(&self.theta, 0, self.hidden * input, feat, &mut h_act);
            for v in &mut h_act {
                *v = v.max(0.0);
            }
            let w2 = self.hidden * input + self.hidden;
            let b2 = w2 + self.q * self.hidden;
            Self::affine(&self.theta, w2, b2, &h_act, logits);
        }
    }

    /// Runs the classifier over every patch of an image, producing the logit
    /// grid for the lattice. Image dimensions must be exact multiples of the
    /// patch size.
    pub fn forward(&self, h: usize, w: usize, pixels: &[u8]) -> Result<LogitsGrid> {
        let (gh, gw) = self.grid_dims(h, w, pixels.len())?;
        let mut data = vec![0.0; gh * gw * self.q];
        let mut feat = vec![0.0; self.patch_h * self.patch_w];
        for i in 0..gh {
            for j in 0..gw {
                self.features(pixels, w, i * self.patch_h, j * self.patch_w, &mut feat);
                let base = (i * gw + j) * self.q;
                self.cell_logits(&feat, &mut data[base..base + self.q]);
            }
        }
        LogitsGrid::from_vec(gh, gw, self.q, data)
    }

    /// Gradient of a scalar objective with respect to every parameter, given
    /// the objective's gradient on each cell's logits (`H x W x Q`,
    /// row-major). Patches share parameters, so contributions sum over cells.
    pub fn param_grad(
        &self,
        h: usize,
        w: usize,
        pixels: &[u8],
        logit_grad: &[f64],
    ) -> Result<Vec<f64>> {
        let (gh, gw) = self.grid_dims(h, w, pixels.len())?;
        if logit_grad.len() != gh * gw * self.q {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient length {} != {gh}*{gw}*{}",
                logit_grad.len(),
                self.q
            )));
        }
        let input = self.patch_h * self.patch_w;
        let mut grad = vec![0.0; self.theta.len()];
        let mut feat = vec![0.0; input];
        for i in 0..gh {
            for j in 0..gw {
                self.features(pixels, w, i * self.patch_h, j * self.patch_w, &mut feat);
                let dl = &logit_grad[(i * gw + j) * self.q..(i * gw + j + 1) * self.q];
                if self.hidden == 0 {
                    let b_start = self.q * input;
                    for k in 0..self.q {
                        let row = &mut grad[k * input..(k + 1) * input];
                        for (g, xv) in row.iter_mut().zip(&feat) {
                            *g += dl[k] * xv;
                        }
                        grad[b_start + k] += dl[k];
                    }
                } else {
                    // Recompute the hidden activations for this patch.
                    let mut h_pre = vec![0.0; self.hidden];
                    Self::affine(&self.theta, 0, self.hidden * input, &feat, &mut h_pre);
                    let h_act: Vec<f64> = h_pre.iter().map(|&v| v.max(0.0)).collect();
                    let w2_start = self.hidden * input + self.hidden;
                    let b2_start = w2_start + self.q * self.hidden;
                    // Output layer and the gradient flowing back into h.
                    let mut dh = vec![0.0; self.hidden];
                    for k in 0..self.q {
                        let w2_row = &self.theta[w2_start + k * self.hidden..w2_start + (k + 1) * self.hidden];
                        let g2_row = &mut grad[w2_start + k * self.hidden..w2_start + (k + 1) * self.hidden];
                        for m in 0..self.hidden {
                            g2_row[m] += dl[k] * h_act[m];
                            dh[m] += dl[k] * w2_row[m];
                        }
                        grad[b2_start + k] += dl[k];
                    }
                    // ReLU gate, then the input layer.
                    let b1_start = self.hidden * input;
                    for m in 0..self.hidden {
                        if h_pre[m] <= 0.0 {
                            continue;
                        }
                        let row = &mut grad[m * input..(m + 1) * input];
                        for (g, xv) in row.iter_mut().zip(&feat) {
                            *g += dh[m] * xv;
                        }
                        grad[b1_start + m] += dh[m];
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Writes the model as a one-line JSON header followed by the raw
    /// little-endian `f64` parameter block.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let header = CheckpointHeader {
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            q: self.q,
            hidden: self.hidden,
            param_count: self.theta.len(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for &v in &self.theta {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`PatchClassifier::save`], checking the
    /// declared shapes against the payload.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ShapeMismatch("checkpoint has no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
        let expected = param_count(header.patch_h, header.patch_w, header.q, header.hidden);
        if header.param_count != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint declares {} parameters but its shapes need {expected}",
                header.param_count
            )));
        }
        let payload = &bytes[newline + 1..];
        if payload.len() != expected * 8 {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                expected * 8
            )));
        }
        let theta: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let mut model = PatchClassifier::zeroed(header.patch_h, header.patch_w, header.q, header.hidden)?;
        model.theta = theta;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    patch_h: usize,
    patch_w: usize,
    q: usize,
    hidden: usize,
    param_count: usize,
}

/// Anything that turns a sample into a probability grid; lets evaluation run
/// against test doubles as well as trained models.
pub trait GridProducer: Sync {
    fn produce(&self, sample: &SampleRecord) -> Result<ProbGrid>;
}

impl GridProducer for PatchClassifier {
    fn produce(&self, sample: &SampleRecord) -> Result<ProbGrid> {
        Ok(softmax_grid(&self.forward(sample.h, sample.w, &sample.pixels)?))
    }
}

/// Per-parameter state for the ADADELTA update rule, which scales each raw
/// gradient by the ratio of running RMS step size to running RMS gradient and
/// therefore needs no learning rate.
#[derive(Debug, Clone)]
pub struct AdadeltaState {
    rho: f64,
    eps: f64,
    avg_sq_grad: Vec<f64>,
    avg_sq_step: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize, rho: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!(
                "decay rho must be in [0, 1), got {rho}"
            )));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive and finite, got {eps}"
            )));
        }
        Ok(AdadeltaState {
            rho,
            eps,
            avg_sq_grad: vec![0.0; len],
            avg_sq_step: vec![0.0; len],
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// One ADADELTA update in place:
/// accumulate `E[g^2]`, step by `-sqrt(E[dx^2]+eps)/sqrt(E[g^2]+eps) * g`,
/// then accumulate `E[dx^2]`.
pub fn adadelta_step(params: &mut [f64], grad: &[f64], state: &mut AdadeltaState) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.avg_sq_grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "adadelta shapes disagree: {} params, {} grads, {} state slots",
            params.len(),
            grad.len(),
            state.avg_sq_grad.len()
        )));
    }
    let (rho, eps) = (state.rho, state.eps);
    for i in 0..params.len() {
        let g = grad[i];
        let eg = rho * state.avg_sq_grad[i] + (1.0 - rho) * g * g;
        state.avg_sq_grad[i] = eg;
        let step = -((state.avg_sq_step[i] + eps).sqrt() / (eg + eps).sqrt()) * g;
        state.avg_sq_step[i] = rho * state.avg_sq_step[i] + (1.0 - rho) * step * step;
        params[i] += step;
    }
    Ok(())
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden width of the patch classifier; 0 trains the affine model.
    pub hidden: usize,
    pub rho: f64,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss_mode: LossMode,
    /// Decoding strategy used for the per-epoch holdout metrics.
    pub strategy: GroupingStrategy,
    /// Trailing fraction of the input reserved for holdout metrics.
    pub holdout_fraction: f64,
    pub seed: u64,
    /// When set, `epoch-NNN.ckpt` and `final.ckpt` are written here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            hidden: 64,
            rho: 0.95,
            eps: 1e-6,
            lambda1: 0.9,
            lambda2: 0.1,
            loss_mode: LossMode::default(),
            strategy: GroupingStrategy::Rows,
            holdout_fraction: 0.1,
            seed: 7,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidConfig(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        LambdaParams::new(self.lambda1, self.lambda2)?;
        AdadeltaState::new(0, self.rho, self.eps)?;
        Ok(())
    }

    pub fn lambda(&self) -> LambdaParams {
        LambdaParams::new(self.lambda1, self.lambda2).expect("validated lambda")
    }
}

/// Progress record for one epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean loss over the samples actually trained on this epoch.
    pub mean_train_loss: f64,
    /// Samples skipped because their targets carry no probability mass
    /// (structurally impossible on the grid, e.g. a full-width sequence with
    /// an adjacent repeat).
    pub skipped: usize,
    /// Decoded metrics on the holdout split, when one exists.
    pub holdout: Option<DatasetMetrics>,
}

fn sample_loss_grad(
    model: &PatchClassifier,
    record: &SampleRecord,
    targets: &crate::labels::TargetSet,
    lambda: &LambdaParams,
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    let z = model.forward(record.h, record.w, &record.pixels)?;
    let (breakdown, logit_grad) = grad_wrt_logits(&z, targets, lambda, mode)?;
    let grad = model.param_grad(record.h, record.w, &record.pixels, &logit_grad)?;
    Ok((breakdown.loss, grad))
}

/// Trains a patch classifier with ADADELTA on the lattice loss.
///
/// The batch objective is the sum of per-sample losses; per-sample work runs
/// in parallel but gradients are reduced in sample order, so results are
/// reproducible for a fixed seed. The trailing `holdout_fraction` of
/// `samples` is excluded from training and scored (decode, match, aggregate)
/// after every epoch. Samples whose targets have zero probability mass are
/// skipped and counted, not fatal; non-finite losses or parameters abort with
/// a divergence error.
pub fn train(
    samples: &[SampleRecord],
    alphabet: &Alphabet,
    config: &TrainConfig,
) -> Result<(PatchClassifier, Vec<EpochStats>)> {
    use crate::synthgen::GLYPH_SIDE;

    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let lambda = config.lambda();
    let prepared: Vec<(&SampleRecord, crate::labels::TargetSet)> = samples
        .iter()
        .map(|s| {
            s.validate()?;
            Ok((s, s.target_set(alphabet)?))
        })
        .collect::<Result<_>>()?;
    let mut holdout_len = (samples.len() as f64 * config.holdout_fraction).round() as usize;
    if holdout_len >= samples.len() {
        holdout_len = samples.len() - 1;
    }
    let train_len = samples.len() - holdout_len;
    let holdout: Vec<SampleRecord> = samples[train_len..].to_vec();

    let mut model = PatchClassifier::new(
        GLYPH_SIDE,
        GLYPH_SIDE,
        alphabet.q(),
        config.hidden,
        config.seed,
    )?;
    let mut opt = AdadeltaState::new(model.num_params(), config.rho, config.eps)?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut stats = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_len).collect();
    let mut grad_sum = vec![0.0; model.num_params()];
    for epoch in 1..=config.epochs {
        // A dedicated stream per epoch keeps shuffles independent of how many
        // draws earlier epochs consumed.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        let mut skipped = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let outcomes: Vec<(usize, Result<(f64, Vec<f64>)>)> = chunk
                .par_iter()
                .map(|&i| {
                    let (record, targets) = &prepared[i];
                    (
                        i,
                        sample_loss_grad(&model, record, targets, &lambda, config.loss_mode),
                    )
                })
                .collect();
            grad_sum.fill(0.0);
            for (i, outcome) in outcomes {
                match outcome {
                    Ok((loss, grad)) => {
                        if loss.is_nan() {
                            return Err(Error::Diverged {
                                epoch,
                                batch: batch_no,
                                detail: format!("sample {i} produced a NaN loss"),
                            });
                        }
                        loss_sum += loss;
                        counted += 1;
                        for (acc, g) in grad_sum.iter_mut().zip(&grad) {
                            *acc += g;
                        }
                    }
                    Err(Error::VanishingMass { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            adadelta_step(model.params_mut(), &grad_sum, &mut opt)?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    detail: "non-finite parameter after update".into(),
                });
            }
        }

        let holdout_metrics = if holdout.is_empty() {
            None
        } else {
            Some(evaluate(&model, &holdout, alphabet, config.strategy)?.0)
        };
        if let Some(dir) = &config.checkpoint_dir {
            model.save(dir.join(format!("epoch-{epoch:03}.ckpt")))?;
        }
        stats.push(EpochStats {
            epoch,
            mean_train_loss: if counted == 0 {
                0.0
            } else {
                loss_sum / counted as f64
            },
            skipped,
            holdout: holdout_metrics,
        });
    }
    if let Some(dir) = &config.checkpoint_dir {
        model.save(dir.join("final.ckpt"))?;
    }
    Ok((model, stats))
}

/// Scores a producer on a dataset: produce a grid per sample, argmax, decode
/// with `strategy`, match against the sample's targets, and pool.
pub fn evaluate<G: GridProducer + ?Sized>(
    producer: &G,
    samples: &[SampleRecord],
    alphabet: &Alphabet,
    strategy: GroupingStrategy,
) -> Result<(DatasetMetrics, Vec<MatchReport>)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no samples to evaluate".into()));
    }
    let reports: Vec<MatchReport> = samples
        .par_iter()
        .map(|sample| {
            sample.validate()?;
            let targets = sample.target_set(alphabet)?;
            let grid = producer.produce(sample)?;
            let decoded = decode_with_strategy(&argmax_grid(&grid), strategy).to_sequences();
            Ok(match_sets(&decoded, &targets))
        })
        .collect::<Result<_>>()?;
    let metrics = aggregate(&reports)?;
    Ok((metrics, reports))
}
