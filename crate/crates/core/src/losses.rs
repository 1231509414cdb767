//! Training objectives: log-mel L1, hinge adversarial losses against
//! multi-period and multi-resolution discriminators, feature matching, CTC,
//! and their weighted sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::asr::PosteriorGrid;
use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::ctc::ctc_nll;
use crate::dsp::{stft, MelSpectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::nn::{conv_time, leaky_relu, scalar, ParamStore};
use crate::symbols::{LabelSequence, BLANK, VOCAB_SIZE};

pub const DISCRIMINATOR_KIND: &str = "discriminators";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mel: f64,
    pub lambda_gan: f64,
    pub lambda_fm: f64,
    pub lambda_ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mel: 1.0,
            lambda_gan: 0.5,
            lambda_fm: 1.0,
            lambda_ctc: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mel", self.lambda_mel),
            ("lambda_gan", self.lambda_gan),
            ("lambda_fm", self.lambda_fm),
            ("lambda_ctc", self.lambda_ctc),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn generator_loss(l_mel: f64, l_gan: f64, l_fm: f64, l_ctc: f64, w: &LossWeights) -> f64 {
    w.lambda_mel * l_mel + w.lambda_gan * l_gan + w.lambda_fm * l_fm + w.lambda_ctc * l_ctc
}

/// Tensor form of [`generator_loss`]; zero-weighted terms are left out of the graph.
pub fn generator_loss_tensor(l_mel: &Tensor, l_gan: &Tensor, l_fm: &Tensor, l_ctc: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let mut total = (l_mel * w.lambda_mel)?;
    for (term, lambda) in [(l_gan, w.lambda_gan), (l_fm, w.lambda_fm), (l_ctc, w.lambda_ctc)] {
        if lambda != 0.0 {
            total = (total + (term * lambda)?)?;
        }
    }
    Ok(total)
}

/// 40-band log-mel front end with the given STFT settings and a 1e-5 floor.
pub fn mel_front_end(sample_rate: u32, n_fft: usize, hop: usize) -> Result<MelSpectrogram> {
    MelSpectrogram::new(sample_rate, n_fft, hop, 40, 1e-5)
}

/// Mean absolute log-mel difference between two `(B, L)` batches.
pub fn mel_loss_batch(mel: &MelSpectrogram, reference: &Tensor, generated: &Tensor) -> Result<Tensor> {
    if reference.dims() != generated.dims() {
        return Err(Error::shape(format!("{:?}", reference.dims()), format!("{:?}", generated.dims())));
    }
    let a = mel.log_mel(reference)?;
    let b = mel.log_mel(generated)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Single-utterance mel loss at the desk-scale defaults (n_fft 256, hop 64).
pub fn mel_loss(u_ref: &Waveform, u_gen: &Waveform) -> Result<f64> {
    if u_ref.len() != u_gen.len() {
        return Err(Error::LengthMismatch {
            left: u_ref.len(),
            right: u_gen.len(),
        });
    }
    if u_ref.sample_rate != u_gen.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: u_ref.sample_rate,
            got: u_gen.sample_rate,
        });
    }
    let mel = mel_front_end(u_ref.sample_rate, 256, 64)?;
    let l = mel_loss_batch(&mel, &u_ref.to_tensor(DType::F64)?, &u_gen.to_tensor(DType::F64)?)?;
    scalar(&l)
}

/// CTC negative log-likelihood of `target` under a posterior grid.
pub fn ctc_loss(p: &PosteriorGrid, target: &LabelSequence) -> Result<f64> {
    ctc_nll(p.log_probs(), p.frames(), VOCAB_SIZE, target.as_slice(), BLANK)
}

/// Hinge generator loss: mean over discriminators of `mean(-score)`.
pub fn gen_adv_loss(scores_fake: &[Tensor]) -> Result<Tensor> {
    let terms = scores_fake
        .iter()
        .map(|s| s.neg()?.mean_all())
        .collect::<candle_core::Result<Vec<_>>>()?;
    mean_of(&terms)
}

/// Hinge discriminator loss, averaged over discriminators.
pub fn disc_loss(scores_real: &[Tensor], scores_fake: &[Tensor]) -> Result<Tensor> {
    if scores_real.len() != scores_fake.len() {
        return Err(Error::LengthMismatch {
            left: scores_real.len(),
            right: scores_fake.len(),
        });
    }
    let mut terms = Vec::with_capacity(scores_real.len());
    for (r, f) in scores_real.iter().zip(scores_fake) {
        let real = (1.0 - r)?.relu()?.mean_all()?;
        let fake = (f + 1.0)?.relu()?.mean_all()?;
        terms.push((real + fake)?);
    }
    mean_of(&terms)
}

/// Mean absolute difference over every layer, averaged per discriminator and
/// then across discriminators.
pub fn feature_matching_loss(features_real: &[Vec<Tensor>], features_fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if features_real.len() != features_fake.len() {
        return Err(Error::LengthMismatch {
            left: features_real.len(),
            right: features_fake.len(),
        });
    }
    let mut per_disc = Vec::with_capacity(features_real.len());
    for (real, fake) in features_real.iter().zip(features_fake) {
        if real.len() != fake.len() {
            return Err(Error::LengthMismatch {
                left: real.len(),
                right: fake.len(),
            });
        }
        let mut layers = Vec::with_capacity(real.len());
        for (r, f) in real.iter().zip(fake) {
            if r.dims() != f.dims() {
                return Err(Error::shape(format!("{:?}", r.dims()), format!("{:?}", f.dims())));
            }
            layers.push((r - f)?.abs()?.mean_all()?);
        }
        per_disc.push(mean_of(&layers)?);
    }
    mean_of(&per_disc)
}

fn mean_of(terms: &[Tensor]) -> Result<Tensor> {
    if terms.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(terms, 0)?.sum_all()? / n)?)
}

/// Right-pads `(B, L)` to a multiple of `period` and folds it to `(B, period, L'/period)`;
/// row `j` holds samples `j, j + period, j + 2 * period, ...`.
pub fn period_fold(x: &Tensor, period: usize) -> Result<Tensor> {
    let (b, len) = x.dims2()?;
    let padded_len = len.div_ceil(period) * period;
    let x = if padded_len > len {
        x.pad_with_zeros(1, 0, padded_len - len)?
    } else {
        x.clone()
    };
    Ok(x.reshape((b, padded_len / period, period))?.transpose(1, 2)?.contiguous()?)
}

/// Keeps every `stride`-th frame of a `(N, T, C)` tensor, starting at frame 0.
fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (n, t, c) = x.dims3()?;
    let padded = t.div_ceil(stride) * stride;
    let x = if padded > t { x.pad_with_zeros(1, 0, padded - t)? } else { x.clone() };
    Ok(x.reshape((n, padded / stride, stride, c))?.narrow(2, 0, 1)?.squeeze(2)?)
}

/// 3x3 convolution on channel-last `(B, H, W, C_in)` with zero padding 1 and
/// stride `stride` along `W`; `w` is `(9 * C_in, C_out)` with taps laid out
/// `dy * 3 + dx`. Output is `(B, H, ceil(W / stride), C_out)`.
///
/// The three `dx` taps are gathered (already strided) and multiplied in one
/// matmul that yields all three `dy` partial outputs, which are then shifted
/// along `H` and summed.
fn conv2d_3x3(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, h, wd, c) = x.dims4()?;
    let o = w.dim(1)?;
    let wo = wd.div_ceil(stride);
    let w = w.reshape((3, 3 * c, o))?.transpose(0, 1)?.reshape((3 * c, 3 * o))?;
    let padded = x.pad_with_zeros(2, 1, stride * wo + 1 - wd)?;
    let taps = (0..3)
        .map(|dx| {
            let tap = padded.narrow(2, dx, stride * wo)?;
            if stride == 1 {
                Ok(tap)
            } else {
                tap.reshape((n, h, wo, stride, c))?.narrow(3, 0, 1)?.squeeze(3)
            }
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    let y = Tensor::cat(&taps, 3)?
        .reshape((n * h * wo, 3 * c))?
        .matmul(&w)?
        .reshape((n, h, wo, 3 * o))?
        .pad_with_zeros(1, 1, 1)?;
    let mut acc = y.narrow(1, 0, h)?.narrow(3, 0, o)?;
    for dy in 1..3 {
        acc = (acc + y.narrow(1, dy, h)?.narrow(3, dy * o, o)?)?;
    }
    Ok(acc.broadcast_add(b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// `(n_fft, hop)` pairs.
    pub resolutions: Vec<(usize, usize)>,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5],
            resolutions: vec![(128, 32), (256, 64)],
            channels: 8,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let is_prime = |p: usize| p >= 2 && (2..p).take_while(|d| d * d <= p).all(|d| !p.is_multiple_of(d));
        for (i, &p) in self.periods.iter().enumerate() {
            if !is_prime(p) || self.periods[..i].contains(&p) {
                return Err(Error::InvalidValue(format!("periods must be distinct primes, got {:?}", self.periods)));
            }
        }
        for &(n_fft, hop) in &self.resolutions {
            StftConfig::new(n_fft, hop)?;
        }
        if self.channels == 0 || self.periods.len() + self.resolutions.len() == 0 {
            return Err(Error::InvalidValue("discriminator bank is empty".into()));
        }
        Ok(())
    }
}

const PERIOD_LAYERS: [(usize, usize); 3] = [(5, 3), (5, 3), (5, 1)];
/// Frequency strides of the resolution discriminators' hidden layers.
const RESOLUTION_STRIDES: [usize; 3] = [2, 2, 1];

#[derive(Debug, Clone)]
struct Layer {
    w: Tensor,
    b: Tensor,
}

impl Layer {
    fn weights(&self, detach: bool) -> (Tensor, Tensor) {
        if detach {
            (self.w.detach(), self.b.detach())
        } else {
            (self.w.clone(), self.b.clone())
        }
    }
}

#[derive(Debug, Clone)]
struct PeriodDiscriminator {
    period: usize,
    layers: Vec<Layer>,
    post: Layer,
}

#[derive(Debug, Clone)]
struct ResolutionDiscriminator {
    stft: StftConfig,
    layers: Vec<Layer>,
    post: Layer,
}

/// Output of one discriminator: a score map and its intermediate activations.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    config: DiscriminatorConfig,
    store: ParamStore,
    periods: Vec<PeriodDiscriminator>,
    resolutions: Vec<ResolutionDiscriminator>,
}

impl DiscriminatorBank {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut store = ParamStore::new(dtype, seed);
        let layer = |store: &mut ParamStore, name: String, fan_in: usize, out: usize| -> Result<Layer> {
            Ok(Layer {
                w: store.normal(format!("{name}.w"), &[fan_in, out], (2.0 / fan_in as f64).sqrt())?,
                b: store.constant(format!("{name}.b"), &[out], 0.0)?,
            })
        };
        let mut periods = Vec::new();
        for &p in &config.periods {
            let mut layers = Vec::new();
            let mut cin = 1;
            for (i, &(k, _)) in PERIOD_LAYERS.iter().enumerate() {
                layers.push(layer(&mut store, format!("mpd{p}.conv{i}"), k * cin, c)?);
                cin = c;
            }
            let post = layer(&mut store, format!("mpd{p}.post"), 3 * c, 1)?;
            periods.push(PeriodDiscriminator { period: p, layers, post });
        }
        let mut resolutions = Vec::new();
        for &(n_fft, hop) in &config.resolutions {
            let mut layers = Vec::new();
            let mut cin = 1;
            for i in 0..RESOLUTION_STRIDES.len() {
                layers.push(layer(&mut store, format!("mrd{n_fft}.conv{i}"), 9 * cin, c)?);
                cin = c;
            }
            let post = layer(&mut store, format!("mrd{n_fft}.post"), 9 * c, 1)?;
            resolutions.push(ResolutionDiscriminator {
                stft: StftConfig::new(n_fft, hop)?,
                layers,
                post,
            });
        }
        Ok(Self {
            config,
            store,
            periods,
            resolutions,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.periods.len() + self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs every discriminator on a `(B, L)` batch. With `detach_params` the
    /// weights are cut from the graph so gradients reach only the input.
    pub fn discriminate_batch(&self, x: &Tensor, detach_params: bool) -> Result<Vec<DiscOutput>> {
        let x = x.to_dtype(self.store.dtype())?;
        let mut out = Vec::with_capacity(self.len());
        for d in &self.periods {
            let folded = period_fold(&x, d.period)?;
            let (b, p, n) = folded.dims3()?;
            let mut h = folded.reshape((b * p, n, 1))?;
            let mut features = Vec::with_capacity(PERIOD_LAYERS.len() + 1);
            for (layer, &(k, stride)) in d.layers.iter().zip(PERIOD_LAYERS.iter()) {
                let (w, bias) = layer.weights(detach_params);
                h = leaky_relu(&subsample(&conv_time(&h, &w, Some(&bias), k)?, stride)?, 0.1)?;
                features.push(h.clone());
            }
            let (w, bias) = d.post.weights(detach_params);
            let score = conv_time(&h, &w, Some(&bias), 3)?;
            features.push(score.clone());
            out.push(DiscOutput { score, features });
        }
        for d in &self.resolutions {
            let mag = stft(&x, &d.stft)?.magnitude()?;
            let mut h = (mag + 1.0)?.log()?.unsqueeze(3)?;
            let mut features = Vec::with_capacity(RESOLUTION_STRIDES.len() + 1);
            for (layer, &stride) in d.layers.iter().zip(RESOLUTION_STRIDES.iter()) {
                let (w, bias) = layer.weights(detach_params);
                h = leaky_relu(&conv2d_3x3(&h, &w, &bias, stride)?, 0.1)?;
                features.push(h.clone());
            }
            let (w, bias) = d.post.weights(detach_params);
            let score = conv2d_3x3(&h, &w, &bias, 1)?;
            features.push(score.clone());
            out.push(DiscOutput { score, features });
        }
        Ok(out)
    }

    pub fn discriminate(&self, u: &Waveform) -> Result<Vec<DiscOutput>> {
        if u.is_empty() {
            return Err(Error::EmptyAudio);
        }
        self.discriminate_batch(&u.to_tensor(self.store.dtype())?, false)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(DISCRIMINATOR_KIND, serde_json::to_value(&self.config)?);
        ck.tensors = self.store.export("")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: DiscriminatorConfig = serde_json::from_value(ck.meta.clone())?;
        let bank = Self::new(config, 0)?;
        bank.store.import("", &ck.tensors)?;
        Ok(bank)
    }
}

pub fn scores(outputs: &[DiscOutput]) -> Vec<Tensor> {
    outputs.iter().map(|o| o.score.clone()).collect()
}

pub fn features(outputs: &[DiscOutput]) -> Vec<Vec<Tensor>> {
    outputs.iter().map(|o| o.features.clone()).collect()
}
