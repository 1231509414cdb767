//! The auxiliary CTC recogniser.
//!
//! Waveform in, per-frame character log-posteriors out. The front end is a
//! strided convolution with a fixed Hann-windowed Fourier basis (stride equal
//! to the vocoder hop, so one posterior frame lines up with one vocoder frame),
//! followed by a log-mel filterbank, a learned per-frame normalisation, two temporal
//! convolutions and a linear classifier. Everything is differentiable with
//! respect to the input samples, which is what lets the CTC loss push on the
//! vocoder output while the recogniser itself stays frozen.

use candle_core::{DType, Tensor, D};
use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::ctc::{ctc_loss_batch, Reduction};
use crate::dsp::{mel_filterbank, stft, StftConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{conv_time, device, layer_norm, linear, log_softmax, scalar, ParamStore};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::symbols::{collapse, encode_text, to_text, CharSequence, CharVocabulary, LabelSequence, VOCAB_SIZE};

pub const RECOGNISER_KIND: &str = "recogniser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecogniserConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    /// Downsampling factor; equal to the vocoder hop so posterior frames align.
    pub hop_length: usize,
    /// Mel bands of the fixed front end.
    pub n_mels: usize,
    pub hidden: usize,
    pub kernel_size: usize,
}

impl Default for RecogniserConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            n_fft: 256,
            hop_length: 64,
            n_mels: 40,
            hidden: 96,
            kernel_size: 5,
        }
    }
}

/// `T' x 31` log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    log_probs: Vec<f64>,
    frames: usize,
    pub frame_rate: f64,
}

impl PosteriorGrid {
    pub fn new(log_probs: Vec<f64>, frames: usize, frame_rate: f64) -> Result<Self> {
        if log_probs.len() != frames * VOCAB_SIZE {
            return Err(Error::shape(format!("{frames} x {VOCAB_SIZE}"), format!("{} values", log_probs.len())));
        }
        Ok(Self {
            log_probs,
            frames,
            frame_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Largest deviation of a row's log-sum-exp from zero.
    pub fn normalisation_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-frame argmax; ties go to the lowest index.
pub fn greedy_sequence(p: &PosteriorGrid) -> CharSequence {
    let indices = (0..p.frames())
        .map(|t| {
            let row = p.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    CharSequence::new(indices).expect("argmax below vocabulary size")
}

#[derive(Debug, Clone)]
pub struct Recogniser {
    config: RecogniserConfig,
    store: ParamStore,
    filters: Tensor,
    norm_g: Tensor,
    norm_b: Tensor,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl Recogniser {
    pub fn new(config: RecogniserConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: RecogniserConfig, seed: u64, dtype: DType) -> Result<Self> {
        let stft = StftConfig::new(config.n_fft, config.hop_length)?;
        if config.kernel_size.is_multiple_of(2) || config.hidden == 0 || config.n_mels == 0 {
            return Err(Error::InvalidValue("recogniser needs an odd kernel, hidden >= 1 and n_mels >= 1".into()));
        }
        let filters = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels);
        let filters = Tensor::from_vec(filters, (stft.bins(), config.n_mels), &device())?.to_dtype(dtype)?;
        let bins = config.n_mels;
        let (h, k) = (config.hidden, config.kernel_size);
        let mut store = ParamStore::new(dtype, seed);
        let norm_g = store.constant("norm.g", &[bins], 1.0)?;
        let norm_b = store.constant("norm.b", &[bins], 0.0)?;
        let conv1_w = store.normal("conv1.w", &[k * bins, h], (2.0 / (k * bins) as f64).sqrt())?;
        let conv1_b = store.constant("conv1.b", &[h], 0.0)?;
        let conv2_w = store.normal("conv2.w", &[k * h, h], (2.0 / (k * h) as f64).sqrt())?;
        let conv2_b = store.constant("conv2.b", &[h], 0.0)?;
        let out_w = store.normal("out.w", &[h, VOCAB_SIZE], (1.0 / h as f64).sqrt())?;
        let out_b = store.constant("out.b", &[VOCAB_SIZE], 0.0)?;
        Ok(Self {
            config,
            store,
            filters,
            norm_g,
            norm_b,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &RecogniserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Copy whose weights are cut from the autograd graph: gradients still
    /// flow through it to the input, never into it.
    pub fn frozen(&self) -> Self {
        let mut r = self.clone();
        for t in [
            &mut r.norm_g,
            &mut r.norm_b,
            &mut r.conv1_w,
            &mut r.conv1_b,
            &mut r.conv2_w,
            &mut r.conv2_b,
            &mut r.out_w,
            &mut r.out_b,
        ] {
            *t = t.detach();
        }
        r
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.sample_rate as f64 / self.config.hop_length as f64
    }

    /// Differentiable `(B, L)` waveforms to `(B, ceil(L / hop), 31)` log-probabilities.
    pub fn log_probs_batch(&self, x: &Tensor) -> Result<Tensor> {
        let cfg = StftConfig::new(self.config.n_fft, self.config.hop_length)?;
        let power = stft(x, &cfg)?.power()?;
        let (b, t, f) = power.dims3()?;
        let mel = power.reshape((b * t, f))?.matmul(&self.filters)?.reshape((b, t, self.config.n_mels))?;
        let feats = (mel + 1e-6)?.log()?;
        let feats = layer_norm(&feats, &self.norm_g, &self.norm_b, 1e-5)?;
        let k = self.config.kernel_size;
        let h = conv_time(&feats, &self.conv1_w, Some(&self.conv1_b), k)?.gelu()?;
        let h = conv_time(&h, &self.conv2_w, Some(&self.conv2_b), k)?.gelu()?;
        let logits = linear(&h, &self.out_w, Some(&self.out_b))?;
        log_softmax(&logits)
    }

    pub fn frame_posteriors(&self, u: &Waveform) -> Result<PosteriorGrid> {
        if u.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if u.sample_rate != self.config.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.config.sample_rate,
                got: u.sample_rate,
            });
        }
        let lp = self.log_probs_batch(&u.to_tensor(self.dtype())?)?.squeeze(0)?;
        let frames = lp.dim(0)?;
        let values: Vec<f64> = lp.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        PosteriorGrid::new(values, frames, self.frame_rate())
    }

    pub fn greedy(&self, u: &Waveform) -> Result<CharSequence> {
        Ok(greedy_sequence(&self.frame_posteriors(u)?))
    }

    pub fn transcribe(&self, u: &Waveform, vocab: &CharVocabulary) -> Result<String> {
        Ok(to_text(&collapse(&self.greedy(u)?), vocab))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(RECOGNISER_KIND, serde_json::to_value(&self.config)?);
        ck.tensors = self.store.export("")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: RecogniserConfig = serde_json::from_value(ck.meta.clone())?;
        let r = Self::new(config, 0)?;
        r.store.import("", &ck.tensors)?;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(RECOGNISER_KIND, path)?;
        Self::from_checkpoint(&ck)
    }
}

/// Convenience wrapper matching the composition greedy -> collapse -> text.
pub fn transcribe(u: &Waveform, model: &Recogniser, vocab: &CharVocabulary) -> Result<String> {
    model.transcribe(u, vocab)
}

pub fn frame_posteriors(u: &Waveform, model: &Recogniser) -> Result<PosteriorGrid> {
    model.frame_posteriors(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AsrTrainOptions {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// A transcribed training utterance.
#[derive(Debug, Clone)]
pub struct LabelledAudio {
    pub audio: Waveform,
    pub labels: LabelSequence,
}

impl LabelledAudio {
    pub fn new(audio: Waveform, transcript: &str, vocab: &CharVocabulary) -> Result<Self> {
        Ok(Self {
            audio,
            labels: encode_text(transcript, vocab)?,
        })
    }
}

/// Fits the recogniser with CTC on transcribed audio; returns the per-step loss.
pub fn train_recogniser(model: &Recogniser, data: &[LabelledAudio], opts: &AsrTrainOptions) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidValue("no training utterances".into()));
    }
    let hop = model.config.hop_length;
    let mut opt = AdamW::new(model.store.vars(), AdamWConfig::default())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let max_len = batch.iter().map(|u| u.audio.len().div_ceil(hop) * hop).max().unwrap_or(hop);
        let mut flat = Vec::with_capacity(batch.len() * max_len);
        let mut lengths = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for item in &batch {
            flat.extend_from_slice(&item.audio.samples);
            flat.extend(std::iter::repeat_n(0.0, max_len - item.audio.len()));
            lengths.push(item.audio.len().div_ceil(hop));
            targets.push(item.labels.clone());
        }
        let x = Tensor::from_vec(flat, (batch.len(), max_len), &device())?.to_dtype(model.dtype())?;
        let lp = model.log_probs_batch(&x)?;
        let loss = ctc_loss_batch(&lp, &targets, &lengths, Reduction::MeanPerLabel, Execution::Parallel)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "recogniser ctc".into(),
            });
        }
        let grads = loss.backward()?;
        let lr = cosine_lr(step, opts.steps, opts.learning_rate)?;
        opt.clipped_step(&grads, lr, Some(10.0))?;
        if step % 50 == 0 {
            debug!("asr step {step} loss {value:.4}");
        }
        losses.push(value);
    }
    Ok(losses)
}

/// Mean over rows of the per-frame log-probability mass check; handy in tests.
pub fn max_row_error(lp: &Tensor) -> Result<f64> {
    let lse = lp.log_sum_exp(D::Minus1)?.abs()?.flatten_all()?.max(0)?;
    scalar(&lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::Rng;

    fn grid_from_rows(rows: &[Vec<f64>]) -> PosteriorGrid {
        PosteriorGrid::new(rows.iter().flatten().copied().collect(), rows.len(), 125.0).unwrap()
    }

    fn one_hot(k: usize) -> Vec<f64> {
        (0..VOCAB_SIZE).map(|i| if i == k { 0.0 } else { -1e9 }).collect()
    }

    #[test]
    fn greedy_examples() {
        let g = grid_from_rows(&[one_hot(5), one_hot(0), one_hot(30)]);
        assert_eq!(greedy_sequence(&g).as_slice(), &[5, 0, 30]);
        let uniform = vec![-(VOCAB_SIZE as f64).ln(); VOCAB_SIZE];
        let g = grid_from_rows(&[uniform.clone(), uniform]);
        assert_eq!(greedy_sequence(&g).as_slice(), &[0, 0]);
        assert_eq!(greedy_sequence(&g).len(), g.frames());
    }

    #[test]
    fn transcript_of_a_spelled_grid() {
        let vocab = CharVocabulary::standard();
        let (a, b) = (5, 6);
        let g = grid_from_rows(&[one_hot(a), one_hot(a), one_hot(0), one_hot(b)]);
        assert_eq!(to_text(&collapse(&greedy_sequence(&g)), &vocab), "ab");
        let g = grid_from_rows(&[one_hot(0), one_hot(0)]);
        assert_eq!(to_text(&collapse(&greedy_sequence(&g)), &vocab), "");
    }

    #[test]
    fn silence_gives_normalised_rows() {
        let r = Recogniser::new(RecogniserConfig::default(), 1).unwrap();
        let p = r.frame_posteriors(&Waveform::new(vec![0.0; 640], 8000)).unwrap();
        assert_eq!(p.frames(), 10);
        assert!(p.log_probs().iter().all(|v| v.is_finite()));
        assert!(p.normalisation_error() < 1e-5);
    }

    #[test]
    fn frame_count_scales_with_length() {
        let r = Recogniser::new(RecogniserConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let short: Vec<f32> = (0..1000).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let mut long = short.clone();
        long.extend_from_slice(&short);
        let t1 = r.frame_posteriors(&Waveform::new(short, 8000)).unwrap().frames();
        let t2 = r.frame_posteriors(&Waveform::new(long, 8000)).unwrap().frames();
        assert!((t2 as i64 - 2 * t1 as i64).abs() <= 1, "{t1} {t2}");
    }

    #[test]
    fn input_errors() {
        let r = Recogniser::new(RecogniserConfig::default(), 1).unwrap();
        assert!(matches!(r.frame_posteriors(&Waveform::new(vec![], 8000)), Err(Error::EmptyAudio)));
        assert!(matches!(
            r.frame_posteriors(&Waveform::new(vec![0.0; 64], 16000)),
            Err(Error::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn batching_does_not_change_results() {
        let r = Recogniser::new(RecogniserConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f32> = (0..640).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let b: Vec<f32> = (0..640).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let single = r.log_probs_batch(&Tensor::from_slice(&b, (1, 640), &device()).unwrap()).unwrap();
        let mut both = a.clone();
        both.extend_from_slice(&b);
        let batched = r.log_probs_batch(&Tensor::from_vec(both, (2, 640), &device()).unwrap()).unwrap();
        let diff = (batched.get(1).unwrap() - single.get(0).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-5);
        assert!(max_row_error(&batched).unwrap() < 1e-5);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = RecogniserConfig {
            hidden: 8,
            ..RecogniserConfig::default()
        };
        let r = Recogniser::with_dtype(cfg, 4, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 64 * 4;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let weights: Vec<f64> = (0..4 * VOCAB_SIZE).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt = Tensor::from_slice(&weights, (1, 4, VOCAB_SIZE), &device()).unwrap();
        let objective = |x: &[f64]| -> f64 {
            let t = Tensor::from_slice(x, (1, n), &device()).unwrap();
            let lp = r.log_probs_batch(&t).unwrap();
            (lp * &wt).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let var = Var::from_slice(&x, (1, n), &device()).unwrap();
        let lp = r.log_probs_batch(var.as_tensor()).unwrap();
        let grads = (lp * &wt).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in (0..n).step_by(17) {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() / g[i].abs().max(1e-6) < 1e-3, "sample {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = Recogniser::new(RecogniserConfig::default(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asr.ckpt");
        r.save(&path).unwrap();
        let back = Recogniser::load(&path).unwrap();
        assert_eq!(back.params().fingerprint().unwrap(), r.params().fingerprint().unwrap());
        assert!(crate::vocoder::Generator::load(&path).is_err());
    }
}
