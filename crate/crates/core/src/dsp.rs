//! Differentiable STFT, inverse STFT and mel projection, expressed as tensor
//! ops so gradients reach the waveform.
//!
//! Framing convention: a signal of `T * hop` samples is zero-padded by
//! `(n_fft - hop) / 2` on both sides and cut into exactly `T` Hann-windowed
//! frames. The inverse path mirrors it, so analysis followed by synthesis is an
//! exact reconstruction.

use std::f64::consts::PI;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::device;

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if hop == 0 || n_fft == 0 || !n_fft.is_multiple_of(hop) || !(n_fft - hop).is_multiple_of(2) {
            return Err(Error::InvalidValue(format!(
                "hop {hop} must divide n_fft {n_fft} with an even remainder"
            )));
        }
        Ok(Self { n_fft, hop })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        (self.n_fft - self.hop) / 2
    }

    fn overlap(&self) -> usize {
        self.n_fft / self.hop
    }

    /// Frames produced for a signal of `len` samples (right-padded to a hop multiple).
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// `(n_fft, 2F)` matrix: windowed cosine columns then negative sine columns.
    fn analysis_basis(&self, dtype: DType) -> Result<Tensor> {
        let n = self.n_fft;
        let f = self.bins();
        let w = hann_window(n);
        let mut m = vec![0.0; n * 2 * f];
        for i in 0..n {
            for k in 0..f {
                let ang = 2.0 * PI * (k * i % n) as f64 / n as f64;
                m[i * 2 * f + k] = w[i] * ang.cos();
                m[i * 2 * f + f + k] = -w[i] * ang.sin();
            }
        }
        Ok(Tensor::from_vec(m, (n, 2 * f), &device())?.to_dtype(dtype)?)
    }

    /// `(2F, n_fft)` inverse real DFT with the synthesis window folded in.
    fn synthesis_basis(&self, dtype: DType) -> Result<Tensor> {
        let n = self.n_fft;
        let f = self.bins();
        let w = hann_window(n);
        let mut m = vec![0.0; 2 * f * n];
        for k in 0..f {
            let scale = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
            for i in 0..n {
                let ang = 2.0 * PI * (k * i % n) as f64 / n as f64;
                m[k * n + i] = scale * ang.cos() * w[i];
                m[(f + k) * n + i] = -scale * ang.sin() * w[i];
            }
        }
        Ok(Tensor::from_vec(m, (2 * f, n), &device())?.to_dtype(dtype)?)
    }

    /// Overlap-added squared window for `frames` frames, trimmed like the output.
    fn envelope(&self, frames: usize) -> Vec<f64> {
        let w = hann_window(self.n_fft);
        let total = (frames + self.overlap() - 1) * self.hop;
        let mut env = vec![0.0; total];
        for t in 0..frames {
            for (i, wi) in w.iter().enumerate() {
                env[t * self.hop + i] += wi * wi;
            }
        }
        env[self.pad()..self.pad() + frames * self.hop].to_vec()
    }
}

/// Complex spectrum split into real and imaginary parts, each `(B, T, F)`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    pub fn power(&self) -> Result<Tensor> {
        Ok((self.re.sqr()? + self.im.sqr()?)?)
    }

    /// `sqrt(power + 1e-10)`; the epsilon keeps the gradient bounded at zero.
    pub fn magnitude(&self) -> Result<Tensor> {
        Ok((self.power()? + 1e-10)?.sqrt()?)
    }
}

/// Short-time Fourier transform of a `(B, L)` batch.
pub fn stft(x: &Tensor, cfg: &StftConfig) -> Result<Spectrum> {
    let (b, len) = x.dims2()?;
    if len == 0 {
        return Err(Error::EmptyAudio);
    }
    let t = cfg.frames(len);
    let x = if t * cfg.hop > len {
        x.pad_with_zeros(1, 0, t * cfg.hop - len)?
    } else {
        x.clone()
    };
    let r = cfg.overlap();
    let blocks = x
        .pad_with_zeros(1, cfg.pad(), cfg.pad())?
        .reshape((b, t + r - 1, cfg.hop))?;
    let frames = if r == 1 {
        blocks
    } else {
        let parts = (0..r)
            .map(|k| blocks.narrow(1, k, t))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Tensor::cat(&parts, 2)?
    };
    let basis = cfg.analysis_basis(x.dtype())?;
    let f = cfg.bins();
    let spec = frames
        .reshape((b * t, cfg.n_fft))?
        .matmul(&basis)?
        .reshape((b, t, 2 * f))?;
    Ok(Spectrum {
        re: spec.narrow(2, 0, f)?,
        im: spec.narrow(2, f, f)?,
    })
}

/// Inverse STFT of `(B, T, F)` parts; returns `(B, T * hop)`.
pub fn istft(spec: &Spectrum, cfg: &StftConfig) -> Result<Tensor> {
    let (b, t, f) = spec.re.dims3()?;
    if f != cfg.bins() {
        return Err(Error::shape(format!("{} bins", cfg.bins()), format!("{f} bins")));
    }
    let basis = cfg.synthesis_basis(spec.re.dtype())?;
    let frames = Tensor::cat(&[&spec.re, &spec.im], 2)?
        .reshape((b * t, 2 * f))?
        .matmul(&basis)?
        .reshape((b, t, cfg.overlap(), cfg.hop))?;
    let r = cfg.overlap();
    let mut acc: Option<Tensor> = None;
    for k in 0..r {
        let part = frames
            .narrow(2, k, 1)?
            .reshape((b, t * cfg.hop))?
            .pad_with_zeros(1, k * cfg.hop, (r - 1 - k) * cfg.hop)?;
        acc = Some(match acc {
            None => part,
            Some(a) => (a + part)?,
        });
    }
    let ola = acc.expect("overlap is at least one").narrow(1, cfg.pad(), t * cfg.hop)?;
    let env = cfg.envelope(t);
    let inv: Vec<f64> = env.iter().map(|e| 1.0 / e.max(1e-11)).collect();
    let inv = Tensor::from_vec(inv, (1, t * cfg.hop), &device())?.to_dtype(ola.dtype())?;
    Ok(ola.broadcast_mul(&inv)?)
}

fn hz_to_mel(f: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-normalised triangular mel filterbank as an `(F, n_mels)` row-major matrix.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<f64> {
    let f = n_fft / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..f).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
    let mut fb = vec![0.0; f * n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &hz) in bin_hz.iter().enumerate() {
            let up = (hz - lo) / (mid - lo);
            let down = (hi - hz) / (hi - mid);
            let w = up.min(down).max(0.0);
            fb[k * n_mels + m] = w * norm;
        }
    }
    fb
}

/// Log-mel front end: magnitude STFT projected on a mel filterbank, floored and logged.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub floor: f64,
    filters: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(sample_rate: u32, n_fft: usize, hop: usize, n_mels: usize, floor: f64) -> Result<Self> {
        Ok(Self {
            stft: StftConfig::new(n_fft, hop)?,
            n_mels,
            floor,
            filters: mel_filterbank(sample_rate, n_fft, n_mels),
        })
    }

    /// `(B, L)` waveform batch to `(B, T, n_mels)` log-mel features.
    pub fn log_mel(&self, x: &Tensor) -> Result<Tensor> {
        let mag = stft(x, &self.stft)?.magnitude()?;
        let (b, t, f) = mag.dims3()?;
        let fb = Tensor::from_slice(&self.filters, (f, self.n_mels), &device())?.to_dtype(x.dtype())?;
        let mel = mag.reshape((b * t, f))?.matmul(&fb)?;
        Ok(mel.maximum(self.floor)?.log()?.reshape((b, t, self.n_mels))?)
    }
}
