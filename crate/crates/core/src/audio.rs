use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::device;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    /// Drops trailing samples so the length is a multiple of `hop`.
    pub fn trimmed_to(&self, hop: usize) -> Waveform {
        let n = self.samples.len() / hop * hop;
        Waveform::new(self.samples[..n].to_vec(), self.sample_rate)
    }

    /// `(1, L)` tensor of the given dtype.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.samples, (1, self.samples.len()), &device())?.to_dtype(dtype)?)
    }

    /// Builds a waveform from a `(L,)` or `(1, L)` tensor.
    pub fn from_tensor(t: &Tensor, sample_rate: u32) -> Result<Self> {
        let flat = t.flatten_all()?.to_dtype(DType::F32)?;
        Ok(Self::new(flat.to_vec1()?, sample_rate))
    }

    /// Reads a 16-bit PCM (or float) mono WAV; multi-channel input is averaged.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        };
        if channels == 0 {
            return Err(Error::InvalidValue("wav without channels".into()));
        }
        let samples = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect();
        Ok(Self::new(samples, spec.sample_rate))
    }

    /// Writes PCM 16-bit mono, clipping to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Waveform after a 16-bit write/read cycle.
    pub fn quantized_i16(&self) -> Waveform {
        let samples = self
            .samples
            .iter()
            .map(|&s| ((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16) as f32 / 32768.0)
            .collect();
        Waveform::new(samples, self.sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 1.5, -2.0], 8000);
        w.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back, w.quantized_i16());
        assert!((back.samples[1] - 0.5).abs() < 1e-4);
        assert!((back.samples[3] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn trim() {
        let w = Waveform::new(vec![0.0; 130], 8000);
        assert_eq!(w.trimmed_to(64).len(), 128);
    }
}
