//! Corpus handling: JSONL manifests, the synthetic two-tone corpus, the
//! seeded pseudo-codec that stands in for a neural audio codec, and the
//! triplet cache consumed by training.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::asr::{greedy_sequence, Recogniser};
use crate::audio::Waveform;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::symbols::{encode_text, resize_nearest, CharSequence, CharVocabulary};
use crate::training::TrainingTriplet;
use crate::vocoder::{AcousticTokenGrid, VocoderConfig};

/// One line of a JSONL manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// WAV path, relative to the manifest's directory unless absolute.
    pub audio: String,
    pub text: String,
    pub duration: f64,
}

impl ManifestEntry {
    pub fn audio_path(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.audio);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>, vocab: &CharVocabulary) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidValue(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::InvalidValue(format!("{}: duplicate id {:?}", path.display(), entry.id)));
        }
        encode_text(&entry.text, vocab)?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoCodecConfig {
    pub codebooks: usize,
    pub codebook_size: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
    /// Width of the random projection that is quantised.
    pub dim: usize,
    pub seed: u64,
}

impl PseudoCodecConfig {
    pub fn for_vocoder(v: &VocoderConfig, dim: usize, seed: u64) -> Self {
        Self {
            codebooks: v.codebooks,
            codebook_size: v.codebook_size,
            hop_length: v.hop_length,
            n_fft: v.n_fft,
            sample_rate: v.sample_rate,
            dim,
            seed,
        }
    }
}

const CODEC_MELS: usize = 40;

/// Seeded projection and residual codebooks, built once per config.
#[derive(Debug, Clone)]
pub struct PseudoCodec {
    config: PseudoCodecConfig,
    mel: MelSpectrogram,
    projection: Vec<f64>,
    codebooks: Vec<Vec<f64>>,
}

impl PseudoCodec {
    pub fn new(config: PseudoCodecConfig) -> Result<Self> {
        if config.codebooks == 0 || config.codebook_size == 0 || config.dim == 0 {
            return Err(Error::InvalidValue("codec needs codebooks, entries and dim >= 1".into()));
        }
        let mel = MelSpectrogram::new(config.sample_rate, config.n_fft, config.hop_length, CODEC_MELS, 1e-5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = 1.0 / (CODEC_MELS as f64).sqrt();
        let projection = (0..CODEC_MELS * config.dim).map(|_| unit.sample(&mut rng) * scale).collect();
        // Each stage quantises what the previous one left, so its spread halves.
        let codebooks = (0..config.codebooks)
            .map(|q| {
                let std = 0.5f64.powi(q as i32);
                (0..config.codebook_size * config.dim)
                    .map(|_| unit.sample(&mut rng) * std)
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            mel,
            projection,
            codebooks,
        })
    }

    pub fn config(&self) -> &PseudoCodecConfig {
        &self.config
    }

    /// Per-frame standardised log-mel, projected: `T x dim`, row-major.
    fn embed(&self, u: &Waveform) -> Result<(Vec<f64>, usize)> {
        let hop = self.config.hop_length;
        if u.len() < hop {
            return Err(Error::AudioTooShort {
                samples: u.len(),
                required: hop,
            });
        }
        let trimmed = u.trimmed_to(hop);
        let frames = trimmed.len() / hop;
        let feats: Vec<f64> = self
            .mel
            .log_mel(&trimmed.to_tensor(DType::F64)?)?
            .flatten_all()?
            .to_vec1()?;
        let dim = self.config.dim;
        let mut out = vec![0.0; frames * dim];
        for t in 0..frames {
            let row = &feats[t * CODEC_MELS..(t + 1) * CODEC_MELS];
            let mean = row.iter().sum::<f64>() / CODEC_MELS as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / CODEC_MELS as f64;
            let inv = 1.0 / (var.sqrt() + 1e-6);
            for (m, v) in row.iter().enumerate() {
                let z = (v - mean) * inv;
                for d in 0..dim {
                    out[t * dim + d] += z * self.projection[m * dim + d];
                }
            }
        }
        Ok((out, frames))
    }

    pub fn encode(&self, u: &Waveform) -> Result<AcousticTokenGrid> {
        let (mut residual, frames) = self.embed(u)?;
        let (dim, size, q_count) = (self.config.dim, self.config.codebook_size, self.config.codebooks);
        let mut tokens = vec![0u32; q_count * frames];
        for (q, book) in self.codebooks.iter().enumerate() {
            for t in 0..frames {
                let r = &mut residual[t * dim..(t + 1) * dim];
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for k in 0..size {
                    let c = &book[k * dim..(k + 1) * dim];
                    let d: f64 = r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                let c = &book[best * dim..(best + 1) * dim];
                for (a, b) in r.iter_mut().zip(c) {
                    *a -= b;
                }
                tokens[q * frames + t] = best as u32;
            }
        }
        AcousticTokenGrid::new(tokens, q_count, frames)
    }
}

pub fn pseudo_codec_encode(u: &Waveform, cfg: &PseudoCodecConfig) -> Result<AcousticTokenGrid> {
    PseudoCodec::new(cfg.clone())?.encode(u)
}

/// Duration of one rendered character.
pub const CHUNK_SECONDS: f64 = 0.08;
const LOW_TONES: [f64; 6] = [300.0, 450.0, 600.0, 750.0, 900.0, 1050.0];
const HIGH_TONES: [f64; 5] = [1400.0, 1800.0, 2200.0, 2600.0, 3000.0];
const SNR_DB: f64 = 20.0;

/// Frequency pair for a renderable character (`a`..`z` and space).
pub fn tone_pair(ch: char) -> Option<(f64, f64)> {
    let slot = match ch {
        'a'..='z' => ch as usize - 'a' as usize,
        ' ' => 26,
        _ => return None,
    };
    Some((LOW_TONES[slot % LOW_TONES.len()], HIGH_TONES[slot / LOW_TONES.len()]))
}

pub fn chunk_samples(sample_rate: u32) -> usize {
    (sample_rate as f64 * CHUNK_SECONDS).round() as usize
}

/// Renders `text` as a sequence of two-tone chunks with seeded jitter and
/// noise; returns the waveform and the (lowercased) transcript.
pub fn synth_utterance(text: &str, seed: u64, sample_rate: u32) -> Result<(Waveform, String)> {
    let transcript = text.to_lowercase();
    let pairs = transcript
        .chars()
        .enumerate()
        .map(|(position, ch)| tone_pair(ch).ok_or(Error::UnknownSymbol { ch, position }))
        .collect::<Result<Vec<_>>>()?;
    let n = chunk_samples(sample_rate);
    let ramp = (n / 8).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n * pairs.len());
    for (lo, hi) in pairs {
        let (a_lo, a_hi) = (rng.gen_range(0.18..0.3), rng.gen_range(0.12..0.22));
        let (p_lo, p_hi) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
        for i in 0..n {
            let env = if i < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
            } else if i >= n - ramp {
                0.5 - 0.5 * (std::f64::consts::PI * (n - 1 - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let t = i as f64 / sample_rate as f64;
            let s = a_lo * (std::f64::consts::TAU * lo * t + p_lo).sin() + a_hi * (std::f64::consts::TAU * hi * t + p_hi).sin();
            samples.push(env * s);
        }
    }
    let power = samples.iter().map(|s| s * s).sum::<f64>() / samples.len().max(1) as f64;
    let noise_std = (power / 10f64.powf(SNR_DB / 10.0)).sqrt();
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("positive std");
        for s in &mut samples {
            *s += noise.sample(&mut rng);
        }
    }
    let samples = samples.into_iter().map(|s| s as f32).collect();
    Ok((Waveform::new(samples, sample_rate), transcript))
}

/// 2 to 3 words of 2 to 4 letters, no letter repeated back to back.
pub fn random_text(rng: &mut impl Rng) -> String {
    let words = rng.gen_range(2..=3);
    let mut out = String::new();
    for w in 0..words {
        if w > 0 {
            out.push(' ');
        }
        let mut prev = None;
        for _ in 0..rng.gen_range(2..=4) {
            let ch = loop {
                let c = (b'a' + rng.gen_range(0..26u8)) as char;
                if Some(c) != prev {
                    break c;
                }
            };
            out.push(ch);
            prev = Some(ch);
        }
    }
    out
}

fn utterance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Writes `count` synthetic utterances as WAVs under `dir/audio/` and returns
/// their manifest entries (audio paths relative to `dir`).
pub fn generate_corpus(dir: &Path, prefix: &str, count: usize, seed: u64, sample_rate: u32, exec: Execution) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir.join("audio"))?;
    let items: Vec<(usize, String, u64)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|i| (i, random_text(&mut rng), utterance_seed(seed, i))).collect()
    };
    exec.try_map(&items, |(i, text, s)| {
        let (wave, transcript) = synth_utterance(text, *s, sample_rate)?;
        let id = format!("{prefix}{i:05}");
        let rel = format!("audio/{id}.wav");
        wave.write_wav(dir.join(&rel))?;
        Ok(ManifestEntry {
            id,
            audio: rel,
            text: transcript,
            duration: wave.duration(),
        })
    })
}

/// An entry that could not be turned into a triplet.
#[derive(Debug)]
pub struct Skipped {
    pub id: String,
    pub error: Error,
}

/// Builds `(u, c, a_bar)` for each manifest entry, in manifest order.
pub fn build_triplets(
    entries: &[ManifestEntry],
    base: &Path,
    recogniser: &Recogniser,
    codec: &PseudoCodec,
    exec: Execution,
) -> (Vec<TrainingTriplet>, Vec<Skipped>) {
    let hop = codec.config().hop_length;
    let results = exec.map(entries, |e| -> Result<TrainingTriplet> {
        let u = Waveform::read_wav(e.audio_path(base))?.trimmed_to(hop);
        let a_bar = codec.encode(&u)?;
        let c = resize_nearest(&greedy_sequence(&recogniser.frame_posteriors(&u)?), a_bar.frames())?;
        TrainingTriplet::new(e.id.clone(), e.text.clone(), u, c, a_bar, hop)
    });
    let mut triplets = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(t) => triplets.push(t),
            Err(error) => {
                warn!("skipping {}: {error}", e.id);
                skipped.push(Skipped { id: e.id.clone(), error });
            }
        }
    }
    (triplets, skipped)
}

const TRIPLET_MAGIC: &[u8; 8] = b"CHVTRIP1";
const CACHE_INDEX: &str = "index.txt";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidValue(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serialises one triplet record (layout documented in the README).
pub fn encode_triplet(t: &TrainingTriplet) -> Result<Vec<u8>> {
    let frames = t.a_bar.frames();
    let mut out = Vec::with_capacity(64 + 4 * t.u.len() + 5 * frames * t.a_bar.codebooks());
    out.extend_from_slice(TRIPLET_MAGIC);
    put_str(&mut out, &t.id)?;
    put_str(&mut out, &t.text)?;
    put_u32(&mut out, t.u.sample_rate as usize)?;
    put_u32(&mut out, t.u.len())?;
    put_u32(&mut out, frames)?;
    put_u32(&mut out, t.a_bar.codebooks())?;
    for s in &t.u.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(t.c.as_slice());
    for tok in t.a_bar.as_slice() {
        out.extend_from_slice(&tok.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidValue("truncated triplet record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::InvalidValue(e.to_string()))
    }
}

pub fn decode_triplet(bytes: &[u8], hop: usize) -> Result<TrainingTriplet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != TRIPLET_MAGIC {
        return Err(Error::InvalidValue("not a triplet record".into()));
    }
    let id = cur.string()?;
    let text = cur.string()?;
    let sample_rate = cur.u32()? as u32;
    let n_samples = cur.u32()?;
    let frames = cur.u32()?;
    let codebooks = cur.u32()?;
    let samples = cur
        .take(4 * n_samples)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let c = CharSequence::new(cur.take(frames)?.to_vec())?;
    let tokens = cur
        .take(4 * frames * codebooks)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::InvalidValue("trailing bytes after triplet record".into()));
    }
    let a_bar = AcousticTokenGrid::new(tokens, codebooks, frames)?;
    TrainingTriplet::new(id, text, Waveform::new(samples, sample_rate), c, a_bar, hop)
}

/// Writes one `<id>.trip` file per triplet plus an index fixing their order.
pub fn write_triplet_cache(dir: &Path, triplets: &[TrainingTriplet]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for t in triplets {
        fs::write(dir.join(format!("{}.trip", t.id)), encode_triplet(t)?)?;
        index.push_str(&t.id);
        index.push('\n');
    }
    fs::write(dir.join(CACHE_INDEX), index)?;
    Ok(())
}

pub fn read_triplet_cache(dir: &Path, hop: usize) -> Result<Vec<TrainingTriplet>> {
    let index = fs::read_to_string(dir.join(CACHE_INDEX))?;
    index
        .lines()
        .filter(|l| !l.is_empty())
        .map(|id| {
            let mut bytes = Vec::new();
            fs::File::open(dir.join(format!("{id}.trip")))?.read_to_end(&mut bytes)?;
            decode_triplet(&bytes, hop)
        })
        .collect()
}
