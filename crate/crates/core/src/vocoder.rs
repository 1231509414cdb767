//! The character-conditioned generator: token embeddings, a stack of
//! shape-preserving ConvNeXt blocks each followed by a conditioning layer, and
//! a linear head predicting per-frame complex spectra for an inverse STFT.
//!
//! Internally features are channel-last `(B, T, D)`; the single-utterance API
//! exposes them as `D x T` [`FeatureMap`]s.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::conditioning::{ConditioningLayer, FeatureMap};
use crate::dsp::{istft, Spectrum, StftConfig};
use crate::error::{Error, Result};
use crate::nn::{depthwise_conv_time, device, layer_norm, linear, ParamStore};
use crate::symbols::CharSequence;

pub const GENERATOR_KIND: &str = "generator";
const MAX_MAGNITUDE: f64 = 1e2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    /// Channel width `D`.
    pub channels: usize,
    /// Number of ConvNeXt blocks `K`.
    pub blocks: usize,
    /// Number of codebooks `Q`.
    pub codebooks: usize,
    pub codebook_size: usize,
    pub n_fft: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
    pub conditioning_enabled: bool,
    /// Place the last conditioning layer right before the head (K layers);
    /// when false only the K - 1 gaps between blocks are conditioned.
    pub condition_before_head: bool,
    pub kernel_size: usize,
    pub expansion: usize,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            blocks: 4,
            codebooks: 2,
            codebook_size: 64,
            n_fft: 256,
            hop_length: 64,
            sample_rate: 8000,
            conditioning_enabled: true,
            condition_before_head: true,
            kernel_size: 7,
            expansion: 3,
        }
    }
}

impl VocoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.codebooks == 0 || self.codebook_size == 0 {
            return Err(Error::InvalidValue("channels, blocks, codebooks and codebook_size must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidValue("kernel_size must be odd".into()));
        }
        StftConfig::new(self.n_fft, self.hop_length)?;
        Ok(())
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig::new(self.n_fft, self.hop_length).expect("validated config")
    }

    pub fn conditioning_layers(&self) -> usize {
        if self.condition_before_head {
            self.blocks
        } else {
            self.blocks - 1
        }
    }
}

/// `Q x T` grid of codec token indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcousticTokenGrid {
    tokens: Vec<u32>,
    codebooks: usize,
    frames: usize,
}

impl AcousticTokenGrid {
    /// `tokens` is row-major `Q x T`.
    pub fn new(tokens: Vec<u32>, codebooks: usize, frames: usize) -> Result<Self> {
        if codebooks == 0 {
            return Err(Error::InvalidValue("at least one codebook required".into()));
        }
        if tokens.len() != codebooks * frames {
            return Err(Error::shape(format!("{codebooks} x {frames}"), format!("{} tokens", tokens.len())));
        }
        Ok(Self { tokens, codebooks, frames })
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.tokens[q * self.frames..(q + 1) * self.frames]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, q: usize, t: usize) -> u32 {
        self.tokens[q * self.frames + t]
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        let tokens = (0..self.codebooks)
            .flat_map(|q| self.row(q)[start..start + len].iter().copied())
            .collect();
        Self {
            tokens,
            codebooks: self.codebooks,
            frames: len,
        }
    }

    pub fn check(&self, config: &VocoderConfig) -> Result<()> {
        if self.codebooks != config.codebooks {
            return Err(Error::shape(
                format!("{} codebooks", config.codebooks),
                format!("{} codebooks", self.codebooks),
            ));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= config.codebook_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                codebook_size: config.codebook_size,
            });
        }
        Ok(())
    }

    /// `(1, Q, T)` u32 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.tokens, (1, self.codebooks, self.frames), &device())?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    dw_w: Tensor,
    dw_b: Tensor,
    norm_g: Tensor,
    norm_b: Tensor,
    pw1_w: Tensor,
    pw1_b: Tensor,
    pw2_w: Tensor,
    pw2_b: Tensor,
}

impl ConvNextBlock {
    fn register(store: &mut ParamStore, prefix: &str, cfg: &VocoderConfig) -> Result<Self> {
        let d = cfg.channels;
        let h = d * cfg.expansion;
        Ok(Self {
            dw_w: store.normal(format!("{prefix}.dw.w"), &[cfg.kernel_size, d], 0.2)?,
            dw_b: store.constant(format!("{prefix}.dw.b"), &[d], 0.0)?,
            norm_g: store.constant(format!("{prefix}.norm.g"), &[d], 1.0)?,
            norm_b: store.constant(format!("{prefix}.norm.b"), &[d], 0.0)?,
            pw1_w: store.normal(format!("{prefix}.pw1.w"), &[d, h], (1.0 / d as f64).sqrt())?,
            pw1_b: store.constant(format!("{prefix}.pw1.b"), &[h], 0.0)?,
            pw2_w: store.normal(format!("{prefix}.pw2.w"), &[h, d], 0.02)?,
            pw2_b: store.constant(format!("{prefix}.pw2.b"), &[d], 0.0)?,
        })
    }

    /// Depthwise conv, layer norm, expansion, GELU, projection, residual add.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = depthwise_conv_time(x, &self.dw_w, &self.dw_b)?;
        let h = layer_norm(&h, &self.norm_g, &self.norm_b, 1e-6)?;
        let h = linear(&h, &self.pw1_w, Some(&self.pw1_b))?.gelu()?;
        let h = linear(&h, &self.pw2_w, Some(&self.pw2_b))?;
        Ok((x + h)?)
    }
}

/// The conditioned vocoder.
#[derive(Debug, Clone)]
pub struct Generator {
    config: VocoderConfig,
    store: ParamStore,
    token_embeddings: Vec<Tensor>,
    blocks: Vec<ConvNextBlock>,
    conditioning: Vec<ConditioningLayer>,
    head_w: Tensor,
    head_b: Tensor,
}

impl Generator {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: VocoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let d = config.channels;
        let token_embeddings = (0..config.codebooks)
            .map(|q| store.normal(format!("embed{q}"), &[config.codebook_size, d], 1.0))
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..config.blocks)
            .map(|k| ConvNextBlock::register(&mut store, &format!("block{k}"), &config))
            .collect::<Result<Vec<_>>>()?;
        // Conditioning dictionaries exist even when disabled so checkpoints share one layout.
        let conditioning = (0..config.conditioning_layers())
            .map(|k| ConditioningLayer::register(&mut store, d, k))
            .collect::<Result<Vec<_>>>()?;
        let bins = config.n_fft / 2 + 1;
        let head_w = store.normal("head.w", &[d, 2 * bins], 0.02)?;
        let head_b = store.constant("head.b", &[2 * bins], 0.0)?;
        Ok(Self {
            config,
            store,
            token_embeddings,
            blocks,
            conditioning,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn conditioning_layers(&self) -> &[ConditioningLayer] {
        &self.conditioning
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Toggles conditioning without touching parameters.
    pub fn set_conditioning(&mut self, enabled: bool) {
        self.config.conditioning_enabled = enabled;
    }

    /// `(B, Q, T)` u32 tokens to `(B, T, D)` summed codebook embeddings.
    pub fn embed_tokens_batch(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, q, t) = tokens.dims3()?;
        if q != self.config.codebooks {
            return Err(Error::shape(format!("{} codebooks", self.config.codebooks), format!("{q}")));
        }
        let mut acc: Option<Tensor> = None;
        for (qi, table) in self.token_embeddings.iter().enumerate() {
            let ids = tokens.narrow(1, qi, 1)?.flatten_all()?;
            let e = table.index_select(&ids, 0)?;
            acc = Some(match acc {
                None => e,
                Some(a) => (a + e)?,
            });
        }
        Ok(acc.expect("at least one codebook").reshape((b, t, self.config.channels))?)
    }

    /// Feature map after every (block, conditioning) stage; the last entry feeds the head.
    pub fn trunk_batch(&self, tokens: &Tensor, chars: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let cond = self.config.conditioning_enabled;
        if cond && chars.is_none() {
            return Err(Error::MissingConditioning);
        }
        let mut x = self.embed_tokens_batch(tokens)?;
        let (b, t, _) = x.dims3()?;
        if let Some(c) = chars.filter(|_| cond) {
            if c.dims() != [b, t] {
                return Err(Error::shape(format!("chars ({b}, {t})"), format!("{:?}", c.dims())));
            }
        }
        let mut stages = Vec::with_capacity(self.blocks.len() + 1);
        stages.push(x.clone());
        for (k, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if cond {
                if let Some(layer) = self.conditioning.get(k) {
                    x = layer.forward(&x, chars.expect("checked above"))?;
                }
            }
            stages.push(x.clone());
        }
        Ok(stages)
    }

    /// `(B, T, D)` features to `(B, T * hop)` waveforms through the complex-spectrum head.
    pub fn istft_head_batch(&self, x: &Tensor) -> Result<Tensor> {
        let spec = self.head_spectrum(x)?;
        istft(&spec, &self.config.stft())
    }

    /// Magnitude (`exp`, clipped at 100) and phase (cos/sin) predicted by the head.
    pub fn head_spectrum(&self, x: &Tensor) -> Result<Spectrum> {
        let bins = self.config.n_fft / 2 + 1;
        let h = linear(x, &self.head_w, Some(&self.head_b))?;
        let mag = h.narrow(2, 0, bins)?.exp()?.minimum(MAX_MAGNITUDE)?;
        let phase = h.narrow(2, bins, bins)?;
        Ok(Spectrum {
            re: (&mag * phase.cos()?)?,
            im: (&mag * phase.sin()?)?,
        })
    }

    /// Batched synthesis: `(B, Q, T)` tokens and `(B, T)` chars to `(B, T * hop)`.
    pub fn forward_batch(&self, tokens: &Tensor, chars: Option<&Tensor>) -> Result<Tensor> {
        let stages = self.trunk_batch(tokens, chars)?;
        self.istft_head_batch(stages.last().expect("embedding stage"))
    }

    pub fn embed_tokens(&self, a: &AcousticTokenGrid) -> Result<FeatureMap> {
        a.check(&self.config)?;
        let x = self.embed_tokens_batch(&a.to_tensor()?)?;
        to_feature_map(&x)
    }

    pub fn convnext_block(&self, k: usize, x: &FeatureMap) -> Result<FeatureMap> {
        let block = self.blocks.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            limit: self.blocks.len(),
        })?;
        to_feature_map(&block.forward(&from_feature_map(x)?)?)
    }

    pub fn istft_head(&self, x: &FeatureMap) -> Result<Waveform> {
        let w = self.istft_head_batch(&from_feature_map(x)?)?;
        Waveform::from_tensor(&w, self.config.sample_rate)
    }

    /// Synthesises one utterance. `c` must already have `a.frames()` entries.
    pub fn forward(&self, a: &AcousticTokenGrid, c: Option<&CharSequence>) -> Result<Waveform> {
        a.check(&self.config)?;
        let chars = match c {
            Some(c) => {
                if c.len() != a.frames() {
                    return Err(Error::LengthMismatch {
                        left: a.frames(),
                        right: c.len(),
                    });
                }
                Some(crate::conditioning::char_index_tensor(c)?.unsqueeze(0)?)
            }
            None => None,
        };
        let w = self.forward_batch(&a.to_tensor()?, chars.as_ref())?;
        Waveform::from_tensor(&w, self.config.sample_rate)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(GENERATOR_KIND, serde_json::to_value(&self.config)?);
        ck.tensors = self.store.export("")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: VocoderConfig = serde_json::from_value(ck.meta.clone())?;
        let g = Self::new(config, 0)?;
        g.store.import("", &ck.tensors)?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(GENERATOR_KIND, path)?;
        Self::from_checkpoint(&ck)
    }
}

fn to_feature_map(x: &Tensor) -> Result<FeatureMap> {
    FeatureMap::new(x.squeeze(0)?.t()?.contiguous()?)
}

fn from_feature_map(x: &FeatureMap) -> Result<Tensor> {
    Ok(x.tensor().t()?.contiguous()?.unsqueeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small() -> VocoderConfig {
        VocoderConfig {
            channels: 8,
            blocks: 2,
            codebooks: 2,
            codebook_size: 16,
            n_fft: 32,
            hop_length: 8,
            ..VocoderConfig::default()
        }
    }

    fn grid(cfg: &VocoderConfig, t: usize, seed: u64) -> AcousticTokenGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..cfg.codebooks * t).map(|_| rng.gen_range(0..cfg.codebook_size as u32)).collect();
        AcousticTokenGrid::new(tokens, cfg.codebooks, t).unwrap()
    }

    fn chars(t: usize, seed: u64) -> CharSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CharSequence::new((0..t).map(|_| rng.gen_range(0..31u8)).collect()).unwrap()
    }

    #[test]
    fn grid_validation() {
        let cfg = small();
        assert!(AcousticTokenGrid::new(vec![0; 5], 2, 3).is_err());
        let g = AcousticTokenGrid::new(vec![0, 1, 2, 16, 0, 0], 2, 3).unwrap();
        assert!(matches!(g.check(&cfg), Err(Error::TokenOutOfRange { token: 16, .. })));
        let g = AcousticTokenGrid::new(vec![0, 1, 2], 1, 3).unwrap();
        assert!(matches!(g.check(&cfg), Err(Error::ShapeMismatch { .. })));
        let g = AcousticTokenGrid::new((0..8).collect(), 2, 4).unwrap();
        assert_eq!(g.slice(1, 2).as_slice(), &[1, 2, 5, 6]);
    }

    #[test]
    fn embed_tokens_contract() {
        let cfg = VocoderConfig { codebooks: 1, ..small() };
        let g = Generator::with_dtype(cfg.clone(), 1, DType::F64).unwrap();
        let a = AcousticTokenGrid::new(vec![3; 6], 1, 6).unwrap();
        let rows = g.embed_tokens(&a).unwrap().to_rows().unwrap();
        for row in &rows {
            assert!(row.iter().all(|&v| v == row[0]));
        }

        let cfg = small();
        let g = Generator::with_dtype(cfg.clone(), 2, DType::F64).unwrap();
        let a = grid(&cfg, 5, 3);
        let emb = g.embed_tokens(&a).unwrap();
        assert_eq!(emb.dims(), (cfg.channels, 5));
        let tables: Vec<Vec<Vec<f64>>> = g.token_embeddings.iter().map(|t| t.to_vec2().unwrap()).collect();
        let rows = emb.to_rows().unwrap();
        for t in 0..5 {
            for d in 0..cfg.channels {
                let want = tables[0][a.get(0, t) as usize][d] + tables[1][a.get(1, t) as usize][d];
                assert_eq!(rows[d][t], want);
            }
        }
    }

    #[test]
    fn block_preserves_shape_and_zero_projection_is_identity() {
        let cfg = small();
        let g = Generator::with_dtype(cfg.clone(), 4, DType::F64).unwrap();
        let x = g.embed_tokens(&grid(&cfg, 9, 5)).unwrap();
        assert_eq!(g.convnext_block(0, &x).unwrap().dims(), (8, 9));
        for name in ["block0.pw2.w", "block0.pw2.b"] {
            let v = g.params().get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let y = g.convnext_block(0, &x).unwrap();
        assert_eq!(y.to_rows().unwrap(), x.to_rows().unwrap());
    }

    #[test]
    fn block_receptive_field_is_kernel_width() {
        let cfg = small();
        let g = Generator::with_dtype(cfg.clone(), 6, DType::F64).unwrap();
        let x = g.embed_tokens(&grid(&cfg, 20, 7)).unwrap();
        let y0 = g.convnext_block(1, &x).unwrap().to_rows().unwrap();
        let mut rows = x.to_rows().unwrap();
        let probe = 10;
        for row in rows.iter_mut() {
            row[probe] += 0.5;
        }
        let y1 = g.convnext_block(1, &FeatureMap::from_rows(&rows).unwrap()).unwrap().to_rows().unwrap();
        let radius = cfg.kernel_size / 2;
        for t in 0..20 {
            let changed = (0..cfg.channels).any(|d| y0[d][t] != y1[d][t]);
            assert_eq!(changed, t.abs_diff(probe) <= radius, "frame {t}");
        }
    }

    #[test]
    fn output_length_is_frames_times_hop() {
        let cfg = VocoderConfig::default();
        let g = Generator::new(cfg.clone(), 0).unwrap();
        for t in [4, 16, 50] {
            let w = g.forward(&grid(&cfg, t, t as u64), Some(&chars(t, 1))).unwrap();
            assert_eq!(w.len(), t * cfg.hop_length);
            assert!(w.is_finite());
            assert!(w.peak() <= 4.0);
        }
    }

    #[test]
    fn missing_conditioning_and_length_checks() {
        let cfg = small();
        let g = Generator::new(cfg.clone(), 0).unwrap();
        let a = grid(&cfg, 6, 0);
        assert!(matches!(g.forward(&a, None), Err(Error::MissingConditioning)));
        assert!(matches!(g.forward(&a, Some(&chars(5, 0))), Err(Error::LengthMismatch { .. })));
        let mut g = g;
        g.set_conditioning(false);
        assert!(g.forward(&a, None).is_ok());
    }

    #[test]
    fn disabled_conditioning_matches_identity_init() {
        let cfg = small();
        let mut g = Generator::new(cfg.clone(), 9).unwrap();
        let a = grid(&cfg, 12, 3);
        let c = chars(12, 4);
        let on = g.forward(&a, Some(&c)).unwrap();
        g.set_conditioning(false);
        let off = g.forward(&a, None).unwrap();
        let bits = |w: &Waveform| w.samples.iter().map(|s| s.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&on), bits(&off));
    }

    #[test]
    fn zero_features_give_unit_magnitudes() {
        let cfg = small();
        let g = Generator::with_dtype(cfg.clone(), 0, DType::F64).unwrap();
        let x = FeatureMap::from_rows(&vec![vec![0.0; 6]; cfg.channels]).unwrap();
        let spec = g.head_spectrum(&from_feature_map(&x).unwrap()).unwrap();
        let mag: Vec<f64> = spec.magnitude().unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(mag.iter().all(|m| (m - 1.0).abs() < 1e-9));
        let w1 = g.istft_head(&x).unwrap();
        let w2 = g.istft_head(&x).unwrap();
        assert_eq!(w1.len(), 6 * cfg.hop_length);
        assert!(w1.is_finite());
        assert_eq!(w1, w2);
        // every frame is an impulse at n = 0, where the Hann window vanishes
        assert!(w1.peak() < 1e-9);
    }

    #[test]
    fn head_reproduces_an_exact_spectrum() {
        // Feeding the analysis spectrum straight into the synthesis path of the head.
        let cfg = VocoderConfig::default();
        let stft = cfg.stft();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..64 * 30).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let xt = Tensor::from_slice(&x, (1, x.len()), &device()).unwrap();
        let spec = crate::dsp::stft(&xt, &stft).unwrap();
        let mag = spec.magnitude().unwrap();
        // exact phase, carried as its cosine/sine pair
        let cos = (&spec.re / &mag).unwrap();
        let sin = (&spec.im / &mag).unwrap();
        let rebuilt = Spectrum {
            re: (&mag * cos).unwrap(),
            im: (&mag * sin).unwrap(),
        };
        let y: Vec<f64> = istft(&rebuilt, &stft).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        // skip the edge frames
        let lo = 2 * cfg.n_fft;
        let hi = x.len() - 2 * cfg.n_fft;
        let err: f64 = (lo..hi).map(|i| (x[i] - y[i]).powi(2)).sum();
        let energy: f64 = (lo..hi).map(|i| x[i] * x[i]).sum();
        assert!((err / energy).sqrt() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small();
        let g = Generator::new(cfg.clone(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        g.save(&p).unwrap();
        let back = Generator::load(&p).unwrap();
        assert_eq!(back.config(), g.config());
        assert_eq!(back.params().fingerprint().unwrap(), g.params().fingerprint().unwrap());
    }
}
