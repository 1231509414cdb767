//! Discriminator warm-up and joint adversarial training of the conditioned
//! vocoder against a frozen recogniser.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::Recogniser;
use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::ctc::{ctc_loss_batch, Reduction};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{
    disc_loss, feature_matching_loss, features, gen_adv_loss, generator_loss, generator_loss_tensor, mel_front_end,
    mel_loss_batch, scores, DiscriminatorBank, DiscriminatorConfig, LossWeights,
};
use crate::nn::{device, scalar};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::symbols::{collapse, CharSequence, LabelSequence};
use crate::vocoder::{AcousticTokenGrid, Generator, VocoderConfig};

pub const TRAINING_STATE_KIND: &str = "training-state";
pub const METRICS_HEADER: &str = "step,lr,l_mel,l_gan,l_fm,l_ctc,l_gen,l_disc";

/// `(u, c, a_bar)` for one utterance, with its id and transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub id: String,
    pub text: String,
    pub u: Waveform,
    pub c: CharSequence,
    pub a_bar: AcousticTokenGrid,
}

impl TrainingTriplet {
    pub fn new(id: String, text: String, u: Waveform, c: CharSequence, a_bar: AcousticTokenGrid, hop: usize) -> Result<Self> {
        if c.len() != a_bar.frames() {
            return Err(Error::LengthMismatch {
                left: a_bar.frames(),
                right: c.len(),
            });
        }
        if u.len() != a_bar.frames() * hop {
            return Err(Error::LengthMismatch {
                left: a_bar.frames() * hop,
                right: u.len(),
            });
        }
        if a_bar.frames() == 0 {
            return Err(Error::EmptyAudio);
        }
        Ok(Self { id, text, u, c, a_bar })
    }

    pub fn frames(&self) -> usize {
        self.a_bar.frames()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Frames per random training crop.
    pub segment_frames: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Schedule {
    pub fn desk_warmup(seed: u64) -> Self {
        Self {
            total_steps: 200,
            initial_lr: 1e-3,
            ..Self::desk_training(seed)
        }
    }

    pub fn desk_training(seed: u64) -> Self {
        Self {
            total_steps: 2000,
            initial_lr: 5e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            seed,
            segment_frames: 32,
            grad_clip: Some(10.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || !(self.initial_lr > 0.0) || self.batch_size == 0 || self.segment_frames == 0 {
            return Err(Error::InvalidValue(
                "schedule needs total_steps, initial_lr, batch_size and segment_frames > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for update `step` (0-based): the cosine runs over the
    /// `total_steps - 1` intervals between the first and the last update, so
    /// the first update uses `initial_lr` and the last one uses 0.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if self.total_steps == 1 {
            return Ok(self.initial_lr);
        }
        cosine_lr(step, self.total_steps - 1, self.initial_lr)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// A batch of aligned random crops.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, S * hop)` target audio.
    pub audio: Tensor,
    /// `(B, S)` u32 character indices.
    pub chars: Tensor,
    /// `(B, Q, S)` u32 tokens.
    pub tokens: Tensor,
    pub targets: Vec<LabelSequence>,
    pub ids: Vec<String>,
}

/// Per-step generator for crops: seeded from `(seed, step)` so a resumed run
/// draws the same batches.
pub fn sample_batch(data: &[TrainingTriplet], schedule: &Schedule, step: usize, hop: usize, dtype: DType) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::InvalidValue("empty training set".into()));
    }
    let seg = data.iter().map(|t| t.frames()).min().unwrap_or(0).min(schedule.segment_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    rng.set_stream(step as u64 + 1);
    let b = schedule.batch_size;
    let q = data[0].a_bar.codebooks();
    let mut audio = Vec::with_capacity(b * seg * hop);
    let mut chars = Vec::with_capacity(b * seg);
    let mut tokens = Vec::with_capacity(b * q * seg);
    let mut targets = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);
    for _ in 0..b {
        let t = &data[rng.gen_range(0..data.len())];
        let start = rng.gen_range(0..=t.frames() - seg);
        audio.extend_from_slice(&t.u.samples[start * hop..(start + seg) * hop]);
        let c = t.c.slice(start, seg);
        chars.extend(c.as_slice().iter().map(|&i| i as u32));
        tokens.extend_from_slice(t.a_bar.slice(start, seg).as_slice());
        targets.push(collapse(&c));
        ids.push(t.id.clone());
    }
    let dev = device();
    Ok(Batch {
        audio: Tensor::from_vec(audio, (b, seg * hop), &dev)?.to_dtype(dtype)?,
        chars: Tensor::from_vec(chars, (b, seg), &dev)?,
        tokens: Tensor::from_vec(tokens, (b, q, seg), &dev)?,
        targets,
        ids,
    })
}

/// Losses recorded for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub lr: f64,
    pub l_mel: f64,
    pub l_gan: f64,
    pub l_fm: f64,
    pub l_ctc: f64,
    pub l_gen: f64,
    pub l_disc: f64,
}

impl StepLosses {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.l_mel, self.l_gan, self.l_fm, self.l_ctc, self.l_gen, self.l_disc
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidValue(format!("metrics row has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidValue(format!("{s:?}: {e}")));
        Ok(Self {
            step: f[0].parse().map_err(|e| Error::InvalidValue(format!("{:?}: {e}", f[0])))?,
            lr: num(f[1])?,
            l_mel: num(f[2])?,
            l_gan: num(f[3])?,
            l_fm: num(f[4])?,
            l_ctc: num(f[5])?,
            l_gen: num(f[6])?,
            l_disc: num(f[7])?,
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepLosses>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidValue("metrics log lacks the expected header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(StepLosses::parse_csv_row).collect()
}

fn check_finite(step: usize, values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Trains only the discriminators against a fixed generator; returns the
/// per-step discriminator loss. Restores the bank's optimizer from scratch.
pub fn warmup_discriminators(
    bank: &DiscriminatorBank,
    generator: &Generator,
    data: &[TrainingTriplet],
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    let before = generator.params().fingerprint()?;
    let hop = generator.config().hop_length;
    let mut opt = AdamW::new(bank.params().vars(), schedule.adamw())?;
    let mut losses = Vec::with_capacity(schedule.total_steps);
    for step in 0..schedule.total_steps {
        let batch = sample_batch(data, schedule, step, hop, generator.dtype())?;
        let chars = generator.config().conditioning_enabled.then_some(&batch.chars);
        let fake = generator.forward_batch(&batch.tokens, chars)?.detach();
        let real = bank.discriminate_batch(&batch.audio, false)?;
        let fake = bank.discriminate_batch(&fake, false)?;
        let loss = disc_loss(&scores(&real), &scores(&fake))?;
        let value = scalar(&loss)?;
        check_finite(step, &[("l_disc", value)])?;
        let grads = loss.backward()?;
        opt.clipped_step(&grads, schedule.lr(step)?, schedule.grad_clip)?;
        losses.push(value);
    }
    if generator.params().fingerprint()? != before {
        return Err(Error::InvalidValue("generator changed during discriminator warm-up".into()));
    }
    Ok(losses)
}

/// Everything joint training mutates, plus the frozen recogniser.
#[derive(Debug)]
pub struct Trainer {
    pub generator: Generator,
    pub bank: DiscriminatorBank,
    recogniser: Recogniser,
    pub weights: LossWeights,
    pub schedule: Schedule,
    gen_opt: AdamW,
    disc_opt: AdamW,
    mel: MelSpectrogram,
    exec: Execution,
    /// Next step to run.
    pub step: usize,
    /// Where a failing batch is written on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        generator: Generator,
        bank: DiscriminatorBank,
        recogniser: &Recogniser,
        weights: LossWeights,
        schedule: Schedule,
        exec: Execution,
    ) -> Result<Self> {
        weights.validate()?;
        schedule.validate()?;
        if recogniser.config().sample_rate != generator.config().sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: generator.config().sample_rate,
                got: recogniser.config().sample_rate,
            });
        }
        let cfg = generator.config();
        let mel = mel_front_end(cfg.sample_rate, cfg.n_fft, cfg.hop_length)?;
        let gen_opt = AdamW::new(generator.params().vars(), schedule.adamw())?;
        let disc_opt = AdamW::new(bank.params().vars(), schedule.adamw())?;
        Ok(Self {
            generator,
            bank,
            recogniser: recogniser.frozen(),
            weights,
            schedule,
            gen_opt,
            disc_opt,
            mel,
            exec,
            step: 0,
            dump_dir: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// The frozen recogniser copy used for the CTC term.
    pub fn recogniser(&self) -> &Recogniser {
        &self.recogniser
    }

    /// One alternating update: generator on the weighted composite loss, then
    /// the discriminators on the hinge loss against the same synthesised batch.
    pub fn train_step(&mut self, data: &[TrainingTriplet]) -> Result<StepLosses> {
        let step = self.step;
        let lr = self.schedule.lr(step)?;
        let hop = self.generator.config().hop_length;
        let batch = sample_batch(data, &self.schedule, step, hop, self.generator.dtype())?;
        let (_, frames) = batch.chars.dims2()?;
        let lengths = vec![frames; self.schedule.batch_size];
        let chars = self.generator.config().conditioning_enabled.then_some(&batch.chars);
        let fake = self.generator.forward_batch(&batch.tokens, chars)?;

        let l_mel = mel_loss_batch(&self.mel, &batch.audio, &fake)?;
        let ctc_input = if self.weights.lambda_ctc == 0.0 { fake.detach() } else { fake.clone() };
        let log_probs = self.recogniser.log_probs_batch(&ctc_input)?;
        let l_ctc = ctc_loss_batch(&log_probs, &batch.targets, &lengths, Reduction::MeanPerLabel, self.exec)?;
        // The real pass carries the live weights for the discriminator update
        // below; the generator side only sees its features as constants.
        let real_out = self.bank.discriminate_batch(&batch.audio, false)?;
        let real_features: Vec<Vec<Tensor>> = features(&real_out)
            .into_iter()
            .map(|layers| layers.iter().map(Tensor::detach).collect())
            .collect();
        let fake_out = self.bank.discriminate_batch(&fake, true)?;
        let l_gan = gen_adv_loss(&scores(&fake_out))?;
        let l_fm = feature_matching_loss(&real_features, &features(&fake_out))?;
        let l_gen = generator_loss_tensor(&l_mel, &l_gan, &l_fm, &l_ctc, &self.weights)?;
        let values = [
            ("l_mel", scalar(&l_mel)?),
            ("l_gan", scalar(&l_gan)?),
            ("l_fm", scalar(&l_fm)?),
            ("l_ctc", scalar(&l_ctc)?),
        ];
        if let Err(e) = check_finite(step, &values) {
            self.dump(&batch);
            return Err(e);
        }
        let grads = l_gen.backward()?;
        self.gen_opt.clipped_step(&grads, lr, self.schedule.grad_clip)?;

        let fake = fake.detach();
        let fake_out = self.bank.discriminate_batch(&fake, false)?;
        let l_disc = disc_loss(&scores(&real_out), &scores(&fake_out))?;
        let l_disc_value = scalar(&l_disc)?;
        if let Err(e) = check_finite(step, &[("l_disc", l_disc_value)]) {
            self.dump(&batch);
            return Err(e);
        }
        let grads = l_disc.backward()?;
        self.disc_opt.clipped_step(&grads, lr, self.schedule.grad_clip)?;

        self.step += 1;
        let [(_, l_mel), (_, l_gan), (_, l_fm), (_, l_ctc)] = values;
        Ok(StepLosses {
            step,
            lr,
            l_mel,
            l_gan,
            l_fm,
            l_ctc,
            // Recomputed in f64 so the logged total matches the logged parts exactly.
            l_gen: generator_loss(l_mel, l_gan, l_fm, l_ctc, &self.weights),
            l_disc: l_disc_value,
        })
    }

    fn dump(&self, batch: &Batch) {
        let Some(dir) = &self.dump_dir else { return };
        let write = || -> Result<()> {
            fs::create_dir_all(dir)?;
            let audio: Vec<Vec<f32>> = batch.audio.to_dtype(DType::F32)?.to_vec2()?;
            for (i, (samples, id)) in audio.into_iter().zip(&batch.ids).enumerate() {
                let wave = Waveform::new(samples, self.generator.config().sample_rate);
                wave.write_wav(dir.join(format!("step{}_{i}_{id}.wav", self.step)))?;
            }
            let chars: Vec<Vec<u32>> = batch.chars.to_vec2()?;
            fs::write(
                dir.join(format!("step{}_batch.json", self.step)),
                serde_json::to_vec(&serde_json::json!({ "ids": batch.ids, "chars": chars }))?,
            )?;
            Ok(())
        };
        if let Err(e) = write() {
            warn!("could not dump failing batch: {e}");
        }
    }

    /// Runs the remaining steps, appending rows to `metrics` and saving state
    /// every `checkpoint_every` steps (and at the end) when `state_path` is set.
    pub fn run(
        &mut self,
        data: &[TrainingTriplet],
        metrics: &Path,
        state_path: Option<&Path>,
        checkpoint_every: usize,
    ) -> Result<Vec<StepLosses>> {
        let mut log = open_metrics(metrics, self.step)?;
        let mut rows = Vec::with_capacity(self.schedule.total_steps - self.step.min(self.schedule.total_steps));
        while !self.is_finished() {
            let row = self.train_step(data)?;
            writeln!(log, "{}", row.csv_row())?;
            if row.step % 100 == 0 {
                info!(
                    "step {} lr {:.2e} mel {:.4} ctc {:.4} gan {:.4} fm {:.4} disc {:.4}",
                    row.step, row.lr, row.l_mel, row.l_ctc, row.l_gan, row.l_fm, row.l_disc
                );
            }
            rows.push(row);
            if let Some(path) = state_path {
                if checkpoint_every > 0 && self.step.is_multiple_of(checkpoint_every) && !self.is_finished() {
                    log.flush()?;
                    self.save_state(path)?;
                }
            }
        }
        log.flush()?;
        if let Some(path) = state_path {
            self.save_state(path)?;
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "step": self.step,
            "schedule": self.schedule,
            "weights": self.weights,
            "vocoder": self.generator.config(),
            "discriminators": self.bank.config(),
        });
        let mut ck = Checkpoint::new(TRAINING_STATE_KIND, meta);
        ck.tensors.extend(self.generator.params().export("gen.")?);
        ck.tensors.extend(self.bank.params().export("disc.")?);
        ck.tensors.extend(self.gen_opt.export("gen_opt.")?);
        ck.tensors.extend(self.disc_opt.export("disc_opt.")?);
        Ok(ck)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds a trainer from a saved state; the schedule and weights come
    /// from the checkpoint.
    pub fn resume(path: &Path, recogniser: &Recogniser, exec: Execution) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(TRAINING_STATE_KIND, path)?;
        let bad = |what: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing or malformed {what}"),
        };
        let vocoder: VocoderConfig = serde_json::from_value(ck.meta["vocoder"].clone()).map_err(|_| bad("vocoder"))?;
        let disc: DiscriminatorConfig =
            serde_json::from_value(ck.meta["discriminators"].clone()).map_err(|_| bad("discriminators"))?;
        let schedule: Schedule = serde_json::from_value(ck.meta["schedule"].clone()).map_err(|_| bad("schedule"))?;
        let weights: LossWeights = serde_json::from_value(ck.meta["weights"].clone()).map_err(|_| bad("weights"))?;
        let step = ck.meta["step"].as_u64().ok_or_else(|| bad("step"))? as usize;
        let generator = Generator::new(vocoder, 0)?;
        generator.params().import("gen.", &ck.tensors)?;
        let bank = DiscriminatorBank::new(disc, 0)?;
        bank.params().import("disc.", &ck.tensors)?;
        let mut trainer = Self::new(generator, bank, recogniser, weights, schedule, exec)?;
        trainer.gen_opt.import("gen_opt.", &ck.tensors)?;
        trainer.disc_opt.import("disc_opt.", &ck.tensors)?;
        trainer.step = step;
        Ok(trainer)
    }
}

/// Opens the metrics log for a run starting at `from_step`: a fresh file with
/// the header at step 0, otherwise the existing log cut back to `from_step` rows.
fn open_metrics(path: &Path, from_step: usize) -> Result<fs::File> {
    if from_step == 0 || !path.exists() {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        return Ok(f);
    }
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text.lines().take(from_step + 1).collect();
    if kept.len() != from_step + 1 || kept[0] != METRICS_HEADER {
        return Err(Error::InvalidValue(format!(
            "metrics log {} does not cover the {from_step} steps being resumed",
            path.display()
        )));
    }
    let mut f = fs::File::create(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::RecogniserConfig;
    use crate::data::{synth_utterance, PseudoCodec, PseudoCodecConfig};
    use crate::symbols::resize_nearest;

    fn small_vocoder() -> VocoderConfig {
        VocoderConfig {
            channels: 16,
            blocks: 2,
            ..VocoderConfig::default()
        }
    }

    fn small_disc() -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: 4,
            ..DiscriminatorConfig::default()
        }
    }

    fn toy_data(recogniser: &Recogniser, n: usize) -> Vec<TrainingTriplet> {
        let cfg = small_vocoder();
        let codec = PseudoCodec::new(PseudoCodecConfig::for_vocoder(&cfg, 8, 1)).unwrap();
        ["ab cd", "efg hi", "jk lmn", "op qrs"]
            .iter()
            .take(n)
            .enumerate()
            .map(|(i, text)| {
                let (u, t) = synth_utterance(text, i as u64, 8000).unwrap();
                let a = codec.encode(&u).unwrap();
                let c = crate::asr::greedy_sequence(&recogniser.frame_posteriors(&u).unwrap());
                let c = resize_nearest(&c, a.frames()).unwrap();
                TrainingTriplet::new(format!("u{i}"), t, u, c, a, 64).unwrap()
            })
            .collect()
    }

    fn schedule(steps: usize) -> Schedule {
        Schedule {
            total_steps: steps,
            batch_size: 2,
            segment_frames: 16,
            ..Schedule::desk_training(3)
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule(11);
        assert_eq!(s.lr(0).unwrap(), s.initial_lr);
        assert_eq!(s.lr(10).unwrap(), 0.0);
        assert!((s.lr(5).unwrap() - s.initial_lr / 2.0).abs() < 1e-18);
        assert!(s.lr(11).is_err());
        assert_eq!(schedule(1).lr(0).unwrap(), s.initial_lr);
    }

    #[test]
    fn triplet_invariants() {
        let u = Waveform::new(vec![0.0; 128], 8000);
        let a = AcousticTokenGrid::new(vec![0; 4], 2, 2).unwrap();
        assert!(TrainingTriplet::new("x".into(), "".into(), u.clone(), CharSequence::blank(2), a.clone(), 64).is_ok());
        assert!(TrainingTriplet::new("x".into(), "".into(), u.clone(), CharSequence::blank(3), a.clone(), 64).is_err());
        assert!(TrainingTriplet::new("x".into(), "".into(), u, CharSequence::blank(2), a, 32).is_err());
    }

    #[test]
    fn batches_are_reproducible() {
        let r = Recogniser::new(RecogniserConfig::default(), 0).unwrap();
        let data = toy_data(&r, 3);
        let s = schedule(5);
        let a = sample_batch(&data, &s, 4, 64, DType::F32).unwrap();
        let b = sample_batch(&data, &s, 4, 64, DType::F32).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.chars.to_vec2::<u32>().unwrap(), b.chars.to_vec2::<u32>().unwrap());
        assert_eq!(a.audio.dims(), &[2, 16 * 64]);
        assert_eq!(a.tokens.dims(), &[2, 2, 16]);
        for (t, c) in a.targets.iter().zip(a.chars.to_vec2::<u32>().unwrap()) {
            let c = CharSequence::new(c.into_iter().map(|x| x as u8).collect()).unwrap();
            assert_eq!(t, &collapse(&c));
        }
    }

    #[test]
    fn warmup_freezes_generator() {
        let r = Recogniser::new(RecogniserConfig::default(), 0).unwrap();
        let data = toy_data(&r, 2);
        let g = Generator::new(small_vocoder(), 1).unwrap();
        let bank = DiscriminatorBank::new(small_disc(), 2).unwrap();
        let g_before = g.params().fingerprint().unwrap();
        let d_before = bank.params().fingerprint().unwrap();
        let losses = warmup_discriminators(&bank, &g, &data, &schedule(3)).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(g.params().fingerprint().unwrap(), g_before);
        assert_ne!(bank.params().fingerprint().unwrap(), d_before);
    }

    #[test]
    fn joint_step_contracts() {
        let r = Recogniser::new(RecogniserConfig::default(), 0).unwrap();
        let data = toy_data(&r, 2);
        let r_before = r.params().fingerprint().unwrap();
        let g = Generator::new(small_vocoder(), 1).unwrap();
        let g_before = g.params().fingerprint().unwrap();
        let bank = DiscriminatorBank::new(small_disc(), 2).unwrap();
        let mut trainer = Trainer::new(g, bank, &r, LossWeights::default(), schedule(3), Execution::Parallel).unwrap();
        let first = trainer.train_step(&data).unwrap();
        for v in [first.l_mel, first.l_gan, first.l_fm, first.l_ctc, first.l_disc] {
            assert!(v.is_finite());
        }
        let w = LossWeights::default();
        assert!((first.l_gen - generator_loss(first.l_mel, first.l_gan, first.l_fm, first.l_ctc, &w)).abs() < 1e-12);
        trainer.train_step(&data).unwrap();
        assert_eq!(r.params().fingerprint().unwrap(), r_before);
        assert_ne!(trainer.generator.params().fingerprint().unwrap(), g_before);
        let cond_grad_moved = trainer.generator.conditioning_layers().iter().any(|l| {
            let w: Vec<f32> = l.w.table().flatten_all().unwrap().to_vec1().unwrap();
            w.iter().any(|&x| x != 1.0)
        });
        assert!(cond_grad_moved);
    }

    #[test]
    fn resume_reproduces_the_log() {
        let r = Recogniser::new(RecogniserConfig::default(), 0).unwrap();
        let data = toy_data(&r, 2);
        let dir = tempfile::tempdir().unwrap();
        let fresh = || {
            let g = Generator::new(small_vocoder(), 1).unwrap();
            let bank = DiscriminatorBank::new(small_disc(), 2).unwrap();
            Trainer::new(g, bank, &r, LossWeights::default(), schedule(4), Execution::Parallel).unwrap()
        };
        let full_log = dir.path().join("full.csv");
        fresh().run(&data, &full_log, None, 0).unwrap();

        let part_log = dir.path().join("part.csv");
        let state = dir.path().join("state.ckpt");
        let mut t = fresh();
        t.schedule.total_steps = 4;
        // Stop after two steps by running them by hand, then save.
        let mut f = open_metrics(&part_log, 0).unwrap();
        for _ in 0..2 {
            writeln!(f, "{}", t.train_step(&data).unwrap().csv_row()).unwrap();
        }
        drop(f);
        t.save_state(&state).unwrap();
        let mut resumed = Trainer::resume(&state, &r, Execution::Parallel).unwrap();
        assert_eq!(resumed.step, 2);
        resumed.run(&data, &part_log, Some(&state), 0).unwrap();
        assert_eq!(fs::read(&full_log).unwrap(), fs::read(&part_log).unwrap());
        assert_eq!(read_metrics(&full_log).unwrap().len(), 4);
    }

    #[test]
    fn metrics_row_round_trip() {
        let row = StepLosses {
            step: 7,
            lr: 1.25e-4,
            l_mel: 0.5,
            l_gan: -0.1,
            l_fm: 0.3,
            l_ctc: 2.0,
            l_gen: 3.0,
            l_disc: 1.9,
        };
        assert_eq!(StepLosses::parse_csv_row(&row.csv_row()).unwrap(), row);
    }
}
