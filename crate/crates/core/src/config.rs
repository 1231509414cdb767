//! Flat `key = value` run configuration.
//!
//! Every key is listed in [`KEYS`] with its type, default and the commands
//! that read it. Unknown keys and malformed values are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::asr::{AsrTrainOptions, RecogniserConfig};
use crate::data::PseudoCodecConfig;
use crate::error::{Error, Result};
use crate::losses::{DiscriminatorConfig, LossWeights};
use crate::training::Schedule;
use crate::vocoder::VocoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    PrepareData,
    TrainAsr,
    Warmup,
    Train,
    Synth,
    Eval,
    Ablate,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::PrepareData,
        Command::TrainAsr,
        Command::Warmup,
        Command::Train,
        Command::Synth,
        Command::Eval,
        Command::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::PrepareData => "prepare-data",
            Command::TrainAsr => "train-asr",
            Command::Warmup => "warmup",
            Command::Train => "train",
            Command::Synth => "synth",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
        }
    }
}

use Command::*;

pub struct KeySpec {
    pub name: &'static str,
    pub kind: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub used_by: &'static [Command],
}

const ALL: &[Command] = &Command::ALL;
const MODEL: &[Command] = &[PrepareData, Warmup, Train, Synth, Eval, Ablate];
const TRAINING: &[Command] = &[Warmup, Train, Ablate];

pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "work_dir", kind: "path", default: None, help: "directory holding corpus, caches, checkpoints and logs", used_by: ALL },
    KeySpec { name: "seed", kind: "int", default: Some("0"), help: "master seed for corpus, initialisation and batch sampling", used_by: ALL },
    KeySpec { name: "sample_rate", kind: "int", default: Some("8000"), help: "audio sample rate in Hz", used_by: ALL },
    KeySpec { name: "train_utterances", kind: "int", default: Some("500"), help: "synthetic training utterances written by prepare-data", used_by: &[PrepareData] },
    KeySpec { name: "test_utterances", kind: "int", default: Some("100"), help: "synthetic held-out utterances written by prepare-data", used_by: &[PrepareData] },
    KeySpec { name: "train_manifest", kind: "path", default: Some(""), help: "use this JSONL manifest instead of generating a training corpus", used_by: &[PrepareData, TrainAsr] },
    KeySpec { name: "test_manifest", kind: "path", default: Some(""), help: "use this JSONL manifest instead of generating a held-out corpus", used_by: &[PrepareData, Eval, Ablate] },
    KeySpec { name: "channels", kind: "int", default: Some("128"), help: "vocoder feature channels D", used_by: MODEL },
    KeySpec { name: "blocks", kind: "int", default: Some("4"), help: "ConvNeXt blocks K", used_by: MODEL },
    KeySpec { name: "kernel_size", kind: "int", default: Some("7"), help: "depthwise kernel width (odd)", used_by: MODEL },
    KeySpec { name: "codebooks", kind: "int", default: Some("2"), help: "codec codebooks Q", used_by: MODEL },
    KeySpec { name: "codebook_size", kind: "int", default: Some("64"), help: "entries per codebook", used_by: MODEL },
    KeySpec { name: "n_fft", kind: "int", default: Some("256"), help: "STFT size of the vocoder head, codec and mel loss", used_by: MODEL },
    KeySpec { name: "hop_length", kind: "int", default: Some("64"), help: "samples per frame", used_by: ALL },
    KeySpec { name: "conditioning", kind: "bool", default: Some("true"), help: "enable character conditioning", used_by: MODEL },
    KeySpec { name: "condition_before_head", kind: "bool", default: Some("true"), help: "place a conditioning layer after the last block (K layers); false gives K-1", used_by: MODEL },
    KeySpec { name: "codec_dim", kind: "int", default: Some("8"), help: "width of the pseudo-codec projection", used_by: MODEL },
    KeySpec { name: "codec_seed", kind: "int", default: Some("1"), help: "seed of the pseudo-codec projection and codebooks", used_by: MODEL },
    KeySpec { name: "asr_hidden", kind: "int", default: Some("96"), help: "recogniser hidden channels", used_by: &[TrainAsr] },
    KeySpec { name: "asr_steps", kind: "int", default: Some("600"), help: "recogniser training steps", used_by: &[TrainAsr] },
    KeySpec { name: "asr_batch_size", kind: "int", default: Some("8"), help: "recogniser batch size", used_by: &[TrainAsr] },
    KeySpec { name: "asr_lr", kind: "float", default: Some("0.002"), help: "recogniser initial learning rate (cosine to 0)", used_by: &[TrainAsr] },
    KeySpec { name: "disc_channels", kind: "int", default: Some("8"), help: "channels per discriminator layer", used_by: TRAINING },
    KeySpec { name: "disc_periods", kind: "int list", default: Some("2,3,5"), help: "periods of the multi-period discriminators (distinct primes)", used_by: TRAINING },
    KeySpec { name: "disc_resolutions", kind: "n_fft:hop list", default: Some("128:32,256:64"), help: "STFT settings of the multi-resolution discriminators", used_by: TRAINING },
    KeySpec { name: "warmup_steps", kind: "int", default: Some("200"), help: "discriminator warm-up steps", used_by: &[Warmup, Ablate] },
    KeySpec { name: "warmup_lr", kind: "float", default: Some("0.001"), help: "warm-up initial learning rate", used_by: &[Warmup, Ablate] },
    KeySpec { name: "train_steps", kind: "int", default: Some("2000"), help: "joint training steps", used_by: &[Train, Ablate] },
    KeySpec { name: "lr", kind: "float", default: Some("0.0005"), help: "joint training initial learning rate (generator and discriminators)", used_by: &[Train, Ablate] },
    KeySpec { name: "weight_decay", kind: "float", default: Some("0.01"), help: "AdamW decoupled weight decay", used_by: TRAINING },
    KeySpec { name: "batch_size", kind: "int", default: Some("8"), help: "crops per step", used_by: TRAINING },
    KeySpec { name: "segment_frames", kind: "int", default: Some("32"), help: "frames per training crop", used_by: TRAINING },
    KeySpec { name: "grad_clip", kind: "float", default: Some("10"), help: "global gradient-norm clip; 0 disables", used_by: TRAINING },
    KeySpec { name: "checkpoint_every", kind: "int", default: Some("500"), help: "steps between training-state checkpoints; 0 saves only at the end", used_by: &[Train] },
    KeySpec { name: "lambda_mel", kind: "float", default: Some("1"), help: "weight of the log-mel L1 loss", used_by: &[Train, Ablate] },
    KeySpec { name: "lambda_gan", kind: "float", default: Some("0.5"), help: "weight of the generator hinge loss", used_by: &[Train, Ablate] },
    KeySpec { name: "lambda_fm", kind: "float", default: Some("1"), help: "weight of the feature-matching loss", used_by: &[Train, Ablate] },
    KeySpec { name: "lambda_ctc", kind: "float", default: Some("1.5"), help: "weight of the CTC content loss", used_by: &[Train, Ablate] },
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn keys_for(cmd: Command) -> impl Iterator<Item = &'static KeySpec> {
    KEYS.iter().filter(move |k| k.used_by.contains(&cmd))
}

/// Parsed configuration: explicit values layered over the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(None, format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if key_spec(k).is_none() {
                return Err(Error::config(Some(k), format!("line {}: unknown key {k}", no + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(Some(k), format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        for k in KEYS.iter().filter(|k| k.default.is_none()) {
            if !values.contains_key(k.name) {
                return Err(Error::config(Some(k.name), format!("missing key {}", k.name)));
            }
        }
        let cfg = Self { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(None, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides (e.g. from the command line).
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(None, format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if key_spec(k).is_none() {
                return Err(Error::config(Some(k), format!("unknown key {k}")));
            }
            self.values.insert(k.to_string(), v.trim().to_string());
        }
        self.validate()?;
        Ok(self)
    }

    fn raw(&self, key: &str) -> &str {
        let spec = key_spec(key).unwrap_or_else(|| panic!("undocumented key {key}"));
        self.values
            .get(key)
            .map(String::as_str)
            .or(spec.default)
            .unwrap_or_else(|| panic!("required key {key} checked at parse time"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::config(Some(key), format!("key {key}: cannot parse {raw:?}: {e}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if !v.is_finite() {
            return Err(Error::config(Some(key), format!("key {key}: value must be finite")));
        }
        Ok(v)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    pub fn get_str(&self, key: &str) -> &str {
        self.raw(key)
    }

    fn validate(&self) -> Result<()> {
        for spec in KEYS {
            if !self.values.contains_key(spec.name) && spec.default.is_none() {
                return Err(Error::config(Some(spec.name), format!("missing key {}", spec.name)));
            }
            match spec.kind {
                "int" => drop(self.get_u64(spec.name)?),
                "float" => drop(self.get_f64(spec.name)?),
                "bool" => drop(self.get_bool(spec.name)?),
                _ => {}
            }
        }
        self.periods()?;
        self.resolutions()?;
        let check = |what: &str, r: Result<()>| r.map_err(|e| Error::config(None, format!("{what}: {e}")));
        check("vocoder", self.vocoder()?.validate())?;
        check("discriminators", self.discriminators()?.validate())?;
        check("loss weights", self.loss_weights()?.validate())?;
        check("training schedule", self.training_schedule()?.validate())?;
        check("warm-up schedule", self.warmup_schedule()?.validate())?;
        Ok(())
    }

    pub fn work_dir(&self) -> PathBuf {
        PathBuf::from(self.get_str("work_dir"))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get_str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn periods(&self) -> Result<Vec<usize>> {
        self.get_str("disc_periods")
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| Error::config(Some("disc_periods"), format!("key disc_periods: {p:?}: {e}")))
            })
            .collect()
    }

    fn resolutions(&self) -> Result<Vec<(usize, usize)>> {
        self.get_str("disc_resolutions")
            .split(',')
            .map(|r| {
                let bad = || Error::config(Some("disc_resolutions"), format!("key disc_resolutions: {r:?} is not n_fft:hop"));
                let (a, b) = r.trim().split_once(':').ok_or_else(bad)?;
                Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
            })
            .collect()
    }

    pub fn vocoder(&self) -> Result<VocoderConfig> {
        Ok(VocoderConfig {
            channels: self.get_usize("channels")?,
            blocks: self.get_usize("blocks")?,
            codebooks: self.get_usize("codebooks")?,
            codebook_size: self.get_usize("codebook_size")?,
            n_fft: self.get_usize("n_fft")?,
            hop_length: self.get_usize("hop_length")?,
            sample_rate: self.get_u64("sample_rate")? as u32,
            conditioning_enabled: self.get_bool("conditioning")?,
            condition_before_head: self.get_bool("condition_before_head")?,
            kernel_size: self.get_usize("kernel_size")?,
            ..VocoderConfig::default()
        })
    }

    pub fn codec(&self) -> Result<PseudoCodecConfig> {
        Ok(PseudoCodecConfig::for_vocoder(
            &self.vocoder()?,
            self.get_usize("codec_dim")?,
            self.get_u64("codec_seed")?,
        ))
    }

    pub fn recogniser(&self) -> Result<RecogniserConfig> {
        Ok(RecogniserConfig {
            sample_rate: self.get_u64("sample_rate")? as u32,
            hop_length: self.get_usize("hop_length")?,
            hidden: self.get_usize("asr_hidden")?,
            ..RecogniserConfig::default()
        })
    }

    pub fn asr_training(&self) -> Result<AsrTrainOptions> {
        Ok(AsrTrainOptions {
            steps: self.get_usize("asr_steps")?,
            batch_size: self.get_usize("asr_batch_size")?,
            learning_rate: self.get_f64("asr_lr")?,
            seed: self.get_u64("seed")?,
        })
    }

    pub fn discriminators(&self) -> Result<DiscriminatorConfig> {
        Ok(DiscriminatorConfig {
            periods: self.periods()?,
            resolutions: self.resolutions()?,
            channels: self.get_usize("disc_channels")?,
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            lambda_mel: self.get_f64("lambda_mel")?,
            lambda_gan: self.get_f64("lambda_gan")?,
            lambda_fm: self.get_f64("lambda_fm")?,
            lambda_ctc: self.get_f64("lambda_ctc")?,
        })
    }

    fn schedule(&self, steps: &str, lr: &str) -> Result<Schedule> {
        let clip = self.get_f64("grad_clip")?;
        Ok(Schedule {
            total_steps: self.get_usize(steps)?,
            initial_lr: self.get_f64(lr)?,
            weight_decay: self.get_f64("weight_decay")?,
            batch_size: self.get_usize("batch_size")?,
            seed: self.get_u64("seed")?,
            segment_frames: self.get_usize("segment_frames")?,
            grad_clip: (clip > 0.0).then_some(clip),
        })
    }

    pub fn warmup_schedule(&self) -> Result<Schedule> {
        self.schedule("warmup_steps", "warmup_lr")
    }

    pub fn training_schedule(&self) -> Result<Schedule> {
        self.schedule("train_steps", "lr")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = RunConfig::parse("work_dir = /tmp/x\n").unwrap();
        assert_eq!(c.vocoder().unwrap(), VocoderConfig::default());
        assert_eq!(c.loss_weights().unwrap(), LossWeights::default());
        assert_eq!(c.discriminators().unwrap(), DiscriminatorConfig::default());
        assert_eq!(c.training_schedule().unwrap(), Schedule::desk_training(0));
        assert_eq!(c.warmup_schedule().unwrap(), Schedule::desk_warmup(0));
        assert_eq!(c.recogniser().unwrap(), RecogniserConfig::default());
        assert_eq!(c.work_dir(), PathBuf::from("/tmp/x"));
        assert!(c.optional_path("train_manifest").is_none());
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("seed = 1\n").unwrap_err().to_string();
        assert!(err.contains("work_dir"), "{err}");
        let err = RunConfig::parse("work_dir=x\nbogus = 3\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = RunConfig::parse("work_dir=x\nchannels = many\n").unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        assert!(matches!(
            RunConfig::parse("work_dir=x\nchannels = many\n"),
            Err(Error::Config { key: Some(k), .. }) if k == "channels"
        ));
        let err = RunConfig::parse("work_dir=x\ndisc_periods = 2,4\n").unwrap_err().to_string();
        assert!(err.contains("primes"), "{err}");
        assert!(RunConfig::parse("work_dir=x\nwork_dir=y\n").is_err());
        assert!(RunConfig::parse("work_dir x\n").is_err());
    }

    #[test]
    fn comments_overrides_and_lists() {
        let c = RunConfig::parse("# run\nwork_dir = w # trailing\nlambda_ctc = 0\ngrad_clip = 0\ndisc_resolutions = 64:16\n")
            .unwrap()
            .with_overrides(["train_steps=10"])
            .unwrap();
        assert_eq!(c.loss_weights().unwrap().lambda_ctc, 0.0);
        assert_eq!(c.training_schedule().unwrap().grad_clip, None);
        assert_eq!(c.training_schedule().unwrap().total_steps, 10);
        assert_eq!(c.discriminators().unwrap().resolutions, vec![(64, 16)]);
        assert!(c.clone().with_overrides(["nope=1"]).is_err());
    }

    #[test]
    fn every_command_has_keys() {
        for cmd in Command::ALL {
            assert!(keys_for(cmd).any(|k| k.name == "work_dir"), "{}", cmd.name());
        }
        for k in KEYS {
            if let Some(d) = k.default {
                assert!(k.kind != "int" || d.parse::<u64>().is_ok(), "{}", k.name);
            }
        }
    }
}
