use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use charvoc::asr::{train_recogniser, LabelledAudio};
use charvoc::checkpoint::Checkpoint;
use charvoc::config::RunConfig;
use charvoc::data::{
    build_triplets, generate_corpus, read_manifest, read_triplet_cache, write_manifest, write_triplet_cache,
    ManifestEntry, PseudoCodec,
};
use charvoc::evaluation::{evaluate_corpus, EvalExtras, EvalReport, Passthrough, Resynthesizer, VocoderResynthesizer};
use charvoc::symbols::resize_nearest;
use charvoc::training::{warmup_discriminators, Trainer};
use charvoc::{
    asr::greedy_sequence, CharVocabulary, DiscriminatorBank, Execution, Generator, Recogniser, TrainingTriplet,
    Waveform,
};
use log::{info, warn};
use serde_json::json;

use crate::Failure;

type Res<T> = Result<T, Failure>;

const VOCAB_FILE: &str = "vocab.txt";
const ASR_CKPT: &str = "asr.ckpt";
const TRIPLET_DIR: &str = "triplets";
const GENERATOR_INIT: &str = "generator_init.ckpt";
const DISCRIMINATORS: &str = "discriminators.ckpt";
const TRAIN_STATE: &str = "train_state.ckpt";
const GENERATOR: &str = "generator.ckpt";
const METRICS: &str = "metrics.csv";

fn exec() -> Execution {
    Execution::default()
}

fn work(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.work_dir().join(name)
}

fn vocabulary(cfg: &RunConfig) -> Res<CharVocabulary> {
    let path = work(cfg, VOCAB_FILE);
    if path.exists() {
        Ok(CharVocabulary::read_file(&path)?)
    } else {
        Ok(CharVocabulary::standard())
    }
}

/// Manifest path for `key`, falling back to the corpus `prepare-data` writes.
fn manifest_path(cfg: &RunConfig, key: &str, split: &str) -> PathBuf {
    cfg.optional_path(key)
        .unwrap_or_else(|| work(cfg, split).join("manifest.jsonl"))
}

fn load_manifest(cfg: &RunConfig, key: &str, split: &str) -> Res<(Vec<ManifestEntry>, PathBuf)> {
    let path = manifest_path(cfg, key, split);
    let entries = read_manifest(&path, &vocabulary(cfg)?)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((entries, base))
}

fn load_recogniser(cfg: &RunConfig) -> Res<Recogniser> {
    let path = work(cfg, ASR_CKPT);
    let r = Recogniser::load(&path).with_context(|| format!("loading recogniser {} (run train-asr)", path.display()))?;
    let (sr, hop) = (cfg.get_u64("sample_rate")? as u32, cfg.get_usize("hop_length")?);
    if r.config().sample_rate != sr || r.config().hop_length != hop {
        return Err(anyhow!(
            "recogniser was trained at {} Hz / hop {}, config says {sr} Hz / hop {hop}",
            r.config().sample_rate,
            r.config().hop_length
        )
        .into());
    }
    Ok(r)
}

fn load_generator(cfg: &RunConfig, path: &Path) -> Res<Generator> {
    let g = Generator::load(path).with_context(|| format!("loading generator {}", path.display()))?;
    let want = cfg.vocoder()?;
    let have = g.config();
    if have.sample_rate != want.sample_rate || have.hop_length != want.hop_length || have.codebooks != want.codebooks {
        return Err(anyhow!("generator {} does not match the configured sample rate, hop or codebooks", path.display()).into());
    }
    Ok(g)
}

fn load_triplets(cfg: &RunConfig) -> Res<Vec<TrainingTriplet>> {
    let dir = work(cfg, TRIPLET_DIR);
    let triplets = read_triplet_cache(&dir, cfg.get_usize("hop_length")?)
        .with_context(|| format!("reading triplet cache {} (run prepare-data after train-asr)", dir.display()))?;
    if triplets.is_empty() {
        return Err(anyhow!("triplet cache {} is empty", dir.display()).into());
    }
    Ok(triplets)
}

pub fn prepare_data(cfg: &RunConfig) -> Res<()> {
    let root = cfg.work_dir();
    fs::create_dir_all(&root)?;
    let vocab = vocabulary(cfg)?;
    vocab.write_file(root.join(VOCAB_FILE))?;
    let seed = cfg.get_u64("seed")?;
    let sr = cfg.get_u64("sample_rate")? as u32;
    for (key, split, prefix, count, split_seed) in [
        ("train_manifest", "train", "tr", "train_utterances", seed),
        ("test_manifest", "test", "te", "test_utterances", seed.wrapping_add(1)),
    ] {
        if cfg.optional_path(key).is_some() {
            info!("{split}: using the manifest given by {key}");
            continue;
        }
        let dir = root.join(split);
        let entries = generate_corpus(&dir, prefix, cfg.get_usize(count)?, split_seed, sr, exec())?;
        write_manifest(dir.join("manifest.jsonl"), &entries)?;
        info!("{split}: wrote {} utterances to {}", entries.len(), dir.display());
    }

    if !work(cfg, ASR_CKPT).exists() {
        info!("no {ASR_CKPT} yet: run train-asr, then prepare-data again to build the triplet cache");
        return Ok(());
    }
    let recogniser = load_recogniser(cfg)?;
    let codec = PseudoCodec::new(cfg.codec()?)?;
    let (entries, base) = load_manifest(cfg, "train_manifest", "train")?;
    let (triplets, skipped) = build_triplets(&entries, &base, &recogniser, &codec, exec());
    write_triplet_cache(&work(cfg, TRIPLET_DIR), &triplets)?;
    let non_blank = triplets.iter().map(|t| t.c.non_blank_fraction()).sum::<f64>() / triplets.len().max(1) as f64;
    info!(
        "triplet cache: {} records, {} skipped, mean non-blank fraction {non_blank:.3}",
        triplets.len(),
        skipped.len()
    );
    if !skipped.is_empty() {
        return Err(Failure::Skipped {
            ids: skipped.into_iter().map(|s| s.id).collect(),
        });
    }
    Ok(())
}

pub fn train_asr(cfg: &RunConfig) -> Res<()> {
    let vocab = vocabulary(cfg)?;
    let (entries, base) = load_manifest(cfg, "train_manifest", "train")?;
    let data = entries
        .iter()
        .map(|e| Ok(LabelledAudio::new(Waveform::read_wav(e.audio_path(&base))?, &e.text, &vocab)?))
        .collect::<Res<Vec<_>>>()?;
    let model = Recogniser::new(cfg.recogniser()?, cfg.get_u64("seed")?)?;
    let opts = charvoc::asr::AsrTrainOptions {
        seed: cfg.get_u64("seed")?,
        ..cfg.asr_training()?
    };
    let losses = train_recogniser(&model, &data, &opts)?;
    fs::create_dir_all(cfg.work_dir())?;
    model.save(work(cfg, ASR_CKPT))?;
    let tail = &losses[losses.len().saturating_sub(50)..];
    info!(
        "recogniser: {} steps, mean loss over the last {} steps {:.4}",
        losses.len(),
        tail.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    Ok(())
}

pub fn warmup(cfg: &RunConfig) -> Res<()> {
    let triplets = load_triplets(cfg)?;
    let seed = cfg.get_u64("seed")?;
    let generator = Generator::new(cfg.vocoder()?, seed)?;
    generator.save(work(cfg, GENERATOR_INIT))?;
    let bank = DiscriminatorBank::new(cfg.discriminators()?, seed)?;
    let losses = warmup_discriminators(&bank, &generator, &triplets, &cfg.warmup_schedule()?)?;
    bank.to_checkpoint()?.save(work(cfg, DISCRIMINATORS))?;
    info!(
        "warm-up: {} steps, final discriminator loss {:.4}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool) -> Res<()> {
    let triplets = load_triplets(cfg)?;
    let recogniser = load_recogniser(cfg)?;
    let state = work(cfg, TRAIN_STATE);
    let mut trainer = if resume && state.exists() {
        info!("resuming from {}", state.display());
        Trainer::resume(&state, &recogniser, exec())?
    } else {
        let mut generator = load_generator(cfg, &work(cfg, GENERATOR_INIT))?;
        generator.set_conditioning(cfg.get_bool("conditioning")?);
        let path = work(cfg, DISCRIMINATORS);
        let bank = DiscriminatorBank::from_checkpoint(
            &Checkpoint::load(&path).with_context(|| format!("loading {} (run warmup)", path.display()))?,
        )?;
        Trainer::new(generator, bank, &recogniser, cfg.loss_weights()?, cfg.training_schedule()?, exec())?
    };
    trainer.dump_dir = Some(work(cfg, "failed_batch"));
    let rows = trainer.run(&triplets, &work(cfg, METRICS), Some(&state), cfg.get_usize("checkpoint_every")?)?;
    trainer.generator.save(work(cfg, GENERATOR))?;
    if let Some(last) = rows.last() {
        info!("trained to step {}: l_mel {:.4} l_ctc {:.4}", last.step + 1, last.l_mel, last.l_ctc);
    }
    Ok(())
}

fn vocoder_for_inference(cfg: &RunConfig, checkpoint: Option<&Path>, no_conditioning: bool) -> Res<Generator> {
    let path = checkpoint.map_or_else(|| work(cfg, GENERATOR), Path::to_path_buf);
    let mut generator = load_generator(cfg, &path)?;
    generator.set_conditioning(cfg.get_bool("conditioning")? && !no_conditioning);
    Ok(generator)
}

fn resynthesize_one(
    generator: &Generator,
    recogniser: Option<&Recogniser>,
    codec: &PseudoCodec,
    u: &Waveform,
) -> Res<Waveform> {
    let u = u.trimmed_to(generator.config().hop_length);
    let a = codec.encode(&u)?;
    let out = match recogniser {
        Some(r) => {
            let c = resize_nearest(&greedy_sequence(&r.frame_posteriors(&u)?), a.frames())?;
            generator.forward(&a, Some(&c))?
        }
        None => generator.forward(&a, None)?,
    };
    Ok(out)
}

pub fn synth(cfg: &RunConfig, input: &Path, output: &Path, checkpoint: Option<&Path>, no_conditioning: bool) -> Res<()> {
    let generator = vocoder_for_inference(cfg, checkpoint, no_conditioning)?;
    let recogniser = if generator.config().conditioning_enabled {
        Some(load_recogniser(cfg)?)
    } else {
        None
    };
    let codec = PseudoCodec::new(cfg.codec()?)?;
    let is_manifest = input.extension().is_some_and(|e| e == "jsonl");
    if !is_manifest {
        let u = Waveform::read_wav(input).with_context(|| format!("reading {}", input.display()))?;
        resynthesize_one(&generator, recogniser.as_ref(), &codec, &u)?.write_wav(output)?;
        info!("wrote {}", output.display());
        return Ok(());
    }
    let entries = read_manifest(input, &vocabulary(cfg)?)?;
    let base = input.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(output)?;
    let results = exec().map(&entries, |e| -> Res<()> {
        let u = Waveform::read_wav(e.audio_path(&base))?;
        resynthesize_one(&generator, recogniser.as_ref(), &codec, &u)?.write_wav(output.join(format!("{}.wav", e.id)))?;
        Ok(())
    });
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        if let Err(f) = r {
            let msg = match f {
                Failure::Runtime(err) => format!("{err:#}"),
                Failure::Config { msg, .. } => msg,
                Failure::Skipped { .. } => "skipped".into(),
            };
            warn!("skipping {}: {msg}", e.id);
            skipped.push(e.id.clone());
        }
    }
    info!("wrote {} files to {}", entries.len() - skipped.len(), output.display());
    if !skipped.is_empty() {
        return Err(Failure::Skipped { ids: skipped });
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, system: &dyn Resynthesizer, recogniser: &Recogniser) -> Res<EvalReport> {
    let (entries, base) = load_manifest(cfg, "test_manifest", "test")?;
    Ok(evaluate_corpus(&entries, &base, system, recogniser, &vocabulary(cfg)?, EvalExtras::default(), exec())?)
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    passthrough: bool,
    no_conditioning: bool,
    output: Option<&Path>,
) -> Res<()> {
    let recogniser = load_recogniser(cfg)?;
    let report = if passthrough {
        evaluate(cfg, &Passthrough, &recogniser)?
    } else {
        let generator = vocoder_for_inference(cfg, checkpoint, no_conditioning)?;
        let codec = PseudoCodec::new(cfg.codec()?)?;
        let system = VocoderResynthesizer {
            generator: &generator,
            recogniser: &recogniser,
            codec: &codec,
        };
        evaluate(cfg, &system, &recogniser)?
    };
    let path = output.map_or_else(|| work(cfg, "eval.json"), Path::to_path_buf);
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.table());
    info!("report written to {}", path.display());
    if !report.skipped.is_empty() {
        return Err(Failure::Skipped {
            ids: report.skipped.iter().map(|s| s.id.clone()).collect(),
        });
    }
    Ok(())
}

/// Warm-up, joint training and evaluation of one ablation arm.
fn ablation_arm(
    cfg: &RunConfig,
    conditioned: bool,
    triplets: &[TrainingTriplet],
    recogniser: &Recogniser,
) -> Res<EvalReport> {
    let name = if conditioned { "conditioned" } else { "unconditioned" };
    let seed = cfg.get_u64("seed")?;
    let mut vcfg = cfg.vocoder()?;
    vcfg.conditioning_enabled = conditioned;
    let mut weights = cfg.loss_weights()?;
    if !conditioned {
        weights.lambda_ctc = 0.0;
    }
    let generator = Generator::new(vcfg, seed)?;
    let bank = DiscriminatorBank::new(cfg.discriminators()?, seed)?;
    warmup_discriminators(&bank, &generator, triplets, &cfg.warmup_schedule()?)?;
    let mut trainer = Trainer::new(generator, bank, recogniser, weights, cfg.training_schedule()?, exec())?;
    let dir = work(cfg, "ablate");
    fs::create_dir_all(&dir)?;
    trainer.run(triplets, &dir.join(format!("metrics_{name}.csv")), None, 0)?;
    trainer.generator.save(dir.join(format!("generator_{name}.ckpt")))?;
    let codec = PseudoCodec::new(cfg.codec()?)?;
    let system = VocoderResynthesizer {
        generator: &trainer.generator,
        recogniser,
        codec: &codec,
    };
    let report = evaluate(cfg, &system, recogniser)?;
    info!("{name}: WER {:.2}%", 100.0 * report.wer);
    Ok(report)
}

pub fn ablate(cfg: &RunConfig) -> Res<()> {
    let triplets = load_triplets(cfg)?;
    let recogniser = load_recogniser(cfg)?;
    let cond = ablation_arm(cfg, true, &triplets, &recogniser)?;
    let uncond = ablation_arm(cfg, false, &triplets, &recogniser)?;
    let summary = json!({
        "wer_conditioned": cond.wer,
        "wer_unconditioned": uncond.wer,
        "conditioned": cond,
        "unconditioned": uncond,
    });
    fs::write(work(cfg, "ablate.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!("wer_conditioned={:.6} wer_unconditioned={:.6}", cond.wer, uncond.wer);
    let skipped: Vec<String> = cond.skipped.iter().chain(&uncond.skipped).map(|s| s.id.clone()).collect();
    if !skipped.is_empty() {
        return Err(Failure::Skipped { ids: skipped });
    }
    Ok(())
}
