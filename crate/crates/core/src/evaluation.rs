//! WER, EER and UAR, and a corpus runner that resynthesises every utterance
//! and scores the recogniser's transcript of the result.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use serde::Serialize;

use crate::asr::{greedy_sequence, Recogniser};
use crate::audio::Waveform;
use crate::data::{ManifestEntry, PseudoCodec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::symbols::{resize_nearest, CharVocabulary};
use crate::vocoder::Generator;

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer<T: PartialEq>(ref_words: &[T], hyp_words: &[T]) -> Result<f64> {
    if ref_words.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(ref_words, hyp_words) as f64 / ref_words.len() as f64)
}

/// Lowercases, drops characters outside the vocabulary, splits on whitespace.
pub fn words(text: &str, vocab: &CharVocabulary) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| c == ' ' || vocab.index_of_char(c).is_some())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialScores {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

impl TrialScores {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.is_empty() || impostor.is_empty() {
            return Err(Error::InvalidValue("trial lists must be non-empty".into()));
        }
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::InvalidValue("trial scores must be finite".into()));
        }
        Ok(Self { genuine, impostor })
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    pub fn impostor(&self) -> &[f64] {
        &self.impostor
    }
}

/// Equal error rate over thresholds at every observed score. FAR counts
/// impostors at or above the threshold, FRR genuine trials below it; the
/// threshold with the smallest `|FAR - FRR|` wins (lowest on ties) and the
/// rate is their midpoint there.
pub fn eer(s: &TrialScores) -> f64 {
    let mut genuine = s.genuine.clone();
    let mut impostor = s.impostor.clone();
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let mut best = (f64::INFINITY, 0.0);
    for th in thresholds {
        let far = (impostor.len() - impostor.partition_point(|&x| x < th)) as f64 / ni;
        let frr = genuine.partition_point(|&x| x < th) as f64 / ng;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, (far + frr) / 2.0);
        }
    }
    best.1
}

/// Unweighted average recall over the classes present in `labels`.
pub fn uar<T: Eq + Hash + Clone + std::fmt::Debug>(labels: &[T], preds: &[T]) -> Result<f64> {
    let mut classes: Vec<T> = Vec::new();
    for l in labels {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    uar_over(labels, preds, &classes)
}

/// UAR over an explicit class list; a listed class with no instances is an error.
pub fn uar_over<T: Eq + Hash + Clone + std::fmt::Debug>(labels: &[T], preds: &[T], classes: &[T]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: preds.len(),
        });
    }
    if classes.is_empty() {
        return Err(Error::EmptyClass("<no classes>".into()));
    }
    let mut totals: HashMap<&T, (usize, usize)> = classes.iter().map(|c| (c, (0, 0))).collect();
    for (l, p) in labels.iter().zip(preds) {
        if let Some(e) = totals.get_mut(l) {
            e.0 += 1;
            e.1 += usize::from(l == p);
        }
    }
    let mut sum = 0.0;
    for c in classes {
        let (n, hit) = totals[c];
        if n == 0 {
            return Err(Error::EmptyClass(format!("{c:?}")));
        }
        sum += hit as f64 / n as f64;
    }
    Ok(sum / classes.len() as f64)
}

/// Maps an input utterance to its anonymised / resynthesised version.
pub trait Resynthesizer: Sync {
    fn resynthesize(&self, u: &Waveform) -> Result<Waveform>;
}

/// Hands the input back unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Resynthesizer for Passthrough {
    fn resynthesize(&self, u: &Waveform) -> Result<Waveform> {
        Ok(u.clone())
    }
}

/// Copy-synthesis through the pseudo-codec and the vocoder, conditioned on the
/// recogniser's frame sequence when the generator has conditioning enabled.
pub struct VocoderResynthesizer<'a> {
    pub generator: &'a Generator,
    pub recogniser: &'a Recogniser,
    pub codec: &'a PseudoCodec,
}

impl Resynthesizer for VocoderResynthesizer<'_> {
    fn resynthesize(&self, u: &Waveform) -> Result<Waveform> {
        let u = u.trimmed_to(self.generator.config().hop_length);
        let a = self.codec.encode(&u)?;
        if self.generator.config().conditioning_enabled {
            let c = resize_nearest(&greedy_sequence(&self.recogniser.frame_posteriors(&u)?), a.frames())?;
            self.generator.forward(&a, Some(&c))
        } else {
            self.generator.forward(&a, None)
        }
    }
}

/// Scores speaker-verification trials built from original and anonymised audio.
pub trait SpeakerScorer: Sync {
    fn trials(&self, originals: &[Waveform], anonymised: &[Waveform]) -> Result<TrialScores>;
}

pub trait EmotionClassifier: Sync {
    fn classify(&self, u: &Waveform) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub word_errors: usize,
    pub ref_words: usize,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedUtterance {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Corpus WER: total word errors over total reference words.
    pub wer: f64,
    pub eer: Option<f64>,
    pub uar: Option<f64>,
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<SkippedUtterance>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let _ = writeln!(s, "{:<12} {:>8}  {:<24} hypothesis", "id", "wer", "reference");
        for r in &self.rows {
            let _ = writeln!(s, "{:<12} {:>7.2}%  {:<24} {}", r.id, 100.0 * r.wer, r.reference, r.hypothesis);
        }
        for k in &self.skipped {
            let _ = writeln!(s, "{:<12} skipped: {}", k.id, k.error);
        }
        let _ = writeln!(
            s,
            "utterances {}  skipped {}  WER {}  EER {}  UAR {}",
            self.rows.len(),
            self.skipped.len(),
            pct(Some(self.wer)),
            pct(self.eer),
            pct(self.uar)
        );
        s
    }
}

/// Optional extras for [`evaluate_corpus`].
#[derive(Default)]
pub struct EvalExtras<'a> {
    pub speaker_scorer: Option<&'a dyn SpeakerScorer>,
    pub emotion: Option<(&'a dyn EmotionClassifier, &'a [String])>,
}

pub fn evaluate_corpus(
    entries: &[ManifestEntry],
    base: &Path,
    system: &dyn Resynthesizer,
    recogniser: &Recogniser,
    vocab: &CharVocabulary,
    extras: EvalExtras<'_>,
    exec: Execution,
) -> Result<EvalReport> {
    struct Done {
        row: EvalRow,
        original: Waveform,
        anonymised: Waveform,
    }
    let results = exec.map(entries, |e| -> Result<Done> {
        let original = Waveform::read_wav(e.audio_path(base))?;
        let anonymised = system.resynthesize(&original)?;
        let hypothesis = recogniser.transcribe(&anonymised, vocab)?;
        let r = words(&e.text, vocab);
        let h = words(&hypothesis, vocab);
        let errors = edit_distance(&r, &h);
        let w = wer(&r, &h)?;
        Ok(Done {
            row: EvalRow {
                id: e.id.clone(),
                reference: e.text.clone(),
                hypothesis,
                word_errors: errors,
                ref_words: r.len(),
                wer: w,
            },
            original,
            anonymised,
        })
    });
    let mut done = Vec::new();
    let mut kept_labels = Vec::new();
    let mut skipped = Vec::new();
    for (i, (e, r)) in entries.iter().zip(results).enumerate() {
        match r {
            Ok(d) => {
                if let Some((_, labels)) = &extras.emotion {
                    kept_labels.push(labels.get(i).cloned().ok_or(Error::LengthMismatch {
                        left: entries.len(),
                        right: labels.len(),
                    })?);
                }
                done.push(d);
            }
            Err(err) => skipped.push(SkippedUtterance {
                id: e.id.clone(),
                error: err.to_string(),
            }),
        }
    }
    let total_words: usize = done.iter().map(|d| d.row.ref_words).sum();
    let total_errors: usize = done.iter().map(|d| d.row.word_errors).sum();
    let wer = if total_words == 0 { 0.0 } else { total_errors as f64 / total_words as f64 };
    let eer = match extras.speaker_scorer {
        Some(scorer) if !done.is_empty() => {
            let originals: Vec<Waveform> = done.iter().map(|d| d.original.clone()).collect();
            let anonymised: Vec<Waveform> = done.iter().map(|d| d.anonymised.clone()).collect();
            Some(eer(&scorer.trials(&originals, &anonymised)?))
        }
        _ => None,
    };
    let uar = match extras.emotion {
        Some((classifier, _)) if !done.is_empty() => {
            let preds = done
                .iter()
                .map(|d| classifier.classify(&d.anonymised))
                .collect::<Result<Vec<_>>>()?;
            Some(uar(&kept_labels, &preds)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        wer,
        eer,
        uar,
        rows: done.into_iter().map(|d| d.row).collect(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Plain recursive definition of edit distance.
    fn oracle(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = oracle(ra, rb) + usize::from(x != y);
                sub.min(oracle(ra, b) + 1).min(oracle(a, rb) + 1)
            }
        }
    }

    fn sweep_oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
        let mut ths: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
        ths.sort_by(f64::total_cmp);
        let mut best: Option<(f64, f64)> = None;
        for th in ths {
            let far = impostor.iter().filter(|&&x| x >= th).count() as f64 / impostor.len() as f64;
            let frr = genuine.iter().filter(|&&x| x < th).count() as f64 / genuine.len() as f64;
            let gap = (far - frr).abs();
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, (far + frr) / 2.0));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&w("a b c"), &w("a b c")).unwrap(), 0.0);
        assert_eq!(wer(&w("a b c d"), &w("a x c d")).unwrap(), 0.25);
        assert_eq!(wer(&w("a b"), &w("")).unwrap(), 1.0);
        assert!(wer(&w("a"), &w("a b c")).unwrap() > 1.0);
        assert!(matches!(wer::<&str>(&[], &w("a")), Err(Error::EmptyReference)));
    }

    #[test]
    fn eer_examples() {
        let s = TrialScores::new(vec![0.9, 0.8], vec![0.1, 0.2]).unwrap();
        assert_eq!(eer(&s), 0.0);
        let s = TrialScores::new(vec![0.3, 0.7, 0.5], vec![0.5, 0.3, 0.7]).unwrap();
        assert_eq!(eer(&s), 0.5);
        let s = TrialScores::new(vec![0.6, 0.2], vec![0.4, 0.3]).unwrap();
        assert_eq!(eer(&s), sweep_oracle(&[0.6, 0.2], &[0.4, 0.3]));
        assert_eq!(eer(&s), 0.5);
        assert!(TrialScores::new(vec![], vec![0.1]).is_err());
        assert!(TrialScores::new(vec![f64::NAN], vec![0.1]).is_err());
    }

    /// A scorer that ranks impostors above every genuine trial sits at 1.0.
    #[test]
    fn inverted_scores() {
        let s = TrialScores::new(vec![0.0, 0.0, 0.0], vec![0.86, 1.11]).unwrap();
        assert_eq!(eer(&s), 1.0);
    }

    #[test]
    fn uar_examples() {
        assert_eq!(uar(&["a", "b", "b"], &["a", "b", "b"]).unwrap(), 1.0);
        assert_eq!(uar(&["a", "a", "b", "b"], &["a", "a", "b", "a"]).unwrap(), 0.75);
        let labels = ["w", "x", "y", "z", "w", "x", "y", "z"];
        assert_eq!(uar(&labels, &["w"; 8]).unwrap(), 0.25);
        assert!(matches!(uar(&["a"], &["a", "b"]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(uar_over(&["a"], &["a"], &["a", "q"]), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn tokenisation() {
        let v = CharVocabulary::standard();
        assert_eq!(words("  Hello,  it's\tME ", &v), vec!["hello", "it's", "me"]);
        assert!(words("", &v).is_empty());
    }

    #[test]
    fn edit_distance_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let a: Vec<u8> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(edit_distance(&a, &b), oracle(&a, &b));
        }
    }

    #[test]
    fn passthrough_evaluation_matches_direct_transcription() {
        let dir = tempfile::tempdir().unwrap();
        let entries = crate::data::generate_corpus(dir.path(), "e", 3, 4, 8000, Execution::Parallel).unwrap();
        let r = Recogniser::new(crate::asr::RecogniserConfig::default(), 0).unwrap();
        let v = CharVocabulary::standard();
        let mut with_missing = entries.clone();
        with_missing.push(ManifestEntry {
            id: "gone".into(),
            audio: "audio/gone.wav".into(),
            text: "ab".into(),
            duration: 0.16,
        });
        let report = evaluate_corpus(&with_missing, dir.path(), &Passthrough, &r, &v, EvalExtras::default(), Execution::Parallel).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.skipped.len(), 1);
        assert!(report.eer.is_none() && report.uar.is_none());
        for (row, e) in report.rows.iter().zip(&entries) {
            let u = Waveform::read_wav(e.audio_path(dir.path())).unwrap();
            assert_eq!(row.hypothesis, r.transcribe(&u, &v).unwrap());
        }
        assert!(report.table().contains("skipped 1"));
    }

    proptest! {
        #[test]
        fn eer_matches_sweep(genuine in prop::collection::vec(-3.0f64..3.0, 1..8), impostor in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let e = eer(&TrialScores::new(genuine.clone(), impostor.clone()).unwrap());
            prop_assert_eq!(e, sweep_oracle(&genuine, &impostor));
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn uar_ignores_relabelling(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..30)) {
            let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let preds: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let perm = |x: u8| (x + 1) % 4;
            let a = uar(&labels, &preds).unwrap();
            let b = uar(&labels.iter().map(|&x| perm(x)).collect::<Vec<_>>(), &preds.iter().map(|&x| perm(x)).collect::<Vec<_>>()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn wer_normalisation_asymmetry(a in prop::collection::vec(0u8..3, 1..7), b in prop::collection::vec(0u8..3, 1..7)) {
            let lhs = wer(&a, &b).unwrap();
            let rhs = wer(&b, &a).unwrap() * b.len() as f64 / a.len() as f64;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
