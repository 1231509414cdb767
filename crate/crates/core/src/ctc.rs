//! Connectionist temporal classification loss.
//!
//! The forward (alpha) and backward (beta) recursions run in log space over the
//! blank-extended label sequence. The gradient is the exact partial derivative
//! of the negative log-likelihood with respect to each log-probability entry:
//!
//! ```text
//! dL/dlogp[t][k] = -exp( logsum_{s : ext[s] = k} (alpha_t(s) + beta_t(s)) - logp[t][k] - log P )
//! ```
//!
//! so the log-probabilities are treated as free inputs (no softmax folded in).

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::device;
use crate::symbols::{LabelSequence, BLANK};

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn extended(target: &[u8], blank: u8) -> Vec<u8> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Frames needed to align `target`: one per label plus one per repeated neighbour pair.
pub fn required_frames(target: &[u8]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(log_probs: &[f64], frames: usize, vocab: usize, target: &[u8], blank: u8) -> Result<()> {
    if log_probs.len() < frames * vocab {
        return Err(Error::shape(format!("{frames} x {vocab}"), format!("{} values", log_probs.len())));
    }
    if frames == 0 {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = target.iter().find(|&&l| l as usize >= vocab || l == blank) {
        return Err(Error::InvalidValue(format!("target label {bad} is blank or outside the vocabulary")));
    }
    let required = required_frames(target);
    if required > frames {
        return Err(Error::TargetTooLong {
            target_len: target.len(),
            required,
            frames,
        });
    }
    Ok(())
}

fn alphas(lp: &[f64], frames: usize, vocab: usize, ext: &[u8]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = lp[ext[0] as usize];
    if s_len > 1 {
        alpha[1] = lp[ext[1] as usize];
    }
    for t in 1..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut acc = alpha[prev + s];
            if s >= 1 {
                acc = log_add(acc, alpha[prev + s - 1]);
            }
            if skip_allowed(ext, s) {
                acc = log_add(acc, alpha[prev + s - 2]);
            }
            alpha[t * s_len + s] = acc + row[ext[s] as usize];
        }
    }
    alpha
}

/// The `s - 2 -> s` skip is allowed onto a label that differs from the label
/// two positions back; blanks never skip. `ext[0]` is always the blank.
#[inline]
fn skip_allowed(ext: &[u8], s: usize) -> bool {
    s >= 2 && ext[s] != ext[0] && ext[s] != ext[s - 2]
}

fn betas(lp: &[f64], frames: usize, vocab: usize, ext: &[u8]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    let last = (frames - 1) * s_len;
    let row = &lp[(frames - 1) * vocab..frames * vocab];
    beta[last + s_len - 1] = row[ext[s_len - 1] as usize];
    if s_len > 1 {
        beta[last + s_len - 2] = row[ext[s_len - 2] as usize];
    }
    for t in (0..frames - 1).rev() {
        let row = &lp[t * vocab..(t + 1) * vocab];
        let next = (t + 1) * s_len;
        for s in 0..s_len {
            let mut acc = beta[next + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[next + s + 1]);
            }
            if s + 2 < s_len && skip_allowed(ext, s + 2) {
                acc = log_add(acc, beta[next + s + 2]);
            }
            beta[t * s_len + s] = acc + row[ext[s] as usize];
        }
    }
    beta
}

fn final_log_likelihood(alpha: &[f64], frames: usize, s_len: usize) -> f64 {
    let last = (frames - 1) * s_len;
    let mut ll = alpha[last + s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, alpha[last + s_len - 2]);
    }
    ll
}

/// Negative log-likelihood of `target` under a row-major `frames x vocab`
/// log-probability matrix.
pub fn ctc_nll(log_probs: &[f64], frames: usize, vocab: usize, target: &[u8], blank: u8) -> Result<f64> {
    check(log_probs, frames, vocab, target, blank)?;
    let ext = extended(target, blank);
    let alpha = alphas(log_probs, frames, vocab, &ext);
    Ok(-final_log_likelihood(&alpha, frames, ext.len()))
}

/// Negative log-likelihood and its gradient with respect to every log-probability.
pub fn ctc_nll_and_grad(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    target: &[u8],
    blank: u8,
) -> Result<(f64, Vec<f64>)> {
    check(log_probs, frames, vocab, target, blank)?;
    let ext = extended(target, blank);
    let s_len = ext.len();
    let alpha = alphas(log_probs, frames, vocab, &ext);
    let beta = betas(log_probs, frames, vocab, &ext);
    let ll = final_log_likelihood(&alpha, frames, s_len);
    let mut grad = vec![0.0; frames * vocab];
    if ll == f64::NEG_INFINITY {
        return Ok((f64::INFINITY, grad));
    }
    let mut occupancy = vec![f64::NEG_INFINITY; vocab];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..s_len {
            let k = ext[s] as usize;
            occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..vocab {
            if occupancy[k] > f64::NEG_INFINITY {
                grad[t * vocab + k] = -(occupancy[k] - log_probs[t * vocab + k] - ll).exp();
            }
        }
    }
    Ok((-ll, grad))
}

/// How per-utterance losses are combined across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean of raw negative log-likelihoods.
    Mean,
    /// Mean of negative log-likelihoods divided by their target lengths
    /// (empty targets count as length one).
    MeanPerLabel,
    Sum,
}

struct CtcBatchOp {
    targets: Vec<Vec<u8>>,
    lengths: Vec<usize>,
    exec: Execution,
}

impl CtcBatchOp {
    fn per_item(&self, lp: &[f64], frames: usize, vocab: usize) -> Result<Vec<(f64, Vec<f64>)>> {
        let items: Vec<usize> = (0..self.targets.len()).collect();
        self.exec.try_map(&items, |&b| {
            let slice = &lp[b * frames * vocab..(b + 1) * frames * vocab];
            let (nll, mut grad) = ctc_nll_and_grad(slice, self.lengths[b], vocab, &self.targets[b], BLANK)?;
            grad.resize(frames * vocab, 0.0);
            Ok::<_, Error>((nll, grad))
        })
    }

    fn host_values(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("ctc input must be contiguous".into()))?;
        Ok(match storage {
            CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
            CpuStorage::F64(v) => v[start..end].to_vec(),
            _ => candle_core::bail!("ctc supports f32 and f64 inputs"),
        })
    }
}

impl CustomOp1 for CtcBatchOp {
    fn name(&self) -> &'static str {
        "ctc-nll"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, frames, vocab) = layout.shape().dims3()?;
        let lp = Self::host_values(storage, layout)?;
        let items: Vec<usize> = (0..b).collect();
        let nll = self
            .exec
            .try_map(&items, |&i| {
                let slice = &lp[i * frames * vocab..(i + 1) * frames * vocab];
                ctc_nll(slice, self.lengths[i], vocab, &self.targets[i], BLANK)
            })
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(nll.iter().map(|&x| x as f32).collect()),
            _ => CpuStorage::F64(nll),
        };
        Ok((out, Shape::from(b)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, frames, vocab) = arg.dims3()?;
        let lp: Vec<f64> = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let upstream: Vec<f64> = grad_res.to_dtype(DType::F64)?.to_vec1()?;
        let per_item = self
            .per_item(&lp, frames, vocab)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let mut grad = Vec::with_capacity(b * frames * vocab);
        for (i, (_, g)) in per_item.into_iter().enumerate() {
            grad.extend(g.into_iter().map(|v| v * upstream[i]));
        }
        let g = Tensor::from_vec(grad, (b, frames, vocab), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(g))
    }
}

/// Differentiable batched CTC loss over `(B, T, V)` log-probabilities.
/// `lengths[b]` frames of item `b` are used; the rest is padding.
pub fn ctc_loss_batch(
    log_probs: &Tensor,
    targets: &[LabelSequence],
    lengths: &[usize],
    reduction: Reduction,
    exec: Execution,
) -> Result<Tensor> {
    let (b, frames, _) = log_probs.dims3()?;
    if targets.len() != b || lengths.len() != b {
        return Err(Error::LengthMismatch {
            left: b,
            right: targets.len().min(lengths.len()),
        });
    }
    for (i, (t, &len)) in targets.iter().zip(lengths).enumerate() {
        if len > frames || len == 0 {
            return Err(Error::InvalidValue(format!("item {i}: length {len} outside 1..={frames}")));
        }
        let required = t.min_frames();
        if required > len {
            return Err(Error::TargetTooLong {
                target_len: t.len(),
                required,
                frames: len,
            });
        }
    }
    let op = CtcBatchOp {
        targets: targets.iter().map(|t| t.as_slice().to_vec()).collect(),
        lengths: lengths.to_vec(),
        exec,
    };
    let nll = log_probs.contiguous()?.apply_op1(op)?;
    let out = match reduction {
        Reduction::Sum => nll.sum_all()?,
        Reduction::Mean => nll.mean_all()?,
        Reduction::MeanPerLabel => {
            let inv: Vec<f64> = targets.iter().map(|t| 1.0 / t.len().max(1) as f64).collect();
            let inv = Tensor::from_vec(inv, b, &device())?.to_dtype(nll.dtype())?;
            (nll * inv)?.mean_all()?
        }
    };
    Ok(out)
}
