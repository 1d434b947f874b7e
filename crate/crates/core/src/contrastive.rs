//! Memory-bank contrastive objective.
//!
//! Every logit row is laid out as `[s(m_I, c), s(c, m_1), .., s(c, m_N)] / tau`
//! where `c` is the candidate representation (the transformed view for the
//! invariance term, the untransformed view for the NPID term) and `m_k` are
//! memory-bank rows of other images.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::{l2_normalize_slice, nce_row, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NceConfig {
    pub temperature: f64,
    pub negatives: usize,
    /// Weight of the transformed-view term.
    pub lambda: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            negatives: 256,
            lambda: 0.5,
        }
    }
}

impl NceConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        check_temperature(self.temperature)?;
        check_lambda(self.lambda)?;
        if self.negatives == 0 {
            return Err(Error::Config("at least one negative is required".into()));
        }
        if self.negatives >= dataset_len.max(1) {
            return Err(Error::NotEnoughNegatives {
                requested: self.negatives,
                dataset: dataset_len,
            });
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (a, b) = (l2_normalize_slice(a)?, l2_normalize_slice(b)?);
    let s: T = a.iter().zip(&b).map(|(&x, &y)| x * y).sum();
    Ok(s.max(-T::one()).min(T::one()))
}

fn logit_row<T: Scalar>(anchor: &[T], candidate: &[T], negs: &[&[T]], tau: f64) -> Result<Vec<T>> {
    check_temperature(tau)?;
    if negs.is_empty() {
        return Err(Error::invalid("at least one negative is required"));
    }
    let inv = T::from_f64_lossy(1.0 / tau);
    let mut row = Vec::with_capacity(negs.len() + 1);
    row.push(cosine_similarity(anchor, candidate)? * inv);
    for n in negs {
        row.push(cosine_similarity(candidate, n)? * inv);
    }
    Ok(row)
}

/// Probability that `(anchor, candidate)` is the data pair rather than noise.
pub fn nce_match_prob<T: Scalar>(anchor: &[T], candidate: &[T], negs: &[&[T]], tau: f64) -> Result<T> {
    let row = logit_row(anchor, candidate, negs, tau)?;
    Ok(nce_row(&row).1[0])
}

pub fn nce_loss<T: Scalar>(anchor: &[T], candidate: &[T], negs: &[&[T]], tau: f64) -> Result<T> {
    let row = logit_row(anchor, candidate, negs, tau)?;
    Ok(nce_row(&row).0)
}

/// Per-row losses on the tape for anchors `[B,d]`, candidates `[B,d]` and
/// negatives `[B,N,d]`. All inputs are unit-normalized here.
pub fn nce_loss_rows<T: Scalar>(tape: &mut Tape<T>, anchor: Var, candidate: Var, negs: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let b = tape.value(anchor).shape().first().copied().unwrap_or(0);
    let a = tape.l2_normalize(anchor)?;
    let c = tape.l2_normalize(candidate)?;
    let n = tape.l2_normalize(negs)?;
    let pos = tape.row_dot(a, c)?;
    let pos = tape.reshape(pos, &[b, 1])?;
    let neg = tape.batched_matvec(n, c)?;
    let logits = tape.concat(&[pos, neg])?;
    let logits = tape.scale(logits, T::from_f64_lossy(1.0 / tau))?;
    tape.nce_rows(logits)
}

/// Batch-mean loss terms of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct PirlLoss {
    pub total: Var,
    pub transformed: Var,
    pub untransformed: Var,
}

/// `lambda * L(m, g) + (1 - lambda) * L(m, f)`, each term averaged over the batch.
pub fn pirl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bank_rows: Var,
    f: Var,
    g: Var,
    negs: Var,
    cfg: &NceConfig,
) -> Result<PirlLoss> {
    check_lambda(cfg.lambda)?;
    let lt = nce_loss_rows(tape, bank_rows, g, negs, cfg.temperature)?;
    let transformed = tape.mean(lt)?;
    let untransformed = npid_loss(tape, bank_rows, f, negs, cfg.temperature)?;
    let wt = tape.scale(transformed, T::from_f64_lossy(cfg.lambda))?;
    let wu = tape.scale(untransformed, T::from_f64_lossy(1.0 - cfg.lambda))?;
    let total = tape.add(wt, wu)?;
    Ok(PirlLoss {
        total,
        transformed,
        untransformed,
    })
}

/// The instance-discrimination objective: only the untransformed view.
pub fn npid_loss<T: Scalar>(tape: &mut Tape<T>, bank_rows: Var, f: Var, negs: Var, tau: f64) -> Result<Var> {
    let lu = nce_loss_rows(tape, bank_rows, f, negs, tau)?;
    tape.mean(lu)
}

/// Distinct indices from `0..len` avoiding everything in `exclude`, uniformly
/// without replacement and deterministic in `seed`.
pub fn sample_negatives_excluding(len: usize, exclude: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut excl: Vec<usize> = exclude.iter().copied().filter(|&e| e < len).collect();
    excl.sort_unstable();
    excl.dedup();
    let avail = len - excl.len();
    if n > avail {
        return Err(Error::NotEnoughNegatives {
            requested: n,
            dataset: len,
        });
    }
    let mut rng = seed::rng(seed, Stream::Negatives, &[]);
    Ok(index::sample(&mut rng, avail, n)
        .into_iter()
        .map(|mut v| {
            for &e in &excl {
                if e <= v {
                    v += 1;
                } else {
                    break;
                }
            }
            v
        })
        .collect())
}

pub fn sample_negatives(len: usize, exclude: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    sample_negatives_excluding(len, &[exclude], n, seed)
}

/// One stored representation per dataset image, kept at unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    rows: Tensor<T>,
    momentum: T,
}

/// `w * m + (1 - w) * f`, before any normalization.
pub fn ema<T: Scalar>(m: &[T], f: &[T], w: T) -> Vec<T> {
    m.iter().zip(f).map(|(&a, &b)| w * a + (T::one() - w) * b).collect()
}

impl<T: Scalar> MemoryBank<T> {
    /// Unit-normalized Gaussian rows.
    pub fn new(len: usize, dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::invalid(format!("memory bank needs positive size, got {len}x{dim}")));
        }
        let raw = Tensor::<T>::randn(&[len, dim], 1.0, seed::derive(seed, Stream::Bank, &[]));
        let mut data = Vec::with_capacity(len * dim);
        for r in raw.data().chunks(dim) {
            data.extend(l2_normalize_slice(r)?);
        }
        Self::from_rows(Tensor::new(vec![len, dim], data)?, momentum)
    }

    pub fn from_rows(rows: Tensor<T>, momentum: f64) -> Result<Self> {
        if rows.shape().len() != 2 || !rows.all_finite() {
            return Err(Error::InvalidShape {
                op: "memory bank",
                shape: rows.shape().to_vec(),
                reason: "expected a finite [len, dim] matrix".into(),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("bank momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            rows,
            momentum: T::from_f64_lossy(momentum),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.rows.row(i)
    }

    /// Copies the listed rows into a `[k, dim]` tensor (or `[b, n, dim]` when reshaped by the caller).
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("bank index {i} out of range for {} rows", self.len())));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), d], out)
    }

    /// Blends the unit-normalized `f` into row `i`, then re-normalizes.
    pub fn update(&mut self, i: usize, f: &[T]) -> Result<()> {
        let d = self.dim();
        if f.len() != d {
            return Err(Error::ShapeMismatch {
                op: "bank update",
                lhs: vec![d],
                rhs: vec![f.len()],
            });
        }
        if i >= self.len() {
            return Err(Error::invalid(format!("bank index {i} out of range for {} rows", self.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability(format!("non-finite feature for bank row {i}")));
        }
        let f = l2_normalize_slice(f)?;
        let blended = l2_normalize_slice(&ema(self.row(i), &f, self.momentum))?;
        self.rows.data_mut()[i * d..(i + 1) * d].copy_from_slice(&blended);
        Ok(())
    }
}
