//! Contrastive objectives.
//!
//! Both losses are ordinary softmax cross-entropy over similarity logits
//! where the pseudo-label is the index of the positive: the pair index for
//! cloud-level embeddings, the point index for point-wise embeddings.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Temperature dividing every similarity.
    pub tau: f64,
    /// Average with the transformed → original direction.
    pub symmetric: bool,
    /// Leave the positive out of the softmax normalizer.
    pub exclude_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            symmetric: false,
            exclude_positive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    if cfg.exclude_positive {
        tape.cross_entropy_excluding_target(logits, labels)
    } else {
        tape.softmax_cross_entropy(logits, labels)
    }
}

/// One direction: rows of `anchor` attend over rows of `candidates`.
fn directed<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    candidates: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let sim = tape.matmul_nt(anchor, candidates)?;
    let rows = labels.len();
    let cols = *tape.shape(sim).last().unwrap();
    let logits = tape.scale(sim, lit(1.0 / cfg.tau));
    let flat = tape.reshape(logits, &[rows, cols])?;
    cross_entropy(tape, flat, labels, cfg)
}

fn maybe_symmetric<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let forward = directed(tape, a, b, labels, cfg)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let backward = directed(tape, b, a, labels, cfg)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, lit(0.5)))
}

/// Cloud-level loss for `z_orig, z_trans: [n, d]` aligned by row.
pub fn contrastive_loss_cls<T: Scalar>(
    tape: &mut Tape<T>,
    z_orig: Var,
    z_trans: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (so, st) = (tape.shape(z_orig).to_vec(), tape.shape(z_trans).to_vec());
    if so.len() != 2 || so != st {
        return Err(Error::Contract(format!(
            "cloud embeddings must be equal [n, d] shapes, got {so:?} and {st:?}"
        )));
    }
    let n = so[0];
    if n < 2 {
        return Err(Error::BatchTooSmall(format!("contrastive loss needs n >= 2 pairs, got {n}")));
    }
    let labels: Vec<usize> = (0..n).collect();
    maybe_symmetric(tape, z_orig, z_trans, &labels, cfg)
}

/// Point-wise loss for `z_orig, z_trans: [n, N, d]` aligned by pair and
/// point index. Each point of each original attends over the N points of
/// its own transformed counterpart.
pub fn contrastive_loss_seg<T: Scalar>(
    tape: &mut Tape<T>,
    z_orig: Var,
    z_trans: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (so, st) = (tape.shape(z_orig).to_vec(), tape.shape(z_trans).to_vec());
    if so.len() != 3 || so != st {
        return Err(Error::Contract(format!(
            "point embeddings must be equal [n, N, d] shapes, got {so:?} and {st:?}"
        )));
    }
    let (pairs, points) = (so[0], so[1]);
    if points < 2 {
        return Err(Error::BatchTooSmall(format!("point-wise loss needs N >= 2, got {points}")));
    }
    if pairs == 0 {
        return Err(Error::BatchTooSmall("point-wise loss over zero pairs".into()));
    }
    // every pair has N rows, so the mean over all rows is the mean over
    // points followed by the mean over pairs
    let labels: Vec<usize> = (0..pairs * points).map(|r| r % points).collect();
    maybe_symmetric(tape, z_orig, z_trans, &labels, cfg)
}
