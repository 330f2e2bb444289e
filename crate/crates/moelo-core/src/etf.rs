//! Fixed simplex anchor frame and the gating rule built on it.
//!
//! The frame holds `r_max` unit vectors in the projection space with equal
//! pairwise cosine -1/(r_max-1), the maximally spread arrangement. Gating
//! scores a normalized projection against the anchors of the currently
//! active experts and turns the cosines into a routing distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFrame {
    pub dim: usize,
    pub r_max: usize,
    pub seed: u64,
    /// r_max x dim, one unit anchor per row. Never mutated after generation.
    anchors: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Soft,
    Hard,
}

/// Gating result for one sample over the active expert set. `scores` and
/// `probabilities` are indexed like the `active` slice that produced them.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Global anchor index of the argmax, hard mode only.
    pub selected: Option<usize>,
}

/// Orthonormalizes the columns of `m` in place by modified Gram-Schmidt,
/// projecting twice per column for numerical insurance. Returns false when a
/// column collapses (rank deficiency).
fn orthonormalize_columns(m: &mut Matrix) -> bool {
    let (rows, cols) = (m.rows(), m.cols());
    let mut col = vec![0.0; rows];
    for k in 0..cols {
        for r in 0..rows {
            col[r] = m.get(r, k);
        }
        for _ in 0..2 {
            for j in 0..k {
                let mut proj = 0.0;
                for r in 0..rows {
                    proj += col[r] * m.get(r, j);
                }
                for r in 0..rows {
                    col[r] -= proj * m.get(r, j);
                }
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return false;
        }
        for r in 0..rows {
            m.set(r, k, col[r] / norm);
        }
    }
    true
}

/// Builds the anchor frame: seed a Gaussian dim x r_max matrix, orthonormalize
/// its columns, subtract the column mean, and rescale so every anchor is unit
/// with pairwise cosine exactly -1/(r_max-1).
pub fn generate_etf(r_max: usize, dim: usize, seed: u64) -> Result<AnchorFrame> {
    if r_max < 2 {
        return Err(Error::Geometry(format!(
            "anchor frame needs at least 2 anchors, got {r_max}"
        )));
    }
    if dim < r_max {
        return Err(Error::Geometry(format!(
            "{r_max} equiangular anchors need dimension >= {r_max}, got {dim}"
        )));
    }
    let k = r_max;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A Gaussian matrix is full-rank with probability 1; the retry loop is
    // pure paranoia against a pathological draw.
    let mut u = Matrix::zeros(dim, k);
    let mut attempts = 0;
    loop {
        for v in u.as_mut_slice() {
            *v = StandardNormal.sample(&mut rng);
        }
        if orthonormalize_columns(&mut u) {
            break;
        }
        attempts += 1;
        if attempts >= 8 {
            return Err(Error::Geometry(
                "could not draw a full-rank basis for the anchor frame".into(),
            ));
        }
    }

    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    let mut mean = vec![0.0; dim];
    for r in 0..dim {
        let mut s = 0.0;
        for c in 0..k {
            s += u.get(r, c);
        }
        mean[r] = s / k as f64;
    }
    let mut anchors = Matrix::zeros(k, dim);
    for c in 0..k {
        let row = anchors.row_mut(c);
        for r in 0..dim {
            row[r] = scale * (u.get(r, c) - mean[r]);
        }
        // The construction already lands within float error of unit norm;
        // renormalize anyway so the invariant holds to 1e-12.
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Geometry("degenerate anchor after centering".into()));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(AnchorFrame {
        dim,
        r_max,
        seed,
        anchors,
    })
}

impl AnchorFrame {
    /// Reassembles a frame from stored fields, as when loading a checkpoint.
    /// Only the shape is validated; the anchors are trusted as persisted.
    pub fn from_parts(dim: usize, r_max: usize, seed: u64, anchors: Matrix) -> Result<Self> {
        if anchors.rows() != r_max || anchors.cols() != dim {
            return Err(Error::Shape(format!(
                "anchor matrix is {}x{}, expected {}x{}",
                anchors.rows(),
                anchors.cols(),
                r_max,
                dim
            )));
        }
        Ok(AnchorFrame {
            dim,
            r_max,
            seed,
            anchors,
        })
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn anchor(&self, index: usize) -> Result<&[f64]> {
        if index >= self.r_max {
            return Err(Error::Geometry(format!(
                "anchor index {index} out of range (r_max {})",
                self.r_max
            )));
        }
        Ok(self.anchors.row(index))
    }
}

/// Cosine of `z_hat` (assumed unit) against each active anchor, in the order
/// the active slice lists them. Values are clamped to [-1, 1] to absorb
/// rounding at the boundary.
pub fn cosine_scores(z_hat: &[f64], frame: &AnchorFrame, active: &[usize]) -> Result<Vec<f64>> {
    if active.is_empty() {
        return Err(Error::State("no active experts to gate over".into()));
    }
    if z_hat.len() != frame.dim {
        return Err(Error::Shape(format!(
            "projection has {} components, frame dimension is {}",
            z_hat.len(),
            frame.dim
        )));
    }
    let mut scores = Vec::with_capacity(active.len());
    for &idx in active {
        let anchor = frame.anchor(idx)?;
        scores.push(dot(z_hat, anchor).clamp(-1.0, 1.0));
    }
    Ok(scores)
}

/// Routing distribution over the active experts: softmax of the cosines. In
/// hard mode `selected` carries the global index of the argmax, ties broken
/// toward the lowest expert index.
pub fn gate(
    z_hat: &[f64],
    frame: &AnchorFrame,
    active: &[usize],
    mode: GateMode,
) -> Result<GateOutput> {
    let scores = cosine_scores(z_hat, frame, active)?;
    let probabilities = softmax(&scores)?;
    let selected = match mode {
        GateMode::Soft => None,
        GateMode::Hard => {
            let mut best = 0;
            for i in 1..scores.len() {
                let better = scores[i] > scores[best]
                    || (scores[i] == scores[best] && active[i] < active[best]);
                if better {
                    best = i;
                }
            }
            Some(active[best])
        }
    };
    Ok(GateOutput {
        scores,
        probabilities,
        selected,
    })
}
