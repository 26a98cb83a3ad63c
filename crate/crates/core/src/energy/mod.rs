//! Residual blocks of the two-frame and multiframe energies: brightness
//! constancy, projective point-to-plane ICP, the lifted segment-coherence
//! regularizer, the weight optimizer and the pose concatenation term,
//! together with residual accounting and per-term normalization.

mod problem;

pub use problem::{update_correspondences, BlockDescriptor, IcpGates, MultiframeProblem};

/// Energy term identifiers used in layouts and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Data,
    Picp,
    LiftedReg,
    WeightOpt,
    Concat,
}

impl TermKind {
    pub fn name(self) -> &'static str {
        match self {
            TermKind::Data => "data",
            TermKind::Picp => "projective ICP",
            TermKind::LiftedReg => "lifted regularizer",
            TermKind::WeightOpt => "weight optimizer",
            TermKind::Concat => "pose concatenation",
        }
    }
}

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SegmentPose;

/// Term weights and robustification parameters of the energy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    /// Brightness-constancy term weight.
    pub alpha: f64,
    /// Projective ICP term weight.
    pub beta: f64,
    /// Lifted segment-coherence regularizer weight.
    pub gamma: f64,
    /// Weight-optimizer term weight.
    pub eta: f64,
    /// Pose concatenation term weight.
    pub lambda_c: f64,
    /// Huber threshold for intensity residuals (unit-interval intensities).
    pub huber_eps_data: f64,
    /// Huber threshold for point-to-plane residuals (meters).
    pub huber_eps_picp: f64,
    /// Gaussian pre-smoothing std-dev for the intensity images (pixels).
    pub gaussian_sigma: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            eta: 1.0,
            lambda_c: 1.0,
            huber_eps_data: 0.1,
            huber_eps_picp: 0.02,
            gaussian_sigma: 1.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.gamma, self.eta, self.lambda_c];
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config("energy weights must be >= 0".into()));
        }
        if !self.huber_eps_data.is_finite()
            || !self.huber_eps_picp.is_finite()
            || self.huber_eps_data <= 0.0
            || self.huber_eps_picp <= 0.0
        {
            return Err(Error::Config("huber thresholds must be > 0".into()));
        }
        if self.gaussian_sigma.is_nan() || self.gaussian_sigma < 0.0 {
            return Err(Error::Config("gaussian_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Huber loss: `a^2 / 2` inside the threshold, `eps (|a| - eps/2)` outside.
/// Continuous with continuous derivative at `|a| = eps`.
#[inline]
pub fn huber(a: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let abs = a.abs();
    if abs <= eps {
        0.5 * a * a
    } else {
        eps * (abs - 0.5 * eps)
    }
}

/// Maps a raw residual to `sign(a) * sqrt(huber(a, eps))` so that plain
/// squaring reproduces the Huber loss; returns the mapped value and its
/// derivative with respect to `a`.
#[inline]
pub fn huber_scaled_residual(a: f64, eps: f64) -> (f64, f64) {
    let abs = a.abs();
    if abs <= eps {
        (
            a * std::f64::consts::FRAC_1_SQRT_2,
            std::f64::consts::FRAC_1_SQRT_2,
        )
    } else {
        let s = (eps * (abs - 0.5 * eps)).sqrt();
        (a.signum() * s, eps / (2.0 * s))
    }
}

/// One confidence scalar per adjacency pair, shared across all frame pairs.
/// Values near one enforce coherent motion of the pair; values near zero
/// break the connection.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingWeights(pub Vec<f64>);

impl LiftingWeights {
    pub fn ones(n: usize) -> Self {
        LiftingWeights(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Residual index bookkeeping for the stacked multiframe energy.
///
/// Scalar rows are ordered pair-major: `[data, picp]` for every frame pair,
/// then the 6-row coherence blocks for every pair, the weight-optimizer
/// rows, and finally the 6-row concatenation blocks. 6-vector residuals
/// count as one block; their scalar expansion is recorded separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayout {
    pub n_frames: usize,
    pub n_segments: usize,
    pub n_pairs: usize,
    pub sum_psi: usize,
    /// Data residual blocks per frame pair.
    pub n_data: usize,
    /// Projective ICP residual blocks per frame pair.
    pub n_picp: usize,
    /// Concatenation blocks: one per segment per non-adjacent target frame.
    pub n_concat: usize,
}

impl ResidualLayout {
    pub fn new(
        n_frames: usize,
        n_segments: usize,
        sum_psi: usize,
        n_data: usize,
        n_picp: usize,
    ) -> Result<Self> {
        if n_frames < 2 {
            return Err(Error::InvalidWindow { n: n_frames });
        }
        Ok(ResidualLayout {
            n_frames,
            n_segments,
            n_pairs: n_frames * (n_frames - 1) / 2,
            sum_psi,
            n_data,
            n_picp,
            n_concat: n_segments * (n_frames - 2),
        })
    }

    /// Total residual blocks
    /// `C(N,2) (n_data + n_picp) + (C(N,2) + 1) sum_psi + K (N - 2)`.
    pub fn total_blocks(&self) -> usize {
        self.n_pairs * (self.n_data + self.n_picp)
            + (self.n_pairs + 1) * self.sum_psi
            + self.n_concat
    }

    /// Total scalar rows of the stacked residual vector.
    pub fn total_scalars(&self) -> usize {
        self.n_pairs * (self.n_data + self.n_picp)
            + self.n_pairs * self.sum_psi * 6
            + self.sum_psi
            + self.n_concat * 6
    }

    /// Dimension of the parameter vector: one 6-DOF pose per segment and
    /// frame pair, plus the shared lifting weights.
    pub fn state_dim(&self) -> usize {
        self.n_segments * self.n_pairs * 6 + self.sum_psi
    }

    pub fn data_range(&self, pair: usize) -> std::ops::Range<usize> {
        let start = pair * (self.n_data + self.n_picp);
        start..start + self.n_data
    }

    pub fn picp_range(&self, pair: usize) -> std::ops::Range<usize> {
        let start = pair * (self.n_data + self.n_picp) + self.n_data;
        start..start + self.n_picp
    }

    pub fn lreg_range(&self, pair: usize) -> std::ops::Range<usize> {
        let base = self.n_pairs * (self.n_data + self.n_picp);
        let start = base + pair * self.sum_psi * 6;
        start..start + self.sum_psi * 6
    }

    pub fn wopt_range(&self) -> std::ops::Range<usize> {
        let start = self.n_pairs * (self.n_data + self.n_picp) + self.n_pairs * self.sum_psi * 6;
        start..start + self.sum_psi
    }

    pub fn concat_range(&self) -> std::ops::Range<usize> {
        let start = self.wopt_range().end;
        start..start + self.n_concat * 6
    }

    /// Term owning a scalar row, with the frame-pair index where applicable.
    pub fn term_of_row(&self, row: usize) -> (TermKind, Option<usize>) {
        let per_pair = self.n_data + self.n_picp;
        let data_picp_end = self.n_pairs * per_pair;
        if row < data_picp_end {
            let pair = row / per_pair;
            if row % per_pair < self.n_data {
                return (TermKind::Data, Some(pair));
            }
            return (TermKind::Picp, Some(pair));
        }
        let lreg_end = data_picp_end + self.n_pairs * self.sum_psi * 6;
        if row < lreg_end {
            let pair = (row - data_picp_end) / (self.sum_psi * 6);
            return (TermKind::LiftedReg, Some(pair));
        }
        if row < lreg_end + self.sum_psi {
            return (TermKind::WeightOpt, None);
        }
        (TermKind::Concat, None)
    }
}

/// Residual accounting per the block-count formula. `n_data`/`n_picp` are
/// the per-pair block counts.
pub fn count_residuals(
    n_frames: usize,
    n_data: usize,
    n_picp: usize,
    sum_psi: usize,
    n_segments: usize,
) -> Result<ResidualLayout> {
    ResidualLayout::new(n_frames, n_segments, sum_psi, n_data, n_picp)
}

/// Per-term scale factors: user weight divided by that term's residual
/// count, zero when the term has no residuals. Applied to squared
/// residuals, so residual vectors carry the square roots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermScales {
    pub data: f64,
    pub picp: f64,
    pub lreg: f64,
    pub wopt: f64,
    /// Scale of one concatenation pair term (normalized by K).
    pub concat: f64,
}

pub fn term_weights(params: &EnergyParams, layout: &ResidualLayout) -> TermScales {
    let ratio = |w: f64, n: usize| if n == 0 { 0.0 } else { w / n as f64 };
    TermScales {
        data: ratio(params.alpha, layout.n_data),
        picp: ratio(params.beta, layout.n_picp),
        lreg: ratio(params.gamma, layout.sum_psi),
        wopt: ratio(params.eta, layout.sum_psi),
        concat: ratio(params.lambda_c, layout.n_segments),
    }
}

/// Projective data association for one frame pair: the matched 3D point of
/// the current frame per reference pixel, absent where association failed.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    per_pair: Vec<Vec<Option<Vector3<f64>>>>,
}

impl CorrespondenceMap {
    pub fn empty(n_pairs: usize, n_pixels: usize) -> Self {
        CorrespondenceMap {
            per_pair: vec![vec![None; n_pixels]; n_pairs],
        }
    }

    #[inline]
    pub fn get(&self, pair: usize, pixel: usize) -> Option<Vector3<f64>> {
        self.per_pair[pair][pixel]
    }

    #[inline]
    pub fn set(&mut self, pair: usize, pixel: usize, value: Option<Vector3<f64>>) {
        self.per_pair[pair][pixel] = value;
    }

    pub fn pair_count(&self) -> usize {
        self.per_pair.len()
    }

    pub fn matched_count(&self, pair: usize) -> usize {
        self.per_pair[pair].iter().filter(|c| c.is_some()).count()
    }
}

/// Flattened unknown vector: all segment poses for all frame pairs followed
/// by the shared lifting weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemState {
    pub n_segments: usize,
    pub n_pairs: usize,
    pub n_weights: usize,
    data: Vec<f64>,
}

impl ProblemState {
    /// All poses identity, all weights one.
    pub fn identity(n_segments: usize, n_pairs: usize, n_weights: usize) -> Self {
        let mut data = vec![0.0; n_segments * n_pairs * 6 + n_weights];
        for w in &mut data[n_segments * n_pairs * 6..] {
            *w = 1.0;
        }
        ProblemState {
            n_segments,
            n_pairs,
            n_weights,
            data,
        }
    }

    pub fn from_vec(n_segments: usize, n_pairs: usize, n_weights: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_segments * n_pairs * 6 + n_weights);
        ProblemState {
            n_segments,
            n_pairs,
            n_weights,
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn pose_offset(&self, pair: usize, segment: usize) -> usize {
        debug_assert!(pair < self.n_pairs && segment < self.n_segments);
        (pair * self.n_segments + segment) * 6
    }

    #[inline]
    pub fn weight_offset(&self, index: usize) -> usize {
        debug_assert!(index < self.n_weights);
        self.n_segments * self.n_pairs * 6 + index
    }

    pub fn pose(&self, pair: usize, segment: usize) -> SegmentPose {
        let o = self.pose_offset(pair, segment);
        SegmentPose::from_slice(&self.data[o..o + 6])
    }

    pub fn set_pose(&mut self, pair: usize, segment: usize, pose: &SegmentPose) {
        let o = self.pose_offset(pair, segment);
        self.data[o..o + 6].copy_from_slice(&pose.to_vector6());
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.data[self.weight_offset(index)]
    }

    pub fn set_weight(&mut self, index: usize, value: f64) {
        let o = self.weight_offset(index);
        self.data[o] = value;
    }

    pub fn weights(&self) -> &[f64] {
        &self.data[self.n_segments * self.n_pairs * 6..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}
