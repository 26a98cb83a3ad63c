//! The stacked multiframe least-squares problem: residual evaluation,
//! block-sparse linearization and projective-ICP correspondence updates.
//!
//! The parameter vector holds one raw 6-DOF pose per (frame pair, segment)
//! plus the shared lifting weights; residuals are emitted per the
//! [`ResidualLayout`] so rows stay stable across correspondence refreshes.
//! Warps leaving the target image, invalid source pixels and missing
//! correspondences contribute zero residual with zero derivative.

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    compose_poses, compose_poses_with_jacobians, CameraIntrinsics, NormalMap,
    RotatePointDerivative, SegmentPose,
};
use crate::pipeline::{enumerate_pairs, FramePair, RgbdFrame};
use crate::segmentation::{SegmentAdjacency, Segmentation};
use crate::solver::{BlockJacobian, LeastSquaresProblem};

use super::{
    huber_scaled_residual, term_weights, CorrespondenceMap, EnergyParams, ProblemState,
    ResidualLayout, TermKind, TermScales,
};

/// Minimum z of a transformed point for the perspective warp to count.
const MIN_WARP_Z: f64 = 1e-9;

/// Acceptance gates for projective data association.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IcpGates {
    /// Maximum 3D distance between the transformed point and the candidate.
    pub dist_thresh: f64,
    /// Maximum angle between the rotated source normal and the target
    /// normal, degrees.
    pub max_angle_deg: f64,
}

impl Default for IcpGates {
    fn default() -> Self {
        IcpGates {
            dist_thresh: 0.1,
            max_angle_deg: 45.0,
        }
    }
}

/// One residual block of the stacked energy.
#[derive(Debug, Clone, Copy)]
pub struct BlockDescriptor {
    pub term: TermKind,
    /// Frame-pair index for the per-pair terms.
    pub pair: Option<usize>,
    pub row0: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    pixel: u32,
    segment: u32,
}

struct PoseCache {
    pose: SegmentPose,
    rot: Matrix3<f64>,
}

/// Joint multiframe energy over a window of frames.
///
/// The window's pair set is always the full lexicographic enumeration of
/// its frames; a two-frame slice yields the single-pair problem used for
/// pairwise initialization. Data and ICP residual block sets are fixed by
/// the segmentation and the normal validity of the window's reference
/// frame, so every pair emits the same block counts.
pub struct MultiframeProblem<'a> {
    frames: &'a [RgbdFrame],
    intrinsics: CameraIntrinsics,
    seg: &'a Segmentation,
    adj: &'a SegmentAdjacency,
    params: EnergyParams,
    gates: IcpGates,
    pairs: Vec<FramePair>,
    pair_lookup: Vec<usize>,
    layout: ResidualLayout,
    scales: TermScales,
    normals: Vec<NormalMap>,
    data_slots: Vec<Slot>,
    picp_slots: Vec<Slot>,
    corr: CorrespondenceMap,
}

impl<'a> MultiframeProblem<'a> {
    pub fn new(
        frames: &'a [RgbdFrame],
        intrinsics: CameraIntrinsics,
        seg: &'a Segmentation,
        adj: &'a SegmentAdjacency,
        ref_index: usize,
        params: EnergyParams,
        gates: IcpGates,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidWindow { n: frames.len() });
        }
        assert!(ref_index < frames.len(), "reference index out of window");
        assert_eq!(seg.width(), frames[0].depth.width());
        assert_eq!(seg.height(), frames[0].depth.height());
        params.validate()?;

        let pairs = enumerate_pairs(frames.len())?;
        let n = frames.len();
        let mut pair_lookup = vec![usize::MAX; n * n];
        for (i, p) in pairs.iter().enumerate() {
            pair_lookup[p.l * n + p.m] = i;
        }

        let normals: Vec<NormalMap> = frames
            .iter()
            .map(|f| crate::geometry::compute_normals(&f.depth, &intrinsics))
            .collect();

        let mut data_slots = Vec::with_capacity(seg.total_kept_pixels());
        for k in 0..seg.count() {
            for &pixel in seg.segment_pixels(k) {
                data_slots.push(Slot {
                    pixel,
                    segment: k as u32,
                });
            }
        }
        let width = seg.width();
        let ref_normals = &normals[ref_index];
        let picp_slots: Vec<Slot> = data_slots
            .iter()
            .copied()
            .filter(|s| {
                let (x, y) = (s.pixel as usize % width, s.pixel as usize / width);
                ref_normals.is_valid(x, y)
            })
            .collect();

        let layout = ResidualLayout::new(
            frames.len(),
            seg.count(),
            adj.len(),
            data_slots.len(),
            picp_slots.len(),
        )?;
        let scales = term_weights(&params, &layout);
        let corr = CorrespondenceMap::empty(pairs.len(), seg.width() * seg.height());

        Ok(MultiframeProblem {
            frames,
            intrinsics,
            seg,
            adj,
            params,
            gates,
            pairs,
            pair_lookup,
            layout,
            scales,
            normals,
            data_slots,
            picp_slots,
            corr,
        })
    }

    pub fn layout(&self) -> &ResidualLayout {
        &self.layout
    }

    pub fn scales(&self) -> &TermScales {
        &self.scales
    }

    pub fn pairs(&self) -> &[FramePair] {
        &self.pairs
    }

    pub fn normal_maps(&self) -> &[NormalMap] {
        &self.normals
    }

    pub fn correspondences(&self) -> &CorrespondenceMap {
        &self.corr
    }

    pub fn set_correspondences(&mut self, corr: CorrespondenceMap) {
        assert_eq!(corr.pair_count(), self.pairs.len());
        self.corr = corr;
    }

    /// Fresh state with identity poses and unit weights.
    pub fn identity_state(&self) -> ProblemState {
        ProblemState::identity(
            self.layout.n_segments,
            self.layout.n_pairs,
            self.layout.sum_psi,
        )
    }

    pub fn state_from_vec(&self, data: Vec<f64>) -> ProblemState {
        ProblemState::from_vec(
            self.layout.n_segments,
            self.layout.n_pairs,
            self.layout.sum_psi,
            data,
        )
    }

    fn pair_index(&self, l: usize, m: usize) -> usize {
        self.pair_lookup[l * self.frames.len() + m]
    }

    #[inline]
    fn pose_offset(&self, pair: usize, segment: usize) -> usize {
        (pair * self.layout.n_segments + segment) * 6
    }

    #[inline]
    fn weight_offset(&self, index: usize) -> usize {
        self.layout.n_segments * self.layout.n_pairs * 6 + index
    }

    fn decode_pose(&self, x: &[f64], pair: usize, segment: usize) -> SegmentPose {
        let o = self.pose_offset(pair, segment);
        SegmentPose::from_slice(&x[o..o + 6])
    }

    fn pose_caches(&self, x: &[f64]) -> Vec<PoseCache> {
        (0..self.layout.n_pairs)
            .flat_map(|pair| {
                (0..self.layout.n_segments).map(move |seg| {
                    let pose = self.decode_pose(x, pair, seg);
                    PoseCache {
                        rot: pose.rotation(),
                        pose,
                    }
                })
            })
            .collect()
    }

    /// Every residual block in layout order, including structurally present
    /// blocks whose current value is zero.
    pub fn block_descriptors(&self) -> Vec<BlockDescriptor> {
        let mut blocks = Vec::new();
        for (zi, _) in self.pairs.iter().enumerate() {
            let data_start = self.layout.data_range(zi).start;
            for i in 0..self.layout.n_data {
                blocks.push(BlockDescriptor {
                    term: TermKind::Data,
                    pair: Some(zi),
                    row0: data_start + i,
                    rows: 1,
                });
            }
            let picp_start = self.layout.picp_range(zi).start;
            for i in 0..self.layout.n_picp {
                blocks.push(BlockDescriptor {
                    term: TermKind::Picp,
                    pair: Some(zi),
                    row0: picp_start + i,
                    rows: 1,
                });
            }
        }
        for (zi, _) in self.pairs.iter().enumerate() {
            let start = self.layout.lreg_range(zi).start;
            for a in 0..self.layout.sum_psi {
                blocks.push(BlockDescriptor {
                    term: TermKind::LiftedReg,
                    pair: Some(zi),
                    row0: start + a * 6,
                    rows: 6,
                });
            }
        }
        let wopt_start = self.layout.wopt_range().start;
        for a in 0..self.layout.sum_psi {
            blocks.push(BlockDescriptor {
                term: TermKind::WeightOpt,
                pair: None,
                row0: wopt_start + a,
                rows: 1,
            });
        }
        let concat_start = self.layout.concat_range().start;
        let mut row = concat_start;
        for m in 2..self.frames.len() {
            for _k in 0..self.layout.n_segments {
                blocks.push(BlockDescriptor {
                    term: TermKind::Concat,
                    pair: Some(self.pair_index(0, m)),
                    row0: row,
                    rows: 6,
                });
                row += 6;
            }
        }
        blocks
    }

    /// Scaled energy `||F(x)||^2` with a diagnostic on non-finite residuals.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let f = self.residuals(x)?;
        for (row, v) in f.iter().enumerate() {
            if !v.is_finite() {
                let (term, pair) = self.layout.term_of_row(row);
                let (l, m) = pair
                    .map(|p| (self.pairs[p].l, self.pairs[p].m))
                    .unwrap_or((0, self.frames.len() - 1));
                return Err(Error::NonFiniteResidual {
                    term: term.name(),
                    l,
                    m,
                    block: row,
                });
            }
        }
        Ok(crate::solver::sum_sq(&f))
    }

    /// Recomputes projective data association for the current poses.
    pub fn refresh_correspondences(&mut self, x: &[f64]) {
        let poses: Vec<Vec<SegmentPose>> = (0..self.layout.n_pairs)
            .map(|pair| {
                (0..self.layout.n_segments)
                    .map(|seg| self.decode_pose(x, pair, seg))
                    .collect()
            })
            .collect();
        self.corr = update_correspondences(
            self.frames,
            &self.pairs,
            self.seg,
            &self.normals,
            &poses,
            &self.intrinsics,
            &self.gates,
        );
    }

    fn fill(&self, x: &[f64], mut jac: Option<&mut BlockJacobian>) -> Vec<f64> {
        let caches = self.pose_caches(x);
        let cache = |pair: usize, seg: usize| &caches[pair * self.layout.n_segments + seg];
        let rot_derivs: Option<Vec<RotatePointDerivative>> = jac.as_ref().map(|_| {
            caches
                .iter()
                .map(|c| RotatePointDerivative::new(&c.pose.axis_angle))
                .collect()
        });

        let mut f = vec![0.0; self.layout.total_scalars()];
        let width = self.seg.width();
        let sqrt_data = self.scales.data.sqrt();
        let sqrt_picp = self.scales.picp.sqrt();
        let sqrt_lreg = self.scales.lreg.sqrt();
        let sqrt_wopt = self.scales.wopt.sqrt();
        let sqrt_concat = self.scales.concat.sqrt();

        for (zi, pair) in self.pairs.iter().enumerate() {
            let src = &self.frames[pair.l];
            let tgt = &self.frames[pair.m];
            let data_start = self.layout.data_range(zi).start;

            for (si, slot) in self.data_slots.iter().enumerate() {
                let pix = slot.pixel as usize;
                let z = src.depth.at(pix);
                if z <= 0.0 {
                    continue;
                }
                let (px, py) = (pix % width, pix / width);
                let point = self
                    .intrinsics
                    .backproject_unchecked(&Vector2::new(px as f64, py as f64), z);
                let c = cache(zi, slot.segment as usize);
                let warped = c.rot * point + c.pose.translation;
                if warped.z <= MIN_WARP_Z {
                    continue;
                }
                let uv = self.intrinsics.project_unchecked(&warped);
                if !target_support_valid(&tgt.depth, uv.x, uv.y) {
                    continue;
                }
                let Some((value, gu, gv)) = tgt.smoothed.sample_bilinear_with_grad(uv.x, uv.y)
                else {
                    continue;
                };
                let a = src.smoothed.at(pix) - value;
                let (h, dh) = huber_scaled_residual(a, self.params.huber_eps_data);
                f[data_start + si] = sqrt_data * h;

                if let Some(jac) = jac.as_deref_mut() {
                    let proj = self.intrinsics.project_jacobian(&warped);
                    // d a / d warped = -(gu, gv) . d(uv)/d(warped)
                    let dw = [
                        -(gu * proj[0][0] + gv * proj[1][0]),
                        -(gu * proj[0][1] + gv * proj[1][1]),
                        -(gu * proj[0][2] + gv * proj[1][2]),
                    ];
                    let rot_jac = rot_derivs.as_ref().unwrap()
                        [zi * self.layout.n_segments + slot.segment as usize]
                        .jacobian_at(&(warped - c.pose.translation));
                    let s = sqrt_data * dh;
                    let mut row = [0.0; 6];
                    for j in 0..3 {
                        row[j] = s
                            * (dw[0] * rot_jac[(0, j)]
                                + dw[1] * rot_jac[(1, j)]
                                + dw[2] * rot_jac[(2, j)]);
                        row[j + 3] = s * dw[j];
                    }
                    let base = self.pose_offset(zi, slot.segment as usize);
                    let cols: [usize; 6] = std::array::from_fn(|j| base + j);
                    jac.push_block(data_start + si, 1, &cols, &row);
                }
            }

            let picp_start = self.layout.picp_range(zi).start;
            for (si, slot) in self.picp_slots.iter().enumerate() {
                let pix = slot.pixel as usize;
                let z = src.depth.at(pix);
                if z <= 0.0 {
                    continue;
                }
                let (px, py) = (pix % width, pix / width);
                let Some(normal) = self.normals[pair.l].get(px, py) else {
                    continue;
                };
                let Some(corr) = self.corr.get(zi, pix) else {
                    continue;
                };
                let point = self
                    .intrinsics
                    .backproject_unchecked(&Vector2::new(px as f64, py as f64), z);
                let c = cache(zi, slot.segment as usize);
                let warped = c.rot * point + c.pose.translation;
                let a = (warped - corr).dot(&normal);
                let (h, dh) = huber_scaled_residual(a, self.params.huber_eps_picp);
                f[picp_start + si] = sqrt_picp * h;

                if let Some(jac) = jac.as_deref_mut() {
                    let rot_jac = rot_derivs.as_ref().unwrap()
                        [zi * self.layout.n_segments + slot.segment as usize]
                        .jacobian_at(&(warped - c.pose.translation));
                    let s = sqrt_picp * dh;
                    let mut row = [0.0; 6];
                    for j in 0..3 {
                        row[j] = s
                            * (normal.x * rot_jac[(0, j)]
                                + normal.y * rot_jac[(1, j)]
                                + normal.z * rot_jac[(2, j)]);
                        row[j + 3] = s * normal[j];
                    }
                    let base = self.pose_offset(zi, slot.segment as usize);
                    let cols: [usize; 6] = std::array::from_fn(|j| base + j);
                    jac.push_block(picp_start + si, 1, &cols, &row);
                }
            }
        }

        for (zi, _) in self.pairs.iter().enumerate() {
            let start = self.layout.lreg_range(zi).start;
            for (ai, &(j, h)) in self.adj.pairs().iter().enumerate() {
                let w = x[self.weight_offset(ai)];
                let oj = self.pose_offset(zi, j as usize);
                let oh = self.pose_offset(zi, h as usize);
                let w2 = w * w;
                let row0 = start + ai * 6;
                let mut diff = [0.0; 6];
                for i in 0..6 {
                    diff[i] = x[oj + i] - x[oh + i];
                    f[row0 + i] = sqrt_lreg * w2 * diff[i];
                }
                if let Some(jac) = jac.as_deref_mut() {
                    let mut cols = [0usize; 13];
                    for (i, c) in cols.iter_mut().take(6).enumerate() {
                        *c = oj + i;
                    }
                    for (i, c) in cols.iter_mut().skip(6).take(6).enumerate() {
                        *c = oh + i;
                    }
                    cols[12] = self.weight_offset(ai);
                    let mut data = [0.0; 6 * 13];
                    for i in 0..6 {
                        data[i * 13 + i] = sqrt_lreg * w2;
                        data[i * 13 + 6 + i] = -sqrt_lreg * w2;
                        data[i * 13 + 12] = sqrt_lreg * 2.0 * w * diff[i];
                    }
                    jac.push_block(row0, 6, &cols, &data);
                }
            }
        }

        let wopt_start = self.layout.wopt_range().start;
        for ai in 0..self.layout.sum_psi {
            let w = x[self.weight_offset(ai)];
            f[wopt_start + ai] = sqrt_wopt * (1.0 - w * w);
            if let Some(jac) = jac.as_deref_mut() {
                jac.push_block(
                    wopt_start + ai,
                    1,
                    &[self.weight_offset(ai)],
                    &[-2.0 * sqrt_wopt * w],
                );
            }
        }

        // Pose concatenation: tie each reference-to-frame-m pose (m >= 2) to
        // the chained adjacent poses.
        let mut row = self.layout.concat_range().start;
        for m in 2..self.frames.len() {
            let target_pair = self.pair_index(0, m);
            for k in 0..self.layout.n_segments {
                let target_off = self.pose_offset(target_pair, k);
                if let Some(jac) = jac.as_deref_mut() {
                    let mut chain = cache(self.pair_index(0, 1), k).pose;
                    let mut derivs: Vec<[[f64; 6]; 6]> = vec![identity6()];
                    for j in 1..m {
                        let outer = cache(self.pair_index(j, j + 1), k).pose;
                        let (next, jc) = compose_poses_with_jacobians(&outer, &chain);
                        for d in &mut derivs {
                            *d = mat6_mul(&jc.d_inner, d);
                        }
                        derivs.push(jc.d_outer);
                        chain = next;
                    }
                    let chain_v = chain.to_vector6();
                    for i in 0..6 {
                        f[row + i] = sqrt_concat * (x[target_off + i] - chain_v[i]);
                    }
                    let ncols = 6 * (1 + m);
                    let mut cols = vec![0usize; ncols];
                    for (i, c) in cols.iter_mut().take(6).enumerate() {
                        *c = target_off + i;
                    }
                    for (jp, _) in derivs.iter().enumerate() {
                        let off = self.pose_offset(self.pair_index(jp, jp + 1), k);
                        for i in 0..6 {
                            cols[6 * (jp + 1) + i] = off + i;
                        }
                    }
                    let mut data = vec![0.0; 6 * ncols];
                    for i in 0..6 {
                        data[i * ncols + i] = sqrt_concat;
                        for (jp, d) in derivs.iter().enumerate() {
                            for jj in 0..6 {
                                data[i * ncols + 6 * (jp + 1) + jj] = -sqrt_concat * d[i][jj];
                            }
                        }
                    }
                    jac.push_block(row, 6, &cols, &data);
                } else {
                    let mut chain = cache(self.pair_index(0, 1), k).pose;
                    for j in 1..m {
                        chain = compose_poses(&cache(self.pair_index(j, j + 1), k).pose, &chain);
                    }
                    let chain_v = chain.to_vector6();
                    for i in 0..6 {
                        f[row + i] = sqrt_concat * (x[target_off + i] - chain_v[i]);
                    }
                }
                row += 6;
            }
        }

        f
    }
}

/// A warp only produces a data residual when its whole bilinear support in
/// the target frame carries valid depth; warps onto invalid pixels
/// contribute zero residual with zero derivative.
fn target_support_valid(depth: &crate::raster::Raster<f64>, u: f64, v: f64) -> bool {
    let (w, h) = (depth.width(), depth.height());
    if w < 2 || h < 2 {
        return false;
    }
    if !(u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64) {
        return false;
    }
    let x0 = (u.floor() as usize).min(w - 2);
    let y0 = (v.floor() as usize).min(h - 2);
    depth.get(x0, y0) > 0.0
        && depth.get(x0 + 1, y0) > 0.0
        && depth.get(x0, y0 + 1) > 0.0
        && depth.get(x0 + 1, y0 + 1) > 0.0
}

fn identity6() -> [[f64; 6]; 6] {
    let mut m = [[0.0; 6]; 6];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat6_mul(a: &[[f64; 6]; 6], b: &[[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut out = [[0.0; 6]; 6];
    for i in 0..6 {
        for k in 0..6 {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..6 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

impl LeastSquaresProblem for MultiframeProblem<'_> {
    fn dim(&self) -> usize {
        self.layout.state_dim()
    }

    fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fill(x, None))
    }

    fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, BlockJacobian)> {
        let mut jac = BlockJacobian::new(self.layout.total_scalars(), self.layout.state_dim());
        let f = self.fill(x, Some(&mut jac));
        if let Some(row) = jac.first_non_finite() {
            let (term, pair) = self.layout.term_of_row(row);
            let (l, m) = pair
                .map(|p| (self.pairs[p].l, self.pairs[p].m))
                .unwrap_or((0, self.frames.len() - 1));
            return Err(Error::NonFiniteResidual {
                term: term.name(),
                l,
                m,
                block: row,
            });
        }
        Ok((f, jac))
    }

    fn on_accepted_step(&mut self, x: &[f64]) -> bool {
        self.refresh_correspondences(x);
        true
    }
}

/// Projective data association: every kept reference point is transformed
/// by its segment pose and projected into the pair's target frame; the
/// nearest pixel with valid depth supplies the candidate, gated by 3D
/// distance and normal consistency.
pub fn update_correspondences(
    frames: &[RgbdFrame],
    pairs: &[FramePair],
    seg: &Segmentation,
    normals: &[NormalMap],
    poses: &[Vec<SegmentPose>],
    intrinsics: &CameraIntrinsics,
    gates: &IcpGates,
) -> CorrespondenceMap {
    let width = seg.width();
    let mut corr = CorrespondenceMap::empty(pairs.len(), seg.width() * seg.height());
    let cos_max = gates.max_angle_deg.to_radians().cos();

    for (zi, pair) in pairs.iter().enumerate() {
        let src = &frames[pair.l];
        let tgt = &frames[pair.m];
        let rotations: Vec<Matrix3<f64>> = poses[zi].iter().map(SegmentPose::rotation).collect();
        for k in 0..seg.count() {
            let rot = &rotations[k];
            let t = poses[zi][k].translation;
            for &pixel in seg.segment_pixels(k) {
                let pix = pixel as usize;
                let z = src.depth.at(pix);
                if z <= 0.0 {
                    continue;
                }
                let (px, py) = (pix % width, pix / width);
                let point =
                    intrinsics.backproject_unchecked(&Vector2::new(px as f64, py as f64), z);
                let warped = rot * point + t;
                if warped.z <= MIN_WARP_Z {
                    continue;
                }
                let uv = intrinsics.project_unchecked(&warped);
                let (xi, yi) = (uv.x.round(), uv.y.round());
                if xi < 0.0
                    || yi < 0.0
                    || xi >= tgt.depth.width() as f64
                    || yi >= tgt.depth.height() as f64
                {
                    continue;
                }
                let (xi, yi) = (xi as usize, yi as usize);
                let zt = tgt.depth.get(xi, yi);
                if zt <= 0.0 {
                    continue;
                }
                let candidate =
                    intrinsics.backproject_unchecked(&Vector2::new(xi as f64, yi as f64), zt);
                if (warped - candidate).norm() > gates.dist_thresh {
                    continue;
                }
                if let (Some(ns), Some(nt)) =
                    (normals[pair.l].get(px, py), normals[pair.m].get(xi, yi))
                {
                    if (rot * ns).dot(&nt) < cos_max {
                        continue;
                    }
                }
                corr.set(zi, pix, Some(candidate));
            }
        }
    }
    corr
}
