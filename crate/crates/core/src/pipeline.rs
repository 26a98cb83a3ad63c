//! End-to-end multiframe orchestration: preprocessing, frame-pair
//! enumeration, pairwise initialization, the joint window solve with ICP
//! correspondence refreshes, flow extraction and motion grouping.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyParams, IcpGates, MultiframeProblem, ProblemState};
use crate::error::{Error, Result};
use crate::geometry::{compose_poses, CameraIntrinsics, SegmentPose};
use crate::raster::Raster;
use crate::segmentation::{
    build_adjacency, felzenszwalb_depth, segment_centroids, SegmentAdjacency, Segmentation,
};
use crate::solver::{lm_minimize, SolverOptions, TraceEntry};

pub use crate::energy::update_correspondences;

/// Registered intensity/depth frame. The raw normalized luminance is kept
/// alongside its Gaussian-smoothed copy; depth is never filtered.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub index: usize,
    /// Normalized luminance in the unit interval.
    pub intensity: Raster<f64>,
    /// Pre-smoothed intensity used by the data term.
    pub smoothed: Raster<f64>,
    /// Depth in meters; 0 marks invalid.
    pub depth: Raster<f64>,
}

impl RgbdFrame {
    pub fn new(index: usize, intensity: Raster<f64>, depth: Raster<f64>, sigma: f64) -> Self {
        assert_eq!(intensity.width(), depth.width());
        assert_eq!(intensity.height(), depth.height());
        let smoothed = intensity.gaussian_blur(sigma);
        RgbdFrame {
            index,
            intensity,
            smoothed,
            depth,
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }
}

/// Luminance/depth pair before smoothing.
#[derive(Debug, Clone)]
pub struct RawFrame {
    pub luminance: Raster<f64>,
    pub depth: Raster<f64>,
}

/// Builds the working frames: validates dimensions and smooths intensity
/// with the configured sigma. Depth passes through untouched.
pub fn preprocess(raw: &[RawFrame], sigma: f64) -> Result<Vec<RgbdFrame>> {
    if raw.len() < 2 {
        return Err(Error::InvalidWindow { n: raw.len() });
    }
    let (w, h) = (raw[0].luminance.width(), raw[0].luminance.height());
    for (i, f) in raw.iter().enumerate() {
        for (fw, fh) in [
            (f.luminance.width(), f.luminance.height()),
            (f.depth.width(), f.depth.height()),
        ] {
            if (fw, fh) != (w, h) {
                return Err(Error::DimensionMismatch {
                    index: i,
                    width: fw,
                    height: fh,
                    exp_width: w,
                    exp_height: h,
                });
            }
        }
    }
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, f)| RgbdFrame::new(i, f.luminance.clone(), f.depth.clone(), sigma))
        .collect())
}

/// Ordered frame pair `(l, m)`, `l < m`, within one temporal window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePair {
    pub l: usize,
    pub m: usize,
    /// Consecutive frames.
    pub adjacent: bool,
}

/// All `C(N,2)` ordered pairs in lexicographic order.
pub fn enumerate_pairs(n: usize) -> Result<Vec<FramePair>> {
    if n < 2 {
        return Err(Error::InvalidWindow { n });
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for l in 0..n {
        for m in l + 1..n {
            pairs.push(FramePair {
                l,
                m,
                adjacent: m == l + 1,
            });
        }
    }
    Ok(pairs)
}

/// Lexicographic index of pair `(l, m)` among the `C(n,2)` pairs.
pub fn pair_index(n: usize, l: usize, m: usize) -> usize {
    debug_assert!(l < m && m < n);
    l * (2 * n - l - 1) / 2 + (m - l - 1)
}

/// Felzenszwalb parameters plus the adjacency fan-out.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationParams {
    pub threshold: f64,
    pub min_size: usize,
    /// Nearest centroids marked adjacent per segment.
    pub n_psi: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            threshold: 0.5,
            min_size: 2000,
            n_psi: 4,
        }
    }
}

/// Full pipeline configuration for one temporal window.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Window size N.
    pub window: usize,
    /// Reference frame index within the window.
    pub reference_index: usize,
    /// Pose-distance threshold for motion grouping.
    pub motion_tol: f64,
    pub segmentation: SegmentationParams,
    pub energy: EnergyParams,
    pub solver: SolverOptions,
    pub icp: IcpGates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 2,
            reference_index: 0,
            motion_tol: 0.01,
            segmentation: SegmentationParams::default(),
            energy: EnergyParams::default(),
            solver: SolverOptions::default(),
            icp: IcpGates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidWindow { n: self.window });
        }
        if self.reference_index >= self.window {
            return Err(Error::Config(format!(
                "reference_index {} outside window of {}",
                self.reference_index, self.window
            )));
        }
        self.energy.validate()?;
        self.solver.validate()?;
        Ok(())
    }
}

/// Initial state: unit lifting weights, adjacent pairs aligned by
/// independent two-frame solves from identity, non-adjacent pairs set to
/// the composition of the adjacent chain.
pub fn initialize(
    frames: &[RgbdFrame],
    seg: &Segmentation,
    adj: &SegmentAdjacency,
    intrinsics: &CameraIntrinsics,
    config: &PipelineConfig,
) -> Result<ProblemState> {
    let n = frames.len();
    let pairs = enumerate_pairs(n)?;
    let k = seg.count();
    let mut state = ProblemState::identity(k, pairs.len(), adj.len());

    for l in 0..n - 1 {
        let window = &frames[l..=l + 1];
        let mut problem =
            MultiframeProblem::new(window, *intrinsics, seg, adj, 0, config.energy, config.icp)?;
        let x0 = problem.identity_state();
        problem.refresh_correspondences(x0.as_slice());
        let result = lm_minimize(&mut problem, x0.as_slice(), &config.solver)?;
        let solved = problem.state_from_vec(result.x);
        let zi = pair_index(n, l, l + 1);
        for s in 0..k {
            state.set_pose(zi, s, &solved.pose(0, s));
        }
    }

    for pair in &pairs {
        if pair.adjacent {
            continue;
        }
        for s in 0..k {
            let mut chain = state.pose(pair_index(n, pair.l, pair.l + 1), s);
            for j in pair.l + 1..pair.m {
                chain = compose_poses(&state.pose(pair_index(n, j, j + 1), s), &chain);
            }
            state.set_pose(pair_index(n, pair.l, pair.m), s, &chain);
        }
    }
    Ok(state)
}

/// Solved window: final state, energy trace and the problem layout facts
/// needed to interpret it.
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub state: ProblemState,
    pub energy: f64,
    pub trace: Vec<TraceEntry>,
}

/// Joint multiframe solve from an initialized state; correspondences are
/// refreshed after every accepted step.
pub fn solve_window(
    frames: &[RgbdFrame],
    seg: &Segmentation,
    adj: &SegmentAdjacency,
    intrinsics: &CameraIntrinsics,
    config: &PipelineConfig,
    x0: &ProblemState,
) -> Result<WindowSolution> {
    let mut problem = MultiframeProblem::new(
        frames,
        *intrinsics,
        seg,
        adj,
        config.reference_index,
        config.energy,
        config.icp,
    )?;
    problem.refresh_correspondences(x0.as_slice());
    let result = lm_minimize(&mut problem, x0.as_slice(), &config.solver)?;
    Ok(WindowSolution {
        state: problem.state_from_vec(result.x),
        energy: result.energy,
        trace: result.trace,
    })
}

/// Per-reference-pixel 3D displacement into one current frame, with the
/// projected 2D flow used for evaluation and visualization.
#[derive(Debug, Clone)]
pub struct FlowFrame {
    /// Window index of the current frame.
    pub frame_index: usize,
    pub flow3d: Raster<Vector3<f64>>,
    pub flow2d: Raster<Vector2<f64>>,
    pub valid: Raster<bool>,
}

/// Scene flow from the reference frame into every other window frame.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub ref_index: usize,
    pub frames: Vec<FlowFrame>,
}

impl FlowField {
    pub fn width(&self) -> usize {
        self.frames[0].flow3d.width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].flow3d.height()
    }

    /// Flow into a given window frame index.
    pub fn toward(&self, frame_index: usize) -> Option<&FlowFrame> {
        self.frames.iter().find(|f| f.frame_index == frame_index)
    }
}

/// Rigid flow per valid reference pixel of each kept segment:
/// `rho = T_k(P) - P`, projected flow `pi(T_k(P)) - p`.
pub fn extract_flow(
    state: &ProblemState,
    seg: &Segmentation,
    ref_frame: &RgbdFrame,
    ref_index: usize,
    n_frames: usize,
    intrinsics: &CameraIntrinsics,
) -> FlowField {
    let (w, h) = (ref_frame.width(), ref_frame.height());
    let mut frames = Vec::new();
    for m in 0..n_frames {
        if m == ref_index {
            continue;
        }
        // Pose mapping reference points into frame m.
        let poses: Vec<SegmentPose> = (0..seg.count())
            .map(|k| {
                if m > ref_index {
                    state.pose(pair_index(n_frames, ref_index, m), k)
                } else {
                    state.pose(pair_index(n_frames, m, ref_index), k).inverse()
                }
            })
            .collect();
        let rotations: Vec<_> = poses.iter().map(SegmentPose::rotation).collect();

        let mut flow3d = Raster::filled(w, h, Vector3::zeros());
        let mut flow2d = Raster::filled(w, h, Vector2::zeros());
        let mut valid = Raster::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let label = seg.label(x, y);
                let z = ref_frame.depth.get(x, y);
                if label == crate::segmentation::DISCARDED || z <= 0.0 {
                    continue;
                }
                let k = label as usize;
                let p = intrinsics.backproject_unchecked(&Vector2::new(x as f64, y as f64), z);
                let q = rotations[k] * p + poses[k].translation;
                if q.z <= 0.0 {
                    continue;
                }
                flow3d.set(x, y, q - p);
                let uv = intrinsics.project_unchecked(&q);
                flow2d.set(x, y, uv - Vector2::new(x as f64, y as f64));
                valid.set(x, y, true);
            }
        }
        frames.push(FlowFrame {
            frame_index: m,
            flow3d,
            flow2d,
            valid,
        });
    }
    FlowField { ref_index, frames }
}

/// Median of the valid depths, the scale used to mix rotation and
/// translation in the motion-grouping metric.
pub fn median_valid_depth(depth: &Raster<f64>) -> Option<f64> {
    let mut values: Vec<f64> = depth.data().iter().copied().filter(|&z| z > 0.0).collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(values[values.len() / 2])
}

/// Single-linkage clustering of segment poses under
/// `d(a, b) = |alpha_a - alpha_b| + |t_a - t_b| / scene_scale`; returns one
/// dense motion label per segment.
pub fn group_motions(poses: &[SegmentPose], tol: f64, scene_scale: f64) -> Vec<usize> {
    let k = poses.len();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    for i in 0..k {
        for j in i + 1..k {
            let d = (poses[i].axis_angle - poses[j].axis_angle).norm()
                + (poses[i].translation - poses[j].translation).norm() / scene_scale;
            if d <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj.max(ri)] = rj.min(ri);
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; k];
    let mut next = 0;
    for i in 0..k {
        let r = find(&mut parent, i);
        if labels[r] == usize::MAX {
            labels[r] = next;
            next += 1;
        }
        labels[i] = labels[r];
    }
    labels
}

/// Everything produced by one full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub frames: Vec<RgbdFrame>,
    pub segmentation: Segmentation,
    pub adjacency: SegmentAdjacency,
    pub state: ProblemState,
    pub energy: f64,
    pub trace: Vec<TraceEntry>,
    pub flow: FlowField,
}

/// Full run: preprocess, segment the reference depth, build adjacency,
/// initialize pairwise, solve jointly and extract the flow field.
pub fn run_window(
    raw: &[RawFrame],
    intrinsics: &CameraIntrinsics,
    config: &PipelineConfig,
) -> Result<PipelineResult> {
    config.validate()?;
    if raw.len() != config.window {
        return Err(Error::InvalidWindow { n: raw.len() });
    }
    let frames = preprocess(raw, config.energy.gaussian_sigma)?;
    let ref_frame = &frames[config.reference_index];
    let segmentation = felzenszwalb_depth(
        &ref_frame.depth,
        config.segmentation.threshold,
        config.segmentation.min_size,
    )?;
    let centroids: Vec<Vector3<f64>> =
        segment_centroids(&segmentation, &ref_frame.depth, intrinsics)
            .into_iter()
            .flatten()
            .collect();
    let adjacency = if centroids.len() == segmentation.count() {
        build_adjacency(&centroids, config.segmentation.n_psi)
    } else {
        // Segments without valid depth cannot anchor a centroid; with the
        // segmentation built on the same depth raster this does not occur.
        SegmentAdjacency::from_pairs(Vec::new())
    };

    let x0 = initialize(&frames, &segmentation, &adjacency, intrinsics, config)?;
    let solution = solve_window(&frames, &segmentation, &adjacency, intrinsics, config, &x0)?;
    let flow = extract_flow(
        &solution.state,
        &segmentation,
        ref_frame,
        config.reference_index,
        frames.len(),
        intrinsics,
    );
    Ok(PipelineResult {
        frames,
        segmentation,
        adjacency,
        state: solution.state,
        energy: solution.energy,
        trace: solution.trace,
        flow,
    })
}
