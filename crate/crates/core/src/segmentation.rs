//! Graph-based oversegmentation of the reference depth frame and the
//! segment-pair adjacency structure used by the coherence regularizer.
//!
//! Segmentation follows Felzenszwalb-Huttenlocher on an 8-connected pixel
//! grid with edge weight `|z_p - z_q|`; invalid-depth pixels are excluded
//! from the graph and components below `min_size` are discarded.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::raster::Raster;

/// Label assigned to pixels that belong to no kept segment.
pub const DISCARDED: u32 = u32::MAX;

/// Dense segment labeling of the reference frame.
#[derive(Debug, Clone)]
pub struct Segmentation {
    labels: Raster<u32>,
    pixels: Vec<Vec<u32>>,
}

impl Segmentation {
    /// Builds a segmentation from a label raster; labels must already be
    /// dense in `0..K` with `DISCARDED` for dropped pixels.
    pub fn from_labels(labels: Raster<u32>) -> Self {
        let count = labels
            .data()
            .iter()
            .filter(|&&l| l != DISCARDED)
            .map(|&l| l + 1)
            .max()
            .unwrap_or(0) as usize;
        let mut pixels = vec![Vec::new(); count];
        for (i, &l) in labels.data().iter().enumerate() {
            if l != DISCARDED {
                pixels[l as usize].push(i as u32);
            }
        }
        Segmentation { labels, pixels }
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    /// Number of kept segments.
    pub fn count(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels.get(x, y)
    }

    #[inline]
    pub fn label_at(&self, index: usize) -> u32 {
        self.labels.at(index)
    }

    /// Raster pixel indices of segment `k`.
    pub fn segment_pixels(&self, k: usize) -> &[u32] {
        &self.pixels[k]
    }

    pub fn labels(&self) -> &Raster<u32> {
        &self.labels
    }

    pub fn total_kept_pixels(&self) -> usize {
        self.pixels.iter().map(Vec::len).sum()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
    size: Vec<u32>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (a, b) = (a as usize, b as usize);
        let root = if self.rank[a] < self.rank[b] {
            self.parent[a] = b as u32;
            b
        } else {
            self.parent[b] = a as u32;
            if self.rank[a] == self.rank[b] {
                self.rank[a] += 1;
            }
            a
        };
        let other = if root == a { b } else { a };
        self.size[root] += self.size[other];
        self.internal[root] = weight;
        root as u32
    }
}

/// Felzenszwalb-Huttenlocher segmentation of the valid-depth pixels.
///
/// Components merge while the connecting edge weight stays below the
/// internal difference plus `threshold / |C|`; surviving components with at
/// least `min_size` pixels are relabeled densely in first-pixel order.
pub fn felzenszwalb_depth(
    depth: &Raster<f64>,
    threshold: f64,
    min_size: usize,
) -> Result<Segmentation> {
    let (w, h) = (depth.width(), depth.height());
    let valid = |x: usize, y: usize| depth.get(x, y) > 0.0;
    if !depth.data().iter().any(|&z| z > 0.0) {
        return Err(Error::EmptyDepth);
    }

    // 8-connected edges over valid pixels; each undirected edge once.
    let mut edges: Vec<(f64, u32, u32)> = Vec::new();
    let offsets: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !valid(nx, ny) {
                    continue;
                }
                let weight = (depth.get(x, y) - depth.get(nx, ny)).abs();
                edges.push((weight, (y * w + x) as u32, (ny * w + nx) as u32));
            }
        }
    }
    // Ascending weight; construction order breaks ties deterministically.
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut forest = DisjointSet::new(w * h);
    for &(weight, a, b) in &edges {
        let ra = forest.find(a);
        let rb = forest.find(b);
        if ra == rb {
            continue;
        }
        let ta = forest.internal[ra as usize] + threshold / forest.size[ra as usize] as f64;
        let tb = forest.internal[rb as usize] + threshold / forest.size[rb as usize] as f64;
        if weight <= ta.min(tb) {
            forest.union(ra, rb, weight);
        }
    }

    // Relabel surviving components densely, ordered by first pixel.
    let mut labels = Raster::filled(w, h, DISCARDED);
    let mut next = 0u32;
    let mut map: Vec<u32> = vec![DISCARDED; w * h];
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            let root = forest.find((y * w + x) as u32) as usize;
            if (forest.size[root] as usize) < min_size {
                continue;
            }
            if map[root] == DISCARDED {
                map[root] = next;
                next += 1;
            }
            labels.set(x, y, map[root]);
        }
    }
    Ok(Segmentation::from_labels(labels))
}

/// Mean back-projected 3D position of each segment's valid-depth pixels;
/// `None` marks a segment without any valid pixel (excluded downstream).
pub fn segment_centroids(
    seg: &Segmentation,
    depth: &Raster<f64>,
    intrinsics: &CameraIntrinsics,
) -> Vec<Option<Vector3<f64>>> {
    let w = seg.width();
    (0..seg.count())
        .map(|k| {
            let mut sum = Vector3::zeros();
            let mut n = 0usize;
            for &pix in seg.segment_pixels(k) {
                let (x, y) = ((pix as usize) % w, (pix as usize) / w);
                let z = depth.get(x, y);
                if z > 0.0 {
                    sum += intrinsics.backproject_unchecked(&Vector2::new(x as f64, y as f64), z);
                    n += 1;
                }
            }
            if n > 0 {
                Some(sum / n as f64)
            } else {
                None
            }
        })
        .collect()
}

/// Sparse symmetric adjacency over segment pairs; one lifting weight per
/// stored unordered pair.
#[derive(Debug, Clone)]
pub struct SegmentAdjacency {
    pairs: Vec<(u32, u32)>,
}

impl SegmentAdjacency {
    /// Unordered pairs `(j, h)` with `j < h`, sorted lexicographically; the
    /// position of a pair is its lifting-weight index.
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_pairs(mut pairs: Vec<(u32, u32)>) -> Self {
        for p in &mut pairs {
            if p.0 > p.1 {
                *p = (p.1, p.0);
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs.retain(|p| p.0 != p.1);
        SegmentAdjacency { pairs }
    }
}

/// Marks each segment adjacent to its `n_psi` nearest centroids (3D
/// Euclidean distance, ties broken by lower segment id) and symmetrizes.
pub fn build_adjacency(centroids: &[Vector3<f64>], n_psi: usize) -> SegmentAdjacency {
    assert!(n_psi >= 1, "n_psi must be at least 1");
    let k = centroids.len();
    let mut pairs = Vec::new();
    for j in 0..k {
        let mut candidates: Vec<(f64, usize)> = (0..k)
            .filter(|&h| h != j)
            .map(|h| ((centroids[j] - centroids[h]).norm(), h))
            .collect();
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, h) in candidates.iter().take(n_psi) {
            pairs.push((j.min(h) as u32, j.max(h) as u32));
        }
    }
    SegmentAdjacency::from_pairs(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_depth(w: usize, h: usize, left: f64, right: f64) -> Raster<f64> {
        Raster::from_fn(w, h, |x, _| if x < w / 2 { left } else { right })
    }

    #[test]
    fn step_image_splits_at_boundary() {
        let depth = step_depth(10, 10, 1.0, 2.0);
        let seg = felzenszwalb_depth(&depth, 0.5, 1).unwrap();
        assert_eq!(seg.count(), 2);
        for y in 0..10 {
            for x in 0..10 {
                let expected = if x < 5 { 0 } else { 1 };
                assert_eq!(seg.label(x, y), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn uniform_depth_is_one_segment() {
        let depth = Raster::filled(12, 8, 1.5);
        let seg = felzenszwalb_depth(&depth, 0.5, 1).unwrap();
        assert_eq!(seg.count(), 1);
        assert_eq!(seg.total_kept_pixels(), 96);
    }

    #[test]
    fn min_size_discards_small_components() {
        let depth = step_depth(10, 10, 1.0, 2.0);
        let seg = felzenszwalb_depth(&depth, 0.5, 60).unwrap();
        assert_eq!(seg.count(), 0);
        assert_eq!(seg.label(0, 0), DISCARDED);
        assert_eq!(seg.total_kept_pixels(), 0);
    }

    #[test]
    fn no_valid_pixels_errors() {
        let depth = Raster::filled(4, 4, 0.0);
        assert!(matches!(
            felzenszwalb_depth(&depth, 0.5, 1),
            Err(Error::EmptyDepth)
        ));
    }

    #[test]
    fn invalid_pixels_are_discarded_and_partition_holds() {
        let mut depth = step_depth(10, 10, 1.0, 2.0);
        depth.set(3, 3, 0.0);
        depth.set(7, 2, 0.0);
        let seg = felzenszwalb_depth(&depth, 0.5, 1).unwrap();
        assert_eq!(seg.label(3, 3), DISCARDED);
        assert_eq!(seg.label(7, 2), DISCARDED);
        // Every valid pixel appears in exactly one segment pixel list.
        let mut seen = vec![0usize; 100];
        for k in 0..seg.count() {
            for &p in seg.segment_pixels(k) {
                seen[p as usize] += 1;
            }
        }
        for y in 0..10 {
            for x in 0..10 {
                let expected = usize::from(depth.get(x, y) > 0.0);
                assert_eq!(seen[y * 10 + x], expected);
            }
        }
    }

    #[test]
    fn depth_offset_leaves_labels_unchanged() {
        // Dyadic depths keep the offset arithmetic exact.
        let depth = step_depth(16, 12, 1.0, 2.0);
        let base = felzenszwalb_depth(&depth, 0.5, 1).unwrap();
        for offset in [0.5, 7.25] {
            let shifted = Raster::from_fn(16, 12, |x, y| depth.get(x, y) + offset);
            let seg = felzenszwalb_depth(&shifted, 0.5, 1).unwrap();
            assert_eq!(seg.labels(), base.labels());
        }
    }

    #[test]
    fn centroid_of_symmetric_plane_is_on_axis() {
        let k = CameraIntrinsics::new(100.0, 100.0, 15.5, 11.5, 32, 24);
        let depth = Raster::filled(32, 24, 2.0);
        let seg = felzenszwalb_depth(&depth, 0.5, 1).unwrap();
        let centroids = segment_centroids(&seg, &depth, &k);
        let c = centroids[0].unwrap();
        assert!((c - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-9);
    }

    #[test]
    fn centroid_of_singleton_and_midpoint() {
        let k = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480);
        // Single pixel at the principal point: centroid (0, 0, z).
        let mut labels = Raster::filled(640, 480, DISCARDED);
        labels.set(319, 239, 0);
        let seg = Segmentation::from_labels(labels);
        let mut depth = Raster::filled(640, 480, 0.0);
        depth.set(319, 239, 3.0);
        let c = segment_centroids(&seg, &depth, &k)[0].unwrap();
        let expected = k.backproject_unchecked(&Vector2::new(319.0, 239.0), 3.0);
        assert!((c - expected).norm() < 1e-12);

        // Two pixels back-projecting to (±1, 0, 2): centroid (0, 0, 2).
        let mut labels = Raster::filled(640, 480, DISCARDED);
        labels.set(582, 239, 0); // x = cx + fx/2 -> (1, y0, 2)
        labels.set(57, 239, 0); // x = cx - fx/2 -> (-1, y0, 2)
        let seg = Segmentation::from_labels(labels);
        let mut depth = Raster::filled(640, 480, 0.0);
        depth.set(582, 239, 2.0);
        depth.set(57, 239, 2.0);
        let c = segment_centroids(&seg, &depth, &k)[0].unwrap();
        assert!(c.x.abs() < 1e-12);
        assert!((c.z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_of_empty_segment_is_none() {
        let k = CameraIntrinsics::new(100.0, 100.0, 3.5, 3.5, 8, 8);
        let mut labels = Raster::filled(8, 8, DISCARDED);
        labels.set(1, 1, 0);
        let seg = Segmentation::from_labels(labels);
        let depth = Raster::filled(8, 8, 0.0);
        assert_eq!(segment_centroids(&seg, &depth, &k)[0], None);
    }

    #[test]
    fn adjacency_collinear_nearest() {
        let centroids = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(3.0, 0.0, 1.0),
        ];
        let adj = build_adjacency(&centroids, 1);
        assert_eq!(adj.pairs(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn adjacency_degenerate_counts() {
        let one = [Vector3::new(0.0, 0.0, 1.0)];
        assert!(build_adjacency(&one, 3).is_empty());
        let two = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)];
        for n_psi in [1, 2, 5] {
            let adj = build_adjacency(&two, n_psi);
            assert_eq!(adj.pairs(), &[(0, 1)]);
        }
    }

    #[test]
    fn adjacency_is_symmetric_without_self_pairs() {
        let centroids: Vec<Vector3<f64>> = (0..7)
            .map(|i| Vector3::new((i as f64 * 1.37).sin(), (i as f64 * 0.91).cos(), 2.0))
            .collect();
        let adj = build_adjacency(&centroids, 2);
        assert!(adj.len() <= 7 * 2);
        for &(j, h) in adj.pairs() {
            assert!(j < h);
        }
        let mut sorted = adj.pairs().to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), adj.len());
        // Every segment keeps at least one partner.
        for id in 0..7u32 {
            assert!(adj.pairs().iter().any(|&(j, h)| j == id || h == id));
        }
    }
}
