//! Volume-level prediction: stack per-plane scores or labels over all
//! slices of the three orientations and combine them, either by fusing
//! raw scores with the learned planar weights or by majority voting.

use thiserror::Error;

use crate::fusion::{NodeGrid, Plane, PlaneWeights};
use crate::hierarchy::{HierWorkspace, LabelTree};
use crate::volume::{flat_index, LabelVolume, Volume};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model emits {model} node scores but the tree has {tree} nodes")]
    ModelShapeMismatch { model: usize, tree: usize },
}

/// Per-voxel, per-node score stack for one plane orientation.
/// Layout: `flat_index(dims, x, y, z) * n_nodes + node`.
#[derive(Debug, Clone)]
pub struct ScoreVolume {
    pub dims: [usize; 3],
    pub n_nodes: usize,
    pub data: Vec<f64>,
}

impl ScoreVolume {
    pub fn zeros(dims: [usize; 3], n_nodes: usize) -> Self {
        ScoreVolume {
            dims,
            n_nodes,
            data: vec![0.0; dims[0] * dims[1] * dims[2] * n_nodes],
        }
    }

    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let o = flat_index(self.dims, x, y, z) * self.n_nodes;
        &self.data[o..o + self.n_nodes]
    }

    #[inline]
    pub fn voxel_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f64] {
        let o = flat_index(self.dims, x, y, z) * self.n_nodes;
        &mut self.data[o..o + self.n_nodes]
    }
}

/// How per-voxel scores turn into a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArgmaxStrategy {
    /// Highest class-conditional probability over the finest frontier,
    /// ties broken by smallest node id.
    #[default]
    GlobalFrontier,
    /// Greedy root-to-leaf descent along maximal conditionals.
    GreedyDescent,
}

/// Frontier node indices ordered by ascending id, so a scan with strict
/// improvement breaks ties toward the smallest id.
fn frontier_by_id(tree: &LabelTree) -> Vec<usize> {
    let mut f = tree.frontier().to_vec();
    f.sort_unstable_by_key(|&i| tree.node_id(i));
    f
}

fn label_from_probs(
    tree: &LabelTree,
    ws: &HierWorkspace,
    frontier_sorted: &[usize],
    strategy: ArgmaxStrategy,
) -> u32 {
    match strategy {
        ArgmaxStrategy::GlobalFrontier => {
            let mut best = frontier_sorted[0];
            let mut best_lp = ws.log_p[best];
            for &i in &frontier_sorted[1..] {
                if ws.log_p[i] > best_lp {
                    best = i;
                    best_lp = ws.log_p[i];
                }
            }
            tree.node_id(best)
        }
        ArgmaxStrategy::GreedyDescent => {
            // Walk from the root group downward along maximal conditionals;
            // ties toward the smallest id.
            let mut group: Vec<usize> = (0..tree.n_nodes())
                .filter(|&i| tree.parent_of(i).is_none())
                .collect();
            group.sort_unstable_by_key(|&i| tree.node_id(i));
            loop {
                let mut best = group[0];
                let mut best_c = ws.cond[best];
                for &i in &group[1..] {
                    if ws.cond[i] > best_c {
                        best = i;
                        best_c = ws.cond[i];
                    }
                }
                let children = tree.children_of(best);
                if children.is_empty() {
                    return tree.node_id(best);
                }
                group = children.to_vec();
                group.sort_unstable_by_key(|&i| tree.node_id(i));
            }
        }
    }
}

/// Fuse three per-plane score stacks with the planar weights and label
/// every voxel by hierarchical probability.
///
/// Voxels are processed in z-chunks of `chunk` slices (`None`: whole
/// volume at once) so callers can bound the transient footprint.
pub fn predict_score_fusion(
    scores: &[ScoreVolume; 3],
    weights: &PlaneWeights,
    tree: &LabelTree,
    chunk: Option<usize>,
) -> Result<LabelVolume, InferenceError> {
    let dims = scores[0].dims;
    for s in scores.iter() {
        if s.dims != dims {
            return Err(InferenceError::ShapeMismatch(format!(
                "{:?} vs {dims:?}",
                s.dims
            )));
        }
        if s.n_nodes != tree.n_nodes() {
            return Err(InferenceError::ModelShapeMismatch {
                model: s.n_nodes,
                tree: tree.n_nodes(),
            });
        }
    }
    let n = tree.n_nodes();
    let w3 = weights.weights();
    let frontier_sorted = frontier_by_id(tree);
    let mut ws = HierWorkspace::new(tree);
    let mut out = LabelVolume::from_parts(dims, [1.0; 3], vec![0; dims[0] * dims[1] * dims[2]]);
    let chunk = chunk.unwrap_or(dims[2]).max(1);
    let mut fused = vec![0.0; n];
    let mut z0 = 0;
    while z0 < dims[2] {
        let z1 = (z0 + chunk).min(dims[2]);
        for z in z0..z1 {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let sa = scores[0].voxel(x, y, z);
                    let sc = scores[1].voxel(x, y, z);
                    let ss = scores[2].voxel(x, y, z);
                    for i in 0..n {
                        fused[i] = w3[0] * sa[i] + w3[1] * sc[i] + w3[2] * ss[i];
                    }
                    tree.eval_probs(&fused, &mut ws);
                    let idx = flat_index(dims, x, y, z);
                    out.data[idx] =
                        label_from_probs(tree, &ws, &frontier_sorted, ArgmaxStrategy::GlobalFrontier);
                }
            }
        }
        z0 = z1;
    }
    Ok(out)
}

/// Per-voxel majority vote over three planar label volumes; when all
/// three disagree, the plane with the highest aggregation weight wins.
pub fn predict_majority_vote(
    labels: &[LabelVolume; 3],
    weights: &PlaneWeights,
) -> Result<LabelVolume, InferenceError> {
    let dims = labels[0].header.dims;
    for l in labels.iter() {
        if l.header.dims != dims {
            return Err(InferenceError::ShapeMismatch(format!(
                "{:?} vs {dims:?}",
                l.header.dims
            )));
        }
    }
    let w3 = weights.weights();
    let top_plane = (0..3).fold(0, |best, i| if w3[i] > w3[best] { i } else { best });
    let mut out = labels[0].clone();
    for idx in 0..out.data.len() {
        let a = labels[0].data[idx];
        let c = labels[1].data[idx];
        let s = labels[2].data[idx];
        out.data[idx] = if a == c || a == s {
            a
        } else if c == s {
            c
        } else {
            [a, c, s][top_plane]
        };
    }
    Ok(out)
}

/// A model that scores one 2D slice: the contract between the trainer's
/// backbone and volume inference.
pub trait SliceScorer {
    fn n_nodes(&self) -> usize;
    /// Raw per-node scores for a slice given as a (w, h) intensity grid.
    fn score_slice(&self, pixels: &[f64], w: usize, h: usize) -> NodeGrid;
}

/// Extract one slice of an intensity volume as a flat (w, h) pixel grid.
pub fn extract_slice(volume: &Volume, plane: Plane, slice: usize) -> (Vec<f64>, usize, usize) {
    let dims = volume.header.dims;
    let (w, h) = plane.slice_dims(dims);
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let v = plane.voxel_of(slice, col, row);
            out[row * w + col] = volume.at(v[0], v[1], v[2]);
        }
    }
    (out, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    Fusion,
    Vote,
}

/// Run the scorer over every slice of all three orientations and combine
/// the planes with the selected mode. Output geometry equals the input.
///
/// In fusion mode the work proceeds in z-chunks of `chunk` slices to
/// bound the 4D score footprint; coronal and sagittal slices are
/// re-scored per chunk when chunking is active.
pub fn segment_volume(
    volume: &Volume,
    scorer: &dyn SliceScorer,
    tree: &LabelTree,
    mode: PredictionMode,
    weights: &PlaneWeights,
    chunk: Option<usize>,
) -> Result<LabelVolume, InferenceError> {
    if scorer.n_nodes() != tree.n_nodes() {
        return Err(InferenceError::ModelShapeMismatch {
            model: scorer.n_nodes(),
            tree: tree.n_nodes(),
        });
    }
    let dims = volume.header.dims;
    let n = tree.n_nodes();
    match mode {
        PredictionMode::Vote => {
            let mut planar: Vec<LabelVolume> = Vec::with_capacity(3);
            let frontier_sorted = frontier_by_id(tree);
            let mut ws = HierWorkspace::new(tree);
            for plane in Plane::ALL {
                let mut lv = LabelVolume {
                    header: volume.header.clone(),
                    data: vec![0; volume.data.len()],
                };
                lv.header.datatype = crate::volume::Datatype::I32;
                for slice in 0..plane.n_slices(dims) {
                    let (pixels, w, h) = extract_slice(volume, plane, slice);
                    let grid = scorer.score_slice(&pixels, w, h);
                    for row in 0..h {
                        for col in 0..w {
                            tree.eval_probs(grid.pixel(col, row), &mut ws);
                            let v = plane.voxel_of(slice, col, row);
                            let idx = flat_index(dims, v[0], v[1], v[2]);
                            lv.data[idx] = label_from_probs(
                                tree,
                                &ws,
                                &frontier_sorted,
                                ArgmaxStrategy::GlobalFrontier,
                            );
                        }
                    }
                }
                planar.push(lv);
            }
            let arr: [LabelVolume; 3] = planar.try_into().expect("three planes");
            predict_majority_vote(&arr, weights)
        }
        PredictionMode::Fusion => {
            let chunk_len = chunk.unwrap_or(dims[2]).max(1);
            let w3 = weights.weights();
            let frontier_sorted = frontier_by_id(tree);
            let mut ws = HierWorkspace::new(tree);
            let mut out = LabelVolume {
                header: volume.header.clone(),
                data: vec![0; volume.data.len()],
            };
            out.header.datatype = crate::volume::Datatype::I32;
            let mut fused = vec![0.0; n];
            let mut z0 = 0;
            while z0 < dims[2] {
                let z1 = (z0 + chunk_len).min(dims[2]);
                let cdims = [dims[0], dims[1], z1 - z0];
                let mut bufs = [
                    ScoreVolume::zeros(cdims, n),
                    ScoreVolume::zeros(cdims, n),
                    ScoreVolume::zeros(cdims, n),
                ];
                // Axial: only the chunk's own slices.
                for z in z0..z1 {
                    let (pixels, w, h) = extract_slice(volume, Plane::Axial, z);
                    let grid = scorer.score_slice(&pixels, w, h);
                    for row in 0..h {
                        for col in 0..w {
                            bufs[0]
                                .voxel_mut(col, row, z - z0)
                                .copy_from_slice(grid.pixel(col, row));
                        }
                    }
                }
                // Coronal and sagittal: every slice contributes rows in the chunk.
                for (bi, plane) in [(1usize, Plane::Coronal), (2, Plane::Sagittal)] {
                    for slice in 0..plane.n_slices(dims) {
                        let (pixels, w, h) = extract_slice(volume, plane, slice);
                        let grid = scorer.score_slice(&pixels, w, h);
                        for row in 0..h {
                            for col in 0..w {
                                let v = plane.voxel_of(slice, col, row);
                                if v[2] >= z0 && v[2] < z1 {
                                    bufs[bi]
                                        .voxel_mut(v[0], v[1], v[2] - z0)
                                        .copy_from_slice(grid.pixel(col, row));
                                }
                            }
                        }
                    }
                }
                for z in 0..z1 - z0 {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            let sa = bufs[0].voxel(x, y, z);
                            let sc = bufs[1].voxel(x, y, z);
                            let ss = bufs[2].voxel(x, y, z);
                            for i in 0..n {
                                fused[i] = w3[0] * sa[i] + w3[1] * sc[i] + w3[2] * ss[i];
                            }
                            tree.eval_probs(&fused, &mut ws);
                            let idx = flat_index(dims, x, y, z0 + z);
                            out.data[idx] = label_from_probs(
                                tree,
                                &ws,
                                &frontier_sorted,
                                ArgmaxStrategy::GlobalFrontier,
                            );
                        }
                    }
                }
                z0 = z1;
            }
            Ok(out)
        }
    }
}
