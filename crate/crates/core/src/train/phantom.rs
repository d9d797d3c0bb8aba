//! Synthetic nested-ellipsoid head phantoms for desk-scale training and
//! verification: an outer cranial-cavity shell around a brain made of
//! concentric tissue shells with distinct intensity bands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::hierarchy::LabelTree;
use crate::volume::{LabelVolume, Volume};

/// Intensity means per compartment; noise sits well below the band gaps.
const BG_MEAN: f64 = 0.05;
const CAVITY_MEAN: f64 = 0.9;
const TISSUE_MEANS: [f64; 3] = [0.35, 0.55, 0.75];
const NOISE_SD: f64 = 0.02;

/// Deterministic phantom: `(intensity volume, labels)` for one seed.
///
/// The tree must contain a `cranial-cavity` node and a `brain` node with
/// at least three frontier descendants (the tissue classes).
pub fn generate_phantom(seed: u64, side: usize, tree: &LabelTree) -> (Volume, LabelVolume) {
    assert!(side >= 16, "phantom side must be at least 16");
    let cavity_id = tree
        .find_by_name("cranial-cavity")
        .map(|i| tree.node_id(i))
        .expect("tree has a cranial-cavity node");
    let brain = tree.find_by_name("brain").expect("tree has a brain node");
    let mut tissue_ids: Vec<u32> = tree
        .frontier()
        .iter()
        .copied()
        .filter(|&i| tree.path_to_root(i).contains(&brain))
        .map(|i| tree.node_id(i))
        .collect();
    tissue_ids.sort_unstable();
    assert!(
        tissue_ids.len() >= 3,
        "brain subtree needs at least 3 frontier classes"
    );
    let tissue_ids = &tissue_ids[..3];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let center = [
        (s - 1.0) / 2.0 + rng.random_range(-0.05 * s..0.05 * s),
        (s - 1.0) / 2.0 + rng.random_range(-0.05 * s..0.05 * s),
        (s - 1.0) / 2.0 + rng.random_range(-0.05 * s..0.05 * s),
    ];
    let outer = [
        rng.random_range(0.32 * s..0.42 * s),
        rng.random_range(0.32 * s..0.42 * s),
        rng.random_range(0.32 * s..0.42 * s),
    ];
    let noise = Normal::new(0.0, NOISE_SD).expect("finite sd");

    let n = side * side * side;
    let mut data = vec![0.0; n];
    let mut labels = vec![0u32; n];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                // Normalized ellipsoid radius in [0, inf).
                let r = (((x as f64 - center[0]) / outer[0]).powi(2)
                    + ((y as f64 - center[1]) / outer[1]).powi(2)
                    + ((z as f64 - center[2]) / outer[2]).powi(2))
                .sqrt();
                let idx = x + side * (y + side * z);
                let (label, mean) = if r > 1.0 {
                    (0, BG_MEAN)
                } else if r > 0.8 {
                    (cavity_id, CAVITY_MEAN)
                } else {
                    // Brain interior: concentric tissue shells on the
                    // brain-relative radius r / 0.8.
                    let rb = r / 0.8;
                    if rb > 0.75 {
                        (tissue_ids[0], TISSUE_MEANS[0])
                    } else if rb > 0.45 {
                        (tissue_ids[1], TISSUE_MEANS[1])
                    } else {
                        (tissue_ids[2], TISSUE_MEANS[2])
                    }
                };
                labels[idx] = label;
                data[idx] = (mean + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    (
        Volume::from_parts([side; 3], [1.0; 3], data),
        LabelVolume::from_parts([side; 3], [1.0; 3], labels),
    )
}

/// Convenience batch of phantoms with consecutive seeds.
pub fn phantom_dataset(
    base_seed: u64,
    count: usize,
    side: usize,
    tree: &LabelTree,
) -> Vec<(Volume, LabelVolume)> {
    (0..count)
        .map(|i| generate_phantom(base_seed + i as u64, side, tree))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::trees;

    #[test]
    fn same_seed_gives_identical_phantoms() {
        let tree = trees::phantom();
        let (v1, l1) = generate_phantom(9, 16, &tree);
        let (v2, l2) = generate_phantom(9, 16, &tree);
        assert_eq!(v1.data, v2.data);
        assert_eq!(l1.data, l2.data);
        let (v3, _) = generate_phantom(10, 16, &tree);
        assert_ne!(v1.data, v3.data);
    }

    #[test]
    fn foreground_fraction_in_expected_band() {
        let tree = trees::phantom();
        for seed in 0..8 {
            let (_, l) = generate_phantom(seed, 32, &tree);
            let fg = l.data.iter().filter(|&&x| x != 0).count() as f64 / l.data.len() as f64;
            assert!((0.05..0.6).contains(&fg), "seed {seed}: fraction {fg}");
        }
    }

    #[test]
    fn labels_come_from_the_tree() {
        let tree = trees::phantom();
        let (_, l) = generate_phantom(3, 24, &tree);
        for &id in &l.data {
            assert!(id == 0 || tree.index_of(id).is_some());
        }
        // All four compartments are present.
        for id in [1u32, 3, 4, 5] {
            assert!(l.data.contains(&id), "label {id} missing");
        }
    }

    #[test]
    fn intensities_are_normalized_and_banded() {
        let tree = trees::phantom();
        let (v, l) = generate_phantom(5, 24, &tree);
        assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // Mean intensity of each compartment sits near its band center.
        for (id, mean) in [(1u32, CAVITY_MEAN), (3, TISSUE_MEANS[0]), (5, TISSUE_MEANS[2])] {
            let vals: Vec<f64> = v
                .data
                .iter()
                .zip(&l.data)
                .filter(|(_, &lab)| lab == id)
                .map(|(&x, _)| x)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((m - mean).abs() < 0.02, "label {id}: mean {m}");
        }
    }
}
