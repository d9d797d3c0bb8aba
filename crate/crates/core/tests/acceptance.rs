//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantities (run with `--nocapture` to see them).

use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use brainparc::augment;
use brainparc::fft::{fft3_centered, ifft3_centered};
use brainparc::fusion::{
    self, distance_weights, total_loss, NodeGrid, PlanarBatch, PlanarTargets, PlaneWeights,
};
use brainparc::hierarchy::{
    class_conditional, hard_target, hier_ce_grad, hier_ce_loss, sibling_softmax, LabelTree,
    TreeRow,
};
use brainparc::inference::{segment_volume, PredictionMode};
use brainparc::metrics::{bland_altman, dsc, icv, mann_whitney_u, vs, wilcoxon_signed_rank};
use brainparc::train::{self, generate_phantom, phantom_dataset, TrainConfig, TrainState};
use brainparc::volume::{LabelVolume, Volume};

fn pass(criterion: usize, detail: &str) {
    println!("ACCEPTANCE {criterion}: PASS - {detail}");
}

/// Three-level, six-node tree: root -> {1, 2}; 2 -> {3, 4}; 4 -> {5, 6}.
fn six_node_tree() -> LabelTree {
    LabelTree::from_spec(&[
        (1, None, "n1"),
        (2, None, "n2"),
        (3, Some(2), "n3"),
        (4, Some(2), "n4"),
        (5, Some(4), "n5"),
        (6, Some(4), "n6"),
    ])
    .unwrap()
}

/// Random tree with bounded depth; every node id is its position + 1.
fn random_tree(seed: u64, n: usize, max_depth: u32) -> LabelTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![TreeRow {
        id: 1,
        parent: None,
        name: "n1".into(),
    }];
    let mut levels = vec![1u32];
    for id in 2..=n as u32 {
        let parent = loop {
            if rng.random_bool(0.3) {
                break None;
            }
            let cand = rng.random_range(0..rows.len());
            if levels[cand] < max_depth {
                break Some(cand);
            }
        };
        levels.push(parent.map(|p| levels[p] + 1).unwrap_or(1));
        rows.push(TreeRow {
            id,
            parent: parent.map(|p| rows[p].id),
            name: format!("n{id}"),
        });
    }
    LabelTree::build(rows).unwrap()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_hierarchy_class_conditionals() {
    let start = Instant::now();
    let tree = six_node_tree();
    let cond = sibling_softmax(&tree, &[0.0; 6]);
    let p = class_conditional(&tree, &cond);
    let expect = [
        (1u32, 0.5),
        (2, 0.5),
        (3, 0.25),
        (4, 0.25),
        (5, 0.125),
        (6, 0.125),
    ];
    for (id, want) in expect {
        let i = tree.index_of(id).unwrap();
        assert!(
            (p[i] - want).abs() < 1e-9,
            "node {id}: {} vs {want}",
            p[i]
        );
    }
    let frontier_sum: f64 = tree.frontier().iter().map(|&i| p[i]).sum();
    assert!((frontier_sum - 1.0).abs() < 1e-9);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(
        1,
        &format!("class-conditionals exact to 1e-9, frontier sum 1, {elapsed:?}"),
    );
}

#[test]
fn criterion_02_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut instances = 0usize;
    let mut worst = 0.0f64;

    // Per-pixel hierarchical CE gradients: all coordinates checked.
    for case in 0..60 {
        let tree = if case % 2 == 0 {
            six_node_tree()
        } else {
            random_tree(1000 + case as u64, rng.random_range(6..14), 4)
        };
        let n = tree.n_nodes();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let leaf = tree.frontier()[rng.random_range(0..tree.frontier().len())];
        let target = hard_target(&tree, leaf);
        let g = hier_ce_grad(&tree, &scores, &target);
        let h = 1e-4;
        let mut fd = vec![0.0; n];
        let mut s = scores.clone();
        for i in 0..n {
            s[i] = scores[i] + h;
            let hi = hier_ce_loss(&tree, &s, &target);
            s[i] = scores[i] - h;
            let lo = hier_ce_loss(&tree, &s, &target);
            s[i] = scores[i];
            fd[i] = (hi - lo) / (2.0 * h);
        }
        let err = max_rel_err(&g, &fd);
        worst = worst.max(err);
        assert!(err < 1e-4, "hier_ce_grad case {case}: rel err {err}");
        instances += 1;
    }

    // Total-loss gradients on 8x8 slice triples: a sampled coordinate
    // subset per instance plus all three plane-weight parameters.
    for case in 0..50 {
        let tree = if case % 2 == 0 {
            six_node_tree()
        } else {
            random_tree(2000 + case as u64, rng.random_range(6..12), 4)
        };
        let n = tree.n_nodes();
        let side = 8;
        let mk = |rng: &mut ChaCha8Rng| {
            let mut g = NodeGrid::zeros(side, side, n);
            for v in &mut g.data {
                *v = rng.random_range(-1.5..1.5);
            }
            g
        };
        let mut batch = PlanarBatch {
            axial: mk(&mut rng),
            coronal: mk(&mut rng),
            sagittal: mk(&mut rng),
            voxel: [
                rng.random_range(0..side),
                rng.random_range(0..side),
                rng.random_range(0..side),
            ],
        };
        let frontier = tree.frontier().to_vec();
        let mk_t = |rng: &mut ChaCha8Rng| {
            let mut g = NodeGrid::zeros(side, side, n);
            for px in 0..side * side {
                let leaf = frontier[rng.random_range(0..frontier.len())];
                let t = hard_target(&tree, leaf);
                g.data[px * n..(px + 1) * n].copy_from_slice(&t);
            }
            g
        };
        let targets = PlanarTargets {
            axial: mk_t(&mut rng),
            coronal: mk_t(&mut rng),
            sagittal: mk_t(&mut rng),
        };
        let weights = PlaneWeights {
            params: [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ],
        };
        let r = total_loss(&batch, &weights, &targets, &tree).unwrap();
        let h = 1e-4;
        let mut worst_case = 0.0f64;
        let len = side * side * n;
        fn slot(b: &mut PlanarBatch, plane: usize) -> &mut Vec<f64> {
            match plane {
                0 => &mut b.axial.data,
                1 => &mut b.coronal.data,
                _ => &mut b.sagittal.data,
            }
        }
        for _ in 0..48 {
            let plane = rng.random_range(0..3);
            let i = rng.random_range(0..len);
            let orig = slot(&mut batch, plane)[i];
            slot(&mut batch, plane)[i] = orig + h;
            let hi = total_loss(&batch, &weights, &targets, &tree).unwrap().loss;
            slot(&mut batch, plane)[i] = orig - h;
            let lo = total_loss(&batch, &weights, &targets, &tree).unwrap().loss;
            slot(&mut batch, plane)[i] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let an = match plane {
                0 => r.grad_axial.data[i],
                1 => r.grad_coronal.data[i],
                _ => r.grad_sagittal.data[i],
            };
            worst_case = worst_case.max((an - fd).abs() / an.abs().max(fd.abs()).max(1.0));
        }
        for pi in 0..3 {
            let mut wp = weights;
            wp.params[pi] += h;
            let hi = total_loss(&batch, &wp, &targets, &tree).unwrap().loss;
            wp.params[pi] -= 2.0 * h;
            let lo = total_loss(&batch, &wp, &targets, &tree).unwrap().loss;
            let fd = (hi - lo) / (2.0 * h);
            let an = r.grad_weight_params[pi];
            worst_case = worst_case.max((an - fd).abs() / an.abs().max(fd.abs()).max(1.0));
        }
        worst = worst.max(worst_case);
        assert!(worst_case < 1e-4, "total_loss case {case}: rel err {worst_case}");
        instances += 1;
    }
    let elapsed = start.elapsed();
    assert!(instances >= 100);
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    pass(
        2,
        &format!("{instances} instances, worst rel err {worst:.2e}, {elapsed:?}"),
    );
}

#[test]
fn criterion_03_flat_tree_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..12);
        let spec: Vec<(u32, Option<u32>, String)> = (1..=k as u32)
            .map(|id| (id, None, format!("c{id}")))
            .collect();
        let tree = LabelTree::build(
            spec.iter()
                .map(|(id, parent, name)| TreeRow {
                    id: *id,
                    parent: *parent,
                    name: name.clone(),
                })
                .collect(),
        )
        .unwrap();
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
        let label = rng.random_range(0..k);
        let mut target = vec![0.0; k];
        target[label] = 1.0;
        let hier = hier_ce_loss(&tree, &scores, &target);
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        let flat = lse - scores[label];
        worst = worst.max((hier - flat).abs());
        assert!((hier - flat).abs() < 1e-9);
    }
    pass(3, &format!("1000 instances, worst abs diff {worst:.2e}"));
}

/// Direct centered DFT used as the FFT oracle.
fn dft3_direct(v: &Volume) -> Vec<Complex64> {
    use std::f64::consts::PI;
    let d = v.header.dims;
    let c = [d[0] / 2, d[1] / 2, d[2] / 2];
    let mut out = vec![Complex64::default(); v.data.len()];
    for kz in 0..d[2] {
        for ky in 0..d[1] {
            for kx in 0..d[0] {
                let f = [
                    kx as f64 - c[0] as f64,
                    ky as f64 - c[1] as f64,
                    kz as f64 - c[2] as f64,
                ];
                let mut acc = Complex64::default();
                for z in 0..d[2] {
                    for y in 0..d[1] {
                        for x in 0..d[0] {
                            let phase = -2.0
                                * PI
                                * (f[0] * x as f64 / d[0] as f64
                                    + f[1] * y as f64 / d[1] as f64
                                    + f[2] * z as f64 / d[2] as f64);
                            acc += Complex64::new(phase.cos(), phase.sin()) * v.at(x, y, z);
                        }
                    }
                }
                out[kx + d[0] * (ky + d[1] * kz)] = acc;
            }
        }
    }
    out
}

#[test]
fn criterion_04_fft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    // Every dimension combination up to 8.
    for nx in 1..=8usize {
        for ny in 1..=8usize {
            for nz in 1..=8usize {
                let n = nx * ny * nz;
                let v = Volume::from_parts(
                    [nx, ny, nz],
                    [1.0; 3],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                );
                let fast = fft3_centered(&v);
                let direct = dft3_direct(&v);
                let num: f64 = fast
                    .data
                    .iter()
                    .zip(&direct)
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                let den: f64 = direct.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
                let rel = num / den.max(1e-300);
                worst = worst.max(rel);
                assert!(rel < 1e-9, "dims ({nx},{ny},{nz}): rel err {rel}");
            }
        }
    }
    // 64^3 round trip.
    let n = 64 * 64 * 64;
    let v = Volume::from_parts(
        [64; 3],
        [1.0; 3],
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    let back = ifft3_centered(&fft3_centered(&v));
    let num: f64 = v
        .data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = v.data.iter().map(|a| a * a).sum::<f64>().sqrt();
    let roundtrip = num / den;
    assert!(roundtrip < 1e-9, "64^3 roundtrip rel err {roundtrip}");
    pass(
        4,
        &format!("512 dft comparisons worst {worst:.2e}, 64^3 roundtrip {roundtrip:.2e}"),
    );
}

fn smooth_phantom(side: usize) -> Volume {
    let mut v = Volume::filled([side; 3], [1.0; 3], 0.0);
    let c = (side as f64 - 1.0) / 2.0;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let r2 = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)
                    + (z as f64 - c).powi(2))
                    / (c * c);
                v.set(x, y, z, (1.0 - r2).max(0.0));
            }
        }
    }
    v
}

#[test]
fn criterion_05_augmentation_identities() {
    let side = 16;
    let v = smooth_phantom(side);
    let mut labels = LabelVolume::from_parts([side; 3], [1.0; 3], vec![0; side * side * side]);
    for (i, val) in v.data.iter().enumerate() {
        if *val > 0.4 {
            labels.data[i] = 1;
        }
    }
    let max_diff = |a: &Volume, b: &Volume| {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    let (r, rl) = augment::rotate3d(&v, Some(&labels), [0.0; 3]);
    assert!(max_diff(&r, &v) < 1e-6);
    assert_eq!(rl.unwrap().data, labels.data);

    let g = brainparc::standardize::gamma_transform(&v, 1.0);
    assert!(max_diff(&g, &v) < 1e-6);

    let gn = augment::add_gaussian_noise(&v, 0.0, &mut rng);
    assert!(max_diff(&gn, &v) < 1e-6);
    let sn = augment::add_speckle_noise(&v, 0.0, &mut rng);
    assert!(max_diff(&sn, &v) < 1e-6);

    let gh = augment::ghosting(&v, 2, 1.0, &[0, 1, 2]);
    assert!(max_diff(&gh, &v) < 1e-6, "ghosting factor 1: {}", max_diff(&gh, &v));

    let (e, el) = augment::elastic_deform(&v, Some(&labels), 2.0, 0.0, &mut rng);
    assert!(max_diff(&e, &v) < 1e-6);
    assert_eq!(el.unwrap().data, labels.data);

    let (c, cl) = augment::crop_outside_box(&v, &labels, [0; 3], [side - 1; 3]);
    assert!(max_diff(&c, &v) < 1e-6);
    assert_eq!(cl.data, labels.data);

    let ring_full = augment::gibbs_ringing(&v, side / 2);
    assert!(max_diff(&ring_full, &v) < 1e-6, "full cutoff: {}", max_diff(&ring_full, &v));

    let mean = v.data.iter().sum::<f64>() / v.data.len() as f64;
    let ring_zero = augment::gibbs_ringing(&v, 0);
    let worst_mean = ring_zero
        .data
        .iter()
        .map(|x| (x - mean).abs())
        .fold(0.0, f64::max);
    assert!(worst_mean < 1e-6, "cutoff 0 vs mean: {worst_mean}");

    pass(5, "all neutral-parameter transforms are identities to 1e-6");
}

#[test]
fn criterion_06_weak_supervision_weights() {
    let sigma = fusion::default_sigma_mm(); // sigma^2 = 10
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = 0.0f64;
    for case in 0..3 {
        let dims = [16usize; 3];
        let n = dims[0] * dims[1] * dims[2];
        let mut labels = LabelVolume::from_parts(dims, [1.0; 3], vec![0; n]);
        for _ in 0..rng.random_range(3..10) {
            let idx = rng.random_range(0..n);
            labels.data[idx] = rng.random_range(1..5);
        }
        if !labels.has_foreground() {
            continue;
        }
        let wm = distance_weights(&labels, sigma).unwrap();
        // Brute-force all-pairs oracle.
        let fg: Vec<[usize; 3]> = (0..n)
            .filter(|&i| labels.data[i] != 0)
            .map(|i| [i % 16, (i / 16) % 16, i / 256])
            .collect();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let mut best = f64::INFINITY;
                    for f in &fg {
                        let d2 = (x as f64 - f[0] as f64).powi(2)
                            + (y as f64 - f[1] as f64).powi(2)
                            + (z as f64 - f[2] as f64).powi(2);
                        best = best.min(d2);
                    }
                    let expect = (-best / 20.0).exp();
                    let got = wm.at(x, y, z);
                    worst = worst.max((got - expect).abs());
                    assert!(
                        (got - expect).abs() < 1e-9,
                        "case {case} voxel ({x},{y},{z}): {got} vs {expect}"
                    );
                }
            }
        }
    }
    pass(6, &format!("w = exp(-d^2/20) matches all-pairs oracle, worst {worst:.2e}"));
}

#[test]
fn criterion_07_metrics_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = 8 * 8 * 8;
        let a = LabelVolume::from_parts(
            [8; 3],
            [1.0; 3],
            (0..n).map(|_| rng.random_range(0..2)).collect(),
        );
        let b = LabelVolume::from_parts(
            [8; 3],
            [1.0; 3],
            (0..n).map(|_| rng.random_range(0..2)).collect(),
        );
        // Brute-force voxel counting.
        let y = a.data.iter().filter(|&&v| v == 1).count();
        let t = b.data.iter().filter(|&&v| v == 1).count();
        let both = a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(x, y)| **x == 1 && **y == 1)
            .count();
        if y + t == 0 {
            continue;
        }
        let d = dsc(&a, &b, 1).unwrap();
        let v = vs(&a, &b, 1).unwrap();
        let d_expect = 2.0 * both as f64 / (y + t) as f64;
        let v_expect = 1.0 - (y as f64 - t as f64).abs() / (y + t) as f64;
        assert_eq!(d, d_expect, "case {case}");
        assert_eq!(v, v_expect, "case {case}");
        assert!(v >= d - 1e-15, "case {case}: VS {v} < DSC {d}");
    }
    // Exact rank-test values.
    let x = vec![2.0, 3.0, 4.0, 5.0, 6.0];
    let yv = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let (_, p) = wilcoxon_signed_rank(&x, &yv).unwrap();
    assert!((p - 0.0625).abs() < 1e-12, "wilcoxon p {p}");
    let (u, p) = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(u, 0.0);
    assert!((p - 0.1).abs() < 1e-12, "mann-whitney p {p}");
    pass(
        7,
        "100 DSC/VS pairs match counting exactly, Wilcoxon p=0.0625, Mann-Whitney p=0.1",
    );
}

struct TrainedPipeline {
    state: TrainState,
    tree: LabelTree,
    val: Vec<(Volume, LabelVolume)>,
    train_seconds: f64,
}

fn trained_pipeline() -> &'static TrainedPipeline {
    static PIPELINE: OnceLock<TrainedPipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let tree = brainparc::hierarchy::trees::phantom();
        let config = TrainConfig::default(); // seed 42
        let train_set = phantom_dataset(config.seed, 20, 32, &tree);
        let val = phantom_dataset(config.seed + 20, 5, 32, &tree);
        let start = Instant::now();
        let state = train::train(&train_set, &val, &tree, &config).expect("training succeeds");
        TrainedPipeline {
            state,
            tree,
            val,
            train_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_08_end_to_end_training() {
    let start = Instant::now();
    let p = trained_pipeline();
    let mut dsc_values = Vec::new();
    let mut agree = 0usize;
    let mut foreground = 0usize;
    for (volume, truth) in &p.val {
        let fused = segment_volume(
            volume,
            &p.state.backbone,
            &p.tree,
            PredictionMode::Fusion,
            &p.state.plane_weights,
            None,
        )
        .unwrap();
        let voted = segment_volume(
            volume,
            &p.state.backbone,
            &p.tree,
            PredictionMode::Vote,
            &p.state.plane_weights,
            None,
        )
        .unwrap();
        let report =
            brainparc::metrics::region_report(&fused, truth, &p.tree, None).unwrap();
        for r in &report.regions {
            dsc_values.push(r.dsc);
        }
        for i in 0..truth.data.len() {
            if truth.data[i] != 0 {
                foreground += 1;
                if fused.data[i] == voted.data[i] {
                    agree += 1;
                }
            }
        }
    }
    let mean_dsc = dsc_values.iter().sum::<f64>() / dsc_values.len() as f64;
    let agreement = agree as f64 / foreground as f64;
    let total_seconds = p.train_seconds + start.elapsed().as_secs_f64();
    assert!(
        mean_dsc >= 0.8,
        "held-out mean frontier DSC {mean_dsc:.4} < 0.8"
    );
    assert!(
        agreement >= 0.9,
        "fusion/vote agreement {agreement:.4} < 0.9"
    );
    assert!(
        total_seconds < 600.0,
        "end-to-end run took {total_seconds:.1} s"
    );
    pass(
        8,
        &format!(
            "mean frontier DSC {mean_dsc:.4}, fusion/vote agreement {agreement:.4}, \
             {:.1} s train + eval ({} iterations)",
            total_seconds, p.state.iterations_run
        ),
    );
}

#[test]
fn criterion_09_icv_stability_under_augmentation() {
    let p = trained_pipeline();
    let mut rng = ChaCha8Rng::seed_from_u64(990);
    let mut icv_original = Vec::new();
    let mut icv_perturbed = Vec::new();
    for i in 0..10 {
        let (volume, _) = generate_phantom(5000 + i, 32, &p.tree);
        let perturbed = train::perturbed_phantom(&volume, 1e-4, 5.0, &mut rng);
        for (v, out) in [
            (&volume, &mut icv_original),
            (&perturbed, &mut icv_perturbed),
        ] {
            let seg = segment_volume(
                v,
                &p.state.backbone,
                &p.tree,
                PredictionMode::Fusion,
                &p.state.plane_weights,
                None,
            )
            .unwrap();
            out.push(icv(&seg));
        }
    }
    let ba = bland_altman(&icv_perturbed, &icv_original).unwrap();
    let mean_icv = icv_original
        .iter()
        .chain(&icv_perturbed)
        .sum::<f64>()
        / 20.0;
    let span_frac = ba.loa_span() / mean_icv;
    assert!(
        span_frac < 0.05,
        "LoA span {:.1} mm^3 is {:.2}% of mean ICV {:.1}",
        ba.loa_span(),
        span_frac * 100.0,
        mean_icv
    );
    pass(
        9,
        &format!(
            "10 augmented pairs: LoA span {:.1} mm^3 = {:.2}% of mean ICV {:.0} mm^3",
            ba.loa_span(),
            span_frac * 100.0,
            mean_icv
        ),
    );
}
