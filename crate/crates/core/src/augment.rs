//! Seedable 3D augmentation transforms simulating MRI variation and
//! acquisition artifacts.
//!
//! All transforms operate on standardized volumes (cubic grid,
//! intensities in [0, 1]) and clamp their output back to [0, 1].
//! Geometric transforms take an optional label volume and keep it
//! aligned using nearest-neighbor interpolation. Every transform is
//! deterministic given its parameters and the caller's RNG state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft::{fft3_centered, ifft3_centered};
use crate::standardize::gamma_transform;
use crate::volume::{flat_index, LabelVolume, Volume};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("label volume has no foreground voxels")]
    EmptyForeground,
}

/// Rotate about the grid center, axis order X then Y then Z, angles in
/// degrees. Linear interpolation for the intensity volume, nearest for
/// labels; out-of-grid samples fill with 0.
pub fn rotate3d(
    volume: &Volume,
    labels: Option<&LabelVolume>,
    angles_deg: [f64; 3],
) -> (Volume, Option<LabelVolume>) {
    for a in angles_deg {
        assert!(a.abs() <= 90.0, "rotation angle out of sanity range");
    }
    let [ax, ay, az] = angles_deg.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    // R = Rz * Ry * Rx; output voxel p samples the source at R^T (p - c) + c.
    let r = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ];
    let d = volume.header.dims;
    let c = [
        (d[0] as f64 - 1.0) / 2.0,
        (d[1] as f64 - 1.0) / 2.0,
        (d[2] as f64 - 1.0) / 2.0,
    ];
    let source_of = |x: usize, y: usize, z: usize| -> [f64; 3] {
        let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        [
            r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2] + c[0],
            r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2] + c[1],
            r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2] + c[2],
        ]
    };
    let mut out = Volume {
        header: volume.header.clone(),
        data: vec![0.0; volume.data.len()],
    };
    let mut out_labels = labels.map(|l| LabelVolume {
        header: l.header.clone(),
        data: vec![0; l.data.len()],
    });
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let q = source_of(x, y, z);
                let idx = flat_index(d, x, y, z);
                out.data[idx] = volume.sample_trilinear(q, 0.0);
                if let (Some(ol), Some(l)) = (out_labels.as_mut(), labels) {
                    ol.data[idx] = l.sample_nearest(q, 0);
                }
            }
        }
    }
    (out, out_labels)
}

/// Zero everything outside an inclusive per-axis box.
pub fn crop_outside_box(
    volume: &Volume,
    labels: &LabelVolume,
    lo: [usize; 3],
    hi: [usize; 3],
) -> (Volume, LabelVolume) {
    let d = volume.header.dims;
    let mut v = volume.clone();
    let mut l = labels.clone();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let inside = x >= lo[0]
                    && x <= hi[0]
                    && y >= lo[1]
                    && y <= hi[1]
                    && z >= lo[2]
                    && z <= hi[2];
                if !inside {
                    let idx = flat_index(d, x, y, z);
                    v.data[idx] = 0.0;
                    l.data[idx] = 0;
                }
            }
        }
    }
    (v, l)
}

/// Tight inclusive bounding box of the labeled foreground.
pub fn foreground_bbox(labels: &LabelVolume) -> Option<([usize; 3], [usize; 3])> {
    let d = labels.header.dims;
    let mut lo = d;
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if labels.at(x, y, z) != 0 {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    any.then_some((lo, hi))
}

/// Zero everything outside a random box sampled between the tight
/// foreground bounding box and the full extent, per axis.
pub fn random_crop_brain(
    volume: &Volume,
    labels: &LabelVolume,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, LabelVolume), AugmentError> {
    let (blo, bhi) = foreground_bbox(labels).ok_or(AugmentError::EmptyForeground)?;
    let d = volume.header.dims;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        lo[a] = rng.random_range(0..=blo[a]);
        hi[a] = rng.random_range(bhi[a]..d[a]);
    }
    Ok(crop_outside_box(volume, labels, lo, hi))
}

/// Additive zero-mean Gaussian noise, clamped to [0, 1].
pub fn add_gaussian_noise(volume: &Volume, variance: f64, rng: &mut ChaCha8Rng) -> Volume {
    assert!(variance >= 0.0);
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
    let data = volume
        .data
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Volume {
        header: volume.header.clone(),
        data,
    }
}

/// Multiplicative speckle noise `v + v*n`, clamped to [0, 1].
pub fn add_speckle_noise(volume: &Volume, variance: f64, rng: &mut ChaCha8Rng) -> Volume {
    assert!(variance >= 0.0);
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
    let data = volume
        .data
        .iter()
        .map(|&v| (v + v * normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Volume {
        header: volume.header.clone(),
        data,
    }
}

/// Multiplicative elliptic gradient field.
///
/// On the integer grid 1..=S the field is `1 - E(p)` with
/// `E(p) = sum_axis ((p_axis - center_axis) / radius)^2`, so the
/// multiplier is 1 at the center and falls off radially; the product is
/// clamped to [0, 1].
pub fn bias_field(volume: &Volume, center: [f64; 3], radius: f64) -> Volume {
    assert!(radius > 0.0);
    let d = volume.header.dims;
    let mut data = vec![0.0; volume.data.len()];
    for z in 0..d[2] {
        let ez = ((z as f64 + 1.0 - center[2]) / radius).powi(2);
        for y in 0..d[1] {
            let ey = ((y as f64 + 1.0 - center[1]) / radius).powi(2);
            for x in 0..d[0] {
                let ex = ((x as f64 + 1.0 - center[0]) / radius).powi(2);
                let f = 1.0 - (ex + ey + ez);
                let idx = flat_index(d, x, y, z);
                data[idx] = (volume.data[idx] * f).clamp(0.0, 1.0);
            }
        }
    }
    Volume {
        header: volume.header.clone(),
        data,
    }
}

/// Gibbs ringing: zero all centered k-space components farther than
/// `cutoff` bins from the center along any axis, then invert.
pub fn gibbs_ringing(volume: &Volume, cutoff: usize) -> Volume {
    let mut k = fft3_centered(volume);
    let d = k.dims();
    let c = k.center();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let far = [x, y, z]
                    .iter()
                    .zip(&c)
                    .any(|(&i, &ci)| (i as i64 - ci as i64).unsigned_abs() as usize > cutoff);
                if far {
                    let idx = k.index(x, y, z);
                    k.data[idx] = Default::default();
                }
            }
        }
    }
    let mut out = ifft3_centered(&k);
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Ghosting: attenuate every `n`-th k-space plane along the selected
/// axes by `factor`. The comb is anchored at the center so the DC plane
/// itself is never attenuated.
pub fn ghosting(volume: &Volume, n: usize, factor: f64, axes: &[usize]) -> Volume {
    assert!(n >= 2, "ghost period must be at least 2");
    assert!(factor > 0.0 && factor <= 1.0);
    let mut k = fft3_centered(volume);
    let d = k.dims();
    let c = k.center();
    for &axis in axes {
        assert!(axis < 3);
        for i in 0..d[axis] {
            let rel = i as i64 - c[axis] as i64;
            if rel.rem_euclid(n as i64) != 0 || i == c[axis] {
                continue;
            }
            // Attenuate the whole plane at index i along `axis`.
            let (oa, ob) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for j in 0..d[ob] {
                for l in 0..d[oa] {
                    let mut idx = [0usize; 3];
                    idx[axis] = i;
                    idx[oa] = l;
                    idx[ob] = j;
                    let flat = k.index(idx[0], idx[1], idx[2]);
                    k.data[flat] *= factor;
                }
            }
        }
    }
    let mut out = ifft3_centered(&k);
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Normalized Gaussian kernel of full size `2*ceil(2*sigma) + 1`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (2.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for w in &mut k {
        *w /= s;
    }
    k
}

/// Separable 1D convolution along one axis with edge replication.
fn smooth_axis(data: &mut Vec<f64>, dims: [usize; 3], axis: usize, kernel: &[f64]) {
    let half = (kernel.len() / 2) as i64;
    let n = dims[axis] as i64;
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut line = vec![0.0; dims[axis]];
    let mut out = vec![0.0; data.len()];
    for j in 0..dims[ob] {
        for i in 0..dims[oa] {
            for t in 0..dims[axis] {
                let mut idx = [0usize; 3];
                idx[axis] = t;
                idx[oa] = i;
                idx[ob] = j;
                line[t] = data[flat_index(dims, idx[0], idx[1], idx[2])];
            }
            for t in 0..n {
                let mut acc = 0.0;
                for (ki, &w) in kernel.iter().enumerate() {
                    let src = (t + ki as i64 - half).clamp(0, n - 1) as usize;
                    acc += w * line[src];
                }
                let mut idx = [0usize; 3];
                idx[axis] = t as usize;
                idx[oa] = i;
                idx[ob] = j;
                out[flat_index(dims, idx[0], idx[1], idx[2])] = acc;
            }
        }
    }
    *data = out;
}

/// Elastic deformation: three i.i.d. uniform[-1, 1] displacement fields,
/// Gaussian-smoothed with bandwidth `sigma` (kernel size 2*ceil(2s)+1),
/// scaled by `alpha`, added to the identity grid.
pub fn elastic_deform(
    volume: &Volume,
    labels: Option<&LabelVolume>,
    sigma: f64,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> (Volume, Option<LabelVolume>) {
    assert!(sigma > 0.0 && alpha >= 0.0);
    let d = volume.header.dims;
    let total = volume.data.len();
    let mut fields: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..total).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let kernel = gaussian_kernel(sigma);
    for field in &mut fields {
        for axis in 0..3 {
            smooth_axis(field, d, axis, &kernel);
        }
    }
    let mut out = Volume {
        header: volume.header.clone(),
        data: vec![0.0; total],
    };
    let mut out_labels = labels.map(|l| LabelVolume {
        header: l.header.clone(),
        data: vec![0; total],
    });
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let idx = flat_index(d, x, y, z);
                let q = [
                    x as f64 + alpha * fields[0][idx],
                    y as f64 + alpha * fields[1][idx],
                    z as f64 + alpha * fields[2][idx],
                ];
                out.data[idx] = volume.sample_trilinear(q, 0.0);
                if let (Some(ol), Some(l)) = (out_labels.as_mut(), labels) {
                    ol.data[idx] = l.sample_nearest(q, 0);
                }
            }
        }
    }
    (out, out_labels)
}

/// Inclusive sampling range `[low, high]`.
pub type Range = [f64; 2];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CropParams {
    pub enabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationParams {
    pub enabled: bool,
    pub angle_deg: Range,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticParams {
    pub enabled: bool,
    pub sigma: Range,
    pub alpha: Range,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasParams {
    pub enabled: bool,
    pub center: Range,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaParams {
    pub enabled: bool,
    pub range: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Speckle,
    /// Pick one of the two at random per application.
    Either,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub enabled: bool,
    pub variance: Range,
    pub kind: NoiseKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RingingParams {
    pub enabled: bool,
    /// Retained half-band, in k-space bins from the center.
    pub cutoff: [u32; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GhostingParams {
    pub enabled: bool,
    pub period: [u32; 2],
    pub factor: Range,
    pub axes: Vec<usize>,
}

/// Parameter ranges for the augmentation pipeline, serializable as TOML.
///
/// Transforms apply in a fixed order: crop, rotation, elastic, bias,
/// gamma, noise, ringing, ghosting. Each samples its parameters from the
/// configured ranges using the pipeline RNG, so a run is fully
/// determined by `(config, seed)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub seed: u64,
    pub crop: CropParams,
    pub rotation: RotationParams,
    pub elastic: ElasticParams,
    pub bias: BiasParams,
    pub gamma: GammaParams,
    pub noise: NoiseParams,
    pub ringing: RingingParams,
    pub ghosting: GhostingParams,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { enabled: true }
    }
}
impl Default for RotationParams {
    fn default() -> Self {
        RotationParams {
            enabled: true,
            angle_deg: [-10.0, 10.0],
        }
    }
}
impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams {
            enabled: true,
            sigma: [20.0, 30.0],
            alpha: [200.0, 500.0],
        }
    }
}
impl Default for BiasParams {
    fn default() -> Self {
        BiasParams {
            enabled: true,
            center: [1.0, 256.0],
            radius: 256.0,
        }
    }
}
impl Default for GammaParams {
    fn default() -> Self {
        GammaParams {
            enabled: true,
            range: [0.8, 1.2],
        }
    }
}
impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            enabled: true,
            variance: [0.0, 1e-4],
            kind: NoiseKind::Either,
        }
    }
}
impl Default for RingingParams {
    fn default() -> Self {
        RingingParams {
            enabled: true,
            cutoff: [90, 120],
        }
    }
}
impl Default for GhostingParams {
    fn default() -> Self {
        GhostingParams {
            enabled: true,
            period: [2, 4],
            factor: [0.85, 0.95],
            axes: vec![0, 1, 2],
        }
    }
}
impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            seed: 0,
            crop: Default::default(),
            rotation: Default::default(),
            elastic: Default::default(),
            bias: Default::default(),
            gamma: Default::default(),
            noise: Default::default(),
            ringing: Default::default(),
            ghosting: Default::default(),
        }
    }
}

impl AugmentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn sample(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    assert!(r[0] <= r[1], "range must be nonempty");
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn sample_int(rng: &mut ChaCha8Rng, r: [u32; 2]) -> u32 {
    assert!(r[0] <= r[1], "range must be nonempty");
    rng.random_range(r[0]..=r[1])
}

/// Apply the configured pipeline to a volume (and its labels) with an
/// explicit RNG. Crop is skipped when no labels are supplied.
pub fn apply_pipeline(
    config: &AugmentConfig,
    volume: &Volume,
    labels: Option<&LabelVolume>,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Option<LabelVolume>), AugmentError> {
    let mut v = volume.clone();
    let mut l = labels.cloned();

    if config.crop.enabled {
        if let Some(lab) = l.as_ref() {
            let (cv, cl) = random_crop_brain(&v, lab, rng)?;
            v = cv;
            l = Some(cl);
        }
    }
    if config.rotation.enabled {
        let angles = [
            sample(rng, config.rotation.angle_deg),
            sample(rng, config.rotation.angle_deg),
            sample(rng, config.rotation.angle_deg),
        ];
        let (rv, rl) = rotate3d(&v, l.as_ref(), angles);
        v = rv;
        l = rl.or(l);
    }
    if config.elastic.enabled {
        let sigma = sample(rng, config.elastic.sigma);
        let alpha = sample(rng, config.elastic.alpha);
        let (ev, el) = elastic_deform(&v, l.as_ref(), sigma, alpha, rng);
        v = ev;
        l = el.or(l);
    }
    if config.bias.enabled {
        let center = [
            sample(rng, config.bias.center),
            sample(rng, config.bias.center),
            sample(rng, config.bias.center),
        ];
        v = bias_field(&v, center, config.bias.radius);
    }
    if config.gamma.enabled {
        let gamma = sample(rng, config.gamma.range);
        v = gamma_transform(&v, gamma);
    }
    if config.noise.enabled {
        let variance = sample(rng, config.noise.variance);
        let speckle = match config.noise.kind {
            NoiseKind::Gaussian => false,
            NoiseKind::Speckle => true,
            NoiseKind::Either => rng.random_bool(0.5),
        };
        v = if speckle {
            add_speckle_noise(&v, variance, rng)
        } else {
            add_gaussian_noise(&v, variance, rng)
        };
    }
    if config.ringing.enabled {
        let cutoff = sample_int(rng, config.ringing.cutoff);
        v = gibbs_ringing(&v, cutoff as usize);
    }
    if config.ghosting.enabled {
        // Each axis is modulated with its own period and factor.
        for &axis in &config.ghosting.axes {
            let n = sample_int(rng, config.ghosting.period) as usize;
            let factor = sample(rng, config.ghosting.factor);
            v = ghosting(&v, n, factor, &[axis]);
        }
    }
    Ok((v, l))
}
