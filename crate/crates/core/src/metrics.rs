//! Segmentation evaluation: overlap and volume similarity, rank tests
//! with exact small-sample p-values, Bland-Altman agreement, ICV and
//! annual volume change.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::hierarchy::LabelTree;
use crate::volume::LabelVolume;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("region {region}: both masks empty, metric undefined")]
    BothEmpty { region: u32 },
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("input lengths differ or are too short")]
    LengthMismatch,
    #[error("baseline volume is zero")]
    ZeroBaseline,
}

fn check_dims(pred: &LabelVolume, truth: &LabelVolume) -> Result<(), MetricsError> {
    if pred.header.dims != truth.header.dims {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.header.dims, truth.header.dims
        )));
    }
    Ok(())
}

fn region_counts(pred: &LabelVolume, truth: &LabelVolume, region: u32) -> (usize, usize, usize) {
    let mut y = 0usize;
    let mut t = 0usize;
    let mut both = 0usize;
    for (p, q) in pred.data.iter().zip(&truth.data) {
        let in_p = *p == region;
        let in_t = *q == region;
        y += in_p as usize;
        t += in_t as usize;
        both += (in_p && in_t) as usize;
    }
    (y, t, both)
}

/// Dice similarity coefficient `2|Y intersect T| / (|Y| + |T|)`.
pub fn dsc(pred: &LabelVolume, truth: &LabelVolume, region: u32) -> Result<f64, MetricsError> {
    check_dims(pred, truth)?;
    let (y, t, both) = region_counts(pred, truth, region);
    if y + t == 0 {
        return Err(MetricsError::BothEmpty { region });
    }
    Ok(2.0 * both as f64 / (y + t) as f64)
}

/// Volumetric similarity `1 - ||Y| - |T|| / (|Y| + |T|)`.
pub fn vs(pred: &LabelVolume, truth: &LabelVolume, region: u32) -> Result<f64, MetricsError> {
    check_dims(pred, truth)?;
    let (y, t, _) = region_counts(pred, truth, region);
    if y + t == 0 {
        return Err(MetricsError::BothEmpty { region });
    }
    Ok(1.0 - (y as f64 - t as f64).abs() / (y + t) as f64)
}

/// Average ranks (1-based) with ties sharing the mean rank; also returns
/// the tie group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for k in i..j {
            ranks[order[k]] = avg;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Largest total sample size handled by exact enumeration.
pub const EXACT_ENUMERATION_LIMIT: usize = 12;

/// Visit every k-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    debug_assert!(k >= 1 && k <= n);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k as i64 - 1;
        while i >= 0 && idx[i as usize] == i as usize + n - k {
            i -= 1;
        }
        if i < 0 {
            return;
        }
        let i = i as usize;
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; at least 5 pairs must remain. Returns
/// `(min(W+, W-), p)`: exact p by enumerating all 2^n sign patterns for
/// n <= 12, otherwise a normal approximation with tie correction and
/// continuity correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<(f64, f64), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(MetricsError::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(MetricsError::InsufficientData(format!(
            "{n} nonzero differences, need at least 5"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let p = if n <= EXACT_ENUMERATION_LIMIT {
        // Conditional on the observed ranks, enumerate all sign patterns.
        let mut le = 0usize;
        let mut ge = 0usize;
        let patterns = 1usize << n;
        for mask in 0..patterns {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    w += r;
                }
            }
            if w <= w_plus + 1e-12 {
                le += 1;
            }
            if w >= w_plus - 1e-12 {
                ge += 1;
            }
        }
        let tail = le.min(ge) as f64 / patterns as f64;
        (2.0 * tail).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let cc = 0.5 * (w_plus - mean).signum();
        let z = (w_plus - mean - cc) / var.sqrt();
        normal_two_sided(z)
    };
    Ok((statistic, p))
}

/// Two-sided Mann-Whitney U test on two independent samples.
///
/// Returns `(U of the first sample, p)`: exact p by enumerating all rank
/// assignments when `n_x + n_y <= 12`, otherwise a tie-corrected normal
/// approximation with continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<(f64, f64), MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::InsufficientData(
            "both samples must be nonempty".into(),
        ));
    }
    let nx = x.len();
    let ny = y.len();
    let pooled: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let r_x: f64 = ranks[..nx].iter().sum();
    let u = r_x - (nx * (nx + 1)) as f64 / 2.0;

    let n = nx + ny;
    let p = if n <= EXACT_ENUMERATION_LIMIT {
        // Enumerate which pooled positions belong to x.
        let mut le = 0usize;
        let mut ge = 0usize;
        let mut total = 0usize;
        for_each_combination(n, nx, |idx| {
            let r: f64 = idx.iter().map(|&i| ranks[i]).sum();
            let u_perm = r - (nx * (nx + 1)) as f64 / 2.0;
            total += 1;
            if u_perm <= u + 1e-12 {
                le += 1;
            }
            if u_perm >= u - 1e-12 {
                ge += 1;
            }
        });
        let tail = le.min(ge) as f64 / total as f64;
        (2.0 * tail).min(1.0)
    } else {
        let nf = n as f64;
        let mean = (nx * ny) as f64 / 2.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>()
            / (nf * (nf - 1.0));
        let var = (nx * ny) as f64 / 12.0 * ((nf + 1.0) - tie_term);
        let cc = 0.5 * (u - mean).signum();
        let z = (u - mean - cc) / var.sqrt();
        normal_two_sided(z)
    };
    Ok((u, p))
}

/// Bland-Altman agreement summary between two paired measurements.
#[derive(Debug, Clone)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Per-pair (mean, difference) points for plotting.
    pub points: Vec<(f64, f64)>,
}

impl BlandAltman {
    /// Width of the 95% limits of agreement.
    pub fn loa_span(&self) -> f64 {
        self.loa_high - self.loa_low
    }

    /// Two-column export: mean <TAB> difference.
    pub fn points_tsv(&self) -> String {
        let mut out = String::from("mean\tdiff\n");
        for (m, d) in &self.points {
            out.push_str(&format!("{m}\t{d}\n"));
        }
        out
    }
}

/// Bland-Altman analysis of `a - b` with 95% limits of agreement
/// `mean +/- 1.96 * SD` (sample SD, n-1 denominator).
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::LengthMismatch);
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let points = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x + y) / 2.0, x - y))
        .collect();
    Ok(BlandAltman {
        mean_diff: mean,
        sd_diff: sd,
        loa_low: mean - 1.96 * sd,
        loa_high: mean + 1.96 * sd,
        points,
    })
}

/// Intracranial volume in mm^3: every non-background voxel (cranial
/// cavity included) times the voxel volume.
pub fn icv(labels: &LabelVolume) -> f64 {
    let fg = labels.data.iter().filter(|&&l| l != 0).count();
    fg as f64 * labels.header.voxel_volume()
}

/// Annual percentage volume change between a baseline and a follow-up.
pub fn annual_pct_change(
    vol_baseline: f64,
    vol_followup: f64,
    years: f64,
) -> Result<f64, MetricsError> {
    if vol_baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    assert!(years > 0.0, "years must be positive");
    Ok(100.0 * (vol_followup - vol_baseline) / (vol_baseline * years))
}

/// Per-region evaluation row.
#[derive(Debug, Clone)]
pub struct RegionStats {
    pub id: u32,
    pub name: String,
    pub dsc: f64,
    pub vs: f64,
    pub pred_volume_mm3: f64,
    pub true_volume_mm3: f64,
}

/// Region table plus mean/SD summaries; regions where both masks are
/// empty are listed separately and excluded from the summaries.
#[derive(Debug, Clone)]
pub struct RegionReport {
    pub regions: Vec<RegionStats>,
    pub undefined: Vec<u32>,
    pub mean_dsc: f64,
    pub sd_dsc: f64,
    pub mean_vs: f64,
    pub sd_vs: f64,
}

impl RegionReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tname\tdsc\tvs\tpred_volume_mm3\ttrue_volume_mm3\n");
        for r in &self.regions {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.3}\t{:.3}\n",
                r.id, r.name, r.dsc, r.vs, r.pred_volume_mm3, r.true_volume_mm3
            ));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "regions: {}\ndsc: {:.4} +/- {:.4}\nvs: {:.4} +/- {:.4}\n",
            self.regions.len(),
            self.mean_dsc,
            self.sd_dsc,
            self.mean_vs,
            self.sd_vs
        );
        if !self.undefined.is_empty() {
            out.push_str(&format!("undefined (both empty): {:?}\n", self.undefined));
        }
        out
    }
}

/// Optional restriction/remap of evaluated regions: each entry maps a
/// truth region id to the prediction id that should be compared to it.
#[derive(Debug, Clone, Default)]
pub struct RegionMapping {
    pub entries: Vec<(u32, u32)>,
}

impl RegionMapping {
    /// Parse `truth_id[<TAB>pred_id]` rows; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut entries = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let truth: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MetricsError::ShapeMismatch(format!("bad mapping row {line:?}")))?;
            let pred: u32 = match parts.next() {
                Some(s) => s
                    .parse()
                    .map_err(|_| MetricsError::ShapeMismatch(format!("bad mapping row {line:?}")))?,
                None => truth,
            };
            entries.push((truth, pred));
        }
        Ok(RegionMapping { entries })
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Evaluate every non-background frontier region of the tree (or the
/// mapped subset) and summarize.
pub fn region_report(
    pred: &LabelVolume,
    truth: &LabelVolume,
    tree: &LabelTree,
    mapping: Option<&RegionMapping>,
) -> Result<RegionReport, MetricsError> {
    check_dims(pred, truth)?;
    let voxel_mm3 = truth.header.voxel_volume();
    let pairs: Vec<(u32, u32)> = match mapping {
        Some(m) => m.entries.clone(),
        None => {
            let mut ids = tree.frontier_ids();
            ids.sort_unstable();
            ids.into_iter().filter(|&id| id != 0).map(|id| (id, id)).collect()
        }
    };
    let mut regions = Vec::new();
    let mut undefined = Vec::new();
    for (truth_id, pred_id) in pairs {
        let mut y = 0usize;
        let mut t = 0usize;
        let mut both = 0usize;
        for (p, q) in pred.data.iter().zip(&truth.data) {
            let in_p = *p == pred_id;
            let in_t = *q == truth_id;
            y += in_p as usize;
            t += in_t as usize;
            both += (in_p && in_t) as usize;
        }
        if y + t == 0 {
            undefined.push(truth_id);
            continue;
        }
        let name = tree
            .index_of(truth_id)
            .map(|i| tree.node_name(i).to_string())
            .unwrap_or_else(|| format!("region-{truth_id}"));
        regions.push(RegionStats {
            id: truth_id,
            name,
            dsc: 2.0 * both as f64 / (y + t) as f64,
            vs: 1.0 - (y as f64 - t as f64).abs() / (y + t) as f64,
            pred_volume_mm3: y as f64 * voxel_mm3,
            true_volume_mm3: t as f64 * voxel_mm3,
        });
    }
    let (mean_dsc, sd_dsc) = mean_sd(&regions.iter().map(|r| r.dsc).collect::<Vec<_>>());
    let (mean_vs, sd_vs) = mean_sd(&regions.iter().map(|r| r.vs).collect::<Vec<_>>());
    Ok(RegionReport {
        regions,
        undefined,
        mean_dsc,
        sd_dsc,
        mean_vs,
        sd_vs,
    })
}
