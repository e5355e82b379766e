//! Evaluation stack: mask extraction, ARI, mBO, mIoU, Hungarian
//! alignment, and report aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::ops::bilinear_resize;
use crate::numerics::tensor::Tensor;

/// Dense integer labeling of an H×W grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "label_map",
                format!("{}x{} needs {} labels, got {}", height, width, height * width, labels.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn distinct(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Upsample per-slot maps [K, N] to H×W (bilinear, half-pixel centers)
/// and take the per-pixel argmax over slots; ties go to the lower slot
/// index.
pub fn masks_from_attention(a: &Tensor, height: usize, width: usize) -> Result<LabelMap> {
    if a.rank() != 2 {
        return Err(Error::shape("masks_from_attention", "map must be [K, N]"));
    }
    let (k_slots, n) = (a.rows(), a.cols());
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Config(format!(
            "token count {n} is not a perfect square"
        )));
    }
    if height % side != 0 || width % side != 0 {
        return Err(Error::Config(format!(
            "{height}x{width} not a multiple of the {side}x{side} token grid"
        )));
    }
    let mut upsampled = Vec::with_capacity(k_slots);
    for k in 0..k_slots {
        let row = &a.data()[k * n..(k + 1) * n];
        upsampled.push(bilinear_resize(row, side, side, height, width));
    }
    let mut labels = vec![0u32; height * width];
    for p in 0..height * width {
        let mut best = 0usize;
        let mut best_v = upsampled[0][p];
        for (k, plane) in upsampled.iter().enumerate().skip(1) {
            if plane[p] > best_v {
                best_v = plane[p];
                best = k;
            }
        }
        labels[p] = best as u32;
    }
    LabelMap::new(height, width, labels)
}

/// Identical contract applied to decoder alpha masks.
pub fn masks_from_alpha(alpha: &Tensor, height: usize, width: usize) -> Result<LabelMap> {
    masks_from_attention(alpha, height, width)
}

fn comb2(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index from the full contingency table over all pixels.
///
/// Degenerate case (single cluster on both sides): the partitions
/// necessarily coincide, so the score is 1 regardless of label values;
/// any other zero-denominator case scores 1 exactly when the table
/// matches its expectation.
pub fn ari(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(
            "ari",
            format!(
                "{}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        *table.entry((p, g)).or_insert(0) += 1;
        *rows.entry(p).or_insert(0) += 1;
        *cols.entry(g).or_insert(0) += 1;
    }
    let n = pred.len() as u64;
    let index: u128 = table.values().map(|&c| comb2(c)).sum();
    let sum_rows: u128 = rows.values().map(|&c| comb2(c)).sum();
    let sum_cols: u128 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if rows.len() == 1 && cols.len() == 1 {
        return Ok(1.0);
    }
    let expected = sum_rows as f64 * sum_cols as f64 / total as f64;
    let max_index = 0.5 * (sum_rows as f64 + sum_cols as f64);
    if (max_index - expected).abs() == 0.0 {
        // identical-partition edge (both sides fully agree by counts)
        return Ok(if index as f64 == expected { 1.0 } else { 0.0 });
    }
    Ok((index as f64 - expected) / (max_index - expected))
}

/// Minimum-cost perfect assignment (Jonker–Volgenant style potentials,
/// O(n³)). Rectangular inputs are padded with zeros internally; the
/// returned vector maps each row to its column.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Err(Error::shape("hungarian", "empty cost matrix"));
    }
    let cols = cost[0].len();
    for r in cost {
        if r.len() != cols {
            return Err(Error::shape("hungarian", "ragged cost matrix"));
        }
        for &v in r {
            if v.is_nan() {
                return Err(Error::Numeric("NaN cost in assignment".to_string()));
            }
        }
    }
    let n = rows.max(cols);
    let at = |r: usize, c: usize| -> f64 {
        if r < rows && c < cols {
            cost[r][c]
        } else {
            0.0
        }
    };
    // potentials over padded square matrix, 1-indexed scan arrays
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Pixel sets per label.
fn region_masks(map: &LabelMap) -> Vec<(u32, Vec<bool>)> {
    map.distinct()
        .into_iter()
        .map(|label| {
            (
                label,
                map.labels.iter().map(|&l| l == label).collect::<Vec<bool>>(),
            )
        })
        .collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean best overlap: for every non-background ground-truth region, the
/// maximum IoU over all predicted regions; averaged over those regions.
pub fn mbo(pred: &LabelMap, gt: &LabelMap, gt_background: u32) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape("mbo", "dimension mismatch"));
    }
    let preds = region_masks(pred);
    let gts: Vec<_> = region_masks(gt)
        .into_iter()
        .filter(|(l, _)| *l != gt_background)
        .collect();
    if gts.is_empty() {
        return Err(Error::Data(
            "ground truth contains only background".to_string(),
        ));
    }
    let mut total = 0.0;
    for (_, gmask) in &gts {
        let best = preds
            .iter()
            .map(|(_, pmask)| iou(pmask, gmask))
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / gts.len() as f64)
}

/// Hungarian-aligned mean IoU over all regions (background included).
///
/// The IoU matrix is padded square; unmatched regions on either side
/// contribute zero, and the mean runs over max(K_pred, K_gt) so region
/// collapse is penalized. Also returns the pred-region → gt-region label
/// assignment.
pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<(f64, Vec<(u32, u32)>)> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape("miou", "dimension mismatch"));
    }
    let preds = region_masks(pred);
    let gts = region_masks(gt);
    let (kp, kg) = (preds.len(), gts.len());
    let k = kp.max(kg);
    let mut cost = vec![vec![0.0f64; k]; k];
    for (i, (_, pm)) in preds.iter().enumerate() {
        for (j, (_, gm)) in gts.iter().enumerate() {
            cost[i][j] = -iou(pm, gm);
        }
    }
    let assignment = hungarian(&cost)?;
    let mut total = 0.0;
    let mut pairs = Vec::new();
    for (i, &j) in assignment.iter().enumerate() {
        if i < kp && j < kg {
            total += -cost[i][j];
            pairs.push((preds[i].0, gts[j].0));
        }
    }
    Ok((total / k as f64, pairs))
}

/// One evaluated scene.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SceneMetrics {
    pub index: usize,
    pub ari: f64,
    pub mbo: f64,
    pub miou: f64,
    /// Predicted-region → ground-truth-region label pairs from the mIoU
    /// alignment.
    pub assignment: Vec<(u32, u32)>,
}

/// Aggregated evaluation report; the JSON layout is stable for diffing.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub config_id: String,
    pub n_scenes: usize,
    pub ari: f64,
    pub mbo: f64,
    pub miou: f64,
    pub per_scene: Vec<SceneMetrics>,
}

/// Arithmetic means over per-scene rows.
pub fn aggregate(config_id: &str, rows: Vec<SceneMetrics>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Data("no scenes to aggregate".to_string()));
    }
    let n = rows.len() as f64;
    let ari = rows.iter().map(|r| r.ari).sum::<f64>() / n;
    let mbo = rows.iter().map(|r| r.mbo).sum::<f64>() / n;
    let miou = rows.iter().map(|r| r.miou).sum::<f64>() / n;
    Ok(MetricsReport {
        config_id: config_id.to_string(),
        n_scenes: rows.len(),
        ari,
        mbo,
        miou,
        per_scene: rows,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
