//! Segmentation quality: pixel confusion counts, Dice, mean IoU over the
//! two classes, and average Hausdorff distance between mask boundaries.
//!
//! Conventions:
//! - Dice is 1 when both masks are empty.
//! - A class whose IoU denominator is zero contributes 1 to the mean IoU.
//! - Boundaries use 4-connectivity; the image border counts as background.
//! - Average Hausdorff is undefined when either boundary is empty. It is
//!   then reported as `None` and left out of the set mean.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Pixelwise counts of a prediction against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    check_extents(pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn check_extents(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "mask extents differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2·tp / (2·tp + fp + fn)`.
pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// Foreground IoU `tp / (tp + fp + fn)`.
pub fn iou_foreground(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// Background IoU `tn / (tn + fp + fn)`.
pub fn iou_background(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp + c.fn_)
}

pub fn miou(c: &ConfusionCounts) -> f64 {
    (iou_foreground(c) + iou_background(c)) / 2.0
}

/// Pixel coordinate `(row, col)`.
pub type Point = (usize, usize);

/// Foreground pixels with a background or out-of-frame 4-neighbour, in
/// row-major order.
pub fn boundary(mask: &BinaryMask) -> Vec<Point> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// How the two directed mean distances are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HausdorffMode {
    /// `max(d(A→B), d(B→A))`.
    #[default]
    SymmetricMax,
    /// `d(A→B)` only: the mean distance from each prediction boundary
    /// pixel to the nearest truth boundary pixel.
    Directed,
}

impl std::str::FromStr for HausdorffMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric-max" | "symmetric" => Ok(Self::SymmetricMax),
            "directed" => Ok(Self::Directed),
            _ => Err(Error::Value(format!("unknown hausdorff mode {s:?} (symmetric-max, directed)"))),
        }
    }
}

/// Symmetric average Hausdorff distance in pixels; `None` if either set is empty.
pub fn average_hausdorff(a: &[Point], b: &[Point]) -> Option<f64> {
    average_hausdorff_with(a, b, HausdorffMode::SymmetricMax)
}

pub fn average_hausdorff_with(a: &[Point], b: &[Point], mode: HausdorffMode) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ab = directed_mean(a, b);
    Some(match mode {
        HausdorffMode::SymmetricMax => ab.max(directed_mean(b, a)),
        HausdorffMode::Directed => ab,
    })
}

/// Mean over `a` of the distance to the nearest point of `b`.
fn directed_mean(a: &[Point], b: &[Point]) -> f64 {
    let rows = a.iter().chain(b).map(|p| p.0).max().unwrap_or(0) + 1;
    let cols = a.iter().chain(b).map(|p| p.1).max().unwrap_or(0) + 1;
    let sum: f64 = if a.len().saturating_mul(b.len()) <= rows.saturating_mul(cols) {
        a.iter()
            .map(|&p| b.iter().map(|&q| sq_dist(p, q)).min().unwrap_or(0) as f64)
            .map(f64::sqrt)
            .sum()
    } else {
        let field = squared_distance_field(b, rows, cols);
        a.iter().map(|&(r, c)| (field[r * cols + c] as f64).sqrt()).sum()
    };
    sum / a.len() as f64
}

fn sq_dist(p: Point, q: Point) -> u64 {
    let dr = p.0.abs_diff(q.0) as u64;
    let dc = p.1.abs_diff(q.1) as u64;
    dr * dr + dc * dc
}

/// Exact squared Euclidean distance to the nearest seed for every cell of
/// a `rows × cols` grid (separable lower-envelope transform, integer arithmetic).
fn squared_distance_field(seeds: &[Point], rows: usize, cols: usize) -> Vec<u64> {
    const FAR: u64 = u64::MAX / 4;
    // pass 1: distance along each row to the nearest seed in that row
    let mut g = vec![FAR; rows * cols];
    for &(r, c) in seeds {
        g[r * cols + c] = 0;
    }
    for r in 0..rows {
        let row = &mut g[r * cols..(r + 1) * cols];
        let mut last: Option<usize> = None;
        for c in 0..cols {
            if row[c] == 0 {
                last = Some(c);
            } else if let Some(l) = last {
                row[c] = ((c - l) * (c - l)) as u64;
            }
        }
        last = None;
        for c in (0..cols).rev() {
            if row[c] == 0 {
                last = Some(c);
            } else if let Some(l) = last {
                row[c] = row[c].min(((l - c) * (l - c)) as u64);
            }
        }
    }
    // pass 2: lower envelope of parabolas down each column
    let mut out = vec![FAR; rows * cols];
    let mut f = vec![0u64; rows];
    let mut v = vec![0usize; rows];
    let mut z = vec![0f64; rows + 1];
    for c in 0..cols {
        for r in 0..rows {
            f[r] = g[r * cols + c];
        }
        let sites: Vec<usize> = (0..rows).filter(|&r| f[r] < FAR).collect();
        if sites.is_empty() {
            continue;
        }
        let mut k = 0usize;
        v[0] = sites[0];
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        let meet = |q: usize, p: usize, f: &[u64]| -> f64 {
            ((f[q] as f64 + (q * q) as f64) - (f[p] as f64 + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
        };
        for &q in &sites[1..] {
            let mut s = meet(q, v[k], &f);
            while s <= z[k] {
                k -= 1;
                s = meet(q, v[k], &f);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for r in 0..rows {
            while z[k + 1] < r as f64 {
                k += 1;
            }
            let p = v[k];
            out[r * cols + c] = (r.abs_diff(p) * r.abs_diff(p)) as u64 + f[p];
        }
    }
    // Breakpoints are rationals with denominator 2(q - p), far from float
    // rounding, and at an exact tie both parabolas give the same value.
    out
}

/// Metrics of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub image: String,
    pub miou: f64,
    pub dice: f64,
    /// `None` when either boundary is empty.
    pub aver_hd: Option<f64>,
    pub confusion: ConfusionCounts,
}

/// Per-image metrics and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean_miou: f64,
    pub mean_dice: f64,
    /// Mean over images with a defined distance; `None` if there are none.
    pub mean_aver_hd: Option<f64>,
    /// Images whose average Hausdorff distance is undefined.
    pub undefined_aver_hd: usize,
    pub hausdorff_mode: HausdorffMode,
}

pub fn image_metrics(id: &str, pred: &BinaryMask, truth: &BinaryMask, mode: HausdorffMode) -> Result<ImageMetrics> {
    let c = confusion(pred, truth)?;
    Ok(ImageMetrics {
        image: id.to_string(),
        miou: miou(&c),
        dice: dice(&c),
        aver_hd: average_hausdorff_with(&boundary(pred), &boundary(truth), mode),
        confusion: c,
    })
}

/// Evaluates aligned prediction/truth lists; images are named by index.
pub fn evaluate_set(preds: &[BinaryMask], truths: &[BinaryMask]) -> Result<MetricsReport> {
    let ids: Vec<String> = (0..preds.len()).map(|i| i.to_string()).collect();
    evaluate_named(&ids, preds, truths, HausdorffMode::SymmetricMax)
}

pub fn evaluate_named(
    ids: &[String],
    preds: &[BinaryMask],
    truths: &[BinaryMask],
    mode: HausdorffMode,
) -> Result<MetricsReport> {
    if preds.len() != truths.len() || ids.len() != preds.len() {
        return Err(Error::Value(format!(
            "{} ids, {} predictions and {} truths must align",
            ids.len(),
            preds.len(),
            truths.len()
        )));
    }
    let images = ids
        .iter()
        .zip(preds.iter().zip(truths))
        .map(|(id, (p, t))| image_metrics(id, p, t, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_images(images, mode))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Aggregates per-image entries. An empty list gives means of NaN, so
    /// callers should reject empty sets first.
    pub fn from_images(images: Vec<ImageMetrics>, mode: HausdorffMode) -> Self {
        let mean_miou = mean(images.iter().map(|m| m.miou)).unwrap_or(f64::NAN);
        let mean_dice = mean(images.iter().map(|m| m.dice)).unwrap_or(f64::NAN);
        let mean_aver_hd = mean(images.iter().filter_map(|m| m.aver_hd));
        let undefined_aver_hd = images.iter().filter(|m| m.aver_hd.is_none()).count();
        Self { images, mean_miou, mean_dice, mean_aver_hd, undefined_aver_hd, hausdorff_mode: mode }
    }

    /// `image,miou,dice,aver_hd` rows plus a final `mean` row. Undefined
    /// distances are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let hd = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        let mut out = String::from("image,miou,dice,aver_hd\n");
        for m in &self.images {
            out.push_str(&format!("{},{},{},{}\n", m.image, m.miou, m.dice, hd(m.aver_hd)));
        }
        out.push_str(&format!("mean,{},{},{}\n", self.mean_miou, self.mean_dice, hd(self.mean_aver_hd)));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }

    /// One-line summary with percentages to two decimals.
    pub fn summary(&self) -> String {
        let hd = self.mean_aver_hd.map_or_else(|| "undefined".into(), |v| format!("{v:.2}"));
        format!(
            "images={} MIoU={:.2}% Dice={:.2}% Aver_hd={} (undefined: {})",
            self.images.len(),
            100.0 * self.mean_miou,
            100.0 * self.mean_dice,
            hd,
            self.undefined_aver_hd
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn confusion_of_identical_masks() {
        let m = mask(&["#..", ".#.", "..."]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 7 });
    }

    #[test]
    fn all_true_against_all_false() {
        let c = confusion(&BinaryMask::filled(2, 2, true), &BinaryMask::filled(2, 2, false)).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 4, fn_: 0, tn: 0 });
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        assert!(confusion(&BinaryMask::filled(2, 2, true), &BinaryMask::filled(2, 3, true)).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = mask(&["##..", "##.."]);
        assert_eq!(dice(&confusion(&a, &a).unwrap()), 1.0);
        assert_eq!(dice(&confusion(&a, &a.complement()).unwrap()), 0.0);
        let b = mask(&[".##.", ".##."]);
        assert_eq!(dice(&confusion(&a, &b).unwrap()), 0.5);
        let empty = BinaryMask::filled(2, 4, false);
        assert_eq!(dice(&confusion(&empty, &empty).unwrap()), 1.0);
    }

    #[test]
    fn miou_examples() {
        let truth = mask(&["##", ".."]);
        let c = confusion(&BinaryMask::filled(2, 2, true), &truth).unwrap();
        assert_eq!(iou_foreground(&c), 0.5);
        assert_eq!(iou_background(&c), 0.0);
        assert_eq!(miou(&c), 0.25);
        assert_eq!(miou(&confusion(&truth, &truth).unwrap()), 1.0);
    }

    #[test]
    fn boundary_examples() {
        let single = mask(&["...", ".#.", "..."]);
        assert_eq!(boundary(&single), vec![(1, 1)]);
        let block = mask(&[".....", ".###.", ".###.", ".###.", "....."]);
        let b = boundary(&block);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        // the frame edge counts as background
        assert_eq!(boundary(&BinaryMask::filled(3, 3, true)).len(), 8);
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(average_hausdorff(&[(0, 0)], &[(3, 4)]), Some(5.0));
        let a = vec![(0, 0), (2, 2), (5, 1)];
        assert_eq!(average_hausdorff(&a, &a), Some(0.0));
        assert_eq!(average_hausdorff(&a, &[]), None);
        // directed d(A→B) = 0, d(B→A) = 3
        let b = vec![(0, 0), (0, 3)];
        assert_eq!(average_hausdorff_with(&[(0, 0)], &b, HausdorffMode::Directed), Some(0.0));
        assert_eq!(average_hausdorff(&[(0, 0)], &b), Some(1.5));
    }

    #[test]
    fn distance_field_matches_brute_force() {
        let seeds = vec![(0, 0), (7, 3), (4, 9), (12, 12)];
        let (rows, cols) = (15, 14);
        let field = squared_distance_field(&seeds, rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let want = seeds.iter().map(|&s| sq_dist((r, c), s)).min().unwrap();
                assert_eq!(field[r * cols + c], want, "at ({r}, {c})");
            }
        }
    }

    #[test]
    fn report_means_skip_undefined_distances() {
        let a = mask(&["#.", ".."]);
        let empty = BinaryMask::filled(2, 2, false);
        let r = evaluate_set(&[a.clone(), empty.clone()], &[a, empty]).unwrap();
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.mean_miou, 1.0);
        assert_eq!(r.mean_aver_hd, Some(0.0));
        assert_eq!(r.undefined_aver_hd, 1);
        assert!(r.to_csv().contains("1,1,1,undefined"));
        assert!(evaluate_set(&[BinaryMask::filled(2, 2, false)], &[]).is_err());
    }
}
