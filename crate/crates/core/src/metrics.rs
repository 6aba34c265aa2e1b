//! Evaluation: error categories by visibility, Youden-index uncertainty
//! filtering, AUC over a max(rotation, translation-angle) error, and Dice/IoU.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{BevError, BevGrid};
use crate::estimator::PoseEstimate;
use crate::geometry::{pos_dist, rot_geodesic_deg, Pose, UnitQuat};

pub const DEFAULT_BIN_THRESHOLD: f32 = 0.5;
pub const AUC_THRESHOLDS_DEG: [f64; 3] = [20.0, 45.0, 90.0];
/// Edges with a shorter true translation are excluded from AUC.
pub const MIN_TRANSLATION: f64 = 1e-3;
pub const DEFAULT_BAD_ESTIMATE_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("Youden threshold needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error(transparent)]
    Grid(#[from] BevError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    /// True pose of the neighbor in the observer's frame.
    pub truth: Pose,
    pub est: PoseEstimate,
    pub fov_deg: f64,
}

impl EdgeRecord {
    pub fn pos_error(&self) -> f64 {
        pos_dist(&self.truth.position, &self.est.p_hat)
    }

    pub fn rot_error_deg(&self) -> f64 {
        rot_geodesic_deg(&self.truth.rotation, &self.est.q_hat)
    }
}

/// An edge is invisible when the relative rotation exceeds the field of view.
pub fn is_invisible(rec: &EdgeRecord) -> bool {
    is_invisible_rel(&rec.truth.rotation, rec.fov_deg)
}

pub fn is_invisible_rel(rel_rotation: &UnitQuat, fov_deg: f64) -> bool {
    rot_geodesic_deg(rel_rotation, &UnitQuat::IDENTITY) > fov_deg
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoudenPoint {
    pub threshold: f64,
    pub j: f64,
}

/// Threshold maximizing `J = TPR - FPR` under the rule `score >= threshold`
/// means positive (rejected). Candidates are the input scores; ties go to the
/// lowest threshold.
pub fn youden_threshold(scores: &[(f64, bool)]) -> Result<YoudenPoint, MetricsError> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let positives = scores.iter().filter(|(_, p)| *p).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positives as f64, negatives as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<YoudenPoint> = None;
    let mut k = 0;
    while k < sorted.len() {
        let thr = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == thr {
            if sorted[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let j = tp as f64 / p - fp as f64 / n;
        // Descending sweep: `>=` keeps the lowest threshold among ties.
        if best.is_none_or(|b| j >= b.j) {
            best = Some(YoudenPoint { threshold: thr, j });
        }
    }
    Ok(best.expect("non-empty input"))
}

/// How a pose estimate's uncertainty is reduced to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Norm,
    Max,
    Mean,
}

impl ScoreKind {
    pub fn score(&self, est: &PoseEstimate) -> f64 {
        let s = est.sigma_p;
        match self {
            ScoreKind::Norm => s.norm(),
            ScoreKind::Max => s.x.max(s.y).max(s.z),
            ScoreKind::Mean => (s.x + s.y + s.z) / 3.0,
        }
    }
}

/// Which edges count as positives (to be rejected) when fitting the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum PositiveLabel {
    /// Position error above this many meters.
    PosErrorAbove(f64),
    Invisible,
}

impl Default for PositiveLabel {
    fn default() -> Self {
        PositiveLabel::PosErrorAbove(DEFAULT_BAD_ESTIMATE_M)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    pub score: ScoreKind,
    pub label: PositiveLabel,
}

impl FilterConfig {
    pub fn is_positive(&self, rec: &EdgeRecord) -> bool {
        match self.label {
            PositiveLabel::PosErrorAbove(m) => rec.pos_error() > m,
            PositiveLabel::Invisible => is_invisible(rec),
        }
    }

    /// Youden threshold over all records.
    pub fn fit(&self, recs: &[EdgeRecord]) -> Result<YoudenPoint, MetricsError> {
        let scores: Vec<(f64, bool)> = recs.iter().map(|r| (self.score.score(&r.est), self.is_positive(r))).collect();
        youden_threshold(&scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    All,
    Visible,
    Invisible,
    InvisibleFiltered,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::All, Category::Visible, Category::Invisible, Category::InvisibleFiltered];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::All => "all",
            Category::Visible => "visible",
            Category::Invisible => "invisible",
            Category::InvisibleFiltered => "invisible_filtered",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: Category,
    pub count: usize,
    /// `None` when the category is empty.
    pub median_pos: Option<f64>,
    pub median_rot: Option<f64>,
}

/// Lower-middle median.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[(values.len() - 1) / 2])
}

/// Median errors in the four categories. Invisible edges whose uncertainty
/// score is below `reject_threshold` form the filtered category.
pub fn category_report(recs: &[EdgeRecord], reject_threshold: f64, score: ScoreKind) -> Result<Vec<CategoryReport>, MetricsError> {
    if recs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let report = |category: Category, members: Vec<&EdgeRecord>| {
        let mut pos: Vec<f64> = members.iter().map(|r| r.pos_error()).collect();
        let mut rot: Vec<f64> = members.iter().map(|r| r.rot_error_deg()).collect();
        CategoryReport { category, count: members.len(), median_pos: median(&mut pos), median_rot: median(&mut rot) }
    };
    let invisible: Vec<&EdgeRecord> = recs.iter().filter(|r| is_invisible(r)).collect();
    let filtered = invisible.iter().copied().filter(|r| score.score(&r.est) < reject_threshold).collect();
    Ok(vec![
        report(Category::All, recs.iter().collect()),
        report(Category::Visible, recs.iter().filter(|r| !is_invisible(r)).collect()),
        report(Category::Invisible, invisible),
        report(Category::InvisibleFiltered, filtered),
    ])
}

/// Angle between the true and estimated translation directions, in degrees.
/// `None` when the true translation is too short for a direction.
pub fn translation_angle_deg(truth: &Pose, est: &PoseEstimate) -> Option<f64> {
    let t = truth.position;
    let tn = t.norm();
    if tn < MIN_TRANSLATION {
        return None;
    }
    let e = est.p_hat;
    let en = e.norm();
    if en == 0.0 {
        return Some(180.0);
    }
    let cos = (t.dot(&e) / (tn * en)).clamp(-1.0, 1.0);
    // atan2 keeps precision near 0 and 180 degrees.
    let sin = t.cross(&e).norm() / (tn * en);
    Some(sin.atan2(cos).to_degrees())
}

/// Per-edge error for AUC: max of rotation and translation-direction errors.
pub fn auc_error_deg(rec: &EdgeRecord) -> Option<f64> {
    translation_angle_deg(&rec.truth, &rec.est).map(|t| t.max(rec.rot_error_deg()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub thresholds_deg: Vec<f64>,
    /// Areas in `[0, 1]`.
    pub values: Vec<f64>,
    pub excluded: usize,
}

/// `AUC@t = (1/t) * integral_0^t recall(e <= x) dx`, exact for the empirical
/// step function: each edge contributes `max(0, t - e) / t`.
pub fn auc_at(recs: &[EdgeRecord], thresholds_deg: &[f64]) -> Result<AucReport, MetricsError> {
    let mut errors = Vec::with_capacity(recs.len());
    let mut excluded = 0;
    for r in recs {
        match auc_error_deg(r) {
            Some(e) => errors.push(e),
            None => excluded += 1,
        }
    }
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let values = thresholds_deg
        .iter()
        .map(|&t| errors.iter().map(|&e| (t - e).max(0.0)).sum::<f64>() / (t * n))
        .collect();
    Ok(AucReport { thresholds_deg: thresholds_deg.to_vec(), values, excluded })
}

/// Dice and IoU of the occupied sets; both empty scores `(1, 1)`.
/// Truth cells above 0.5 and prediction cells above `bin_threshold` are occupied.
pub fn dice_iou(truth: &BevGrid, pred: &BevGrid, bin_threshold: f32) -> Result<(f64, f64), MetricsError> {
    truth.same_shape(pred)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.cells().iter().zip(pred.cells()) {
        let ta = t > 0.5;
        let pb = p > bin_threshold;
        a += ta as usize;
        b += pb as usize;
        inter += (ta && pb) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    Ok((2.0 * inter as f64 / (a + b) as f64, inter as f64 / union as f64))
}

pub const CATEGORY_CSV_HEADER: &str = "category,count,median_pos_m,median_rot_deg";
pub const AUC_CSV_HEADER: &str = "threshold,auc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_category_csv<W: Write>(mut w: W, reports: &[CategoryReport]) -> io::Result<()> {
    writeln!(w, "{CATEGORY_CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.category, r.count, opt(r.median_pos), opt(r.median_rot))?;
    }
    Ok(())
}

/// AUC values are written on the 0-100 scale.
pub fn write_auc_csv<W: Write>(mut w: W, auc: &AucReport) -> io::Result<()> {
    writeln!(w, "{AUC_CSV_HEADER}")?;
    for (t, v) in auc.thresholds_deg.iter().zip(&auc.values) {
        writeln!(w, "{t},{:.4}", v * 100.0)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn rec(truth: Pose, p_err: Vec3, rot_err_deg: f64, sigma: f64) -> EdgeRecord {
        let q_hat = UnitQuat::from_yaw(rot_err_deg.to_radians()).compose(&truth.rotation);
        EdgeRecord {
            truth,
            est: PoseEstimate {
                src: 0,
                dst: 1,
                p_hat: truth.position + p_err,
                sigma_p: Vec3::new(sigma, sigma, sigma),
                q_hat,
                sigma_q: 0.1,
            },
            fov_deg: 120.0,
        }
    }

    fn yawed(deg: f64) -> Pose {
        Pose::planar(2.0, 0.0, deg.to_radians())
    }

    #[test]
    fn visibility_examples() {
        assert!(!is_invisible(&rec(yawed(0.0), Vec3::ZERO, 0.0, 0.1)));
        assert!(is_invisible(&rec(yawed(180.0), Vec3::ZERO, 0.0, 0.1)));
        // Boundary: the geodesic of an exact 120 degree yaw must not exceed 120.
        let r = rec(yawed(120.0), Vec3::ZERO, 0.0, 0.1);
        let d = rot_geodesic_deg(&r.truth.rotation, &UnitQuat::IDENTITY);
        assert!((d - 120.0).abs() < 1e-9);
        assert_eq!(is_invisible(&r), d > 120.0);
    }

    #[test]
    fn youden_examples() {
        let sep = [(1.0, true), (1.0, true), (0.0, false), (0.0, false)];
        assert_eq!(youden_threshold(&sep).unwrap(), YoudenPoint { threshold: 1.0, j: 1.0 });
        let four = [(0.1, false), (0.2, false), (0.3, true), (0.4, true)];
        assert_eq!(youden_threshold(&four).unwrap().threshold, 0.3);
        assert!(matches!(youden_threshold(&[(0.1, true)]), Err(MetricsError::SingleClass { .. })));
        assert!(matches!(youden_threshold(&[(f64::NAN, true), (0.0, false)]), Err(MetricsError::NonFinite)));
    }

    #[test]
    fn youden_tie_takes_lowest_threshold() {
        // Thresholds 0.5 and 0.2 both give J = 0.5.
        let s = [(0.9, true), (0.5, false), (0.3, true), (0.2, true), (0.1, false)];
        let y = youden_threshold(&s).unwrap();
        let j_at = |t: f64| {
            let tp = s.iter().filter(|(v, p)| *p && *v >= t).count() as f64 / 3.0;
            let fp = s.iter().filter(|(v, p)| !*p && *v >= t).count() as f64 / 2.0;
            tp - fp
        };
        let best = [0.9, 0.5, 0.3, 0.2, 0.1].iter().map(|&t| j_at(t)).fold(f64::MIN, f64::max);
        assert_eq!(y.j, best);
        let lowest = [0.1, 0.2, 0.3, 0.5, 0.9].into_iter().find(|&t| j_at(t) == best).unwrap();
        assert_eq!(y.threshold, lowest);
    }

    #[test]
    fn category_single_visible_edge() {
        let r = rec(yawed(10.0), Vec3::new(0.33, 0.0, 0.0), 5.8, 0.2);
        let reps = category_report(&[r], 1.0, ScoreKind::Norm).unwrap();
        let vis = reps.iter().find(|c| c.category == Category::Visible).unwrap();
        assert_eq!(vis.count, 1);
        assert!((vis.median_pos.unwrap() - 0.33).abs() < 1e-12);
        assert!((vis.median_rot.unwrap() - 5.8).abs() < 1e-9);
        let inv = reps.iter().find(|c| c.category == Category::Invisible).unwrap();
        assert_eq!((inv.count, inv.median_pos), (0, None));
    }

    #[test]
    fn category_perfect_edges() {
        let recs: Vec<_> = [0.0, 50.0, 150.0, 170.0].iter().map(|&d| rec(yawed(d), Vec3::ZERO, 0.0, 0.1)).collect();
        for r in category_report(&recs, 10.0, ScoreKind::Norm).unwrap() {
            assert_eq!(r.median_pos, Some(0.0), "{}", r.category);
            assert!(r.median_rot.unwrap() < 1e-6);
        }
        assert!(matches!(category_report(&[], 1.0, ScoreKind::Norm), Err(MetricsError::Empty)));
    }

    #[test]
    fn lower_middle_median() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn auc_examples() {
        let perfect = rec(yawed(0.0), Vec3::ZERO, 0.0, 0.1);
        let a = auc_at(&[perfect], &AUC_THRESHOLDS_DEG).unwrap();
        assert!(a.values.iter().all(|&v| (v - 1.0).abs() < 1e-9));

        let ten = rec(yawed(0.0), Vec3::ZERO, 10.0, 0.1);
        let a = auc_at(&[ten], &[20.0]).unwrap();
        assert!((a.values[0] - 0.5).abs() < 1e-9);

        let degenerate = rec(Pose::IDENTITY, Vec3::ZERO, 0.0, 0.1);
        let a = auc_at(&[degenerate, perfect], &[20.0]).unwrap();
        assert_eq!(a.excluded, 1);
        assert!(matches!(auc_at(&[degenerate], &[20.0]), Err(MetricsError::Empty)));
    }

    #[test]
    fn dice_iou_examples() {
        let g = |cells: Vec<f32>| BevGrid::from_cells(3, 1.0, cells).unwrap();
        let a = g(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(dice_iou(&a, &a, 0.5).unwrap(), (1.0, 1.0));
        let b = g(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(dice_iou(&a, &b, 0.5).unwrap(), (0.0, 0.0));
        let c = g(vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let (d, i) = dice_iou(&a, &c, 0.5).unwrap();
        assert_eq!(d, 0.5);
        assert!((i - 1.0 / 3.0).abs() < 1e-15);
        let empty = g(vec![0.0; 9]);
        assert_eq!(dice_iou(&empty, &empty, 0.5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn csv_layout() {
        let r = rec(yawed(0.0), Vec3::new(0.5, 0.0, 0.0), 0.0, 0.1);
        let reps = category_report(&[r], 1.0, ScoreKind::Norm).unwrap();
        let mut out = Vec::new();
        write_category_csv(&mut out, &reps).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CATEGORY_CSV_HEADER);
        assert_eq!(lines[1], "all,1,0.500000,0.000000");
        assert_eq!(lines[3], "invisible,0,,");
    }
}
