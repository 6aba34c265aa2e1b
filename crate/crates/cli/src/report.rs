//! Reads any of the JSONL outputs (edge records, datasets, run logs) and
//! reduces them to the metric report.

use std::io::{self, BufRead, Write};

use serde::Serialize;
use serde_json::Value;
use swarmsim_core::metrics::{self, write_category_csv, AucReport, CategoryReport, EdgeRecord, YoudenPoint};
use swarmsim_core::scenario::dataset::{is_schema_line, GroupLine};
use swarmsim_core::scenario::formation::RunRecord;
use swarmsim_core::scenario::{make_estimator, SampleGroup};

use crate::{CliError, RunConfig};

pub const REPORT_HEADER: &str = "edges,lines,malformed,youden_threshold,youden_j,auc20,auc45,auc90,auc_excluded";
pub const BEV_COLUMNS: &str = ",bev_grids,dice,iou";

#[derive(Debug, Default)]
pub struct Ingested {
    pub edges: Vec<EdgeRecord>,
    /// Dice and IoU of each fused grid against its truth crop.
    pub bev: Vec<(f64, f64)>,
    /// Non-empty, non-header lines.
    pub lines: usize,
    /// `(1-based line number, reason)`
    pub malformed: Vec<(usize, String)>,
}

impl Ingested {
    pub fn malformed_fraction(&self) -> f64 {
        if self.lines == 0 {
            0.0
        } else {
            self.malformed.len() as f64 / self.lines as f64
        }
    }
}

enum Line {
    Edge(Box<EdgeRecord>),
    Group(GroupLine),
    Run(Box<RunRecord>),
}

fn classify(v: Value) -> Result<Line, String> {
    let Some(obj) = v.as_object() else {
        return Err("not a JSON object".into());
    };
    let parsed = if obj.contains_key("nodes") {
        serde_json::from_value(v).map(Line::Group)
    } else if obj.contains_key("estimates") {
        serde_json::from_value(v).map(|r| Line::Run(Box::new(r)))
    } else if obj.contains_key("truth") && obj.contains_key("est") {
        serde_json::from_value(v).map(|r| Line::Edge(Box::new(r)))
    } else {
        return Err("unrecognized record".into());
    };
    parsed.map_err(|e| e.to_string())
}

pub fn ingest<R: BufRead>(r: R, cfg: &RunConfig) -> io::Result<Ingested> {
    let mut out = Ingested::default();
    let mut est = make_estimator(cfg.estimator, cfg.noise(), cfg.seed);
    let mut group_tick = 0u64;
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = k + 1;
        let v: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.lines += 1;
                out.malformed.push((lineno, e.to_string()));
                continue;
            }
        };
        if is_schema_line(&v) {
            continue;
        }
        out.lines += 1;
        match classify(v) {
            Ok(Line::Edge(e)) => out.edges.push(*e),
            Ok(Line::Run(r)) => out.edges.extend(r.estimates.iter().map(|e| EdgeRecord {
                truth: e.truth,
                est: e.est,
                fov_deg: r.fov_deg,
            })),
            Ok(Line::Group(g)) => {
                let group = match SampleGroup::try_from(g) {
                    Ok(g) => g,
                    Err(e) => {
                        out.malformed.push((lineno, e.to_string()));
                        continue;
                    }
                };
                let tick = group_tick;
                group_tick += 1;
                match group.edge_records(est.as_mut(), tick) {
                    Ok(edges) => out.edges.extend(edges),
                    Err(e) => {
                        out.malformed.push((lineno, e.to_string()));
                        continue;
                    }
                }
                for i in 0..group.nodes.len() {
                    match group.fused_observed(i, est.as_mut(), tick, cfg.bev_gate_sigma) {
                        Ok(Some(fused)) => {
                            let s = metrics::dice_iou(&group.nodes[i].bev, &fused, cfg.bin_threshold)
                                .map_err(io::Error::other)?;
                            out.bev.push(s);
                        }
                        Ok(None) => {}
                        Err(e) => out.malformed.push((lineno, e.to_string())),
                    }
                }
            }
            Err(reason) => out.malformed.push((lineno, reason)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub edges: usize,
    pub lines: usize,
    pub malformed: usize,
    pub youden: Option<(f64, f64)>,
    pub categories: Vec<CategoryRow>,
    pub auc: Vec<(f64, f64)>,
    pub auc_excluded: usize,
    pub bev: Option<BevSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub median_pos_m: Option<f64>,
    pub median_rot_deg: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BevSummary {
    pub grids: usize,
    pub dice: f64,
    pub iou: f64,
}

pub struct Reduced {
    pub report: Report,
    pub categories: Vec<CategoryReport>,
}

pub fn reduce(data: &Ingested, cfg: &RunConfig) -> Result<Reduced, CliError> {
    if data.edges.is_empty() {
        return Err(CliError::Validation("no usable edge records".into()));
    }
    let youden: Option<YoudenPoint> = match cfg.filter().fit(&data.edges) {
        Ok(y) => Some(y),
        Err(e) => {
            log::warn!("no uncertainty threshold fitted ({e}); nothing is rejected");
            None
        }
    };
    let threshold = youden.map_or(f64::INFINITY, |y| y.threshold);
    let categories = metrics::category_report(&data.edges, threshold, cfg.uncertainty_score)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let auc: AucReport = metrics::auc_at(&data.edges, &metrics::AUC_THRESHOLDS_DEG)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let bev = (!data.bev.is_empty()).then(|| {
        let n = data.bev.len() as f64;
        BevSummary {
            grids: data.bev.len(),
            dice: data.bev.iter().map(|b| b.0).sum::<f64>() / n,
            iou: data.bev.iter().map(|b| b.1).sum::<f64>() / n,
        }
    });
    let report = Report {
        edges: data.edges.len(),
        lines: data.lines,
        malformed: data.malformed.len(),
        youden: youden.map(|y| (y.threshold, y.j)),
        categories: categories
            .iter()
            .map(|c| CategoryRow {
                category: c.category.as_str().to_string(),
                count: c.count,
                median_pos_m: c.median_pos,
                median_rot_deg: c.median_rot,
            })
            .collect(),
        auc: auc.thresholds_deg.iter().copied().zip(auc.values.iter().copied()).collect(),
        auc_excluded: auc.excluded,
        bev,
    };
    Ok(Reduced { report, categories })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_report_csv<W: Write>(mut w: W, r: &Report) -> io::Result<()> {
    let bev_cols = if r.bev.is_some() { BEV_COLUMNS } else { "" };
    writeln!(w, "{REPORT_HEADER}{bev_cols}")?;
    let aucs: Vec<String> = r.auc.iter().map(|(_, a)| format!("{a:.6}")).collect();
    write!(
        w,
        "{},{},{},{},{},{},{}",
        r.edges,
        r.lines,
        r.malformed,
        opt(r.youden.map(|y| y.0)),
        opt(r.youden.map(|y| y.1)),
        aucs.join(","),
        r.auc_excluded
    )?;
    if let Some(b) = r.bev {
        write!(w, ",{},{:.6},{:.6}", b.grids, b.dice, b.iou)?;
    }
    writeln!(w)
}

pub fn write_categories_csv<W: Write>(w: W, reduced: &Reduced) -> io::Result<()> {
    write_category_csv(w, &reduced.categories)
}
