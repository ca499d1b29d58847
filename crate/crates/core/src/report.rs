//! Plain-text tables and the cross-sweep summary.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::datastore::registry;
use crate::ensemble::EnsembleReport;
use crate::error::{Error, Result};
use crate::metrics::{attribute_correlations, AttributeCorrelation};
use crate::sweep::{best_row, ConfigId, SweepKind, SweepResult};

fn ncc_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"))
}

/// Render rows with left-aligned first column and right-aligned others.
fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = width[0]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = width[i]);
            }
        }
        s.trim_end().to_string()
    };
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    let mut out = line(&head);
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// One line per config with per-fold and mean test metrics; the best row
/// is starred.
pub fn sweep_table(result: &SweepResult) -> Result<String> {
    let best = best_row(&result.rows)?.id.clone();
    let folds = result.rows[0].report.folds.len();
    let first = match result.kind {
        SweepKind::Layers => "layer",
        SweepKind::Dims => "dim",
    };
    let mut header = vec![first];
    let fold_names: Vec<String> = (0..folds).map(|f| format!("rmse f{f}")).collect();
    header.extend(fold_names.iter().map(String::as_str));
    header.extend(["mean rmse", "mean ncc", ""]);
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![match result.kind {
                SweepKind::Layers => r.id.layer_mode.to_string(),
                SweepKind::Dims => r.id.dim.to_string(),
            }];
            cells.extend(r.report.folds.iter().map(|f| format!("{:.3}", f.rmse)));
            cells.push(format!("{:.3}", r.report.mean_rmse));
            cells.push(ncc_cell(r.report.mean_ncc));
            cells.push(if r.id == best { "*".into() } else { String::new() });
            cells
        })
        .collect();
    Ok(format!(
        "{} sweep: sfm {}, arch {}, seed {}\n{}",
        first,
        result.sfm,
        result.arch,
        result.seed,
        render(&header, &rows)
    ))
}

/// Architecture x width grid of "RMSE / NCC", one block per SFM, from
/// dimension sweeps.
pub fn dim_grid_table(results: &[SweepResult]) -> String {
    let mut by_sfm: BTreeMap<&str, Vec<&SweepResult>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.kind == SweepKind::Dims) {
        by_sfm.entry(&r.sfm).or_default().push(r);
    }
    let mut out = String::new();
    for (sfm, mut rs) in by_sfm {
        rs.sort_by_key(|r| r.arch);
        let mut dims: Vec<usize> = rs.iter().flat_map(|r| r.rows.iter().map(|x| x.id.dim)).collect();
        dims.sort_unstable();
        dims.dedup();
        let dim_names: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        let mut header = vec![sfm];
        header.extend(dim_names.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = rs
            .iter()
            .map(|r| {
                let mut cells = vec![r.arch.to_string()];
                for d in &dims {
                    cells.push(r.rows.iter().find(|x| x.id.dim == *d).map_or("-".into(), |x| {
                        format!("{:.2} / {}", x.report.mean_rmse, ncc_cell(x.report.mean_ncc))
                    }));
                }
                cells
            })
            .collect();
        out.push_str(&render(&header, &rows));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub rank: usize,
    pub id: ConfigId,
    pub mean_rmse: f64,
    pub mean_ncc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Best configuration per SFM across all given sweeps, ranked by RMSE.
    pub best: Vec<BestEntry>,
    /// Present when every SFM is in the registry and there are at least two.
    pub attributes: Option<Vec<AttributeCorrelation>>,
}

pub fn summarize(results: &[SweepResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::Domain("no sweep results to summarize".into()));
    }
    let mut by_sfm: BTreeMap<&str, Vec<&crate::sweep::SweepRow>> = BTreeMap::new();
    for r in results {
        by_sfm.entry(&r.sfm).or_default().extend(r.rows.iter());
    }
    let mut best: Vec<BestEntry> = by_sfm
        .values()
        .map(|rows| {
            let owned: Vec<_> = rows.iter().map(|r| (*r).clone()).collect();
            let b = best_row(&owned)?;
            Ok(BestEntry {
                rank: 0,
                id: b.id.clone(),
                mean_rmse: b.report.mean_rmse,
                mean_ncc: b.report.mean_ncc,
            })
        })
        .collect::<Result<_>>()?;
    best.sort_by(|a, b| a.mean_rmse.total_cmp(&b.mean_rmse).then_with(|| a.id.cmp(&b.id)));
    for (i, b) in best.iter_mut().enumerate() {
        b.rank = i + 1;
    }
    let registered = best.iter().all(|b| registry::descriptor(&b.id.sfm).is_some());
    let attributes = if registered && best.len() >= 2 {
        let pairs: Vec<(String, f64)> = best.iter().map(|b| (b.id.sfm.clone(), b.mean_rmse)).collect();
        Some(attribute_correlations(&pairs)?)
    } else {
        None
    };
    Ok(Summary { best, attributes })
}

pub fn summary_table(summary: &Summary) -> String {
    let rows: Vec<Vec<String>> = summary
        .best
        .iter()
        .map(|b| {
            vec![
                b.rank.to_string(),
                b.id.sfm.clone(),
                b.id.arch.to_string(),
                b.id.layer_mode.to_string(),
                b.id.dim.to_string(),
                format!("{:.3}", b.mean_rmse),
                ncc_cell(b.mean_ncc),
            ]
        })
        .collect();
    let mut out = render(&["rank", "sfm", "arch", "layers", "dim", "rmse", "ncc"], &rows);
    if let Some(attrs) = &summary.attributes {
        out.push('\n');
        let rows: Vec<Vec<String>> = attrs
            .iter()
            .map(|a| vec![a.attribute.clone(), ncc_cell(a.spearman)])
            .collect();
        out.push_str(&render(&["attribute", "spearman"], &rows));
    }
    out
}

pub fn ensemble_table(report: &EnsembleReport) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let w: Vec<String> = (0..r.members.len())
                .map(|m| {
                    let mean = r.models.iter().map(|x| x.weights()[m]).sum::<f64>() / r.models.len() as f64;
                    format!("{mean:.2}")
                })
                .collect();
            vec![
                r.rank.to_string(),
                format!("({})", r.members.join(", ")),
                w.join("/"),
                format!("{:.3}", r.report.mean_rmse),
                ncc_cell(r.report.mean_ncc),
            ]
        })
        .collect();
    let mut out = render(&["rank", "ensemble", "mean weights", "rmse", "ncc"], &rows);
    out.push('\n');
    let rows: Vec<Vec<String>> = report
        .weights
        .iter()
        .map(|(name, s)| {
            vec![
                name.clone(),
                s.count.to_string(),
                format!("{:.3}", s.min),
                format!("{:.3}", s.q1),
                format!("{:.3}", s.median),
                format!("{:.3}", s.q3),
                format!("{:.3}", s.max),
            ]
        })
        .collect();
    out.push_str(&render(&["member", "n", "min", "q1", "median", "q3", "max"], &rows));
    out
}
