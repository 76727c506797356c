use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::losses::LossBreakdown;
use crate::metrics::fmt_opt;

use super::train::ExperimentResult;

/// Every `result.json` under `dir`, sorted by path.
pub fn load_results(dir: &Path) -> Result<Vec<ExperimentResult>> {
    let mut paths = Vec::new();
    collect(dir, &mut paths)?;
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "result.json") {
            out.push(path);
        }
    }
    Ok(())
}

fn ratio(r: &ExperimentResult) -> f64 {
    r.final_loss.total / r.initial_loss.total
}

/// One line per run: label, seed, losses, metrics and wall time.
pub fn summary_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("label,seed,epochs,initial_loss,final_loss,loss_ratio,det_map,map_miou,occ_miou,seconds\n");
    for r in results {
        let _ = writeln!(
            out,
            "\"{}\",{},{},{:.6},{:.6},{:.4},{},{},{},{:.1}",
            r.label,
            r.seed,
            r.config.epochs,
            r.initial_loss.total,
            r.final_loss.total,
            ratio(r),
            fmt_opt(r.metrics.det_map),
            fmt_opt(r.metrics.map_miou),
            fmt_opt(r.metrics.occ_miou),
            r.seconds
        );
    }
    out
}

/// Human-readable summary with per-class scores.
pub fn summary_text(results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    for r in results {
        let _ = writeln!(out, "{} (seed {}, {} epochs, {:.0}s)", r.label, r.seed, r.config.epochs, r.seconds);
        let _ = writeln!(out, "  fingerprint {}", &r.fingerprint[..16]);
        let _ = writeln!(
            out,
            "  loss {:.4} -> {:.4} (x{:.3})",
            r.initial_loss.total,
            r.final_loss.total,
            ratio(r)
        );
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "  det mAP {}  map mIoU {}  occ mIoU {}",
            fmt_opt(m.det_map),
            fmt_opt(m.map_miou),
            fmt_opt(m.occ_miou)
        );
        for (name, scores) in [("map", &m.map_iou), ("occ", &m.occ_iou)] {
            let cells: Vec<String> = scores
                .iter()
                .map(|c| format!("{}={}", c.class, fmt_opt(c.value)))
                .collect();
            let _ = writeln!(out, "  {name} IoU {}", cells.join(" "));
        }
    }
    out
}

/// Long-format plot data: one row per (run, epoch) with every loss term.
pub fn loss_curves_csv(results: &[ExperimentResult]) -> String {
    let mut out = format!("label,seed,epoch,{},total\n", LossBreakdown::COMPONENTS.join(","));
    for r in results {
        for e in &r.trajectory {
            let l = &e.loss;
            let _ = writeln!(
                out,
                "\"{}\",{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.label, r.seed, e.epoch, l.l_cpg, l.l_sup, l.l_det, l.l_map, l.l_occ, l.total
            );
        }
    }
    out
}

/// Writes `summary.txt`, `summary.csv` and `loss_curves.csv` into `out`.
pub fn write_report(results: &[ExperimentResult], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.txt"), summary_text(results))?;
    fs::write(out.join("summary.csv"), summary_csv(results))?;
    fs::write(out.join("loss_curves.csv"), loss_curves_csv(results))?;
    Ok(())
}
