use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::fmt_opt;
use crate::tsfg::TsfgParts;

use super::config::{SpaSources, Toggles, TrainConfig, SCHEMA_VERSION};
use super::train::{run_experiment, ExperimentResult, RunOptions};

/// Named ablation matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matrix {
    /// Incremental component addition, baseline to full.
    Main,
    /// Enhancement sub-components added one at a time.
    Tsfg,
    /// Task-oriented prototypes removed from aggregation.
    Spa,
    /// Baseline against the full model only.
    Headline,
    All,
}

impl std::str::FromStr for Matrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Matrix::Main),
            "tsfg" => Ok(Matrix::Tsfg),
            "spa" => Ok(Matrix::Spa),
            "headline" => Ok(Matrix::Headline),
            "all" => Ok(Matrix::All),
            other => Err(Error::Config(format!(
                "unknown matrix `{other}` (main, tsfg, spa, headline, all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub table: String,
    pub label: String,
    pub toggles: Toggles,
}

fn row(table: &str, label: &str, toggles: Toggles) -> MatrixRow {
    MatrixRow {
        table: table.into(),
        label: label.into(),
        toggles,
    }
}

pub fn matrix_rows(m: Matrix) -> Vec<MatrixRow> {
    let b = Toggles::BASELINE;
    let cpg = Toggles { use_cpg: true, ..b };
    let all_tsfg = Toggles {
        use_tsfg_det: true,
        use_tsfg_map: true,
        use_tsfg_occ: true,
        ..cpg
    };
    let parts = |prototype_wise, prototype_aware, suppression| TsfgParts {
        prototype_wise,
        prototype_aware,
        suppression,
    };
    match m {
        Matrix::Main => vec![
            row("main", "baseline", b),
            row("main", "cpg", cpg),
            row("main", "cpg+tsfg(det)", Toggles { use_tsfg_det: true, ..cpg }),
            row("main", "cpg+tsfg(map)", Toggles { use_tsfg_map: true, ..cpg }),
            row("main", "cpg+tsfg(occ)", Toggles { use_tsfg_occ: true, ..cpg }),
            row("main", "cpg+tsfg(all)", all_tsfg),
            row("main", "full", Toggles::FULL),
        ],
        Matrix::Tsfg => vec![
            row("tsfg", "baseline+cpg", cpg),
            row("tsfg", "+prototype-wise", Toggles { tsfg_parts: parts(true, false, false), ..all_tsfg }),
            row("tsfg", "+prototype-aware", Toggles { tsfg_parts: parts(true, true, false), ..all_tsfg }),
            row("tsfg", "+suppression", Toggles { tsfg_parts: parts(true, true, true), ..all_tsfg }),
        ],
        Matrix::Spa => vec![
            row("spa", "full", Toggles::FULL),
            row(
                "spa",
                "w/o map prototypes",
                Toggles { spa_sources: SpaSources { det: true, map: false }, ..Toggles::FULL },
            ),
            row(
                "spa",
                "w/o map+det prototypes",
                Toggles { spa_sources: SpaSources { det: false, map: false }, ..Toggles::FULL },
            ),
        ],
        Matrix::Headline => vec![row("main", "baseline", b), row("main", "full", Toggles::FULL)],
        Matrix::All => [Matrix::Main, Matrix::Tsfg, Matrix::Spa]
            .into_iter()
            .flat_map(matrix_rows)
            .collect(),
    }
}

/// A comparison request: one base config, a matrix and a seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub schema_version: u32,
    pub base: TrainConfig,
    pub matrix: Matrix,
    pub seeds: Vec<u64>,
}

impl CompareSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid compare spec: {e}")))?;
        if spec.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                spec.schema_version
            )));
        }
        if spec.seeds.is_empty() {
            return Err(Error::Config("compare needs at least one seed".into()));
        }
        spec.base.validate()?;
        Ok(spec)
    }

    /// One labelled config per (row, seed).
    pub fn configs(&self) -> Vec<LabeledConfig> {
        matrix_rows(self.matrix)
            .into_iter()
            .flat_map(|r| {
                self.seeds.iter().map(move |&s| LabeledConfig {
                    table: r.table.clone(),
                    label: r.label.clone(),
                    config: self.base.clone().with_toggles(r.toggles).with_seed(s),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledConfig {
    pub table: String,
    pub label: String,
    pub config: TrainConfig,
}

/// Seed-averaged metrics of one matrix row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub table: String,
    pub label: String,
    pub toggles: Toggles,
    pub seeds: Vec<u64>,
    pub det_map: Option<f64>,
    pub map_miou: Option<f64>,
    pub occ_miou: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let d: Vec<f64> = v.flatten().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn delta(a: Option<f64>, base: Option<f64>) -> Option<f64> {
    Some(a? - base?)
}

/// The configs must agree on everything except toggles and seed.
pub fn check_comparable(configs: &[LabeledConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    let norm = |c: &TrainConfig| TrainConfig {
        toggles: Toggles::BASELINE,
        seed: 0,
        ..c.clone()
    };
    let reference = norm(&first.config);
    for c in configs {
        c.config.validate()?;
        if c.config.scene_config != first.config.scene_config {
            return Err(Error::Config(format!(
                "row `{}` uses a different scene_config than row `{}`",
                c.label, first.label
            )));
        }
        if norm(&c.config) != reference {
            return Err(Error::Config(format!(
                "row `{}` differs from row `{}` beyond toggles and seed",
                c.label, first.label
            )));
        }
    }
    Ok(())
}

/// Runs every config through `run` (identical configs only once) and
/// aggregates per row, averaging over seeds.
pub fn compare(
    configs: &[LabeledConfig],
    mut run: impl FnMut(&LabeledConfig) -> Result<ExperimentResult>,
) -> Result<ComparisonTable> {
    check_comparable(configs)?;
    let mut cache: BTreeMap<String, ExperimentResult> = BTreeMap::new();
    let mut groups: Vec<((String, String), Vec<ExperimentResult>)> = Vec::new();
    for c in configs {
        let fp = c.config.fingerprint();
        let result = match cache.get(&fp) {
            Some(r) => r.clone(),
            None => {
                let r = run(c)?;
                cache.insert(fp, r.clone());
                r
            }
        };
        let key = (c.table.clone(), c.label.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(result),
            None => groups.push((key, vec![result])),
        }
    }
    let rows = groups
        .into_iter()
        .map(|((table, label), rs)| {
            let n = rs.len() as f64;
            ComparisonRow {
                table,
                label,
                toggles: rs[0].config.toggles,
                seeds: rs.iter().map(|r| r.seed).collect(),
                det_map: mean_defined(rs.iter().map(|r| r.metrics.det_map)),
                map_miou: mean_defined(rs.iter().map(|r| r.metrics.map_miou)),
                occ_miou: mean_defined(rs.iter().map(|r| r.metrics.occ_miou)),
                initial_loss: rs.iter().map(|r| r.initial_loss.total).sum::<f64>() / n,
                final_loss: rs.iter().map(|r| r.final_loss.total).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

const COLUMNS: [&str; 19] = [
    "table",
    "label",
    "cpg",
    "tsfg_det",
    "tsfg_map",
    "tsfg_occ",
    "spa",
    "wise",
    "aware",
    "suppression",
    "spa_det",
    "spa_map",
    "seeds",
    "det_map",
    "map_miou",
    "occ_miou",
    "d_det_map",
    "d_map_miou",
    "d_occ_miou",
];

impl ComparisonTable {
    fn cells(&self) -> Vec<Vec<String>> {
        let b = |v: bool| if v { "1" } else { "0" }.to_string();
        self.rows
            .iter()
            .map(|r| {
                let base = self.rows.iter().find(|x| x.table == r.table);
                let t = &r.toggles;
                // sub-switches only count when their module runs
                let tsfg = t.use_tsfg_det || t.use_tsfg_map || t.use_tsfg_occ;
                vec![
                    r.table.clone(),
                    r.label.clone(),
                    b(t.use_cpg),
                    b(t.use_tsfg_det),
                    b(t.use_tsfg_map),
                    b(t.use_tsfg_occ),
                    b(t.use_spa),
                    b(tsfg && t.tsfg_parts.prototype_wise),
                    b(tsfg && t.tsfg_parts.prototype_aware),
                    b(tsfg && t.tsfg_parts.suppression),
                    b(t.use_spa && t.spa_sources.det),
                    b(t.use_spa && t.spa_sources.map),
                    r.seeds.len().to_string(),
                    fmt_opt(r.det_map),
                    fmt_opt(r.map_miou),
                    fmt_opt(r.occ_miou),
                    fmt_opt(base.and_then(|x| delta(r.det_map, x.det_map))),
                    fmt_opt(base.and_then(|x| delta(r.map_miou, x.map_miou))),
                    fmt_opt(base.and_then(|x| delta(r.occ_miou, x.occ_miou))),
                ]
            })
            .collect()
    }

    /// CSV with every column padded to a common width so that it also reads
    /// as a table. Labels containing commas are quoted.
    pub fn to_csv(&self) -> String {
        let quote = |s: &str| {
            if s.contains(',') {
                format!("\"{s}\"")
            } else {
                s.to_string()
            }
        };
        let mut rows = vec![COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        rows.extend(self.cells().into_iter().map(|r| r.iter().map(|c| quote(c)).collect()));
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, &w))| {
                    if j + 1 == r.len() {
                        c.clone()
                    } else {
                        format!("{c:<w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

/// Parses the aligned CSV back into trimmed cells.
pub fn parse_aligned_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|line| {
            let mut cells = Vec::new();
            let mut cur = String::new();
            let mut quoted = false;
            for ch in line.chars() {
                match ch {
                    '"' => quoted = !quoted,
                    ',' if !quoted => cells.push(std::mem::take(&mut cur).trim().to_string()),
                    c => cur.push(c),
                }
            }
            cells.push(cur.trim().to_string());
            cells
        })
        .collect()
}

/// Runner for [`compare`] that keeps each run under `root/<fingerprint>`
/// and reuses a finished `result.json` instead of retraining.
pub fn cached_runner(root: &Path, verbose: bool) -> impl FnMut(&LabeledConfig) -> Result<ExperimentResult> + '_ {
    move |c| {
        let fp = c.config.fingerprint();
        let dir = root.join(&fp[..16]);
        let done = dir.join("result.json");
        if let Ok(text) = std::fs::read_to_string(&done) {
            let r: ExperimentResult = serde_json::from_str(&text)?;
            if r.fingerprint == fp {
                if verbose {
                    eprintln!("[{} seed {}] cached", c.label, c.config.seed);
                }
                return Ok(r);
            }
        }
        let ckpt = dir.join("checkpoint.bin");
        let opts = RunOptions {
            out_dir: Some(dir),
            resume: ckpt.exists().then_some(ckpt),
            verbose,
        };
        run_experiment(&c.config, &opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;
    use crate::metrics::MetricsReport;

    fn stub(c: &LabeledConfig) -> Result<ExperimentResult> {
        let t = c.config.toggles;
        let score = 0.1 * t.use_cpg as u8 as f64 + 0.05 * t.use_spa as u8 as f64 + 0.001 * c.config.seed as f64;
        let loss = |total| LossBreakdown {
            total,
            ..LossBreakdown::default()
        };
        Ok(ExperimentResult {
            fingerprint: c.config.fingerprint(),
            label: t.label(),
            seed: c.config.seed,
            config: c.config.clone(),
            initial_loss: loss(4.0),
            final_loss: loss(1.0),
            trajectory: Vec::new(),
            metrics: MetricsReport {
                map_miou: Some(score),
                occ_miou: Some(2.0 * score),
                det_map: None,
                map_iou: Vec::new(),
                occ_iou: Vec::new(),
                det_ap: Vec::new(),
                thresholds: Vec::new(),
            },
            seconds: 0.0,
        })
    }

    #[test]
    fn matrices_have_the_expected_rows() {
        let main = matrix_rows(Matrix::Main);
        assert_eq!(main.len(), 7);
        assert_eq!(main[0].toggles, Toggles::BASELINE);
        assert_eq!(main[6].toggles, Toggles::FULL);
        assert_eq!(matrix_rows(Matrix::Tsfg).len(), 4);
        let spa = matrix_rows(Matrix::Spa);
        assert_eq!(spa.len(), 3);
        assert!(!spa[2].toggles.spa_sources.det && !spa[2].toggles.spa_sources.map);
        assert_eq!(matrix_rows(Matrix::All).len(), 14);
        for r in matrix_rows(Matrix::All) {
            r.toggles.validate().unwrap();
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let base = TrainConfig::smoke();
        let rows: Vec<LabeledConfig> = ["a", "b"]
            .iter()
            .map(|l| LabeledConfig {
                table: "t".into(),
                label: l.to_string(),
                config: base.clone(),
            })
            .collect();
        let mut calls = 0;
        let table = compare(&rows, |c| {
            calls += 1;
            stub(c)
        })
        .unwrap();
        assert_eq!(calls, 1, "identical configs run once");
        let cells = parse_aligned_csv(&table.to_csv());
        for row in &cells[1..] {
            assert_eq!(&row[16..], ["", "0.000000", "0.000000"]);
        }
    }

    #[test]
    fn seeds_are_averaged_and_deltas_are_against_the_first_row() {
        let spec = CompareSpec {
            schema_version: SCHEMA_VERSION,
            base: TrainConfig::smoke(),
            matrix: Matrix::Main,
            seeds: vec![0, 2],
        };
        let table = compare(&spec.configs(), stub).unwrap();
        assert_eq!(table.rows.len(), 7);
        assert_eq!(table.rows[0].seeds, vec![0, 2]);
        assert!((table.rows[0].map_miou.unwrap() - 0.001).abs() < 1e-15);
        let cells = parse_aligned_csv(&table.to_csv());
        assert_eq!(cells[0], COLUMNS);
        assert_eq!(cells[7][1], "full");
        assert_eq!(cells[7][17], "0.150000");
    }

    #[test]
    fn each_table_is_its_own_reference_and_inactive_parts_read_zero() {
        let spec = CompareSpec {
            schema_version: SCHEMA_VERSION,
            base: TrainConfig::smoke(),
            matrix: Matrix::All,
            seeds: vec![0],
        };
        let cells = parse_aligned_csv(&compare(&spec.configs(), stub).unwrap().to_csv());
        let first_tsfg = cells.iter().find(|r| r[0] == "tsfg").unwrap();
        assert_eq!(&first_tsfg[17..], ["0.000000", "0.000000"]);
        // baseline: no TSFG branch and no SPA, so no sub-switch is on
        assert_eq!(&cells[1][7..12], ["0", "0", "0", "0", "0"]);
        let full = cells.iter().find(|r| r[1] == "full").unwrap();
        assert_eq!(&full[7..12], ["1", "1", "1", "1", "1"]);
    }

    #[test]
    fn mismatched_scenes_are_rejected() {
        let a = TrainConfig::smoke();
        let mut b = a.clone();
        b.scene_config.noise_sigma = 0.5;
        let rows = vec![
            LabeledConfig { table: "t".into(), label: "a".into(), config: a.clone() },
            LabeledConfig { table: "t".into(), label: "b".into(), config: b },
        ];
        assert!(matches!(compare(&rows, stub), Err(Error::Config(_))));
        let mut c = a.clone();
        c.epochs += 1;
        let rows = vec![
            LabeledConfig { table: "t".into(), label: "a".into(), config: a },
            LabeledConfig { table: "t".into(), label: "c".into(), config: c },
        ];
        assert!(matches!(check_comparable(&rows), Err(Error::Config(_))));
    }

    #[test]
    fn csv_columns_line_up() {
        let spec = CompareSpec {
            schema_version: SCHEMA_VERSION,
            base: TrainConfig::smoke(),
            matrix: Matrix::All,
            seeds: vec![1],
        };
        let csv = compare(&spec.configs(), stub).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 15);
        let commas = |l: &str| l.char_indices().filter(|&(_, c)| c == ',').map(|(i, _)| i).collect::<Vec<_>>();
        let head = commas(lines[0]);
        for l in &lines[1..] {
            // the quoted label may hold commas of its own; compare from the right
            let c = commas(l);
            assert_eq!(c[c.len() - 17..], head[head.len() - 17..]);
        }
    }
}
