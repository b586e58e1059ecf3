//! Overall Metric aggregation and the published benchmark tables.
//!
//! Every track aggregate is a quadratic mean. Accuracy-style tracks work in
//! percent, the efficiency tracks in plain ratios.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binarize::BinarizerKind;
use crate::error::{Error, Result};

pub const TABLE1_CSV: &str = include_str!("../data/table1.csv");
pub const TABLE2_CSV: &str = include_str!("../data/table2.csv");
pub const CIFAR10C_CSV: &str = include_str!("../data/cifar10c.csv");

pub const TASK_ROWS: [&str; 8] = [
    "cifar10",
    "imagenet",
    "voc07",
    "coco17",
    "modelnet40",
    "shapenet",
    "glue",
    "speechcom",
];
pub const ARCH_ROWS: [&str; 3] = ["cnns", "transformers", "mlps"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Percent,
    Ratio,
    Seconds,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Percent => "percent",
            Unit::Ratio => "ratio",
            Unit::Seconds => "seconds",
        })
    }
}

/// A value tagged with its unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantity {
    pub value: f64,
    pub unit: Unit,
}

impl Quantity {
    pub fn percent(value: f64) -> Self {
        Quantity {
            value,
            unit: Unit::Percent,
        }
    }

    pub fn ratio(value: f64) -> Self {
        Quantity {
            value,
            unit: Unit::Ratio,
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn quadratic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quadratic_mean"));
    }
    check_finite(values)?;
    Ok((values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt())
}

/// Quadratic mean over quantities that must share one unit.
pub fn quadratic_mean_of(values: &[Quantity]) -> Result<Quantity> {
    let first = values.first().ok_or(Error::Empty("quadratic_mean_of"))?;
    if let Some(q) = values.iter().find(|q| q.unit != first.unit) {
        return Err(Error::MixedUnits(format!("{} and {}", first.unit, q.unit)));
    }
    let raw: Vec<f64> = values.iter().map(|q| q.value).collect();
    Ok(Quantity {
        value: quadratic_mean(&raw)?,
        unit: first.unit,
    })
}

fn require_unit(values: &[Quantity], unit: Unit) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|q| {
            if q.unit == unit {
                Ok(q.value)
            } else {
                Err(Error::MixedUnits(format!("expected {unit}, got {}", q.unit)))
            }
        })
        .collect()
}

/// Learning-task aggregate over per-task relative accuracies (percent).
pub fn om_task(per_task: &[f64]) -> Result<f64> {
    if per_task.len() > TASK_ROWS.len() {
        return Err(Error::param(format!(
            "om_task takes at most {} task means, got {}",
            TASK_ROWS.len(),
            per_task.len()
        )));
    }
    quadratic_mean(per_task)
}

pub fn om_task_of(per_task: &[Quantity]) -> Result<Quantity> {
    om_task(&require_unit(per_task, Unit::Percent)?).map(Quantity::percent)
}

pub fn om_arch(cnn: f64, transformer: f64, mlp: f64) -> Result<f64> {
    quadratic_mean(&[cnn, transformer, mlp])
}

/// Clean minus corrupted accuracy. Negative when the corruption helps.
pub fn corruption_gap(norm_acc: f64, corr_acc: f64) -> f64 {
    norm_acc - corr_acc
}

/// Paired full-precision and binarized gaps for one corruption task.
#[derive(Clone, Debug, PartialEq)]
pub struct GapTask {
    pub name: String,
    pub fp_gaps: Vec<f64>,
    pub bi_gaps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustOutcome {
    pub value: f64,
    pub per_task: Vec<f64>,
    /// `(task, cell)` pairs dropped because the binarized gap was zero.
    pub excluded: Vec<(usize, usize)>,
}

/// Quadratic mean over tasks of the mean gap ratio `G / G_bi`, in percent.
pub fn om_robust(tasks: &[GapTask]) -> Result<RobustOutcome> {
    if tasks.is_empty() {
        return Err(Error::Empty("om_robust"));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut excluded = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        if task.fp_gaps.len() != task.bi_gaps.len() {
            return Err(Error::shape(format!(
                "task {}: {} fp gaps vs {} binarized gaps",
                task.name,
                task.fp_gaps.len(),
                task.bi_gaps.len()
            )));
        }
        check_finite(&task.fp_gaps)?;
        check_finite(&task.bi_gaps)?;
        let mut ratios = Vec::with_capacity(task.fp_gaps.len());
        for (c, (&g, &gb)) in task.fp_gaps.iter().zip(&task.bi_gaps).enumerate() {
            if gb == 0.0 {
                log::warn!("om_robust: task {} cell {c} has zero binarized gap, excluded", task.name);
                excluded.push((t, c));
            } else {
                ratios.push(g / gb);
            }
        }
        if ratios.is_empty() {
            return Err(Error::ZeroDenominator(format!(
                "task {} has no nonzero binarized gap",
                task.name
            )));
        }
        per_task.push(100.0 * mean(&ratios));
    }
    Ok(RobustOutcome {
        value: quadratic_mean(&per_task)?,
        per_task,
        excluded,
    })
}

/// Quadratic mean of two percentages, the shape shared by the training track.
pub fn om_train_from_ratios(time_ratio_pct: f64, sensitivity_pct: f64) -> Result<f64> {
    quadratic_mean(&[time_ratio_pct, sensitivity_pct])
}

/// Training-consumption aggregate from raw times and hyperparameter stds.
pub fn om_train(
    fp_times: &[f64],
    bi_times: &[f64],
    fp_hyper_std: &[f64],
    bi_hyper_std: &[f64],
) -> Result<f64> {
    let time = mean_ratio_pct(fp_times, bi_times, "training time")?;
    let sens = mean_ratio_pct(fp_hyper_std, bi_hyper_std, "hyperparameter std")?;
    om_train_from_ratios(time, sens)
}

fn mean_ratio_pct(num: &[f64], den: &[f64], what: &str) -> Result<f64> {
    if num.is_empty() {
        return Err(Error::Empty("om_train"));
    }
    if num.len() != den.len() {
        return Err(Error::shape(format!(
            "{what}: {} vs {} entries",
            num.len(),
            den.len()
        )));
    }
    check_finite(num)?;
    check_finite(den)?;
    if num.iter().any(|&v| v < 0.0) {
        return Err(Error::param(format!("{what}: negative entry")));
    }
    if let Some(i) = den.iter().position(|&d| d <= 0.0) {
        return Err(Error::ZeroDenominator(format!(
            "{what}: binarized entry {i} is {}",
            den[i]
        )));
    }
    let ratios: Vec<f64> = num.iter().zip(den).map(|(a, b)| a / b).collect();
    Ok(100.0 * mean(&ratios))
}

/// Inference aggregate from per-device speedup and compression ratios.
pub fn om_infer(time_ratios: &[f64], storage_ratios: &[f64]) -> Result<f64> {
    if time_ratios.is_empty() || storage_ratios.is_empty() {
        return Err(Error::Empty("om_infer"));
    }
    check_finite(time_ratios)?;
    check_finite(storage_ratios)?;
    if time_ratios.iter().chain(storage_ratios).any(|&r| r <= 0.0) {
        return Err(Error::param("om_infer ratios must be positive"));
    }
    quadratic_mean(&[mean(time_ratios), mean(storage_ratios)])
}

pub fn om_infer_of(time_ratios: &[Quantity], storage_ratios: &[Quantity]) -> Result<Quantity> {
    om_infer(
        &require_unit(time_ratios, Unit::Ratio)?,
        &require_unit(storage_ratios, Unit::Ratio)?,
    )
    .map(Quantity::ratio)
}

pub fn om_comp(r_c: f64, r_s: f64) -> Result<f64> {
    if r_c <= 0.0 || r_s <= 0.0 {
        return Err(Error::param("om_comp ratios must be positive"));
    }
    quadratic_mean(&[r_c, r_s])
}

pub fn om_comp_of(r_c: Quantity, r_s: Quantity) -> Result<Quantity> {
    let v = require_unit(&[r_c, r_s], Unit::Ratio)?;
    om_comp(v[0], v[1]).map(Quantity::ratio)
}

/// Summed errors over severities divided by the baseline's summed errors.
pub fn corruption_error(errors: &[f64], baseline: &[f64]) -> Result<f64> {
    if errors.len() != baseline.len() {
        return Err(Error::shape(format!(
            "{} severities vs {} baseline severities",
            errors.len(),
            baseline.len()
        )));
    }
    if errors.is_empty() {
        return Err(Error::Empty("corruption_error"));
    }
    check_finite(errors)?;
    check_finite(baseline)?;
    let den: f64 = baseline.iter().sum();
    if den <= 0.0 {
        return Err(Error::ZeroDenominator("baseline error sum".into()));
    }
    Ok(errors.iter().sum::<f64>() / den)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub value: Option<f64>,
    pub unit: Unit,
    pub provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRecord {
    row: String,
    column: String,
    value: Option<f64>,
    unit: Unit,
    provenance: String,
}

/// Named rows by named columns, each cell tagged with unit and provenance.
/// Missing cells are stored explicitly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    rows: Vec<String>,
    columns: Vec<String>,
    cells: BTreeMap<(String, String), Cell>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, row: &str, column: &str, cell: Cell) -> Result<()> {
        if let Some(v) = cell.value {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(format!("cell {row}/{column} = {v}")));
            }
        }
        if !self.rows.iter().any(|r| r == row) {
            self.rows.push(row.to_owned());
        }
        if !self.columns.iter().any(|c| c == column) {
            self.columns.push(column.to_owned());
        }
        self.cells.insert((row.to_owned(), column.to_owned()), cell);
        Ok(())
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        self.cells.get(&(row.to_owned(), column.to_owned()))
    }

    /// `None` for a missing cell or one that was never inserted.
    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        self.cell(row, column).and_then(|c| c.value)
    }

    pub fn quantity(&self, row: &str, column: &str) -> Option<Quantity> {
        self.cell(row, column)
            .and_then(|c| c.value.map(|value| Quantity { value, unit: c.unit }))
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut table = MetricTable::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for rec in rdr.deserialize() {
            let rec: CellRecord = rec?;
            table.insert(
                &rec.row,
                &rec.column,
                Cell {
                    value: rec.value,
                    unit: rec.unit,
                    provenance: rec.provenance,
                },
            )?;
        }
        Ok(table)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            for col in &self.columns {
                if let Some(c) = self.cell(row, col) {
                    w.serialize(CellRecord {
                        row: row.clone(),
                        column: col.clone(),
                        value: c.value,
                        unit: c.unit,
                        provenance: c.provenance.clone(),
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn published_table1() -> Result<MetricTable> {
    MetricTable::from_csv(TABLE1_CSV.as_bytes())
}

pub fn published_table2() -> Result<MetricTable> {
    MetricTable::from_csv(TABLE2_CSV.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionCell {
    pub corruption: String,
    pub severity: u8,
    pub accuracy: Vec<f64>,
}

/// Clean and corrupted accuracies; column 0 is the full-precision model.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionTable {
    pub columns: Vec<String>,
    pub origin: Vec<f64>,
    pub cells: Vec<CorruptionCell>,
}

impl CorruptionTable {
    /// Reads `corruption,severity,published_name,<columns...>,provenance`
    /// with one `origin` row at severity 0. An `overall` row is ignored.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 5 {
            return Err(Error::Parse("corruption table needs at least two model columns".into()));
        }
        let columns: Vec<String> = headers.iter().skip(3).take(headers.len() - 4).map(String::from).collect();
        let mut origin = None;
        let mut cells = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("record {line}: {s:?}: {e}")))
            };
            let acc = (0..columns.len()).map(|i| parse(&rec[3 + i])).collect::<Result<Vec<_>>>()?;
            match &rec[0] {
                "origin" => origin = Some(acc),
                "overall" => {}
                name => {
                    let severity = rec[1]
                        .parse::<u8>()
                        .map_err(|e| Error::Parse(format!("record {line}: severity: {e}")))?;
                    cells.push(CorruptionCell {
                        corruption: name.to_owned(),
                        severity,
                        accuracy: acc,
                    });
                }
            }
        }
        let origin = origin.ok_or_else(|| Error::Parse("corruption table has no origin row".into()))?;
        Ok(CorruptionTable {
            columns,
            origin,
            cells,
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn gaps(&self, column: usize) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| corruption_gap(self.origin[column], c.accuracy[column]))
            .collect()
    }

    /// Every corruption and severity pooled as one task against column 0.
    pub fn om_corr(&self, column: usize) -> Result<RobustOutcome> {
        if column == 0 || column >= self.columns.len() {
            return Err(Error::param(format!("column {column} is not a binarized model")));
        }
        om_robust(&[GapTask {
            name: self.columns[column].clone(),
            fp_gaps: self.gaps(0),
            bi_gaps: self.gaps(column),
        }])
    }
}

pub fn published_cifar10c() -> Result<CorruptionTable> {
    CorruptionTable::from_csv(CIFAR10C_CSV.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    OmTask,
    OmArch,
    OmCorr,
    OmTrain,
    OmComp,
    OmInfer,
}

impl Formula {
    pub const ALL: [Formula; 6] = [
        Formula::OmTask,
        Formula::OmArch,
        Formula::OmCorr,
        Formula::OmTrain,
        Formula::OmComp,
        Formula::OmInfer,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Formula::OmTask => "om_task",
            Formula::OmArch => "om_arch",
            Formula::OmCorr => "om_corr",
            Formula::OmTrain => "om_train",
            Formula::OmComp => "om_comp",
            Formula::OmInfer => "om_infer",
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            Formula::OmComp | Formula::OmInfer => Unit::Ratio,
            _ => Unit::Percent,
        }
    }

    pub fn expression(self) -> &'static str {
        match self {
            Formula::OmTask => "sqrt(mean(task_i^2))",
            Formula::OmArch => "sqrt((cnn^2 + transformer^2 + mlp^2) / 3)",
            Formula::OmCorr => "sqrt(mean_task(mean(G_fp / G_bi))^2), G = clean - corrupted",
            Formula::OmTrain => "sqrt((E(T/T_bi)^2 + E(std/std_bi)^2) / 2)",
            Formula::OmComp => "sqrt((r_c^2 + r_s^2) / 2)",
            Formula::OmInfer => "sqrt((E(T/T_bi)^2 + E(S/S_bi)^2) / 2)",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub formula: Formula,
    pub column: String,
    /// `None` when every input cell was missing.
    pub value: Option<f64>,
    pub cells_used: usize,
    pub cells_missing: usize,
    pub published: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OmReport {
    pub entries: Vec<ReportEntry>,
}

fn collect_present(table: &MetricTable, rows: &[&str], column: &str) -> (Vec<Quantity>, usize) {
    let mut present = Vec::new();
    let mut missing = 0;
    for r in rows {
        match table.quantity(r, column) {
            Some(q) => present.push(q),
            None => missing += 1,
        }
    }
    (present, missing)
}

impl OmReport {
    /// Recomputes every aggregate from its input rows and pairs it with the
    /// published cell of the same name.
    pub fn recompute(t1: &MetricTable, t2: &MetricTable, corr: &CorruptionTable) -> Result<Self> {
        let mut entries = Vec::new();
        for kind in BinarizerKind::ALL {
            let col = kind.id();
            let mut push = |formula: Formula, table: &MetricTable, rows: &[&str], f: &dyn Fn(&[Quantity]) -> Result<Quantity>| -> Result<()> {
                let (present, missing) = collect_present(table, rows, col);
                let value = if present.len() == rows.len() || (formula == Formula::OmTask && !present.is_empty()) {
                    let q = f(&present)?;
                    if q.unit != formula.unit() {
                        return Err(Error::MixedUnits(format!("{} produced {}", formula.id(), q.unit)));
                    }
                    Some(q.value)
                } else {
                    None
                };
                entries.push(ReportEntry {
                    formula,
                    column: col.to_owned(),
                    value,
                    cells_used: present.len(),
                    cells_missing: missing,
                    published: table.value(formula.id(), col),
                });
                Ok(())
            };
            push(Formula::OmTask, t1, &TASK_ROWS, &|q| om_task_of(q))?;
            push(Formula::OmArch, t1, &ARCH_ROWS, &|q| {
                let v = require_unit(q, Unit::Percent)?;
                om_arch(v[0], v[1], v[2]).map(Quantity::percent)
            })?;
            push(Formula::OmTrain, t2, &["time_cost", "sensitivity"], &|q| {
                let v = require_unit(q, Unit::Percent)?;
                om_train_from_ratios(v[0], v[1]).map(Quantity::percent)
            })?;
            push(Formula::OmComp, t2, &["compression", "speedup"], &|q| om_comp_of(q[0], q[1]))?;
            push(Formula::OmInfer, t2, &["hw_speedup", "hw_compression"], &|q| {
                om_infer_of(&q[..1], &q[1..])
            })?;
            let ci = corr
                .column_index(col)
                .ok_or_else(|| Error::Parse(format!("corruption table lacks column {col}")))?;
            let outcome = corr.om_corr(ci)?;
            entries.push(ReportEntry {
                formula: Formula::OmCorr,
                column: col.to_owned(),
                value: Some(outcome.value),
                cells_used: corr.cells.len() - outcome.excluded.len(),
                cells_missing: outcome.excluded.len(),
                published: t1.value(Formula::OmCorr.id(), col),
            });
        }
        Ok(OmReport { entries })
    }

    pub fn get(&self, formula: Formula, column: &str) -> Option<&ReportEntry> {
        self.entries
            .iter()
            .find(|e| e.formula == formula && e.column == column)
    }

    /// Largest |recomputed - published| over entries that have both.
    pub fn max_abs_error(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| Some((e.value? - e.published?).abs()))
            .fold(0.0, f64::max)
    }

    /// One `formula column value` line per entry, preceded by the formulas.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in Formula::ALL {
            let _ = writeln!(s, "# {} [{}] = {}", f.id(), f.unit(), f.expression());
        }
        let _ = writeln!(s, "# corruption gaps keep their sign; negative gaps pass through the ratio");
        for e in &self.entries {
            let fmt_opt = |v: Option<f64>| v.map_or_else(|| "missing".to_owned(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{} {} value={} published={} used={} missing={}",
                e.formula.id(),
                e.column,
                fmt_opt(e.value),
                fmt_opt(e.published),
                e.cells_used,
                e.cells_missing
            );
        }
        s
    }
}
