//! Agreement between predicted levels and human labels, and threshold
//! sweeps over stored segment counts.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{HumanLabel, Level};
use crate::pipeline::{classify, ClassificationResult};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no usable label/prediction pairs after filtering")]
    EmptyAfterFilter,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no human label for response `{0}`")]
    MissingLabel(String),
    #[error("thresholds must be >= 1 and strictly increasing, got {0:?}")]
    BadThresholds(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    /// Drop responses labelled incorrect.
    #[default]
    ExcludeIncorrect,
    /// Keep them as a third gold class that never agrees with a prediction.
    IncludeAll,
}

impl std::str::FromStr for FilterPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "exclude_incorrect" => Ok(FilterPolicy::ExcludeIncorrect),
            "include_all" => Ok(FilterPolicy::IncludeAll),
            other => Err(format!("unknown policy `{other}` (exclude-incorrect, include-all)")),
        }
    }
}

/// Counts indexed `(gold, predicted)`. The `i*` cells hold gold-incorrect
/// responses and stay zero under [`FilterPolicy::ExcludeIncorrect`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub mm: u64,
    pub mr: u64,
    pub rm: u64,
    pub rr: u64,
    pub im: u64,
    pub ir: u64,
}

impl ConfusionMatrix {
    pub fn n(&self) -> u64 {
        self.mm + self.mr + self.rm + self.rr + self.im + self.ir
    }

    pub fn add(&mut self, gold: Option<Level>, predicted: Level) {
        let cell = match (gold, predicted) {
            (Some(Level::Multistructural), Level::Multistructural) => &mut self.mm,
            (Some(Level::Multistructural), Level::Relational) => &mut self.mr,
            (Some(Level::Relational), Level::Multistructural) => &mut self.rm,
            (Some(Level::Relational), Level::Relational) => &mut self.rr,
            (None, Level::Multistructural) => &mut self.im,
            (None, Level::Relational) => &mut self.ir,
        };
        *cell += 1;
    }

    fn gold_total(&self, level: Level) -> u64 {
        match level {
            Level::Multistructural => self.mm + self.mr,
            Level::Relational => self.rm + self.rr,
        }
    }

    fn predicted_total(&self, level: Level) -> u64 {
        match level {
            Level::Multistructural => self.mm + self.rm + self.im,
            Level::Relational => self.mr + self.rr + self.ir,
        }
    }

    fn hits(&self, level: Level) -> u64 {
        match level {
            Level::Multistructural => self.mm,
            Level::Relational => self.rr,
        }
    }
}

pub fn build_confusion(pairs: &[(HumanLabel, Level)], policy: FilterPolicy) -> Result<ConfusionMatrix, EvalError> {
    let mut m = ConfusionMatrix::default();
    for &(label, predicted) in pairs {
        match (label.level(), policy) {
            (None, FilterPolicy::ExcludeIncorrect) => {}
            (gold, _) => m.add(gold, predicted),
        }
    }
    if m.n() == 0 {
        return Err(EvalError::EmptyAfterFilter);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub kappa: f64,
    pub p_o: f64,
    pub p_e: f64,
    pub warnings: Vec<String>,
}

pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<Agreement, EvalError> {
    let n = m.n();
    if n == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let nf = n as f64;
    let p_o = (m.mm + m.rr) as f64 / nf;
    let chance: u128 = [Level::Multistructural, Level::Relational]
        .iter()
        .map(|&c| m.gold_total(c) as u128 * m.predicted_total(c) as u128)
        .sum();
    let p_e = [Level::Multistructural, Level::Relational]
        .iter()
        .map(|&c| (m.gold_total(c) as f64 / nf) * (m.predicted_total(c) as f64 / nf))
        .sum::<f64>();
    let mut warnings = Vec::new();
    // exact integer test: p_e == 1 iff sum(row*col) == n^2
    let kappa = if chance == (n as u128) * (n as u128) {
        warnings.push("DegenerateMarginals: expected agreement is 1".to_string());
        if m.mm + m.rr == n {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(Agreement {
        kappa,
        p_o,
        p_e,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrfReport {
    pub positive_class: Level,
    pub headline: Prf,
    pub multistructural: Prf,
    pub relational: Prf,
    pub macro_avg: Prf,
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64, what: &str, class: Level, warnings: &mut Vec<String>) -> f64 {
    if den == 0 {
        warnings.push(format!("{what} for {class} has a zero denominator; reported as 0"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn class_prf(m: &ConfusionMatrix, class: Level, warnings: &mut Vec<String>) -> Prf {
    let tp = m.hits(class);
    let precision = ratio(tp, m.predicted_total(class), "precision", class, warnings);
    let recall = ratio(tp, m.gold_total(class), "recall", class, warnings);
    Prf {
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

pub fn prf(m: &ConfusionMatrix, positive_class: Level) -> Result<PrfReport, EvalError> {
    if m.n() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut warnings = Vec::new();
    let multistructural = class_prf(m, Level::Multistructural, &mut warnings);
    let relational = class_prf(m, Level::Relational, &mut warnings);
    let macro_avg = Prf {
        precision: (multistructural.precision + relational.precision) / 2.0,
        recall: (multistructural.recall + relational.recall) / 2.0,
        f1: (multistructural.f1 + relational.f1) / 2.0,
    };
    let headline = match positive_class {
        Level::Multistructural => multistructural,
        Level::Relational => relational,
    };
    Ok(PrfReport {
        positive_class,
        headline,
        multistructural,
        relational,
        macro_avg,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    pub agreement: Agreement,
    pub prf: PrfReport,
}

pub fn metrics(m: &ConfusionMatrix, positive_class: Level) -> Result<MetricSet, EvalError> {
    Ok(MetricSet {
        agreement: cohen_kappa(m)?,
        prf: prf(m, positive_class)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatrixCells {
    pub mm: u64,
    pub mr: u64,
    pub rm: u64,
    pub rr: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub im: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ir: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub threshold: u32,
    pub matrix: MatrixCells,
    pub agreement: f64,
    pub kappa: f64,
    pub p_o: f64,
    pub p_e: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: FilterPolicy,
    pub positive_class: Level,
    pub rows: Vec<ReportRow>,
}

/// Which stored count a sweep thresholds: after rules, or before any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountSource {
    #[default]
    PostProcessed,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub thresholds: Vec<u32>,
    pub counts: CountSource,
    pub policy: FilterPolicy,
    pub positive_class: Level,
    /// One block of rows per question instead of pooling.
    pub group_by_question: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            thresholds: vec![1, 2, 3, 4],
            counts: CountSource::PostProcessed,
            policy: FilterPolicy::ExcludeIncorrect,
            positive_class: Level::Multistructural,
            group_by_question: false,
        }
    }
}

/// Labels keyed by response id: the explicit map wins, otherwise the label
/// stored on the result.
pub fn resolve_labels(
    results: &[ClassificationResult],
    explicit: Option<&HashMap<String, HumanLabel>>,
) -> Result<Vec<HumanLabel>, EvalError> {
    results
        .iter()
        .map(|r| {
            explicit
                .and_then(|m| m.get(&r.response_id).copied())
                .or(r.human_label)
                .ok_or_else(|| EvalError::MissingLabel(r.response_id.clone()))
        })
        .collect()
}

/// Reclassifies stored counts at each threshold. No backend calls.
pub fn sweep(
    results: &[ClassificationResult],
    labels: &[HumanLabel],
    options: &SweepOptions,
) -> Result<EvalReport, EvalError> {
    let ok = !options.thresholds.is_empty()
        && options.thresholds[0] >= 1
        && options.thresholds.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(EvalError::BadThresholds(options.thresholds.clone()));
    }
    assert_eq!(results.len(), labels.len(), "one label per result");

    let mut groups: BTreeMap<Option<&str>, Vec<(usize, HumanLabel)>> = BTreeMap::new();
    for (r, &label) in results.iter().zip(labels) {
        let key = options.group_by_question.then_some(r.question_id.as_str());
        let count = match options.counts {
            CountSource::PostProcessed => r.post_count,
            CountSource::Raw => r.raw_count,
        };
        groups.entry(key).or_default().push((count, label));
    }
    if groups.is_empty() {
        return Err(EvalError::EmptyAfterFilter);
    }

    let mut rows = Vec::new();
    for (group, items) in &groups {
        for &threshold in &options.thresholds {
            let pairs: Vec<(HumanLabel, Level)> = items
                .iter()
                .map(|&(count, label)| (label, classify(count, threshold).expect("threshold >= 1")))
                .collect();
            let m = build_confusion(&pairs, options.policy)?;
            let ms = metrics(&m, options.positive_class)?;
            let include_all = options.policy == FilterPolicy::IncludeAll;
            let mut warnings = ms.agreement.warnings.clone();
            warnings.extend(ms.prf.warnings.iter().cloned());
            rows.push(ReportRow {
                group: group.map(str::to_string),
                threshold,
                matrix: MatrixCells {
                    mm: m.mm,
                    mr: m.mr,
                    rm: m.rm,
                    rr: m.rr,
                    im: include_all.then_some(m.im),
                    ir: include_all.then_some(m.ir),
                },
                agreement: ms.agreement.p_o,
                kappa: ms.agreement.kappa,
                p_o: ms.agreement.p_o,
                p_e: ms.agreement.p_e,
                precision: ms.prf.headline.precision,
                recall: ms.prf.headline.recall,
                f1: ms.prf.headline.f1,
                macro_f1: ms.prf.macro_avg.f1,
                warnings,
            });
        }
    }
    Ok(EvalReport {
        policy: options.policy,
        positive_class: options.positive_class,
        rows,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let grouped = self.rows.iter().any(|r| r.group.is_some());
        let include_all = self.policy == FilterPolicy::IncludeAll;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = Vec::new();
        if grouped {
            header.push("group");
        }
        header.extend(["threshold", "mm", "mr", "rm", "rr"]);
        if include_all {
            header.extend(["im", "ir"]);
        }
        header.extend(["agreement", "kappa", "p_o", "p_e", "precision", "recall", "f1", "macro_f1"]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = Vec::new();
            if grouped {
                rec.push(r.group.clone().unwrap_or_default());
            }
            rec.push(r.threshold.to_string());
            rec.extend([r.matrix.mm, r.matrix.mr, r.matrix.rm, r.matrix.rr].map(|c| c.to_string()));
            if include_all {
                rec.extend([r.matrix.im, r.matrix.ir].map(|c| c.unwrap_or(0).to_string()));
            }
            rec.extend(
                [r.agreement, r.kappa, r.p_o, r.p_e, r.precision, r.recall, r.f1, r.macro_f1].map(fmt_float),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Same float spelling as the JSON report.
fn fmt_float(x: f64) -> String {
    serde_json::to_string(&x).expect("finite float")
}
