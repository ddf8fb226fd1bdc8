//! Held-out evaluation: overall, per-class, and shot-group accuracies, plus
//! training-side diagnostics (disambiguation rate, prior error) and the
//! line-delimited report format consumed by the `report` subcommand.
//!
//! Shot groups follow a contiguous-tercile rule: classes sorted by training
//! count descending, first tercile Many, last tercile Few, remainder (and
//! the middle) Medium. The rule is recorded in every report header.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array1;

use crate::data::PllDataset;
use crate::disambig::{ClassPrior, ConfidenceMatrix};
use crate::error::{Error, Result};
use crate::model::{forward, ClassifierParams};

/// Shot-group assignment of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub fn label(self) -> &'static str {
        match self {
            ShotGroup::Many => "many",
            ShotGroup::Medium => "medium",
            ShotGroup::Few => "few",
        }
    }
}

/// Accuracy per shot group; `None` when no test sample falls in the group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Full evaluation record. The training-side diagnostics are `None` unless
/// filled in from trainer state.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub group_accuracy: GroupAccuracy,
    /// Per-class test accuracy; `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Shot-group assignment per class, from the training counts.
    pub class_groups: Vec<ShotGroup>,
    pub disambiguation_rate: Option<f64>,
    pub prior_error: Option<f64>,
}

/// Contiguous-tercile shot groups over classes sorted by training count
/// descending (ties by class index). `L mod 3` leftovers join Medium.
pub fn shot_groups(train_counts: &[usize]) -> Vec<ShotGroup> {
    let l = train_counts.len();
    let base = l / 3;
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(train_counts[j]), j));
    let mut groups = vec![ShotGroup::Medium; l];
    for (rank, &class) in order.iter().enumerate() {
        groups[class] = if rank < base {
            ShotGroup::Many
        } else if rank >= l - base {
            ShotGroup::Few
        } else {
            ShotGroup::Medium
        };
    }
    groups
}

/// Unrestricted row argmax (no candidate mask at test time), ties low.
fn predict(params: &ClassifierParams, ds: &PllDataset) -> Result<Vec<usize>> {
    let (_, probs) = forward(params, ds.features.view())?;
    Ok((0..probs.nrows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Evaluates on a labeled test set. `train_counts` (per-class training-set
/// sizes) define the Many/Medium/Few split of the classes.
pub fn evaluate(
    params: &ClassifierParams,
    test: &PllDataset,
    train_counts: &[usize],
) -> Result<EvalReport> {
    if test.sample_count() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let l = test.class_count();
    if train_counts.len() != l {
        return Err(Error::shape(format!(
            "train counts cover {} classes, test set has {l}",
            train_counts.len()
        )));
    }
    let predictions = predict(params, test)?;
    let mut class_total = vec![0usize; l];
    let mut class_hit = vec![0usize; l];
    for (i, &y) in test.true_labels.iter().enumerate() {
        class_total[y as usize] += 1;
        if predictions[i] == y as usize {
            class_hit[y as usize] += 1;
        }
    }
    let overall = class_hit.iter().sum::<usize>() as f64 / test.sample_count() as f64;
    let per_class: Vec<Option<f64>> = (0..l)
        .map(|j| (class_total[j] > 0).then(|| class_hit[j] as f64 / class_total[j] as f64))
        .collect();

    let groups = shot_groups(train_counts);
    let group_of = |g: ShotGroup| {
        let (mut hit, mut total) = (0usize, 0usize);
        for j in 0..l {
            if groups[j] == g {
                hit += class_hit[j];
                total += class_total[j];
            }
        }
        (total > 0).then(|| hit as f64 / total as f64)
    };
    Ok(EvalReport {
        overall_accuracy: overall,
        group_accuracy: GroupAccuracy {
            many: group_of(ShotGroup::Many),
            medium: group_of(ShotGroup::Medium),
            few: group_of(ShotGroup::Few),
        },
        per_class_accuracy: per_class,
        class_groups: groups,
        disambiguation_rate: None,
        prior_error: None,
    })
}

/// Fraction of rows whose confidence argmax (ties low) hits the true label.
pub fn disambiguation_rate(p: &ConfidenceMatrix, true_labels: &[u32]) -> Result<f64> {
    if p.sample_count() != true_labels.len() {
        return Err(Error::shape(format!(
            "confidence rows {} vs labels {}",
            p.sample_count(),
            true_labels.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::invalid("no rows to score"));
    }
    let hits = true_labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| p.argmax_row(*i) == y as usize)
        .count();
    Ok(hits as f64 / true_labels.len() as f64)
}

/// L1 distance between the estimated prior and empirical class frequencies.
pub fn prior_error(prior: &ClassPrior, class_counts: &[usize]) -> Result<f64> {
    if prior.values.len() != class_counts.len() {
        return Err(Error::shape(format!(
            "prior has {} entries for {} classes",
            prior.values.len(),
            class_counts.len()
        )));
    }
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no samples behind class counts"));
    }
    let freq = Array1::from_iter(class_counts.iter().map(|&c| c as f64 / total as f64));
    Ok((&prior.values - &freq).mapv(f64::abs).sum())
}

const REPORT_MAGIC: &str = "GBPLLEVAL1";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "na".to_string(),
    }
}

/// Renders the line-delimited report format (exact text is stable for a
/// given report, so byte comparison of files is meaningful).
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{REPORT_MAGIC}");
    let _ = writeln!(
        out,
        "# groups: contiguous terciles of classes by training count, descending; remainder medium"
    );
    let _ = writeln!(out, "overall {}", report.overall_accuracy);
    let _ = writeln!(out, "group many {}", fmt_opt(report.group_accuracy.many));
    let _ = writeln!(out, "group medium {}", fmt_opt(report.group_accuracy.medium));
    let _ = writeln!(out, "group few {}", fmt_opt(report.group_accuracy.few));
    for (j, (acc, group)) in report
        .per_class_accuracy
        .iter()
        .zip(&report.class_groups)
        .enumerate()
    {
        let _ = writeln!(out, "class {j} {} {}", group.label(), fmt_opt(*acc));
    }
    let _ = writeln!(out, "disambiguation {}", fmt_opt(report.disambiguation_rate));
    let _ = writeln!(out, "prior_error {}", fmt_opt(report.prior_error));
    out
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, render_report(report)).map_err(|e| Error::io(path, e))
}

fn parse_opt(path: &Path, token: &str) -> Result<Option<f64>> {
    if token == "na" {
        return Ok(None);
    }
    token
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::format(path, format!("bad numeric field `{token}`")))
}

/// Reads a report file back into a structured record.
pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_MAGIC) {
        return Err(Error::format(path, "missing GBPLLEVAL1 magic"));
    }
    let mut overall = None;
    let mut group = GroupAccuracy::default();
    let mut classes: Vec<(usize, ShotGroup, Option<f64>)> = Vec::new();
    let mut disambiguation = None;
    let mut prior_err = None;
    for line in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["overall", v] => overall = parse_opt(path, v)?,
            ["group", "many", v] => group.many = parse_opt(path, v)?,
            ["group", "medium", v] => group.medium = parse_opt(path, v)?,
            ["group", "few", v] => group.few = parse_opt(path, v)?,
            ["class", j, g, v] => {
                let idx: usize = j
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad class index `{j}`")))?;
                let shot = match *g {
                    "many" => ShotGroup::Many,
                    "medium" => ShotGroup::Medium,
                    "few" => ShotGroup::Few,
                    other => {
                        return Err(Error::format(path, format!("unknown group `{other}`")))
                    }
                };
                classes.push((idx, shot, parse_opt(path, v)?));
            }
            ["disambiguation", v] => disambiguation = parse_opt(path, v)?,
            ["prior_error", v] => prior_err = parse_opt(path, v)?,
            _ => return Err(Error::format(path, format!("unrecognized line `{line}`"))),
        }
    }
    classes.sort_by_key(|&(j, _, _)| j);
    if classes.iter().enumerate().any(|(pos, &(j, _, _))| pos != j) {
        return Err(Error::format(path, "class records are not dense"));
    }
    Ok(EvalReport {
        overall_accuracy: overall.ok_or_else(|| Error::format(path, "missing overall line"))?,
        group_accuracy: group,
        per_class_accuracy: classes.iter().map(|&(_, _, a)| a).collect(),
        class_groups: classes.iter().map(|&(_, g, _)| g).collect(),
        disambiguation_rate: disambiguation,
        prior_error: prior_err,
    })
}

/// Side-by-side table over several report files, for the `report` command.
pub fn comparison_table(names: &[String], reports: &[EvalReport]) -> String {
    let fmt_cell = |v: Option<f64>| match v {
        Some(v) => format!("{:>10.4}", v),
        None => format!("{:>10}", "na"),
    };
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "metric");
    for name in names {
        let _ = write!(out, "{:>10}", name);
    }
    let _ = writeln!(out);
    type Metric = fn(&EvalReport) -> Option<f64>;
    let rows: [(&str, Metric); 6] = [
        ("overall", |r| Some(r.overall_accuracy)),
        ("many", |r| r.group_accuracy.many),
        ("medium", |r| r.group_accuracy.medium),
        ("few", |r| r.group_accuracy.few),
        ("disambiguation", |r| r.disambiguation_rate),
        ("prior_error", |r| r.prior_error),
    ];
    for (label, extract) in rows {
        let _ = write!(out, "{:<16}", label);
        for report in reports {
            let _ = write!(out, "{}", fmt_cell(extract(report)));
        }
        let _ = writeln!(out);
    }
    out
}
