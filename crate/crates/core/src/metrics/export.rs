use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvaluationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" | "table" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

const UNDEFINED_NOTE: &str = "* denominator is zero; shown as 0.00";

fn rate(v: f64, undefined: bool) -> String {
    if undefined {
        format!("{v:.2}*")
    } else {
        format!("{v:.2}")
    }
}

fn text(report: &EvaluationReport) -> String {
    let labels = ["Accuracy", "Macro Avg.", "Weighted Avg."];
    let name_w = report
        .per_class
        .iter()
        .map(|c| c.name.len())
        .chain(labels.iter().map(|l| l.len()))
        .chain(std::iter::once("Class".len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let row = |out: &mut String, name: &str, cells: [&str; 5]| {
        let _ = writeln!(
            out,
            "{name:<name_w$}  {:>9}  {:>7}  {:>8}  {:>10}  {:>8}",
            cells[0], cells[1], cells[2], cells[3], cells[4]
        );
    };
    row(&mut out, "Class", ["Precision", "Recall", "F1-Score", "Accuracy %", "# Images"]);
    let mut footnote = false;
    for c in &report.per_class {
        let f1_undefined = c.precision_undefined && c.recall_undefined;
        footnote |= c.precision_undefined || c.recall_undefined;
        row(
            &mut out,
            &c.name,
            [
                &rate(c.precision, c.precision_undefined),
                &rate(c.recall, c.recall_undefined),
                &rate(c.f1, f1_undefined),
                &rate(c.accuracy_pct, c.recall_undefined),
                &c.support.to_string(),
            ],
        );
    }
    let acc = format!("{:.2}", report.overall_accuracy_pct);
    let total = report.total_support.to_string();
    row(&mut out, labels[0], ["", "", "", &acc, &total]);
    for (label, avg) in [(labels[1], &report.macro_avg), (labels[2], &report.weighted_avg)] {
        row(
            &mut out,
            label,
            [
                &format!("{:.2}", avg.precision),
                &format!("{:.2}", avg.recall),
                &format!("{:.2}", avg.f1),
                &acc,
                &total,
            ],
        );
    }
    let weighting = serde_json::to_value(report.kappa_weighting)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let _ = writeln!(out, "\nCohen's kappa ({weighting}): {:.4}", report.kappa);
    if footnote {
        let _ = writeln!(out, "{UNDEFINED_NOTE}");
    }
    out
}

fn csv(report: &EvaluationReport) -> String {
    let mut out = String::from("row,precision,recall,f1,accuracy_pct,support,kappa\n");
    for c in &report.per_class {
        let name = if c.name.contains([',', '"']) {
            format!("\"{}\"", c.name.replace('"', "\"\""))
        } else {
            c.name.clone()
        };
        let _ = writeln!(out, "{name},{},{},{},{},{},", c.precision, c.recall, c.f1, c.accuracy_pct, c.support);
    }
    let _ = writeln!(out, "accuracy,,,,{},{},", report.overall_accuracy_pct, report.total_support);
    for (name, a) in [("macro_avg", &report.macro_avg), ("weighted_avg", &report.weighted_avg)] {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},",
            a.precision, a.recall, a.f1, report.overall_accuracy_pct, report.total_support
        );
    }
    let _ = writeln!(out, "kappa,,,,,,{}", report.kappa);
    out
}

/// Renders a report. The text table rounds to 2 decimals; JSON and CSV keep
/// full precision.
pub fn export_report(report: &EvaluationReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Text => text(report).into_bytes(),
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
            v.push(b'\n');
            v
        }
        ReportFormat::Csv => csv(report).into_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tests::table_matrix;
    use crate::metrics::{report, ConfusionMatrix, KappaWeighting};
    use crate::survey::Scheme;

    #[test]
    fn text_table_layout() {
        let names = Scheme::FourClass.class_names();
        let rep = report(&table_matrix(), KappaWeighting::Quadratic, Some(&names)).unwrap();
        let t = String::from_utf8(export_report(&rep, ReportFormat::Text)).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Class"));
        assert!(lines[1].starts_with("0 - 3") && lines[1].contains("0.92") && lines[1].contains("94.35") && lines[1].ends_with("690"));
        assert!(lines[4].starts_with("12+"));
        assert!(lines[5].starts_with("Accuracy") && lines[5].contains("89.40") && lines[5].ends_with("1189"));
        assert!(lines[6].starts_with("Macro Avg.") && lines[6].contains("0.84"));
        assert!(lines[7].starts_with("Weighted Avg.") && lines[7].contains("0.89"));
        assert!(!t.contains('*'));
    }

    #[test]
    fn zero_support_marked() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![1, 2, 0], vec![0, 0, 0]]).unwrap();
        let rep = report(&cm, KappaWeighting::Quadratic, None).unwrap();
        let t = String::from_utf8(export_report(&rep, ReportFormat::Text)).unwrap();
        let row3 = t.lines().nth(3).unwrap();
        assert!(row3.starts_with('3') && row3.contains("0.00*"), "{row3}");
        assert!(t.contains(UNDEFINED_NOTE));
    }

    #[test]
    fn json_and_csv() {
        let rep = report(&table_matrix(), KappaWeighting::Quadratic, None).unwrap();
        let back: EvaluationReport = serde_json::from_slice(&export_report(&rep, ReportFormat::Json)).unwrap();
        assert_eq!(back, rep);
        let csv = String::from_utf8(export_report(&rep, ReportFormat::Csv)).unwrap();
        let mut rdr = ::csv::Reader::from_reader(csv.as_bytes());
        let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4 + 4);
        assert_eq!(&rows[0][0], "1");
        assert_eq!(rows[0][3].parse::<f64>().unwrap(), rep.per_class[0].f1);
        assert_eq!(&rows[7][0], "kappa");
    }
}
