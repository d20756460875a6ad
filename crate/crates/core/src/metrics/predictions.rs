//! Prediction files: `sample_id,true_class,pred_class[,score_1..score_k]`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub true_class: u8,
    pub pred_class: u8,
    /// Per-class scores, empty when the file has none.
    pub scores: Vec<f64>,
}

fn bad(line: usize, message: impl Into<String>) -> MetricsError {
    MetricsError::Predictions {
        line,
        message: message.into(),
    }
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<PredictionRow>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let fixed = ["sample_id", "true_class", "pred_class"];
    if headers.len() < 3 || headers.iter().take(3).ne(fixed) {
        return Err(bad(1, "header must start with sample_id,true_class,pred_class"));
    }
    for (i, h) in headers.iter().skip(3).enumerate() {
        if h != format!("score_{}", i + 1) {
            return Err(bad(1, format!("expected score_{} but found {h:?}", i + 1)));
        }
    }
    let width = headers.len() - 3;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let class = |j: usize| -> Result<u8, MetricsError> {
            rec[j].parse().map_err(|_| bad(line, format!("bad class {:?}", &rec[j])))
        };
        let scores = (3..3 + width)
            .map(|j| {
                rec[j]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(line, format!("bad score {:?}", &rec[j])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(PredictionRow {
            sample_id: rec[0].to_string(),
            true_class: class(1)?,
            pred_class: class(2)?,
            scores,
        });
    }
    Ok(rows)
}

pub fn write_predictions<W: Write>(rows: &[PredictionRow], w: W) -> Result<(), csv::Error> {
    let width = rows.first().map_or(0, |r| r.scores.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["sample_id".to_string(), "true_class".into(), "pred_class".into()];
    header.extend((1..=width).map(|i| format!("score_{i}")));
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone(), r.true_class.to_string(), r.pred_class.to_string()];
        rec.extend(r.scores.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_scores() {
        let rows = vec![
            PredictionRow {
                sample_id: "S1".into(),
                true_class: 1,
                pred_class: 2,
                scores: vec![0.25, 0.75],
            },
            PredictionRow {
                sample_id: "S2".into(),
                true_class: 2,
                pred_class: 2,
                scores: vec![0.1, 0.9],
            },
        ];
        let mut buf = Vec::new();
        write_predictions(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"sample_id,true_class,pred_class,score_1,score_2\n"));
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_predictions("sample_id,truth,pred\n".as_bytes()).is_err());
        assert!(read_predictions("sample_id,true_class,pred_class,score_2\n".as_bytes()).is_err());
        let err = read_predictions("sample_id,true_class,pred_class\nS1,x,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MetricsError::Predictions { line: 2, .. }));
        let err = read_predictions("sample_id,true_class,pred_class,score_1\nS1,1,1,NaN\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MetricsError::Predictions { line: 2, .. }));
        let plain = read_predictions("sample_id,true_class,pred_class\nS1,3,1\n".as_bytes()).unwrap();
        assert_eq!(plain[0].scores, Vec::<f64>::new());
    }
}
