//! Text file formats shared by the library and the CLI: prediction CSV,
//! candidate CSV, and the accuracy join file.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::search::Candidate;

/// Prediction CSV: header plus one "clip_index,px,py" row per clip, pixels
/// with fixed 6-decimal formatting.
pub fn write_predictions_csv(predictions: &[(f64, f64)]) -> String {
    let mut out = String::from("clip_index,px,py\n");
    for (i, (px, py)) in predictions.iter().enumerate() {
        out.push_str(&format!("{i},{px:.6},{py:.6}\n"));
    }
    out
}

/// Parse a prediction CSV (or a ground-truth CSV with an optional fourth
/// `valid` column, 0/1). Returns (clip_index, px, py, valid).
pub fn read_predictions_csv(text: &str) -> Result<Vec<(usize, f64, f64, bool)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line.starts_with("clip_index") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                offset: lineno,
                reason: format!("expected 3 or 4 fields, got {}", fields.len()),
            });
        }
        let idx: usize = fields[0].parse().map_err(|_| Error::Parse {
            offset: lineno,
            reason: format!("bad clip_index {:?}", fields[0]),
        })?;
        let px: f64 = fields[1].parse().map_err(|_| Error::Parse {
            offset: lineno,
            reason: format!("bad px {:?}", fields[1]),
        })?;
        let py: f64 = fields[2].parse().map_err(|_| Error::Parse {
            offset: lineno,
            reason: format!("bad py {:?}", fields[2]),
        })?;
        let valid = match fields.get(3) {
            None => true,
            Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => {
                return Err(Error::Parse {
                    offset: lineno,
                    reason: format!("bad valid flag {other:?}"),
                })
            }
        };
        rows.push((idx, px, py, valid));
    }
    Ok(rows)
}

/// Candidate CSV: "spec_hash,latency_s,weight_bytes,accuracy"; the accuracy
/// field is empty until joined.
pub fn write_candidates_csv(candidates: &[Candidate]) -> String {
    let mut out = String::from("spec_hash,latency_s,weight_bytes,accuracy\n");
    for c in candidates {
        let acc = c
            .accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.9},{},{}\n",
            c.spec.spec_hash_hex(),
            c.latency_s,
            c.weight_bytes,
            acc
        ));
    }
    out
}

/// Accuracy join file: "spec_hash,accuracy" rows (header optional).
pub fn read_accuracy_csv(text: &str) -> Result<HashMap<String, f64>> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("spec_hash")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                offset: lineno,
                reason: "expected spec_hash,accuracy".into(),
            });
        }
        let acc: f64 = fields[1].parse().map_err(|_| Error::Parse {
            offset: lineno,
            reason: format!("bad accuracy {:?}", fields[1]),
        })?;
        map.insert(fields[0].to_string(), acc);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_round_trip_with_header() {
        let preds = vec![(32.0, 31.5), (0.125, 63.9999999)];
        let csv = write_predictions_csv(&preds);
        assert!(csv.starts_with("clip_index,px,py\n"));
        assert!(csv.contains("0,32.000000,31.500000\n"));
        assert!(csv.contains("1,0.125000,64.000000\n"));
        let rows = read_predictions_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], (0, 32.0, 31.5, true));
    }

    #[test]
    fn empty_predictions_is_header_only() {
        assert_eq!(write_predictions_csv(&[]), "clip_index,px,py\n");
        assert!(read_predictions_csv("clip_index,px,py\n").unwrap().is_empty());
    }

    #[test]
    fn gt_rows_carry_valid_flag() {
        let rows = read_predictions_csv("0,1.0,2.0,0\n1,3.0,4.0,1\n2,5.0,6.0\n").unwrap();
        assert!(!rows[0].3);
        assert!(rows[1].3);
        assert!(rows[2].3);
    }

    #[test]
    fn bad_rows_are_parse_errors() {
        assert!(read_predictions_csv("0,1.0\n").is_err());
        assert!(read_predictions_csv("x,1.0,2.0\n").is_err());
        assert!(read_predictions_csv("0,1.0,2.0,7\n").is_err());
    }

    #[test]
    fn accuracy_csv_parses() {
        let map =
            read_accuracy_csv("spec_hash,accuracy\nabc123,0.91\ndef456,0.85\n").unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map["abc123"], 0.91);
    }
}
