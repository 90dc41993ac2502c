//! Text format for patient records.
//!
//! One tab-separated file per patient, `<patient_id>.tsv`:
//!
//! ```text
//! #pod-record v1
//! #patient_id  P0001
//! #labels      1  0  1            (POD1 POD2 POD3; NA rejects the record)
//! #patient_type  UNCLASSIFIED
//! #modality    vitals  3  2  0    (name, dims, resolution s, offset s)
//! #meta        config_hash  ab12...   (any number, ignored on read)
//! @vitals      <rows>
//! 80.1  36.9  NA                  (rows x dims values, NA = missing)
//! @hemo        <rows>
//! ...
//! ```
//!
//! Header lines appear in the order above and all fields are tab separated.
//! Values are written with the shortest representation that round-trips.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{ModalityData, ModalitySpec, MultiModalRecord, PatientType, PodLabels};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: &str = "#pod-record v1";

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}

pub fn render_record(record: &MultiModalRecord, meta: &[(&str, &str)]) -> String {
    let mut out = String::new();
    let lab = |b: bool| if b { "1" } else { "0" };
    let _ = writeln!(out, "{RECORD_MAGIC}");
    let _ = writeln!(out, "#patient_id\t{}", record.patient_id);
    let l = record.labels.0;
    let _ = writeln!(out, "#labels\t{}\t{}\t{}", lab(l[0]), lab(l[1]), lab(l[2]));
    let _ = writeln!(out, "#patient_type\t{}", record.patient_type.as_str());
    for m in &record.modalities {
        let _ = writeln!(
            out,
            "#modality\t{}\t{}\t{}\t{}",
            m.spec.name, m.spec.dims, m.spec.native_resolution, m.offset_seconds
        );
    }
    for (k, v) in meta {
        let _ = writeln!(out, "#meta\t{k}\t{v}");
    }
    for m in &record.modalities {
        let _ = writeln!(out, "@{}\t{}", m.spec.name, m.len());
        for row in m.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| fmt_value(*v)).collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
    }
    out
}

pub fn write_record(path: &Path, record: &MultiModalRecord, meta: &[(&str, &str)]) -> Result<()> {
    fs::write(path, render_record(record, meta))?;
    Ok(())
}

/// Writes every record into `dir` as `<patient_id>.tsv`.
pub fn write_cohort(dir: &Path, records: &[MultiModalRecord], meta: &[(&str, &str)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        write_record(&dir.join(format!("{}.tsv", r.patient_id)), r, meta)?;
    }
    Ok(())
}

/// Reads all `*.tsv` records in `dir`, ordered by file name.
pub fn read_cohort(dir: &Path) -> Result<Vec<MultiModalRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_record(p)).collect()
}

pub fn read_record(path: &Path) -> Result<MultiModalRecord> {
    let text = fs::read_to_string(path)?;
    parse_record(&text, &path.display().to_string())
}

pub fn parse_record(text: &str, source_name: &str) -> Result<MultiModalRecord> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    match lines.next() {
        Some((_, l)) if l == RECORD_MAGIC => {}
        _ => return Err(err(1, format!("expected '{RECORD_MAGIC}'"))),
    }

    let mut patient_id = None;
    let mut labels: Option<[Option<bool>; 3]> = None;
    let mut patient_type = PatientType::Unclassified;
    let mut specs: Vec<(ModalitySpec, f64)> = Vec::new();
    while let Some(&(no, line)) = lines.peek() {
        if !line.starts_with('#') {
            break;
        }
        lines.next();
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "#patient_id" if fields.len() == 2 => patient_id = Some(fields[1].to_string()),
            "#labels" if fields.len() == 4 => {
                let mut l = [None; 3];
                for (slot, f) in l.iter_mut().zip(&fields[1..]) {
                    *slot = match *f {
                        "1" => Some(true),
                        "0" => Some(false),
                        "NA" => None,
                        other => return Err(err(no, format!("bad label '{other}'"))),
                    };
                }
                labels = Some(l);
            }
            "#patient_type" if fields.len() == 2 => {
                patient_type =
                    PatientType::parse(fields[1]).ok_or_else(|| err(no, format!("bad patient type '{}'", fields[1])))?
            }
            "#modality" if fields.len() == 5 => {
                let dims = fields[2].parse().map_err(|_| err(no, "bad dims".into()))?;
                let res = fields[3].parse().map_err(|_| err(no, "bad resolution".into()))?;
                let offset = fields[4].parse().map_err(|_| err(no, "bad offset".into()))?;
                specs.push((ModalitySpec::new(fields[1], dims, res), offset));
            }
            "#meta" => {}
            _ => return Err(err(no, format!("unrecognized header line '{line}'"))),
        }
    }
    let patient_id = patient_id.ok_or_else(|| err(0, "missing #patient_id".into()))?;
    let labels = match labels {
        Some([Some(a), Some(b), Some(c)]) => PodLabels([a, b, c]),
        _ => return Err(Error::MissingLabels { patient: patient_id }),
    };

    let mut modalities = Vec::with_capacity(specs.len());
    for (spec, offset) in specs {
        let (no, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing block @{}", spec.name)))?;
        let mut head = line.split('\t');
        if head.next() != Some(format!("@{}", spec.name).as_str()) {
            return Err(err(no, format!("expected block @{}", spec.name)));
        }
        let rows: usize = head
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| err(no, "bad row count".into()))?;
        let mut values = Array2::<f64>::zeros((rows, spec.dims));
        for r in 0..rows {
            let (no, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("block @{} truncated", spec.name)))?;
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != spec.dims {
                return Err(err(no, format!("expected {} values, found {}", spec.dims, cells.len())));
            }
            for (c, cell) in cells.iter().enumerate() {
                values[[r, c]] = if *cell == "NA" {
                    f64::NAN
                } else {
                    cell.parse().map_err(|_| err(no, format!("bad value '{cell}'")))?
                };
            }
        }
        modalities.push(ModalityData::new(spec, values)?.with_offset(offset));
    }
    if let Some((no, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(no, "trailing content".into()));
    }
    let mut record = MultiModalRecord::new(patient_id, modalities, labels);
    record.patient_type = patient_type;
    Ok(record)
}
