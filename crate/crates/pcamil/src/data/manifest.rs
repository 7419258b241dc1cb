//! Manifest CSV reading and writing.
//!
//! The on-disk form is a UTF-8 CSV with LF line endings and the exact header
//! `patient_id,label,side,bag_path`. Relative `bag_path` entries are resolved
//! against the manifest's directory on load and relativized again on save, so
//! a dataset directory can be moved wholesale.

use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::{DataError, DatasetManifest, Label, PatientRecord, Side, SplitTag};

const HEADER: [&str; 4] = ["patient_id", "label", "side", "bag_path"];

/// Parses manifest CSV from any reader. `base_dir`, when given, is used to
/// resolve relative bag paths.
pub fn parse_manifest<R: Read>(
    reader: R,
    split_tag: SplitTag,
    base_dir: Option<&Path>,
) -> Result<DatasetManifest, DataError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    {
        let headers = csv_reader.headers().map_err(csv_error)?;
        if headers.iter().ne(HEADER) {
            return Err(DataError::BadHeader);
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in csv_reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != HEADER.len() || row.iter().any(|f| f.trim().is_empty()) {
            return Err(DataError::MalformedRow { line });
        }
        let patient_id = row[0].trim().to_string();
        let label = Label::parse(&row[1]).ok_or_else(|| DataError::UnknownLabel {
            value: row[1].to_string(),
            line,
        })?;
        let side = Side::parse(&row[2]).ok_or_else(|| DataError::UnknownSide {
            value: row[2].to_string(),
            line,
        })?;
        if !seen.insert(patient_id.clone()) {
            return Err(DataError::DuplicatePatientId(patient_id));
        }
        let raw_path = PathBuf::from(row[3].trim());
        let bag_path = match (raw_path.is_relative(), base_dir) {
            (true, Some(base)) => base.join(raw_path),
            _ => raw_path,
        };
        records.push(PatientRecord {
            patient_id,
            label,
            side,
            bag_path,
        });
    }

    if records.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    Ok(DatasetManifest {
        records,
        split_tag,
    })
}

/// Loads a manifest file, tagging it with the split it will serve as.
pub fn load_manifest(path: &Path, split_tag: SplitTag) -> Result<DatasetManifest, DataError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    parse_manifest(file, split_tag, path.parent())
}

/// Writes a manifest file. Bag paths under the manifest's directory are
/// stored relative to it.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let base = path.parent();
    let mut writer = csv::Writer::from_writer(File::create(path)?);
    writer.write_record(HEADER).map_err(csv_error)?;
    for record in &manifest.records {
        let bag_path = match base.and_then(|b| record.bag_path.strip_prefix(b).ok()) {
            Some(rel) => rel.to_path_buf(),
            None => record.bag_path.clone(),
        };
        writer
            .write_record([
                record.patient_id.as_str(),
                &record.label.to_string(),
                &record.side.to_string(),
                &bag_path.to_string_lossy(),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(err: csv::Error) -> DataError {
    match err.kind() {
        csv::ErrorKind::Io(_) => match err.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            _ => unreachable!(),
        },
        _ => DataError::MalformedRow {
            line: err.position().map(|p| p.line()).unwrap_or(0),
        },
    }
}
