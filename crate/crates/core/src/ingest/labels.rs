use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::Sex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub source_path: Option<PathBuf>,
    pub subject_id: String,
    pub age_years: f64,
    pub sex: Sex,
}

/// Parsed label table, indexed both by path and by subject.
#[derive(Debug, Clone)]
pub struct LabelTable {
    pub rows: Vec<LabelRow>,
    by_path: HashMap<PathBuf, usize>,
    by_subject: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawRow {
    #[serde(default)]
    source_path: Option<String>,
    #[serde(default)]
    subject_id: Option<String>,
    age_years: String,
    #[serde(default)]
    sex: Option<String>,
}

/// Reads a delimited label table with header `source_path,subject_id,age_years[,sex]`.
/// Tab-separated files (`.tsv`) are accepted too.
pub fn read_label_table(path: &Path) -> Result<LabelTable> {
    let err = |message: String| Error::Labels {
        path: path.to_path_buf(),
        message,
    };
    let delimiter = match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;

    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if !headers.iter().any(|h| h == "age_years") {
        return Err(err("missing required column age_years".into()));
    }
    if !headers.iter().any(|h| h == "source_path" || h == "subject_id") {
        return Err(err("need a source_path or subject_id column".into()));
    }

    let mut rows = Vec::new();
    let mut by_path = HashMap::new();
    let mut by_subject = HashMap::new();
    for (line, rec) in reader.deserialize::<RawRow>().enumerate() {
        // header is line 1
        let line = line + 2;
        let raw = rec.map_err(|e| err(format!("line {line}: {e}")))?;
        let age_years: f64 = raw
            .age_years
            .parse()
            .map_err(|_| err(format!("line {line}: unparseable age {:?}", raw.age_years)))?;
        if !age_years.is_finite() {
            return Err(err(format!("line {line}: non-finite age")));
        }
        let sex = match raw.sex.as_deref() {
            None => Sex::Unknown,
            Some(s) => Sex::parse(s).ok_or_else(|| err(format!("line {line}: unknown sex {s:?}")))?,
        };
        let source_path = raw.source_path.filter(|s| !s.is_empty()).map(PathBuf::from);
        let subject_id = match raw.subject_id.filter(|s| !s.is_empty()) {
            Some(s) => s,
            None => match &source_path {
                Some(p) => p.display().to_string(),
                None => return Err(err(format!("line {line}: neither source_path nor subject_id given"))),
            },
        };
        let idx = rows.len();
        match &source_path {
            Some(p) => {
                if by_path.insert(p.clone(), idx).is_some() {
                    return Err(err(format!("line {line}: duplicate source_path {}", p.display())));
                }
            }
            None => {
                if by_subject.insert(subject_id.clone(), idx).is_some() {
                    return Err(err(format!("line {line}: duplicate subject_id {subject_id}")));
                }
            }
        }
        rows.push(LabelRow {
            source_path,
            subject_id,
            age_years,
            sex,
        });
    }
    if rows.is_empty() {
        return Err(err("no label rows".into()));
    }
    Ok(LabelTable {
        rows,
        by_path,
        by_subject,
    })
}

impl LabelTable {
    /// Finds the label for an image at `rel` (relative to the source root).
    pub fn lookup(&self, rel: &Path) -> Option<(usize, &LabelRow)> {
        if let Some(&i) = self.by_path.get(rel) {
            return Some((i, &self.rows[i]));
        }
        let mut candidates = Vec::new();
        if rel.components().count() > 1 {
            if let Some(first) = rel.components().next() {
                candidates.push(first.as_os_str().to_string_lossy().into_owned());
            }
        }
        if let Some(stem) = rel.file_stem() {
            candidates.push(stem.to_string_lossy().into_owned());
        }
        candidates
            .iter()
            .find_map(|c| self.by_subject.get(c))
            .map(|&i| (i, &self.rows[i]))
    }
}
