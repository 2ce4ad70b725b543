use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::data::filename::{parse_breakhis_filename, BiopsyRecord, Magnification, Subtype, TumorClass};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 7] = [
    "path",
    "method",
    "class",
    "subtype",
    "patient_id",
    "magnification",
    "seq",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<BiopsyRecord>,
    /// Directory the records were scanned from, when known.
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Scan {
    pub manifest: Manifest,
    pub skipped: Vec<Skipped>,
}

impl Scan {
    /// One `path: reason` line per skipped file.
    pub fn skip_report(&self) -> String {
        self.skipped
            .iter()
            .map(|s| format!("{}: {}\n", s.path.display(), s.reason))
            .collect()
    }
}

/// Recursively collects every file under `root` whose name follows the
/// biopsy filename grammar, in lexicographic path order.
pub fn scan_directory(root: &Path) -> Result<Scan> {
    let meta = fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a directory"),
        ));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            let io = e
                .into_io_error()
                .unwrap_or_else(|| std::io::Error::other("directory walk failed"));
            Error::io(path, io)
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    files.sort();
    let mut scan = Scan::default();
    scan.manifest.source = Some(root.to_path_buf());
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str());
        let parsed = match name {
            Some(n) => parse_breakhis_filename(n),
            None => {
                scan.skipped.push(Skipped {
                    path,
                    reason: "file name is not valid UTF-8".into(),
                });
                continue;
            }
        };
        match parsed {
            Ok(mut r) => {
                r.path = path;
                scan.manifest.records.push(r);
            }
            Err(e) => scan.skipped.push(Skipped {
                path,
                reason: e.to_string(),
            }),
        }
    }
    Ok(scan)
}

impl Manifest {
    pub fn new(records: Vec<BiopsyRecord>) -> Self {
        Manifest {
            records,
            source: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts_by_subtype(&self) -> BTreeMap<Subtype, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.subtype).or_insert(0) += 1;
        }
        m
    }

    pub fn counts_by_class(&self) -> BTreeMap<TumorClass, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.class).or_insert(0) += 1;
        }
        m
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv {
            line: 0,
            message: e.to_string(),
        };
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for r in &self.records {
            let path = r.path.to_str().ok_or_else(|| {
                Error::Input(format!("path {} is not valid UTF-8", r.path.display()))
            })?;
            w.write_record([
                path,
                &r.method,
                r.class.code(),
                r.subtype.code(),
                &r.patient_id,
                &r.magnification.value().to_string(),
                &r.seq.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("manifest fields are UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Csv {
                line: 1,
                message: format!("expected header `{}`", MANIFEST_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |message: String| Error::Csv { line, message };
            let field = |i: usize| row.get(i).unwrap_or("");
            let class = TumorClass::from_code(field(2))
                .ok_or_else(|| bad(format!("unknown class `{}`", field(2))))?;
            let subtype = Subtype::from_code(field(3))
                .ok_or_else(|| bad(format!("unknown subtype `{}`", field(3))))?;
            if subtype.class() != class {
                return Err(bad(format!(
                    "subtype {} does not belong to class {}",
                    subtype.code(),
                    class.code()
                )));
            }
            let magnification = field(5)
                .parse()
                .ok()
                .and_then(Magnification::from_value)
                .ok_or_else(|| bad(format!("bad magnification `{}`", field(5))))?;
            let seq = field(6)
                .parse::<u32>()
                .ok()
                .filter(|&s| s > 0)
                .ok_or_else(|| bad(format!("bad sequence `{}`", field(6))))?;
            let path = PathBuf::from(field(0));
            if !seen.insert(path.clone()) {
                return Err(bad(format!("duplicate path `{}`", path.display())));
            }
            records.push(BiopsyRecord {
                path,
                method: field(1).to_string(),
                class,
                subtype,
                patient_id: field(4).to_string(),
                magnification,
                seq,
            });
        }
        Ok(Manifest::new(records))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_csv(&text)
    }
}
