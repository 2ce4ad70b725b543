use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorClass {
    Benign,
    Malignant,
}

impl TumorClass {
    pub const ALL: [TumorClass; 2] = [TumorClass::Benign, TumorClass::Malignant];

    pub fn code(self) -> &'static str {
        match self {
            TumorClass::Benign => "B",
            TumorClass::Malignant => "M",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TumorClass::Benign => "benign",
            TumorClass::Malignant => "malignant",
        }
    }

    /// Binary label: benign 0, malignant 1.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }

    /// The four subtypes of this class in label order.
    pub fn subtypes(self) -> [Subtype; 4] {
        match self {
            TumorClass::Benign => [Subtype::A, Subtype::F, Subtype::PT, Subtype::TA],
            TumorClass::Malignant => [Subtype::DC, Subtype::LC, Subtype::MC, Subtype::PC],
        }
    }

    pub fn subtype_codes(self) -> Vec<&'static str> {
        self.subtypes().iter().map(|s| s.code()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtype {
    /// Adenosis
    A,
    /// Fibroadenoma
    F,
    /// Phyllodes tumor
    PT,
    /// Tubular adenoma
    TA,
    /// Ductal carcinoma
    DC,
    /// Lobular carcinoma
    LC,
    /// Mucinous carcinoma
    MC,
    /// Papillary carcinoma
    PC,
}

impl Subtype {
    pub const ALL: [Subtype; 8] = [
        Subtype::A,
        Subtype::F,
        Subtype::PT,
        Subtype::TA,
        Subtype::DC,
        Subtype::LC,
        Subtype::MC,
        Subtype::PC,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Subtype::A => "A",
            Subtype::F => "F",
            Subtype::PT => "PT",
            Subtype::TA => "TA",
            Subtype::DC => "DC",
            Subtype::LC => "LC",
            Subtype::MC => "MC",
            Subtype::PC => "PC",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn class(self) -> TumorClass {
        if (self as usize) < 4 {
            TumorClass::Benign
        } else {
            TumorClass::Malignant
        }
    }

    /// Position among the eight subtypes, benign first.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Label within the subtype's own class (0..4).
    pub fn class_index(self) -> usize {
        self as usize % 4
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    X40,
    X100,
    X200,
    X400,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::X40,
        Magnification::X100,
        Magnification::X200,
        Magnification::X400,
    ];

    pub fn value(self) -> u32 {
        match self {
            Magnification::X40 => 40,
            Magnification::X100 => 100,
            Magnification::X200 => 200,
            Magnification::X400 => 400,
        }
    }

    pub fn from_value(v: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.value() == v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiopsyRecord {
    pub path: PathBuf,
    pub method: String,
    pub class: TumorClass,
    pub subtype: Subtype,
    /// `YY-ID`, e.g. `14-4659`.
    pub patient_id: String,
    pub magnification: Magnification,
    pub seq: u32,
}

impl BiopsyRecord {
    /// Canonical file name with the given extension (no leading dot).
    pub fn file_name(&self, ext: &str) -> String {
        format!(
            "{}_{}_{}-{}-{}-{:03}.{ext}",
            self.method,
            self.class.code(),
            self.subtype.code(),
            self.patient_id,
            self.magnification.value(),
            self.seq
        )
    }
}

/// Parses `METHOD_CLASS_SUBTYPE-YY-ID-MAG-SEQ.ext`. Any leading directories
/// are ignored for parsing but kept as the record's path.
pub fn parse_breakhis_filename(name: &str) -> Result<BiopsyRecord> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let fail = |segment: &str, reason: &str| Error::Parse {
        name: base.to_string(),
        segment: segment.to_string(),
        reason: reason.to_string(),
    };
    let (stem, ext) = base
        .rsplit_once('.')
        .ok_or_else(|| fail(base, "missing file extension"))?;
    if ext.is_empty() || !ext.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(fail(ext, "extension must be alphanumeric"));
    }
    let parts: Vec<&str> = stem.split('-').collect();
    let [head, year, number, mag, seq] = parts[..] else {
        return Err(fail(stem, "expected five `-`-separated fields"));
    };
    let head_parts: Vec<&str> = head.split('_').collect();
    let [method, class, subtype] = head_parts[..] else {
        return Err(fail(head, "expected METHOD_CLASS_SUBTYPE"));
    };
    if method.is_empty() || !method.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(fail(method, "method must be a nonempty alphanumeric token"));
    }
    let class = TumorClass::from_code(class).ok_or_else(|| fail(class, "class must be B or M"))?;
    let subtype_code = subtype;
    let subtype =
        Subtype::from_code(subtype).ok_or_else(|| fail(subtype, "unknown tumor subtype"))?;
    if year.len() != 2 || !year.chars().all(|c| c.is_ascii_digit()) {
        return Err(fail(year, "patient year must be two digits"));
    }
    if number.is_empty()
        || !number.starts_with(|c: char| c.is_ascii_digit())
        || !number.chars().all(|c| c.is_ascii_alphanumeric())
    {
        return Err(fail(number, "patient number must start with a digit"));
    }
    let magnification = mag
        .parse::<u32>()
        .ok()
        .filter(|_| mag.chars().all(|c| c.is_ascii_digit()))
        .and_then(Magnification::from_value)
        .ok_or_else(|| fail(mag, "magnification must be 40, 100, 200 or 400"))?;
    let seq_value = seq
        .parse::<u32>()
        .ok()
        .filter(|&v| v > 0 && seq.chars().all(|c| c.is_ascii_digit()))
        .ok_or_else(|| fail(seq, "sequence must be a positive integer"))?;
    if subtype.class() != class {
        return Err(Error::Taxonomy {
            name: base.to_string(),
            class: class.code().to_string(),
            subtype: subtype_code.to_string(),
        });
    }
    Ok(BiopsyRecord {
        path: PathBuf::from(name),
        method: method.to_string(),
        class,
        subtype,
        patient_id: format!("{year}-{number}"),
        magnification,
        seq: seq_value,
    })
}
