use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const HISTORY_HEADER: [&str; 6] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochHistory {
    pub rows: Vec<EpochRecord>,
}

/// `printf("%g")`-style formatting at `digits` significant digits.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl EpochHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: EpochRecord) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = HISTORY_HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                format_sig(r.train_loss, 6),
                format_sig(r.train_acc, 6),
                format_sig(r.val_loss, 6),
                format_sig(r.val_acc, 6),
                format_sig(r.lr, 6)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().ne(HISTORY_HEADER) {
            return Err(Error::Csv {
                line: 1,
                message: format!("expected header `{}`", HISTORY_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |i: usize| -> Result<f64> {
                let field = rec.get(i).unwrap_or("");
                field.trim().parse::<f64>().map_err(|_| Error::Csv {
                    line,
                    message: format!("`{field}` in column {} is not a number", HISTORY_HEADER[i]),
                })
            };
            let epoch = rec
                .get(0)
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Csv {
                    line,
                    message: "epoch is not a positive integer".into(),
                })?;
            if epoch != rows.len() + 1 {
                return Err(Error::Csv {
                    line,
                    message: format!("epoch {epoch} out of sequence, expected {}", rows.len() + 1),
                });
            }
            rows.push(EpochRecord {
                epoch,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                lr: num(5)?,
            });
        }
        Ok(EpochHistory { rows })
    }
}
