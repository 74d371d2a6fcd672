//! Delimited text input.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use mixsur::Dataset;
use nalgebra::DMatrix;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed delimited text")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in the header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    ParseError { row: usize, column: String, value: String },
    #[error("no data rows")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] mixsur::Error),
}

/// Picks comma, semicolon or tab, whichever is most frequent in the header.
pub fn detect_delimiter(header_line: &str) -> u8 {
    b",;\t"
        .iter()
        .copied()
        .max_by_key(|&d| (header_line.bytes().filter(|&b| b == d).count(), d == b','))
        .unwrap_or(b',')
}

pub fn parse_delimiter(s: &str) -> Option<Option<u8>> {
    match s {
        "auto" => Some(None),
        "," | "comma" => Some(Some(b',')),
        ";" | "semicolon" => Some(Some(b';')),
        "\t" | "\\t" | "tab" => Some(Some(b'\t')),
        _ => None,
    }
}

/// Header and string records of a delimited file.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path, delimiter: Option<u8>) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let delimiter = delimiter.unwrap_or_else(|| detect_delimiter(text.lines().next().unwrap_or("")));
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        if rows.is_empty() {
            return Err(IngestError::EmptyData);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, IngestError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    }

    /// Numeric values of the named columns (one matrix column each).
    pub fn numeric(&self, names: &[String]) -> Result<DMatrix<f64>, IngestError> {
        let cols = names.iter().map(|n| self.column(n)).collect::<Result<Vec<_>, _>>()?;
        let mut m = DMatrix::zeros(self.rows.len(), cols.len());
        for (i, row) in self.rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                let raw = row.get(c).map(String::as_str).unwrap_or("");
                m[(i, j)] = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| IngestError::ParseError {
                    row: i + 1,
                    column: names[j].clone(),
                    value: raw.to_string(),
                })?;
            }
        }
        Ok(m)
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>, IngestError> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r.get(c).cloned().unwrap_or_default()).collect())
    }
}

/// Responses plus the pool of distinct regressor columns, and each equation's
/// indices into that pool. A column named in several equations is stored once.
pub struct Bound {
    pub data: Dataset,
    pub regressors: Vec<Vec<usize>>,
}

pub fn bind(table: &Table, responses: &[String], regressors: &[Vec<String>]) -> Result<Bound, IngestError> {
    let mut pool_names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut regs = Vec::with_capacity(regressors.len());
    for eq in regressors {
        let mut cols = Vec::with_capacity(eq.len());
        for name in eq {
            let next = pool_names.len();
            let idx = *index.entry(name.clone()).or_insert_with(|| {
                pool_names.push(name.clone());
                next
            });
            cols.push(idx);
        }
        regs.push(cols);
    }
    let y = table.numeric(responses)?;
    let pool = table.numeric(&pool_names)?;
    let data = Dataset::with_names(y, pool, responses.to_vec(), pool_names)?;
    Ok(Bound { data, regressors: regs })
}
