//! Files in and out: atomic writes, input digests, shot-file ingestion and
//! report tables.
//!
//! A report renders either as one aligned text file (`report.txt`) or as
//! comma-separated tables, one `<name>.csv` per table plus `meta.txt`.
//! Column headers carry their unit in brackets, e.g. `t_us [µs]`; numbers
//! use Rust's locale-independent formatting with a fixed precision, so
//! identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use wring::basis::BitString;
use wring::measurement::{postselect_shots, ShotSet};
use wring::{Error, Result};

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("'{}' names no file", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Result of ingesting one shot file.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub shots: ShotSet,
    pub digest: String,
    /// `(kept, dropped)` when post-selection ran.
    pub postselection: Option<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Parses a shot file, checks its ring size and optionally keeps only the
/// shots whose loading image is all ground.
pub fn ingest_shot_file(path: &Path, expected_sites: Option<usize>, postselect: bool) -> Result<Ingested> {
    let text = read_text(path)?;
    let digest = sha256_hex(text.as_bytes());
    let shots = ShotSet::from_text(&text)?;
    if let Some(l) = expected_sites {
        if shots.sites != l {
            return Err(Error::DimensionMismatch { expected: l, found: shots.sites });
        }
    }
    let mut warnings = Vec::new();
    let (shots, postselection) = if postselect {
        let sel = postselect_shots(&shots, &BitString::ground(shots.sites)?)?;
        warnings.extend(sel.warning.clone());
        (sel.shots, Some((sel.kept, sel.dropped)))
    } else {
        (shots, None)
    };
    Ok(Ingested { shots, digest, postselection, warnings })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) if x.is_finite() => format!("{x:.9}"),
            Cell::Num(x) if x.is_nan() => "nan".into(),
            Cell::Num(x) => if *x > 0.0 { "inf".into() } else { "-inf".into() },
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    /// `(name, unit)`; dimensionless columns use unit `1`.
    pub columns: Vec<(String, String)>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[(&str, &str)]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|(n, u)| (n.to_string(), u.to_string())).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width of table '{}'", self.name);
        self.rows.push(row);
    }

    fn headers(&self) -> Vec<String> {
        self.columns.iter().map(|(n, u)| format!("{n} [{u}]")).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.headers().join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(Cell::render).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let headers = self.headers();
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(Cell::render).collect()).collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([headers[c].chars().count()]).max().unwrap_or(0))
            .collect();
        let line = |items: &[String]| -> String {
            let padded: Vec<String> = items.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("## {}\n", self.name);
        out.push_str(&line(&headers));
        for r in &cells {
            out.push_str(&line(r));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Table,
    Delimited,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Format::Table),
            "delimited" | "csv" => Ok(Format::Delimited),
            other => Err(Error::InvalidInput(format!("unknown report format '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    /// Ordered `key = value` run metadata, seeds included.
    pub metadata: Vec<(String, String)>,
    /// `(input path, sha256)`.
    pub digests: Vec<(String, String)>,
    /// Fully resolved config, when the stage had one.
    pub config: Option<String>,
    pub tables: Vec<Table>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    fn header_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k} = {v}").unwrap();
        }
        for (p, d) in &self.digests {
            writeln!(out, "# sha256 {d} {p}").unwrap();
        }
        for w in &self.warnings {
            writeln!(out, "# warning: {w}").unwrap();
        }
        if let Some(c) = &self.config {
            out.push_str("# config\n");
            for l in c.lines() {
                writeln!(out, "#   {l}").unwrap();
            }
        }
        out
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Writes the report into `dir` and returns the files written.
pub fn emit_report(report: &Report, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match format {
        Format::Table => {
            let mut out = report.header_text();
            for t in &report.tables {
                out.push('\n');
                out.push_str(&t.to_text());
            }
            let p = dir.join("report.txt");
            write_atomic(&p, out.as_bytes())?;
            written.push(p);
        }
        Format::Delimited => {
            let p = dir.join("meta.txt");
            write_atomic(&p, report.header_text().as_bytes())?;
            written.push(p);
            for t in &report.tables {
                let p = dir.join(format!("{}.csv", t.name));
                write_atomic(&p, t.to_csv().as_bytes())?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
