//! File formats: dense matrices (text or binary), summary-statistic tables,
//! and multi-study z-score tables.
//!
//! Text matrices start with a "rows cols" header line; binary matrices start
//! with the magic bytes `GKMX1` followed by two little-endian u64 dimensions
//! and row-major little-endian f64 values. `read_matrix` dispatches on the
//! magic. Lines beginning with `#` are ignored in all text formats so that
//! emitted header blocks round-trip.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};

pub const MATRIX_MAGIC: &[u8; 5] = b"GKMX1";

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(MATRIX_MAGIC) {
        read_matrix_binary(&bytes, path)
    } else {
        read_matrix_text(&bytes, path)
    }
}

fn read_matrix_binary(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let header = MATRIX_MAGIC.len() + 16;
    if bytes.len() < header {
        bail!("{}: binary matrix truncated before dimensions", path.display());
    }
    let rows = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
    let need = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(header))
        .ok_or_else(|| anyhow!("{}: matrix dimensions overflow", path.display()))?;
    if bytes.len() != need {
        bail!(
            "{}: expected {need} bytes for a {rows}x{cols} matrix, found {}",
            path.display(),
            bytes.len()
        );
    }
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let off = header + (i * cols + j) * 8;
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                bail!("{}: non-finite value at row {i}, col {j}", path.display());
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn read_matrix_text(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let text = std::str::from_utf8(bytes)
        .with_context(|| format!("{}: matrix file is not UTF-8", path.display()))?;
    let mut lines = data_lines(text);
    let (first_no, first) = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty matrix file", path.display()))?;
    let dims: Vec<&str> = first.split_whitespace().collect();
    if dims.len() != 2 {
        bail!(
            "{} line {first_no}: expected header \"rows cols\", found {first:?}",
            path.display()
        );
    }
    let rows: usize = dims[0]
        .parse()
        .with_context(|| format!("{} line {first_no}: bad row count {:?}", path.display(), dims[0]))?;
    let cols: usize = dims[1]
        .parse()
        .with_context(|| format!("{} line {first_no}: bad col count {:?}", path.display(), dims[1]))?;
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| anyhow!("{}: missing row {i} of {rows}", path.display()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != cols {
            bail!(
                "{} line {line_no}: expected {cols} values, found {}",
                path.display(),
                fields.len()
            );
        }
        for (j, f) in fields.iter().enumerate() {
            m[(i, j)] = parse_float(f, path, line_no)?;
        }
    }
    if let Some((line_no, _)) = lines.next() {
        bail!("{} line {line_no}: trailing data after {rows} rows", path.display());
    }
    Ok(m)
}

/// Summary statistics: a TSV with columns (feature_id, xty) and a sidecar
/// TOML file at `<path>.meta` holding the scalars yty and n.
pub struct SummaryTable {
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
}

pub fn read_summary_table(path: &Path) -> Result<SummaryTable> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = data_lines(&text);
    let (header_no, header) = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty summary file", path.display()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols != ["feature_id", "xty"] {
        bail!(
            "{} line {header_no}: expected columns feature_id<TAB>xty, found {cols:?}",
            path.display()
        );
    }
    let mut seen = std::collections::HashSet::new();
    let mut xty = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            bail!("{} line {line_no}: expected 2 fields, found {}", path.display(), fields.len());
        }
        if !seen.insert(fields[0].to_string()) {
            bail!("{} line {line_no}: duplicate feature_id {:?}", path.display(), fields[0]);
        }
        xty.push(parse_float(fields[1], path, line_no)?);
    }
    if xty.is_empty() {
        bail!("{}: no features", path.display());
    }

    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path)
        .with_context(|| format!("reading sidecar {}", meta_path.display()))?;
    let meta: toml::Table = meta_text
        .parse()
        .with_context(|| format!("parsing sidecar {}", meta_path.display()))?;
    let yty = meta
        .get("yty")
        .and_then(toml::Value::as_float)
        .ok_or_else(|| anyhow!("{}: missing float field yty", meta_path.display()))?;
    let n = meta
        .get("n")
        .and_then(toml::Value::as_integer)
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{}: missing positive integer field n", meta_path.display()))?
        as usize;
    Ok(SummaryTable { xty: DVector::from_vec(xty), yty, n })
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// Multi-study z-scores: a TSV with columns (feature_id, z1, ..., zK) where
/// unobserved entries are written as NA, and a sidecar TOML at `<path>.meta`
/// with the per-study sample sizes `sizes = [n1, ..., nK]`.
pub struct StudyTable {
    pub feature_ids: Vec<String>,
    /// zscores[k][j]: study k, variant j.
    pub zscores: Vec<Vec<Option<f64>>>,
    pub sizes: Vec<usize>,
}

pub fn read_study_table(path: &Path) -> Result<StudyTable> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = data_lines(&text);
    let (header_no, header) = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty study file", path.display()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 2 || cols[0] != "feature_id" {
        bail!(
            "{} line {header_no}: expected columns feature_id<TAB>z1<TAB>..., found {cols:?}",
            path.display()
        );
    }
    for (k, c) in cols[1..].iter().enumerate() {
        let want = format!("z{}", k + 1);
        if *c != want {
            bail!("{} line {header_no}: expected column {want}, found {c:?}", path.display());
        }
    }
    let k_studies = cols.len() - 1;
    let mut feature_ids = Vec::new();
    let mut zscores = vec![Vec::new(); k_studies];
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != k_studies + 1 {
            bail!(
                "{} line {line_no}: expected {} fields, found {}",
                path.display(),
                k_studies + 1,
                fields.len()
            );
        }
        feature_ids.push(fields[0].to_string());
        for (k, f) in fields[1..].iter().enumerate() {
            if *f == "NA" {
                zscores[k].push(None);
            } else {
                zscores[k].push(Some(parse_float(f, path, line_no)?));
            }
        }
    }
    if feature_ids.is_empty() {
        bail!("{}: no variants", path.display());
    }

    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path)
        .with_context(|| format!("reading sidecar {}", meta_path.display()))?;
    let meta: toml::Table = meta_text
        .parse()
        .with_context(|| format!("parsing sidecar {}", meta_path.display()))?;
    let sizes: Vec<usize> = meta
        .get("sizes")
        .and_then(toml::Value::as_array)
        .ok_or_else(|| anyhow!("{}: missing array field sizes", meta_path.display()))?
        .iter()
        .map(|v| {
            v.as_integer()
                .filter(|&n| n > 0)
                .map(|n| n as usize)
                .ok_or_else(|| anyhow!("{}: sizes must be positive integers", meta_path.display()))
        })
        .collect::<Result<_>>()?;
    if sizes.len() != k_studies {
        bail!(
            "{}: {} sizes for {} study columns",
            meta_path.display(),
            sizes.len(),
            k_studies
        );
    }
    Ok(StudyTable { feature_ids, zscores, sizes })
}

/// Symmetry check that names the offending cell; run before handing a matrix
/// to the numeric layer so diagnostics carry file coordinates.
pub fn require_symmetric(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    if m.nrows() != m.ncols() {
        bail!("{}: matrix is {}x{}, not square", path.display(), m.nrows(), m.ncols());
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let a = m[(i, j)];
            let b = m[(j, i)];
            if (a - b).abs() > 1e-8 * a.abs().max(b.abs()).max(1.0) {
                bail!(
                    "{}: entry ({i}, {j}) = {a} does not match ({j}, {i}) = {b}",
                    path.display()
                );
            }
        }
    }
    Ok(())
}

fn parse_float(field: &str, path: &Path, line_no: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .with_context(|| format!("{} line {line_no}: bad number {field:?}", path.display()))?;
    if !v.is_finite() {
        bail!("{} line {line_no}: non-finite value {field:?}", path.display());
    }
    Ok(v)
}

/// Non-empty, non-comment lines paired with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;
    use tempfile::tempdir;

    fn write_matrix_text(path: &Path, m: &DMatrix<f64>, headers: &[(&str, String)]) {
        let mut out = String::new();
        for (k, v) in headers {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&format!("{} {}\n", m.nrows(), m.ncols()));
        for i in 0..m.nrows() {
            let row: Vec<String> =
                (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        fs::write(path, out).unwrap();
    }

    fn write_matrix_binary(path: &Path, m: &DMatrix<f64>) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(MATRIX_MAGIC).unwrap();
        f.write_all(&(m.nrows() as u64).to_le_bytes()).unwrap();
        f.write_all(&(m.ncols() as u64).to_le_bytes()).unwrap();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                f.write_all(&m[(i, j)].to_le_bytes()).unwrap();
            }
        }
    }

    #[test]
    fn text_matrix_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.5, -3.0, 0.25, 1e-12, 7.0]);
        write_matrix_text(&path, &m, &[("k", "v".to_string())]);
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn binary_matrix_round_trips_and_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 3.5, 4.25, -5.0, 6.125]);
        write_matrix_binary(&path, &m);
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn text_matrix_errors_name_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "# comment\n2 2\n1.0 2.0\n3.0 oops\n").unwrap();
        let err = format!("{:#}", read_matrix(&path).unwrap_err());
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("oops"), "{err}");
    }

    #[test]
    fn binary_matrix_rejects_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        write_matrix_binary(&path, &m);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        let err = format!("{:#}", read_matrix(&path).unwrap_err());
        assert!(err.contains("expected"), "{err}");
    }

    #[test]
    fn summary_table_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        std::fs::write(&path, "feature_id\txty\nrs1\t1.25\nrs2\t-0.5\n").unwrap();
        std::fs::write(sidecar_path(&path), "yty = 40.0\nn = 10\n").unwrap();
        let t = read_summary_table(&path).unwrap();
        assert_eq!(t.xty.as_slice(), &[1.25, -0.5]);
        assert_eq!(t.yty, 40.0);
        assert_eq!(t.n, 10);
    }

    #[test]
    fn summary_table_requires_named_columns() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        std::fs::write(&path, "id\txty\nrs1\t1.0\n").unwrap();
        std::fs::write(sidecar_path(&path), "yty = 1.0\nn = 5\n").unwrap();
        let err = format!("{:#}", read_summary_table(&path).map(|_| ()).unwrap_err());
        assert!(err.contains("feature_id"), "{err}");
    }

    #[test]
    fn study_table_reads_missing_as_none() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.tsv");
        std::fs::write(&path, "feature_id\tz1\tz2\nrs1\t0.5\tNA\nrs2\t-1.0\t2.0\n").unwrap();
        std::fs::write(sidecar_path(&path), "sizes = [100, 200]\n").unwrap();
        let t = read_study_table(&path).unwrap();
        assert_eq!(t.sizes, vec![100, 200]);
        assert_eq!(t.zscores[1][0], None);
        assert_eq!(t.zscores[0][1], Some(-1.0));
    }

    #[test]
    fn symmetry_check_names_the_cell() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.6, 1.0]);
        let err = format!(
            "{:#}",
            require_symmetric(&m, Path::new("sigma.txt")).unwrap_err()
        );
        assert!(err.contains("(0, 1)"), "{err}");
    }
}
