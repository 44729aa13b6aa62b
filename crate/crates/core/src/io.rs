//! File formats: plain-text Hermitian matrices, trajectory and dissipation
//! CSV, binary matrix dumps, binary Q logs for replay and sample tables for
//! continuation.
//!
//! Floats are written in shortest round-trip scientific notation so that
//! identical numbers always produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::continuation::SampledFunction;
use crate::error::{Error, Result};
use crate::linalg::{ensure_hermitian, CMatrix, C64};
use crate::partition_dissipation::{DissipationLog, DissipationRecord};

/// Shortest representation that parses back to the same f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("{what}: cannot parse '{field}' as a number")))
}

/// Parses `n` followed by n² lines `row col re im` (0-based indices, any order).
pub fn parse_hermitian_matrix(text: &str) -> Result<CMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("matrix file is empty".into()))?;
    let n: usize = header
        .parse()
        .map_err(|_| Error::InvalidInput(format!("matrix header '{header}' is not a dimension")))?;
    if n == 0 {
        return Err(Error::InvalidInput(
            "matrix dimension must be positive".into(),
        ));
    }
    let mut m = CMatrix::zeros(n, n);
    let mut seen = vec![false; n * n];
    let mut count = 0usize;
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "matrix line {lineno}: expected 'row col re im', got '{line}'"
            )));
        }
        let row: usize = fields[0]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("matrix line {lineno}: bad row index")))?;
        let col: usize = fields[1]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("matrix line {lineno}: bad column index")))?;
        if row >= n || col >= n {
            return Err(Error::InvalidInput(format!(
                "matrix line {lineno}: index ({row}, {col}) outside {n}x{n}"
            )));
        }
        if seen[row * n + col] {
            return Err(Error::InvalidInput(format!(
                "matrix line {lineno}: entry ({row}, {col}) given twice"
            )));
        }
        seen[row * n + col] = true;
        let ctx = format!("matrix line {lineno}");
        m[(row, col)] = C64::new(parse_f64(fields[2], &ctx)?, parse_f64(fields[3], &ctx)?);
        count += 1;
    }
    if count != n * n {
        return Err(Error::InvalidInput(format!(
            "matrix file lists {count} entries, expected {}",
            n * n
        )));
    }
    ensure_hermitian(&m, "imported matrix", 1e-12)?;
    Ok(m)
}

pub fn read_hermitian_matrix(path: &Path) -> Result<CMatrix> {
    parse_hermitian_matrix(&std::fs::read_to_string(path)?)
}

pub fn write_hermitian_matrix<W: Write>(mut w: W, m: &CMatrix) -> Result<()> {
    let n = m.nrows();
    writeln!(w, "{n}")?;
    for r in 0..n {
        for c in 0..n {
            let z = m[(r, c)];
            writeln!(w, "{r} {c} {} {}", fmt_f64(z.re), fmt_f64(z.im))?;
        }
    }
    Ok(())
}

/// Streaming writer for `t,tr_sigma_L,tr_sigma_D,tr_sigma_R[,mode]`.
pub struct TrajectoryCsv<W: Write> {
    inner: csv::Writer<W>,
    mode: Option<String>,
}

impl<W: Write> TrajectoryCsv<W> {
    pub fn new(w: W, mode: Option<&str>) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        let mut header = vec!["t", "tr_sigma_L", "tr_sigma_D", "tr_sigma_R"];
        if mode.is_some() {
            header.push("mode");
        }
        inner.write_record(&header)?;
        Ok(Self {
            inner,
            mode: mode.map(str::to_owned),
        })
    }

    pub fn row(&mut self, t: f64, traces: [f64; 3]) -> Result<()> {
        let mut rec = vec![fmt_f64(t)];
        rec.extend(traces.iter().map(|&x| fmt_f64(x)));
        if let Some(mode) = &self.mode {
            rec.push(mode.clone());
        }
        self.inner.write_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// One row of the per-step dissipation table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissipationRow {
    pub t: f64,
    pub j_left: f64,
    pub j_right: f64,
    pub tr_sigma_d: f64,
    pub q_left_norm: f64,
    pub q_right_norm: f64,
}

impl DissipationRow {
    pub fn from_record(r: &DissipationRecord, tr_sigma_d: f64) -> Self {
        Self {
            t: r.t,
            j_left: r.j_left,
            j_right: r.j_right,
            tr_sigma_d,
            q_left_norm: r.q_left.norm(),
            q_right_norm: r.q_right.norm(),
        }
    }
}

pub struct DissipationCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> DissipationCsv<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(["t", "J_L", "J_R", "tr_sigma_D", "norm_Q_L", "norm_Q_R"])?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, r: &DissipationRow) -> Result<()> {
        let vals = [
            r.t,
            r.j_left,
            r.j_right,
            r.tr_sigma_d,
            r.q_left_norm,
            r.q_right_norm,
        ];
        self.inner.write_record(vals.iter().map(|&x| fmt_f64(x)))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Binary dump: u64 n, u64 count, then count row-major n×n matrices of
/// little-endian (re, im) f64 pairs.
pub struct MatrixDump<W: Write> {
    inner: W,
    n: usize,
    expected: usize,
    written: usize,
}

impl<W: Write> MatrixDump<W> {
    pub fn new(mut inner: W, n: usize, count: usize) -> Result<Self> {
        inner.write_all(&(n as u64).to_le_bytes())?;
        inner.write_all(&(count as u64).to_le_bytes())?;
        Ok(Self {
            inner,
            n,
            expected: count,
            written: 0,
        })
    }

    pub fn push(&mut self, m: &CMatrix) -> Result<()> {
        if m.nrows() != self.n || m.ncols() != self.n {
            return Err(Error::DimensionMismatch {
                context: "matrix dump",
                expected: self.n,
                found: m.nrows(),
            });
        }
        if self.written == self.expected {
            return Err(Error::InvalidInput(format!(
                "matrix dump declared {} matrices",
                self.expected
            )));
        }
        write_matrix(&mut self.inner, m)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.expected {
            return Err(Error::InvalidInput(format!(
                "matrix dump declared {} matrices but {} were written",
                self.expected, self.written
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn write_matrix<W: Write>(w: &mut W, m: &CMatrix) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let z = m[(r, c)];
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_matrix<R: Read>(r: &mut R, n: usize) -> Result<CMatrix> {
    let mut m = CMatrix::zeros(n, n);
    for row in 0..n {
        for col in 0..n {
            let re = read_f64(r)?;
            let im = read_f64(r)?;
            m[(row, col)] = C64::new(re, im);
        }
    }
    Ok(m)
}

pub fn write_dump<W: Write>(w: W, matrices: &[CMatrix]) -> Result<W> {
    let n = matrices.first().map_or(0, |m| m.nrows());
    let mut dump = MatrixDump::new(w, n, matrices.len())?;
    for m in matrices {
        dump.push(m)?;
    }
    dump.finish()
}

pub fn read_dump<R: Read>(mut r: R) -> Result<Vec<CMatrix>> {
    let n = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    (0..count).map(|_| read_matrix(&mut r, n)).collect()
}

const LOG_MAGIC: &[u8; 8] = b"ORDMQLG1";

/// Q log of a full run together with the device block it produced, for
/// exact replay and for checking the reduced run against it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayFile {
    pub log: DissipationLog,
    pub sigma_d: Vec<CMatrix>,
    /// Fingerprint of the system that produced the log.
    pub fingerprint: String,
}

/// Binary layout: magic, u64 n_D, u64 record count, f64 dt, u64 fingerprint
/// length and bytes, then per record f64 t, j_L, j_R and the σ_D, Q_L, Q_R
/// matrices.
pub fn write_replay_log<W: Write>(
    mut w: W,
    log: &DissipationLog,
    sigma_d: &[CMatrix],
    fingerprint: &str,
) -> Result<()> {
    if sigma_d.len() != log.records.len() {
        return Err(Error::InvalidInput(format!(
            "replay log has {} records but {} device matrices",
            log.records.len(),
            sigma_d.len()
        )));
    }
    w.write_all(LOG_MAGIC)?;
    w.write_all(&(log.n_device() as u64).to_le_bytes())?;
    w.write_all(&(log.records.len() as u64).to_le_bytes())?;
    w.write_all(&log.dt.to_le_bytes())?;
    w.write_all(&(fingerprint.len() as u64).to_le_bytes())?;
    w.write_all(fingerprint.as_bytes())?;
    for (r, s) in log.records.iter().zip(sigma_d) {
        for x in [r.t, r.j_left, r.j_right] {
            w.write_all(&x.to_le_bytes())?;
        }
        write_matrix(&mut w, s)?;
        write_matrix(&mut w, &r.q_left)?;
        write_matrix(&mut w, &r.q_right)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_replay_log<R: Read>(mut r: R) -> Result<ReplayFile> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != LOG_MAGIC {
        return Err(Error::InvalidInput("not a replay log (bad magic)".into()));
    }
    let n = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let dt = read_f64(&mut r)?;
    let flen = read_u64(&mut r)? as usize;
    if flen > 1024 {
        return Err(Error::InvalidInput(
            "replay log fingerprint is implausibly long".into(),
        ));
    }
    let mut fbytes = vec![0u8; flen];
    r.read_exact(&mut fbytes)?;
    let fingerprint = String::from_utf8(fbytes)
        .map_err(|_| Error::InvalidInput("replay log fingerprint is not UTF-8".into()))?;
    let mut log = DissipationLog::new(dt);
    let mut sigma_d = Vec::new();
    for _ in 0..count {
        let t = read_f64(&mut r)?;
        let j_left = read_f64(&mut r)?;
        let j_right = read_f64(&mut r)?;
        sigma_d.push(read_matrix(&mut r, n)?);
        let q_left = read_matrix(&mut r, n)?;
        let q_right = read_matrix(&mut r, n)?;
        log.records.push(DissipationRecord {
            t,
            q_left,
            q_right,
            j_left,
            j_right,
        });
    }
    Ok(ReplayFile {
        log,
        sigma_d,
        fingerprint,
    })
}

pub fn read_replay_log_file(path: &Path) -> Result<ReplayFile> {
    read_replay_log(BufReader::new(File::open(path)?))
}

/// Sample table: one row per node, d coordinates then the value. A header
/// row is optional on input.
pub fn read_samples<R: Read>(r: R) -> Result<SampledFunction> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r);
    let mut rows = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| parse_f64(f, &format!("samples row {}", i + 1)))
            .collect::<Result<_>>()?;
        if vals.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "samples row {} needs at least one coordinate and a value",
                i + 1
            )));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::InvalidInput(format!(
                "samples row {} has a different width",
                i + 1
            )));
        }
        let (x, v) = vals.split_at(vals.len() - 1);
        rows.push((x.to_vec(), v[0]));
    }
    SampledFunction::from_nodes(&rows)
}

pub fn read_samples_file(path: &Path) -> Result<SampledFunction> {
    read_samples(BufReader::new(File::open(path)?))
}

pub fn write_samples<W: Write>(w: W, samples: &SampledFunction) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = samples.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.push("value".into());
    out.write_record(&header)?;
    for (x, v) in samples.rows() {
        let mut rec: Vec<String> = x.iter().map(|&c| fmt_f64(c)).collect();
        rec.push(fmt_f64(v));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Numeric columns of a CSV file with a header row. Columns holding any
/// non-numeric field (such as `mode`) are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(&self.columns[i])
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

pub fn read_numeric_csv<R: Read>(r: R) -> Result<NumericTable> {
    let mut reader = csv::Reader::from_reader(r);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (col, field) in raw.iter_mut().zip(rec.iter()) {
            col.push(field.to_owned());
        }
    }
    let mut out = NumericTable {
        headers: Vec::new(),
        columns: Vec::new(),
    };
    for (h, col) in headers.into_iter().zip(raw) {
        let parsed: std::result::Result<Vec<f64>, _> =
            col.iter().map(|f| f.trim().parse::<f64>()).collect();
        if let Ok(vals) = parsed {
            out.headers.push(h);
            out.columns.push(vals);
        }
    }
    Ok(out)
}

pub fn read_numeric_csv_file(path: &Path) -> Result<NumericTable> {
    read_numeric_csv(BufReader::new(File::open(path)?))
}

pub fn create_buffered(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuation::Grid;
    use crate::linalg::real;

    fn sample_hermitian() -> CMatrix {
        let mut m = CMatrix::zeros(3, 3);
        m[(0, 0)] = real(1.0);
        m[(1, 1)] = real(-0.5);
        m[(2, 2)] = real(0.25);
        m[(0, 1)] = C64::new(0.1, 0.2);
        m[(1, 0)] = C64::new(0.1, -0.2);
        m[(1, 2)] = C64::new(-1.0 / 3.0, 1e-17);
        m[(2, 1)] = C64::new(-1.0 / 3.0, -1e-17);
        m
    }

    #[test]
    fn matrix_text_roundtrip_is_exact() {
        let m = sample_hermitian();
        let mut buf = Vec::new();
        write_hermitian_matrix(&mut buf, &m).unwrap();
        let back = parse_hermitian_matrix(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn matrix_text_rejects_non_hermitian_and_missing() {
        let text = "2\n0 0 1 0\n0 1 1 0\n1 0 2 0\n1 1 0 0\n";
        assert!(matches!(
            parse_hermitian_matrix(text),
            Err(Error::NotHermitian { .. })
        ));
        let short = "2\n0 0 1 0\n0 1 1 0\n1 0 1 0\n";
        assert!(parse_hermitian_matrix(short).is_err());
        let dup = "1\n0 0 1 0\n0 0 1 0\n";
        assert!(parse_hermitian_matrix(dup).is_err());
    }

    #[test]
    fn dump_roundtrip_and_layout() {
        let m = sample_hermitian();
        let buf = write_dump(Vec::new(), &[m.clone(), m.clone() * real(2.0)]).unwrap();
        assert_eq!(buf.len(), 16 + 2 * 9 * 16);
        assert_eq!(u64::from_le_bytes(buf[0..8].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        // second entry of the first matrix is (0, 1) in row-major order
        let re = f64::from_le_bytes(buf[32..40].try_into().unwrap());
        assert_eq!(re, 0.1);
        let back = read_dump(&buf[..]).unwrap();
        assert_eq!(back[0], m);
        assert_eq!(back[1], m * real(2.0));
    }

    #[test]
    fn dump_count_is_enforced() {
        let m = sample_hermitian();
        let mut d = MatrixDump::new(Vec::new(), 3, 2).unwrap();
        d.push(&m).unwrap();
        assert!(d.finish().is_err());
    }

    #[test]
    fn replay_log_roundtrip() {
        let mut log = DissipationLog::new(0.01);
        for k in 0..3 {
            let q = sample_hermitian() * real(k as f64);
            log.records.push(DissipationRecord {
                t: k as f64 * 0.01,
                q_left: q.clone(),
                q_right: -q,
                j_left: k as f64,
                j_right: -(k as f64),
            });
        }
        let sigma: Vec<CMatrix> = (0..3)
            .map(|k| sample_hermitian() * real(0.5 + k as f64))
            .collect();
        let mut buf = Vec::new();
        write_replay_log(&mut buf, &log, &sigma, "abc123").unwrap();
        let back = read_replay_log(&buf[..]).unwrap();
        assert_eq!(back.fingerprint, "abc123");
        assert_eq!(back.log, log);
        assert_eq!(back.sigma_d, sigma);
        assert!(write_replay_log(Vec::new(), &log, &sigma[..2], "x").is_err());
        buf[0] = b'X';
        assert!(read_replay_log(&buf[..]).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let mut w = TrajectoryCsv::new(Vec::new(), Some("wide-band")).unwrap();
        w.row(0.0, [1.0, 2.0, 0.5]).unwrap();
        w.row(0.001, [1.0, 2.0, 0.5]).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,tr_sigma_L,tr_sigma_D,tr_sigma_R,mode");
        assert_eq!(lines[1], "0e0,1e0,2e0,5e-1,wide-band");
        let table = read_numeric_csv(text.as_bytes()).unwrap();
        assert_eq!(table.headers.len(), 4);
        assert_eq!(table.column("t").unwrap(), &[0.0, 0.001]);
    }

    #[test]
    fn samples_roundtrip_with_and_without_header() {
        let grid = Grid::spanning(&[0.0, 1.0], &[1.0, 2.0], &[3, 4]).unwrap();
        let s = SampledFunction::from_fn(grid, |x| x[0] * x[1] + 0.1).unwrap();
        let mut buf = Vec::new();
        write_samples(&mut buf, &s).unwrap();
        let back = read_samples(&buf[..]).unwrap();
        assert_eq!(back.max_abs_diff(&s).unwrap(), 0.0);
        let text = String::from_utf8(buf).unwrap();
        let no_header: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let back = read_samples(no_header.as_bytes()).unwrap();
        assert_eq!(back.max_abs_diff(&s).unwrap(), 0.0);
    }

    #[test]
    fn float_format_roundtrips() {
        for x in [0.0, -0.0, 1.0 / 3.0, 1e-300, 6.02e23, -2.5] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
