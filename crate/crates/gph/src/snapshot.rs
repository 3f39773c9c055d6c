//! Binary snapshots of marginals and hierarchy states.
//!
//! Little-endian layout: magic `GPH1`, version `u32`, `d u32`, `M u32`, `L f64`, `k u32`.
//! `k > 0` is followed by the position-space entries of one marginal; `k = 0` by a
//! `u32` level count and the levels `1..=N` back to back. Entries are `(re, im)` f64
//! pairs in row-major order over `(x_1..x_k, x'_1..x'_k)`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use gph_core::marginal::{element_count, DENSE_GUARD};
use gph_core::{Basis, Complex64, HierarchyState, Level, Marginal, TorusGrid};

pub const MAGIC: &[u8; 4] = b"GPH1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("bad magic {0:?}: not a snapshot file")]
    BadMagic([u8; 4]),
    #[error("snapshot format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error(transparent)]
    Core(#[from] gph_core::Error),
    #[error(transparent)]
    Io(io::Error),
}

#[derive(Debug, Clone)]
pub enum Snapshot {
    Marginal(Marginal),
    State(HierarchyState),
}

impl Snapshot {
    pub fn grid(&self) -> &TorusGrid {
        match self {
            Snapshot::Marginal(m) => m.grid(),
            Snapshot::State(s) => s.grid(),
        }
    }
}

fn write_header<W: Write>(w: &mut W, grid: &TorusGrid, k: u32) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(grid.dim() as u32).to_le_bytes())?;
    w.write_all(&(grid.points() as u32).to_le_bytes())?;
    w.write_all(&grid.period().to_le_bytes())?;
    w.write_all(&k.to_le_bytes())
}

fn write_entries<W: Write>(w: &mut W, data: &[Complex64]) -> io::Result<()> {
    for z in data {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_marginal<W: Write>(w: &mut W, m: &Marginal) -> io::Result<()> {
    write_header(w, m.grid(), m.k() as u32)?;
    if m.basis() == Basis::Position {
        write_entries(w, m.data())
    } else {
        write_entries(w, m.to_position().data())
    }
}

/// Factored levels are expanded, so every level must fit the dense guard.
pub fn write_state<W: Write>(w: &mut W, s: &HierarchyState) -> Result<(), SnapshotError> {
    let dense = s
        .levels()
        .iter()
        .map(|l| l.to_dense(Basis::Position))
        .collect::<gph_core::Result<Vec<_>>>()?;
    write_header(w, s.grid(), 0).map_err(SnapshotError::Io)?;
    w.write_all(&(dense.len() as u32).to_le_bytes()).map_err(SnapshotError::Io)?;
    for m in &dense {
        write_entries(w, m.data()).map_err(SnapshotError::Io)?;
    }
    Ok(())
}

pub fn snapshot_write(snapshot: &Snapshot, path: &Path) -> Result<(), SnapshotError> {
    let mut w = BufWriter::new(File::create(path).map_err(SnapshotError::Io)?);
    match snapshot {
        Snapshot::Marginal(m) => write_marginal(&mut w, m).map_err(SnapshotError::Io)?,
        Snapshot::State(s) => write_state(&mut w, s)?,
    }
    w.flush().map_err(SnapshotError::Io)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), SnapshotError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => SnapshotError::Truncated(format!("file ends inside {what}")),
        _ => SnapshotError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, SnapshotError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_level<R: Read>(r: &mut R, grid: &TorusGrid, k: usize) -> Result<Marginal, SnapshotError> {
    let n = element_count(grid, k);
    if n > DENSE_GUARD {
        return Err(SnapshotError::InvalidHeader(format!("level {k} has {n} entries, above the 2^28 guard")));
    }
    let n = n as usize;
    let mut data = Vec::with_capacity(n);
    let mut buf = vec![0u8; 16 * 4096];
    let mut left = n;
    while left > 0 {
        let take = left.min(4096);
        let chunk = &mut buf[..16 * take];
        r.read_exact(chunk).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => {
                SnapshotError::Truncated(format!("level {k} expects {n} entries, file ends after {}", n - left))
            }
            _ => SnapshotError::Io(e),
        })?;
        for e in chunk.chunks_exact(16) {
            let re = f64::from_le_bytes(e[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(e[8..].try_into().expect("8 bytes"));
            data.push(Complex64::new(re, im));
        }
        left -= take;
    }
    Ok(Marginal::from_data(grid, k, Basis::Position, data)?)
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Snapshot, SnapshotError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(SnapshotError::BadMagic(magic));
    }
    let version = read_u32(r, "header")?;
    if version != FORMAT_VERSION {
        return Err(SnapshotError::VersionMismatch { found: version });
    }
    let d = read_u32(r, "header")? as usize;
    let m = read_u32(r, "header")? as usize;
    let mut lb = [0u8; 8];
    read_exact(r, &mut lb, "header")?;
    let l = f64::from_le_bytes(lb);
    let k = read_u32(r, "header")? as usize;
    let grid = TorusGrid::new(d, m, l).map_err(|e| SnapshotError::InvalidHeader(e.to_string()))?;
    let out = if k > 0 {
        Snapshot::Marginal(read_level(r, &grid, k)?)
    } else {
        let n = read_u32(r, "level count")? as usize;
        let levels = (1..=n)
            .map(|k| Ok(Level::Dense(read_level(r, &grid, k)?)))
            .collect::<Result<Vec<_>, SnapshotError>>()?;
        Snapshot::State(HierarchyState::new(&grid, levels)?)
    };
    let rest = io::copy(r, &mut io::sink()).map_err(SnapshotError::Io)?;
    if rest > 0 {
        return Err(SnapshotError::TrailingBytes(rest));
    }
    Ok(out)
}

pub fn snapshot_read(path: &Path) -> Result<Snapshot, SnapshotError> {
    let mut r = BufReader::new(File::open(path).map_err(SnapshotError::Io)?);
    read_snapshot(&mut r)
}
