//! Free embedding table (one tangent vector per node) and its file format.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic    b"HLEMBTBL"
//! version  u32
//! dim      u32
//! space    u8        0 = hyperbolic, 1 = euclidean
//! count    u64
//! ids      count x (u32 byte length, utf-8 bytes)
//! payload  count x dim x f64
//! log_tau  f64
//! log_c    f64
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{norm, Curvature, SpaceKind};
use crate::loss::EmbeddingRows;

pub const MAGIC: &[u8; 8] = b"HLEMBTBL";
pub const VERSION: u32 = 1;

/// Initial temperature.
pub const INITIAL_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
    pub log_tau: f64,
    /// Unused in Euclidean mode.
    pub log_c: f64,
    pub space: SpaceKind,
}

impl EmbeddingTable {
    /// All-zero table with the default temperature and unit curvature.
    pub fn zeros(ids: Vec<String>, dim: usize, space: SpaceKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate node id {id:?}")));
            }
        }
        Ok(EmbeddingTable {
            data: vec![0.0; ids.len() * dim],
            ids,
            index,
            dim,
            log_tau: INITIAL_TAU.ln(),
            log_c: 0.0,
            space,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat row-major storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::new(self.log_c.exp()).unwrap_or_default()
    }

    pub fn tangent_norm(&self, i: usize) -> f64 {
        norm(self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite()) && self.log_tau.is_finite() && self.log_c.is_finite()
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.dim,
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[match self.space {
            SpaceKind::Hyperbolic => 0u8,
            SpaceKind::Euclidean => 1u8,
        }])?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.log_tau.to_le_bytes())?;
        w.write_all(&self.log_c.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
        }
        let dim = read_u32(r)? as usize;
        let mut space = [0u8; 1];
        read_exact(r, &mut space)?;
        let space = match space[0] {
            0 => SpaceKind::Hyperbolic,
            1 => SpaceKind::Euclidean,
            other => return Err(Error::Format(format!("unknown space tag {other}"))),
        };
        let count = read_u64(r)? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            read_exact(r, &mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| Error::Format("node id is not utf-8".into()))?);
        }
        let mut table = EmbeddingTable::zeros(ids, dim, space).map_err(|e| Error::Format(e.to_string()))?;
        for v in table.data.iter_mut() {
            *v = read_f64(r)?;
        }
        table.log_tau = read_f64(r)?;
        table.log_c = read_f64(r)?;
        Ok(table)
    }

    /// `id,norm,v0,...` with a header row.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|k| format!("v{k}")).collect();
        writeln!(w, "id,norm,{}", header.join(","))?;
        for i in 0..self.ids.len() {
            let vals: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", self.ids[i], self.tangent_norm(i), vals.join(","))?;
        }
        Ok(())
    }
}

impl EmbeddingRows for EmbeddingTable {
    fn dim(&self) -> usize {
        EmbeddingTable::dim(self)
    }
    fn len(&self) -> usize {
        EmbeddingTable::len(self)
    }
    fn row(&self, index: usize) -> &[f64] {
        EmbeddingTable::row(self, index)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::io("reading embeddings", e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Gaussian initialization with standard deviation `scale`.
pub fn init_embeddings(ids: Vec<String>, dim: usize, scale: f64, seed: u64, space: SpaceKind) -> Result<EmbeddingTable> {
    if dim < 2 {
        return Err(Error::invalid(format!("embedding dimension must be at least 2, got {dim}")));
    }
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::invalid(format!("init scale must be non-negative, got {scale}")));
    }
    let mut table = EmbeddingTable::zeros(ids, dim, space)?;
    if scale > 0.0 {
        let normal = Normal::new(0.0, scale).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in table.data.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(table)
}

pub fn export_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    table.write_to(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

pub fn import_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let table = EmbeddingTable::read_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("reading embeddings", e))? != 0 {
        return Err(Error::Format("trailing bytes after embedding payload".into()));
    }
    Ok(table)
}

/// Imports a table and checks it has the session's dimension.
pub fn import_embeddings_for_dim(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let table = import_embeddings(path)?;
    table.check_dim(dim)?;
    Ok(table)
}

pub fn export_embeddings_csv(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    table.write_csv(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn zero_scale_gives_zero_vectors() {
        let t = init_embeddings(ids(4), 8, 0.0, 1, SpaceKind::Hyperbolic).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_embeddings(ids(5), 8, 0.1, 42, SpaceKind::Hyperbolic).unwrap();
        let b = init_embeddings(ids(5), 8, 0.1, 42, SpaceKind::Hyperbolic).unwrap();
        assert_eq!(a, b);
        let c = init_embeddings(ids(5), 8, 0.1, 43, SpaceKind::Hyperbolic).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn initial_temperature() {
        let t = init_embeddings(ids(2), 8, 0.1, 0, SpaceKind::Euclidean).unwrap();
        assert!((t.tau() - 0.07).abs() < 1e-15);
        assert_eq!(t.log_c, 0.0);
        assert_eq!(t.curvature().value(), 1.0);
    }

    #[test]
    fn rejects_duplicates_and_small_dims() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(init_embeddings(dup, 8, 0.1, 0, SpaceKind::Euclidean).is_err());
        assert!(init_embeddings(ids(2), 1, 0.1, 0, SpaceKind::Euclidean).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let mut t = init_embeddings(ids(6), 8, 0.3, 9, SpaceKind::Hyperbolic).unwrap();
        t.log_c = 0.25;
        t.log_tau = -3.1;
        export_embeddings(&t, &path).unwrap();
        assert_eq!(import_embeddings(&path).unwrap(), t);
    }

    #[test]
    fn wrong_magic_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.emb");
        std::fs::write(&path, b"NOTATABLE-------------").unwrap();
        assert!(matches!(import_embeddings(&path), Err(Error::Format(_))));
    }

    #[test]
    fn version_and_truncation_errors() {
        let t = init_embeddings(ids(2), 4, 0.3, 9, SpaceKind::Euclidean).unwrap();
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(matches!(EmbeddingTable::read_from(&mut bumped.as_slice()), Err(Error::Format(m)) if m.contains("version")));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(EmbeddingTable::read_from(&mut &truncated[..]), Err(Error::Format(_))));
    }

    #[test]
    fn dimension_mismatch_on_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        export_embeddings(&init_embeddings(ids(3), 8, 0.1, 1, SpaceKind::Hyperbolic).unwrap(), &path).unwrap();
        assert!(matches!(
            import_embeddings_for_dim(&path, 16),
            Err(Error::DimensionMismatch { expected: 16, got: 8 })
        ));
        assert!(import_embeddings_for_dim(&path, 8).is_ok());
    }

    #[test]
    fn csv_export_has_one_row_per_node() {
        let t = init_embeddings(ids(3), 2, 0.1, 1, SpaceKind::Euclidean).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("id,norm,v0,v1\n"));
    }
}
