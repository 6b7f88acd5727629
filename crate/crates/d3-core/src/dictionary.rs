//! Dictionaries of unit-norm patch atoms and the multi-level sets used by
//! the level-indexed pursuit.
//!
//! Atoms are stored as `f32`, matching the on-disk format exactly so that a
//! save/load round trip is bit-identical. All correlation arithmetic is
//! carried out in `f64` regardless of storage precision.
//!
//! # File format (`.d3` files, little-endian)
//!
//! ```text
//! magic            8 bytes  "D3DICT01"
//! patch_size       u32
//! channels         u32
//! kappa            u32      number of levels
//! epsilon          f32      admission threshold used at build time
//! per level:
//!     eta          u32      atom count
//!     atoms        eta * patch_size^2 * channels f32, column-major
//!                           (each atom contiguous)
//! corpus_hash      u64      fingerprint of the training corpus
//! seed             u64      RNG seed the set was built with
//! ```

use std::fs;
use std::path::Path;

use crate::error::{D3Error, Result};
use crate::util::io_with_path;

pub const DICT_MAGIC: &[u8; 8] = b"D3DICT01";

/// Unit-norm atom tolerance, both for construction and load validation.
const NORM_TOL: f64 = 1e-5;

/// One dictionary: `eta` unit-norm atoms of a fixed dimension, tied to a
/// 1-based sparsity level.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    level: usize,
    atom_dim: usize,
    atoms: Vec<f32>,
}

impl Dictionary {
    pub fn new(level: usize, atom_dim: usize) -> Result<Self> {
        if level == 0 {
            return Err(D3Error::Dimension("dictionary level is 1-based".into()));
        }
        if atom_dim == 0 {
            return Err(D3Error::Dimension("atom dimension must be positive".into()));
        }
        Ok(Self { level, atom_dim, atoms: Vec::new() })
    }

    /// Appends an atom. The input must already be unit-norm within `1e-5`;
    /// it is stored in `f32`, which preserves that tolerance.
    pub fn push_atom(&mut self, atom: &[f64]) -> Result<()> {
        if atom.len() != self.atom_dim {
            return Err(D3Error::Dimension(format!(
                "atom length {} does not match dictionary dimension {}",
                atom.len(),
                self.atom_dim
            )));
        }
        let norm = crate::util::l2_norm(atom);
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(D3Error::Dimension(format!(
                "atom {} of level {} not unit-norm (norm {norm})",
                self.n_atoms(),
                self.level
            )));
        }
        self.atoms.extend(atom.iter().map(|&v| v as f32));
        Ok(())
    }

    #[must_use]
    pub fn level(&self) -> usize {
        self.level
    }

    #[must_use]
    pub fn atom_dim(&self) -> usize {
        self.atom_dim
    }

    #[must_use]
    pub fn n_atoms(&self) -> usize {
        self.atoms.len() / self.atom_dim
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    #[must_use]
    pub fn atom(&self, k: usize) -> &[f32] {
        &self.atoms[k * self.atom_dim..(k + 1) * self.atom_dim]
    }

    /// Inner products of `v` with every atom, accumulated in `f64`.
    pub fn correlate(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.atom_dim {
            return Err(D3Error::Dimension(format!(
                "vector length {} does not match atom dimension {}",
                v.len(),
                self.atom_dim
            )));
        }
        let mut out = Vec::with_capacity(self.n_atoms());
        for k in 0..self.n_atoms() {
            let atom = self.atom(k);
            let mut acc = 0.0f64;
            for i in 0..self.atom_dim {
                acc += v[i] * f64::from(atom[i]);
            }
            out.push(acc);
        }
        Ok(out)
    }

    fn validate_norms(&self) -> Result<()> {
        for k in 0..self.n_atoms() {
            let norm = self
                .atom(k)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(D3Error::Format(format!(
                    "atom {k} of level {} not unit-norm (norm {norm:.6})",
                    self.level
                )));
            }
        }
        Ok(())
    }
}

/// A stack of dictionaries, one per sparsity level, plus the provenance of
/// the build that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    patch_size: usize,
    channels: usize,
    epsilon: f32,
    corpus_hash: u64,
    seed: u64,
    levels: Vec<Dictionary>,
}

impl DictionarySet {
    pub fn new(
        patch_size: usize,
        channels: usize,
        epsilon: f32,
        corpus_hash: u64,
        seed: u64,
        levels: Vec<Dictionary>,
    ) -> Result<Self> {
        if patch_size == 0 {
            return Err(D3Error::Dimension("patch size must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(D3Error::Dimension(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(D3Error::Dimension(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        if levels.is_empty() {
            return Err(D3Error::Dimension("a dictionary set needs at least one level".into()));
        }
        let dim = patch_size * patch_size * channels;
        for (i, d) in levels.iter().enumerate() {
            if d.level() != i + 1 {
                return Err(D3Error::Dimension(format!(
                    "level index {} at position {i}; levels must run 1..kappa",
                    d.level()
                )));
            }
            if d.atom_dim() != dim {
                return Err(D3Error::Dimension(format!(
                    "level {} has atom dimension {} but the set implies {dim}",
                    d.level(),
                    d.atom_dim()
                )));
            }
            if d.is_empty() {
                return Err(D3Error::Dimension(format!("level {} holds no atoms", d.level())));
            }
        }
        Ok(Self { patch_size, channels, epsilon, corpus_hash, seed, levels })
    }

    #[must_use]
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    #[must_use]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[must_use]
    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    #[must_use]
    pub fn corpus_hash(&self) -> u64 {
        self.corpus_hash
    }

    #[must_use]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of levels, which is also the maximum usable sparsity.
    #[must_use]
    pub fn sparsity(&self) -> usize {
        self.levels.len()
    }

    #[must_use]
    pub fn atom_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    #[must_use]
    pub fn levels(&self) -> &[Dictionary] {
        &self.levels
    }

    /// Level lookup, 1-based.
    #[must_use]
    pub fn level(&self, i: usize) -> &Dictionary {
        &self.levels[i - 1]
    }

    #[must_use]
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DICT_MAGIC);
        out.extend_from_slice(&(self.patch_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        for level in &self.levels {
            out.extend_from_slice(&(level.n_atoms() as u32).to_le_bytes());
            for &v in &level.atoms {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.corpus_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != DICT_MAGIC {
            if magic.starts_with(b"D3DICT") {
                return Err(D3Error::Format(format!(
                    "unsupported dictionary version {:?}",
                    String::from_utf8_lossy(&magic[6..])
                )));
            }
            return Err(D3Error::Format("not a dictionary file (bad magic)".into()));
        }
        let patch_size = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let kappa = r.u32()? as usize;
        let epsilon = r.f32()?;
        if kappa == 0 || kappa > 64 {
            return Err(D3Error::Format(format!("implausible level count {kappa}")));
        }
        if patch_size == 0 || patch_size > 4096 {
            return Err(D3Error::Format(format!("implausible patch size {patch_size}")));
        }
        if channels != 1 && channels != 3 {
            return Err(D3Error::Format(format!("implausible channel count {channels}")));
        }
        let dim = patch_size * patch_size * channels;
        let mut levels = Vec::with_capacity(kappa);
        for i in 1..=kappa {
            let eta = r.u32()? as usize;
            if eta == 0 {
                return Err(D3Error::Format(format!("level {i} declares zero atoms")));
            }
            let mut atoms = Vec::with_capacity(eta * dim);
            for _ in 0..eta * dim {
                atoms.push(r.f32()?);
            }
            let dict = Dictionary { level: i, atom_dim: dim, atoms };
            dict.validate_norms()?;
            levels.push(dict);
        }
        let corpus_hash = r.u64()?;
        let seed = r.u64()?;
        if !r.done() {
            return Err(D3Error::Format(format!(
                "{} trailing bytes after dictionary payload",
                r.remaining()
            )));
        }
        // Construction re-checks the cross-field invariants; a failure there
        // means the file is inconsistent, so report it as a format problem.
        DictionarySet::new(patch_size, channels, epsilon, corpus_hash, seed, levels)
            .map_err(|e| D3Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| io_with_path(e, path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_with_path(e, path))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(D3Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
