//! On-disk cache of the evolution-operator family.
//!
//! A cache root holds one directory per `(model, time grid, evolution config)`
//! triple. Each directory contains `U_{m:06}.fett` files and a text manifest
//! written last, so a directory without a manifest is never read.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evolution::{evolution_operators, family_from_operators, EvolutionConfig, EvolutionError, EvolutionFamily, FamilySource, TimeGrid};
use crate::filter::FilterParams;
use crate::model::IsingSpec;
use crate::tn::io::{read_operator, write_operator};

pub const MANIFEST: &str = "manifest.txt";
const LOCK: &str = ".lock";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("corrupt cache file {}: {reason}", file.display())]
    Corrupt { file: PathBuf, reason: String },
    #[error("cache manifest mismatch in `{field}`: expected {expected}, found {found}")]
    HashMismatch { field: String, expected: String, found: String },
    #[error("cache directory {} is locked by another writer", .0.display())]
    Locked(PathBuf),
    #[error("family is not in operator-cache mode")]
    NotOperatorFamily,
    #[error("cache io error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
}

type CResult<T> = Result<T, CacheError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec_hash: String,
    pub grid_hash: String,
    pub config_hash: String,
    pub spec: String,
    pub grid: String,
    pub config: String,
    pub dt: f64,
    pub dt_eff: f64,
    pub count: usize,
    pub errors: Vec<f64>,
}

impl Manifest {
    fn expected(spec: &IsingSpec, fp: &FilterParams, cfg: &EvolutionConfig) -> Self {
        let grid = TimeGrid::for_filter(fp, cfg.dt);
        Self {
            spec_hash: sha256_hex(&spec.key()),
            grid_hash: sha256_hex(&fp.grid_key()),
            config_hash: sha256_hex(&cfg.key()),
            spec: spec.key(),
            grid: fp.grid_key(),
            config: cfg.key(),
            dt: cfg.dt,
            dt_eff: grid.dt_eff,
            count: fp.r_eff + 1,
            errors: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("spec_hash = {}\n", self.spec_hash));
        s.push_str(&format!("grid_hash = {}\n", self.grid_hash));
        s.push_str(&format!("config_hash = {}\n", self.config_hash));
        s.push_str(&format!("spec = {}\n", self.spec));
        s.push_str(&format!("grid = {}\n", self.grid));
        s.push_str(&format!("config = {}\n", self.config));
        s.push_str(&format!("dt = {:e}\n", self.dt));
        s.push_str(&format!("dt_eff = {:e}\n", self.dt_eff));
        s.push_str(&format!("count = {}\n", self.count));
        for (m, e) in self.errors.iter().enumerate() {
            s.push_str(&format!("error_{m:06} = {e:e}\n"));
        }
        s
    }

    pub fn parse(text: &str, file: &Path) -> CResult<Self> {
        let corrupt = |reason: String| CacheError::Corrupt { file: file.to_path_buf(), reason };
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("malformed line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| corrupt(format!("missing key `{k}`")));
        let num = |k: &str| -> CResult<f64> { get(k)?.parse().map_err(|_| corrupt(format!("bad number for `{k}`"))) };
        let count: usize = get("count")?.parse().map_err(|_| corrupt("bad count".into()))?;
        let errors = (0..count).map(|m| num(&format!("error_{m:06}"))).collect::<CResult<_>>()?;
        Ok(Self {
            spec_hash: get("spec_hash")?,
            grid_hash: get("grid_hash")?,
            config_hash: get("config_hash")?,
            spec: get("spec")?,
            grid: get("grid")?,
            config: get("config")?,
            dt: num("dt")?,
            dt_eff: num("dt_eff")?,
            count,
            errors,
        })
    }

    /// First field that disagrees with `want`.
    fn check(&self, want: &Manifest) -> CResult<()> {
        let mismatch = |f: &str, e: String, g: String| Err(CacheError::HashMismatch { field: f.into(), expected: e, found: g });
        if self.spec_hash != want.spec_hash {
            return mismatch("spec_hash", want.spec_hash.clone(), self.spec_hash.clone());
        }
        if self.grid_hash != want.grid_hash {
            return mismatch("grid_hash", want.grid_hash.clone(), self.grid_hash.clone());
        }
        if self.config_hash != want.config_hash {
            return mismatch("config_hash", want.config_hash.clone(), self.config_hash.clone());
        }
        if self.dt != want.dt {
            return mismatch("dt", format!("{:e}", want.dt), format!("{:e}", self.dt));
        }
        if self.count != want.count {
            return mismatch("count", want.count.to_string(), self.count.to_string());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
    Rebuilt,
}

/// Exclusive writer lock, released on drop.
struct WriteLock(PathBuf);

impl WriteLock {
    fn acquire(dir: &Path) -> CResult<Self> {
        let p = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(_) => Ok(Self(p)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CacheError::Locked(dir.to_path_buf())),
            Err(e) => Err(CacheError::Io { path: p, source: e }),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Clone, Debug)]
pub struct OperatorCache {
    root: PathBuf,
}

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub dir: PathBuf,
    pub manifest: Option<Manifest>,
    pub files: usize,
    pub bytes: u64,
}

pub fn operator_file(m: usize) -> String {
    format!("U_{m:06}.fett")
}

impl OperatorCache {
    pub fn open(root: impl AsRef<Path>) -> CResult<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, spec: &IsingSpec, fp: &FilterParams, cfg: &EvolutionConfig) -> PathBuf {
        let h = sha256_hex(&format!("{}|{}|{}", spec.key(), fp.grid_key(), cfg.key()));
        self.root.join(&h[..16])
    }

    /// Load a stored family, validating the manifest against the request.
    pub fn load(&self, spec: &IsingSpec, fp: &FilterParams, cfg: &EvolutionConfig) -> CResult<Option<EvolutionFamily>> {
        let dir = self.entry_dir(spec, fp, cfg);
        let mpath = dir.join(MANIFEST);
        if !mpath.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest = Manifest::parse(&text, &mpath)?;
        manifest.check(&Manifest::expected(spec, fp, cfg))?;
        let mut ops = Vec::with_capacity(manifest.count);
        for m in 0..manifest.count {
            let p = dir.join(operator_file(m));
            let f = File::open(&p).map_err(|e| CacheError::Corrupt { file: p.clone(), reason: e.to_string() })?;
            let op = read_operator(&mut BufReader::new(f)).map_err(|e| CacheError::Corrupt { file: p.clone(), reason: e.to_string() })?;
            if op.len() != spec.n {
                return Err(CacheError::Corrupt { file: p, reason: format!("{} sites, expected {}", op.len(), spec.n) });
            }
            ops.push(op);
        }
        let grid = TimeGrid::for_filter(fp, cfg.dt);
        Ok(Some(family_from_operators(spec, grid, ops, manifest.errors, cfg)))
    }

    /// Persist an operator-cache family. Files go first, the manifest last.
    pub fn store(&self, family: &EvolutionFamily, fp: &FilterParams) -> CResult<PathBuf> {
        let FamilySource::MpoCache { operators, errors, cfg } = &family.source else {
            return Err(CacheError::NotOperatorFamily);
        };
        let dir = self.entry_dir(&family.spec, fp, cfg);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let _lock = WriteLock::acquire(&dir)?;
        let mpath = dir.join(MANIFEST);
        if mpath.exists() {
            fs::remove_file(&mpath).map_err(io_err(&mpath))?;
        }
        for (m, op) in operators.iter().enumerate() {
            let p = dir.join(operator_file(m));
            let tmp = dir.join(format!("{}.tmp", operator_file(m)));
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
            write_operator(&mut w, op).map_err(io_err(&tmp))?;
            w.flush().map_err(io_err(&tmp))?;
            drop(w);
            fs::rename(&tmp, &p).map_err(io_err(&p))?;
        }
        let mut manifest = Manifest::expected(&family.spec, fp, cfg);
        manifest.errors = errors.clone();
        let tmp = dir.join("manifest.tmp");
        fs::write(&tmp, manifest.to_text()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &mpath).map_err(io_err(&mpath))?;
        Ok(dir)
    }

    /// Load the family if a valid entry exists, otherwise build and persist
    /// it. A manifest mismatch forces a rebuild; corrupt files are errors.
    pub fn load_or_build(&self, spec: &IsingSpec, fp: &FilterParams, cfg: &EvolutionConfig) -> CResult<(EvolutionFamily, CacheStatus)> {
        let status = match self.load(spec, fp, cfg) {
            Ok(Some(f)) => {
                log::info!("cache hit: {}", self.entry_dir(spec, fp, cfg).display());
                return Ok((f, CacheStatus::Hit));
            }
            Ok(None) => CacheStatus::Built,
            Err(e @ CacheError::HashMismatch { .. }) => {
                log::warn!("{e}; rebuilding");
                CacheStatus::Rebuilt
            }
            Err(e) => return Err(e),
        };
        log::info!("cache miss: building {} operators", fp.r_eff + 1);
        let grid = TimeGrid::for_filter(fp, cfg.dt);
        let (ops, errs) = evolution_operators(spec, &grid, cfg)?;
        let family = family_from_operators(spec, grid, ops, errs, cfg);
        self.store(&family, fp)?;
        Ok((family, status))
    }

    pub fn list(&self) -> CResult<Vec<CacheEntry>> {
        let mut out = Vec::new();
        let rd = fs::read_dir(&self.root).map_err(io_err(&self.root))?;
        for ent in rd {
            let ent = ent.map_err(io_err(&self.root))?;
            let dir = ent.path();
            if !dir.is_dir() {
                continue;
            }
            let mpath = dir.join(MANIFEST);
            let manifest = fs::read_to_string(&mpath).ok().and_then(|t| Manifest::parse(&t, &mpath).ok());
            let (mut files, mut bytes) = (0, 0);
            for f in fs::read_dir(&dir).map_err(io_err(&dir))?.flatten() {
                if f.file_name().to_string_lossy().ends_with(".fett") {
                    files += 1;
                    bytes += f.metadata().map(|m| m.len()).unwrap_or(0);
                }
            }
            out.push(CacheEntry { dir, manifest, files, bytes });
        }
        out.sort_by(|a, b| a.dir.cmp(&b.dir));
        Ok(out)
    }

    /// Remove every entry directory; returns how many were removed.
    pub fn clear(&self) -> CResult<usize> {
        let entries = self.list()?;
        for e in &entries {
            let _lock = WriteLock::acquire(&e.dir)?;
            for f in fs::read_dir(&e.dir).map_err(io_err(&e.dir))?.flatten() {
                if f.file_name() != LOCK {
                    fs::remove_file(f.path()).map_err(io_err(&f.path()))?;
                }
            }
            drop(_lock);
            fs::remove_dir(&e.dir).map_err(io_err(&e.dir))?;
        }
        Ok(entries.len())
    }
}
