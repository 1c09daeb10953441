//! Versioned binary checkpoints.
//!
//! A checkpoint stores everything a run needs to continue bitwise: both
//! students, both teachers, both momentum buffers, the class feature
//! statistics, the step counter, and the exact configs. Floats are written
//! as their IEEE-754 bit patterns, so save/load is the identity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};
use sha2::{Digest, Sha256};

use crate::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::isda::{ClassFeatureStatistics, CovarianceMode};
use crate::model::{ArchConfig, SegModelParams};
use crate::trainer::{BranchState, Trainer};
use crate::types::TrainConfig;

const MAGIC: &[u8; 8] = b"MKDSEGCP";
const VERSION: u32 = 1;

/// Stable 64-bit digest of the run configuration; a resumed run must
/// match the checkpoint's fingerprint.
pub fn config_fingerprint(arch: &ArchConfig, cfg: &TrainConfig, aug: &AugmentParams) -> u64 {
    let blob = serde_json::to_vec(&(arch, cfg, aug)).expect("configs serialize");
    let digest = Sha256::digest(&blob);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn write_json<W: Write>(w: &mut W, value: &impl serde::Serialize) -> Result<()> {
    let blob = serde_json::to_vec(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_u64::<LittleEndian>(blob.len() as u64)?;
    w.write_all(&blob)?;
    Ok(())
}

fn read_json<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let len = r.read_u64::<LittleEndian>()?;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("config blob of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_params<W: Write>(w: &mut W, params: &SegModelParams) -> Result<()> {
    let slices = params.param_slices();
    w.write_u64::<LittleEndian>(slices.len() as u64)?;
    for (_, s) in slices {
        w.write_u64::<LittleEndian>(s.len() as u64)?;
        for &v in s {
            w.write_u64::<LittleEndian>(v.to_bits())?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, arch: &ArchConfig) -> Result<SegModelParams> {
    let mut params = SegModelParams::zeros(arch)?;
    let mut slices = params.param_slices_mut();
    let n = r.read_u64::<LittleEndian>()?;
    if n as usize != slices.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n}",
            slices.len()
        )));
    }
    for (_, s) in slices.iter_mut() {
        let len = r.read_u64::<LittleEndian>()?;
        if len as usize != s.len() {
            return Err(Error::Checkpoint(format!(
                "tensor of length {len} where {} was expected",
                s.len()
            )));
        }
        for v in s.iter_mut() {
            *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
        }
    }
    Ok(params)
}

fn write_stats<W: Write>(w: &mut W, stats: &ClassFeatureStatistics) -> Result<()> {
    let counts = stats.counts();
    let means = stats.means();
    let (c, d) = means.dim();
    w.write_u64::<LittleEndian>(c as u64)?;
    w.write_u64::<LittleEndian>(d as u64)?;
    for &v in counts.iter() {
        w.write_u64::<LittleEndian>(v)?;
    }
    for &v in means.iter() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    for &v in stats.m2_diag().iter() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    match stats.m2_full() {
        Some(full) => {
            w.write_u8(1)?;
            for &v in full.iter() {
                w.write_u64::<LittleEndian>(v.to_bits())?;
            }
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

fn read_stats<R: Read>(r: &mut R) -> Result<ClassFeatureStatistics> {
    let c = r.read_u64::<LittleEndian>()? as usize;
    let d = r.read_u64::<LittleEndian>()? as usize;
    if c == 0 || c > 4096 || d == 0 || d > 65536 {
        return Err(Error::Checkpoint(format!("implausible statistics shape {c}x{d}")));
    }
    let mut counts = Array1::zeros(c);
    for v in counts.iter_mut() {
        *v = r.read_u64::<LittleEndian>()?;
    }
    let mut means = Array2::zeros((c, d));
    for v in means.iter_mut() {
        *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
    }
    let mut m2_diag = Array2::zeros((c, d));
    for v in m2_diag.iter_mut() {
        *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
    }
    let (mode, m2_full) = match r.read_u8()? {
        0 => (CovarianceMode::Diagonal, None),
        1 => {
            let mut full = Array3::zeros((c, d, d));
            for v in full.iter_mut() {
                *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
            }
            (CovarianceMode::Full, Some(full))
        }
        other => return Err(Error::Checkpoint(format!("unknown covariance tag {other}"))),
    };
    ClassFeatureStatistics::from_raw(mode, counts, means, m2_diag, m2_full)
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let arch = trainer.arch().clone();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(config_fingerprint(&arch, &trainer.cfg, &trainer.aug_params))?;
    w.write_u64::<LittleEndian>(trainer.step)?;
    write_json(&mut w, &arch)?;
    write_json(&mut w, &trainer.cfg)?;
    write_json(&mut w, &trainer.aug_params)?;
    for branch in [&trainer.branch1, &trainer.branch2] {
        write_params(&mut w, &branch.student)?;
        write_params(&mut w, &branch.teacher)?;
        write_params(&mut w, &branch.momentum)?;
    }
    write_stats(&mut w, &trainer.stats)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let stored_fingerprint = r.read_u64::<LittleEndian>()?;
    let step = r.read_u64::<LittleEndian>()?;
    let arch: ArchConfig = read_json(&mut r)?;
    let cfg: TrainConfig = read_json(&mut r)?;
    let aug: AugmentParams = read_json(&mut r)?;
    if config_fingerprint(&arch, &cfg, &aug) != stored_fingerprint {
        return Err(Error::Checkpoint(
            "config fingerprint does not match stored configs".into(),
        ));
    }
    let mut branches = Vec::with_capacity(2);
    for _ in 0..2 {
        let student = read_params(&mut r, &arch)?;
        let teacher = read_params(&mut r, &arch)?;
        let momentum = read_params(&mut r, &arch)?;
        branches.push(BranchState {
            student,
            teacher,
            momentum,
        });
    }
    let stats = read_stats(&mut r)?;
    if stats.means().dim() != (arch.num_classes, arch.feature_dim) {
        return Err(Error::Checkpoint(format!(
            "statistics shaped {:?} for a {}x{} model",
            stats.means().dim(),
            arch.num_classes,
            arch.feature_dim
        )));
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    let branch2 = branches.pop().unwrap();
    let branch1 = branches.pop().unwrap();
    Trainer::from_parts(cfg, aug, branch1, branch2, stats, step)
}
