//! Binary checkpoint container for solved clusters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           4 bytes  "CNRS"
//! version         u32      currently 1
//! params_hash     u64      FNV-1a over the canonical parameter string
//! basis_len       u32      followed by that many UTF-8 bytes
//! geometry:
//!   width, height u32 × 2
//!   periodic_x/y  u8  × 2
//!   n_sites       u32      then (x u32, y u32) per site
//!   n_bonds       u32      then (a u32, b u32, mult u32) per bond
//! provenance      u8       0 = leaf, 1 = merged; then m u64
//! operator_mode   u8       0 = exact, 1 = fast
//! dim             u64
//! arrays, each as rows u64, cols u64, then rows*cols complex entries
//! stored as (re f64, im f64):
//!   rho
//!   eig values    dim × 1 (imaginary parts zero)
//!   eig vectors
//!   per site: b, n, n2
//!   per bond: flags u8 (bit0 hop, bit1 dens), then the present arrays
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::lattice::{Bond, Geometry};
use crate::model::{BondOps, ModelParams, OperatorMode, OperatorSet, SiteOps};
use crate::numerics::{ComplexDense, ComplexSparse, EigenDecomposition, Operator};
use crate::steadystate::DensityMatrix;

use super::{Cluster, CornerError, Provenance, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNRS";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Hash of everything that must match for a checkpoint to be reusable.
pub fn params_hash(params: &ModelParams) -> u64 {
    let canon = format!(
        "dw={:.17e};u={:?};j={:.17e};f={:.17e};g={:.17e};nmax={};z={}",
        params.delta_omega,
        params.interaction,
        params.hopping,
        params.drive,
        params.gamma,
        params.n_max,
        params.z
    );
    fnv1a(canon.as_bytes())
}

pub(super) fn checkpoint_path(
    dir: &Path,
    params: &ModelParams,
    geom: &Geometry,
    m: usize,
    mode: OperatorMode,
) -> PathBuf {
    let mode_tag = match mode {
        OperatorMode::Exact => "exact",
        OperatorMode::Fast => "fast",
    };
    dir.join(format!(
        "cluster_{}x{}_m{}_{}_{:016x}.cnrs",
        geom.width,
        geom.height,
        m,
        mode_tag,
        params_hash(params)
    ))
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_array(w: &mut impl Write, rows: usize, cols: usize, data: &[Complex64]) -> std::io::Result<()> {
    write_u64(w, rows as u64)?;
    write_u64(w, cols as u64)?;
    for z in data {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

fn write_operator(w: &mut impl Write, op: &Operator) -> std::io::Result<()> {
    let d = op.to_dense();
    write_array(w, d.rows(), d.cols(), d.data())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_array(r: &mut impl Read) -> Result<ComplexDense> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        data.push(Complex64::new(re, im));
    }
    Ok(ComplexDense::from_vec(rows, cols, data))
}

/// Serialize a solved cluster. The Fock embedding is not persisted (it is
/// a testing aid, cheap to rebuild for small systems).
pub fn save_cluster(path: &Path, cluster: &Cluster, params: &ModelParams) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u64(&mut w, params_hash(params))?;

    let basis = cluster.basis.as_bytes();
    write_u32(&mut w, basis.len() as u32)?;
    w.write_all(basis)?;

    let g = &cluster.geometry;
    write_u32(&mut w, g.width as u32)?;
    write_u32(&mut w, g.height as u32)?;
    w.write_all(&[g.periodic_x as u8, g.periodic_y as u8])?;
    write_u32(&mut w, g.n_sites() as u32)?;
    for &(x, y) in &g.sites {
        write_u32(&mut w, x as u32)?;
        write_u32(&mut w, y as u32)?;
    }
    write_u32(&mut w, g.bonds.len() as u32)?;
    for b in &g.bonds {
        write_u32(&mut w, b.a as u32)?;
        write_u32(&mut w, b.b as u32)?;
        write_u32(&mut w, b.multiplicity as u32)?;
    }

    match cluster.provenance {
        Provenance::Leaf => {
            w.write_all(&[0u8])?;
            write_u64(&mut w, cluster.dim as u64)?;
        }
        Provenance::Merged { m } => {
            w.write_all(&[1u8])?;
            write_u64(&mut w, m as u64)?;
        }
    }
    w.write_all(&[match cluster.ops.mode {
        OperatorMode::Exact => 0u8,
        OperatorMode::Fast => 1u8,
    }])?;
    write_u64(&mut w, cluster.dim as u64)?;

    write_array(&mut w, cluster.dim, cluster.dim, cluster.rho.mat.data())?;
    let vals: Vec<Complex64> = cluster
        .eig
        .values
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    write_array(&mut w, cluster.dim, 1, &vals)?;
    write_array(
        &mut w,
        cluster.dim,
        cluster.dim,
        cluster.eig.vectors.data(),
    )?;

    for s in &cluster.ops.sites {
        write_operator(&mut w, &s.b)?;
        write_operator(&mut w, &s.n)?;
        write_operator(&mut w, &s.n2)?;
    }
    for b in &cluster.ops.bonds {
        let flags =
            (b.hop.is_some() as u8) | ((b.dens.is_some() as u8) << 1);
        w.write_all(&[flags])?;
        if let Some(op) = &b.hop {
            write_operator(&mut w, op)?;
        }
        if let Some(op) = &b.dens {
            write_operator(&mut w, op)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a cluster saved by [`save_cluster`]; fails if the magic, version,
/// or parameter hash do not match.
pub fn load_cluster(path: &Path, params: &ModelParams) -> Result<Cluster> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CornerError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CornerError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hash = read_u64(&mut r)?;
    if hash != params_hash(params) {
        return Err(CornerError::Checkpoint(
            "parameter hash mismatch; checkpoint belongs to a different run".into(),
        ));
    }

    let basis_len = read_u32(&mut r)? as usize;
    let mut basis_bytes = vec![0u8; basis_len];
    r.read_exact(&mut basis_bytes)?;
    let basis = String::from_utf8(basis_bytes)
        .map_err(|e| CornerError::Checkpoint(format!("basis label not UTF-8: {e}")))?;

    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let periodic_x = read_u8(&mut r)? != 0;
    let periodic_y = read_u8(&mut r)? != 0;
    let n_sites = read_u32(&mut r)? as usize;
    let mut sites = Vec::with_capacity(n_sites);
    for _ in 0..n_sites {
        let x = read_u32(&mut r)? as usize;
        let y = read_u32(&mut r)? as usize;
        sites.push((x, y));
    }
    let n_bonds = read_u32(&mut r)? as usize;
    let mut bonds = Vec::with_capacity(n_bonds);
    for _ in 0..n_bonds {
        let a = read_u32(&mut r)? as usize;
        let b = read_u32(&mut r)? as usize;
        let multiplicity = read_u32(&mut r)? as usize;
        bonds.push(Bond { a, b, multiplicity });
    }
    let geometry = Geometry {
        width,
        height,
        periodic_x,
        periodic_y,
        sites,
        bonds,
    };

    let provenance = match read_u8(&mut r)? {
        0 => {
            let _ = read_u64(&mut r)?;
            Provenance::Leaf
        }
        1 => Provenance::Merged {
            m: read_u64(&mut r)? as usize,
        },
        other => {
            return Err(CornerError::Checkpoint(format!(
                "unknown provenance tag {other}"
            )))
        }
    };
    let mode = match read_u8(&mut r)? {
        0 => OperatorMode::Exact,
        1 => OperatorMode::Fast,
        other => {
            return Err(CornerError::Checkpoint(format!(
                "unknown operator mode {other}"
            )))
        }
    };
    let dim = read_u64(&mut r)? as usize;

    let rho_mat = read_array(&mut r)?;
    let vals = read_array(&mut r)?;
    let vectors = read_array(&mut r)?;
    let eig = EigenDecomposition {
        values: vals.data().iter().map(|z| z.re).collect(),
        vectors,
    };

    // operators below a quarter filling go back to CSR
    let reload = |d: ComplexDense| -> Operator {
        let s = ComplexSparse::from_dense(&d);
        if s.density() <= 0.25 {
            Operator::Sparse(s)
        } else {
            Operator::Dense(d)
        }
    };
    let mut site_ops = Vec::with_capacity(geometry.n_sites());
    for _ in 0..geometry.n_sites() {
        let b = reload(read_array(&mut r)?);
        let n = reload(read_array(&mut r)?);
        let n2 = reload(read_array(&mut r)?);
        site_ops.push(SiteOps { b, n, n2 });
    }
    let mut bond_ops = Vec::with_capacity(geometry.bonds.len());
    for _ in 0..geometry.bonds.len() {
        let flags = read_u8(&mut r)?;
        let hop = if flags & 1 != 0 {
            Some(reload(read_array(&mut r)?))
        } else {
            None
        };
        let dens = if flags & 2 != 0 {
            Some(reload(read_array(&mut r)?))
        } else {
            None
        };
        bond_ops.push(BondOps { hop, dens });
    }

    let ops = OperatorSet {
        dim,
        sites: site_ops,
        bonds: bond_ops,
        mode,
    };
    let rho = DensityMatrix::new(rho_mat, basis.clone());
    rho.validate(1e-6)
        .map_err(|e| CornerError::Checkpoint(format!("stored state invalid: {e}")))?;
    Ok(Cluster {
        geometry,
        dim,
        ops,
        rho,
        eig,
        provenance,
        embedding: None,
        basis,
        warnings: Vec::new(),
    })
}
