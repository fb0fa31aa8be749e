//! File formats: checkpoints, pseudo-ground-truth records, ascii PLY with
//! canonical-coordinate side channels, and JSON sidecars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::Module;
use crate::synth::{Corruption, Sample, ShapeSpec};
use crate::uncertainty::AnisoGaussian;
use crate::voxel::{LabelGrid, VoxelGrid};
use crate::{RigidTransform, Rotation, Vec3};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIPSNET1";
pub const PSEUDO_GT_MAGIC_V1: &[u8; 7] = b"PIPSGT1";
pub const PSEUDO_GT_MAGIC_V2: &[u8; 7] = b"PIPSGT2";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic in {path}: expected {expect}")]
    BadMagic { path: String, expect: String },
    #[error("checkpoint tensor {name} has shape {got:?}, model expects {expect:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expect: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint holds unknown tensor {0}")]
    UnknownTensor(String),
    #[error("malformed {what} at {path}: {detail}")]
    Malformed {
        what: &'static str,
        path: String,
        detail: String,
    },
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Serializes every named parameter of the module.
pub fn save_checkpoint(path: &Path, module: &mut dyn Module) -> Result<(), IoError> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    module.visit_params("", &mut |name, p| {
        tensors.push((name.to_string(), p.dims.clone(), p.value.clone()));
    });
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, dims, values) in tensors {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, dims.len() as u32)?;
        for d in dims {
            write_u64(&mut w, d as u64)?;
        }
        for v in values {
            write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads parameters by name into an already constructed module. Every
/// tensor must match in name and shape, in both directions.
pub fn load_checkpoint(path: &Path, module: &mut dyn Module) -> Result<(), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expect: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    let n = read_u32(&mut r)? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8_lossy(&name_buf).into_owned();
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(read_f64(&mut r)?);
        }
        tensors.insert(name, (dims, values));
    }
    let mut result = Ok(());
    let mut used = 0usize;
    module.visit_params("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        match tensors.get(name) {
            None => result = Err(IoError::MissingTensor(name.to_string())),
            Some((dims, values)) => {
                if *dims != p.dims {
                    result = Err(IoError::ShapeMismatch {
                        name: name.to_string(),
                        got: dims.clone(),
                        expect: p.dims.clone(),
                    });
                } else {
                    p.value.copy_from_slice(values);
                    used += 1;
                }
            }
        }
    });
    result?;
    if used != tensors.len() {
        let mut model_names = Vec::new();
        module.visit_params("", &mut |n, _| model_names.push(n.to_string()));
        for name in tensors.keys() {
            if !model_names.iter().any(|m| m == name) {
                return Err(IoError::UnknownTensor(name.clone()));
            }
        }
    }
    Ok(())
}

/// Pseudo-ground-truth for one cloud: voxel labels plus the teacher's
/// per-voxel uncertainty for the positive voxels.
#[derive(Debug, Clone)]
pub struct PseudoGtRecord {
    pub id: String,
    pub grid: LabelGrid,
    pub gaussians: Vec<(usize, AnisoGaussian)>,
}

pub fn save_pseudo_gt(path: &Path, rec: &PseudoGtRecord) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PSEUDO_GT_MAGIC_V2)?;
    write_u32(&mut w, rec.id.len() as u32)?;
    w.write_all(rec.id.as_bytes())?;
    write_u32(&mut w, rec.grid.h as u32)?;
    for i in 0..3 {
        write_f64(&mut w, rec.grid.origin[i])?;
    }
    write_f64(&mut w, rec.grid.side)?;
    for &v in &rec.grid.values {
        w.write_all(&[v as u8])?;
    }
    write_u32(&mut w, rec.gaussians.len() as u32)?;
    for (idx, g) in &rec.gaussians {
        write_u32(&mut w, *idx as u32)?;
        for i in 0..3 {
            write_f64(&mut w, g.mean[i])?;
        }
        let q = g.rot.as_quaternion_wxyz();
        for v in q {
            write_f64(&mut w, v)?;
        }
        for i in 0..3 {
            write_f64(&mut w, g.scales[i])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_pseudo_gt(path: &Path) -> Result<PseudoGtRecord, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    let v2 = &magic == PSEUDO_GT_MAGIC_V2;
    if !v2 && &magic != PSEUDO_GT_MAGIC_V1 {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expect: String::from_utf8_lossy(PSEUDO_GT_MAGIC_V2).into_owned(),
        });
    }
    let id_len = read_u32(&mut r)? as usize;
    let mut id_buf = vec![0u8; id_len];
    r.read_exact(&mut id_buf)?;
    let id = String::from_utf8_lossy(&id_buf).into_owned();
    let h = read_u32(&mut r)? as usize;
    let origin = Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
    let side = read_f64(&mut r)?;
    let mut values = Vec::with_capacity(h * h * h);
    for _ in 0..h * h * h {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        values.push(b[0] != 0);
    }
    let grid = VoxelGrid {
        h,
        origin,
        side,
        values,
    };
    let mut gaussians = Vec::new();
    if v2 {
        let n = read_u32(&mut r)? as usize;
        for _ in 0..n {
            let idx = read_u32(&mut r)? as usize;
            let mean = Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
            let (w, x, y, z) = (
                read_f64(&mut r)?,
                read_f64(&mut r)?,
                read_f64(&mut r)?,
                read_f64(&mut r)?,
            );
            let scales = Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
            gaussians.push((
                idx,
                AnisoGaussian {
                    mean,
                    rot: Rotation::from_wxyz(w, x, y, z),
                    scales,
                },
            ));
        }
    }
    Ok(PseudoGtRecord { id, grid, gaussians })
}

/// Ascii PLY with positions and, when present, canonical coordinates in
/// the nx/ny/nz slots (documented convention: nx carries cx).
pub fn save_ply(path: &Path, points: &[Vec3], canonical: Option<&[Vec3]>) -> Result<(), IoError> {
    if let Some(c) = canonical {
        assert_eq!(c.len(), points.len());
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    if canonical.is_some() {
        writeln!(w, "property float nx")?;
        writeln!(w, "property float ny")?;
        writeln!(w, "property float nz")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        if let Some(c) = canonical {
            writeln!(
                w,
                "{} {} {} {} {} {}",
                p.x, p.y, p.z, c[i].x, c[i].y, c[i].z
            )?;
        } else {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<(Vec<Vec3>, Option<Vec<Vec3>>), IoError> {
    let malformed = |detail: &str| IoError::Malformed {
        what: "ply",
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let mut n_vertices = None;
    let mut props: Vec<String> = Vec::new();
    match lines.next() {
        Some(Ok(l)) if l.trim() == "ply" => {}
        _ => return Err(malformed("missing ply header")),
    }
    for line in lines.by_ref() {
        let line = line?;
        let t = line.trim();
        if t == "end_header" {
            break;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse::<usize>().map_err(|e| malformed(&e.to_string()))?)
            }
            ["property", _ty, name] => props.push(name.to_string()),
            _ => {}
        }
    }
    let n = n_vertices.ok_or_else(|| malformed("missing vertex element"))?;
    let has_canonical = props.iter().any(|p| p == "nx");
    let mut points = Vec::with_capacity(n);
    let mut canonical = if has_canonical {
        Some(Vec::with_capacity(n))
    } else {
        None
    };
    for _ in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| malformed("truncated vertex list"))??;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(&e.to_string()))?;
        if vals.len() < 3 {
            return Err(malformed("vertex row too short"));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        if let Some(c) = canonical.as_mut() {
            if vals.len() < 6 {
                return Err(malformed("vertex row missing canonical columns"));
            }
            c.push(Vec3::new(vals[3], vals[4], vals[5]));
        }
    }
    Ok((points, canonical))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SampleSidecar {
    spec: ShapeSpec,
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
    scale: f64,
    view_dir: [f64; 3],
    corruption: Corruption,
}

/// A sample persists as a PLY (observed points + canonical coordinates in
/// the nx/ny/nz columns) and a JSON sidecar with pose and corruption.
pub fn save_sample(ply_path: &Path, sample: &Sample) -> Result<(), IoError> {
    save_ply(ply_path, &sample.observed, Some(&sample.gt_canonical))?;
    let sidecar = SampleSidecar {
        spec: sample.spec.clone(),
        rotation_wxyz: sample.gt_pose.rotation.as_quaternion_wxyz(),
        translation: sample.gt_pose.translation.into(),
        scale: sample.gt_pose.scale,
        view_dir: sample.view_dir.into(),
        corruption: sample.corruption,
    };
    let json_path = ply_path.with_extension("json");
    let f = File::create(json_path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &sidecar).map_err(std::io::Error::from)?;
    Ok(())
}

pub fn load_sample(ply_path: &Path) -> Result<Sample, IoError> {
    let (observed, canonical) = load_ply(ply_path)?;
    let canonical = canonical.ok_or_else(|| IoError::Malformed {
        what: "sample",
        path: ply_path.display().to_string(),
        detail: "missing canonical coordinate columns".to_string(),
    })?;
    let json_path = ply_path.with_extension("json");
    let f = File::open(&json_path)?;
    let sidecar: SampleSidecar =
        serde_json::from_reader(BufReader::new(f)).map_err(std::io::Error::from)?;
    let [w, x, y, z] = sidecar.rotation_wxyz;
    Ok(Sample {
        spec: sidecar.spec,
        observed,
        gt_pose: RigidTransform {
            rotation: Rotation::from_wxyz(w, x, y, z),
            translation: Vec3::from(sidecar.translation),
            scale: sidecar.scale,
        },
        gt_canonical: canonical,
        view_dir: Vec3::from(sidecar.view_dir),
        corruption: sidecar.corruption,
    })
}
