//! Dataset directory format.
//!
//! A sequence is a directory with `manifest.json` and five assets per frame:
//! an 8-bit binary PGM intensity image, three float maps (`depth`, `depth_conf`,
//! `seg_conf`) and a raw 8-bit label map. Float maps start with a 10-byte header,
//! the magic `RTMAP\0` followed by little-endian `u16` width and `u16` height, then
//! `width * height` little-endian `f32` values in row-major order. Label maps are
//! exactly `width * height` bytes (0 background, 1 patient, 2 drill).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Frame, Grid, ObjectLabel, ObjectPoses, Sequence};
use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::liegroup::RigidMotion;

pub const FORMAT_VERSION: u32 = 1;
const MAP_MAGIC: &[u8; 6] = b"RTMAP\0";
const MAP_HEADER_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub index: usize,
    pub image: String,
    pub depth: String,
    pub depth_conf: String,
    pub seg: String,
    pub seg_conf: String,
    pub pose_patient: Option<RigidMotion>,
    pub pose_drill: Option<RigidMotion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub intrinsics: Intrinsics,
    pub frames: Vec<ManifestFrame>,
}

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingAsset(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| Error::ManifestParse {
                path: path.to_path_buf(),
                source,
            })?;
        manifest.intrinsics.validate()?;
        Ok(manifest)
    }
}

/// Accepts either the sequence directory or the manifest file itself.
fn manifest_location(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join("manifest.json"), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<Sequence> {
    let (manifest_path, dir) = manifest_location(path.as_ref());
    let manifest = Manifest::read(&manifest_path)?;
    let k = manifest.intrinsics;
    let mut entries = manifest.frames.clone();
    entries.sort_by_key(|f| f.index);

    let mut frames = Vec::with_capacity(entries.len());
    let mut poses = Vec::with_capacity(entries.len());
    for entry in &entries {
        let gray = read_pgm(&dir.join(&entry.image), &k)?;
        let depth = read_map(&dir.join(&entry.depth), &k)?;
        let depth_conf = read_map(&dir.join(&entry.depth_conf), &k)?;
        let seg = read_labels(&dir.join(&entry.seg), &k)?;
        let seg_conf = read_map(&dir.join(&entry.seg_conf), &k)?;
        frames.push(Frame::new(
            gray, depth, depth_conf, seg, seg_conf, k, entry.index,
        )?);
        poses.push(ObjectPoses {
            patient: entry.pose_patient,
            drill: entry.pose_drill,
        });
    }
    Ok(Sequence {
        intrinsics: k,
        frames,
        poses,
    })
}

/// Writes `sequence` into `dir` (created if needed) and returns the manifest.
pub fn save_sequence(dir: impl AsRef<Path>, sequence: &Sequence) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sequence.frames.len());
    for (n, frame) in sequence.frames.iter().enumerate() {
        let stem = format!("frame_{:05}", frame.timestamp_index);
        let entry = ManifestFrame {
            index: frame.timestamp_index,
            image: format!("{stem}_image.pgm"),
            depth: format!("{stem}_depth.rtmap"),
            depth_conf: format!("{stem}_depth_conf.rtmap"),
            seg: format!("{stem}_seg.raw"),
            seg_conf: format!("{stem}_seg_conf.rtmap"),
            pose_patient: sequence.poses.get(n).and_then(|p| p.patient),
            pose_drill: sequence.poses.get(n).and_then(|p| p.drill),
        };
        write_pgm(&dir.join(&entry.image), &frame.gray)?;
        write_map(&dir.join(&entry.depth), &frame.depth)?;
        write_map(&dir.join(&entry.depth_conf), &frame.depth_conf)?;
        write_labels(&dir.join(&entry.seg), &frame.seg)?;
        write_map(&dir.join(&entry.seg_conf), &frame.seg_conf)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        intrinsics: sequence.intrinsics,
        frames: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_asset(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingAsset(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedAsset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn check_dims(path: &Path, k: &Intrinsics, width: usize, height: usize) -> Result<()> {
    if width != k.width || height != k.height {
        return Err(Error::DimensionMismatch {
            what: path.display().to_string(),
            expected_width: k.width,
            expected_height: k.height,
            width,
            height,
        });
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_map(path: &Path, map: &Grid<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(MAP_HEADER_LEN + 4 * map.data().len());
    bytes.extend_from_slice(MAP_MAGIC);
    bytes.extend_from_slice(&(map.width() as u16).to_le_bytes());
    bytes.extend_from_slice(&(map.height() as u16).to_le_bytes());
    for v in map.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub(crate) fn read_map(path: &Path, k: &Intrinsics) -> Result<Grid<f32>> {
    let bytes = read_asset(path)?;
    if bytes.len() < MAP_HEADER_LEN || &bytes[..6] != MAP_MAGIC {
        return Err(malformed(path, "missing RTMAP header"));
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let height = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    check_dims(path, k, width, height)?;
    let body = &bytes[MAP_HEADER_LEN..];
    if body.len() != 4 * width * height {
        return Err(malformed(
            path,
            format!("expected {} payload bytes, found {}", 4 * width * height, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Grid::from_vec(width, height, data)
}

pub(crate) fn write_labels(path: &Path, seg: &Grid<ObjectLabel>) -> Result<()> {
    let bytes: Vec<u8> = seg.data().iter().map(|&l| l as u8).collect();
    write_file(path, &bytes)
}

pub(crate) fn read_labels(path: &Path, k: &Intrinsics) -> Result<Grid<ObjectLabel>> {
    let bytes = read_asset(path)?;
    if bytes.len() != k.pixel_count() {
        return Err(Error::DimensionMismatch {
            what: path.display().to_string(),
            expected_width: k.width,
            expected_height: k.height,
            width: bytes.len(),
            height: 1,
        });
    }
    let data = bytes
        .iter()
        .map(|&b| ObjectLabel::from_u8(b).ok_or_else(|| malformed(path, format!("label {b}"))))
        .collect::<Result<Vec<_>>>()?;
    Grid::from_vec(k.width, k.height, data)
}

/// Intensities in `[0, 1]` are stored as `round(255 * value)`.
pub(crate) fn write_pgm(path: &Path, gray: &Grid<f32>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", gray.width(), gray.height()).into_bytes();
    bytes.extend(
        gray.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_file(path, &bytes)
}

pub(crate) fn read_pgm(path: &Path, k: &Intrinsics) -> Result<Grid<f32>> {
    let bytes = read_asset(path)?;
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos);
    if magic.as_deref() != Some("P5") {
        return Err(malformed(path, "not a binary PGM"));
    }
    let number = |pos: &mut usize| -> Result<usize> {
        next_token(pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(path, "bad PGM header"))
    };
    let width = number(&mut pos)?;
    let height = number(&mut pos)?;
    let maxval = number(&mut pos)?;
    if maxval != 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    check_dims(path, k, width, height)?;
    let body = &bytes[pos + 1..];
    if body.len() != width * height {
        return Err(malformed(path, "truncated PGM payload"));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Grid::from_vec(width, height, data)
}
