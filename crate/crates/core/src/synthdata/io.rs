//! On-disk dataset layout: a JSON-lines manifest plus one binary file per image.
//!
//! Image files start with the 8-byte magic `TABIMG1\n`, then `H`, `W`, `C` as
//! little-endian `u32`, then `H·W·C` little-endian `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::synthdata::{BBox, Change, ChangeKind, Color, Image, ObjectShape, ScenePair, SceneObject, Split};

pub const IMAGE_MAGIC: &[u8; 8] = b"TABIMG1\n";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub kind: ChangeKind,
    pub color: Color,
    pub shape: ObjectShape,
    /// `[row, col]` of the changed cell.
    pub cell: [usize; 2],
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u32,
    pub seed: u64,
    pub change: Option<ChangeRecord>,
    pub bbox: Option<BBox>,
    pub captions: Vec<String>,
    pub image_a: String,
    pub image_b: String,
    pub split: Split,
}

impl ManifestRecord {
    pub fn from_pair(pair: &ScenePair) -> Self {
        let change = pair.change.object().map(|o| ChangeRecord {
            kind: pair.change.kind(),
            color: o.color,
            shape: o.shape,
            cell: [o.row, o.col],
        });
        ManifestRecord {
            id: pair.id,
            seed: pair.seed,
            change,
            bbox: pair.bbox,
            captions: pair.captions.clone(),
            image_a: format!("{IMAGE_DIR}/{:06}_a.timg", pair.id),
            image_b: format!("{IMAGE_DIR}/{:06}_b.timg", pair.id),
            split: pair.split,
        }
    }

    pub fn change(&self) -> Change {
        match &self.change {
            None => Change::None,
            Some(c) => {
                let obj = SceneObject { row: c.cell[0], col: c.cell[1], shape: c.shape, color: c.color };
                match c.kind {
                    ChangeKind::Add => Change::Add(obj),
                    ChangeKind::Remove => Change::Remove(obj),
                    ChangeKind::None => Change::None,
                }
            }
        }
    }
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + img.data.len() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    for d in [img.height, img.width, img.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let fmt = |offset: usize, msg: &str| TabError::Format { offset: offset as u64, msg: msg.to_string() };
    if bytes.len() < IMAGE_MAGIC.len() || &bytes[..IMAGE_MAGIC.len()] != IMAGE_MAGIC {
        let at = bytes.iter().zip(IMAGE_MAGIC.iter()).take_while(|(a, b)| a == b).count();
        return Err(fmt(at, "bad image magic"));
    }
    let mut pos = IMAGE_MAGIC.len();
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let chunk = bytes.get(pos..pos + 4).ok_or_else(|| fmt(bytes.len(), "truncated image header"))?;
        *d = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
        pos += 4;
    }
    let [h, w, c] = dims;
    if h == 0 || w == 0 || c == 0 {
        return Err(fmt(IMAGE_MAGIC.len(), "zero image dimension"));
    }
    let count = h * w * c;
    let need = pos + count * 4;
    if bytes.len() < need {
        // offset of the first missing (or partially present) value
        let whole = (bytes.len() - pos) / 4;
        return Err(fmt(pos + whole * 4, "truncated image payload"));
    }
    if bytes.len() > need {
        return Err(fmt(need, "trailing bytes after image payload"));
    }
    let data = bytes[pos..need]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Image { height: h, width: w, channels: c, data })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_image(img))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&fs::read(path)?)
}

/// Writes `manifest.jsonl` and `images/` under `dir`.
pub fn write_dataset(pairs: &[ScenePair], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for pair in pairs {
        let rec = ManifestRecord::from_pair(pair);
        write_image(&dir.join(&rec.image_a), &pair.image_a)?;
        write_image(&dir.join(&rec.image_b), &pair.image_b)?;
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Parses the manifest alone.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| TabError::Format {
                offset: offset + e.column().saturating_sub(1) as u64,
                msg: format!("manifest line {}: {e}", out.len() + 1),
            })?;
            out.push(rec);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<ScenePair>> {
    read_manifest(dir)?
        .into_iter()
        .map(|rec| {
            let image_a = read_image(&dir.join(&rec.image_a))?;
            let image_b = read_image(&dir.join(&rec.image_b))?;
            Ok(ScenePair {
                id: rec.id,
                seed: rec.seed,
                split: rec.split,
                change: rec.change(),
                bbox: rec.bbox,
                captions: rec.captions,
                image_a,
                image_b,
            })
        })
        .collect()
}
