use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::render::{box_downsample, render_hr};
use crate::data::scene::{Scene, SCENE_BYTES};
use crate::data::tokenizer::{CaptionTokens, Tokenizer, CONTEXT_LENGTH};
use crate::data::{HR_SIZE, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

const MAGIC: &[u8; 4] = b"UCLD";
const VERSION: u32 = 1;
const LR_LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;
const HR_LEN: usize = 3 * HR_SIZE * HR_SIZE;
const RECORD_BYTES: usize = 2 * CONTEXT_LENGTH + SCENE_BYTES + 4 * (LR_LEN + HR_LEN);

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// [3, 16, 16] in [-1, 1].
    pub image: Tensor<f32>,
    /// [3, 32, 32] in [-1, 1].
    pub image_hr: Tensor<f32>,
    pub caption: CaptionTokens,
    pub scene: Scene,
}

impl DatasetRecord {
    pub fn from_scene(scene: Scene) -> Self {
        let image_hr = render_hr(&scene);
        let image = box_downsample(&image_hr);
        let caption = Tokenizer.encode(&scene.caption()).expect("grammar stays within vocabulary");
        Self {
            image,
            image_hr,
            caption,
            scene,
        }
    }

    pub fn caption_text(&self) -> String {
        self.scene.caption()
    }
}

/// `n` records; record `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, seed: u64) -> Vec<DatasetRecord> {
    (0..n)
        .map(|i| DatasetRecord::from_scene(Scene::random(&mut rng::indexed(seed, "scene", i as u64))))
        .collect()
}

/// `n` records with pairwise distinct captions, skipping any caption in `exclude`.
pub fn generate_unique(n: usize, seed: u64, exclude: &HashSet<String>) -> Result<Vec<DatasetRecord>> {
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        if i > 1000 * (n as u64 + 10) {
            return Err(Error::invalid("generate_unique", format!("only {} distinct captions found", out.len())));
        }
        let scene = Scene::random(&mut rng::indexed(seed, "unique", i));
        i += 1;
        if seen.insert(scene.caption()) {
            out.push(DatasetRecord::from_scene(scene));
        }
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(12 + RECORD_BYTES * records.len().min(1024));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        for &id in &r.caption.ids {
            buf.extend_from_slice(&(id as u16).to_le_bytes());
        }
        buf.extend_from_slice(&r.scene.encode());
        for v in r.image.data().iter().chain(r.image_hr.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if buf.len() > 1 << 20 {
            w.write_all(&buf).map_err(|e| Error::io(path, e))?;
            buf.clear();
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a dataset file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != count * RECORD_BYTES {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {count} records, found {}", count * RECORD_BYTES, body.len()),
        ));
    }
    body.chunks_exact(RECORD_BYTES)
        .map(|rec| {
            let ids = rec[..2 * CONTEXT_LENGTH]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
                .collect();
            let mut off = 2 * CONTEXT_LENGTH;
            let scene = Scene::decode(&rec[off..off + SCENE_BYTES]).map_err(|e| Error::format(path, e.to_string()))?;
            off += SCENE_BYTES;
            let image = Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], f32s(&rec[off..off + 4 * LR_LEN]))?;
            off += 4 * LR_LEN;
            let image_hr = Tensor::new(&[3, HR_SIZE, HR_SIZE], f32s(&rec[off..]))?;
            Ok(DatasetRecord {
                image,
                image_hr,
                caption: CaptionTokens { ids },
                scene,
            })
        })
        .collect()
}
