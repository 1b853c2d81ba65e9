//! Artifact encoders: PNG heatmaps and masks, raw score maps.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use mdps_core::eval::EvalItem;
use mdps_core::{MaskImage, ScoreMap};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// File-name form of an image id: `test/crack/003` becomes `test__crack__003`.
pub fn file_stem(image_id: &str) -> String {
    image_id.replace(['/', '\\'], "__")
}

fn encode_png(width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| CliError::artifact("<png>", e))?;
    writer.write_image_data(data).map_err(|e| CliError::artifact("<png>", e))?;
    writer.finish().map_err(|e| CliError::artifact("<png>", e))?;
    Ok(out)
}

/// 16-bit grayscale PNG of `map / scale`; a zero scale writes a black image.
pub fn heatmap_png(map: &ScoreMap, scale: f32) -> Result<Vec<u8>> {
    let data: Vec<u8> = map
        .data()
        .iter()
        .flat_map(|&v| {
            let q = if scale > 0.0 {
                ((v / scale).clamp(0.0, 1.0) * 65535.0).round() as u16
            } else {
                0
            };
            q.to_be_bytes()
        })
        .collect();
    encode_png(map.width(), map.height(), png::BitDepth::Sixteen, &data)
}

/// 1-bit grayscale PNG, white where the mask is set.
pub fn mask_png(mask: &MaskImage) -> Result<Vec<u8>> {
    let row_bytes = mask.width().div_ceil(8);
    let mut data = vec![0u8; row_bytes * mask.height()];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                data[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode_png(mask.width(), mask.height(), png::BitDepth::One, &data)
}

/// Decodes a grayscale PNG written by this module into per-pixel values.
pub fn decode_gray_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| CliError::artifact("<png>", e))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::artifact("<png>", e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let values = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        png::BitDepth::One => (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| u16::from(buf[y * info.line_size + x / 8] & (0x80 >> (x % 8)) != 0))
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&v| v as u16).collect(),
        other => return Err(CliError::artifact("<png>", format!("unsupported bit depth {other:?}"))),
    };
    Ok((h, w, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ItemMeta {
    image_id: String,
    anomalous: bool,
    image_score: f64,
}

/// A scored test image as stored in `score_maps.safetensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredItem {
    pub image_id: String,
    pub item: EvalItem,
}

pub fn write_score_maps(path: &Path, items: &[StoredItem]) -> Result<()> {
    let raw: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let shape = vec![s.item.score_map.height(), s.item.score_map.width()];
            let score = s.item.score_map.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            [
                (format!("{i:05}.score"), Dtype::F32, shape.clone(), score),
                (format!("{i:05}.gt"), Dtype::U8, shape, s.item.gt.data().to_vec()),
            ]
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| CliError::artifact(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: Vec<ItemMeta> = items
        .iter()
        .map(|s| ItemMeta {
            image_id: s.image_id.clone(),
            anomalous: s.item.anomalous,
            image_score: s.item.image_score,
        })
        .collect();
    let metadata = HashMap::from([("items".to_string(), serde_json::to_string(&meta)?)]);
    let buf = safetensors::serialize(views, Some(metadata)).map_err(|e| CliError::artifact(path, e))?;
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn read_score_maps(path: &Path) -> Result<Vec<StoredItem>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| CliError::artifact(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| CliError::artifact(path, e))?;
    let items = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("items"))
        .ok_or_else(|| CliError::artifact(path, "missing item metadata"))?;
    let meta: Vec<ItemMeta> = serde_json::from_str(items)?;
    meta.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let get = |suffix: &str| {
                st.tensor(&format!("{i:05}.{suffix}"))
                    .map_err(|e| CliError::artifact(path, e))
            };
            let score = get("score")?;
            let gt = get("gt")?;
            let [h, w] = score.shape() else {
                return Err(CliError::artifact(path, "score maps must be two-dimensional"));
            };
            let values = score
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(StoredItem {
                image_id: m.image_id,
                item: EvalItem {
                    score_map: ScoreMap::new(*h, *w, values)?,
                    image_score: m.image_score,
                    gt: MaskImage::new(*h, *w, gt.data().to_vec())?,
                    anomalous: m.anomalous,
                },
            })
        })
        .collect()
}
