//! Binary portable pixmap (P6) and graymap (P5) writers.

use crate::data::LabelMap;
use crate::error::{invalid, Result};

/// RGB colors for class ids 1..=16; id 0 (unlabeled) is black.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn class_color(id: u16) -> [u8; 3] {
    match id {
        0 => [0, 0, 0],
        c => PALETTE[(c as usize - 1) % PALETTE.len()],
    }
}

/// Class map as a P6 image.
pub fn class_map_ppm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6 {} {} 255\n", map.width, map.height).into_bytes();
    for &id in &map.labels {
        out.extend_from_slice(&class_color(id));
    }
    out
}

/// Gray image from 8-bit values, row-major.
pub fn graymap_pgm(height: usize, width: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return invalid(format!("{height}×{width} graymap needs {} values, got {}", height * width, values.len()));
    }
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

/// Spreads integer ids over the 0..=255 gray range (`0` stays black).
pub fn ids_to_gray(ids: &[usize], max_id: usize) -> Vec<u8> {
    ids.iter()
        .map(|&i| if max_id == 0 { 0 } else { (i * 255 / max_id) as u8 })
        .collect()
}
