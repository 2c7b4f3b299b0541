//! PNG output: heatmap overlays and unit contact sheets.

use super::colormap::JET;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f32 = 0.5;

fn plane(t: &Tensor<f32>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::invalid(format!(
            "{what} must be H×W or 1×H×W, got {:?}",
            t.shape()
        ))),
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max normalization to `[0, 1]`; a constant map becomes 0.5 everywhere.
pub fn normalize(map: &[f32]) -> Vec<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.5; map.len()];
    }
    map.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Colormap entry for a normalized value.
pub fn jet(v: f32) -> [u8; 3] {
    JET[(v.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// RGB pixels of `map` blended over the grayscale `image` with weight `alpha`.
pub fn overlay_rgb(image: &Tensor<f32>, map: &Tensor<f32>, alpha: f32) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = plane(image, "overlay image")?;
    let (mh, mw) = plane(map, "overlay map")?;
    if (h, w) != (mh, mw) {
        return Err(Error::shape("render_overlay", &[h, w], &[mh, mw]));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let norm = normalize(map.data());
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (&g, &n) in image.data().iter().zip(&norm) {
        let g = to_byte(g) as f32;
        for c in jet(n) {
            rgb.push(((1.0 - alpha) * g + alpha * c as f32).round() as u8);
        }
    }
    Ok((w, h, rgb))
}

pub fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(pixels)?;
        writer.finish()?;
    }
    Ok(out)
}

/// PNG bytes of the overlay; identical inputs give identical bytes.
pub fn render_overlay(image: &Tensor<f32>, map: &Tensor<f32>, alpha: f32) -> Result<Vec<u8>> {
    let (w, h, rgb) = overlay_rgb(image, map, alpha)?;
    encode_png(w, h, png::ColorType::Rgb, &rgb)
}

/// Grayscale grid with one row per entry of `rows`; each cell is as large as
/// the largest crop, crops are top-left aligned on black with a 1 px gap.
pub fn contact_sheet(rows: &[Vec<&Tensor<f32>>]) -> Result<Vec<u8>> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::invalid("contact sheet has no crops"));
    }
    let mut cell = (1, 1);
    for t in rows.iter().flatten() {
        let (h, w) = plane(t, "crop")?;
        cell = (cell.0.max(h), cell.1.max(w));
    }
    let width = cols * (cell.1 + 1) + 1;
    let height = rows.len() * (cell.0 + 1) + 1;
    let mut px = vec![0u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let (h, w) = plane(t, "crop")?;
            let (oy, ox) = (1 + r * (cell.0 + 1), 1 + c * (cell.1 + 1));
            for y in 0..h {
                for x in 0..w {
                    px[(oy + y) * width + ox + x] = to_byte(t.data()[y * w + x]);
                }
            }
        }
    }
    encode_png(width, height, png::ColorType::Grayscale, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info, buf)
    }

    fn image() -> Tensor<f32> {
        Tensor::from_fn(&[1, 6, 5], |i| i as f32 / 29.0)
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(jet(0.0), JET[0]);
        assert_eq!(jet(1.0), JET[255]);
        assert_eq!(jet(0.5), JET[128]);
    }

    #[test]
    fn constant_map_tints_uniformly() {
        let map = Tensor::full(&[6, 5], 3.0);
        let (_, _, rgb) = overlay_rgb(&image(), &map, 1.0).unwrap();
        assert!(rgb.chunks(3).all(|p| p == JET[128]));
    }

    #[test]
    fn zero_alpha_leaves_image() {
        let img = image();
        let map = Tensor::from_fn(&[6, 5], |i| (i * 7 % 5) as f32);
        let bytes = render_overlay(&img, &map, 0.0).unwrap();
        let (info, buf) = decode(&bytes);
        assert_eq!((info.width, info.height), (5, 6));
        for (p, &g) in buf.chunks(3).zip(img.data()) {
            assert_eq!(p, [to_byte(g); 3]);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let map = Tensor::from_fn(&[6, 5], |i| (i as f32).cos());
        assert_eq!(
            render_overlay(&image(), &map, 0.5).unwrap(),
            render_overlay(&image(), &map, 0.5).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(render_overlay(&image(), &Tensor::zeros(&[5, 6]), 0.5).is_err());
        assert!(render_overlay(&image(), &Tensor::zeros(&[6, 5]), 1.5).is_err());
    }

    #[test]
    fn contact_sheet_layout() {
        let a = Tensor::full(&[1, 2, 3], 1.0);
        let b = Tensor::full(&[1, 4, 2], 1.0);
        let bytes = contact_sheet(&[vec![&a, &b], vec![&b]]).unwrap();
        let (info, buf) = decode(&bytes);
        assert_eq!((info.width, info.height), (2 * 4 + 1, 2 * 5 + 1));
        assert_eq!(buf.iter().filter(|&&v| v == 255).count(), 6 + 8 + 8);
        assert!(contact_sheet(&[]).is_err());
    }
}
