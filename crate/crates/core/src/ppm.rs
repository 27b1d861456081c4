//! Image file I/O (binary PPM always, PNG via the `image` crate) and the
//! small rendering helpers used for overlays and analysis artifacts.

use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::Image;
use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes an RGB image as binary PPM (P6, maxval 255).
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::invalid("ppm", "P6 requires 3 channels"));
    }
    let mut out = Vec::with_capacity(32 + image.width * image.height * 3);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.extend(image.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

/// Parses binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cursor = 0usize;
    let mut token = || -> Result<String> {
        // Skip whitespace and '#' comments between header tokens.
        while cursor < bytes.len() {
            let b = bytes[cursor];
            if b.is_ascii_whitespace() {
                cursor += 1;
            } else if b == b'#' {
                while cursor < bytes.len() && bytes[cursor] != b'\n' {
                    cursor += 1;
                }
            } else {
                break;
            }
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::invalid("ppm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..cursor]).into_owned())
    };

    if token()? != "P6" {
        return Err(Error::invalid("ppm", "not a binary PPM (P6) file"));
    }
    let width: usize = token()?.parse().map_err(|_| Error::invalid("ppm", "bad width"))?;
    let height: usize = token()?.parse().map_err(|_| Error::invalid("ppm", "bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::invalid("ppm", "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::invalid("ppm", format!("unsupported maxval {maxval}")));
    }
    let data_start = cursor + 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < data_start + need {
        return Err(Error::invalid("ppm", "truncated pixel data"));
    }
    let data = bytes[data_start..data_start + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Image {
        height,
        width,
        channels: 3,
        data,
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

/// Loads PPM or PNG by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| Error::invalid("png", e.to_string()))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(Image {
                height: h,
                width: w,
                channels: 3,
                data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
            })
        }
        other => Err(Error::invalid(
            "read_image",
            format!("unsupported extension {other:?} (expected ppm or png)"),
        )),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, img),
        Some("png") => {
            let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
            image::save_buffer(
                path,
                &bytes,
                img.width as u32,
                img.height as u32,
                image::ColorType::Rgb8,
            )
            .map_err(|e| Error::invalid("png", e.to_string()))
        }
        other => Err(Error::invalid(
            "write_image",
            format!("unsupported extension {other:?} (expected ppm or png)"),
        )),
    }
}

/// Draws a one-pixel box outline; coordinates are normalized center form.
pub fn draw_box_outline(image: &mut Image, bbox: &crate::boxes::BoxCxcywh, color: &[f64; 3]) {
    let (h, w) = (image.height as f64, image.width as f64);
    let c = bbox.corners();
    let x0 = (c.x1 * w).round().clamp(0.0, w - 1.0) as usize;
    let y0 = (c.y1 * h).round().clamp(0.0, h - 1.0) as usize;
    let x1 = (c.x2 * w).round().clamp(0.0, w - 1.0) as usize;
    let y1 = (c.y2 * h).round().clamp(0.0, h - 1.0) as usize;
    for x in x0..=x1 {
        image.set_pixel(y0, x, color);
        image.set_pixel(y1, x, color);
    }
    for y in y0..=y1 {
        image.set_pixel(y, x0, color);
        image.set_pixel(y, x1, color);
    }
}

/// Renders a `[0, 1]` grid as a grayscale image scaled up by `zoom`.
pub fn grayscale_map(values: &[f64], rows: usize, cols: usize, zoom: usize) -> Image {
    let mut out = Image::new(rows * zoom, cols * zoom, 3);
    for r in 0..rows {
        for c in 0..cols {
            let v = values[r * cols + c].clamp(0.0, 1.0);
            let px = [v, v, v];
            for dy in 0..zoom {
                for dx in 0..zoom {
                    out.set_pixel(r * zoom + dy, c * zoom + dx, &px);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ppm_round_trip_is_exact_in_bytes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut img = Image::new(5, 7, 3);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        let bytes2 = encode_ppm(&back).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!((back.height, back.width), (5, 7));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_ppm(b"P5\n1 1\n255\n.").is_err());
        assert!(decode_ppm(b"P6\n4 4\n255\nxx").is_err());
    }

    #[test]
    fn box_outline_touches_expected_pixels() {
        let mut img = Image::new(16, 16, 3);
        let b = crate::boxes::BoxCxcywh::new(0.5, 0.5, 0.5, 0.5);
        draw_box_outline(&mut img, &b, &[1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(4, 8)[0], 1.0); // top edge
        assert_eq!(img.pixel(12, 8)[0], 1.0); // bottom edge
        assert_eq!(img.pixel(8, 4)[0], 1.0); // left edge
        assert_eq!(img.pixel(8, 12)[0], 1.0); // right edge
        assert_eq!(img.pixel(8, 8)[0], 0.0); // interior untouched
    }
}
