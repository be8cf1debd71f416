//! PNG encoding of interleaved RGB frames in `[0, 1]`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::CliError;

/// 8-bit RGB bytes of an interleaved frame. One channel is replicated to
/// grey; two channels fill red and green.
pub fn to_rgb(frame: &[f32], channels: usize) -> Vec<u8> {
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if channels == 3 {
        return frame.iter().map(|&v| byte(v)).collect();
    }
    let mut out = Vec::with_capacity(frame.len() / channels * 3);
    for px in frame.chunks(channels) {
        match px {
            [g] => out.extend([byte(*g); 3]),
            [r, g] => out.extend([byte(*r), byte(*g), 0]),
            _ => out.extend(px[..3].iter().map(|&v| byte(v))),
        }
    }
    out
}

pub fn encode_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CliError::Runtime(format!("png: {e}")))?;
        writer.write_image_data(rgb).map_err(|e| CliError::Runtime(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Returns `(rgb bytes, width, height)`.
pub fn decode_png(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize), CliError> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| CliError::Runtime(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::Runtime(format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize))
}

/// Place frames side by side.
pub fn strip(frames: &[Vec<u8>], width: usize, height: usize) -> Vec<u8> {
    let n = frames.len();
    let mut out = vec![0u8; n * width * height * 3];
    for (i, f) in frames.iter().enumerate() {
        for y in 0..height {
            let dst = (y * n * width + i * width) * 3;
            out[dst..dst + width * 3].copy_from_slice(&f[y * width * 3..(y + 1) * width * 3]);
        }
    }
    out
}

pub fn base64_png(rgb: &[u8], width: usize, height: usize) -> Result<String, CliError> {
    Ok(STANDARD.encode(encode_png(rgb, width, height)?))
}

pub fn decode_base64_png(text: &str) -> Result<(Vec<u8>, usize, usize), CliError> {
    let bytes = STANDARD.decode(text).map_err(|e| CliError::Runtime(format!("base64: {e}")))?;
    decode_png(&bytes)
}

/// Draw small crosses at keypoint positions (normalized coordinates).
pub fn mark_keypoints(rgb: &mut [u8], width: usize, height: usize, points: &[[f64; 2]]) {
    const COLORS: [[u8; 3]; 6] = [[255, 255, 255], [255, 200, 0], [0, 220, 255], [255, 0, 200], [120, 255, 120], [255, 120, 120]];
    for (k, p) in points.iter().enumerate() {
        let cx = ((p[0] + 1.0) * width as f64 / 2.0 - 0.5).round() as isize;
        let cy = ((p[1] + 1.0) * height as f64 / 2.0 - 0.5).round() as isize;
        for d in -2isize..=2 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    let i = (y as usize * width + x as usize) * 3;
                    rgb[i..i + 3].copy_from_slice(&COLORS[k % COLORS.len()]);
                }
            }
        }
    }
}
