//! Output files: PNG sample grids, `.npy` tensor dumps, CSV loss histories
//! and JSON reports.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use capsgan_core::gan::StepRecord;
use capsgan_core::Tensor;
use serde::Serialize;

use crate::error::CliError;

/// Columns and rows of the grid for `n` cells: the smallest square that
/// fits, trimmed to the rows actually used.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let mut cols = 1;
    while cols * cols < n {
        cols += 1;
    }
    (cols, n.div_ceil(cols))
}

/// `[-1, 1]` → `0..=255`, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Lays `[N, C, H, W]` samples out row-major with no spacing; unused cells
/// stay black. Returns `(width, height, channels, bytes)`.
pub fn grid_bytes(samples: &Tensor) -> (usize, usize, usize, Vec<u8>) {
    let s = samples.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (cols, rows) = grid_dims(n);
    let (gw, gh) = (cols * w, rows * h);
    let mut out = vec![0u8; gw * gh * c];
    for k in 0..n {
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = samples.data()[((k * c + ch) * h + y) * w + x];
                    out[((r0 + y) * gw + c0 + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    (gw, gh, c, out)
}

pub fn write_png_grid(samples: &Tensor, path: &Path) -> Result<(), CliError> {
    let (w, h, c, bytes) = grid_bytes(samples);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(CliError::Validation(format!(
                "cannot draw {c}-channel images"
            )))
        }
    };
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    let mut writer = enc.write_header().map_err(|e| CliError::io(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| CliError::io(path, e))?;
    writer.finish().map_err(|e| CliError::io(path, e))
}

/// NumPy `.npy` v1.0, little-endian f64, C order.
pub fn npy_bytes(t: &Tensor) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // magic + version + length field + header + newline, padded to 64
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * t.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Serialize)]
struct HistoryRow {
    step: u64,
    d_loss: f64,
    g_loss: f64,
}

/// `step` counts completed iterations, so the first row is step 1.
pub fn write_history(records: &[StepRecord], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for r in records {
        w.serialize(HistoryRow {
            step: r.step + 1,
            d_loss: r.d_loss,
            g_loss: r.g_loss,
        })
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(&text, path)
}

pub fn write_text(text: &str, path: &Path) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
