//! Binary PPM (P6) grayscale heatmaps: brighter pixels mean higher density.

use std::io::Write;
use std::path::Path;

/// Writes `values` (row-major, height x width) as a P6 grayscale image after
/// scaling by the maximum value.
pub fn write_grayscale(
    path: impl AsRef<Path>,
    values: &[f64],
    width: usize,
    height: usize,
) -> std::io::Result<()> {
    assert_eq!(values.len(), width * height);
    let max = values.iter().cloned().fold(f64::MIN, f64::max).max(1e-300);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{width} {height}\n255\n")?;
    let mut row = Vec::with_capacity(width * 3);
    for i in 0..height {
        row.clear();
        for j in 0..width {
            let v = (values[i * width + j] / max).clamp(0.0, 1.0);
            let byte = (v * 255.0).round() as u8;
            row.extend_from_slice(&[byte, byte, byte]);
        }
        file.write_all(&row)?;
    }
    Ok(())
}
