//! Output files: binary PGM images and heatmaps, CSV tables and JSON reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::DriftMatrix;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e)),
        None => Ok(()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// `[-1, 1]` to `0..=255`, clamping out-of-range values.
pub fn pixel_byte(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PGM (`P5`, maxval 255) of a `width x height` grey image.
pub fn pgm_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() != width * height {
        return Err(Error::shape(
            "pgm",
            format!("{} bytes for {width}x{height}", bytes.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Writes one PGM per image of a `[b, c, h, w]` batch as `<prefix>_NNN.pgm`.
/// Multi-channel images are averaged over channels.
pub fn write_images(dir: &Path, prefix: &str, images: &Tensor) -> Result<Vec<PathBuf>> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::shape(
            "write_images",
            format!("expected [b, c, h, w], got {:?}", images.shape()),
        ));
    };
    let mut paths = Vec::with_capacity(b);
    for (i, item) in images.data().chunks(c * h * w).enumerate() {
        let pixels: Vec<u8> = (0..h * w)
            .map(|p| pixel_byte((0..c).map(|ch| item[ch * h * w + p]).sum::<f32>() / c as f32))
            .collect();
        let path = dir.join(format!("{prefix}_{i:03}.pgm"));
        write_bytes(&path, &pgm_bytes(w, h, &pixels)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads the pixels of a binary PGM written by [`pgm_bytes`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |m: &str| Error::Format {
        kind: "pgm",
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimensions"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
    if data.len() != w * h {
        return Err(bad("payload size does not match dimensions"));
    }
    Ok((w, h, data))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Header row of timesteps; one row per block, led by the block index.
pub fn write_drift_csv(path: &Path, m: &DriftMatrix) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["block".to_string()];
    header.extend(m.timesteps.iter().map(|t| t.to_string()));
    w.write_record(&header)?;
    for (b, row) in m.values.iter().enumerate() {
        let mut rec = vec![b.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Grey heatmap of a drift matrix (blocks down, steps across), values x 255.
pub fn write_heatmap(path: &Path, m: &DriftMatrix) -> Result<()> {
    let pixels: Vec<u8> = m
        .values
        .iter()
        .flatten()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_bytes(path, &pgm_bytes(m.n_steps(), m.n_blocks(), &pixels)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_endpoints() {
        assert_eq!(pixel_byte(-1.0), 0);
        assert_eq!(pixel_byte(1.0), 255);
        assert_eq!(pixel_byte(0.0), 128);
        assert_eq!(pixel_byte(7.0), 255);
        assert_eq!(pixel_byte(f32::NAN), 0);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(
            &[2, 1, 2, 3],
            vec![-1.0, 0.0, 1.0, 0.5, -0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let paths = write_images(dir.path(), "s", &img).unwrap();
        assert_eq!(paths.len(), 2);
        let raw = fs::read(&paths[0]).unwrap();
        assert!(raw.starts_with(b"P5\n"));
        let (w, h, px) = read_pgm(&paths[0]).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 191, 64, 255]);
    }

    #[test]
    fn drift_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = DriftMatrix {
            values: vec![vec![0.0, 0.5], vec![0.0, 1.0]],
            timesteps: vec![1000.0, 500.0],
            norm: 2.0,
        };
        let p = dir.path().join("d.csv");
        write_drift_csv(&p, &m).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "block,1000,500\n0,0,0.5\n1,0,1\n");
        let hp = dir.path().join("d.pgm");
        write_heatmap(&hp, &m).unwrap();
        assert_eq!(read_pgm(&hp).unwrap(), (2, 2, vec![0, 128, 0, 255]));
    }
}
