use std::fs;
use std::path::Path;

use super::{atomic_write, create_dir, csv_bytes};
use crate::error::{Error, Result};
use crate::eval::{Class, LabeledDataset};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

fn to_byte(v: f64) -> u8 {
    (v * 256.0).floor().clamp(0.0, 255.0) as u8
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Encodes an `H×W` grid as binary PGM. Byte `k` stands for the value `k/256`,
/// so images already on the 1/256 grid survive a round trip exactly.
fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

/// Writes one `[H, W, 1]` or `[1, H, W, 1]` image.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        [1, h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "write_pgm",
                detail: format!("expected one H×W×1 image, got {:?}", image.shape()),
            })
        }
    };
    if c != 1 {
        return Err(Error::InvalidShape {
            op: "write_pgm",
            detail: format!("PGM holds one channel, image has {c}"),
        });
    }
    atomic_write(path, &pgm_bytes(w, h, image.data()))
}

/// Reads a P5 file with maxval 255 as a `[H, W, 1]` tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut next_token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P5" {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        next_token()?
            .parse()
            .map_err(|_| format_err(path, format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[pos + 1..];
    if raster.len() != w * h {
        return Err(format_err(path, format!("expected {} pixels, found {}", w * h, raster.len())));
    }
    Tensor::new(&[h, w, 1], raster.iter().map(|&b| b as f64 / 256.0).collect())
}

/// Tiles a batch of single-channel images into one PGM, `cols` per row, with
/// a one-pixel white gutter.
pub fn write_pgm_sheet(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let (n, h, w, c) = images.dims4()?;
    if c != 1 || n == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample sheet needs a nonempty single-channel batch, got {:?}",
            images.shape()
        )));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (sw, sh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut sheet = vec![255.0 / 256.0; sw * sh];
    for (i, img) in images.data().chunks(h * w).enumerate() {
        let (r0, c0) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            sheet[(r0 + y) * sw + c0..(r0 + y) * sw + c0 + w].copy_from_slice(&img[y * w..(y + 1) * w]);
        }
    }
    atomic_write(path, &pgm_bytes(sw, sh, &sheet))
}

/// Writes `images/<id>.pgm` per item and a `manifest.csv` of
/// `(path, label)` rows, paths relative to `dir`.
pub fn write_dataset(dir: &Path, dataset: &LabeledDataset) -> Result<()> {
    let img_dir = dir.join("images");
    create_dir(&img_dir)?;
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let rel = format!("images/{:06}.pgm", dataset.ids[i]);
        write_pgm(&dir.join(&rel), &dataset.images.item_at(i))?;
        rows.push(vec![rel, dataset.labels[i].as_str().to_string()]);
    }
    atomic_write(&dir.join(MANIFEST_FILE), &csv_bytes(&["path", "label"], rows)?)
}

/// Reads a directory written by [`write_dataset`]. Ids are manifest row
/// numbers.
pub fn read_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| format_err(&manifest, e.to_string()))?;
    let headers = reader.headers().map_err(|e| format_err(&manifest, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(format_err(&manifest, "header must be path,label"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| format_err(&manifest, e.to_string()))?;
        let label = Class::parse(&record[1]).map_err(|e| format_err(&manifest, e.to_string()))?;
        let img = read_pgm(&dir.join(&record[0]))?;
        if let Some(first) = images.first().map(|t: &Tensor| &t.shape()[1..]) {
            if first != img.shape() {
                return Err(format_err(&manifest, format!("{} differs in size from the first image", &record[0])));
            }
        }
        let shape: Vec<usize> = std::iter::once(1).chain(img.shape().iter().copied()).collect();
        images.push(img.reshape(&shape)?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(format_err(&manifest, "manifest lists no images"));
    }
    LabeledDataset::new(Tensor::stack(&images)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic_dataset, SyntheticSeismoConfig};

    #[test]
    fn grid_images_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = Tensor::from_fn(&[5, 7, 1], |i| ((i * 37) % 256) as f64 / 256.0);
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn off_grid_values_floor_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &Tensor::new(&[1, 3, 1], vec![-0.2, 0.5 + 0.9 / 256.0, 1.4]).unwrap()).unwrap();
        assert_eq!(read_pgm(&p).unwrap().data(), &[0.0, 0.5, 255.0 / 256.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate_synthetic_dataset(&SyntheticSeismoConfig {
            size: 8,
            count: 40,
            ratios: [0.5, 0.3, 0.2],
            ..SyntheticSeismoConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }
}
