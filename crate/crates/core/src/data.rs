//! Class-conditional toy datasets: procedural shapes and IDX ingestion.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Primitive drawn for each procedural class, in class order.
pub const SHAPE_NAMES: [&str; 8] = [
    "filled_square",
    "hollow_square",
    "disk",
    "ring",
    "plus",
    "cross",
    "horizontal_stripes",
    "vertical_stripes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Procedural,
    Idx,
}

/// Images in `[-1, 1]` as `[n, 1, size, size]`, with labels in `[0, n_classes)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copies the listed samples into a `[k, c, h, w]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.images.shape();
        let item: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * item..(i + 1) * item]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&out_shape, data).expect("gather keeps item shape"), labels)
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel {v} outside [-1, 1]")));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::invalid(format!("label {l} outside [0, {})", self.n_classes)));
        }
        Ok(())
    }
}

fn inside(class: usize, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let (ax, ay) = (dx.abs(), dy.abs());
    let dist = (dx * dx + dy * dy).sqrt();
    match class {
        0 => ax <= r && ay <= r,
        1 => ax <= r && ay <= r && (ax > r - 2.0 || ay > r - 2.0),
        2 => dist <= r,
        3 => dist <= r && dist > r - 2.0,
        4 => (ax <= 1.0 && ay <= r) || (ay <= 1.0 && ax <= r),
        5 => ax <= r && ay <= r && ((dx - dy).abs() <= 1.0 || (dx + dy).abs() <= 1.0),
        6 => (dy + r).rem_euclid(4.0) < 2.0,
        _ => (dx + r).rem_euclid(4.0) < 2.0,
    }
}

/// Renders `n_per_class` jittered copies of each class primitive.
///
/// Position jitter is an integer offset in `[-2, 2]` on each axis; the
/// foreground level is `0.8 ± 0.2`; background is `-1`.
pub fn gen_shapes(seed: u64, n_per_class: usize, n_classes: usize, size: usize) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::invalid(format!("image size must be >= 8, got {size}")));
    }
    if n_classes == 0 || n_classes > SHAPE_NAMES.len() {
        return Err(Error::invalid(format!("n_classes must be in 1..=8, got {n_classes}")));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = size as f32 * 0.3;
    let centre = size as f32 / 2.0 - 0.5;
    let mut data = Vec::with_capacity(n_classes * n_per_class * size * size);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for class in 0..n_classes {
        for _ in 0..n_per_class {
            let jx = rng.gen_range(-2i32..=2) as f32;
            let jy = rng.gen_range(-2i32..=2) as f32;
            let level = 0.8 + rng.gen_range(-0.2f32..=0.2);
            for y in 0..size {
                for x in 0..size {
                    let on = inside(class, x as f32, y as f32, centre + jx, centre + jy, r);
                    data.push(if on { level } else { -1.0 });
                }
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    let ds = Dataset {
        images: Tensor::new(&[n, 1, size, size], data)?,
        labels,
        n_classes,
        provenance: Provenance::Procedural,
    };
    ds.validate()?;
    Ok(ds)
}

/// Raw unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            kind: "IDX",
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 4 {
            return Err(bad("truncated header".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(bad(format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
        }
        if bytes[2] != 0x08 {
            return Err(bad(format!("unsupported element type 0x{:02x}", bytes[2])));
        }
        let ndim = bytes[3] as usize;
        let header = 4 + 4 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated dimension table".into()));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() < numel {
            return Err(bad(format!(
                "truncated payload: need {numel} bytes, have {}",
                payload.len()
            )));
        }
        Ok(Self {
            dims,
            data: payload[..numel].to_vec(),
        })
    }

    pub fn magic(&self) -> u32 {
        0x0000_0800 | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Byte pixel to `[-1, 1]`.
pub fn rescale_pixel(v: u8) -> f32 {
    f32::from(v) / 127.5 - 1.0
}

/// Loads an IDX image/label pair, center-cropping or padding (with `-1`) each
/// image to `size x size`.
pub fn load_idx(images_path: &Path, labels_path: &Path, size: usize, n_classes: usize) -> Result<Dataset> {
    let images = IdxArray::read(images_path)?;
    let labels = IdxArray::read(labels_path)?;
    let bad = |path: &Path, message: String| Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        message,
    };
    if images.magic() != IDX_IMAGES_MAGIC {
        return Err(bad(
            images_path,
            format!("bad magic 0x{:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", images.magic()),
        ));
    }
    if labels.magic() != IDX_LABELS_MAGIC {
        return Err(bad(
            labels_path,
            format!("bad magic 0x{:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", labels.magic()),
        ));
    }
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(bad(labels_path, format!("{} labels for {n} images", labels.dims[0])));
    }
    if n == 0 {
        return Err(bad(images_path, "file holds no images".into()));
    }
    let off_y = rows as isize / 2 - size as isize / 2;
    let off_x = cols as isize / 2 - size as isize / 2;
    let mut data = Vec::with_capacity(n * size * size);
    for i in 0..n {
        let img = &images.data[i * rows * cols..(i + 1) * rows * cols];
        for y in 0..size as isize {
            for x in 0..size as isize {
                let (sy, sx) = (y + off_y, x + off_x);
                let v = if (0..rows as isize).contains(&sy) && (0..cols as isize).contains(&sx) {
                    rescale_pixel(img[sy as usize * cols + sx as usize])
                } else {
                    -1.0
                };
                data.push(v);
            }
        }
    }
    let ds = Dataset {
        images: Tensor::new(&[n, 1, size, size], data)?,
        labels: labels.data.iter().map(|&l| l as usize).collect(),
        n_classes,
        provenance: Provenance::Idx,
    };
    ds.validate()?;
    Ok(ds)
}

/// One shuffled epoch of full batches; the trailing partial batch is dropped.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        Some(self.ds.gather(idx))
    }
}

pub fn batches<'a, R: Rng + ?Sized>(ds: &'a Dataset, batch_size: usize, rng: &mut R) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if batch_size > ds.len() {
        return Err(Error::invalid(format!(
            "batch_size {batch_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

/// Endless batch source that reshuffles at every epoch boundary.
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    current: Batches<'a>,
}

impl<'a> BatchStream<'a> {
    pub fn new<R: Rng + ?Sized>(ds: &'a Dataset, batch_size: usize, rng: &mut R) -> Result<Self> {
        let current = batches(ds, batch_size, rng)?;
        Ok(Self {
            ds,
            batch_size,
            current,
        })
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Tensor, Vec<usize>) {
        loop {
            if let Some(b) = self.current.next() {
                return b;
            }
            self.current = batches(self.ds, self.batch_size, rng).expect("validated at construction");
        }
    }
}
