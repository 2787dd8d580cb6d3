//! IDX ingestion, a procedural stand-in corpus, and N-way K-shot episode sampling.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{LabeledBatch, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

pub const SIDE: usize = 28;

/// A grayscale image with pixels in `[0, 1]` and its dataset-wide class.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageExample {
    pub pixels: Tensor,
    pub label: usize,
}

impl ImageExample {
    pub fn flat(&self) -> &[f64] {
        self.pixels.data()
    }
}

/// `ways` classes with `shots` examples each, in both support and query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub ways: usize,
    pub shots: usize,
}

impl FewShotSpec {
    pub fn new(ways: usize, shots: usize) -> Result<Self> {
        let spec = FewShotSpec { ways, shots };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 {
            return Err(Error::invalid(format!(
                "few-shot spec needs ways >= 2 and shots >= 1, got {}-way {}-shot",
                self.ways, self.shots
            )));
        }
        Ok(())
    }

    pub fn set_size(&self) -> usize {
        self.ways * self.shots
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<ImageExample>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl Dataset {
    pub fn new(examples: Vec<ImageExample>) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            by_class.entry(ex.label).or_default().push(i);
        }
        Dataset { examples, by_class }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[ImageExample] {
        &self.examples
    }

    pub fn get(&self, index: usize) -> &ImageExample {
        &self.examples[index]
    }

    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map(|e| e.pixels.len()).unwrap_or(0)
    }

    /// Splits off the last `held_out` examples of every class.
    pub fn split_per_class(&self, held_out: usize) -> Result<(Dataset, Dataset)> {
        let mut keep = Vec::new();
        let mut rest = Vec::new();
        for (class, idx) in &self.by_class {
            if idx.len() <= held_out {
                return Err(Error::invalid(format!(
                    "class {class} has {} examples, cannot hold out {held_out}",
                    idx.len()
                )));
            }
            let cut = idx.len() - held_out;
            keep.extend(idx[..cut].iter().map(|&i| self.examples[i].clone()));
            rest.extend(idx[cut..].iter().map(|&i| self.examples[i].clone()));
        }
        Ok((Dataset::new(keep), Dataset::new(rest)))
    }
}

/// One task's disjoint support and query sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub spec: FewShotSpec,
    /// Dataset-wide labels of the task's classes; position is the task-local label.
    pub classes: Vec<usize>,
    pub support: Vec<ImageExample>,
    pub query: Vec<ImageExample>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl TaskBatch {
    pub fn local_label(&self, dataset_label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == dataset_label)
    }

    fn batch_of(&self, items: &[ImageExample]) -> LabeledBatch {
        let rows: Vec<&[f64]> = items.iter().map(ImageExample::flat).collect();
        let labels = items
            .iter()
            .map(|e| self.local_label(e.label).expect("task item outside task classes"))
            .collect();
        LabeledBatch::from_rows(&rows, labels).expect("task sets are nonempty")
    }

    /// Support set with task-local labels.
    pub fn support_batch(&self) -> LabeledBatch {
        self.batch_of(&self.support)
    }

    /// Query set with task-local labels.
    pub fn query_batch(&self) -> LabeledBatch {
        self.batch_of(&self.query)
    }

    pub fn contains_index(&self, index: usize) -> bool {
        self.support_indices.contains(&index) || self.query_indices.contains(&index)
    }
}

/// Draws `ways` distinct classes and `2 * shots` distinct examples of each;
/// the first `shots` go to the support set and the rest to the query set.
pub fn sample_task<R: Rng + ?Sized>(dataset: &Dataset, spec: FewShotSpec, rng: &mut R) -> Result<TaskBatch> {
    spec.validate()?;
    let eligible: Vec<usize> = dataset
        .by_class
        .iter()
        .filter(|(_, idx)| idx.len() >= 2 * spec.shots)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < spec.ways {
        return Err(Error::invalid(format!(
            "only {} classes have at least {} examples; {}-way tasks impossible",
            eligible.len(),
            2 * spec.shots,
            spec.ways
        )));
    }
    let classes: Vec<usize> = eligible.choose_multiple(rng, spec.ways).copied().collect();
    let mut task = TaskBatch {
        spec,
        classes: classes.clone(),
        support: Vec::with_capacity(spec.set_size()),
        query: Vec::with_capacity(spec.set_size()),
        support_indices: Vec::with_capacity(spec.set_size()),
        query_indices: Vec::with_capacity(spec.set_size()),
    };
    for &c in &classes {
        let picked: Vec<usize> = dataset
            .class_indices(c)
            .choose_multiple(rng, 2 * spec.shots)
            .copied()
            .collect();
        for (k, &i) in picked.iter().enumerate() {
            let ex = dataset.examples[i].clone();
            if k < spec.shots {
                task.support.push(ex);
                task.support_indices.push(i);
            } else {
                task.query.push(ex);
                task.query_indices.push(i);
            }
        }
    }
    Ok(task)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            field,
            reason: "file truncated inside the header".into(),
        })
}

/// Parses IDX image and label files (optionally gzip-compressed).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<ImageExample>> {
    let (ipath, lpath) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_all(ipath)?;
    let labels = read_all(lpath)?;

    let magic = be_u32(&images, 0, ipath, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: ipath.into(),
            field: "magic",
            reason: format!("expected {IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(&images, 4, ipath, "item count")? as usize;
    let rows = be_u32(&images, 8, ipath, "rows")? as usize;
    let cols = be_u32(&images, 12, ipath, "columns")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: ipath.into(),
            field: "rows",
            reason: format!("degenerate image size {rows}x{cols}"),
        });
    }
    let payload = &images[16..];
    if payload.len() != count * rows * cols {
        return Err(Error::Format {
            path: ipath.into(),
            field: "pixel payload",
            reason: format!(
                "header promises {count} images of {rows}x{cols} ({} bytes), found {} bytes",
                count * rows * cols,
                payload.len()
            ),
        });
    }

    let lmagic = be_u32(&labels, 0, lpath, "magic")?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::Format {
            path: lpath.into(),
            field: "magic",
            reason: format!("expected {LABEL_MAGIC:#010x}, found {lmagic:#010x}"),
        });
    }
    let lcount = be_u32(&labels, 4, lpath, "item count")? as usize;
    if lcount != count {
        return Err(Error::Format {
            path: lpath.into(),
            field: "item count",
            reason: format!("{lcount} labels for {count} images"),
        });
    }
    let lpayload = &labels[8..];
    if lpayload.len() != lcount {
        return Err(Error::Format {
            path: lpath.into(),
            field: "label payload",
            reason: format!("header promises {lcount} labels, found {} bytes", lpayload.len()),
        });
    }

    Ok(payload
        .chunks(rows * cols)
        .zip(lpayload)
        .map(|(px, &label)| ImageExample {
            pixels: Tensor::matrix(rows, cols, px.iter().map(|&b| b as f64 / 255.0).collect()),
            label: label as usize,
        })
        .collect())
}

/// Writes images and labels as raw (uncompressed) IDX files.
pub fn write_idx(
    examples: &[ImageExample],
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let first = examples
        .first()
        .ok_or_else(|| Error::invalid("cannot write an empty IDX set"))?;
    let (rows, cols) = (first.pixels.rows(), first.pixels.cols());
    let mut img = Vec::with_capacity(16 + examples.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + examples.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    for ex in examples {
        if ex.pixels.rows() != rows || ex.pixels.cols() != cols {
            return Err(Error::invalid("IDX images must share one size"));
        }
        img.extend(ex.flat().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        lab.push(u8::try_from(ex.label).map_err(|_| Error::invalid("IDX labels must fit in a byte"))?);
    }
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, lab).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Procedural 28x28 corpus: each class is an oriented bar plus an offset
/// blob, jittered by a small random shift and pixel noise.
pub fn synth_dataset<R: Rng + ?Sized>(classes: usize, per_class: usize, rng: &mut R) -> Result<Vec<ImageExample>> {
    if classes < 2 || per_class == 0 {
        return Err(Error::invalid(format!(
            "synthetic corpus needs >= 2 classes and >= 1 example each, got {classes} x {per_class}"
        )));
    }
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let mut out = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let angle = std::f64::consts::PI * class as f64 / classes as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        let blob_angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let (bx, by) = (14.0 + 7.0 * blob_angle.cos(), 14.0 + 7.0 * blob_angle.sin());
        for _ in 0..per_class {
            let sx = rng.random_range(-1.5..1.5);
            let sy = rng.random_range(-1.5..1.5);
            let mut px = Vec::with_capacity(SIDE * SIDE);
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let x = c as f64 - 13.5 - sx;
                    let y = r as f64 - 13.5 - sy;
                    let along = x * dx + y * dy;
                    let across = (-x * dy + y * dx).abs();
                    let bar = if along.abs() <= 9.0 && across <= 1.5 { 1.0 } else { 0.0 };
                    let d2 = (c as f64 - bx - sx).powi(2) + (r as f64 - by - sy).powi(2);
                    let blob = (-d2 / 6.0).exp();
                    let v: f64 = bar + blob + noise.sample(rng);
                    px.push(v.clamp(0.0, 1.0));
                }
            }
            out.push(ImageExample {
                pixels: Tensor::matrix(SIDE, SIDE, px),
                label: class,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}
