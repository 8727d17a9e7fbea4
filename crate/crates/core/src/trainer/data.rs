use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Entry, EntryData, TensorFile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
const NOISE_STD: f64 = 0.1;

/// One image with its exact label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `[3, H, W]`, values representable in f32.
    pub image: Tensor,
    /// Row-major `H * W` labels.
    pub mask: Vec<usize>,
    pub num_classes: usize,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Colour of class `c`: channel 0 ramps with the label, channel 1 separates
/// odd from even labels, channel 2 marks foreground.
pub fn class_colour(c: usize, num_classes: usize) -> [f64; 3] {
    if c == 0 {
        return [0.0; 3];
    }
    let ramp = c as f64 / (num_classes - 1) as f64;
    [ramp, if c % 2 == 1 { 1.0 } else { 0.5 }, 1.0]
}

/// Deterministic toy segmentation data. Sample `i` uses its own RNG stream:
/// 1 to `min(3, C-1)` shapes (uniform count), distinct foreground labels
/// drawn without replacement, each shape a rectangle or disc with equal
/// probability. Half-extents/radii are uniform in `[size/8, size/4]`; later
/// shapes paint over earlier ones.
pub fn make_synth_dataset(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Vec<SegSample>> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("data.size={size} must be a positive multiple of 32")));
    }
    if !(2..=256).contains(&num_classes) {
        return Err(Error::Config(format!("data.classes={num_classes} must be in 2..=256")));
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut mask = vec![0usize; size * size];
        let k = rng.random_range(1..=3.min(num_classes - 1));
        let labels = sample(&mut rng, num_classes - 1, k);
        let (lo, hi) = (size as f64 / 8.0, size as f64 / 4.0);
        for label in labels.iter().map(|l| l + 1) {
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let disc = rng.random_bool(0.5);
            let (ry, rx) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = if disc { dy * dy + dx * dx <= ry * ry } else { dy.abs() <= ry && dx.abs() <= rx };
                    if inside {
                        mask[y * size + x] = label;
                    }
                }
            }
        }
        let plane = size * size;
        let mut image = vec![0.0; 3 * plane];
        for ch in 0..3 {
            for p in 0..plane {
                let v = class_colour(mask[p], num_classes)[ch] + noise.sample(&mut rng);
                image[ch * plane + p] = v as f32 as f64;
            }
        }
        out.push(SegSample {
            id: format!("sample_{i:04}"),
            image: Tensor::new(&[3, size, size], image)?,
            mask,
            num_classes,
        });
    }
    Ok(out)
}

/// Images `[B, 3, H, W]` and concatenated masks for the given indices.
pub fn stack_batch(samples: &[SegSample], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let first = &samples[idx[0]];
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * first.image.numel());
    let mut mask = Vec::with_capacity(idx.len() * first.mask.len());
    for &i in idx {
        let s = &samples[i];
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("stack_batch", format!("{} has shape {:?}, expected {shape:?}", s.id, s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(&[idx.len(), shape[0], shape[1], shape[2]], data)?, mask))
}

/// Writes one container per sample (`image` as f32, `mask` as u8) and a
/// tab-separated manifest.
pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("file\theight\twidth\tnum_classes\n");
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let file = TensorFile {
            entries: vec![
                Entry {
                    name: "image".into(),
                    trainable: false,
                    dims: s.image.shape().to_vec(),
                    data: EntryData::F32(s.image.data().iter().map(|&v| v as f32).collect()),
                },
                Entry {
                    name: "mask".into(),
                    trainable: false,
                    dims: vec![h, w],
                    data: EntryData::U8(s.mask.iter().map(|&m| m as u8).collect()),
                },
            ],
        };
        let name = format!("{}.dunt", s.id);
        file.save(dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{h}\t{w}\t{}\n", s.num_classes));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format(format!("{MANIFEST} line {}: malformed row `{line}`", ln + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let num_classes: usize = cols[3].parse().map_err(|_| bad())?;
        let file = TensorFile::load(dir.join(cols[0]))?;
        let get = |name: &str| file.get(name).ok_or_else(|| Error::Format(format!("{}: missing `{name}` entry", cols[0])));
        let image = match &get("image")?.data {
            EntryData::F32(v) => Tensor::new(&get("image")?.dims, v.iter().map(|&x| x as f64).collect())?,
            EntryData::F64(v) => Tensor::new(&get("image")?.dims, v.clone())?,
            _ => return Err(Error::Format(format!("{}: image must be float", cols[0]))),
        };
        let mask: Vec<usize> = match &get("mask")?.data {
            EntryData::U8(v) => v.iter().map(|&m| m as usize).collect(),
            EntryData::I32(v) => v.iter().map(|&m| m as usize).collect(),
            _ => return Err(Error::Format(format!("{}: mask must be integer", cols[0]))),
        };
        if let Some(&m) = mask.iter().find(|&&m| m >= num_classes) {
            return Err(Error::LabelRange { label: m as i64, num_classes });
        }
        let id = cols[0].trim_end_matches(".dunt").to_string();
        out.push(SegSample { id, image, mask, num_classes });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no samples listed", dir.join(MANIFEST).display())));
    }
    Ok(out)
}
