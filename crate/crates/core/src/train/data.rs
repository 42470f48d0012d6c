use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// 8-bit images `[count, channels, height, width]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Per-channel normalization on the `[0, 1]` scale.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        shape: [usize; 3],
        num_classes: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        let [channels, height, width] = shape;
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} image bytes do not hold {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        if mean.len() != channels || std.len() != channels || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Data("normalization constants must cover every channel".into()));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Normalized batch tensor and labels for `indices`. With `augment`, each
    /// image is zero-padded by 4, randomly cropped back and randomly
    /// mirrored.
    pub fn batch(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let img = self.image(i);
            let (dy, dx, flip) = match augment.as_deref_mut() {
                Some(r) => (r.gen_range(0..=8isize) - 4, r.gen_range(0..=8isize) - 4, r.gen_bool(0.5)),
                None => (0, 0, false),
            };
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let v = if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                            img[(ch * h + sy as usize) * w + sx as usize] as f64 / 255.0
                        } else {
                            0.0
                        };
                        data.push((v - m) / s);
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        let t = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (t, labels)
    }

    /// Sub-dataset of the given records, same constants.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

/// Parameters of the procedural dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

pub const SYNTH_MEAN: f64 = 0.5;
pub const SYNTH_STD: f64 = 0.25;

/// Class-conditional patterns. Class `k` draws from family `k mod 4` (an
/// oriented bar, a disk, a checkerboard, a linear ramp); higher classes
/// rotate and rescale the family. Position, size, phase, colors and the
/// polarity of the pattern against its background are jittered per image,
/// and pixel noise is added. Labels cycle through the classes.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config(format!("synthetic data needs at least 2 classes, got {}", spec.classes)));
    }
    if spec.classes > 256 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config("synthetic data: classes must be at most 256 and image extents positive"));
    }
    let mut r = rng::derived(spec.seed, 0x5EED);
    let (h, w) = (spec.height, spec.width);
    let mut images = Vec::with_capacity(spec.count * 3 * h * w);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let k = i % spec.classes;
        labels.push(k as u8);
        draw(&mut r, k, h, w, &mut images);
    }
    Dataset::new(
        images,
        labels,
        [3, h, w],
        spec.classes,
        vec![SYNTH_MEAN; 3],
        vec![SYNTH_STD; 3],
    )
}

fn draw(r: &mut ChaCha8Rng, class: usize, h: usize, w: usize, out: &mut Vec<u8>) {
    let family = class % 4;
    let variant = (class / 4) as f64;
    let bg: [f64; 3] = [r.gen_range(0.25..0.75), r.gen_range(0.25..0.75), r.gen_range(0.25..0.75)];
    let polarity = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
    let contrast = r.gen_range(0.2..0.3) * polarity;
    let tint: [f64; 3] = [r.gen_range(0.6..1.0), r.gen_range(0.6..1.0), r.gen_range(0.6..1.0)];
    let cx = r.gen_range(0.3..0.7);
    let cy = r.gen_range(0.3..0.7);
    // family-specific shape parameters
    let angle = variant * PI / 5.0 + r.gen_range(-0.25..0.25);
    let size = r.gen_range(0.8..1.2) * (1.0 + 0.3 * variant);
    let phase = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
    let noise: Vec<f64> = (0..3 * h * w).map(|_| r.gen_range(-0.06..0.06)).collect();

    let (sin, cos) = angle.sin_cos();
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            mask[y * w + x] = match family {
                0 => {
                    let d = ((u - cx) * sin - (v - cy) * cos).abs();
                    (d < 0.08 * size) as u8 as f64
                }
                1 => {
                    let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    (d < 0.2 * size) as u8 as f64
                }
                2 => {
                    let period = 0.25 * size;
                    let a = ((u * cos + v * sin) / period + phase.0).floor() as i64;
                    let b = ((v * cos - u * sin) / period + phase.1).floor() as i64;
                    ((a + b).rem_euclid(2)) as f64
                }
                _ => {
                    let t = (u - 0.5) * cos + (v - 0.5) * sin;
                    (t * 1.4 + 0.5).clamp(0.0, 1.0)
                }
            };
        }
    }
    for ch in 0..3 {
        for p in 0..h * w {
            let v = bg[ch] + contrast * tint[ch] * (2.0 * mask[p] - 1.0) + noise[ch * h * w + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Parse CIFAR-10 binary records: one label byte, then 1024 red, 1024 green
/// and 1024 blue bytes, each plane row-major 32×32.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::format(
            offset as u64,
            format!("trailing partial record of {} bytes", bytes.len() - offset),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                (i * CIFAR_RECORD) as u64,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Dataset::new(images, labels, [3, 32, 32], 10, CIFAR_MEAN.to_vec(), CIFAR_STD.to_vec())
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?)
}

pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>> {
    if data.image_shape() != [3, 32, 32] || data.num_classes > 10 {
        return Err(Error::Data("CIFAR-10 layout needs 3x32x32 images and at most 10 classes".into()));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels[i]);
        out.extend_from_slice(data.image(i));
    }
    Ok(out)
}

pub fn write_cifar10_binary(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cifar10(data)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize) -> SynthSpec {
        SynthSpec {
            classes: 4,
            count,
            height: 16,
            width: 16,
            seed: 3,
        }
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_generate(&spec(64)).unwrap(), synth_generate(&spec(64)).unwrap());
        let other = SynthSpec { seed: 4, ..spec(64) };
        assert_ne!(synth_generate(&spec(64)).unwrap().images, synth_generate(&other).unwrap().images);
    }

    #[test]
    fn synth_empty_and_balanced() {
        assert!(synth_generate(&spec(0)).unwrap().is_empty());
        let d = synth_generate(&spec(40)).unwrap();
        for k in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        let one = SynthSpec { classes: 1, ..spec(8) };
        assert!(matches!(synth_generate(&one), Err(Error::Config(_))));
    }

    #[test]
    fn cifar_empty_file() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
    }

    #[test]
    fn cifar_crafted_record() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255;
        let d = parse_cifar10(&rec).unwrap();
        assert_eq!(d.labels, vec![7]);
        assert_eq!(d.image(0)[0], 255);
        assert_eq!(d.image(0)[1024], 0);
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let mut two = vec![0u8; 2 * CIFAR_RECORD];
        two[CIFAR_RECORD] = 10;
        match parse_cifar10(&two) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        match parse_cifar10(&vec![0u8; CIFAR_RECORD + 5]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_without_augmentation_normalizes() {
        let d = Dataset::new(vec![0, 255, 51, 102], vec![1], [1, 2, 2], 2, vec![0.2], vec![0.5]).unwrap();
        let (t, labels) = d.batch(&[0], None);
        assert_eq!(labels, vec![1]);
        let want = [-0.4, 1.6, 0.0, 0.4];
        for (g, w) in t.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
