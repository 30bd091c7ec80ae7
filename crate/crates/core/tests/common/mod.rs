//! Shared fixtures for the integration suites: the synthetic quadrant-blob
//! dataset and independent oracles.

#![allow(dead_code)]

use std::path::Path;

use csra::data::{DatasetManifest, LabelVocabulary, Sample};
use csra::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub const BLOB_CLASSES: [&str; 4] = ["red-tl", "green-tr", "blue-bl", "yellow-br"];
const BLOB_COLORS: [[u8; 3]; 4] = [
    [220, 40, 40],
    [40, 200, 40],
    [60, 80, 230],
    [220, 210, 40],
];

/// Synthetic multi-label dataset: 64x64 images, one class per quadrant,
/// each active class drawn as a colored blob in its designated quadrant,
/// 1..=3 active classes per image, over a noisy gray background.
pub struct SyntheticDataset {
    pub dir: TempDir,
    pub manifest: DatasetManifest,
}

pub fn quadrant_blob_dataset(n: usize, seed: u64) -> SyntheticDataset {
    let dir = TempDir::new().expect("tempdir");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 64u32;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = image::RgbImage::new(size, size);
        for p in img.pixels_mut() {
            let g = rng.gen_range(85u8..=115);
            *p = image::Rgb([g, g, g]);
        }
        let active = rng.gen_range(1..=3usize);
        let mut label = vec![0u8; 4];
        while label.iter().filter(|&&v| v == 1).count() < active {
            label[rng.gen_range(0..4)] = 1;
        }
        for (class, &on) in label.iter().enumerate() {
            if on == 0 {
                continue;
            }
            // quadrant origin: 0 TL, 1 TR, 2 BL, 3 BR
            let qx = (class as u32 % 2) * size / 2;
            let qy = (class as u32 / 2) * size / 2;
            let r = rng.gen_range(8..=12) as i64;
            let cx = qx as i64 + rng.gen_range(r..(size as i64 / 2 - r) + 1);
            let cy = qy as i64 + rng.gen_range(r..(size as i64 / 2 - r) + 1);
            let color = BLOB_COLORS[class];
            for y in (cy - r).max(0)..(cy + r + 1).min(size as i64) {
                for x in (cx - r).max(0)..(cx + r + 1).min(size as i64) {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        img.put_pixel(x as u32, y as u32, image::Rgb(color));
                    }
                }
            }
        }
        let name = format!("img{i:04}.png");
        img.save(dir.path().join(&name)).expect("write png");
        samples.push(Sample {
            image: dir.path().join(&name),
            label,
        });
    }
    let vocabulary =
        LabelVocabulary::new(BLOB_CLASSES.iter().map(|s| s.to_string()).collect()).unwrap();
    let manifest = DatasetManifest::new(vocabulary, samples).unwrap();
    SyntheticDataset { dir, manifest }
}

impl SyntheticDataset {
    pub fn base_dir(&self) -> &Path {
        self.dir.path()
    }
}

/// Direct-summation convolution oracle, written without im2col or matmul.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wid as i64 {
                                    continue;
                                }
                                acc += x.data()
                                    [((ni * cin + ci) * h + iy as usize) * wid + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}
