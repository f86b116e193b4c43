//! In-memory datasets and the on-disk directory layout:
//! `img_%05d.pgm` / `msk_%05d.pgm` pairs plus `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::pgm::PgmImage;
use crate::tensor::Tensor;
use crate::training::synth::{Sample, SyntheticSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub noise_std: f64,
    /// Index of the first sample; file names carry absolute indices.
    #[serde(default)]
    pub first: usize,
}

impl From<&SyntheticSpec> for Manifest {
    fn from(s: &SyntheticSpec) -> Self {
        Self {
            count: s.count,
            size: s.size,
            seed: s.seed,
            blobs_min: s.blobs_min,
            blobs_max: s.blobs_max,
            noise_std: s.noise_std,
            first: s.first,
        }
    }
}

/// Equally sized `[H, W]` images with binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

pub fn image_file(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

pub fn mask_file(index: usize) -> String {
    format!("msk_{index:05}.pgm")
}

impl Dataset {
    pub fn new(ids: Vec<String>, images: Vec<Tensor>, masks: Vec<Tensor>) -> Result<Self> {
        if ids.len() != images.len() || images.len() != masks.len() {
            return Err(shape_err!(
                "{} ids, {} images and {} masks",
                ids.len(),
                images.len(),
                masks.len()
            ));
        }
        if let Some(first) = images.first() {
            let dims = first.dims();
            if dims.len() != 2 {
                return Err(shape_err!("images must be [H,W], got {:?}", dims));
            }
            for (img, m) in images.iter().zip(&masks) {
                if img.dims() != dims || m.dims() != dims {
                    return Err(shape_err!(
                        "all images and masks must be {:?}, got {:?} and {:?}",
                        dims,
                        img.dims(),
                        m.dims()
                    ));
                }
            }
        }
        Ok(Self { ids, images, masks })
    }

    /// Dataset of rendered samples, quantized exactly as a disk round trip
    /// would.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let ids = samples.iter().map(|s| format!("{:05}", s.index)).collect();
        let images = samples
            .iter()
            .map(|s| Ok(PgmImage::from_tensor(&s.image)?.to_tensor()))
            .collect::<Result<_>>()?;
        let masks = samples.iter().map(|s| s.mask.clone()).collect();
        Self::new(ids, images, masks)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_dims(&self) -> Option<[usize; 2]> {
        self.images.first().map(|t| [t.dims()[0], t.dims()[1]])
    }

    /// Stacks the selected samples as `[N, 1, H, W]` images and masks.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let pick = |v: &[Tensor]| -> Result<Tensor> {
            let items: Vec<Tensor> = indices
                .iter()
                .map(|&i| {
                    let t = v
                        .get(i)
                        .ok_or_else(|| Error::OutOfBounds(format!("sample {i} of {}", v.len())))?;
                    t.clone().reshape(&[1, t.dims()[0], t.dims()[1]])
                })
                .collect::<Result<_>>()?;
            Tensor::stack(&items)
        };
        Ok((pick(&self.images)?, pick(&self.masks)?))
    }

    /// Reads every pair listed by the directory's manifest.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let (mut ids, mut images, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for i in manifest.first..manifest.first + manifest.count {
            let img = PgmImage::read(dir.join(image_file(i)))?;
            let msk = PgmImage::read(dir.join(mask_file(i)))?;
            if msk.samples.iter().any(|&s| s != 0 && s != 255) {
                return Err(Error::InvalidTarget(format!(
                    "{} is not a 0/255 mask",
                    mask_file(i)
                )));
            }
            ids.push(format!("{i:05}"));
            images.push(img.to_tensor());
            masks.push(msk.to_tensor().map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
        }
        Ok((Self::new(ids, images, masks)?, manifest))
    }
}

/// Writes samples and their manifest into `dir`, creating it if needed.
pub fn write_dir(dir: impl AsRef<Path>, spec: &SyntheticSpec, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for s in samples {
        PgmImage::from_tensor(&s.image)?.write(dir.join(image_file(s.index)))?;
        PgmImage::from_tensor(&s.mask)?.write(dir.join(mask_file(s.index)))?;
    }
    let manifest =
        serde_json::to_string_pretty(&Manifest::from(spec)).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST), manifest + "\n")?;
    Ok(())
}
