use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use mid_tensor::Tensor;

use super::{Dataset, IdentityImages};
use crate::error::{MidError, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Pgm,
}

impl ImageFormat {
    fn extension(self, infrared: bool) -> &'static str {
        match (self, infrared) {
            (ImageFormat::Png, _) => "png",
            (ImageFormat::Pgm, true) => "pgm",
            (ImageFormat::Pgm, false) => "ppm",
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(MidError::io(dir))? {
        let path = entry.map_err(MidError::io(dir))?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| MidError::Image { path: path.to_path_buf(), source })?;
    let mut rgb = img.to_rgb8();
    if rgb.dimensions() != (width as u32, height as u32) {
        rgb = image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
    }
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, height, width], data)?)
}

/// Loads `root/<identity>/<rgb|ir>/<images>`, resizing to `height × width`.
/// Identities are labelled in sorted directory-name order.
pub fn load_image_directory(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    let mut identities = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let modality = |sub: &str| -> Result<Vec<Tensor>> {
            let path = dir.join(sub);
            if !path.is_dir() {
                return Err(MidError::Data(format!("identity `{name}` has no `{sub}` directory")));
            }
            let images = sorted_entries(&path)?
                .into_iter()
                .filter(|p| p.is_file())
                .map(|p| load_image(&p, height, width))
                .collect::<Result<Vec<_>>>()?;
            if images.is_empty() {
                return Err(MidError::Data(format!("identity `{name}` has no {sub} images")));
            }
            Ok(images)
        };
        let rgb = modality("rgb")?;
        let ir = modality("ir")?;
        identities.push(IdentityImages { name, rgb, ir });
    }
    if identities.is_empty() {
        return Err(MidError::Data(format!("no identity directories under `{}`", root.display())));
    }
    Dataset::new(height, width, identities)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a dataset in the layout read by [`load_image_directory`]. IR images
/// are stored single-channel.
pub fn export_dataset(dataset: &Dataset, root: &Path, format: ImageFormat) -> Result<()> {
    let (h, w) = (dataset.height(), dataset.width());
    let plane = h * w;
    for id in dataset.identities() {
        for (sub, images, infrared) in [("rgb", &id.rgb, false), ("ir", &id.ir, true)] {
            let dir = root.join(&id.name).join(sub);
            fs::create_dir_all(&dir).map_err(MidError::io(&dir))?;
            for (k, img) in images.iter().enumerate() {
                let d = img.data();
                let path = dir.join(format!("{k:04}.{}", format.extension(infrared)));
                let encoded: DynamicImage = if infrared {
                    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(d[y as usize * w + x as usize])]))
                        .into()
                } else {
                    RgbImage::from_fn(w as u32, h as u32, |x, y| {
                        let i = y as usize * w + x as usize;
                        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
                    })
                    .into()
                };
                encoded.save(&path).map_err(|source| MidError::Image { path: path.clone(), source })?;
            }
        }
    }
    Ok(())
}
