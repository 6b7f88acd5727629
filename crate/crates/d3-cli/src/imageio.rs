//! Image file handling: PNG and PNM in both directions, plus directory
//! loading with stable stem-derived ids. Decode failures map to format
//! errors so they exit with the format code rather than a generic one.

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use std::fs;
use std::path::{Path, PathBuf};

use d3_core::{io_with_path, CorpusImage, D3Error, ImageTensor, Result};

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| io_with_path(e, path))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| D3Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if decoded.color().has_color() {
        let rgb = decoded.to_rgb8();
        let data = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        ImageTensor::new(h, w, 3, data)
    } else {
        let gray = decoded.to_luma8();
        let data = gray.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        ImageTensor::new(h, w, 1, data)
    }
}

pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (h, w) = (img.height() as u32, img.width() as u32);
    let dynimg = match img.channels() {
        1 => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_vec(w, h, img.data().iter().map(|&v| quantize(v)).collect())
                    .expect("buffer length matches dims");
            DynamicImage::ImageLuma8(buf)
        }
        _ => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_vec(w, h, img.data().iter().map(|&v| quantize(v)).collect())
                    .expect("buffer length matches dims");
            DynamicImage::ImageRgb8(buf)
        }
    };
    dynimg
        .save(path)
        .map_err(|e| D3Error::Format(format!("{}: {e}", path.display())))
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pbm", "pnm"];

pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_with_path(e, dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(D3Error::Dimension(format!(
            "no images (extensions {IMAGE_EXTENSIONS:?}) in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a directory of images sorted by filename; ids are file stems.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusImage>> {
    image_files(dir)?
        .iter()
        .map(|p| Ok(CorpusImage { id: stem_of(p), image: load_image(p)? }))
        .collect()
}

/// Pairs two directories by file stem: every clean image must have a
/// same-stem partner.
pub fn load_pairs(clean: &Path, noisy: &Path) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    let clean_files = image_files(clean)?;
    let mut out = Vec::with_capacity(clean_files.len());
    for cf in &clean_files {
        let stem = stem_of(cf);
        let partner = image_files(noisy)?
            .into_iter()
            .find(|p| stem_of(p) == stem)
            .ok_or_else(|| {
                D3Error::Dimension(format!(
                    "no image with stem '{stem}' in {}",
                    noisy.display()
                ))
            })?;
        out.push((load_image(cf)?, load_image(&partner)?));
    }
    Ok(out)
}
