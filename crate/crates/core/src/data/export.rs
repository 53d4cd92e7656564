//! PNG and raw layout files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{Image, Layout, Scene, CLASS_ANCHORS};
use crate::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn image_to_rgb(img: &Image) -> RgbImage {
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

/// Layout painted with the class anchor colours.
pub fn layout_to_rgb(layout: &Layout) -> RgbImage {
    RgbImage::from_fn(layout.width() as u32, layout.height() as u32, |x, y| {
        let c = CLASS_ANCHORS[(layout.get(y as usize, x as usize) as usize).min(CLASS_ANCHORS.len() - 1)];
        Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
    })
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    image_to_rgb(img).save(path)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let data = rgb.pixels().flat_map(|p| p.0.map(|v| v as f32 / 127.5 - 1.0)).collect();
    Image::new(rgb.height() as usize, rgb.width() as usize, data)
}

/// Grayscale PNG of a single-channel map, min-max normalised.
pub fn write_gray(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!("{} values for {height}x{width}", values.len())));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = (values[y as usize * width + x as usize] - lo) / span;
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Row-major 8-bit class indices, no header.
pub fn write_layout(layout: &Layout, path: &Path) -> Result<()> {
    fs::write(path, layout.labels())?;
    Ok(())
}

pub fn read_layout(path: &Path, height: usize, width: usize, num_classes: usize) -> Result<Layout> {
    Layout::new(height, width, num_classes, fs::read(path)?)
}

/// Writes `<stem>_image.png`, `<stem>_edge.png`, `<stem>_layout.png` and
/// `<stem>_layout.u8` into `dir`.
pub fn export_scene(scene: &Scene, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = ["image.png", "edge.png", "layout.png", "layout.u8"]
        .iter()
        .map(|s| dir.join(format!("{stem}_{s}")))
        .collect();
    write_image(&scene.image, &paths[0])?;
    write_image(&scene.edge, &paths[1])?;
    layout_to_rgb(&scene.layout).save(&paths[2])?;
    write_layout(&scene.layout, &paths[3])?;
    Ok(paths)
}
