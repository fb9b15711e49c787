//! Run-directory artifacts: PNG images and heatmaps, CSV dumps.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::align::TokenizedPrompt;
use crate::controller::GateSchedule;
use crate::dps::SpatialScales;
use crate::error::{Error, Result};
use crate::fwt::FwtAnalysis;

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Quantizes values in `[0, 1]` to 8 bits with `round(v·255)`.
pub fn heatmap(values: &[f32], grid: (usize, usize)) -> Result<GrayImage> {
    let (h, w) = grid;
    if values.len() != h * w {
        return Err(Error::dim(
            "heatmap",
            format!("{} values for a {h}×{w} grid", values.len()),
        ));
    }
    let px: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, px).expect("length checked"))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_heatmap(values: &[f32], grid: (usize, usize), path: &Path) -> Result<()> {
    heatmap(values, grid)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_spatial(s: &SpatialScales, path: &Path) -> Result<()> {
    write_heatmap(&s.s, s.grid, path)
}

/// `word,A,tau` for every word of the edited prompt.
pub fn write_scales_csv(prompt: &TokenizedPrompt, fwt: Option<&FwtAnalysis>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["word", "A", "tau"])?;
    if let Some(f) = fwt {
        for ((word, a), tau) in prompt.words.iter().zip(&f.correlation).zip(&f.scales.tau) {
            w.write_record([word.clone(), a.to_string(), tau.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `word,key,threshold,preserve_steps`: the gate log of one run.
pub fn write_schedule_csv(prompt: &TokenizedPrompt, schedule: &GateSchedule, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["word", "key", "threshold", "preserve_steps"])?;
    for (i, word) in prompt.words.iter().enumerate() {
        w.write_record([
            word.clone(),
            schedule.key[i].to_string(),
            schedule.thresholds[i].to_string(),
            schedule.preserve_steps(i).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Root-mean-square pixel difference with channels scaled to `[0, 1]`.
pub fn image_l2(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dim("image_l2", "image sizes differ"));
    }
    let n = a.as_raw().len().max(1) as f64;
    let ss: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = (f64::from(x) - f64::from(y)) / 255.0;
            d * d
        })
        .sum();
    Ok((ss / n).sqrt())
}
