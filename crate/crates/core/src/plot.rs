//! Static joint-trajectory strips: evenly spaced frames drawn as front-view
//! stick figures side by side, with wrist and ankle paths traced behind them.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::body::{BodyModel, Motion, Skeleton, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StripStyle {
    pub panels: usize,
    pub panel_width: u32,
    pub panel_height: u32,
    /// Pixels per length unit.
    pub scale: f64,
}

impl Default for StripStyle {
    fn default() -> Self {
        StripStyle { panels: 8, panel_width: 160, panel_height: 260, scale: 110.0 }
    }
}

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const TRACE: Rgb<u8> = Rgb([200, 200, 200]);
const TRACED: [&str; 4] = ["left_wrist", "right_wrist", "left_ankle", "right_ankle"];

fn blend(t: f64) -> Rgb<u8> {
    let a = [40.0, 90.0, 200.0];
    let b = [220.0, 60.0, 40.0];
    Rgb(std::array::from_fn(|i| (a[i] + (b[i] - a[i]) * t).round() as u8))
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>, radius: i64) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

fn segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, c, 1);
    }
}

/// Renders the strip in memory.
pub fn render_strip(motion: &Motion, body: &Skeleton, style: &StripStyle) -> Result<RgbImage> {
    if motion.is_empty() {
        return Err(Error::EmptySequence);
    }
    if style.panels == 0 || style.panel_width == 0 || style.panel_height == 0 {
        return Err(Error::InvalidArgument("strip style sizes must be positive".into()));
    }
    let joints: Vec<Vec<Vec3>> = motion.frames.iter().map(|f| body.joints(f, true)).collect::<Result<_>>()?;
    let names = body.names();
    let parents: Vec<Option<usize>> = (0..names.len()).map(|j| body.parent(j)).collect();
    let panels = style.panels.min(motion.len());
    let picks: Vec<usize> = (0..panels)
        .map(|k| if panels == 1 { 0 } else { k * (motion.len() - 1) / (panels - 1) })
        .collect();
    let mut img = RgbImage::from_pixel(style.panel_width * panels as u32, style.panel_height, BACKGROUND);
    let root0 = joints[0][0];
    let floor = joints.iter().flatten().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let traced: Vec<usize> = TRACED.iter().filter_map(|n| names.iter().position(|x| x == n)).collect();
    for (k, &t) in picks.iter().enumerate() {
        let ox = style.panel_width as f64 * (k as f64 + 0.5);
        let oy = style.panel_height as f64 - 10.0;
        let proj = |p: &Vec3| (ox + (p.x - joints[t][0].x) * style.scale, oy - (p.y - floor) * style.scale);
        for frame in &joints[..=t] {
            for &j in &traced {
                let p = frame[j] - (frame[0] - root0) + (joints[t][0] - root0);
                let (x, y) = proj(&p);
                put(&mut img, x, y, TRACE, 0);
            }
        }
        let colour = blend(if panels == 1 { 0.0 } else { k as f64 / (panels - 1) as f64 });
        for (j, parent) in parents.iter().enumerate() {
            if let Some(p) = parent {
                segment(&mut img, proj(&joints[t][*p]), proj(&joints[t][j]), colour);
            }
        }
    }
    Ok(img)
}

/// Writes the strip as a PNG.
pub fn save_strip(image: &RgbImage, path: &Path) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
