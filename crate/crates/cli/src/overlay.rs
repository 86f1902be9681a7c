//! Static visualization of a prediction on its image.

use gazelle_core::data::RgbFrame;
use gazelle_core::decoder::GazeHeatmap;
use gazelle_core::prompting::HeadBBox;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

const BOX_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const MARKER_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
const HEAT_ALPHA: f32 = 0.6;

fn jet(v: f32) -> [f32; 3] {
    let ch = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn blend(px: &mut Rgb<u8>, color: [f32; 3], alpha: f32) {
    for (c, &t) in px.0.iter_mut().zip(&color) {
        *c = ((1.0 - alpha) * f32::from(*c) + alpha * t * 255.0).round() as u8;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn disk(img: &mut RgbImage, (cx, cy): (i64, i64), r: i64, color: Rgb<u8>) {
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                put(img, x, y, color);
            }
        }
    }
}

/// The image with the heatmap blended on top (scaled to its maximum), the
/// head box outlined, and a marker at the heatmap argmax joined to the head
/// center.
pub fn render_overlay(image: &RgbFrame, heatmap: &GazeHeatmap, bbox: Option<&HeadBBox>) -> RgbImage {
    let mut out = image.to_rgb8();
    let (w, h) = out.dimensions();
    let data = heatmap.data();
    let (hh, hw) = heatmap.shape();
    let peak = data.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(hw as u32, hh as u32, |x, y| Luma([(data[[y as usize, x as usize]] / peak) as f32]));
    let heat = imageops::resize(&small, w, h, FilterType::Triangle);
    for (px, v) in out.pixels_mut().zip(heat.pixels()) {
        let v = v.0[0].clamp(0.0, 1.0);
        blend(px, jet(v), HEAT_ALPHA * v);
    }

    let to_px = |x: f64, y: f64| ((x * f64::from(w)).round() as i64, (y * f64::from(h)).round() as i64);
    let (gx, gy) = heatmap.argmax_point();
    let target = to_px(gx, gy);
    let radius = (i64::from(w.min(h)) / 60).max(3);
    if let Some(b) = bbox {
        let (x0, y0) = to_px(b.xmin, b.ymin);
        let (x1, y1) = to_px(b.xmax, b.ymax);
        for (a, c) in [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))] {
            line(&mut out, a, c, BOX_COLOR);
        }
        let (cx, cy) = b.center();
        line(&mut out, to_px(cx, cy), target, MARKER_COLOR);
    }
    disk(&mut out, target, radius, MARKER_COLOR);
    out
}
