//! Figures: the two-class entropy curves and per-branch probability maps.

use std::fmt::Write as _;

use image::{imageops, GrayImage, Rgb, RgbImage};
use mixsup::field::{argmax, softmax, DenseMask, ImageGrid, SimplexField};
use mixsup::losses::{min_entropy, shannon_entropy};
use mixsup::metrics::{BinaryMask, Branch};
use mixsup::model::UNet;

pub const ENTROPY_CSV_HEADER: &str = "p,shannon,min_entropy";
pub const OVERLAY_CSV_HEADER: &str = "id,branch,mean_fg_prob,min_fg_prob,max_fg_prob,mean_entropy";

/// `(p, H, H_min)` for the two-class distribution `(p, 1-p)`.
pub fn entropy_curves(samples: usize) -> Vec<(f64, f64, f64)> {
    (0..samples)
        .map(|i| {
            let p = i as f64 / (samples - 1) as f64;
            let field = SimplexField::new(1, 1, 2, vec![p, 1.0 - p]).expect("valid two-class point");
            (p, shannon_entropy(&field), min_entropy(&field))
        })
        .collect()
}

pub fn entropy_csv(curves: &[(f64, f64, f64)]) -> String {
    let mut out = format!("{ENTROPY_CSV_HEADER}\n");
    for (p, h, hmin) in curves {
        let _ = writeln!(out, "{p:.6},{h:.8},{hmin:.8}");
    }
    out
}

pub fn entropy_svg(curves: &[(f64, f64, f64)]) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let y_max = 0.8;
    let px = |p: f64| m + p * (w - 2.0 * m);
    let py = |v: f64| h - m - v / y_max * (h - 2.0 * m);
    let line = |pick: fn(&(f64, f64, f64)) -> f64| {
        curves
            .iter()
            .map(|c| format!("{:.2},{:.2}", px(c.0), py(pick(c))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{m},{} V{} H{}" fill="none" stroke="black"/>"#,
        m,
        h - m,
        w - m
    );
    for k in 0..=4 {
        let p = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{p}</text>"#,
            px(p),
            h - m + 18.0
        );
        let v = k as f64 * 0.2;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            m - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">p</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="blue" stroke-width="2"/>"#,
        line(|c| c.1)
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="red" stroke-width="2"/>"#,
        line(|c| c.2)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" fill="blue">Shannon entropy</text>"#,
        w - m - 130.0,
        m
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" fill="red">min-entropy</text>"#,
        w - m - 130.0,
        m + 16.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Probability of any nonzero class, per pixel.
pub fn foreground_prob(p: &SimplexField<f32>) -> Vec<f32> {
    p.channel(0).iter().map(|&bg| (1.0 - bg).clamp(0.0, 1.0)).collect()
}

fn heat(v: f32) -> Rgb<u8> {
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)])
}

pub struct BranchMaps {
    pub heatmap: RgbImage,
    pub overlay: RgbImage,
    pub stats: [f64; 4],
}

/// Heatmap of the foreground probability and the predicted contour drawn
/// over the input, both upscaled by `scale`.
pub fn branch_maps(
    model: &UNet<f32>,
    branch: Branch,
    image: &ImageGrid<f32>,
    scale: u32,
) -> mixsup::Result<BranchMaps> {
    let out = model.forward(image)?;
    let logits = match branch {
        Branch::Top => out.top,
        Branch::Bottom => out.bottom.ok_or(mixsup::Error::MissingBranch)?,
    };
    let p = softmax(&logits);
    let fg = foreground_prob(&p);
    let (h, w) = (image.height() as u32, image.width() as u32);
    let heatmap = RgbImage::from_fn(w, h, |x, y| heat(fg[(y * w + x) as usize]));

    let gray = mixsup::data::image_to_png(image);
    let mut overlay = RgbImage::from_fn(w, h, |x, y| {
        let v = gray.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    let pred: DenseMask = argmax(&p);
    for (y, x) in BinaryMask::foreground(&pred).boundary() {
        overlay.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
    }
    let n = fg.len() as f64;
    let stats = [
        fg.iter().map(|&v| v as f64).sum::<f64>() / n,
        fg.iter().copied().fold(f32::INFINITY, f32::min) as f64,
        fg.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64,
        shannon_entropy(&p) as f64,
    ];
    let up = |img: &RgbImage| imageops::resize(img, w * scale, h * scale, imageops::FilterType::Nearest);
    Ok(BranchMaps {
        heatmap: up(&heatmap),
        overlay: up(&overlay),
        stats,
    })
}

pub fn gray_to_grid(img: &GrayImage) -> mixsup::Result<ImageGrid<f32>> {
    let (w, h) = img.dimensions();
    ImageGrid::new(
        h as usize,
        w as usize,
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )
}
