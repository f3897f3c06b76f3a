//! SVG overlay of the last sampling stage: region boxes, keypoints colored
//! by their dominant scale, and one bar glyph per keypoint showing its
//! scale weights.

use std::fmt::Write as _;

use base64::Engine as _;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::eval::detections_from_outputs;
use crate::imfa::{run_pipeline, ForwardOptions, ModelConfig};
use crate::params::ParamStore;
use crate::pyramid::Image;
use crate::tensor::Tape;

/// One color per pyramid level, finest first.
pub const SCALE_COLORS: [&str; 4] = ["#e6194b", "#3cb44b", "#4363d8", "#f58231"];
const CLASS_NAMES: [&str; 3] = ["rectangle", "circle", "triangle"];

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizeOptions {
    /// SVG units per image pixel.
    pub zoom: f64,
    /// Final-stage detections drawn: at most `max_detections` with score at
    /// least `score_threshold`.
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for VisualizeOptions {
    fn default() -> Self {
        VisualizeOptions {
            zoom: 4.0,
            score_threshold: 0.3,
            max_detections: 10,
        }
    }
}

/// Geometry of the overlay in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    /// Region boxes clipped to the image, as `[x0, y0, x1, y1]`.
    pub regions: Vec<[f64; 4]>,
    /// `(x, y)` per keypoint, region-major.
    pub keypoints: Vec<(f64, f64)>,
    /// Scale weights per keypoint.
    pub weights: Vec<Vec<f64>>,
    pub keypoints_per_region: usize,
    /// Drawn detections: clipped corners, class and score.
    pub detections: Vec<([f64; 4], usize, f64)>,
}

fn corners(b: &[f64]) -> [f64; 4] {
    [
        (b[0] - b[2] / 2.0).clamp(0.0, 1.0),
        (b[1] - b[3] / 2.0).clamp(0.0, 1.0),
        (b[0] + b[2] / 2.0).clamp(0.0, 1.0),
        (b[1] + b[3] / 2.0).clamp(0.0, 1.0),
    ]
}

/// Runs the model in double precision and collects the overlay geometry.
pub fn compute_overlay(img: &Image, cfg: &ModelConfig, params: &ParamStore<f32>, opts: &VisualizeOptions) -> Result<Overlay> {
    let params = params.cast::<f64>();
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = run_pipeline(img, cfg, &bound, ForwardOptions::default())?;
    let sampled = out
        .stages
        .iter()
        .rev()
        .find_map(|s| s.sampled.as_ref())
        .ok_or_else(|| Error::Config("this model has no sampling stage to visualize".into()))?;
    let m = cfg.keypoints;
    let regions = sampled.region_boxes.value().data().chunks(4).map(corners).collect();
    let keypoints = sampled.keypoints.value().data().chunks(2).map(|p| (p[0], p[1])).collect();
    let weights = sampled.scale_weights.value().data().chunks(cfg.scales).map(<[f64]>::to_vec).collect();
    let last = out.last();
    let dets = detections_from_outputs(&last.class_logits.to_tensor(), &last.boxes.to_tensor(), opts.max_detections)?;
    let detections = dets
        .iter()
        .filter(|d| d.score >= opts.score_threshold)
        .map(|d| (corners(&d.bbox), d.class, d.score))
        .collect();
    Ok(Overlay {
        regions,
        keypoints,
        weights,
        keypoints_per_region: m,
        detections,
    })
}

fn png_base64(img: &Image) -> Result<String> {
    let rgb: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut png = Vec::new();
    PngEncoder::new(&mut png)
        .write_image(&rgb, img.width() as u32, img.height() as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("PNG encoding failed: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

fn argmax(w: &[f64]) -> usize {
    w.iter().enumerate().fold(0, |best, (i, &v)| if v > w[best] { i } else { best })
}

/// Renders `overlay` on top of `img`. Coordinates are printed with two
/// decimals, so output bytes depend only on the inputs.
pub fn render_svg(img: &Image, overlay: &Overlay, opts: &VisualizeOptions) -> Result<String> {
    let (w, h) = (img.width() as f64 * opts.zoom, img.height() as f64 * opts.zoom);
    let mut s = String::new();
    let px = |v: f64, side: f64| format!("{:.2}", v * side);
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#).unwrap();
    writeln!(
        s,
        r#"<image x="0" y="0" width="{w:.0}" height="{h:.0}" style="image-rendering:pixelated" href="data:image/png;base64,{}"/>"#,
        png_base64(img)?
    )
    .unwrap();

    s.push_str("<g class=\"detections\" fill=\"none\" stroke=\"#ffffff\" stroke-dasharray=\"6 3\" stroke-width=\"1.5\">\n");
    for (b, class, score) in &overlay.detections {
        let name = CLASS_NAMES.get(*class).copied().unwrap_or("object");
        writeln!(
            s,
            r#"<rect class="detection" x="{}" y="{}" width="{}" height="{}"><title>{name} {score:.3}</title></rect>"#,
            px(b[0], w),
            px(b[1], h),
            px(b[2] - b[0], w),
            px(b[3] - b[1], h)
        )
        .unwrap();
    }
    s.push_str("</g>\n");

    s.push_str("<g class=\"regions\" fill=\"none\" stroke=\"#ffff00\" stroke-width=\"2\">\n");
    for (k, b) in overlay.regions.iter().enumerate() {
        writeln!(
            s,
            r#"<rect class="region" data-region="{k}" x="{}" y="{}" width="{}" height="{}"/>"#,
            px(b[0], w),
            px(b[1], h),
            px(b[2] - b[0], w),
            px(b[3] - b[1], h)
        )
        .unwrap();
    }
    s.push_str("</g>\n");

    s.push_str("<g class=\"keypoints\" stroke=\"#000000\" stroke-width=\"0.5\">\n");
    for (i, (&(x, y), wts)) in overlay.keypoints.iter().zip(&overlay.weights).enumerate() {
        let region = i / overlay.keypoints_per_region;
        let level = argmax(wts);
        writeln!(
            s,
            r#"<circle class="keypoint" data-region="{region}" data-scale="{level}" cx="{}" cy="{}" r="3" fill="{}"/>"#,
            px(x, w),
            px(y, h),
            SCALE_COLORS[level % SCALE_COLORS.len()]
        )
        .unwrap();
    }
    s.push_str("</g>\n");

    // Bar glyph to the right of each keypoint: one 2-unit bar per scale,
    // 12 units tall at weight 1.
    s.push_str("<g class=\"scale-weights\">\n");
    for (i, (&(x, y), wts)) in overlay.keypoints.iter().zip(&overlay.weights).enumerate() {
        let region = i / overlay.keypoints_per_region;
        writeln!(s, r#"<g class="alpha" data-region="{region}">"#).unwrap();
        for (l, a) in wts.iter().enumerate() {
            let bh = 12.0 * a;
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="2" height="{bh:.2}" fill="{}"/>"#,
                x * w + 4.0 + 2.0 * l as f64,
                y * h - bh,
                SCALE_COLORS[l % SCALE_COLORS.len()]
            )
            .unwrap();
        }
        s.push_str("</g>\n");
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

/// Computes the overlay and renders it.
pub fn visualize(img: &Image, cfg: &ModelConfig, params: &ParamStore<f32>, opts: &VisualizeOptions) -> Result<String> {
    let overlay = compute_overlay(img, cfg, params, opts)?;
    render_svg(img, &overlay, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneOptions};
    use crate::imfa::{init_params, Ablation};

    fn attr(tag: &str, name: &str) -> f64 {
        let key = format!(" {name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        let end = start + tag[start..].find('"').unwrap();
        tag[start..end].parse().unwrap()
    }

    fn tags<'a>(svg: &'a str, prefix: &str) -> Vec<&'a str> {
        svg.lines().filter(|l| l.starts_with(prefix)).collect()
    }

    fn setup(seed: u64) -> (Image, ModelConfig, ParamStore<f32>) {
        let cfg = ModelConfig::default();
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let (img, _) = generate_scene(seed, &SceneOptions::default()).unwrap();
        (img, cfg, params)
    }

    #[test]
    fn glyph_counts_and_containment() {
        for seed in 0..5 {
            let (img, cfg, params) = setup(seed);
            let svg = visualize(&img, &cfg, &params, &VisualizeOptions::default()).unwrap();
            let regions = tags(&svg, "<rect class=\"region\"");
            let points = tags(&svg, "<circle class=\"keypoint\"");
            assert_eq!(regions.len(), cfg.regions());
            assert_eq!(points.len(), cfg.regions() * cfg.keypoints);
            assert_eq!(tags(&svg, "<g class=\"alpha\"").len(), points.len());
            for p in points {
                let k = attr(p, "data-region") as usize;
                let r = regions[k];
                let (x0, y0) = (attr(r, "x"), attr(r, "y"));
                let (x1, y1) = (x0 + attr(r, "width"), y0 + attr(r, "height"));
                let (cx, cy) = (attr(p, "cx"), attr(p, "cy"));
                // Two-decimal rounding of the corner plus the width.
                assert!(cx >= x0 - 0.011 && cx <= x1 + 0.011 && cy >= y0 - 0.011 && cy <= y1 + 0.011, "{p} outside {r}");
            }
        }
    }

    #[test]
    fn output_is_byte_identical() {
        let (img, cfg, params) = setup(3);
        let opts = VisualizeOptions::default();
        assert_eq!(visualize(&img, &cfg, &params, &opts).unwrap(), visualize(&img, &cfg, &params, &opts).unwrap());
    }

    #[test]
    fn models_without_sampling_are_rejected() {
        let cfg = ModelConfig {
            ablation: Ablation {
                iter_enc_only: true,
                ..Ablation::default()
            },
            ..ModelConfig::default()
        };
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let (img, _) = generate_scene(0, &SceneOptions::default()).unwrap();
        assert!(matches!(visualize(&img, &cfg, &params, &VisualizeOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn keypoint_color_follows_dominant_scale() {
        let (img, cfg, params) = setup(1);
        let opts = VisualizeOptions::default();
        let overlay = compute_overlay(&img, &cfg, &params, &opts).unwrap();
        let svg = render_svg(&img, &overlay, &opts).unwrap();
        for (p, w) in tags(&svg, "<circle class=\"keypoint\"").iter().zip(&overlay.weights) {
            let level = attr(p, "data-scale") as usize;
            assert!(w.iter().all(|&v| v <= w[level]));
            assert!(p.contains(SCALE_COLORS[level]));
        }
    }
}
