//! COCO-style average precision with greedy matching and exact synthetic
//! labels.

use serde::{Deserialize, Serialize};

use crate::data::{ScaleBand, SceneAnnotation};
use crate::error::{Error, Result};
use crate::matching::iou;
use crate::tensor::{Real, Tensor};

/// Detections kept per image.
pub const MAX_DETECTIONS: usize = 100;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    pub class: usize,
    pub score: f64,
}

/// Scores every `(query, class)` pair by its sigmoid probability and keeps
/// the best `max` of them, ties broken by query then class index.
pub fn detections_from_outputs<T: Real>(logits: &Tensor<T>, boxes: &Tensor<T>, max: usize) -> Result<Vec<Detection>> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if boxes.shape() != [n, 4] {
        return Err(Error::shape("detections", logits.shape(), boxes.shape()));
    }
    let mut all = Vec::with_capacity(n * c);
    for q in 0..n {
        let b = boxes.row(q);
        let bbox = [0, 1, 2, 3].map(|k| b[k].to_f64().unwrap());
        for (class, &l) in logits.row(q).iter().enumerate() {
            let l = l.to_f64().unwrap();
            all.push(Detection {
                bbox,
                class,
                score: 1.0 / (1.0 + (-l).exp()),
            });
        }
    }
    // Stable sort keeps (query, class) order among equal scores.
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(max);
    Ok(all)
}

/// Turns ground truth into confidence-1 detections.
pub fn ground_truth_detections(ann: &SceneAnnotation) -> Vec<Detection> {
    ann.boxes
        .iter()
        .zip(&ann.classes)
        .map(|(&bbox, &class)| Detection { bbox, class, score: 1.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over IoU 0.50:0.95 and over classes that have ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the band.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Per-class AP over 0.50:0.95, `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub images: usize,
    pub ground_truth: usize,
}

/// All-point interpolated area under the precision/recall curve.
/// `hits` lists true/false positive flags in descending score order.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope: running max from the right.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}

/// AP of one class at one IoU threshold. With `band`, ground truth outside
/// the band is ignored: detections matched to it, and unmatched detections
/// whose own box is outside the band, count neither way.
/// Returns `None` when no ground truth of the class is in range.
fn class_ap(dets: &[Vec<Detection>], gts: &[SceneAnnotation], class: usize, thr: f64, band: Option<ScaleBand>) -> Option<f64> {
    let in_band = |b: &[f64; 4]| band.is_none_or(|s| ScaleBand::of_box(b) == s);
    let mut num_gt = 0;
    let mut ordered: Vec<(f64, usize, usize)> = Vec::new();
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        num_gt += g.boxes.iter().zip(&g.classes).filter(|(b, &c)| c == class && in_band(b)).count();
        ordered.extend(d.iter().enumerate().filter(|(_, x)| x.class == class).map(|(k, x)| (x.score, img, k)));
    }
    if num_gt == 0 {
        return None;
    }
    // Highest confidence first; ties by image, then detection order.
    ordered.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let mut hits = Vec::with_capacity(ordered.len());
    for &(_, img, k) in &ordered {
        let det = &dets[img][k];
        let g = &gts[img];
        // Best unmatched candidate, preferring in-band ground truth.
        let mut best: Option<(bool, f64, usize)> = None;
        for (j, (b, &c)) in g.boxes.iter().zip(&g.classes).enumerate() {
            if c != class || taken[img][j] {
                continue;
            }
            let o = iou(&det.bbox, b);
            if o < thr {
                continue;
            }
            let key = (in_band(b), o, j);
            let better = match best {
                None => true,
                Some((v, bo, _)) => (key.0 && !v) || (key.0 == v && o > bo),
            };
            if better {
                best = Some(key);
            }
        }
        match best {
            Some((valid, _, j)) => {
                taken[img][j] = true;
                if valid {
                    hits.push(true);
                }
            }
            None if in_band(&det.bbox) => hits.push(false),
            None => {}
        }
    }
    Some(average_precision(&hits, num_gt))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// AP over classes with ground truth, at each threshold in `thrs`, averaged.
fn band_ap(dets: &[Vec<Detection>], gts: &[SceneAnnotation], classes: usize, thrs: &[f64], band: Option<ScaleBand>) -> (Option<f64>, Vec<Option<f64>>) {
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let aps: Vec<Option<f64>> = thrs.iter().map(|&t| class_ap(dets, gts, c, t, band)).collect();
            aps[0]?;
            mean(aps.into_iter().flatten())
        })
        .collect();
    (mean(per_class.iter().flatten().copied()), per_class)
}

/// Evaluates per-image detections against ground truth for `classes`
/// classes. Detections beyond [`MAX_DETECTIONS`] per image are dropped
/// (lowest scores first).
pub fn evaluate(dets: &[Vec<Detection>], gts: &[SceneAnnotation], classes: usize) -> Result<ApReport> {
    if dets.len() != gts.len() {
        return Err(Error::Contract(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    for g in gts {
        if let Some(&c) = g.classes.iter().find(|&&c| c >= classes) {
            return Err(Error::Config(format!("ground-truth class {c} but the model has {classes} classes")));
        }
    }
    let dets: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(MAX_DETECTIONS);
            d
        })
        .collect();
    let thrs = iou_thresholds();
    let (ap, per_class) = band_ap(&dets, gts, classes, &thrs, None);
    Ok(ApReport {
        ap: ap.unwrap_or(0.0),
        ap50: band_ap(&dets, gts, classes, &[0.5], None).0.unwrap_or(0.0),
        ap75: band_ap(&dets, gts, classes, &[0.75], None).0.unwrap_or(0.0),
        ap_small: band_ap(&dets, gts, classes, &thrs, Some(ScaleBand::Small)).0,
        ap_medium: band_ap(&dets, gts, classes, &thrs, Some(ScaleBand::Medium)).0,
        ap_large: band_ap(&dets, gts, classes, &thrs, Some(ScaleBand::Large)).0,
        per_class,
        images: gts.len(),
        ground_truth: gts.iter().map(SceneAnnotation::len).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(boxes: &[[f64; 4]], classes: &[usize]) -> SceneAnnotation {
        SceneAnnotation {
            boxes: boxes.to_vec(),
            classes: classes.to_vec(),
        }
    }

    fn det(bbox: [f64; 4], class: usize, score: f64) -> Detection {
        Detection { bbox, class, score }
    }

    fn scenes() -> Vec<SceneAnnotation> {
        vec![
            ann(&[[0.2, 0.2, 0.05, 0.05], [0.6, 0.6, 0.2, 0.2]], &[0, 1]),
            ann(&[[0.5, 0.5, 0.5, 0.5]], &[2]),
            ann(&[], &[]),
        ]
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = scenes();
        let dets: Vec<_> = gts.iter().map(ground_truth_detections).collect();
        let r = evaluate(&dets, &gts, 3).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ap50, 1.0);
        assert_eq!((r.ap_small, r.ap_medium, r.ap_large), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(r.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = scenes();
        let r = evaluate(&vec![Vec::new(); 3], &gts, 3).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.ap_small, Some(0.0));
    }

    #[test]
    fn hand_worked_precision_recall_curve() {
        // Two objects of one class; three detections in score order:
        // 0.9 hits object A, 0.8 misses everything, 0.7 hits object B.
        // PR points: (0.5, 1), (0.5, 1/2), (1, 2/3). Envelope precision
        // at recall 0.5 is 1, at recall 1 is 2/3: AP = 0.5 + 0.5·2/3.
        let a = [0.25, 0.25, 0.2, 0.2];
        let b = [0.75, 0.75, 0.2, 0.2];
        let gts = vec![ann(&[a, b], &[0, 0])];
        let dets = vec![vec![det(b, 0, 0.7), det(a, 0, 0.9), det([0.5, 0.5, 0.1, 0.1], 0, 0.8)]];
        let r = evaluate(&dets, &gts, 1).unwrap();
        let want = 0.5 + 0.5 * (2.0 / 3.0);
        assert!((r.ap - want).abs() < 1e-9, "{}", r.ap);
        assert!((r.ap50 - want).abs() < 1e-9);
    }

    #[test]
    fn iou_threshold_sweep_counts_partial_overlap() {
        // Shifting a 0.4 box by 0.08 gives IoU 0.128/0.192 = 2/3: a hit
        // for thresholds 0.50..0.65 (4 of 10), a miss above.
        let gts = vec![ann(&[[0.5, 0.5, 0.4, 0.4]], &[0])];
        let dets = vec![vec![det([0.58, 0.5, 0.4, 0.4], 0, 0.9)]];
        let o = iou(&dets[0][0].bbox, &gts[0].boxes[0]);
        assert!((o - 2.0 / 3.0).abs() < 1e-12);
        let r = evaluate(&dets, &gts, 1).unwrap();
        assert!((r.ap - 0.4).abs() < 1e-12);
        assert_eq!(r.ap75, 0.0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let g = [0.5, 0.5, 0.3, 0.3];
        let gts = vec![ann(&[g], &[0])];
        let dets = vec![vec![det(g, 0, 0.9), det(g, 0, 0.8)]];
        // The duplicate comes after full recall, so it costs nothing.
        assert_eq!(evaluate(&dets, &gts, 1).unwrap().ap, 1.0);
        // A false positive ranked ahead of the hit halves precision.
        let dets = vec![vec![det([0.1, 0.1, 0.1, 0.1], 0, 0.95), det(g, 0, 0.9)]];
        assert_eq!(evaluate(&dets, &gts, 1).unwrap().ap, 0.5);
    }

    #[test]
    fn wrong_class_never_matches() {
        let g = [0.5, 0.5, 0.3, 0.3];
        let gts = vec![ann(&[g], &[0])];
        let r = evaluate(&[vec![det(g, 1, 0.9)]], &gts, 2).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.per_class, vec![Some(0.0), None]);
    }

    #[test]
    fn band_evaluation_ignores_other_sizes() {
        let small = [0.2, 0.2, 0.05, 0.05];
        let large = [0.6, 0.6, 0.5, 0.5];
        let gts = vec![ann(&[small, large], &[0, 0])];
        // Only the large object is found.
        let r = evaluate(&[vec![det(large, 0, 0.9)]], &gts, 1).unwrap();
        assert_eq!(r.ap_large, Some(1.0));
        assert_eq!(r.ap_small, Some(0.0));
        assert_eq!(r.ap_medium, None);
        assert_eq!(r.ap, 0.5);
        // An unmatched large false positive does not hurt small-object AP.
        let r = evaluate(&[vec![det([0.3, 0.7, 0.4, 0.4], 0, 0.95), det(small, 0, 0.9)]], &gts, 1).unwrap();
        assert_eq!(r.ap_small, Some(1.0));
    }

    #[test]
    fn class_out_of_range_is_a_config_error() {
        let gts = scenes();
        assert!(matches!(evaluate(&vec![Vec::new(); 3], &gts, 2), Err(Error::Config(_))));
    }

    #[test]
    fn top_detections_from_model_outputs() {
        let logits = Tensor::<f64>::from_rows(&[vec![0.0, 2.0], vec![2.0, -1.0], vec![-3.0, 1.0]]).unwrap();
        let boxes = Tensor::<f64>::from_fn(vec![3, 4], |i| 0.1 + 0.01 * i as f64);
        let d = detections_from_outputs(&logits, &boxes, 3).unwrap();
        let picked: Vec<(usize, f64)> = d.iter().map(|x| (x.class, x.bbox[0])).collect();
        // Scores: q0c1 = q1c0 = σ(2) (tie, query order), then q2c1 = σ(1).
        assert_eq!(picked, vec![(1, 0.1), (0, 0.14), (1, 0.18)]);
        assert!((d[0].score - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn precision_envelope_is_monotone() {
        // F T F T: points (0, 0), (0.5, 0.5), (0.5, 1/3), (1, 0.5).
        let ap = average_precision(&[false, true, false, true], 2);
        assert!((ap - (0.5 * 0.5 + 0.5 * 0.5)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
    }
}
