//! Post-processing and detection metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{anchor_permutation, decode, flip_image, iou, AnchorGrid, BoxCWH, FlipKind};
use crate::data::LabeledSample;
use crate::losses::{
    cls_consistency_total, loc_consistency_total, match_targets, supervised_loss, LossError,
    DEFAULT_NEG_THRESHOLD, DEFAULT_POS_THRESHOLD,
};
use crate::model::{forward, DetectorOutput, DetectorParams, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxCWH,
    pub class_id: usize,
    pub score: f64,
    /// Anchor that produced the detection; breaks score ties.
    pub anchor: usize,
}

/// One detection per anchor whose foreground probability reaches
/// `conf_threshold`. The class is the most likely foreground column.
pub fn decode_detections(out: &DetectorOutput, grid: &AnchorGrid, conf_threshold: f64) -> Vec<Detection> {
    let mut dets = Vec::new();
    for k in 0..out.num_anchors() {
        let score = out.foreground(k);
        if score < conf_threshold {
            continue;
        }
        let row = out.cls_row(k);
        let class_id = row[1..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
            .0;
        dets.push(Detection {
            bbox: decode(&out.delta(k), &grid.anchor(k)),
            class_id,
            score,
            anchor: k,
        });
    }
    dets
}

fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.anchor.cmp(&b.anchor))
}

/// Greedy class-aware non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Walks detections of all images in global score order and marks each as
/// a true positive when it claims a still-unmatched ground-truth box of its
/// class with IoU at least [`MATCH_IOU`]. Returns `(score, is_tp)` in
/// ranking order.
fn rank_and_match(dets: &[Vec<Detection>], gts: &[Vec<(usize, BoxCWH)>], class_id: usize) -> Vec<(f64, bool)> {
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(ia.cmp(ib))
            .then(a.anchor.cmp(&b.anchor))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .into_iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            if let Some(g) = gts.get(img) {
                for (j, (c, b)) in g.iter().enumerate() {
                    if *c != class_id || used[img][j] {
                        continue;
                    }
                    let v = iou(&d.bbox, b);
                    if v >= MATCH_IOU && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

fn count_class(gts: &[Vec<(usize, BoxCWH)>], class_id: usize) -> usize {
    gts.iter().flatten().filter(|(c, _)| *c == class_id).count()
}

/// All-point interpolated AP for one class.
fn ap_for_class(dets: &[Vec<Detection>], gts: &[Vec<(usize, BoxCWH)>], class_id: usize) -> f64 {
    let npos = count_class(gts, class_id);
    if npos == 0 {
        return 0.0;
    }
    let ranked = rank_and_match(dets, gts, class_id);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, hit) in &ranked {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP at IoU 0.5, averaged over the classes present in the ground truth
/// (with a single foreground class this is that class's AP). Zero when the
/// ground truth is empty.
pub fn average_precision_50(dets: &[Vec<Detection>], gts: &[Vec<(usize, BoxCWH)>]) -> f64 {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|(c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| ap_for_class(dets, gts, c)).sum::<f64>() / classes.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// `F1 = 2PR/(P+R)` and `F2 = 5PR/(4P+R)`, zero on a zero denominator.
pub fn f_scores(precision: f64, recall: f64) -> (f64, f64) {
    let f = |beta2: f64| {
        let den = beta2 * precision + recall;
        if den > 0.0 {
            (1.0 + beta2) * precision * recall / den
        } else {
            0.0
        }
    };
    (f(1.0), f(4.0))
}

pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let (f1, f2) = f_scores(precision, recall);
    Prf {
        precision,
        recall,
        f1,
        f2,
        tp,
        fp,
        fn_,
    }
}

/// Counts from greedy IoU matching over detections scoring at least
/// `conf_threshold`.
pub fn prf_at_threshold(dets: &[Vec<Detection>], gts: &[Vec<(usize, BoxCWH)>], conf_threshold: f64) -> Prf {
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|ds| ds.iter().filter(|d| d.score >= conf_threshold).copied().collect())
        .collect();
    let mut classes: Vec<usize> = gts.iter().flatten().map(|(c, _)| *c).chain(kept.iter().flatten().map(|d| d.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    let (mut tp, mut fp) = (0, 0);
    for &c in &classes {
        for (_, hit) in rank_and_match(&kept, gts, c) {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let total: usize = gts.iter().map(Vec::len).sum();
    prf_from_counts(tp, fp, total - tp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

/// Metrics of one evaluation pass.
///
/// `loss_sup` is the mean supervised loss over the split. The two
/// consistency fields measure how far the evaluated model is from being
/// flip-equivariant: the mean over images and the three flips of the
/// consistency terms between its outputs on `I` and on `flip(I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub f1: f64,
    pub f2: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub loss_sup: f64,
    pub loss_con_loc: f64,
    pub loss_con_cls: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

/// Detections after thresholding and NMS for every sample.
pub fn predict(params: &DetectorParams, samples: &[LabeledSample], cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>, EvalError> {
    let grid = params.arch.grid();
    samples
        .iter()
        .map(|s| {
            let out = forward(params, &s.image, false)?;
            Ok(nms(&decode_detections(&out, &grid, cfg.conf_threshold), cfg.nms_iou))
        })
        .collect()
}

/// Runs the model on every sample without augmentation and computes all
/// metrics. Deterministic; aggregation follows sample order.
pub fn evaluate(params: &DetectorParams, samples: &[LabeledSample], cfg: &EvalConfig) -> Result<MetricsReport, EvalError> {
    let grid = params.arch.grid();
    let perms: Vec<_> = FlipKind::ALL.iter().map(|&k| (k, anchor_permutation(&grid, k))).collect();
    let mask = vec![true; grid.num_anchors()];
    let mut dets = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let (mut sup, mut con_loc, mut con_cls) = (0.0, 0.0, 0.0);
    for s in samples {
        let out = forward(params, &s.image, false)?;
        let targets = match_targets(&grid, &s.boxes, DEFAULT_POS_THRESHOLD, DEFAULT_NEG_THRESHOLD)
            ?;
        sup += supervised_loss(&out, &targets)?;
        for (kind, perm) in &perms {
            let flipped = forward(params, &flip_image(&s.image, *kind), false)?;
            con_loc += loc_consistency_total(&out, &flipped, perm, *kind, &mask)?;
            con_cls += cls_consistency_total(&out, &flipped, perm, &mask)?;
        }
        dets.push(nms(&decode_detections(&out, &grid, cfg.conf_threshold), cfg.nms_iou));
        gts.push(s.boxes.clone());
    }
    let n = samples.len().max(1) as f64;
    let prf = prf_at_threshold(&dets, &gts, cfg.conf_threshold);
    Ok(MetricsReport {
        precision: prf.precision,
        recall: prf.recall,
        map50: average_precision_50(&dets, &gts),
        f1: prf.f1,
        f2: prf.f2,
        tp: prf.tp,
        fp: prf.fp,
        fn_: prf.fn_,
        loss_sup: sup / n,
        loss_con_loc: con_loc / (3.0 * n),
        loss_con_cls: con_cls / (3.0 * n),
        conf_threshold: cfg.conf_threshold,
        nms_iou: cfg.nms_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64, anchor: usize) -> Detection {
        Detection {
            bbox: BoxCWH::new(cx, cy, w, h),
            class_id: 0,
            score,
            anchor,
        }
    }

    #[test]
    fn reference_f_scores() {
        let (f1, f2) = f_scores(0.575, 0.453);
        assert!((f1 - 0.507).abs() <= 0.001, "{f1}");
        assert!((f2 - 0.473).abs() <= 0.001, "{f2}");
        assert_eq!(f_scores(0.5, 0.5), (0.5, 0.5));
        assert_eq!(f_scores(0.0, 0.0), (0.0, 0.0));
        let (f1, f2) = f_scores(0.8, 0.4);
        assert!(f2 < f1);
        let (f1, f2) = f_scores(0.4, 0.8);
        assert!(f2 > f1);
    }

    #[test]
    fn zero_detections() {
        let gts = vec![vec![(0, BoxCWH::new(10.0, 10.0, 8.0, 8.0))]];
        let prf = prf_at_threshold(&[vec![]], &gts, 0.25);
        assert_eq!((prf.precision, prf.recall, prf.f1, prf.f2), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(prf.fn_, 1);
        assert_eq!(average_precision_50(&[vec![]], &gts), 0.0);
    }

    #[test]
    fn uniform_head_below_threshold() {
        let mut st = init_params(3, 1, 32).unwrap();
        for t in &mut st.student.tensors[6..] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let grid = st.student.arch.grid();
        let img = crate::autodiff::Tensor::full(&[3, 32, 32], 0.3);
        let out = forward(&st.student, &img, false).unwrap();
        assert!(decode_detections(&out, &grid, 0.6).is_empty());
        let all = decode_detections(&out, &grid, 0.0);
        assert_eq!(all.len(), grid.num_anchors());
        for (k, d) in all.iter().enumerate() {
            assert!((d.score - 0.5).abs() < 1e-12);
            assert_eq!(d.bbox, grid.anchor(k));
        }
    }

    #[test]
    fn nms_basics() {
        let a = det(10.0, 10.0, 8.0, 8.0, 0.9, 0);
        let b = det(10.0, 10.0, 8.0, 8.0, 0.8, 1);
        let kept = nms(&[b, a], 0.45);
        assert_eq!(kept, vec![a]);
        let far = det(40.0, 40.0, 8.0, 8.0, 0.7, 2);
        assert_eq!(nms(&[a, far], 0.45).len(), 2);
        // Equal scores: lower anchor index wins.
        let c = det(10.0, 10.0, 8.0, 8.0, 0.9, 5);
        assert_eq!(nms(&[c, a], 0.45), vec![a]);
        // Different classes never suppress each other.
        let other = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[a, other], 0.45).len(), 2);
    }

    #[test]
    fn ap_two_detections_one_gt() {
        let gt = BoxCWH::new(20.0, 20.0, 10.0, 10.0);
        // IoU 0.6 and 0.7 with the gt, via width changes.
        let d1 = det(20.0, 20.0, 10.0 / 0.6, 10.0, 0.9, 0);
        let d2 = det(20.0, 20.0, 10.0 / 0.7, 10.0, 0.8, 1);
        assert!((iou(&d1.bbox, &gt) - 0.6).abs() < 1e-12);
        let dets = vec![vec![d1, d2]];
        let gts = vec![vec![(0, gt)]];
        assert_eq!(average_precision_50(&dets, &gts), 1.0);
        let prf = prf_at_threshold(&dets, &gts, 0.0);
        assert_eq!((prf.tp, prf.fp, prf.fn_), (1, 1, 0));
    }

    #[test]
    fn ap_hand_built_curve() {
        // Ranking TP, FP, TP over 3 gts: recall steps 1/3 at P=1 and 2/3 at P=2/3.
        let gts: Vec<Vec<(usize, BoxCWH)>> = (0..3).map(|i| vec![(0, BoxCWH::new(10.0 + 20.0 * i as f64, 10.0, 8.0, 8.0))]).collect();
        let dets = vec![
            vec![det(10.0, 10.0, 8.0, 8.0, 0.9, 0)],
            vec![det(50.0, 50.0, 8.0, 8.0, 0.8, 0), det(30.0, 10.0, 8.0, 8.0, 0.7, 1)],
            vec![],
        ];
        let ap = average_precision_50(&dets, &gts);
        assert!((ap - (1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0))).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<Vec<(usize, BoxCWH)>> = vec![
            vec![(0, BoxCWH::new(10.0, 12.0, 8.0, 9.0)), (0, BoxCWH::new(40.0, 30.0, 12.0, 7.0))],
            vec![],
            vec![(0, BoxCWH::new(33.0, 33.0, 20.0, 20.0))],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().enumerate().map(|(k, (_, b))| Detection { bbox: *b, class_id: 0, score: 1.0, anchor: k }).collect())
            .collect();
        let prf = prf_at_threshold(&dets, &gts, 0.25);
        assert_eq!((prf.precision, prf.recall, prf.f1, prf.f2), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(average_precision_50(&dets, &gts), 1.0);
    }

    #[test]
    fn empty_label_images_only_add_false_positives() {
        let gts = vec![vec![], vec![(0, BoxCWH::new(10.0, 10.0, 8.0, 8.0))]];
        let dets = vec![vec![det(10.0, 10.0, 8.0, 8.0, 0.9, 0)], vec![det(10.0, 10.0, 8.0, 8.0, 0.8, 0)]];
        let prf = prf_at_threshold(&dets, &gts, 0.25);
        assert_eq!((prf.tp, prf.fp, prf.fn_), (1, 1, 0));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let st = init_params(2, 1, 32).unwrap();
        let samples: Vec<LabeledSample> = (0..3)
            .map(|i| {
                let cfg = crate::data::DomainConfig {
                    polyp_radius: (3.0, 6.0),
                    ..crate::data::DomainConfig::domain_a(32)
                };
                let (rgb, boxes) = crate::data::render(&cfg, i);
                LabeledSample {
                    id: format!("{i}"),
                    image: crate::data::rgb8_to_tensor(&rgb, 32, 32),
                    boxes,
                }
            })
            .collect();
        let a = evaluate(&st.student, &samples, &EvalConfig::default()).unwrap();
        let b = evaluate(&st.student, &samples, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);
        for v in [a.precision, a.recall, a.map50, a.f1, a.f2] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(a.loss_sup > 0.0 && a.loss_con_loc >= 0.0 && a.loss_con_cls >= 0.0);
    }

    fn arb_det() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
        (0.0..60.0f64, 0.0..60.0f64, 2.0..20.0f64, 2.0..20.0f64, 0.0..1.0f64)
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_and_sorted(raw in prop::collection::vec(arb_det(), 0..30)) {
            let dets: Vec<Detection> = raw.iter().enumerate().map(|(k, &(x, y, w, h, s))| det(x, y, w, h, s, k)).collect();
            let once = nms(&dets, 0.45);
            prop_assert_eq!(nms(&once, 0.45), once.clone());
            prop_assert!(once.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(once.iter().all(|d| dets.contains(d)));
        }

        #[test]
        fn ap_invariant_under_monotone_rescoring(
            raw in prop::collection::vec(arb_det(), 1..25),
            gt_raw in prop::collection::vec(arb_det(), 1..6),
        ) {
            let dets: Vec<Detection> = raw.iter().enumerate().map(|(k, &(x, y, w, h, s))| det(x, y, w, h, s, k)).collect();
            let gts = vec![gt_raw.iter().map(|&(x, y, w, h, _)| (0, BoxCWH::new(x, y, w, h))).collect::<Vec<_>>()];
            let warped: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
            let a = average_precision_50(&[dets], &gts);
            let b = average_precision_50(&[warped], &gts);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn raising_threshold_never_adds(seed in 0u64..50, lo in 0.0..1.0f64, hi in 0.0..1.0f64) {
            let st = init_params(seed, 1, 16).unwrap();
            let grid = st.student.arch.grid();
            let img = crate::autodiff::Tensor::full(&[3, 16, 16], (seed as f64) / 50.0);
            let out = forward(&st.student, &img, false).unwrap();
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let a = decode_detections(&out, &grid, lo);
            let b = decode_detections(&out, &grid, hi);
            prop_assert!(b.len() <= a.len());
            prop_assert!(b.iter().all(|d| a.contains(d)));
        }
    }
}
