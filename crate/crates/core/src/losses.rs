//! Loss terms: the supervised detection loss, the flip-consistency losses on
//! box deltas (squared error after sign correction) and on class
//! distributions (Jensen-Shannon divergence), and their combination.
//!
//! Each consistency term pairs student anchor `k` on image `I` with teacher
//! anchor `perm[k]` on the flipped image. Teacher values are plain arrays:
//! they never enter the student's tape.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::boxgeom::{encode, flip_delta, iou, AnchorGrid, AnchorPermutation, BoxCWH, DeltaBox, FlipKind};
use crate::model::DetectorOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("invalid thresholds: need 0 <= neg ({neg}) <= pos ({pos}) <= 1")]
    InvalidThresholds { pos: f64, neg: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Values of every objective term for one step or sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub con_loc: f64,
    pub con_cls: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Per-anchor supervision built from ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedTargets {
    pub assignment: Vec<Assignment>,
    /// Regression target per anchor; zero for non-positives.
    pub deltas: Vec<DeltaBox>,
    /// Target column in the class distribution (0 = background).
    pub classes: Vec<usize>,
}

impl MatchedTargets {
    pub fn num_positive(&self) -> usize {
        self.assignment
            .iter()
            .filter(|a| matches!(a, Assignment::Positive { .. }))
            .count()
    }
}

pub const DEFAULT_POS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NEG_THRESHOLD: f64 = 0.4;

/// IoU-based anchor assignment. `gt` holds `(class_id, box)` with class ids
/// starting at 0 for the first foreground class.
pub fn match_targets(
    grid: &AnchorGrid,
    gt: &[(usize, BoxCWH)],
    pos_threshold: f64,
    neg_threshold: f64,
) -> Result<MatchedTargets> {
    if !(0.0 <= neg_threshold && neg_threshold <= pos_threshold && pos_threshold <= 1.0) {
        return Err(LossError::InvalidThresholds {
            pos: pos_threshold,
            neg: neg_threshold,
        });
    }
    let anchors = grid.anchors();
    let k = anchors.len();
    let mut assignment = vec![Assignment::Negative; k];
    if !gt.is_empty() {
        let ious: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| gt.iter().map(|(_, b)| iou(a, b)).collect())
            .collect();
        for (a, row) in ious.iter().enumerate() {
            // First maximum wins, so ties go to the lowest gt index.
            let (best, best_iou) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
            assignment[a] = if best_iou >= pos_threshold {
                Assignment::Positive { gt: best }
            } else if best_iou < neg_threshold {
                Assignment::Negative
            } else {
                Assignment::Ignore
            };
        }
        for g in 0..gt.len() {
            let (best_anchor, best_iou) = (0..k)
                .map(|a| (a, ious[a][g]))
                .fold((0, f64::NEG_INFINITY), |acc, (a, v)| if v > acc.1 { (a, v) } else { acc });
            if best_iou > 0.0 {
                assignment[best_anchor] = Assignment::Positive { gt: g };
            }
        }
    }
    let mut deltas = vec![DeltaBox::default(); k];
    let mut classes = vec![0usize; k];
    for (a, asg) in assignment.iter().enumerate() {
        if let Assignment::Positive { gt: g } = asg {
            let (cls, b) = gt[*g];
            deltas[a] = encode(&b, &anchors[a]).map_err(|e| LossError::ShapeMismatch(e.to_string()))?;
            classes[a] = cls + 1;
        }
    }
    Ok(MatchedTargets {
        assignment,
        deltas,
        classes,
    })
}

/// Cross-entropy over positives and negatives (mean over those anchors)
/// plus smooth-L1 on positive deltas (summed over the four components,
/// mean over positives). `log_probs` is `K x (C + 1)`, `loc` is `K x 4`.
pub fn supervised_loss_var<'t>(
    log_probs: Var<'t>,
    loc: Var<'t>,
    targets: &MatchedTargets,
) -> Result<Var<'t>> {
    let tape = log_probs.tape();
    let shape = log_probs.shape();
    let k = targets.assignment.len();
    if shape.len() != 2 || shape[0] != k || loc.shape() != [k, 4] {
        return Err(LossError::ShapeMismatch(format!(
            "outputs {shape:?} / {:?} vs {k} targets",
            loc.shape()
        )));
    }
    let width = shape[1];
    let mut ce_idx = Vec::new();
    let mut pos = Vec::new();
    for (a, asg) in targets.assignment.iter().enumerate() {
        match asg {
            Assignment::Ignore => {}
            Assignment::Negative => ce_idx.push(a * width),
            Assignment::Positive { .. } => {
                ce_idx.push(a * width + targets.classes[a]);
                pos.push(a);
            }
        }
    }
    if ce_idx.is_empty() {
        warn!("supervised loss: every anchor is ignored");
        return Ok(tape.scalar(0.0));
    }
    let n = ce_idx.len();
    let ce = log_probs
        .gather(&ce_idx, &[n])?
        .sum()?
        .scale(-1.0 / n as f64)?;
    if pos.is_empty() {
        return Ok(ce);
    }
    let loc_idx: Vec<usize> = pos.iter().flat_map(|&a| (0..4).map(move |d| a * 4 + d)).collect();
    let target: Vec<f64> = pos.iter().flat_map(|&a| targets.deltas[a].to_array()).collect();
    let target = tape.constant(Tensor::new(vec![pos.len(), 4], target)?);
    let reg = loc
        .gather(&loc_idx, &[pos.len(), 4])?
        .sub(target)?
        .smooth_l1()?
        .sum()?
        .scale(1.0 / pos.len() as f64)?;
    Ok(ce.add(reg)?)
}

/// [`supervised_loss_var`] evaluated on a plain output.
pub fn supervised_loss(out: &DetectorOutput, targets: &MatchedTargets) -> Result<f64> {
    let tape = Tape::new();
    let k = out.num_anchors();
    let lp = tape.constant(Tensor::new(
        vec![k, out.dist_width],
        out.cls.iter().map(|p| p.ln()).collect(),
    )?);
    let loc = tape.constant(Tensor::new(vec![k, 4], out.loc.clone())?);
    Ok(supervised_loss_var(lp, loc, targets)?.item())
}

/// `1/4 * sum_d (s_d - t'_d)^2` where `t'` is the teacher delta mapped back
/// through the flip (mirrored center offsets negated).
pub fn loc_consistency_pair(student: &DeltaBox, teacher: &DeltaBox, kind: FlipKind) -> f64 {
    let t = flip_delta(teacher, kind).to_array();
    let s = student.to_array();
    0.25 * s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn check_pairing(k_student: usize, k_teacher: usize, perm: &AnchorPermutation, mask: &[bool]) -> Result<()> {
    if k_student != k_teacher || perm.len() != k_student || mask.len() != k_student {
        return Err(LossError::ShapeMismatch(format!(
            "student {k_student}, teacher {k_teacher}, permutation {}, mask {}",
            perm.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Mean of [`loc_consistency_pair`] over masked anchors `k`, pairing the
/// student's `k` with the teacher's `perm[k]`.
pub fn loc_consistency_total(
    student: &DetectorOutput,
    teacher: &DetectorOutput,
    perm: &AnchorPermutation,
    kind: FlipKind,
    mask: &[bool],
) -> Result<f64> {
    check_pairing(student.num_anchors(), teacher.num_anchors(), perm, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        sum += loc_consistency_pair(&student.delta(k), &teacher.delta(perm.get(k)), kind);
        n += 1;
    }
    if n == 0 {
        warn!("localization consistency: empty anchor mask");
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Taped localization consistency; gradient flows into `student_loc` only.
pub fn loc_consistency_var<'t>(
    student_loc: Var<'t>,
    teacher: &DetectorOutput,
    perm: &AnchorPermutation,
    kind: FlipKind,
    mask: &[bool],
) -> Result<Var<'t>> {
    let tape = student_loc.tape();
    let k = student_loc.shape()[0];
    check_pairing(k, teacher.num_anchors(), perm, mask)?;
    let sel: Vec<usize> = (0..k).filter(|&a| mask[a]).collect();
    if sel.is_empty() {
        warn!("localization consistency: empty anchor mask");
        return Ok(tape.scalar(0.0));
    }
    let idx: Vec<usize> = sel.iter().flat_map(|&a| (0..4).map(move |d| a * 4 + d)).collect();
    let target: Vec<f64> = sel
        .iter()
        .flat_map(|&a| flip_delta(&teacher.delta(perm.get(a)), kind).to_array())
        .collect();
    let target = tape.constant(Tensor::new(vec![sel.len(), 4], target)?);
    Ok(student_loc
        .gather(&idx, &[sel.len(), 4])?
        .sub(target)?
        .square()?
        .sum()?
        .scale(0.25 / sel.len() as f64)?)
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(LossError::NotADistribution(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(LossError::NotADistribution(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats: `KL(p||m)/2 + KL(q||m)/2` with
/// `m = (p + q) / 2`. Zero-probability entries contribute nothing.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LossError::ShapeMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let kl_half = |a: f64, m: f64| if a > 0.0 { 0.5 * a * (a / m).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            kl_half(a, m) + kl_half(b, m)
        })
        .sum();
    Ok(js.max(0.0))
}

/// Mean JSD between student row `k` and teacher row `perm[k]` over masked
/// anchors.
pub fn cls_consistency_total(
    student: &DetectorOutput,
    teacher: &DetectorOutput,
    perm: &AnchorPermutation,
    mask: &[bool],
) -> Result<f64> {
    check_pairing(student.num_anchors(), teacher.num_anchors(), perm, mask)?;
    if student.dist_width != teacher.dist_width {
        return Err(LossError::ShapeMismatch("class distribution widths differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        sum += jsd(student.cls_row(k), teacher.cls_row(perm.get(k)))?;
        n += 1;
    }
    if n == 0 {
        warn!("classification consistency: empty anchor mask");
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Taped classification consistency from student log-probabilities
/// (`K x (C + 1)`). With `m = (p + q) / 2`:
/// `JS = 1/2 sum p (log p - log m) + 1/2 sum q log q - 1/2 sum q log m`.
pub fn cls_consistency_var<'t>(
    student_log_probs: Var<'t>,
    teacher: &DetectorOutput,
    perm: &AnchorPermutation,
    mask: &[bool],
) -> Result<Var<'t>> {
    let tape = student_log_probs.tape();
    let shape = student_log_probs.shape();
    let (k, width) = (shape[0], shape[1]);
    check_pairing(k, teacher.num_anchors(), perm, mask)?;
    if width != teacher.dist_width {
        return Err(LossError::ShapeMismatch("class distribution widths differ".into()));
    }
    let sel: Vec<usize> = (0..k).filter(|&a| mask[a]).collect();
    if sel.is_empty() {
        warn!("classification consistency: empty anchor mask");
        return Ok(tape.scalar(0.0));
    }
    let n = sel.len();
    let idx: Vec<usize> = sel.iter().flat_map(|&a| (0..width).map(move |c| a * width + c)).collect();
    let q: Vec<f64> = sel.iter().flat_map(|&a| teacher.cls_row(perm.get(a)).to_vec()).collect();
    let q_entropy_term: f64 = q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let q = tape.constant(Tensor::new(vec![n, width], q)?);

    let log_p = student_log_probs.gather(&idx, &[n, width])?;
    let p = log_p.exp()?;
    let log_m = p.add(q)?.scale(0.5)?.log()?;
    let p_term = p.mul(log_p.sub(log_m)?)?.sum()?;
    let q_cross = q.mul(log_m)?.sum()?;
    let js_sum = p_term
        .sub(q_cross)?
        .add(tape.scalar(q_entropy_term))?
        .scale(0.5)?;
    Ok(js_sum.scale(1.0 / n as f64)?)
}

/// Sum of the two consistency terms.
pub fn consistency_total(con_loc: f64, con_cls: f64) -> f64 {
    con_loc + con_cls
}

/// `total = sup + weight * con`. A weight of 1 is the plain sum.
pub fn total_loss(sup: f64, con_loc: f64, con_cls: f64, consistency_weight: f64) -> LossBreakdown {
    let con = consistency_total(con_loc, con_cls);
    LossBreakdown {
        sup,
        con_loc,
        con_cls,
        con,
        total: sup + consistency_weight * con,
    }
}

/// Anchors whose teacher foreground probability (at the paired index) is at
/// least `threshold`; a threshold of 0 keeps every anchor.
pub fn confidence_mask(teacher: &DetectorOutput, perm: &AnchorPermutation, threshold: f64) -> Vec<bool> {
    (0..perm.len())
        .map(|k| threshold <= 0.0 || teacher.foreground(perm.get(k)) >= threshold)
        .collect()
}

/// The exact flip image of a student output: what a perfectly
/// flip-equivariant teacher would produce on the flipped input.
pub fn flipped_output(student: &DetectorOutput, perm: &AnchorPermutation, kind: FlipKind) -> DetectorOutput {
    let k = student.num_anchors();
    let w = student.dist_width;
    let mut cls = vec![0.0; student.cls.len()];
    let mut loc = vec![0.0; student.loc.len()];
    for a in 0..k {
        let b = perm.get(a);
        cls[b * w..(b + 1) * w].copy_from_slice(student.cls_row(a));
        loc[b * 4..b * 4 + 4].copy_from_slice(&flip_delta(&student.delta(a), kind).to_array());
    }
    DetectorOutput {
        dist_width: w,
        cls,
        loc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::boxgeom::anchor_permutation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn random_output(k: usize, width: usize, rng: &mut ChaCha8Rng) -> DetectorOutput {
        let mut cls = Vec::new();
        for _ in 0..k {
            let row: Vec<f64> = (0..width).map(|_| rng.gen_range(-3.0..3.0f64).exp()).collect();
            let s: f64 = row.iter().sum();
            cls.extend(row.iter().map(|v| v / s));
        }
        DetectorOutput {
            dist_width: width,
            cls,
            loc: (0..k * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Independent high-precision JSD: KL terms summed with compensated
    /// arithmetic from log2-scaled values.
    fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
        let mut total = 0.0f64;
        let mut comp = 0.0f64;
        for (&a, &b) in p.iter().zip(q) {
            let m = (a + b) / 2.0;
            for v in [a, b] {
                if v > 0.0 {
                    let term = 0.5 * v * (v.log2() - m.log2()) * LN_2;
                    let y = term - comp;
                    let t = total + y;
                    comp = (t - total) - y;
                    total = t;
                }
            }
        }
        total
    }

    #[test]
    fn loc_pair_examples() {
        let s = DeltaBox::new(0.2, -0.1, 0.3, 0.0);
        let t = DeltaBox::new(-0.2, -0.1, 0.3, 0.0);
        assert_eq!(loc_consistency_pair(&s, &t, FlipKind::Horizontal), 0.0);
        let v = loc_consistency_pair(&DeltaBox::new(0.2, 0.0, 0.0, 0.0), &DeltaBox::default(), FlipKind::Horizontal);
        assert!((v - 0.01).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (s, t) = (DeltaBox::from_slice(&a[..4]), DeltaBox::from_slice(&a[4..]));
            let negated = DeltaBox { dcx: -t.dcx, dcy: -t.dcy, ..t };
            // Identity flip is not a FlipKind; compare against the raw formula.
            let raw = 0.25
                * s.to_array()
                    .iter()
                    .zip(negated.to_array())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>();
            assert_eq!(loc_consistency_pair(&s, &t, FlipKind::Rotate180), raw);
        }
    }

    #[test]
    fn loc_total_is_a_mean() {
        let student = DetectorOutput {
            dist_width: 2,
            cls: vec![0.5; 4],
            loc: vec![0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2 * 3f64.sqrt(), 0.0],
        };
        let teacher = DetectorOutput {
            loc: vec![0.0; 8],
            ..student.clone()
        };
        let perm = AnchorPermutation::identity(2);
        let v = loc_consistency_total(&student, &teacher, &perm, FlipKind::Vertical, &[true, true]).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        assert_eq!(loc_consistency_total(&student, &teacher, &perm, FlipKind::Vertical, &[false, false]).unwrap(), 0.0);
        assert!(loc_consistency_total(&student, &teacher, &perm, FlipKind::Vertical, &[true]).is_err());
    }

    #[test]
    fn jsd_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-15);
        let v = jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        // 0.75 ln(4/3) + 0.25 ln(2/3) ... evaluated by the oracle.
        assert!((v - jsd_oracle(&[0.5, 0.5], &[1.0, 0.0])).abs() < 1e-15);
        assert!((v - 0.215_761_554_338_835_7).abs() < 1e-15);
        assert!(matches!(jsd(&[0.5, 0.6], &[1.0, 0.0]), Err(LossError::NotADistribution(_))));
        assert!(matches!(jsd(&[-0.5, 1.5], &[1.0, 0.0]), Err(LossError::NotADistribution(_))));
    }

    #[test]
    fn jsd_fuzz_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..10_000 {
            let width = 2 + i % 4;
            let dist = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..width).map(|_| rng.gen_range(0.0..1.0f64)).collect();
                if rng.gen_bool(0.2) {
                    v[0] = 0.0;
                }
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (dist(&mut rng), dist(&mut rng));
            let a = jsd(&p, &q).unwrap();
            assert_eq!(a, jsd(&q, &p).unwrap());
            assert!((0.0..=LN_2 + 1e-15).contains(&a));
            assert!((a - jsd_oracle(&p, &q)).abs() < 1e-12);
            assert!(jsd(&p, &p).unwrap() <= 1e-12);
            if p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-6) {
                assert!(a > 0.0);
            }
        }
    }

    #[test]
    fn cls_consistency_examples() {
        let s = DetectorOutput { dist_width: 2, cls: vec![1.0, 0.0], loc: vec![0.0; 4] };
        let t = DetectorOutput { dist_width: 2, cls: vec![0.0, 1.0], loc: vec![0.0; 4] };
        let perm = AnchorPermutation::identity(1);
        let v = cls_consistency_total(&s, &t, &perm, &[true]).unwrap();
        assert!((v - LN_2).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = AnchorGrid::new(32, 8, vec![(12.0, 12.0), (24.0, 24.0)]).unwrap();
        for _ in 0..20 {
            let a = random_output(grid.num_anchors(), 3, &mut rng);
            let b = random_output(grid.num_anchors(), 3, &mut rng);
            let perm = anchor_permutation(&grid, FlipKind::Horizontal);
            let v = cls_consistency_total(&a, &b, &perm, &vec![true; grid.num_anchors()]).unwrap();
            assert!(v <= LN_2);
        }
    }

    #[test]
    fn consistency_fixed_point_for_every_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for size in [8, 16, 32, 64] {
            let grid = AnchorGrid::standard(size).unwrap();
            let student = random_output(grid.num_anchors(), 2, &mut rng);
            let mask = vec![true; grid.num_anchors()];
            for kind in FlipKind::ALL {
                let perm = anchor_permutation(&grid, kind);
                let teacher = flipped_output(&student, &perm, kind);
                assert!(loc_consistency_total(&student, &teacher, &perm, kind, &mask).unwrap() <= 1e-12);
                assert!(cls_consistency_total(&student, &teacher, &perm, &mask).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn loc_total_invariant_under_relabelling() {
        // Relabel anchors by a random bijection sigma; conjugating perm by
        // sigma must leave the mean unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = AnchorGrid::standard(16).unwrap();
        let k = grid.num_anchors();
        for kind in FlipKind::ALL {
            let s = random_output(k, 2, &mut rng);
            let t = random_output(k, 2, &mut rng);
            let perm = anchor_permutation(&grid, kind);
            let base = loc_consistency_total(&s, &t, &perm, kind, &vec![true; k]).unwrap();
            let mut sigma: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                sigma.swap(i, rng.gen_range(0..=i));
            }
            let relabel = |o: &DetectorOutput| {
                let mut r = o.clone();
                for a in 0..k {
                    let b = sigma[a];
                    r.loc[b * 4..b * 4 + 4].copy_from_slice(&o.loc[a * 4..a * 4 + 4]);
                    r.cls[b * 2..b * 2 + 2].copy_from_slice(o.cls_row(a));
                }
                r
            };
            let mut conj = vec![0; k];
            for a in 0..k {
                conj[sigma[a]] = sigma[perm.get(a)];
            }
            let conj = AnchorPermutation::from_vec(conj).unwrap();
            let v = loc_consistency_total(&relabel(&s), &relabel(&t), &conj, kind, &vec![true; k]).unwrap();
            assert!((v - base).abs() < 1e-14);
        }
    }

    #[test]
    fn taped_terms_match_plain_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grid = AnchorGrid::standard(16).unwrap();
        let k = grid.num_anchors();
        let s = random_output(k, 2, &mut rng);
        let t = random_output(k, 2, &mut rng);
        let mut mask = vec![true; k];
        mask[3] = false;
        for kind in FlipKind::ALL {
            let perm = anchor_permutation(&grid, kind);
            let tape = Tape::new();
            let loc = tape.param(Tensor::new(vec![k, 4], s.loc.clone()).unwrap());
            let lp = tape.param(Tensor::new(vec![k, 2], s.cls.iter().map(|p| p.ln()).collect()).unwrap());
            let a = loc_consistency_var(loc, &t, &perm, kind, &mask).unwrap().item();
            let b = cls_consistency_var(lp, &t, &perm, &mask).unwrap().item();
            assert!((a - loc_consistency_total(&s, &t, &perm, kind, &mask).unwrap()).abs() < 1e-14);
            assert!((b - cls_consistency_total(&s, &t, &perm, &mask).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn taped_consistency_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = AnchorGrid::standard(16).unwrap();
        let k = grid.num_anchors();
        let t = random_output(k, 3, &mut rng);
        let mask = vec![true; k];
        let logits = Tensor::new(vec![k, 3], (0..k * 3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let loc = Tensor::new(vec![k, 4], (0..k * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for kind in FlipKind::ALL {
            let perm = anchor_permutation(&grid, kind);
            let e1 = grad_check(|_, x| Ok(cls_consistency_var(x.log_softmax(1)?, &t, &perm, &mask).unwrap()), &logits, 1e-5).unwrap();
            let e2 = grad_check(|_, x| Ok(loc_consistency_var(x, &t, &perm, kind, &mask).unwrap()), &loc, 1e-5).unwrap();
            assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");
        }
    }

    #[test]
    fn totals_and_sums() {
        assert_eq!(consistency_total(0.0, 0.0), 0.0);
        assert!((consistency_total(0.02, 0.1) - 0.12).abs() < 1e-15);
        let b = total_loss(0.5, 0.02, 0.1, 1.0);
        assert!((b.total - 0.62).abs() < 1e-15);
        assert_eq!(b.con, b.con_loc + b.con_cls);
        assert_eq!(total_loss(0.5, 0.02, 0.1, 0.0).total, 0.5);
        assert_eq!(total_loss(0.5, 0.0, 0.0, 1.0).total, 0.5);
    }

    #[test]
    fn match_targets_examples() {
        let grid = AnchorGrid::standard(32).unwrap();
        let a = grid.anchor(7);
        let m = match_targets(&grid, &[(0, a)], 0.5, 0.4).unwrap();
        assert_eq!(m.assignment[7], Assignment::Positive { gt: 0 });
        assert_eq!(m.deltas[7], DeltaBox::default());
        assert_eq!(m.classes[7], 1);

        let none = match_targets(&grid, &[], 0.5, 0.4).unwrap();
        assert!(none.assignment.iter().all(|a| *a == Assignment::Negative));
        assert!(matches!(match_targets(&grid, &[], 0.3, 0.4), Err(LossError::InvalidThresholds { .. })));
    }

    #[test]
    fn low_overlap_gt_gets_one_forced_positive() {
        // A 6x6 box centred on an anchor: best IoU 36/144 = 0.25 < 0.5.
        let grid = AnchorGrid::standard(32).unwrap();
        let c = grid.anchor(grid.index(1, 2, 0));
        let gt = BoxCWH::new(c.cx, c.cy, 6.0, 6.0);
        let m = match_targets(&grid, &[(0, gt)], 0.5, 0.4).unwrap();
        let best = (0..grid.num_anchors())
            .map(|k| (k, iou(&grid.anchor(k), &gt)))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert!((best.1 - 0.25).abs() < 1e-12);
        assert_eq!(m.num_positive(), 1);
        assert_eq!(m.assignment[best.0], Assignment::Positive { gt: 0 });
    }

    #[test]
    fn supervised_loss_examples() {
        let grid = AnchorGrid::new(8, 8, vec![(12.0, 12.0), (24.0, 24.0)]).unwrap();
        let gt = BoxCWH::new(4.5, 3.5, 13.0, 11.0);
        let targets = match_targets(&grid, &[(0, gt)], 0.5, 0.4).unwrap();
        let mut cls = Vec::new();
        for k in 0..2 {
            cls.extend(if targets.classes[k] == 1 && matches!(targets.assignment[k], Assignment::Positive { .. }) {
                [0.0, 1.0]
            } else {
                [1.0, 0.0]
            });
        }
        let loc: Vec<f64> = targets.deltas.iter().flat_map(|d| d.to_array()).collect();
        let perfect = DetectorOutput { dist_width: 2, cls, loc };
        assert!(supervised_loss(&perfect, &targets).unwrap() < 1e-6);

        let ignore_all = MatchedTargets {
            assignment: vec![Assignment::Ignore; 2],
            deltas: vec![DeltaBox::default(); 2],
            classes: vec![0; 2],
        };
        assert_eq!(supervised_loss(&perfect, &ignore_all).unwrap(), 0.0);

        let one_negative = MatchedTargets {
            assignment: vec![Assignment::Negative],
            deltas: vec![DeltaBox::default()],
            classes: vec![0],
        };
        let uniform = DetectorOutput { dist_width: 2, cls: vec![0.5, 0.5], loc: vec![0.3; 4] };
        assert!((supervised_loss(&uniform, &one_negative).unwrap() - LN_2).abs() < 1e-15);
    }
}
