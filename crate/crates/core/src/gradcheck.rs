//! The gradient-check suite: every autodiff primitive, every loss term, and
//! the full objective of one training sample, each compared against central
//! finite differences.
//!
//! Probe points are drawn from the seed. Inputs are kept away from the kinks
//! of `relu`, `smooth_l1` and `max` so that the finite difference is
//! meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_subset, AutodiffError, ReduceKind, Tape, Tensor, Var};
use crate::boxgeom::{anchor_permutation, FlipKind};
use crate::data::{initial_augment, make_pair, mix_seed, render, rgb8_to_tensor, DomainConfig, LabeledSample};
use crate::losses::{
    cls_consistency_var, loc_consistency_var, match_targets, supervised_loss_var, DEFAULT_NEG_THRESHOLD,
    DEFAULT_POS_THRESHOLD,
};
use crate::model::{forward, forward_vars, init_params, DetectorOutput};

pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;
/// Smaller step for the full network, whose many ReLUs make wide steps
/// more likely to straddle a kink.
const H_MODEL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Loss<'t> = Result<Var<'t>, AutodiffError>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values in `lo..hi` with a random sign.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so
/// that every output coordinate matters.
fn project<'t>(out: Var<'t>, weights: &Tensor) -> Loss<'t> {
    let w = out.tape().constant(weights.clone());
    out.mul(w)?.sum()
}

struct Suite {
    seed: u64,
    results: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, name: &str, err: Result<f64, AutodiffError>) {
        let max_rel_error = err.unwrap_or(f64::INFINITY);
        self.results.push(CheckResult {
            name: name.to_string(),
            seed: self.seed,
            max_rel_error,
            passed: max_rel_error < TOLERANCE,
        });
    }

    fn check<F>(&mut self, name: &str, xs: &[Tensor], f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Loss<'t>,
    {
        self.record(name, grad_check_subset(f, xs, H, |_, _| true));
    }
}

fn primitives(s: &mut Suite, rng: &mut ChaCha8Rng) {
    let shape = [3, 4];
    let w = uniform(rng, &shape, -1.0, 1.0);
    let a = uniform(rng, &shape, -2.0, 2.0);
    let b = uniform(rng, &shape, -2.0, 2.0);
    let pos = uniform(rng, &shape, 0.5, 2.0);
    let away = signed(rng, &shape, 0.1, 2.0);

    s.check("add", &[a.clone(), b.clone()], |_, x| project(x[0].add(x[1])?, &w));
    s.check("sub", &[a.clone(), b.clone()], |_, x| project(x[0].sub(x[1])?, &w));
    s.check("mul", &[a.clone(), b.clone()], |_, x| project(x[0].mul(x[1])?, &w));
    s.check("div", &[a.clone(), pos.clone()], |_, x| project(x[0].div(x[1])?, &w));
    let sc = Tensor::scalar(rng.gen_range(0.5..2.0));
    s.check("mul_scalar_broadcast", &[a.clone(), sc], |_, x| project(x[0].mul(x[1])?, &w));
    s.check("neg", &[a.clone()], |_, x| project(x[0].neg()?, &w));
    s.check("exp", &[a.clone()], |_, x| project(x[0].exp()?, &w));
    s.check("log", &[pos.clone()], |_, x| project(x[0].log()?, &w));
    s.check("relu", &[away.clone()], |_, x| project(x[0].relu()?, &w));
    s.check("sigmoid", &[a.clone()], |_, x| project(x[0].sigmoid()?, &w));
    s.check("square", &[a.clone()], |_, x| project(x[0].square()?, &w));
    // Keep |x| away from the quadratic/linear switch at 1.
    let sl1 = {
        let mut t = signed(rng, &shape, 0.05, 0.9);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v += v.signum() * 1.2;
            }
        }
        t
    };
    s.check("smooth_l1", &[sl1], |_, x| project(x[0].smooth_l1()?, &w));
    s.check("scale", &[a.clone()], |_, x| project(x[0].scale(-1.7)?, &w));

    let mb = uniform(rng, &[4, 5], -1.0, 1.0);
    let wm = uniform(rng, &[3, 5], -1.0, 1.0);
    s.check("matmul", &[a.clone(), mb], |_, x| project(x[0].matmul(x[1])?, &wm));

    let img = uniform(rng, &[2, 5, 5], -1.0, 1.0);
    let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let w1 = uniform(rng, &[3, 5, 5], -1.0, 1.0);
    let w2 = uniform(rng, &[3, 3, 3], -1.0, 1.0);
    s.check("conv2d_stride1_pad1", &[img.clone(), k.clone()], |_, x| project(x[0].conv2d(x[1], 1, 1)?, &w1));
    s.check("conv2d_stride2_pad1", &[img.clone(), k], |_, x| project(x[0].conv2d(x[1], 2, 1)?, &w2));
    let bias = uniform(rng, &[2], -1.0, 1.0);
    let wb = uniform(rng, &[2, 5, 5], -1.0, 1.0);
    s.check("channel_bias", &[img, bias], |_, x| project(x[0].add_channel_bias(x[1])?, &wb));

    s.check("softmax", &[a.clone()], |_, x| project(x[0].softmax(1)?, &w));
    s.check("softmax_axis0", &[a.clone()], |_, x| project(x[0].softmax(0)?, &w));
    s.check("log_softmax", &[a.clone()], |_, x| project(x[0].log_softmax(1)?, &w));

    let w_rows = uniform(rng, &[3], -1.0, 1.0);
    s.check("sum", &[a.clone()], |_, x| project(x[0].reduce(ReduceKind::Sum, &[1])?, &w_rows));
    s.check("mean", &[a.clone()], |_, x| project(x[0].reduce(ReduceKind::Mean, &[1])?, &w_rows));
    // Distinct, well separated entries so the argmax is stable under the probe.
    let spread = {
        let mut vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        Tensor::new(vec![3, 4], vals).expect("shape")
    };
    s.check("max", &[spread], |_, x| project(x[0].reduce(ReduceKind::Max, &[1])?, &w_rows));
    let wr = uniform(rng, &[2, 6], -1.0, 1.0);
    s.check("reshape", &[a.clone()], |_, x| project(x[0].reshape(&[2, 6])?, &wr));
    let idx: Vec<usize> = (0..8).map(|_| rng.gen_range(0..12)).collect();
    let wg = uniform(rng, &[8], -1.0, 1.0);
    s.check("gather", &[a], move |_, x| project(x[0].gather(&idx, &[8])?, &wg));
}

fn random_teacher(rng: &mut ChaCha8Rng, k: usize, width: usize) -> DetectorOutput {
    let mut cls = Vec::with_capacity(k * width);
    for _ in 0..k {
        let row: Vec<f64> = (0..width).map(|_| rng.gen_range(-2.0..2.0f64).exp()).collect();
        let z: f64 = row.iter().sum();
        cls.extend(row.iter().map(|v| v / z));
    }
    DetectorOutput {
        dist_width: width,
        cls,
        loc: (0..k * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn small_domain(size: usize) -> DomainConfig {
    DomainConfig {
        polyp_radius: (3.0, (size as f64 / 2.0 - 2.0).min(6.0)),
        polyp_count: (1, 2),
        ..DomainConfig::domain_a(size)
    }
}

/// Loss terms against the network outputs they consume (logits and deltas).
fn loss_terms(s: &mut Suite, rng: &mut ChaCha8Rng) {
    let size = 16;
    let st = init_params(rng.gen(), 1, size).expect("valid size");
    let arch = st.student.arch.clone();
    let grid = arch.grid();
    let (k, width) = (arch.num_anchors(), arch.dist_width());
    let (_, boxes) = render(&small_domain(size), rng.gen());
    let targets = match_targets(&grid, &boxes, DEFAULT_POS_THRESHOLD, DEFAULT_NEG_THRESHOLD).expect("thresholds");
    let kind = FlipKind::ALL[rng.gen_range(0..3)];
    let perm = anchor_permutation(&grid, kind);
    let teacher = random_teacher(rng, k, width);
    let mask = vec![true; k];
    let logits = uniform(rng, &[k, width], -2.0, 2.0);
    // Regression residuals away from the smooth-L1 switch.
    let loc = {
        let mut t = Tensor::zeros(&[k, 4]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let target = targets.deltas[i / 4].to_array()[i % 4];
            let r: f64 = rng.gen_range(0.05..0.9) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            *v = target + if rng.gen_bool(0.3) { r + r.signum() * 1.2 } else { r };
        }
        t
    };

    s.check("supervised_loss", &[logits.clone(), loc.clone()], |_, x| {
        Ok(supervised_loss_var(x[0].log_softmax(1)?, x[1], &targets).map_err(unwrap_loss)?)
    });
    s.check("loc_consistency", &[loc.clone()], |_, x| {
        Ok(loc_consistency_var(x[0], &teacher, &perm, kind, &mask).map_err(unwrap_loss)?)
    });
    s.check("cls_consistency_jsd", &[logits.clone()], |_, x| {
        Ok(cls_consistency_var(x[0].log_softmax(1)?, &teacher, &perm, &mask).map_err(unwrap_loss)?)
    });
    let masked: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
    s.check("consistency_masked", &[logits.clone(), loc.clone()], |_, x| {
        let lp = x[0].log_softmax(1)?;
        let l = loc_consistency_var(x[1], &teacher, &perm, kind, &masked).map_err(unwrap_loss)?;
        let c = cls_consistency_var(lp, &teacher, &perm, &masked).map_err(unwrap_loss)?;
        l.add(c)
    });
    let weight = rng.gen_range(0.5..2.0);
    s.check("total_loss", &[logits, loc], |_, x| {
        let lp = x[0].log_softmax(1)?;
        let sup = supervised_loss_var(lp, x[1], &targets).map_err(unwrap_loss)?;
        let l = loc_consistency_var(x[1], &teacher, &perm, kind, &mask).map_err(unwrap_loss)?;
        let c = cls_consistency_var(lp, &teacher, &perm, &mask).map_err(unwrap_loss)?;
        sup.add(l.add(c)?.scale(weight)?)
    });
}

fn unwrap_loss(e: crate::losses::LossError) -> AutodiffError {
    match e {
        crate::losses::LossError::Autodiff(a) => a,
        other => AutodiffError::DomainError {
            op: "loss",
            detail: other.to_string(),
        },
    }
}

/// Which student terms enter a model-level check.
#[derive(Clone, Copy)]
enum Term {
    Sup,
    ConLoc,
    ConCls,
    Total,
}

/// One augmented sample with its flipped teacher view, frozen.
struct ModelProbe {
    arch: crate::model::Arch,
    image: Tensor,
    targets: crate::losses::MatchedTargets,
    teacher_out: DetectorOutput,
    perm: crate::boxgeom::AnchorPermutation,
    kind: FlipKind,
    mask: Vec<bool>,
}

fn model_objective<'t>(tape: &'t Tape, x: &[Var<'t>], p: &ModelProbe, term: Term) -> Loss<'t> {
    let img = tape.constant(p.image.clone());
    let out = forward_vars(&p.arch, x, img).map_err(|e| AutodiffError::DomainError {
        op: "forward",
        detail: e.to_string(),
    })?;
    let sup = || supervised_loss_var(out.log_probs, out.loc, &p.targets).map_err(unwrap_loss);
    let con_loc = || loc_consistency_var(out.loc, &p.teacher_out, &p.perm, p.kind, &p.mask).map_err(unwrap_loss);
    let con_cls = || cls_consistency_var(out.log_probs, &p.teacher_out, &p.perm, &p.mask).map_err(unwrap_loss);
    match term {
        Term::Sup => sup(),
        Term::ConLoc => con_loc(),
        Term::ConCls => con_cls(),
        Term::Total => sup()?.add(con_loc()?.add(con_cls()?)?),
    }
}

/// Smallest distance of any backbone ReLU input from zero.
fn relu_margin(params: &[Tensor], image: &Tensor) -> f64 {
    let tape = Tape::new();
    let mut x = tape.constant(image.clone());
    let mut margin = f64::INFINITY;
    for layer in 0..3 {
        let w = tape.constant(params[2 * layer].clone());
        let b = tape.constant(params[2 * layer + 1].clone());
        let pre = x.conv2d(w, 2, 1).and_then(|v| v.add_channel_bias(b)).expect("shapes");
        margin = pre.value_ref().data().iter().fold(margin, |m, v| m.min(v.abs()));
        x = pre.relu().expect("relu");
    }
    margin
}

/// Draws a probe whose backbone stays at least `RELU_MARGIN` away from every
/// ReLU kink, redrawing otherwise.
fn draw_probe(rng: &mut ChaCha8Rng) -> (ModelProbe, Vec<Tensor>) {
    const RELU_MARGIN: f64 = 1e-4;
    let size = 16;
    let mut best: Option<(f64, ModelProbe, Vec<Tensor>)> = None;
    for _ in 0..32 {
        let mut st = init_params(rng.gen(), 1, size).expect("valid size");
        // Nonzero biases keep flat image regions off the kink.
        for t in st.student.tensors.iter_mut().skip(1).step_by(2).take(3) {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let mut teacher = st.student.clone();
        for t in &mut teacher.tensors {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let arch = st.student.arch.clone();
        let grid = arch.grid();
        let (rgb, boxes) = render(&small_domain(size), rng.gen());
        let sample = LabeledSample {
            id: "probe".into(),
            image: rgb8_to_tensor(&rgb, size, size),
            boxes,
        };
        let (aug, _) = initial_augment(&sample, rng.gen(), true);
        let pair = make_pair(&aug, rng.gen());
        let margin = relu_margin(&st.student.tensors, &aug.image);
        let probe = ModelProbe {
            perm: anchor_permutation(&grid, pair.kind),
            kind: pair.kind,
            teacher_out: forward(&teacher, &pair.teacher.image, true).expect("shapes"),
            targets: match_targets(&grid, &aug.boxes, DEFAULT_POS_THRESHOLD, DEFAULT_NEG_THRESHOLD).expect("thresholds"),
            mask: vec![true; grid.num_anchors()],
            image: aug.image,
            arch,
        };
        if margin >= RELU_MARGIN {
            return (probe, st.student.tensors);
        }
        if best.as_ref().map_or(true, |(m, _, _)| margin > *m) {
            best = Some((margin, probe, st.student.tensors));
        }
    }
    let (_, probe, params) = best.expect("at least one draw");
    (probe, params)
}

/// Every loss term, and the full objective, as functions of the student
/// parameters for one augmented sample and its flipped teacher view.
fn model_level(s: &mut Suite, rng: &mut ChaCha8Rng) {
    let (probe, params) = draw_probe(rng);
    let params = &params;
    // Every head coordinate is probed; the backbone is probed on a strided
    // subset with a random offset, denser for the full objective.
    let (o1, o2) = (rng.gen_range(0..17), rng.gen_range(0..4));
    let sparse = |which: usize, i: usize| which >= 6 || (i + o1) % 17 == 0;
    let dense = |which: usize, i: usize| which >= 6 || (i + o2) % 4 == 0;
    for (name, term) in [
        ("model_supervised_loss", Term::Sup),
        ("model_loc_consistency", Term::ConLoc),
        ("model_cls_consistency", Term::ConCls),
    ] {
        let err = grad_check_subset(|t, x| model_objective(t, x, &probe, term), params, H_MODEL, sparse);
        s.record(name, err);
    }
    let err = grad_check_subset(|t, x| model_objective(t, x, &probe, Term::Total), params, H_MODEL, dense);
    s.record("model_total_loss", err);
}

/// Runs every check with probe points drawn from `seed`.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x6752_4144]));
    let mut suite = Suite {
        seed,
        results: Vec::new(),
    };
    primitives(&mut suite, &mut rng);
    loss_terms(&mut suite, &mut rng);
    model_level(&mut suite, &mut rng);
    suite.results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::inject_backward_fault;

    #[test]
    fn suite_passes_for_one_seed() {
        let results = run_suite(11);
        assert!(results.len() > 30);
        for r in &results {
            assert!(r.passed, "{} failed with {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught_and_named() {
        inject_backward_fault(Some("sigmoid"));
        let results = run_suite(3);
        inject_backward_fault(None);
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["sigmoid"]);
    }
}
