//! The detector shared by student and teacher, and the EMA teacher update.
//!
//! Backbone: three 3x3 stride-2 convolutions (3 -> 16 -> 32 -> 64) with ReLU,
//! then a 1x1 head emitting `A * (C + 1 + 4)` channels per cell. Channel
//! block `a` of the head holds `C + 1` class logits (background first)
//! followed by the four box deltas of anchor shape `a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::boxgeom::{AnchorGrid, DeltaBox, GeomError, DEFAULT_ANCHOR_SHAPES, DEFAULT_STRIDE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image size {0} must be a positive multiple of 8")]
    InvalidImageSize(usize),
    #[error("num_classes must be at least 1")]
    InvalidClassCount,
    #[error("image shape {got:?} does not match the configured input {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter sets have different architectures")]
    ArchMismatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

pub const CHANNELS: [usize; 4] = [3, 16, 32, 64];

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "head.weight",
    "head.bias",
];

/// Static description of the network. Two parameter sets are compatible iff
/// their architectures hash equal.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub num_classes: usize,
    pub image_size: usize,
    pub anchor_shapes: Vec<(f64, f64)>,
}

impl Arch {
    pub fn new(num_classes: usize, image_size: usize) -> Result<Self, ModelError> {
        if image_size == 0 || image_size % DEFAULT_STRIDE != 0 {
            return Err(ModelError::InvalidImageSize(image_size));
        }
        if num_classes == 0 {
            return Err(ModelError::InvalidClassCount);
        }
        Ok(Self {
            num_classes,
            image_size,
            anchor_shapes: DEFAULT_ANCHOR_SHAPES.to_vec(),
        })
    }

    /// Width of a class distribution: background plus foreground classes.
    pub fn dist_width(&self) -> usize {
        self.num_classes + 1
    }

    pub fn head_block(&self) -> usize {
        self.num_classes + 5
    }

    pub fn head_channels(&self) -> usize {
        self.anchor_shapes.len() * self.head_block()
    }

    pub fn grid(&self) -> AnchorGrid {
        AnchorGrid::new(self.image_size, DEFAULT_STRIDE, self.anchor_shapes.clone())
            .expect("validated image size")
    }

    pub fn num_anchors(&self) -> usize {
        self.grid().num_anchors()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let c = CHANNELS;
        vec![
            vec![c[1], c[0], 3, 3],
            vec![c[1]],
            vec![c[2], c[1], 3, 3],
            vec![c[2]],
            vec![c[3], c[2], 3, 3],
            vec![c[3]],
            vec![self.head_channels(), c[3], 1, 1],
            vec![self.head_channels()],
        ]
    }

    pub fn describe(&self) -> String {
        let shapes: Vec<String> = self
            .anchor_shapes
            .iter()
            .map(|(w, h)| format!("{w}x{h}"))
            .collect();
        format!(
            "conv3x3s2:{:?};head1x1;classes={};image={};stride={};anchors={}",
            CHANNELS,
            self.num_classes,
            self.image_size,
            DEFAULT_STRIDE,
            shapes.join(",")
        )
    }

    pub fn hash(&self) -> u32 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]])
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![3, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub arch: Arch,
    /// One tensor per entry of [`PARAM_NAMES`], same order.
    pub tensors: Vec<Tensor>,
    pub step: u64,
}

impl DetectorParams {
    pub fn zeros(arch: Arch) -> Self {
        let tensors = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self {
            arch,
            tensors,
            step: 0,
        }
    }

    /// He-style uniform init, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` for
    /// weights and zero biases. Values are rounded to `f32` so that they
    /// survive the checkpoint format unchanged.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(arch);
        for t in p.tensors.iter_mut() {
            if t.rank() == 4 {
                let fan_in: usize = t.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.gen_range(-bound..bound) as f32 as f64;
                }
            }
        }
        p
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Per-anchor detector output for one image, anchors in row-major
/// `(row, column, shape)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub dist_width: usize,
    /// `K x (C + 1)` class distributions, background at column 0.
    pub cls: Vec<f64>,
    /// `K x 4` deltas `[dcx, dcy, dw, dh]`.
    pub loc: Vec<f64>,
}

impl DetectorOutput {
    pub fn num_anchors(&self) -> usize {
        self.loc.len() / 4
    }

    pub fn cls_row(&self, k: usize) -> &[f64] {
        &self.cls[k * self.dist_width..(k + 1) * self.dist_width]
    }

    pub fn delta(&self, k: usize) -> DeltaBox {
        DeltaBox::from_slice(&self.loc[k * 4..k * 4 + 4])
    }

    pub fn foreground(&self, k: usize) -> f64 {
        1.0 - self.cls_row(k)[0]
    }
}

/// Taped detector output.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars<'t> {
    pub logits: Var<'t>,
    pub log_probs: Var<'t>,
    pub loc: Var<'t>,
}

impl OutputVars<'_> {
    /// Detached copy of the output values.
    pub fn to_output(&self) -> DetectorOutput {
        let lp = self.log_probs.value();
        DetectorOutput {
            dist_width: lp.shape()[1],
            cls: lp.data().iter().map(|v| v.exp()).collect(),
            loc: self.loc.value().into_data(),
        }
    }
}

/// Flat head-output indices of the class logits and deltas, anchor-major.
fn head_indices(arch: &Arch) -> (Vec<usize>, Vec<usize>) {
    let grid = arch.grid();
    let plane = grid.grid_size * grid.grid_size;
    let block = arch.head_block();
    let mut cls = Vec::with_capacity(grid.num_anchors() * arch.dist_width());
    let mut loc = Vec::with_capacity(grid.num_anchors() * 4);
    for k in 0..grid.num_anchors() {
        let (i, j, a) = grid.cell(k);
        let pos = i * grid.grid_size + j;
        for c in 0..arch.dist_width() {
            cls.push((a * block + c) * plane + pos);
        }
        for d in 0..4 {
            loc.push((a * block + arch.dist_width() + d) * plane + pos);
        }
    }
    (cls, loc)
}

/// Records the forward pass on `tape`. `params` are the tape handles of the
/// tensors in [`PARAM_NAMES`] order.
pub fn forward_vars<'t>(
    arch: &Arch,
    params: &[Var<'t>],
    image: Var<'t>,
) -> Result<OutputVars<'t>, ModelError> {
    let expected = arch.input_shape();
    let got = image.shape();
    if got != expected {
        return Err(ModelError::ShapeMismatch { expected, got });
    }
    let mut x = image;
    for layer in 0..3 {
        x = x
            .conv2d(params[2 * layer], 2, 1)?
            .add_channel_bias(params[2 * layer + 1])?
            .relu()?;
    }
    let head = x.conv2d(params[6], 1, 0)?.add_channel_bias(params[7])?;
    let k = arch.num_anchors();
    let (cls_idx, loc_idx) = head_indices(arch);
    let logits = head.gather(&cls_idx, &[k, arch.dist_width()])?;
    let loc = head.gather(&loc_idx, &[k, 4])?;
    let log_probs = logits.log_softmax(1)?;
    Ok(OutputVars {
        logits,
        log_probs,
        loc,
    })
}

/// Puts `params` on `tape`, tracked or constant.
pub fn load_params<'t>(tape: &'t Tape, params: &DetectorParams, track: bool) -> Vec<Var<'t>> {
    params
        .tensors
        .iter()
        .map(|t| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Plain forward pass. The network has no mode-dependent layers, so
/// `train_mode` does not change the result.
pub fn forward(
    params: &DetectorParams,
    image: &Tensor,
    train_mode: bool,
) -> Result<DetectorOutput, ModelError> {
    let _ = train_mode;
    let tape = Tape::new();
    let vars = load_params(&tape, params, false);
    let x = tape.constant(image.clone());
    Ok(forward_vars(&params.arch, &vars, x)?.to_output())
}

/// Student and teacher parameter sets plus the EMA weight `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTeacher {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub tau: f64,
}

pub fn init_params(
    seed: u64,
    num_classes: usize,
    image_size: usize,
) -> Result<StudentTeacher, ModelError> {
    let arch = Arch::new(num_classes, image_size)?;
    let student = DetectorParams::init(arch, seed);
    Ok(StudentTeacher {
        teacher: student.clone(),
        student,
        tau: 0.01,
    })
}

/// `teacher <- tau * student + (1 - tau) * teacher`. `tau = 1` copies the
/// student, `tau = 0` leaves the teacher unchanged; the usual "decay" is
/// `1 - tau`.
pub fn ema_update(st: &mut StudentTeacher) -> Result<(), ModelError> {
    if st.student.arch != st.teacher.arch {
        return Err(ModelError::ArchMismatch);
    }
    let tau = st.tau;
    for (t, s) in st.teacher.tensors.iter_mut().zip(&st.student.tensors) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = tau * sv + (1.0 - tau) * *tv;
        }
    }
    st.teacher.step = st.student.step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(arch: &Arch, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * arch.image_size * arch.image_size;
        Tensor::new(arch.input_shape(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_teacher_matches() {
        let a = init_params(7, 1, 32).unwrap();
        let b = init_params(7, 1, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.student.tensors, a.teacher.tensors);
        let c = init_params(8, 1, 32).unwrap();
        assert_ne!(a.student.tensors, c.student.tensors);
        assert!(matches!(init_params(1, 1, 30), Err(ModelError::InvalidImageSize(30))));
    }

    #[test]
    fn zero_head_gives_uniform_distributions_and_zero_deltas() {
        let mut st = init_params(1, 2, 32).unwrap();
        for t in &mut st.student.tensors[6..] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = forward(&st.student, &image(&st.student.arch, 2), true).unwrap();
        assert!(out.cls.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(out.loc.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn forward_is_deterministic_with_valid_rows() {
        let st = init_params(3, 1, 64).unwrap();
        let img = image(&st.student.arch, 4);
        let a = forward(&st.student, &img, false).unwrap();
        let b = forward(&st.student, &img, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_anchors(), 8 * 8 * 3);
        for k in 0..a.num_anchors() {
            let s: f64 = a.cls_row(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_count_follows_image_size() {
        for size in [8, 16, 32, 64, 96] {
            let arch = Arch::new(1, size).unwrap();
            let p = DetectorParams::init(arch.clone(), 0);
            let out = forward(&p, &image(&arch, 1), false).unwrap();
            assert_eq!(out.num_anchors(), (size / 8).pow(2) * 3);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let st = init_params(3, 1, 32).unwrap();
        let bad = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(
            forward(&st.student, &bad, false),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn head_layout_maps_anchor_blocks() {
        // Put a distinct bias on each head channel and read it back per anchor.
        let arch = Arch::new(1, 16).unwrap();
        let mut p = DetectorParams::zeros(arch.clone());
        let hb = &mut p.tensors[7];
        for (c, v) in hb.data_mut().iter_mut().enumerate() {
            *v = c as f64;
        }
        let tape = Tape::new();
        let vars = load_params(&tape, &p, false);
        let x = tape.constant(Tensor::zeros(&arch.input_shape()));
        let out = forward_vars(&arch, &vars, x).unwrap();
        let logits = out.logits.value();
        let loc = out.loc.value();
        let grid = arch.grid();
        for k in 0..grid.num_anchors() {
            let (_, _, a) = grid.cell(k);
            let base = (a * arch.head_block()) as f64;
            assert_eq!(&logits.data()[k * 2..k * 2 + 2], &[base, base + 1.0]);
            assert_eq!(
                &loc.data()[k * 4..k * 4 + 4],
                &[base + 2.0, base + 3.0, base + 4.0, base + 5.0]
            );
        }
    }

    fn scalar_st(student: f64, teacher: f64, tau: f64) -> StudentTeacher {
        let arch = Arch::new(1, 8).unwrap();
        let mut s = DetectorParams::zeros(arch);
        let mut t = s.clone();
        s.tensors[1].data_mut()[0] = student;
        t.tensors[1].data_mut()[0] = teacher;
        StudentTeacher {
            student: s,
            teacher: t,
            tau,
        }
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let mut st = init_params(1, 1, 16).unwrap();
        let other = init_params(2, 1, 16).unwrap();
        st.teacher = other.student.clone();
        st.tau = 1.0;
        ema_update(&mut st).unwrap();
        assert_eq!(st.teacher.tensors, st.student.tensors);

        let mut st = init_params(1, 1, 16).unwrap();
        st.teacher = other.student.clone();
        st.tau = 0.0;
        ema_update(&mut st).unwrap();
        assert_eq!(st.teacher.tensors, other.student.tensors);

        let mut st = scalar_st(2.0, 0.0, 0.5);
        ema_update(&mut st).unwrap();
        assert_eq!(st.teacher.tensors[1].data()[0], 1.0);
        assert_eq!(st.student.tensors[1].data()[0], 2.0);
    }

    #[test]
    fn ema_is_convex_and_converges_geometrically() {
        let mut st = init_params(1, 1, 16).unwrap();
        st.teacher = init_params(9, 1, 16).unwrap().student;
        st.tau = 0.3;
        let before = st.teacher.clone();
        ema_update(&mut st).unwrap();
        for ((t0, t1), s) in before
            .tensors
            .iter()
            .zip(&st.teacher.tensors)
            .zip(&st.student.tensors)
        {
            for ((a, b), c) in t0.data().iter().zip(t1.data()).zip(s.data()) {
                assert!(a.min(*c) <= *b && *b <= a.max(*c));
            }
        }
        let mut st = scalar_st(1.0, -3.0, 0.25);
        let mut gap = 4.0f64;
        for _ in 0..20 {
            ema_update(&mut st).unwrap();
            let new_gap = (st.student.tensors[1].data()[0] - st.teacher.tensors[1].data()[0]).abs();
            assert!((new_gap - 0.75 * gap).abs() <= 1e-14);
            gap = new_gap;
        }
    }

    #[test]
    fn arch_hash_distinguishes_configurations() {
        let a = Arch::new(1, 64).unwrap();
        assert_eq!(a.hash(), Arch::new(1, 64).unwrap().hash());
        assert_ne!(a.hash(), Arch::new(2, 64).unwrap().hash());
        assert_ne!(a.hash(), Arch::new(1, 32).unwrap().hash());
    }
}
