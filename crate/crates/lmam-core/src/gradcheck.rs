//! Central finite-difference verification of every hand-written backward
//! pass. Each checkable unit is wrapped in a [`GradSubject`] exposing a
//! scalar loss, its analytic gradients, and mutable access to every value
//! (parameters and inputs) under a stable name.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{LmamMode, MatchingAttentionLayer, SelfAttentionLayer, ValueSource};
use crate::error::{Error, Result};
use crate::fusion::{build_fusion, FusionLayer, FusionMethod, FusionOptions};
use crate::lowrank;
use crate::matrix::Matrix;
use crate::model::{assemble_model, EmbedWay, ExperimentConfig, Model};
use crate::nn::{cross_entropy, ContextEncoder, Linear};
use crate::param::Param;
use crate::rng::Rng;
use crate::synth::ModalityFeatures;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Pre-relu activations are pushed at least this far from the kink before a
/// finite-difference run; the 1e-5 step never straddles a non-smooth point.
pub const RELU_MARGIN: f64 = 1e-3;

/// Absolute disagreements below this are within central-difference
/// measurement noise (rounding ~1e-16*|loss|/step plus h^2 truncation);
/// smaller gradients cannot be resolved relative to their own magnitude.
pub const FD_RESOLUTION: f64 = 1e-9;

/// Relative error with the denominator floored at 1e-8; agreement within
/// [`FD_RESOLUTION`] counts as exact (structurally-zero gradients such as a
/// softmax-invariant bias land here).
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = libm::fabs(a - b);
    if diff <= FD_RESOLUTION {
        return 0.0;
    }
    diff / libm::fabs(a).max(libm::fabs(b)).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GroupReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// A differentiable unit under test.
pub trait GradSubject {
    /// Scalar loss from a fresh forward pass.
    fn loss(&mut self) -> f64;
    /// Analytic gradients for every named value (parameters and inputs).
    fn grads(&mut self) -> Vec<(String, Matrix)>;
    /// Mutable access to every named value, same names as [`grads`].
    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

fn read_value(s: &mut dyn GradSubject, name: &str, idx: usize) -> f64 {
    let mut out = f64::NAN;
    s.visit_values(&mut |n, m| {
        if n == name {
            out = m.data()[idx];
        }
    });
    out
}

fn write_value(s: &mut dyn GradSubject, name: &str, idx: usize, v: f64) {
    s.visit_values(&mut |n, m| {
        if n == name {
            m.data_mut()[idx] = v;
        }
    });
}

/// Central finite differences against the analytic gradients, one report per
/// named group.
pub fn check_subject(subject: &mut dyn GradSubject, step: f64) -> Vec<GroupReport> {
    let grads = subject.grads();
    let mut reports = Vec::with_capacity(grads.len());
    for (name, grad) in grads {
        let mut max_err = 0.0f64;
        let n = grad.data().len();
        for idx in 0..n {
            let orig = read_value(subject, &name, idx);
            write_value(subject, &name, idx, orig + step);
            let plus = subject.loss();
            write_value(subject, &name, idx, orig - step);
            let minus = subject.loss();
            write_value(subject, &name, idx, orig);
            let fd = (plus - minus) / (2.0 * step);
            max_err = max_err.max(rel_err(grad.data()[idx], fd));
        }
        reports.push(GroupReport { group: name, max_rel_err: max_err, checked: n });
    }
    reports
}

// ---------------------------------------------------------------------------
// Subjects
// ---------------------------------------------------------------------------

fn input_in_range(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform_in(-2.0, 2.0);
    }
    m
}

struct LowRankApplySubject {
    u: Param,
    v: Param,
    bias: Param,
    x: Matrix,
}

impl GradSubject for LowRankApplySubject {
    fn loss(&mut self) -> f64 {
        lowrank::apply_forward(&self.x, &self.u.value, &self.v.value, &self.bias.value)
            .expect("shapes fixed")
            .0
            .sum()
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        let (out, h) =
            lowrank::apply_forward(&self.x, &self.u.value, &self.v.value, &self.bias.value).unwrap();
        let ones = Matrix::ones(out.rows(), out.cols());
        let (dx, du, dv, dbias) =
            lowrank::apply_backward(&self.x, &self.u.value, &self.v.value, &h, &ones).unwrap();
        vec![
            ("u".into(), du),
            ("v".into(), dv),
            ("bias".into(), dbias),
            ("input.x".into(), dx),
        ]
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("u", &mut self.u.value);
        f("v", &mut self.v.value);
        f("bias", &mut self.bias.value);
        f("input.x", &mut self.x);
    }
}

struct MatchingSubject {
    layer: MatchingAttentionLayer,
    m: Matrix,
    i: Matrix,
}

impl GradSubject for MatchingSubject {
    fn loss(&mut self) -> f64 {
        self.layer.infer(&self.m, &self.i).unwrap().sum()
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        self.layer.visit_params_mut("", &mut |_, p| p.zero_grad());
        let out = self.layer.forward(&self.m, &self.i).unwrap();
        let (d_m, d_i) = self.layer.backward(&Matrix::ones(out.rows(), out.cols())).unwrap();
        let mut grads = Vec::new();
        self.layer.visit_params("layer", &mut |name, p| grads.push((String::from(name), p.grad.clone())));
        grads.push(("input.m".into(), d_m));
        grads.push(("input.i".into(), d_i));
        grads
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.layer.visit_params_mut("layer", &mut |name, p| f(name, &mut p.value));
        f("input.m", &mut self.m);
        f("input.i", &mut self.i);
    }
}

struct SelfAttnSubject {
    layer: SelfAttentionLayer,
    x: Matrix,
}

impl GradSubject for SelfAttnSubject {
    fn loss(&mut self) -> f64 {
        self.layer.infer(&self.x).unwrap().sum()
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        self.layer.visit_params_mut("", &mut |_, p| p.zero_grad());
        let out = self.layer.forward(&self.x).unwrap();
        let d_x = self.layer.backward(&Matrix::ones(out.rows(), out.cols())).unwrap();
        let mut grads = Vec::new();
        self.layer.visit_params("layer", &mut |name, p| grads.push((String::from(name), p.grad.clone())));
        grads.push(("input.x".into(), d_x));
        grads
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.layer.visit_params_mut("layer", &mut |name, p| f(name, &mut p.value));
        f("input.x", &mut self.x);
    }
}

struct FusionSubject {
    layer: Box<dyn FusionLayer>,
    parts: Vec<Matrix>,
}

impl GradSubject for FusionSubject {
    fn loss(&mut self) -> f64 {
        let refs: Vec<&Matrix> = self.parts.iter().collect();
        self.layer.infer(&refs).unwrap().sum()
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        self.layer.zero_grad();
        let refs: Vec<&Matrix> = self.parts.iter().collect();
        let out = self.layer.forward(&refs).unwrap();
        let d_parts = self.layer.backward(&Matrix::ones(out.rows(), out.cols())).unwrap();
        let mut grads = Vec::new();
        self.layer.visit_params("layer", &mut |name, p| grads.push((String::from(name), p.grad.clone())));
        for (i, g) in d_parts.into_iter().enumerate() {
            grads.push((format!("input.{i}"), g));
        }
        grads
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.layer.visit_params_mut("layer", &mut |name, p| f(name, &mut p.value));
        for (i, part) in self.parts.iter_mut().enumerate() {
            f(&format!("input.{i}"), part);
        }
    }
}

struct EncoderSubject {
    encoder: ContextEncoder,
    x: Matrix,
}

impl GradSubject for EncoderSubject {
    fn loss(&mut self) -> f64 {
        self.encoder.infer(&self.x).unwrap().sum()
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        self.encoder.visit_params_mut("", &mut |_, p| p.zero_grad());
        let out = self.encoder.forward(&self.x).unwrap();
        let d_x = self.encoder.backward(&Matrix::ones(out.rows(), out.cols())).unwrap();
        let mut grads = Vec::new();
        self.encoder
            .visit_params("encoder", &mut |name, p| grads.push((String::from(name), p.grad.clone())));
        grads.push(("input.x".into(), d_x));
        grads
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.encoder.visit_params_mut("encoder", &mut |name, p| f(name, &mut p.value));
        f("input.x", &mut self.x);
    }
}

/// Linear head checked through the softmax cross-entropy loss, covering both
/// the classifier and the loss gradient.
struct ClassifierSubject {
    linear: Linear,
    x: Matrix,
    labels: Vec<usize>,
}

impl GradSubject for ClassifierSubject {
    fn loss(&mut self) -> f64 {
        let logits = self.linear.infer(&self.x).unwrap();
        cross_entropy(&logits, &self.labels, 1.0 / self.labels.len() as f64).unwrap().0
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        self.linear.visit_params_mut("", &mut |_, p| p.zero_grad());
        let logits = self.linear.forward(&self.x).unwrap();
        let (_, d_logits) =
            cross_entropy(&logits, &self.labels, 1.0 / self.labels.len() as f64).unwrap();
        let d_x = self.linear.backward(&d_logits).unwrap();
        let mut grads = Vec::new();
        self.linear
            .visit_params("classifier", &mut |name, p| grads.push((String::from(name), p.grad.clone())));
        grads.push(("input.x".into(), d_x));
        grads
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.linear.visit_params_mut("classifier", &mut |name, p| f(name, &mut p.value));
        f("input.x", &mut self.x);
    }
}

/// Whole pipeline (fusion + encoder(s) + classifier) under the training loss,
/// covering the embedding-way wiring.
struct ModelSubject {
    model: Model,
    feats: ModalityFeatures,
}

impl GradSubject for ModelSubject {
    fn loss(&mut self) -> f64 {
        let logits = self.model.infer(&self.feats).unwrap();
        cross_entropy(&logits, &self.feats.labels, 1.0 / self.feats.labels.len() as f64)
            .unwrap()
            .0
    }

    fn grads(&mut self) -> Vec<(String, Matrix)> {
        self.model.zero_grad();
        let logits = self.model.forward(&self.feats).unwrap();
        let (_, d_logits) =
            cross_entropy(&logits, &self.feats.labels, 1.0 / self.feats.labels.len() as f64).unwrap();
        let d_inputs = self.model.backward(&d_logits).unwrap();
        let mut grads = Vec::new();
        self.model.visit_params(&mut |name, p| grads.push((String::from(name), p.grad.clone())));
        for (name, g) in ["input.text", "input.audio", "input.video"].iter().zip(d_inputs) {
            grads.push((String::from(*name), g));
        }
        grads
    }

    fn visit_values(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.model.visit_params_mut(&mut |name, p| f(name, &mut p.value));
        f("input.text", &mut self.feats.text);
        f("input.audio", &mut self.feats.audio);
        f("input.video", &mut self.feats.video);
    }
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

pub const MODULES: [&str; 9] =
    ["lowrank", "matching", "lmam", "selfattn", "tfn", "lfm", "add", "encoder", "classifier"];

/// Small dimensions used throughout the suite.
const DIMS: [usize; 3] = [2, 2, 1];
const SEQ_LEN: usize = 4;
const RANK: usize = 2;

fn prefixed(tag: &str, reports: Vec<GroupReport>) -> Vec<GroupReport> {
    reports
        .into_iter()
        .map(|r| GroupReport { group: format!("{tag}:{}", r.group), ..r })
        .collect()
}

fn fusion_subject(rng: &mut Rng, method: FusionMethod, opts: &FusionOptions) -> Result<FusionSubject> {
    let mut layer = build_fusion(rng, method, &DIMS, opts)?;
    let parts: Vec<Matrix> = DIMS.iter().map(|&d| input_in_range(rng, SEQ_LEN, d)).collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    layer.clear_relu_margin(&refs, RELU_MARGIN)?;
    Ok(FusionSubject { layer, parts })
}

/// Runs the finite-difference checks for one named module (or "all"),
/// returning one report per parameter/input group.
pub fn run_module(module: &str, seed: u64, step: f64) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();
    let known = MODULES.contains(&module) || module == "all" || module == "model";
    if !known {
        return Err(Error::Validation(vec![format!(
            "unknown module '{module}' (expected one of {}, model, all)",
            MODULES.join("|")
        )]));
    }

    if module == "lowrank" || module == "all" {
        let mut subject = LowRankApplySubject {
            u: Param::new(Matrix::uniform_init(&mut rng, 5, RANK, 5)),
            v: Param::new(Matrix::uniform_init(&mut rng, 4, RANK, RANK)),
            bias: Param::new(input_in_range(&mut rng, 1, 4).scale(0.1)),
            x: input_in_range(&mut rng, SEQ_LEN, 5),
        };
        reports.extend(prefixed("lowrank", check_subject(&mut subject, step)));
    }

    if module == "matching" || module == "all" {
        for (tag, source) in [
            ("matching.qrows", ValueSource::QueryRows),
            ("matching.matched", ValueSource::MatchedFeatures),
        ] {
            let mut subject = MatchingSubject {
                layer: MatchingAttentionLayer::new_low_rank(&mut rng, 4, 5, RANK, source)?,
                m: input_in_range(&mut rng, SEQ_LEN, 4),
                i: input_in_range(&mut rng, SEQ_LEN, 5),
            };
            subject.layer.clear_relu_margin(&subject.m, &subject.i, RELU_MARGIN)?;
            reports.extend(prefixed(tag, check_subject(&mut subject, step)));
        }
    }

    if module == "lmam" || module == "all" {
        for (mode_tag, mode) in
            [("intra", LmamMode::Intra), ("cross", LmamMode::Cross), ("fused", LmamMode::Fused)]
        {
            for (src_tag, source) in
                [("qrows", ValueSource::QueryRows), ("matched", ValueSource::MatchedFeatures)]
            {
                let opts = FusionOptions {
                    rank: Some(RANK),
                    lmam_mode: mode,
                    value_source: source,
                    ..FusionOptions::default()
                };
                let mut subject = fusion_subject(&mut rng, FusionMethod::Lmam, &opts)?;
                reports.extend(prefixed(
                    &format!("lmam.{mode_tag}.{src_tag}"),
                    check_subject(&mut subject, step),
                ));
            }
        }
    }

    if module == "selfattn" || module == "all" {
        let mut subject = SelfAttnSubject {
            layer: SelfAttentionLayer::new(&mut rng, 4, 3),
            x: input_in_range(&mut rng, SEQ_LEN, 4),
        };
        reports.extend(prefixed("selfattn", check_subject(&mut subject, step)));
    }

    for (name, method) in [("tfn", FusionMethod::Tfn), ("lfm", FusionMethod::Lfm), ("add", FusionMethod::Add)]
    {
        if module == name || module == "all" {
            let opts = FusionOptions { rank: Some(RANK), out_dim: Some(3), ..FusionOptions::default() };
            let mut subject = fusion_subject(&mut rng, method, &opts)?;
            reports.extend(prefixed(name, check_subject(&mut subject, step)));
        }
    }

    if module == "encoder" || module == "all" {
        let mut subject = EncoderSubject {
            encoder: ContextEncoder::new(&mut rng, 3, 3)?,
            x: input_in_range(&mut rng, SEQ_LEN, 3),
        };
        reports.extend(prefixed("encoder", check_subject(&mut subject, step)));
    }

    if module == "classifier" || module == "all" {
        let mut subject = ClassifierSubject {
            linear: Linear::new(&mut rng, 4, 3),
            x: input_in_range(&mut rng, SEQ_LEN, 4),
            labels: vec![0, 2, 1, 2],
        };
        reports.extend(prefixed("classifier", check_subject(&mut subject, step)));
    }

    if module == "model" || module == "all" {
        for (tag, way) in [
            ("early", EmbedWay::Early),
            ("early_residual", EmbedWay::EarlyResidual),
            ("late", EmbedWay::Late),
        ] {
            let config = ExperimentConfig {
                d_t: DIMS[0],
                d_a: DIMS[1],
                d_v: DIMS[2],
                rank: Some(RANK),
                embed_way: way,
                ..ExperimentConfig::default()
            };
            let model = assemble_model(&config, 3, &mut rng)?;
            let feats = ModalityFeatures {
                text: input_in_range(&mut rng, SEQ_LEN, DIMS[0]),
                audio: input_in_range(&mut rng, SEQ_LEN, DIMS[1]),
                video: input_in_range(&mut rng, SEQ_LEN, DIMS[2]),
                labels: vec![0, 1, 2, 0],
            };
            let mut subject = ModelSubject { model, feats };
            subject.model.clear_relu_margin(&subject.feats, RELU_MARGIN)?;
            reports.extend(prefixed(&format!("model.{tag}"), check_subject(&mut subject, step)));
        }
    }

    Ok(reports)
}
