//! Model assembly: fusion layer + context encoder(s) + classifier head,
//! wired in one of three embedding ways — fusion before encoding (early),
//! early with a residual over the 1-padded concatenation, or per-modality
//! encoding followed by fusion (late).

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{pad_ones, LmamMode, ValueSource};
use crate::error::{Error, Result};
use crate::fusion::{build_fusion, FusionLayer, FusionMethod, FusionOptions};
use crate::matrix::{concat_cols, split_cols, Matrix};
use crate::nn::{ContextEncoder, Linear};
use crate::param::{ParamVisitor, ParamVisitorMut};
use crate::rng::Rng;
use crate::synth::ModalityFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedWay {
    /// Fuse raw modalities, then encode context, then classify.
    Early,
    /// Early, but the fused features are added to the 1-padded concatenation
    /// of the raw modalities before encoding.
    EarlyResidual,
    /// Encode each modality's context first, then fuse, then classify.
    Late,
}

impl EmbedWay {
    pub fn name(&self) -> &'static str {
        match self {
            EmbedWay::Early => "early",
            EmbedWay::EarlyResidual => "early_residual",
            EmbedWay::Late => "late",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(EmbedWay::Early),
            "early_residual" | "early-residual" => Ok(EmbedWay::EarlyResidual),
            "late" => Ok(EmbedWay::Late),
            other => Err(Error::Validation(vec![format!(
                "unknown embedding way '{other}' (expected early|early_residual|late)"
            )])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Validation(vec![format!(
                "unknown optimizer '{other}' (expected sgd|adam)"
            )])),
        }
    }
}

/// Which modalities feed the model; used for the unimodal ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub text: bool,
    pub audio: bool,
    pub video: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self { text: true, audio: true, video: true }
    }
}

impl ModalityMask {
    /// Parses masks written as subsets of "tav".
    pub fn parse(s: &str) -> Result<Self> {
        let mut mask = Self { text: false, audio: false, video: false };
        for ch in s.chars() {
            match ch {
                't' => mask.text = true,
                'a' => mask.audio = true,
                'v' => mask.video = true,
                other => {
                    return Err(Error::Validation(vec![format!(
                        "unknown modality '{other}' in mask '{s}' (use letters t, a, v)"
                    )]))
                }
            }
        }
        if !(mask.text || mask.audio || mask.video) {
            return Err(Error::Validation(vec!["modality mask selects nothing".into()]));
        }
        Ok(mask)
    }

    pub fn as_string(&self) -> String {
        let mut s = String::new();
        if self.text {
            s.push('t');
        }
        if self.audio {
            s.push('a');
        }
        if self.video {
            s.push('v');
        }
        s
    }

    pub fn count(&self) -> usize {
        usize::from(self.text) + usize::from(self.audio) + usize::from(self.video)
    }

    pub fn select<'a>(&self, feats: &'a ModalityFeatures) -> Vec<&'a Matrix> {
        let mut parts = Vec::new();
        if self.text {
            parts.push(&feats.text);
        }
        if self.audio {
            parts.push(&feats.audio);
        }
        if self.video {
            parts.push(&feats.video);
        }
        parts
    }

    pub fn select_dims(&self, d_t: usize, d_a: usize, d_v: usize) -> Vec<usize> {
        let mut dims = Vec::new();
        if self.text {
            dims.push(d_t);
        }
        if self.audio {
            dims.push(d_a);
        }
        if self.video {
            dims.push(d_v);
        }
        dims
    }
}

/// Everything needed to rebuild a model and its training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Projection width of the attention query. `None` derives it from the
    /// fusion wiring; a set value is validated against the derived width.
    pub d_q: Option<usize>,
    /// Factorization rank; `None` selects dense query weights.
    pub rank: Option<usize>,
    pub fusion: FusionMethod,
    pub embed_way: EmbedWay,
    pub lmam_mode: LmamMode,
    pub value_source: ValueSource,
    pub pad_with_one: bool,
    pub modalities: ModalityMask,
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d_t: 16,
            d_a: 16,
            d_v: 16,
            d_q: None,
            rank: Some(45),
            fusion: FusionMethod::Lmam,
            embed_way: EmbedWay::EarlyResidual,
            lmam_mode: LmamMode::Fused,
            value_source: ValueSource::QueryRows,
            pad_with_one: true,
            modalities: ModalityMask::default(),
            window: 3,
            epochs: 24,
            batch_size: 32,
            learning_rate: 0.005,
            optimizer: OptimizerKind::Adam,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn active_dims(&self) -> Vec<usize> {
        self.modalities.select_dims(self.d_t, self.d_a, self.d_v)
    }

    pub fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            out_dim: None,
            rank: self.rank,
            lmam_mode: self.lmam_mode,
            value_source: self.value_source,
            pad_with_one: self.pad_with_one,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut problems = Vec::new();
        if num_classes < 2 {
            problems.push(format!("need at least 2 classes, got {num_classes}"));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if self.window == 0 || self.window % 2 == 0 {
            problems.push(format!("window must be odd and >= 1, got {}", self.window));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            problems.push(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Clone, Copy)]
enum ForwardCache {
    Early,
    EarlyResidual,
    Late,
}

/// An assembled classifier pipeline over one dialogue at a time.
pub struct Model {
    config: ExperimentConfig,
    num_classes: usize,
    dims: Vec<usize>,
    fusion: Box<dyn FusionLayer>,
    encoders: Vec<ContextEncoder>,
    classifier: Linear,
    cache: Option<ForwardCache>,
}

/// Builds the model described by `config`. Dimension conflicts surface here,
/// not mid-training.
pub fn assemble_model(config: &ExperimentConfig, num_classes: usize, rng: &mut Rng) -> Result<Model> {
    config.validate(num_classes)?;
    let dims = config.active_dims();
    let opts = config.fusion_options();

    match config.embed_way {
        EmbedWay::Early | EmbedWay::EarlyResidual => {
            let fusion = build_fusion(rng, config.fusion, &dims, &opts)?;
            if config.embed_way == EmbedWay::EarlyResidual {
                let base_width: usize = dims.iter().map(|d| d + 1).sum();
                if fusion.output_dim() != base_width {
                    return Err(Error::Config(format!(
                        "early residual needs the fusion output width {} to equal the \
                         1-padded concatenation width {base_width}",
                        fusion.output_dim()
                    )));
                }
            }
            check_d_q(config, fusion.as_ref())?;
            let encoder = ContextEncoder::new(rng, fusion.output_dim(), config.window)?;
            let classifier = Linear::new(rng, fusion.output_dim(), num_classes);
            Ok(Model {
                config: config.clone(),
                num_classes,
                dims,
                fusion,
                encoders: vec![encoder],
                classifier,
                cache: None,
            })
        }
        EmbedWay::Late => {
            let encoders = dims
                .iter()
                .map(|&d| ContextEncoder::new(rng, d, config.window))
                .collect::<Result<Vec<_>>>()?;
            let fusion = build_fusion(rng, config.fusion, &dims, &opts)?;
            check_d_q(config, fusion.as_ref())?;
            let classifier = Linear::new(rng, fusion.output_dim(), num_classes);
            Ok(Model {
                config: config.clone(),
                num_classes,
                dims,
                fusion,
                encoders,
                classifier,
                cache: None,
            })
        }
    }
}

fn check_d_q(config: &ExperimentConfig, fusion: &dyn FusionLayer) -> Result<()> {
    if let Some(d_q) = config.d_q {
        if config.fusion == FusionMethod::Lmam && config.lmam_mode == LmamMode::Fused {
            let derived = fusion.output_dim();
            if d_q != derived {
                return Err(Error::Config(format!(
                    "d_q = {d_q} conflicts with the derived fused projection width {derived}"
                )));
            }
        }
    }
    Ok(())
}

impl Model {
    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fusion(&self) -> &dyn FusionLayer {
        self.fusion.as_ref()
    }

    pub fn fusion_mut(&mut self) -> &mut dyn FusionLayer {
        self.fusion.as_mut()
    }

    fn residual_base(&self, parts: &[&Matrix]) -> Result<Matrix> {
        let padded: Vec<Matrix> = parts.iter().map(|p| pad_ones(p)).collect();
        let refs: Vec<&Matrix> = padded.iter().collect();
        concat_cols(&refs)
    }

    /// Training forward over one dialogue; caches for backward.
    pub fn forward(&mut self, feats: &ModalityFeatures) -> Result<Matrix> {
        let parts = self.config.modalities.select(feats);
        match self.config.embed_way {
            EmbedWay::Early => {
                let fused = self.fusion.forward(&parts)?;
                let encoded = self.encoders[0].forward(&fused)?;
                let logits = self.classifier.forward(&encoded)?;
                self.cache = Some(ForwardCache::Early);
                Ok(logits)
            }
            EmbedWay::EarlyResidual => {
                let fused = self.fusion.forward(&parts)?;
                let base = self.residual_base(&parts)?;
                let mixed = fused.add(&base)?;
                let encoded = self.encoders[0].forward(&mixed)?;
                let logits = self.classifier.forward(&encoded)?;
                self.cache = Some(ForwardCache::EarlyResidual);
                Ok(logits)
            }
            EmbedWay::Late => {
                let encoded: Vec<Matrix> = self
                    .encoders
                    .iter_mut()
                    .zip(&parts)
                    .map(|(enc, p)| enc.forward(p))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Matrix> = encoded.iter().collect();
                let fused = self.fusion.forward(&refs)?;
                let logits = self.classifier.forward(&fused)?;
                self.cache = Some(ForwardCache::Late);
                Ok(logits)
            }
        }
    }

    /// Pure forward pass used for evaluation.
    pub fn infer(&self, feats: &ModalityFeatures) -> Result<Matrix> {
        let parts = self.config.modalities.select(feats);
        match self.config.embed_way {
            EmbedWay::Early => {
                let fused = self.fusion.infer(&parts)?;
                let encoded = self.encoders[0].infer(&fused)?;
                self.classifier.infer(&encoded)
            }
            EmbedWay::EarlyResidual => {
                let fused = self.fusion.infer(&parts)?;
                let base = self.residual_base(&parts)?;
                let encoded = self.encoders[0].infer(&fused.add(&base)?)?;
                self.classifier.infer(&encoded)
            }
            EmbedWay::Late => {
                let encoded: Vec<Matrix> = self
                    .encoders
                    .iter()
                    .zip(&parts)
                    .map(|(enc, p)| enc.infer(p))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Matrix> = encoded.iter().collect();
                let fused = self.fusion.infer(&refs)?;
                self.classifier.infer(&fused)
            }
        }
    }

    /// Backward from the logit gradient; returns per-modality input gradients.
    pub fn backward(&mut self, d_logits: &Matrix) -> Result<Vec<Matrix>> {
        let cache = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        let d_encoded = self.classifier.backward(d_logits)?;
        match cache {
            ForwardCache::Early => {
                let d_fused = self.encoders[0].backward(&d_encoded)?;
                self.fusion.backward(&d_fused)
            }
            ForwardCache::EarlyResidual => {
                let d_mixed = self.encoders[0].backward(&d_encoded)?;
                // d_mixed flows both into the fusion output and the padded base.
                let mut grads = self.fusion.backward(&d_mixed)?;
                let widths: Vec<usize> = self.dims.iter().map(|d| d + 1).collect();
                let base_pieces = split_cols(&d_mixed, &widths)?;
                for (g, piece) in grads.iter_mut().zip(base_pieces) {
                    // Drop each piece's padding column and accumulate.
                    for r in 0..g.rows() {
                        let src = &piece.row(r)[..g.cols()];
                        for (t, s) in g.row_mut(r).iter_mut().zip(src) {
                            *t += s;
                        }
                    }
                }
                Ok(grads)
            }
            ForwardCache::Late => {
                let d_parts = self.fusion.backward(&d_encoded)?;
                let mut grads = Vec::with_capacity(d_parts.len());
                for (enc, d_p) in self.encoders.iter_mut().zip(&d_parts) {
                    grads.push(enc.backward(d_p)?);
                }
                Ok(grads)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn visit_params(&self, f: ParamVisitor) {
        self.fusion.visit_params("fusion", f);
        for (i, enc) in self.encoders.iter().enumerate() {
            enc.visit_params(&format!("encoder{i}"), f);
        }
        self.classifier.visit_params("classifier", f);
    }

    pub fn visit_params_mut(&mut self, f: ParamVisitorMut) {
        self.fusion.visit_params_mut("fusion", f);
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_params_mut(&format!("encoder{i}"), f);
        }
        self.classifier.visit_params_mut("classifier", f);
    }

    /// Finite-difference support: clears relu kinks in the fusion layer at the
    /// operating point for `feats`.
    pub fn clear_relu_margin(&mut self, feats: &ModalityFeatures, margin: f64) -> Result<()> {
        let parts = self.config.modalities.select(feats);
        match self.config.embed_way {
            EmbedWay::Early | EmbedWay::EarlyResidual => self.fusion.clear_relu_margin(&parts, margin),
            EmbedWay::Late => {
                let encoded: Vec<Matrix> = self
                    .encoders
                    .iter()
                    .zip(&parts)
                    .map(|(enc, p)| enc.infer(p))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Matrix> = encoded.iter().collect();
                self.fusion.clear_relu_margin(&refs, margin)
            }
        }
    }

    /// Total trainable parameter count across fusion, encoders and classifier.
    pub fn trainable_parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.len());
        total
    }

    /// Multiply-accumulate count for one forward pass over `l` utterances.
    pub fn forward_madds(&self, l: usize) -> u64 {
        let enc: u64 = self.encoders.iter().map(|e| e.forward_madds(l)).sum();
        self.fusion.forward_madds(l) + enc + self.classifier.forward_madds(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, GeneratorSpec};

    fn tiny_feats(rng: &mut Rng, l: usize, dims: (usize, usize, usize)) -> ModalityFeatures {
        ModalityFeatures {
            text: Matrix::uniform_init(rng, l, dims.0, 1),
            audio: Matrix::uniform_init(rng, l, dims.1, 1),
            video: Matrix::uniform_init(rng, l, dims.2, 1),
            labels: (0..l).map(|i| i % 2).collect(),
        }
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            d_t: 3,
            d_a: 2,
            d_v: 2,
            rank: Some(2),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn early_concat_reduces_to_concat_encode_classify() {
        let mut rng = Rng::new(1);
        let config = ExperimentConfig {
            fusion: FusionMethod::Concat,
            embed_way: EmbedWay::Early,
            ..tiny_config()
        };
        let model = assemble_model(&config, 2, &mut rng).unwrap();
        let feats = tiny_feats(&mut rng, 4, (3, 2, 2));
        let logits = model.infer(&feats).unwrap();

        let fused = concat_cols(&[&feats.text, &feats.audio, &feats.video]).unwrap();
        let encoded = model.encoders[0].infer(&fused).unwrap();
        let want = model.classifier.infer(&encoded).unwrap();
        assert_eq!(logits, want);
    }

    #[test]
    fn early_residual_width_law_across_random_dims() {
        let mut rng = Rng::new(2);
        for (dt, da, dv) in [(3usize, 2usize, 2usize), (4, 4, 4), (2, 5, 3)] {
            let config = ExperimentConfig {
                d_t: dt,
                d_a: da,
                d_v: dv,
                rank: Some(2),
                ..ExperimentConfig::default()
            };
            let model = assemble_model(&config, 3, &mut rng).unwrap();
            let feats = tiny_feats(&mut rng, 3, (dt, da, dv));
            let logits = model.infer(&feats).unwrap();
            assert_eq!(logits.shape(), (3, 3));
            assert_eq!(model.fusion.output_dim(), dt + da + dv + 3);
        }
    }

    #[test]
    fn early_residual_rejects_width_mismatched_fusion() {
        let mut rng = Rng::new(3);
        let config = ExperimentConfig {
            fusion: FusionMethod::Concat, // output width lacks the pad columns
            embed_way: EmbedWay::EarlyResidual,
            ..tiny_config()
        };
        assert!(matches!(assemble_model(&config, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn late_single_modality_is_a_unimodal_pipeline() {
        let mut rng = Rng::new(4);
        let config = ExperimentConfig {
            embed_way: EmbedWay::Late,
            fusion: FusionMethod::Concat,
            modalities: ModalityMask { text: true, audio: false, video: false },
            ..tiny_config()
        };
        let model = assemble_model(&config, 2, &mut rng).unwrap();
        let feats = tiny_feats(&mut rng, 4, (3, 2, 2));
        let logits = model.infer(&feats).unwrap();

        let encoded = model.encoders[0].infer(&feats.text).unwrap();
        let want = model.classifier.infer(&encoded).unwrap();
        assert_eq!(logits, want);
    }

    #[test]
    fn d_q_conflict_is_a_configuration_error() {
        let mut rng = Rng::new(5);
        let config = ExperimentConfig { d_q: Some(99), ..tiny_config() };
        assert!(matches!(assemble_model(&config, 2, &mut rng), Err(Error::Config(_))));
        let derived = 3 + 2 + 2 + 3;
        let config = ExperimentConfig { d_q: Some(derived), ..tiny_config() };
        assert!(assemble_model(&config, 2, &mut rng).is_ok());
    }

    #[test]
    fn forward_backward_round_trip_on_synthetic_data() {
        let mut rng = Rng::new(6);
        let spec = GeneratorSpec { dialogues: 2, utterances: 4, d_t: 3, d_a: 2, d_v: 2, ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        for way in [EmbedWay::Early, EmbedWay::EarlyResidual, EmbedWay::Late] {
            let config = ExperimentConfig { embed_way: way, ..tiny_config() };
            let mut model = assemble_model(&config, spec.num_classes, &mut rng).unwrap();
            let logits = model.forward(&data[0].features).unwrap();
            assert_eq!(logits.shape(), (4, 3));
            let grads = model.backward(&Matrix::ones(4, 3)).unwrap();
            assert_eq!(grads.len(), 3);
            assert_eq!(grads[0].shape(), (4, 3));
            assert_eq!(grads[1].shape(), (4, 2));
            assert_eq!(grads[2].shape(), (4, 2));
        }
    }
}
