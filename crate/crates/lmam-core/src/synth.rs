//! Synthetic multimodal conversation generator. Labels follow a sticky Markov
//! chain (emotional inertia); each modality carries its class prototype at a
//! configurable strength plus Gaussian noise; and a sign-flipped interaction
//! component links the audio and video streams so that part of the class
//! signal is only recoverable from products of modality pairs, giving
//! interaction-aware fusion methods something to find.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Per-dialogue feature bundle: one `L x d` matrix per modality plus the
/// utterance labels.
#[derive(Clone, Debug)]
pub struct ModalityFeatures {
    pub text: Matrix,
    pub audio: Matrix,
    pub video: Matrix,
    pub labels: Vec<usize>,
}

impl ModalityFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.text.cols(), self.audio.cols(), self.video.cols())
    }
}

#[derive(Clone, Debug)]
pub struct Dialogue {
    pub id: String,
    pub features: ModalityFeatures,
}

/// Generator parameters. `gamma_*` control how much directly-separable class
/// signal each modality carries, `beta` the strength of the pairwise
/// interaction component, `rho` the label stay-probability and `sigma` the
/// additive noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub dialogues: usize,
    pub utterances: usize,
    pub beta: f64,
    pub gamma_t: f64,
    pub gamma_a: f64,
    pub gamma_v: f64,
    pub rho: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            d_t: 16,
            d_a: 16,
            d_v: 16,
            dialogues: 800,
            utterances: 6,
            beta: 1.0,
            gamma_t: 0.55,
            gamma_a: 0.4,
            gamma_v: 0.25,
            rho: 0.5,
            sigma: 0.8,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        for (name, d) in [("d_t", self.d_t), ("d_a", self.d_a), ("d_v", self.d_v)] {
            if d == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.dialogues == 0 {
            problems.push("dialogues must be positive".into());
        }
        if self.utterances == 0 {
            problems.push("utterances per dialogue must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            problems.push(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if self.sigma < 0.0 {
            problems.push(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.beta < 0.0 {
            problems.push(format!("beta must be non-negative, got {}", self.beta));
        }
        for (name, g) in [("gamma_t", self.gamma_t), ("gamma_a", self.gamma_a), ("gamma_v", self.gamma_v)] {
            if g < 0.0 {
                problems.push(format!("{name} must be non-negative, got {g}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

struct Prototypes {
    text: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
    /// Class-independent direction pairs linking audio and video. The class
    /// controls only the relative sign of each pair, so the interaction
    /// component is pure noise within a single modality and becomes class
    /// information only in audio x video products.
    inter_audio: Vec<Vec<f64>>,
    inter_video: Vec<Vec<f64>>,
}

fn draw_directions(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect()
}

/// Number of sign pairs needed to give every class a distinct pattern.
fn interaction_pairs(classes: usize) -> usize {
    let mut bits = 1;
    while (1usize << bits) < classes {
        bits += 1;
    }
    bits
}

/// Sign of pair `k` for `class`: distinct patterns per class.
fn pair_sign(class: usize, k: usize) -> f64 {
    if (class >> k) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Generates `spec.dialogues` dialogues deterministically from the seed.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<Vec<Dialogue>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let pairs = interaction_pairs(spec.num_classes);
    let protos = Prototypes {
        text: draw_directions(&mut rng, spec.num_classes, spec.d_t),
        audio: draw_directions(&mut rng, spec.num_classes, spec.d_a),
        video: draw_directions(&mut rng, spec.num_classes, spec.d_v),
        inter_audio: draw_directions(&mut rng, pairs, spec.d_a),
        inter_video: draw_directions(&mut rng, pairs, spec.d_v),
    };

    let mut dialogues = Vec::with_capacity(spec.dialogues);
    for d in 0..spec.dialogues {
        let labels = sample_labels(&mut rng, spec);
        let mut text = Matrix::zeros(spec.utterances, spec.d_t);
        let mut audio = Matrix::zeros(spec.utterances, spec.d_a);
        let mut video = Matrix::zeros(spec.utterances, spec.d_v);
        for (u, &class) in labels.iter().enumerate() {
            let signs: Vec<f64> = (0..pairs).map(|_| rng.sign()).collect();
            for (j, cell) in text.row_mut(u).iter_mut().enumerate() {
                *cell = spec.gamma_t * protos.text[class][j] + spec.sigma * rng.normal();
            }
            for (j, cell) in audio.row_mut(u).iter_mut().enumerate() {
                let mut inter = 0.0;
                for (k, &s) in signs.iter().enumerate() {
                    inter += s * protos.inter_audio[k][j];
                }
                *cell = spec.gamma_a * protos.audio[class][j]
                    + spec.beta * inter
                    + spec.sigma * rng.normal();
            }
            for (j, cell) in video.row_mut(u).iter_mut().enumerate() {
                let mut inter = 0.0;
                for (k, &s) in signs.iter().enumerate() {
                    inter += s * pair_sign(class, k) * protos.inter_video[k][j];
                }
                *cell = spec.gamma_v * protos.video[class][j]
                    + spec.beta * inter
                    + spec.sigma * rng.normal();
            }
        }
        dialogues.push(Dialogue {
            id: format!("dlg-{d:05}"),
            features: ModalityFeatures { text, audio, video, labels },
        });
    }
    Ok(dialogues)
}

/// Sticky Markov labels: keep the previous label with probability `rho`,
/// otherwise resample uniformly over all classes, so `rho = 0` gives an
/// i.i.d. uniform sequence.
fn sample_labels(rng: &mut Rng, spec: &GeneratorSpec) -> Vec<usize> {
    let mut labels = Vec::with_capacity(spec.utterances);
    let mut current = rng.below(spec.num_classes);
    labels.push(current);
    for _ in 1..spec.utterances {
        if rng.uniform() >= spec.rho {
            current = rng.below(spec.num_classes);
        }
        labels.push(current);
    }
    labels
}
