//! The cross-modal fusion methods compared by the harness, all behind one
//! differentiable [`FusionLayer`] contract: elementwise add of projected
//! modalities, plain concatenation, tensor fusion (3-way outer product of
//! 1-padded features), low-rank multimodal fusion (rank-factorized product),
//! the low-rank matching attention module, and plain self-attention.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{pad_ones, LmamMode, LmamModule, SelfAttentionLayer, ValueSource};
use crate::error::{Error, Result};
use crate::matrix::{concat_cols, split_cols, Matrix};
use crate::param::{Param, ParamVisitor, ParamVisitorMut};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Add,
    Concat,
    Tfn,
    Lfm,
    Lmam,
    SelfAttn,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 6] = [
        FusionMethod::Add,
        FusionMethod::Concat,
        FusionMethod::Tfn,
        FusionMethod::Lfm,
        FusionMethod::Lmam,
        FusionMethod::SelfAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMethod::Add => "add",
            FusionMethod::Concat => "concat",
            FusionMethod::Tfn => "tfn",
            FusionMethod::Lfm => "lfm",
            FusionMethod::Lmam => "lmam",
            FusionMethod::SelfAttn => "selfattn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMethod::Add),
            "concat" => Ok(FusionMethod::Concat),
            "tfn" => Ok(FusionMethod::Tfn),
            "lfm" => Ok(FusionMethod::Lfm),
            "lmam" => Ok(FusionMethod::Lmam),
            "selfattn" => Ok(FusionMethod::SelfAttn),
            other => Err(Error::Validation(vec![format!(
                "unknown fusion method '{other}' (expected add|concat|tfn|lfm|lmam|selfattn)"
            )])),
        }
    }
}

impl core::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Common contract: map per-modality `L x d_m` matrices to one `L x output_dim`
/// matrix, expose a paired backward pass, and count parameters exactly.
pub trait FusionLayer {
    fn method(&self) -> FusionMethod;
    fn output_dim(&self) -> usize;
    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix>;
    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix>;
    /// Returns per-modality input gradients; parameter gradients accumulate.
    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>>;
    fn visit_params(&self, prefix: &str, f: ParamVisitor);
    fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut);
    /// Parameters attributable to the fusion itself (for attention methods:
    /// the attention projections, the figure quoted in comparisons).
    fn fusion_parameter_count(&self) -> usize;
    /// Multiply-accumulate count of one forward pass over `l` utterances.
    fn forward_madds(&self, l: usize) -> u64;
    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
    /// Finite-difference support: pushes any relu kink away from the operating
    /// point for these inputs. No-op for kink-free methods.
    fn clear_relu_margin(&mut self, _parts: &[&Matrix], _margin: f64) -> Result<()> {
        Ok(())
    }
}

fn check_parts(dims: &[usize], parts: &[&Matrix], op: &'static str) -> Result<usize> {
    if parts.len() != dims.len() {
        return Err(Error::Config(format!(
            "{op}: expected {} modalities, got {}",
            dims.len(),
            parts.len()
        )));
    }
    let l = parts[0].rows();
    for (p, &d) in parts.iter().zip(dims) {
        if p.cols() != d {
            return Err(Error::Shape { op, left: (l, d), right: p.shape() });
        }
        if p.rows() != l {
            return Err(Error::Shape { op, left: parts[0].shape(), right: p.shape() });
        }
    }
    Ok(l)
}

// ---------------------------------------------------------------------------
// Add fusion
// ---------------------------------------------------------------------------

/// Projects every modality to a common width and sums: one weight per
/// modality plus a single shared bias, all charged to the method.
pub struct AddFusion {
    dims: Vec<usize>,
    out_dim: usize,
    weights: Vec<Param>,
    bias: Param,
    cache: Option<Vec<Matrix>>,
}

impl AddFusion {
    pub fn new(rng: &mut Rng, dims: &[usize], out_dim: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("add fusion needs at least one modality".into()));
        }
        let weights = dims
            .iter()
            .map(|&d| Param::new(Matrix::uniform_init(rng, d, out_dim, d)))
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            out_dim,
            weights,
            bias: Param::new(Matrix::zeros(1, out_dim)),
            cache: None,
        })
    }

    fn compute(&self, parts: &[&Matrix]) -> Result<Matrix> {
        let l = check_parts(&self.dims, parts, "add_fusion")?;
        let mut out = Matrix::zeros(l, self.out_dim);
        for (p, w) in parts.iter().zip(&self.weights) {
            out.add_assign(&p.matmul(&w.value)?)?;
        }
        out.add_row(&self.bias.value)
    }
}

impl FusionLayer for AddFusion {
    fn method(&self) -> FusionMethod {
        FusionMethod::Add
    }

    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        let out = self.compute(parts)?;
        self.cache = Some(parts.iter().map(|p| (*p).clone()).collect());
        Ok(out)
    }

    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix> {
        self.compute(parts)
    }

    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>> {
        let parts = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        self.bias.accumulate(&d_out.col_sums());
        let mut grads = Vec::with_capacity(parts.len());
        for (p, w) in parts.iter().zip(&mut self.weights) {
            w.accumulate(&p.transpose().matmul(d_out)?);
            grads.push(d_out.matmul(&w.value.transpose())?);
        }
        Ok(grads)
    }

    fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        for (i, w) in self.weights.iter().enumerate() {
            f(&format!("{prefix}.proj{i}"), w);
        }
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        for (i, w) in self.weights.iter_mut().enumerate() {
            f(&format!("{prefix}.proj{i}"), w);
        }
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    fn fusion_parameter_count(&self) -> usize {
        self.dims.iter().map(|d| d * self.out_dim).sum::<usize>() + self.out_dim
    }

    fn forward_madds(&self, l: usize) -> u64 {
        self.dims.iter().map(|&d| (l * d * self.out_dim) as u64).sum()
    }
}

// ---------------------------------------------------------------------------
// Concat fusion
// ---------------------------------------------------------------------------

/// Column concatenation; zero parameters.
pub struct ConcatFusion {
    dims: Vec<usize>,
}

impl ConcatFusion {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("concat fusion needs at least one modality".into()));
        }
        Ok(Self { dims: dims.to_vec() })
    }
}

impl FusionLayer for ConcatFusion {
    fn method(&self) -> FusionMethod {
        FusionMethod::Concat
    }

    fn output_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        check_parts(&self.dims, parts, "concat_fusion")?;
        concat_cols(parts)
    }

    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix> {
        check_parts(&self.dims, parts, "concat_fusion")?;
        concat_cols(parts)
    }

    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>> {
        split_cols(d_out, &self.dims)
    }

    fn visit_params(&self, _prefix: &str, _f: ParamVisitor) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: ParamVisitorMut) {}

    fn fusion_parameter_count(&self) -> usize {
        0
    }

    fn forward_madds(&self, _l: usize) -> u64 {
        0
    }
}

// ---------------------------------------------------------------------------
// Tensor fusion (TFN)
// ---------------------------------------------------------------------------

/// Per-utterance outer product of 1-padded modality vectors, flattened
/// modality-major (text index slowest, then audio, then video) and mapped to
/// the output width by a dense linear layer.
pub struct TfnFusion {
    dims: Vec<usize>,
    out_dim: usize,
    weight: Param, // prod(d_m + 1) x out_dim
    bias: Param,
    cache: Option<(Vec<Matrix>, Matrix)>, // padded parts, flattened tensor rows
}

/// Flattened outer product of 1-padded rows; exposed for index-level tests.
pub fn tfn_tensor_row(rows: &[&[f64]]) -> Vec<f64> {
    let padded: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.push(1.0);
            v
        })
        .collect();
    let total: usize = padded.iter().map(|p| p.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; padded.len()];
    for _ in 0..total {
        let mut prod = 1.0;
        for (m, &i) in idx.iter().enumerate() {
            prod *= padded[m][i];
        }
        out.push(prod);
        // Mixed-radix increment, last (fastest) digit first.
        for m in (0..idx.len()).rev() {
            idx[m] += 1;
            if idx[m] < padded[m].len() {
                break;
            }
            idx[m] = 0;
        }
    }
    out
}

impl TfnFusion {
    pub fn new(rng: &mut Rng, dims: &[usize], out_dim: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("tensor fusion needs at least one modality".into()));
        }
        let prod: usize = dims.iter().map(|d| d + 1).product();
        Ok(Self {
            dims: dims.to_vec(),
            out_dim,
            weight: Param::new(Matrix::uniform_init(rng, prod, out_dim, prod)),
            bias: Param::new(Matrix::zeros(1, out_dim)),
            cache: None,
        })
    }

    pub fn tensor_len(&self) -> usize {
        self.dims.iter().map(|d| d + 1).product()
    }

    fn flatten(&self, parts: &[&Matrix]) -> Result<(Vec<Matrix>, Matrix)> {
        let l = check_parts(&self.dims, parts, "tfn_fusion")?;
        let padded: Vec<Matrix> = parts.iter().map(|p| pad_ones(p)).collect();
        let mut z = Matrix::zeros(l, self.tensor_len());
        for r in 0..l {
            let rows: Vec<&[f64]> = parts.iter().map(|p| p.row(r)).collect();
            z.row_mut(r).copy_from_slice(&tfn_tensor_row(&rows));
        }
        Ok((padded, z))
    }

    fn compute(&self, parts: &[&Matrix]) -> Result<(Vec<Matrix>, Matrix, Matrix)> {
        let (padded, z) = self.flatten(parts)?;
        let out = z.matmul(&self.weight.value)?.add_row(&self.bias.value)?;
        Ok((padded, z, out))
    }
}

impl FusionLayer for TfnFusion {
    fn method(&self) -> FusionMethod {
        FusionMethod::Tfn
    }

    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        let (padded, z, out) = self.compute(parts)?;
        self.cache = Some((padded, z));
        Ok(out)
    }

    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix> {
        Ok(self.compute(parts)?.2)
    }

    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>> {
        let (padded, z) = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        self.weight.accumulate(&z.transpose().matmul(d_out)?);
        self.bias.accumulate(&d_out.col_sums());
        let d_z = d_out.matmul(&self.weight.value.transpose())?;

        let widths: Vec<usize> = self.dims.iter().map(|d| d + 1).collect();
        let l = d_z.rows();
        let mut d_padded: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(l, w)).collect();
        for r in 0..l {
            let mut idx = vec![0usize; widths.len()];
            for flat in 0..d_z.cols() {
                let g = d_z[(r, flat)];
                if g != 0.0 {
                    for m in 0..widths.len() {
                        // Product of every other modality's padded entry.
                        let mut prod = 1.0;
                        for (m2, &i2) in idx.iter().enumerate() {
                            if m2 != m {
                                prod *= padded[m2][(r, i2)];
                            }
                        }
                        d_padded[m][(r, idx[m])] += g * prod;
                    }
                }
                for m in (0..idx.len()).rev() {
                    idx[m] += 1;
                    if idx[m] < widths[m] {
                        break;
                    }
                    idx[m] = 0;
                }
            }
        }
        // Drop the padding-column gradients.
        Ok(d_padded
            .iter()
            .zip(&self.dims)
            .map(|(g, &d)| {
                let mut out = Matrix::zeros(l, d);
                for r in 0..l {
                    out.row_mut(r).copy_from_slice(&g.row(r)[..d]);
                }
                out
            })
            .collect())
    }

    fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    fn fusion_parameter_count(&self) -> usize {
        self.out_dim * self.tensor_len() + self.out_dim
    }

    fn forward_madds(&self, l: usize) -> u64 {
        let p = self.tensor_len() as u64;
        let k = self.dims.len() as u64;
        l as u64 * (p * k.saturating_sub(1) + p * self.out_dim as u64)
    }
}

// ---------------------------------------------------------------------------
// Low-rank multimodal fusion (LFM)
// ---------------------------------------------------------------------------

/// Rank-factorized equivalent of the tensor fusion product: the fused vector
/// is the sum over rank factors of the elementwise product of per-modality
/// projections of the 1-padded inputs. No bias term.
pub struct LfmFusion {
    dims: Vec<usize>,
    out_dim: usize,
    rank: usize,
    /// One factor matrix per modality, `(d_m + 1) x (rank * out_dim)`,
    /// rank-major blocks of `out_dim` columns.
    factors: Vec<Param>,
    cache: Option<(Vec<Matrix>, Vec<Matrix>)>, // padded inputs, projections
}

impl LfmFusion {
    pub fn new(rng: &mut Rng, dims: &[usize], out_dim: usize, rank: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("lfm fusion needs at least one modality".into()));
        }
        if rank == 0 {
            return Err(Error::Config("lfm rank must be at least 1".into()));
        }
        let factors = dims
            .iter()
            .map(|&d| Param::new(Matrix::uniform_init(rng, d + 1, rank * out_dim, d + 1)))
            .collect();
        Ok(Self { dims: dims.to_vec(), out_dim, rank, factors, cache: None })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn compute(&self, parts: &[&Matrix]) -> Result<(Vec<Matrix>, Vec<Matrix>, Matrix)> {
        let l = check_parts(&self.dims, parts, "lfm_fusion")?;
        let padded: Vec<Matrix> = parts.iter().map(|p| pad_ones(p)).collect();
        let projections: Vec<Matrix> = padded
            .iter()
            .zip(&self.factors)
            .map(|(p, w)| p.matmul(&w.value))
            .collect::<Result<_>>()?;
        let mut out = Matrix::zeros(l, self.out_dim);
        for j in 0..self.rank {
            let lo = j * self.out_dim;
            for r in 0..l {
                for c in 0..self.out_dim {
                    let mut prod = 1.0;
                    for proj in &projections {
                        prod *= proj[(r, lo + c)];
                    }
                    out[(r, c)] += prod;
                }
            }
        }
        Ok((padded, projections, out))
    }
}

impl FusionLayer for LfmFusion {
    fn method(&self) -> FusionMethod {
        FusionMethod::Lfm
    }

    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        let (padded, projections, out) = self.compute(parts)?;
        self.cache = Some((padded, projections));
        Ok(out)
    }

    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix> {
        Ok(self.compute(parts)?.2)
    }

    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>> {
        let (padded, projections) =
            self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        let l = d_out.rows();
        let n_mod = self.dims.len();
        let mut d_proj: Vec<Matrix> =
            projections.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        for j in 0..self.rank {
            let lo = j * self.out_dim;
            for r in 0..l {
                for c in 0..self.out_dim {
                    let g = d_out[(r, c)];
                    if g == 0.0 {
                        continue;
                    }
                    for m in 0..n_mod {
                        let mut prod = 1.0;
                        for (m2, proj) in projections.iter().enumerate() {
                            if m2 != m {
                                prod *= proj[(r, lo + c)];
                            }
                        }
                        d_proj[m][(r, lo + c)] += g * prod;
                    }
                }
            }
        }
        let mut grads = Vec::with_capacity(n_mod);
        for m in 0..n_mod {
            self.factors[m].accumulate(&padded[m].transpose().matmul(&d_proj[m])?);
            let d_padded = d_proj[m].matmul(&self.factors[m].value.transpose())?;
            let mut d_x = Matrix::zeros(l, self.dims[m]);
            for r in 0..l {
                d_x.row_mut(r).copy_from_slice(&d_padded.row(r)[..self.dims[m]]);
            }
            grads.push(d_x);
        }
        Ok(grads)
    }

    fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        for (i, w) in self.factors.iter().enumerate() {
            f(&format!("{prefix}.factor{i}"), w);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        for (i, w) in self.factors.iter_mut().enumerate() {
            f(&format!("{prefix}.factor{i}"), w);
        }
    }

    fn fusion_parameter_count(&self) -> usize {
        self.rank * self.dims.iter().map(|&d| self.out_dim * (d + 1)).sum::<usize>()
    }

    fn forward_madds(&self, l: usize) -> u64 {
        let proj: u64 = self.dims.iter().map(|&d| ((d + 1) * self.rank * self.out_dim) as u64).sum();
        let mix = (self.rank * self.out_dim * self.dims.len()) as u64;
        l as u64 * (proj + mix)
    }
}

// ---------------------------------------------------------------------------
// Attention-based fusion adapters
// ---------------------------------------------------------------------------

impl FusionLayer for LmamModule {
    fn method(&self) -> FusionMethod {
        FusionMethod::Lmam
    }

    fn output_dim(&self) -> usize {
        LmamModule::output_dim(self)
    }

    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        LmamModule::forward(self, parts)
    }

    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix> {
        LmamModule::infer(self, parts)
    }

    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>> {
        LmamModule::backward(self, d_out)
    }

    fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        LmamModule::visit_params(self, prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        LmamModule::visit_params_mut(self, prefix, f);
    }

    fn fusion_parameter_count(&self) -> usize {
        self.attention_parameter_count()
    }

    fn forward_madds(&self, l: usize) -> u64 {
        LmamModule::forward_madds(self, l)
    }

    fn clear_relu_margin(&mut self, parts: &[&Matrix], margin: f64) -> Result<()> {
        LmamModule::clear_relu_margin(self, parts, margin)
    }
}

/// Self-attention over the (optionally 1-padded) concatenation of modalities,
/// the direct parameter-count and timing comparison point for the matching
/// attention module.
pub struct SelfAttnFusion {
    dims: Vec<usize>,
    pad_with_one: bool,
    layer: SelfAttentionLayer,
}

impl SelfAttnFusion {
    pub fn new(rng: &mut Rng, dims: &[usize], pad_with_one: bool) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("self-attention fusion needs at least one modality".into()));
        }
        let width: usize = dims.iter().map(|d| d + usize::from(pad_with_one)).sum();
        Ok(Self { dims: dims.to_vec(), pad_with_one, layer: SelfAttentionLayer::new(rng, width, width) })
    }

    fn fuse_input(&self, parts: &[&Matrix]) -> Result<Matrix> {
        check_parts(&self.dims, parts, "selfattn_fusion")?;
        if self.pad_with_one {
            let padded: Vec<Matrix> = parts.iter().map(|p| pad_ones(p)).collect();
            let refs: Vec<&Matrix> = padded.iter().collect();
            concat_cols(&refs)
        } else {
            concat_cols(parts)
        }
    }
}

impl FusionLayer for SelfAttnFusion {
    fn method(&self) -> FusionMethod {
        FusionMethod::SelfAttn
    }

    fn output_dim(&self) -> usize {
        self.layer.d_out()
    }

    fn forward(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        let fused = self.fuse_input(parts)?;
        self.layer.forward(&fused)
    }

    fn infer(&self, parts: &[&Matrix]) -> Result<Matrix> {
        let fused = self.fuse_input(parts)?;
        self.layer.infer(&fused)
    }

    fn backward(&mut self, d_out: &Matrix) -> Result<Vec<Matrix>> {
        let d_fused = self.layer.backward(d_out)?;
        let pad = usize::from(self.pad_with_one);
        let widths: Vec<usize> = self.dims.iter().map(|d| d + pad).collect();
        let pieces = split_cols(&d_fused, &widths)?;
        Ok(pieces
            .iter()
            .zip(&self.dims)
            .map(|(g, &d)| {
                let mut out = Matrix::zeros(g.rows(), d);
                for r in 0..g.rows() {
                    out.row_mut(r).copy_from_slice(&g.row(r)[..d]);
                }
                out
            })
            .collect())
    }

    fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        self.layer.visit_params(&format!("{prefix}.attn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        self.layer.visit_params_mut(&format!("{prefix}.attn"), f);
    }

    fn fusion_parameter_count(&self) -> usize {
        self.layer.parameter_count()
    }

    fn forward_madds(&self, l: usize) -> u64 {
        self.layer.forward_madds(l)
    }
}

// ---------------------------------------------------------------------------
// Factory
// ---------------------------------------------------------------------------

/// Options consumed by [`build_fusion`]; irrelevant fields are ignored by
/// methods that do not use them.
#[derive(Clone, Debug)]
pub struct FusionOptions {
    /// Output width for add/tfn/lfm. `None` picks the documented default:
    /// the first (text) width for add, the summed raw widths for tfn/lfm.
    pub out_dim: Option<usize>,
    /// Factorization rank for lmam (None = dense query weights) and lfm.
    pub rank: Option<usize>,
    pub lmam_mode: LmamMode,
    pub value_source: ValueSource,
    pub pad_with_one: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            out_dim: None,
            rank: Some(45),
            lmam_mode: LmamMode::Fused,
            value_source: ValueSource::QueryRows,
            pad_with_one: true,
        }
    }
}

pub fn build_fusion(
    rng: &mut Rng,
    method: FusionMethod,
    dims: &[usize],
    opts: &FusionOptions,
) -> Result<Box<dyn FusionLayer>> {
    let sum_dims: usize = dims.iter().sum();
    Ok(match method {
        FusionMethod::Add => {
            let out = opts.out_dim.unwrap_or(dims[0]);
            Box::new(AddFusion::new(rng, dims, out)?)
        }
        FusionMethod::Concat => Box::new(ConcatFusion::new(dims)?),
        FusionMethod::Tfn => {
            let out = opts.out_dim.unwrap_or(sum_dims);
            Box::new(TfnFusion::new(rng, dims, out)?)
        }
        FusionMethod::Lfm => {
            let out = opts.out_dim.unwrap_or(sum_dims);
            let rank = opts.rank.unwrap_or(4);
            Box::new(LfmFusion::new(rng, dims, out, rank)?)
        }
        FusionMethod::Lmam => Box::new(LmamModule::new(
            rng,
            dims,
            opts.lmam_mode,
            opts.rank,
            opts.value_source,
            opts.pad_with_one,
        )?),
        FusionMethod::SelfAttn => Box::new(SelfAttnFusion::new(rng, dims, opts.pad_with_one)?),
    })
}

/// Closed-form fusion parameter count without building a layer; mirrors
/// `fusion_parameter_count` of the corresponding layer exactly.
pub fn fusion_parameter_count_formula(
    method: FusionMethod,
    dims: &[usize],
    opts: &FusionOptions,
) -> usize {
    use crate::lowrank::{parameter_count_dense, parameter_count_lowrank, parameter_count_self_attention};
    let pad = usize::from(opts.pad_with_one);
    let sum_dims: usize = dims.iter().sum();
    match method {
        FusionMethod::Add => {
            let out = opts.out_dim.unwrap_or(dims[0]);
            dims.iter().map(|d| d * out).sum::<usize>() + out
        }
        FusionMethod::Concat => 0,
        FusionMethod::Tfn => {
            let out = opts.out_dim.unwrap_or(sum_dims);
            out * dims.iter().map(|d| d + 1).product::<usize>() + out
        }
        FusionMethod::Lfm => {
            let out = opts.out_dim.unwrap_or(sum_dims);
            let rank = opts.rank.unwrap_or(4);
            rank * dims.iter().map(|&d| out * (d + 1)).sum::<usize>()
        }
        FusionMethod::Lmam => {
            let padded: Vec<usize> = dims.iter().map(|d| d + pad).collect();
            let total: usize = padded.iter().sum();
            let count = |d_in: usize, d_model: usize| match opts.rank {
                Some(r) => parameter_count_lowrank(d_in, d_model, r),
                None => parameter_count_dense(d_in, d_model),
            };
            match opts.lmam_mode {
                LmamMode::Intra => padded.iter().map(|&p| count(p, p)).sum(),
                LmamMode::Cross => padded.iter().map(|&p| count(p, total - p)).sum(),
                LmamMode::Fused => count(total, total),
            }
        }
        FusionMethod::SelfAttn => {
            let width: usize = dims.iter().map(|d| d + pad).sum();
            parameter_count_self_attention(width, width)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts3(rng: &mut Rng, l: usize, dims: &[usize]) -> Vec<Matrix> {
        dims.iter().map(|&d| Matrix::uniform_init(rng, l, d, 1)).collect()
    }

    #[test]
    fn add_fusion_identity_projection_cases() {
        let mut rng = Rng::new(1);
        let mut add = AddFusion::new(&mut rng, &[2, 2, 2], 2).unwrap();
        add.visit_params_mut("f", &mut |name, p| {
            if name.contains("proj") {
                p.value = Matrix::identity(2);
            }
        });
        let t = Matrix::from_rows(&[vec![0.4, -0.2]]).unwrap();
        let zero = Matrix::zeros(1, 2);
        let out = add.infer(&[&t, &zero, &zero]).unwrap();
        assert_eq!(out, t);

        let out3 = add.infer(&[&t, &t, &t]).unwrap();
        assert_eq!(out3, t.scale(3.0));
    }

    #[test]
    fn add_fusion_matches_scalar_oracle() {
        let mut rng = Rng::new(2);
        let add = AddFusion::new(&mut rng, &[3, 2, 2], 4).unwrap();
        let parts = parts3(&mut rng, 2, &[3, 2, 2]);
        let refs: Vec<&Matrix> = parts.iter().collect();
        let out = add.infer(&refs).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let mut want = add.bias.value[(0, c)];
                for (m, p) in parts.iter().enumerate() {
                    for k in 0..p.cols() {
                        want += p[(r, k)] * add.weights[m].value[(k, c)];
                    }
                }
                assert!((out[(r, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tfn_zero_input_leaves_only_the_padding_corner() {
        let rows: Vec<&[f64]> = vec![&[0.0, 0.0], &[0.0], &[0.0, 0.0, 0.0]];
        let z = tfn_tensor_row(&rows);
        assert_eq!(z.len(), 3 * 2 * 4);
        let nonzero: Vec<usize> =
            z.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![z.len() - 1]);
        assert_eq!(z[z.len() - 1], 1.0);
    }

    #[test]
    fn tfn_hand_enumeration_oracle() {
        // d = 1 each, (t, a, v) = (2, 3, 4): text-major, then audio, then video.
        let rows: Vec<&[f64]> = vec![&[2.0], &[3.0], &[4.0]];
        let z = tfn_tensor_row(&rows);
        assert_eq!(z, vec![24.0, 6.0, 8.0, 2.0, 12.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn tfn_output_length_law_and_raw_feature_slices() {
        let mut rng = Rng::new(3);
        for dims in [[1usize, 2, 3], [2, 2, 2], [3, 1, 2]] {
            let t = TfnFusion::new(&mut rng, &dims, 4).unwrap();
            assert_eq!(t.tensor_len(), (dims[0] + 1) * (dims[1] + 1) * (dims[2] + 1));
        }

        // With the other modalities at their padding index, the flattened
        // tensor contains each modality's raw features.
        let t_row = [0.7, -0.3];
        let a_row = [0.2];
        let v_row = [0.9];
        let z = tfn_tensor_row(&[&t_row, &a_row, &v_row]);
        // index (i, j, k) -> (i * 2 + j) * 2 + k with a, v at padding index 1.
        assert_eq!(z[(0 * 2 + 1) * 2 + 1], t_row[0]);
        assert_eq!(z[(1 * 2 + 1) * 2 + 1], t_row[1]);
        assert_eq!(z[(2 * 2 + 0) * 2 + 1], a_row[0]);
        assert_eq!(z[(2 * 2 + 1) * 2 + 0], v_row[0]);
    }

    #[test]
    fn tfn_parameter_count_example() {
        let mut rng = Rng::new(4);
        let t = TfnFusion::new(&mut rng, &[3, 3, 3], 8).unwrap();
        assert_eq!(t.fusion_parameter_count(), 8 * 64 + 8);
    }

    #[test]
    fn lfm_zero_factor_contributes_zero() {
        let mut rng = Rng::new(5);
        let mut lfm = LfmFusion::new(&mut rng, &[2, 2, 2], 3, 2).unwrap();
        let parts = parts3(&mut rng, 2, &[2, 2, 2]);
        let refs: Vec<&Matrix> = parts.iter().collect();
        let full = lfm.infer(&refs).unwrap();

        // Zero the second rank block of the text factor: that rank term dies.
        let out_dim = 3;
        lfm.factors[0].value = {
            let mut w = lfm.factors[0].value.clone();
            for r in 0..w.rows() {
                for c in out_dim..2 * out_dim {
                    w[(r, c)] = 0.0;
                }
            }
            w
        };
        let partial = lfm.infer(&refs).unwrap();

        // Recompute with rank 1 (first blocks only) for comparison.
        let mut rank1 = LfmFusion::new(&mut rng, &[2, 2, 2], 3, 1).unwrap();
        for (m, f) in rank1.factors.iter_mut().enumerate() {
            let src = &lfm.factors[m].value;
            let mut w = Matrix::zeros(src.rows(), out_dim);
            for r in 0..src.rows() {
                for c in 0..out_dim {
                    w[(r, c)] = src[(r, c)];
                }
            }
            f.value = w;
        }
        let first_term = rank1.infer(&refs).unwrap();
        let diff = partial.sub(&first_term).unwrap().frobenius_norm();
        assert!(diff < 1e-12, "diff {diff}");
        // And the two-term output differs from the one-term output in general.
        assert!(full.sub(&first_term).unwrap().frobenius_norm() > 1e-9);
    }

    #[test]
    fn lfm_parameter_count_formula() {
        let mut rng = Rng::new(6);
        let lfm = LfmFusion::new(&mut rng, &[3, 2, 4], 5, 7).unwrap();
        assert_eq!(lfm.fusion_parameter_count(), 7 * (5 * 4 + 5 * 3 + 5 * 5));
    }

    #[test]
    fn lmam_fused_parameter_count_example() {
        // Three 100-wide modalities, 1-padding, fused width 303, rank 45.
        let opts = FusionOptions { rank: Some(45), ..FusionOptions::default() };
        let count = fusion_parameter_count_formula(FusionMethod::Lmam, &[100, 100, 100], &opts);
        assert_eq!(count, 45 * (303 + 303) + 303);
        assert_eq!(count, 27573);
    }

    #[test]
    fn all_methods_satisfy_the_shape_contract() {
        let mut rng = Rng::new(7);
        for method in FusionMethod::ALL {
            for dims in [[2usize, 3, 1], [4, 4, 4]] {
                let opts = FusionOptions { rank: Some(2), ..FusionOptions::default() };
                let mut layer = build_fusion(&mut rng, method, &dims, &opts).unwrap();
                let parts = parts3(&mut rng, 5, &dims);
                let refs: Vec<&Matrix> = parts.iter().collect();
                let out = layer.forward(&refs).unwrap();
                assert_eq!(out.rows(), 5, "{method} row count");
                assert_eq!(out.cols(), layer.output_dim(), "{method} output width");
                assert_eq!(
                    layer.fusion_parameter_count(),
                    fusion_parameter_count_formula(method, &dims, &opts),
                    "{method} parameter formula"
                );
                let grads = layer.backward(&Matrix::ones(5, out.cols())).unwrap();
                assert_eq!(grads.len(), 3);
                for (g, &d) in grads.iter().zip(&dims) {
                    assert_eq!(g.shape(), (5, d), "{method} input grad shape");
                }
            }
        }
    }
}
