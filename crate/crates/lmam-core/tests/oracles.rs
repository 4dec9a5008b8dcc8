//! Independent scalar-loop references for the attention forward passes.
//! The oracle code below uses only plain nested `Vec<f64>` loops and the
//! dense reconstruction of factorized weights, deliberately avoiding the
//! library's matrix kernels and its `(x U) V^T` evaluation order.

use std::collections::BTreeMap;

use lmam_core::attention::{LmamMode, MatchingAttentionLayer, ValueSource};
use lmam_core::fusion::{build_fusion, FusionMethod, FusionOptions};
use lmam_core::matrix::Matrix;
use lmam_core::rng::Rng;

const EPS: f64 = 1e-5; // layer norm epsilon used by the attention layers

type Grid = Vec<Vec<f64>>;

fn to_grid(m: &Matrix) -> Grid {
    m.to_rows()
}

fn matvec_grid(x: &Grid, w: &Grid) -> Grid {
    let rows = x.len();
    let inner = w.len();
    let cols = w[0].len();
    let mut out = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += x[r][k] * w[k][c];
            }
            out[r][c] = s;
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / libm::sqrt(2.0)))
}

struct ScalarLayerParams {
    query_dense: Grid, // U V^T reconstructed densely
    query_bias: Vec<f64>,
    gain: Vec<f64>,
    norm_bias: Vec<f64>,
    out_w: Grid,
    out_b: Vec<f64>,
}

/// Pulls a layer's parameters out of the visitor stream by name suffix.
fn extract_params(visit: impl Fn(&mut dyn FnMut(&str, &Matrix))) -> ScalarLayerParams {
    let mut named: BTreeMap<String, Matrix> = BTreeMap::new();
    visit(&mut |name: &str, m: &Matrix| {
        named.insert(name.to_string(), m.clone());
    });
    let get = |suffix: &str| -> Matrix {
        named
            .iter()
            .find(|(k, _)| k.ends_with(suffix))
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| panic!("missing param ending in {suffix}"))
    };
    let u = get("query.u");
    let v = get("query.v");
    // Dense reconstruction with explicit loops: W[i][j] = sum_r U[i][r] V[j][r].
    let mut query_dense = vec![vec![0.0; v.rows()]; u.rows()];
    for i in 0..u.rows() {
        for j in 0..v.rows() {
            let mut s = 0.0;
            for r in 0..u.cols() {
                s += u[(i, r)] * v[(j, r)];
            }
            query_dense[i][j] = s;
        }
    }
    ScalarLayerParams {
        query_dense,
        query_bias: get("query.bias").row(0).to_vec(),
        gain: get("norm.gain").row(0).to_vec(),
        norm_bias: get("norm.bias").row(0).to_vec(),
        out_w: to_grid(&get("out.weight")),
        out_b: get("out.bias").row(0).to_vec(),
    }
}

fn scalar_matching_forward(
    p: &ScalarLayerParams,
    m: &Grid,
    i_feat: &Grid,
    value_from_query: bool,
) -> Grid {
    let l_q = m.len();
    let l_i = i_feat.len();
    let d = i_feat[0].len();

    // Q = m W + b
    let mut q = matvec_grid(m, &p.query_dense);
    for row in &mut q {
        for (c, v) in row.iter_mut().enumerate() {
            *v += p.query_bias[c];
        }
    }

    // alpha = softmax(tanh(q I^T / sqrt(d)))
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut alpha = vec![vec![0.0; l_i]; l_q];
    for r in 0..l_q {
        let mut row = vec![0.0; l_i];
        for j in 0..l_i {
            let mut dot = 0.0;
            for k in 0..d {
                dot += q[r][k] * i_feat[j][k];
            }
            row[j] = libm::tanh(dot * scale);
        }
        let z: f64 = row.iter().map(|&t| libm::exp(t)).sum();
        for j in 0..l_i {
            alpha[r][j] = libm::exp(row[j]) / z;
        }
    }

    // A = alpha * V, residual, layer norm, linear, relu
    let value = if value_from_query { &q } else { i_feat };
    let mut out = vec![vec![0.0; d]; l_q];
    for r in 0..l_q {
        let mut residual = vec![0.0; d];
        for c in 0..d {
            let mut a = 0.0;
            for j in 0..l_i {
                a += alpha[r][j] * value[j][c];
            }
            residual[c] = a + i_feat[r][c];
        }
        let mean: f64 = residual.iter().sum::<f64>() / d as f64;
        let var: f64 = residual.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / libm::sqrt(var + EPS);
        let normed: Vec<f64> = residual
            .iter()
            .enumerate()
            .map(|(c, x)| p.gain[c] * (x - mean) * istd + p.norm_bias[c])
            .collect();
        for c in 0..d {
            let mut s = p.out_b[c];
            for k in 0..d {
                s += normed[k] * p.out_w[k][c];
            }
            out[r][c] = if s > 0.0 { s } else { 0.0 };
        }
    }
    out
}

fn max_abs_diff(a: &Matrix, b: &Grid) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            worst = worst.max((a[(r, c)] - b[r][c]).abs());
        }
    }
    worst
}

#[test]
fn matching_attention_forward_matches_scalar_oracle() {
    for (seed, source) in [(31u64, ValueSource::QueryRows), (32, ValueSource::MatchedFeatures)] {
        let mut rng = Rng::new(seed);
        let layer = MatchingAttentionLayer::new_low_rank(&mut rng, 3, 3, 2, source).unwrap();
        let m = Matrix::uniform_init(&mut rng, 2, 3, 1);
        let i = Matrix::uniform_init(&mut rng, 2, 3, 1);
        let got = layer.infer(&m, &i).unwrap();

        let params = extract_params(|f| layer.visit_params("layer", &mut |n, p| f(n, &p.value)));
        let want = scalar_matching_forward(
            &params,
            &to_grid(&m),
            &to_grid(&i),
            source == ValueSource::QueryRows,
        );
        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-10, "source {source:?}: max diff {diff}");
    }
}

#[test]
fn lmam_fused_forward_matches_scalar_oracle() {
    // L = 2 utterances, d = 2 per modality, rank 2, 1-padding on.
    let mut rng = Rng::new(33);
    let opts = FusionOptions {
        rank: Some(2),
        lmam_mode: LmamMode::Fused,
        value_source: ValueSource::QueryRows,
        ..FusionOptions::default()
    };
    let module = build_fusion(&mut rng, FusionMethod::Lmam, &[2, 2, 2], &opts).unwrap();
    let parts: Vec<Matrix> = (0..3).map(|_| Matrix::uniform_init(&mut rng, 2, 2, 1)).collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    let got = module.infer(&refs).unwrap();

    // Scalar route: pad each modality with a ones column, concatenate,
    // run the scalar matching forward, add the gelu residual.
    let mut fused: Grid = vec![Vec::new(); 2];
    for part in &parts {
        for (r, row) in fused.iter_mut().enumerate() {
            row.extend_from_slice(part.row(r));
            row.push(1.0);
        }
    }
    let params = extract_params(|f| module.visit_params("fusion", &mut |n, p| f(n, &p.value)));
    let mut want = scalar_matching_forward(&params, &fused, &fused, true);
    for (r, row) in want.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += gelu_scalar(fused[r][c]);
        }
    }

    assert_eq!(got.shape(), (2, 9));
    let diff = max_abs_diff(&got, &want);
    assert!(diff < 1e-10, "max diff {diff}");
}

#[test]
fn lmam_cross_forward_matches_scalar_oracle() {
    let mut rng = Rng::new(34);
    let opts = FusionOptions {
        rank: Some(2),
        lmam_mode: LmamMode::Cross,
        value_source: ValueSource::QueryRows,
        ..FusionOptions::default()
    };
    let module = build_fusion(&mut rng, FusionMethod::Lmam, &[2, 2, 2], &opts).unwrap();
    let parts: Vec<Matrix> = (0..3).map(|_| Matrix::uniform_init(&mut rng, 2, 2, 1)).collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    let got = module.infer(&refs).unwrap();

    let padded: Vec<Grid> = parts
        .iter()
        .map(|p| {
            let mut g = to_grid(p);
            for row in &mut g {
                row.push(1.0);
            }
            g
        })
        .collect();

    // Extract per-branch parameters (layer0..layer2).
    let mut outputs: Vec<Grid> = Vec::new();
    for idx in 0..3 {
        let tag = format!("layer{idx}");
        let params = extract_params(|f| {
            module.visit_params("fusion", &mut |n, p| {
                if n.contains(tag.as_str()) {
                    f(n, &p.value);
                }
            })
        });
        let mut others: Grid = vec![Vec::new(); 2];
        for (j, g) in padded.iter().enumerate() {
            if j == idx {
                continue;
            }
            for (r, row) in others.iter_mut().enumerate() {
                row.extend_from_slice(&g[r]);
            }
        }
        let mut branch = scalar_matching_forward(&params, &padded[idx], &others, true);
        for (r, row) in branch.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += gelu_scalar(others[r][c]);
            }
        }
        outputs.push(branch);
    }
    let mut want: Grid = vec![Vec::new(); 2];
    for branch in &outputs {
        for (r, row) in want.iter_mut().enumerate() {
            row.extend_from_slice(&branch[r]);
        }
    }
    let diff = max_abs_diff(&got, &want);
    assert!(diff < 1e-10, "max diff {diff}");
}
