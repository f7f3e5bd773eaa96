//! Contrastive objectives: InfoNCE, its symmetrized form, and the
//! alignment/entropy diagnostics.
//!
//! All reductions that enter the loss value run in a fixed left-to-right
//! order, so losses are reproducible bit for bit and the symmetrized loss is
//! exactly invariant under swapping the two encoding batches. The pairwise
//! score matrix is built by dimension-major passes (no BLAS) for the same
//! reason; only gradient assembly, which carries no bit-exactness contract,
//! uses matrix products.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numeric::{
    column_maxes, column_sums_fast, column_sums_mirrored, dot_row, exp_sub_scalar, exp_sub_vec,
    lane_max, lane_sum, neg_sqrt_scaled, scale_by_inv_distance, sq_dist_row,
};

/// Similarity measure between paired encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// Negative L2 distance (the simulation default).
    NegEuclidean,
    /// Negative squared L2 distance (the asymptotic-analysis kernel).
    NegSqEuclidean,
    /// Cosine of the angle between encodings.
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Similarity> {
        match s {
            "neg_euclidean" => Ok(Similarity::NegEuclidean),
            "neg_sq_euclidean" => Ok(Similarity::NegSqEuclidean),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(Error::ConfigParse(format!(
                "unknown similarity '{other}' (expected neg_euclidean, neg_sq_euclidean, cosine)"
            ))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Similarity::NegEuclidean => "neg_euclidean",
            Similarity::NegSqEuclidean => "neg_sq_euclidean",
            Similarity::Cosine => "cosine",
        };
        f.write_str(name)
    }
}

/// Temperature, similarity, and the contrast pool size `K` used for
/// training batches (`K - 1` in-batch negatives per positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    pub similarity: Similarity,
    pub batch_size: usize,
}

impl ObjectiveConfig {
    pub fn new(temperature: f64, similarity: Similarity, batch_size: usize) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(ObjectiveConfig {
            temperature,
            similarity,
            batch_size,
        })
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            temperature: 1.0,
            similarity: Similarity::NegEuclidean,
            batch_size: 1024,
        }
    }
}

/// Alignment and nonparametric entropy estimates; diagnostics only, never
/// trained on directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentStats {
    /// Mean paired L2 distance `E||g1(x1) - g2(x2)||`.
    pub alignment: f64,
    /// Entropy estimate for side 1: negated mean log-mean-exp of the
    /// direction-1 InfoNCE denominator with `sim = -(a-b)^2`, `tau = 1`.
    pub entropy_1: f64,
    /// Entropy estimate for side 2 (direction-2 denominator).
    pub entropy_2: f64,
}

struct SimData {
    /// Scores `sim/tau`, `K x K`.
    s: Array2<f64>,
    /// Row-normalized copies for the cosine gradient.
    a_hat: Option<Array2<f64>>,
    b_hat: Option<Array2<f64>>,
    a_norm: Option<Vec<f64>>,
    b_norm: Option<Vec<f64>>,
}

fn validate_pair(enc1: &Array2<f64>, enc2: &Array2<f64>) -> Result<usize> {
    if enc1.dim() != enc2.dim() {
        return Err(Error::InvalidArgument(format!(
            "encoding shapes differ: {:?} vs {:?}",
            enc1.dim(),
            enc2.dim()
        )));
    }
    if enc1.nrows() == 0 || enc1.ncols() == 0 {
        return Err(Error::InvalidArgument("encodings must be non-empty".into()));
    }
    if enc1.iter().any(|v| !v.is_finite()) || enc2.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite encodings".into()));
    }
    Ok(enc1.nrows())
}

/// Pairwise squared distances via dimension-major accumulation: direct
/// differences (no norm expansion), deterministic ascending-dimension order,
/// bitwise symmetric under swapping the inputs.
pub(crate) fn pairwise_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ka, d) = a.dim();
    let kb = b.nrows();
    let a_std = a.as_standard_layout();
    let bt = b.t().as_standard_layout().into_owned();
    let a_s = a_std.as_slice().unwrap();
    let bt_s = bt.as_slice().unwrap();
    let mut q = Array2::<f64>::zeros((ka, kb));
    let q_s = q.as_slice_mut().unwrap();
    for i in 0..ka {
        sq_dist_row(&mut q_s[i * kb..(i + 1) * kb], &a_s[i * d..(i + 1) * d], bt_s, kb);
    }
    q
}

/// Pairwise dot products, same traversal scheme as [`pairwise_sq_dist`].
fn pairwise_dot(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (k, d) = a.dim();
    let a_std = a.as_standard_layout();
    let bt = b.t().as_standard_layout().into_owned();
    let a_s = a_std.as_slice().unwrap();
    let bt_s = bt.as_slice().unwrap();
    let mut out = Array2::<f64>::zeros((k, k));
    let out_s = out.as_slice_mut().unwrap();
    for i in 0..k {
        dot_row(&mut out_s[i * k..(i + 1) * k], &a_s[i * d..(i + 1) * d], bt_s, k);
    }
    out
}

/// Standard-layout transpose copy, tiled for cache locality; the BLAS path
/// needs contiguous rows.
fn transposed(m: &Array2<f64>) -> Array2<f64> {
    const TILE: usize = 32;
    let (rows, cols) = m.dim();
    let src = m.as_slice().unwrap();
    let mut out = Array2::<f64>::zeros((cols, rows));
    let dst = out.as_slice_mut().unwrap();
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}

fn row_norms(m: &Array2<f64>) -> Vec<f64> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut acc = 0.0;
            for v in r.iter() {
                acc += v * v;
            }
            acc.sqrt().max(1e-300)
        })
        .collect()
}

fn compute_sim(enc1: &Array2<f64>, enc2: &Array2<f64>, cfg: &ObjectiveConfig) -> SimData {
    let inv_tau = 1.0 / cfg.temperature;
    match cfg.similarity {
        Similarity::NegSqEuclidean => {
            let mut s = pairwise_sq_dist(enc1, enc2);
            s.mapv_inplace(|q| -q * inv_tau);
            SimData {
                s,
                a_hat: None,
                b_hat: None,
                a_norm: None,
                b_norm: None,
            }
        }
        Similarity::NegEuclidean => {
            let mut s = pairwise_sq_dist(enc1, enc2);
            neg_sqrt_scaled(s.as_slice_mut().unwrap(), inv_tau);
            SimData {
                s,
                a_hat: None,
                b_hat: None,
                a_norm: None,
                b_norm: None,
            }
        }
        Similarity::Cosine => {
            let na = row_norms(enc1);
            let nb = row_norms(enc2);
            let mut a_hat = enc1.clone();
            for (mut row, n) in a_hat.rows_mut().into_iter().zip(na.iter()) {
                row.mapv_inplace(|v| v / n);
            }
            let mut b_hat = enc2.clone();
            for (mut row, n) in b_hat.rows_mut().into_iter().zip(nb.iter()) {
                row.mapv_inplace(|v| v / n);
            }
            let mut s = pairwise_dot(&a_hat, &b_hat);
            s.mapv_inplace(|v| v * inv_tau);
            SimData {
                s,
                a_hat: Some(a_hat),
                b_hat: Some(b_hat),
                a_norm: Some(na),
                b_norm: Some(nb),
            }
        }
    }
}

struct SoftmaxStats {
    /// `exp(S_ij - rowmax_i)`
    e_row: Array2<f64>,
    row_max: Vec<f64>,
    row_sum: Vec<f64>,
    /// `exp(S_ij - colmax_j)`; present for the symmetrized objective.
    e_col: Option<Array2<f64>>,
    col_max: Vec<f64>,
    col_sum: Vec<f64>,
}

/// Stabilized softmax sums along rows and (optionally) columns. Row and
/// column reductions use the same fixed lane tree, so the column pass over
/// `S` is bit-identical to a row pass over `S^T` and the symmetrized loss is
/// exactly swap-invariant.
fn softmax_stats(s: &Array2<f64>, with_columns: bool) -> SoftmaxStats {
    let k = s.nrows();
    let s_s = s.as_slice().unwrap();

    let mut row_max = vec![f64::NEG_INFINITY; k];
    for i in 0..k {
        row_max[i] = lane_max(&s_s[i * k..(i + 1) * k]);
    }
    let mut e_row = Array2::<f64>::zeros((k, k));
    {
        let e_s = e_row.as_slice_mut().unwrap();
        for i in 0..k {
            exp_sub_scalar(
                &mut e_s[i * k..(i + 1) * k],
                &s_s[i * k..(i + 1) * k],
                row_max[i],
            );
        }
    }
    let mut row_sum = vec![0.0f64; k];
    {
        let e_s = e_row.as_slice().unwrap();
        for i in 0..k {
            row_sum[i] = lane_sum(&e_s[i * k..(i + 1) * k]);
        }
    }

    let (mut col_max, mut col_sum) = (Vec::new(), Vec::new());
    let mut e_col = None;
    if with_columns {
        col_max = column_maxes(s_s, k);
        let mut e = Array2::<f64>::zeros((k, k));
        {
            let e_s = e.as_slice_mut().unwrap();
            for i in 0..k {
                exp_sub_vec(
                    &mut e_s[i * k..(i + 1) * k],
                    &s_s[i * k..(i + 1) * k],
                    &col_max,
                );
            }
        }
        col_sum = column_sums_mirrored(e.as_slice().unwrap(), k);
        e_col = Some(e);
    }

    SoftmaxStats {
        e_row,
        row_max,
        row_sum,
        e_col,
        col_max,
        col_sum,
    }
}

/// Mean over `i` of `logsumexp_j(S_ij) - S_ii`, left-to-right.
fn direction_loss(s: &Array2<f64>, maxes: &[f64], sums: &[f64]) -> f64 {
    let k = s.nrows();
    let mut acc = 0.0;
    for i in 0..k {
        acc += maxes[i] + sums[i].ln() - s[[i, i]];
    }
    acc / k as f64
}

/// Gradient coefficients on the score matrix for one direction:
/// `(P - I) / K` with `P` the row softmax (columns when `transpose`).
fn coefficient_matrix(stats: &SoftmaxStats, symmetrized: bool) -> Array2<f64> {
    let k = stats.e_row.nrows();
    let inv_k = 1.0 / k as f64;
    let mut m = Array2::<f64>::zeros((k, k));
    let m_s = m.as_slice_mut().unwrap();
    let e1 = stats.e_row.as_slice().unwrap();
    if symmetrized {
        let e2 = stats.e_col.as_ref().unwrap().as_slice().unwrap();
        let inv_csum: Vec<f64> = stats.col_sum.iter().map(|v| 0.5 * inv_k / v).collect();
        for i in 0..k {
            let r = 0.5 * inv_k / stats.row_sum[i];
            let dst = &mut m_s[i * k..(i + 1) * k];
            let row1 = &e1[i * k..(i + 1) * k];
            let row2 = &e2[i * k..(i + 1) * k];
            for ((d, (&v1, &v2)), &ic) in
                dst.iter_mut().zip(row1.iter().zip(row2.iter())).zip(inv_csum.iter())
            {
                *d = v1 * r + v2 * ic;
            }
        }
    } else {
        for i in 0..k {
            let r = inv_k / stats.row_sum[i];
            let dst = &mut m_s[i * k..(i + 1) * k];
            let row1 = &e1[i * k..(i + 1) * k];
            for (d, &v1) in dst.iter_mut().zip(row1.iter()) {
                *d = v1 * r;
            }
        }
    }
    for i in 0..k {
        m_s[i * k + i] -= inv_k;
    }
    m
}

/// Chains score-matrix coefficients to encoding gradients.
fn assemble_gradients(
    enc1: &Array2<f64>,
    enc2: &Array2<f64>,
    sim: &SimData,
    cfg: &ObjectiveConfig,
    mut coeff: Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let k = enc1.nrows();
    let inv_tau = 1.0 / cfg.temperature;
    match cfg.similarity {
        Similarity::NegSqEuclidean => {
            coeff.mapv_inplace(|v| v * inv_tau);
            let coeff_s = coeff.as_slice().unwrap();
            let row_sums: Vec<f64> = (0..k).map(|i| lane_sum(&coeff_s[i * k..(i + 1) * k])).collect();
            let col_sums: Vec<f64> = column_sums_fast(coeff_s, k, k);
            // d(sim)/da_i = -2 (a_i - b_j)
            let mut grad1 = coeff.dot(enc2);
            for (mut row, (&rs, a_row)) in grad1
                .rows_mut()
                .into_iter()
                .zip(row_sums.iter().zip(enc1.rows()))
            {
                for (g, &av) in row.iter_mut().zip(a_row.iter()) {
                    *g = -2.0 * (rs * av - *g);
                }
            }
            let mut grad2 = transposed(&coeff).dot(enc1);
            for (mut row, (&cs, b_row)) in grad2
                .rows_mut()
                .into_iter()
                .zip(col_sums.iter().zip(enc2.rows()))
            {
                for (g, &bv) in row.iter_mut().zip(b_row.iter()) {
                    *g = 2.0 * (*g - cs * bv);
                }
            }
            (grad1, grad2)
        }
        Similarity::NegEuclidean => {
            // dist recovered from the scores; guard the zero-distance pair
            scale_by_inv_distance(
                coeff.as_slice_mut().unwrap(),
                sim.s.as_slice().unwrap(),
                cfg.temperature,
                1e-30,
            );
            let coeff_s = coeff.as_slice().unwrap();
            let row_sums: Vec<f64> = (0..k).map(|i| lane_sum(&coeff_s[i * k..(i + 1) * k])).collect();
            let col_sums: Vec<f64> = column_sums_fast(coeff_s, k, k);
            let mut grad1 = coeff.dot(enc2);
            for (mut row, (&rs, a_row)) in grad1
                .rows_mut()
                .into_iter()
                .zip(row_sums.iter().zip(enc1.rows()))
            {
                for (g, &av) in row.iter_mut().zip(a_row.iter()) {
                    *g -= rs * av;
                }
            }
            let mut grad2 = transposed(&coeff).dot(enc1);
            for (mut row, (&cs, b_row)) in grad2
                .rows_mut()
                .into_iter()
                .zip(col_sums.iter().zip(enc2.rows()))
            {
                for (g, &bv) in row.iter_mut().zip(b_row.iter()) {
                    *g -= cs * bv;
                }
            }
            (grad1, grad2)
        }
        Similarity::Cosine => {
            coeff.mapv_inplace(|v| v * inv_tau);
            let a_hat = sim.a_hat.as_ref().unwrap();
            let b_hat = sim.b_hat.as_ref().unwrap();
            let a_norm = sim.a_norm.as_ref().unwrap();
            let b_norm = sim.b_norm.as_ref().unwrap();
            // sim (without temperature) = a_hat . b_hat
            let coeff_sim = {
                let mut cs = coeff.clone();
                let c = cs.as_slice_mut().unwrap();
                let s_s = sim.s.as_slice().unwrap();
                for (v, &sv) in c.iter_mut().zip(s_s.iter()) {
                    *v *= sv * cfg.temperature;
                }
                cs
            };
            let cs_s = coeff_sim.as_slice().unwrap();
            let row_w: Vec<f64> = (0..k).map(|i| lane_sum(&cs_s[i * k..(i + 1) * k])).collect();
            let col_w: Vec<f64> = column_sums_fast(cs_s, k, k);
            let mut grad1 = coeff.dot(b_hat);
            for (i, mut row) in grad1.rows_mut().into_iter().enumerate() {
                let scale = 1.0 / a_norm[i];
                for (g, &ah) in row.iter_mut().zip(a_hat.row(i).iter()) {
                    *g = scale * (*g - row_w[i] * ah);
                }
            }
            let mut grad2 = transposed(&coeff).dot(a_hat);
            for (j, mut row) in grad2.rows_mut().into_iter().enumerate() {
                let scale = 1.0 / b_norm[j];
                for (g, &bh) in row.iter_mut().zip(b_hat.row(j).iter()) {
                    *g = scale * (*g - col_w[j] * bh);
                }
            }
            (grad1, grad2)
        }
    }
}

/// InfoNCE contrasting each positive pair `(enc1_i, enc2_i)` against the
/// other `K - 1` rows of `enc2`; returns the mean per-sample loss and exact
/// gradients with respect to both encoding batches.
pub fn info_nce(
    enc1: &Array2<f64>,
    enc2: &Array2<f64>,
    cfg: &ObjectiveConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    validate_pair(enc1, enc2)?;
    let sim = compute_sim(enc1, enc2, cfg);
    let stats = softmax_stats(&sim.s, false);
    let loss = direction_loss(&sim.s, &stats.row_max, &stats.row_sum);
    let coeff = coefficient_matrix(&stats, false);
    let (g1, g2) = assemble_gradients(enc1, enc2, &sim, cfg, coeff);
    Ok((loss, g1, g2))
}

/// Arithmetic mean of the two directional InfoNCE losses; exactly invariant
/// under swapping `(enc1, enc2)`.
pub fn sym_info_nce(
    enc1: &Array2<f64>,
    enc2: &Array2<f64>,
    cfg: &ObjectiveConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    validate_pair(enc1, enc2)?;
    let sim = compute_sim(enc1, enc2, cfg);
    let stats = softmax_stats(&sim.s, true);
    let l1 = direction_loss(&sim.s, &stats.row_max, &stats.row_sum);
    let l2 = {
        let k = sim.s.nrows();
        let mut acc = 0.0;
        for j in 0..k {
            acc += stats.col_max[j] + stats.col_sum[j].ln() - sim.s[[j, j]];
        }
        acc / k as f64
    };
    let loss = 0.5 * l1 + 0.5 * l2;
    let coeff = coefficient_matrix(&stats, true);
    let (g1, g2) = assemble_gradients(enc1, enc2, &sim, cfg, coeff);
    Ok((loss, g1, g2))
}

/// Alignment (mean paired L2 distance) and the two nonparametric entropy
/// estimates. The estimator kernel is pinned to `sim = -(a-b)^2`, `tau = 1`
/// regardless of `cfg`'s similarity; `cfg` is accepted for call-site
/// uniformity.
pub fn alignment_uniformity(
    enc1: &Array2<f64>,
    enc2: &Array2<f64>,
    _cfg: &ObjectiveConfig,
) -> Result<AlignmentStats> {
    let k = validate_pair(enc1, enc2)?;
    if k < 2 {
        return Err(Error::InvalidArgument(
            "entropy estimates need at least 2 samples".into(),
        ));
    }
    let mut alignment = 0.0;
    for (a, b) in enc1.rows().into_iter().zip(enc2.rows()) {
        let mut q = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            let diff = x - y;
            q += diff * diff;
        }
        alignment += q.sqrt();
    }
    alignment /= k as f64;

    let mut s = pairwise_sq_dist(enc1, enc2);
    s.mapv_inplace(|q| -q);
    let stats = softmax_stats(&s, true);
    let ln_k = (k as f64).ln();
    let mut h1 = 0.0;
    for i in 0..k {
        h1 += stats.row_max[i] + stats.row_sum[i].ln() - ln_k;
    }
    let entropy_1 = -(h1 / k as f64);
    let mut h2 = 0.0;
    for j in 0..k {
        h2 += stats.col_max[j] + stats.col_sum[j].ln() - ln_k;
    }
    let entropy_2 = -(h2 / k as f64);

    Ok(AlignmentStats {
        alignment,
        entropy_1,
        entropy_2,
    })
}
