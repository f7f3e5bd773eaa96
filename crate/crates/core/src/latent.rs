//! The multimodal generative process.
//!
//! A latent vector splits into four blocks: content `c` (shared exactly
//! between the two sides of a pair), style `s` (shared up to per-dimension
//! perturbations), and modality-specific blocks `m1`, `m2`. Content may
//! causally influence style through a frozen linear link, and blocks may
//! carry within-block correlations. Sampling is a pure function of
//! `(spec, n, seed)`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};
use ndarray_linalg::{Cholesky, UPLO};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mixing::InvertibleMixer;
use crate::rng::{self, Stream};

/// The four latent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    Content,
    Style,
    Modality1,
    Modality2,
}

impl Block {
    pub fn label(self) -> &'static str {
        match self {
            Block::Content => "content",
            Block::Style => "style",
            Block::Modality1 => "modality_1",
            Block::Modality2 => "modality_2",
        }
    }
}

/// Whether one side (asymmetric) or both sides (symmetric) of a pair carry
/// perturbed style coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Asymmetric,
    Symmetric,
}

/// Dimensions, covariances, causal link, and perturbation law defining the
/// generative process.
#[derive(Debug, Clone)]
pub struct LatentSpec {
    pub n_c: usize,
    pub n_s: usize,
    pub n_m1: usize,
    pub n_m2: usize,
    pub cov_c: Array2<f64>,
    pub cov_s: Array2<f64>,
    pub cov_m1: Array2<f64>,
    pub cov_m2: Array2<f64>,
    /// Style mean offset, length `n_s`.
    pub causal_a: Array1<f64>,
    /// Content-to-style coefficient matrix, `n_s x n_c`.
    pub causal_b: Array2<f64>,
    /// Probability that a style dimension enters the change set.
    pub perturb_prob: f64,
    /// Covariance of the additive style perturbation noise.
    pub cov_eps: Array2<f64>,
    pub mode: SamplingMode,
    /// Blocks replaced by uniform categorical draws, mapped to class counts.
    pub discrete_blocks: BTreeMap<Block, usize>,
}

impl LatentSpec {
    /// Mutually independent unit-variance blocks with no causal link.
    pub fn independent(n_c: usize, n_s: usize, n_m1: usize, n_m2: usize, perturb_prob: f64) -> Self {
        LatentSpec {
            n_c,
            n_s,
            n_m1,
            n_m2,
            cov_c: Array2::eye(n_c),
            cov_s: Array2::eye(n_s),
            cov_m1: Array2::eye(n_m1),
            cov_m2: Array2::eye(n_m2),
            causal_a: Array1::zeros(n_s),
            causal_b: Array2::zeros((n_s, n_c)),
            perturb_prob,
            cov_eps: Array2::eye(n_s),
            mode: SamplingMode::Asymmetric,
            discrete_blocks: BTreeMap::new(),
        }
    }

    pub fn block_dim(&self, block: Block) -> usize {
        match block {
            Block::Content => self.n_c,
            Block::Style => self.n_s,
            Block::Modality1 => self.n_m1,
            Block::Modality2 => self.n_m2,
        }
    }

    /// Dimension of `z1 = (c, s, m1)`.
    pub fn dim_1(&self) -> usize {
        self.n_c + self.n_s + self.n_m1
    }

    /// Dimension of `z2 = (c, s~, m2)`.
    pub fn dim_2(&self) -> usize {
        self.n_c + self.n_s + self.n_m2
    }

    /// Blocks with at least one dimension, in canonical order.
    pub fn declared_blocks(&self) -> Vec<Block> {
        [Block::Content, Block::Style, Block::Modality1, Block::Modality2]
            .into_iter()
            .filter(|b| self.block_dim(*b) > 0)
            .collect()
    }

    pub fn discrete_classes(&self, block: Block) -> Option<usize> {
        self.discrete_blocks.get(&block).copied()
    }

    /// Mechanical validity: shapes chain, covariances are SPD, probabilities
    /// lie in range. This is the precondition for sampling.
    pub fn validate(&self) -> Result<()> {
        check_cov(&self.cov_c, self.n_c, "cov_c")?;
        check_cov(&self.cov_s, self.n_s, "cov_s")?;
        check_cov(&self.cov_m1, self.n_m1, "cov_m1")?;
        check_cov(&self.cov_m2, self.n_m2, "cov_m2")?;
        check_cov(&self.cov_eps, self.n_s, "cov_eps")?;
        if self.causal_a.len() != self.n_s {
            return Err(Error::InvalidConfig(format!(
                "causal_a has length {}, expected n_s = {}",
                self.causal_a.len(),
                self.n_s
            )));
        }
        if self.causal_b.dim() != (self.n_s, self.n_c) {
            return Err(Error::InvalidConfig(format!(
                "causal_b has shape {:?}, expected ({}, {})",
                self.causal_b.dim(),
                self.n_s,
                self.n_c
            )));
        }
        if !(0.0..=1.0).contains(&self.perturb_prob) {
            return Err(Error::InvalidConfig(format!(
                "perturb_prob must lie in [0, 1], got {}",
                self.perturb_prob
            )));
        }
        for (&block, &k) in &self.discrete_blocks {
            if k < 2 {
                return Err(Error::InvalidConfig(format!(
                    "discrete block {} needs at least 2 classes, got {k}",
                    block.label()
                )));
            }
        }
        let causal_active =
            self.causal_a.iter().any(|v| *v != 0.0) || self.causal_b.iter().any(|v| *v != 0.0);
        if causal_active
            && (self.discrete_blocks.contains_key(&Block::Content)
                || self.discrete_blocks.contains_key(&Block::Style))
        {
            return Err(Error::InvalidConfig(
                "causal content-to-style link is not defined for discrete content or style".into(),
            ));
        }
        Ok(())
    }

    /// Full validity: additionally requires every style dimension to have a
    /// positive change probability, the condition under which style is style
    /// rather than content. Training configurations must satisfy this.
    pub fn validate_assumptions(&self) -> Result<()> {
        self.validate()?;
        if self.n_s > 0 && self.perturb_prob <= 0.0 {
            return Err(Error::InvalidConfig(
                "style dimensions present but perturb_prob = 0; every style \
                 dimension needs a positive change probability"
                    .into(),
            ));
        }
        Ok(())
    }
}

fn check_cov(cov: &Array2<f64>, dim: usize, name: &str) -> Result<()> {
    if cov.dim() != (dim, dim) {
        return Err(Error::InvalidConfig(format!(
            "{name} has shape {:?}, expected ({dim}, {dim})",
            cov.dim()
        )));
    }
    if dim == 0 {
        return Ok(());
    }
    let asym = (cov - &cov.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if asym > 1e-10 {
        return Err(Error::InvalidConfig(format!(
            "{name} is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    cov.cholesky(UPLO::Lower)
        .map_err(|_| Error::InvalidConfig(format!("{name} is not positive-definite")))?;
    Ok(())
}

/// A correlation matrix from a normalized random Gram matrix: `G` with
/// i.i.d. standard normal entries, `G G^T`, rescaled to unit diagonal.
pub fn random_correlation(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if dim == 0 {
        return Array2::zeros((0, 0));
    }
    let g = standard_normal_matrix(dim, dim, rng);
    let gram = g.dot(&g.t());
    let mut corr = Array2::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            corr[[i, j]] = gram[[i, j]] / (gram[[i, i]] * gram[[j, j]]).sqrt();
        }
    }
    // exact symmetry and unit diagonal despite rounding
    for i in 0..dim {
        corr[[i, i]] = 1.0;
        for j in 0..i {
            let v = corr[[i, j]];
            corr[[j, i]] = v;
        }
    }
    corr
}

/// Causal link coefficients `a_i, B_ij ~ N(0, 1)`, drawn once per experiment
/// seed and frozen as part of the ground-truth process.
pub fn random_causal_link(
    n_s: usize,
    n_c: usize,
    rng: &mut ChaCha8Rng,
) -> (Array1<f64>, Array2<f64>) {
    let a: Array1<f64> = Array1::from_iter((0..n_s).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let b = standard_normal_matrix(n_s, n_c, rng);
    (a, b)
}

/// One matched latent pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub content: Array1<f64>,
    /// Style coordinates entering `z1` (the unperturbed `s` in asymmetric mode).
    pub style_1: Array1<f64>,
    /// Style coordinates entering `z2` (the perturbed `s~`).
    pub style_2: Array1<f64>,
    pub m1: Array1<f64>,
    pub m2: Array1<f64>,
    /// Change set of side 1 (empty in asymmetric mode).
    pub changed_1: Vec<bool>,
    /// Change set `A` of side 2.
    pub changed_2: Vec<bool>,
}

impl LatentPair {
    pub fn z1(&self) -> Array1<f64> {
        concat_rows(&[&self.content, &self.style_1, &self.m1])
    }

    pub fn z2(&self) -> Array1<f64> {
        concat_rows(&[&self.content, &self.style_2, &self.m2])
    }

    /// The change set `A` as indices into the style block.
    pub fn changed_set(&self) -> Vec<usize> {
        self.changed_2
            .iter()
            .enumerate()
            .filter(|(_, c)| **c)
            .map(|(j, _)| j)
            .collect()
    }
}

fn concat_rows(parts: &[&Array1<f64>]) -> Array1<f64> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Array1::zeros(total);
    let mut at = 0;
    for p in parts {
        out.slice_mut(s![at..at + p.len()]).assign(p);
        at += p.len();
    }
    out
}

/// Matched latent pairs in block-matrix form (one row per pair).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub content: Array2<f64>,
    pub style_1: Array2<f64>,
    pub style_2: Array2<f64>,
    pub m1: Array2<f64>,
    pub m2: Array2<f64>,
    pub changed_1: Array2<bool>,
    pub changed_2: Array2<bool>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.content.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Side-1 latent rows `(c, s, m1)`.
    pub fn z1(&self) -> Array2<f64> {
        hconcat(&[&self.content, &self.style_1, &self.m1])
    }

    /// Side-2 latent rows `(c, s~, m2)`.
    pub fn z2(&self) -> Array2<f64> {
        hconcat(&[&self.content, &self.style_2, &self.m2])
    }

    pub fn block(&self, block: Block, side2: bool) -> &Array2<f64> {
        match block {
            Block::Content => &self.content,
            Block::Style => {
                if side2 {
                    &self.style_2
                } else {
                    &self.style_1
                }
            }
            Block::Modality1 => &self.m1,
            Block::Modality2 => &self.m2,
        }
    }

    pub fn to_pairs(&self) -> Vec<LatentPair> {
        (0..self.len())
            .map(|i| LatentPair {
                content: self.content.row(i).to_owned(),
                style_1: self.style_1.row(i).to_owned(),
                style_2: self.style_2.row(i).to_owned(),
                m1: self.m1.row(i).to_owned(),
                m2: self.m2.row(i).to_owned(),
                changed_1: self.changed_1.row(i).to_vec(),
                changed_2: self.changed_2.row(i).to_vec(),
            })
            .collect()
    }

    pub fn from_pairs(pairs: &[LatentPair]) -> Result<LatentBatch> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty pair list".into()));
        }
        let (n_c, n_s) = (pairs[0].content.len(), pairs[0].style_1.len());
        let (n_m1, n_m2) = (pairs[0].m1.len(), pairs[0].m2.len());
        let n = pairs.len();
        let mut batch = LatentBatch {
            content: Array2::zeros((n, n_c)),
            style_1: Array2::zeros((n, n_s)),
            style_2: Array2::zeros((n, n_s)),
            m1: Array2::zeros((n, n_m1)),
            m2: Array2::zeros((n, n_m2)),
            changed_1: Array2::from_elem((n, n_s), false),
            changed_2: Array2::from_elem((n, n_s), false),
        };
        for (i, p) in pairs.iter().enumerate() {
            if p.content.len() != n_c
                || p.style_1.len() != n_s
                || p.style_2.len() != n_s
                || p.m1.len() != n_m1
                || p.m2.len() != n_m2
            {
                return Err(Error::InvalidArgument(format!(
                    "pair {i} has inconsistent block dimensions"
                )));
            }
            batch.content.row_mut(i).assign(&p.content);
            batch.style_1.row_mut(i).assign(&p.style_1);
            batch.style_2.row_mut(i).assign(&p.style_2);
            batch.m1.row_mut(i).assign(&p.m1);
            batch.m2.row_mut(i).assign(&p.m2);
            for (j, c) in p.changed_1.iter().enumerate() {
                batch.changed_1[[i, j]] = *c;
            }
            for (j, c) in p.changed_2.iter().enumerate() {
                batch.changed_2[[i, j]] = *c;
            }
        }
        Ok(batch)
    }

    /// Replaces content with a single uniform random permutation of the
    /// batch's content rows, shared by both sides; style and modality blocks
    /// are untouched. Breaks any content-to-style dependence.
    pub fn intervene_content(&self, rng_seed: u64) -> Result<LatentBatch> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("cannot intervene on an empty batch".into()));
        }
        let mut rng = rng::stream_rng(rng_seed, Stream::Intervention);
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut rng);
        let mut out = self.clone();
        for (row, &src) in perm.iter().enumerate() {
            out.content.row_mut(row).assign(&self.content.row(src));
        }
        Ok(out)
    }

    /// Dumps one row per sample with columns `c_*`, `s_*`, `s_tilde_*`,
    /// `m1_*`, `m2_*` (side-1 styles under `s_*`, side-2 under `s_tilde_*`).
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        let mut header: Vec<String> = Vec::new();
        for (prefix, cols) in [
            ("c", self.content.ncols()),
            ("s", self.style_1.ncols()),
            ("s_tilde", self.style_2.ncols()),
            ("m1", self.m1.ncols()),
            ("m2", self.m2.ncols()),
        ] {
            header.extend((0..cols).map(|j| format!("{prefix}_{j}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            for m in [&self.content, &self.style_1, &self.style_2, &self.m1, &self.m2] {
                fields.extend(m.row(i).iter().map(|v| format!("{v}")));
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn hconcat(parts: &[&Array2<f64>]) -> Array2<f64> {
    let n = parts[0].nrows();
    let total: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((n, total));
    let mut at = 0;
    for p in parts {
        out.slice_mut(s![.., at..at + p.ncols()]).assign(p);
        at += p.ncols();
    }
    out
}

/// Matched latent/observation pairs with ground-truth block labels.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub latents: LatentBatch,
    pub x1: Array2<f64>,
    pub x2: Array2<f64>,
    /// Identifies the generating spec and mixers, e.g. a config hash.
    pub spec_id: String,
}

impl PairedBatch {
    /// Samples latents and pushes them through the two mixing functions.
    pub fn generate(
        spec: &LatentSpec,
        mixer_1: &InvertibleMixer,
        mixer_2: &InvertibleMixer,
        n: usize,
        rng_seed: u64,
        spec_id: impl Into<String>,
    ) -> Result<PairedBatch> {
        let latents = sample_batch(spec, n, rng_seed)?;
        Self::from_latents(spec, mixer_1, mixer_2, latents, spec_id)
    }

    pub fn from_latents(
        spec: &LatentSpec,
        mixer_1: &InvertibleMixer,
        mixer_2: &InvertibleMixer,
        latents: LatentBatch,
        spec_id: impl Into<String>,
    ) -> Result<PairedBatch> {
        if mixer_1.dim() != spec.dim_1() || mixer_2.dim() != spec.dim_2() {
            return Err(Error::InvalidConfig(format!(
                "mixer dims ({}, {}) do not match latent dims ({}, {})",
                mixer_1.dim(),
                mixer_2.dim(),
                spec.dim_1(),
                spec.dim_2()
            )));
        }
        let x1 = mixer_1.apply(&latents.z1())?;
        let x2 = mixer_2.apply(&latents.z2())?;
        Ok(PairedBatch {
            latents,
            x1,
            x2,
            spec_id: spec_id.into(),
        })
    }
}

/// Samples `n` matched latent pairs according to `spec.mode`.
pub fn sample_batch(spec: &LatentSpec, n: usize, rng_seed: u64) -> Result<LatentBatch> {
    let mut rng = rng::numbered_rng(rng_seed, 0);
    sample_batch_with_rng(spec, n, &mut rng)
}

/// As [`sample_batch`], drawing from a caller-owned generator so consecutive
/// batches (e.g. training iterations) continue one stream.
pub fn sample_batch_with_rng(
    spec: &LatentSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    spec.validate()?;

    let chol_or = |cov: &Array2<f64>, discrete: bool| -> Option<Array2<f64>> {
        if discrete || cov.nrows() == 0 {
            None
        } else {
            Some(cov.cholesky(UPLO::Lower).expect("validated SPD"))
        }
    };
    let k_c = spec.discrete_classes(Block::Content);
    let k_s = spec.discrete_classes(Block::Style);
    let k_m1 = spec.discrete_classes(Block::Modality1);
    let k_m2 = spec.discrete_classes(Block::Modality2);
    let l_c = chol_or(&spec.cov_c, k_c.is_some());
    let l_s = chol_or(&spec.cov_s, k_s.is_some());
    let l_m1 = chol_or(&spec.cov_m1, k_m1.is_some());
    let l_m2 = chol_or(&spec.cov_m2, k_m2.is_some());
    let l_eps = if spec.n_s == 0 || k_s.is_some() {
        None
    } else {
        Some(spec.cov_eps.cholesky(UPLO::Lower).expect("validated SPD"))
    };

    let gaussian_block = |dim: usize, chol: &Option<Array2<f64>>, rng: &mut ChaCha8Rng| {
        if dim == 0 {
            Array2::zeros((n, 0))
        } else {
            standard_normal_matrix(n, dim, rng).dot(&chol.as_ref().unwrap().t())
        }
    };

    // Draw order: content, style, m1, m2, then per-side change masks and
    // perturbations. Stable across releases; determinism tests pin it.
    let content = match k_c {
        Some(k) => embed_classes(&uniform_classes(n, spec.n_c, k, rng), k),
        None => gaussian_block(spec.n_c, &l_c, rng),
    };
    let style_base = match k_s {
        Some(k) => embed_classes(&uniform_classes(n, spec.n_s, k, rng), k),
        None => {
            let mut s = gaussian_block(spec.n_s, &l_s, rng);
            if spec.n_s > 0 {
                s = s + content.dot(&spec.causal_b.t());
                s += &spec.causal_a;
            }
            s
        }
    };
    let m1 = match k_m1 {
        Some(k) => embed_classes(&uniform_classes(n, spec.n_m1, k, rng), k),
        None => gaussian_block(spec.n_m1, &l_m1, rng),
    };
    let m2 = match k_m2 {
        Some(k) => embed_classes(&uniform_classes(n, spec.n_m2, k, rng), k),
        None => gaussian_block(spec.n_m2, &l_m2, rng),
    };

    let draw_side = |rng: &mut ChaCha8Rng| -> (Array2<bool>, Array2<f64>) {
        let mask = bernoulli_matrix(n, spec.n_s, spec.perturb_prob, rng);
        let perturbed = match k_s {
            Some(k) => {
                // Discrete style: changed dimensions are resampled uniformly.
                let repl = embed_classes(&uniform_classes(n, spec.n_s, k, rng), k);
                select(&mask, &repl, &style_base)
            }
            None if spec.n_s == 0 => Array2::zeros((n, 0)),
            None => {
                let eps = standard_normal_matrix(n, spec.n_s, rng)
                    .dot(&l_eps.as_ref().unwrap().t());
                let shifted = &style_base + &eps;
                select(&mask, &shifted, &style_base)
            }
        };
        (mask, perturbed)
    };

    let (changed_1, style_1, changed_2, style_2) = match spec.mode {
        SamplingMode::Asymmetric => {
            let (mask_2, style_2) = draw_side(rng);
            (
                Array2::from_elem((n, spec.n_s), false),
                style_base.clone(),
                mask_2,
                style_2,
            )
        }
        SamplingMode::Symmetric => {
            // Both sides perturb the shared s; change sets and noise are
            // drawn independently, which excludes the degenerate case of
            // identically perturbed sides.
            let (mask_1, style_1) = draw_side(rng);
            let (mask_2, style_2) = draw_side(rng);
            (mask_1, style_1, mask_2, style_2)
        }
    };

    Ok(LatentBatch {
        content,
        style_1,
        style_2,
        m1,
        m2,
        changed_1,
        changed_2,
    })
}

/// Samples matched pairs under the asymmetric process (Dirac-coupled content,
/// side 2 carrying the perturbed style).
pub fn sample_latents(spec: &LatentSpec, n: usize, rng_seed: u64) -> Result<Vec<LatentPair>> {
    if spec.mode != SamplingMode::Asymmetric {
        return Err(Error::InvalidArgument(
            "sample_latents requires asymmetric mode; use sample_latents_symmetric".into(),
        ));
    }
    Ok(sample_batch(spec, n, rng_seed)?.to_pairs())
}

/// Samples matched pairs where both sides carry independently perturbed
/// styles from a shared `s`; content and modality blocks are copied exactly.
pub fn sample_latents_symmetric(
    spec: &LatentSpec,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<LatentPair>> {
    if spec.mode != SamplingMode::Symmetric {
        return Err(Error::InvalidArgument(
            "sample_latents_symmetric requires spec.mode = symmetric".into(),
        ));
    }
    Ok(sample_batch(spec, n, rng_seed)?.to_pairs())
}

/// Replaces content in every pair with a shared batch-wise permutation of the
/// content rows; see [`LatentBatch::intervene_content`].
pub fn intervene_content(batch: &[LatentPair], rng_seed: u64) -> Result<Vec<LatentPair>> {
    let mat = LatentBatch::from_pairs(batch)?;
    Ok(mat.intervene_content(rng_seed)?.to_pairs())
}

/// Uniform categorical draws with `k` classes, shaped like `values`.
pub fn discretize_block(values: &Array2<f64>, k: usize, rng_seed: u64) -> Result<Array2<u32>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "discrete blocks need at least 2 classes, got {k}"
        )));
    }
    let mut rng = rng::numbered_rng(rng_seed, 0);
    Ok(uniform_classes(values.nrows(), values.ncols(), k, &mut rng))
}

/// Embeds class indices as centered integer codes `class - (k-1)/2`, keeping
/// mixer inputs roughly zero-mean.
pub fn embed_classes(classes: &Array2<u32>, k: usize) -> Array2<f64> {
    let offset = (k as f64 - 1.0) / 2.0;
    classes.mapv(|c| c as f64 - offset)
}

/// Inverse of [`embed_classes`]; values must be exact embedded codes.
pub fn recover_classes(values: &Array2<f64>, k: usize) -> Array2<u32> {
    let offset = (k as f64 - 1.0) / 2.0;
    values.mapv(|v| (v + offset).round() as u32)
}

fn standard_normal_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Array2::from_shape_vec((n, d), data).expect("shape")
}

fn uniform_classes(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<u32> {
    let data: Vec<u32> = (0..n * d).map(|_| rng.gen_range(0..k as u32)).collect();
    Array2::from_shape_vec((n, d), data).expect("shape")
}

fn bernoulli_matrix(n: usize, d: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let data: Vec<bool> = (0..n * d).map(|_| rng.gen::<f64>() < p).collect();
    Array2::from_shape_vec((n, d), data).expect("shape")
}

/// Elementwise `mask ? a : b`, copying unchanged coordinates bit-exactly.
fn select(mask: &Array2<bool>, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = b.clone();
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            out[[i, j]] = a[[i, j]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis as NdAxis;

    fn unit_spec(perturb: f64) -> LatentSpec {
        LatentSpec::independent(4, 4, 3, 3, perturb)
    }

    fn column_mean(m: &Array2<f64>) -> Array1<f64> {
        m.mean_axis(NdAxis(0)).unwrap()
    }

    fn sample_cov(m: &Array2<f64>) -> Array2<f64> {
        let n = m.nrows() as f64;
        let mean = column_mean(m);
        let centered = m - &mean;
        centered.t().dot(&centered) / (n - 1.0)
    }

    #[test]
    fn unit_covariance_moments_match_declared_law() {
        let spec = unit_spec(0.75);
        let batch = sample_batch(&spec, 100_000, 20240209).unwrap();
        for block in [&batch.content, &batch.style_1, &batch.m1, &batch.m2] {
            let mean = column_mean(block);
            for v in mean.iter() {
                assert!(v.abs() < 0.02, "block mean {v} exceeds 0.02");
            }
            let cov = sample_cov(block);
            let eye: Array2<f64> = Array2::eye(block.ncols());
            let dev = (&cov - &eye).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dev < 0.05, "covariance deviates from identity by {dev}");
        }
        // perturbed style variance grows by pi * eps variance
        let cov2 = sample_cov(&batch.style_2);
        for j in 0..4 {
            assert!(
                (cov2[[j, j]] - 1.75).abs() < 0.06,
                "style_2 variance {} far from 1.75",
                cov2[[j, j]]
            );
        }
    }

    #[test]
    fn zero_perturb_prob_copies_style_exactly() {
        let spec = unit_spec(0.0);
        let batch = sample_batch(&spec, 500, 3).unwrap();
        assert_eq!(batch.style_1, batch.style_2);
        assert!(!batch.changed_2.iter().any(|c| *c));
    }

    #[test]
    fn full_perturb_prob_changes_every_coordinate() {
        let spec = unit_spec(1.0);
        let batch = sample_batch(&spec, 500, 3).unwrap();
        assert!(batch.changed_2.iter().all(|c| *c));
        // additive gaussian noise is almost surely nonzero everywhere
        let equal = batch
            .style_1
            .iter()
            .zip(batch.style_2.iter())
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(equal, 0);
    }

    #[test]
    fn change_set_frequency_matches_bernoulli_rate() {
        let pi = 0.75;
        let n = 10_000;
        let spec = unit_spec(pi);
        let batch = sample_batch(&spec, n, 99).unwrap();
        let tol = 3.0 * (pi * (1.0 - pi) / n as f64).sqrt();
        for j in 0..spec.n_s {
            let freq = batch.changed_2.column(j).iter().filter(|c| **c).count() as f64 / n as f64;
            assert!(
                (freq - pi).abs() <= tol,
                "dim {j}: frequency {freq} outside {pi} +- {tol}"
            );
        }
    }

    #[test]
    fn style_locality_outside_change_set() {
        let spec = unit_spec(0.4);
        let batch = sample_batch(&spec, 2_000, 17).unwrap();
        for ((i, j), &changed) in batch.changed_2.indexed_iter() {
            if !changed {
                assert_eq!(batch.style_1[[i, j]].to_bits(), batch.style_2[[i, j]].to_bits());
            }
        }
    }

    #[test]
    fn causal_off_leaves_content_style_uncorrelated() {
        let spec = unit_spec(0.75);
        let batch = sample_batch(&spec, 100_000, 7).unwrap();
        let mc = column_mean(&batch.content);
        let ms = column_mean(&batch.style_1);
        let n = batch.len() as f64;
        let cc = &batch.content - &mc;
        let cs = &batch.style_1 - &ms;
        let cross = cc.t().dot(&cs) / (n - 1.0);
        let max = cross.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 0.05, "cross-covariance {max} exceeds 0.05");
    }

    #[test]
    fn causal_link_shifts_style_mean() {
        let mut spec = LatentSpec::independent(2, 2, 0, 0, 0.5);
        spec.causal_a = Array1::from_vec(vec![3.0, -3.0]);
        let batch = sample_batch(&spec, 50_000, 5).unwrap();
        let mean = column_mean(&batch.style_1);
        assert!((mean[0] - 3.0).abs() < 0.05);
        assert!((mean[1] + 3.0).abs() < 0.05);
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let spec = unit_spec(0.6);
        let a = sample_batch(&spec, 64, 123).unwrap();
        let b = sample_batch(&spec, 64, 123).unwrap();
        let c = sample_batch(&spec, 64, 124).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(matches!(
            sample_batch(&unit_spec(0.5), 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let mut spec = unit_spec(0.5);
        spec.cov_c[[0, 1]] = 2.0;
        spec.cov_c[[1, 0]] = 2.0;
        assert!(matches!(sample_batch(&spec, 8, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn assumption_check_rejects_unperturbable_style() {
        let spec = unit_spec(0.0);
        assert!(spec.validate().is_ok());
        assert!(matches!(spec.validate_assumptions(), Err(Error::InvalidConfig(_))));
        assert!(LatentSpec::independent(4, 0, 3, 3, 0.0)
            .validate_assumptions()
            .is_ok());
    }

    #[test]
    fn symmetric_zero_perturbation_copies_both_sides() {
        let mut spec = unit_spec(0.0);
        spec.mode = SamplingMode::Symmetric;
        let pairs = sample_latents_symmetric(&spec, 100, 8).unwrap();
        for p in &pairs {
            assert_eq!(p.style_1, p.style_2);
            assert!(p.changed_1.iter().all(|c| !c));
        }
    }

    #[test]
    fn symmetric_full_perturbation_correlation_matches_closed_form() {
        // s ~ N(0, 1), eps ~ N(0, 1), pi = 1:
        // corr(s~1_j, s~2_j) = Var(s)/(Var(s) + Var(eps)) = 1/2.
        let mut spec = unit_spec(1.0);
        spec.mode = SamplingMode::Symmetric;
        let batch = sample_batch(&spec, 100_000, 31).unwrap();
        for j in 0..spec.n_s {
            let a = batch.style_1.column(j);
            let b = batch.style_2.column(j);
            let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                cov += (x - ma) * (y - mb);
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
            }
            let corr = cov / (va.sqrt() * vb.sqrt());
            assert!((corr - 0.5).abs() < 0.01, "dim {j}: corr {corr} far from 0.5");
        }
    }

    #[test]
    fn symmetric_content_blocks_are_shared() {
        let mut spec = unit_spec(0.9);
        spec.mode = SamplingMode::Symmetric;
        let pairs = sample_latents_symmetric(&spec, 200, 2).unwrap();
        for p in &pairs {
            let z1 = p.z1();
            let z2 = p.z2();
            for j in 0..spec.n_c {
                assert_eq!(z1[j].to_bits(), z2[j].to_bits());
            }
        }
    }

    #[test]
    fn mode_mismatch_rejected() {
        let spec = unit_spec(0.5);
        assert!(sample_latents(&spec, 4, 0).is_ok());
        assert!(sample_latents_symmetric(&spec, 4, 0).is_err());
    }

    #[test]
    fn intervention_on_single_pair_is_identity() {
        let spec = unit_spec(0.5);
        let pairs = sample_latents(&spec, 1, 4).unwrap();
        let out = intervene_content(&pairs, 9).unwrap();
        assert_eq!(out[0].content, pairs[0].content);
        assert_eq!(out[0].style_2, pairs[0].style_2);
    }

    #[test]
    fn intervention_permutes_content_and_keeps_marginal() {
        let spec = unit_spec(0.5);
        let batch = sample_batch(&spec, 10_000, 44).unwrap();
        let intervened = batch.intervene_content(91).unwrap();

        assert_eq!(intervened.style_1, batch.style_1);
        assert_eq!(intervened.style_2, batch.style_2);
        assert_eq!(intervened.m1, batch.m1);

        // same multiset per column: the in-batch KS statistic is exactly 0
        for j in 0..spec.n_c {
            let mut a: Vec<f64> = batch.content.column(j).to_vec();
            let mut b: Vec<f64> = intervened.content.column(j).to_vec();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, b);
        }

        // against a fresh draw from the process, KS stays below the 1%
        // critical value 1.628 * sqrt(2/n)
        let fresh = sample_batch(&spec, 10_000, 45).unwrap();
        let crit = 1.628 * (2.0 / 10_000.0f64).sqrt();
        for j in 0..spec.n_c {
            let d = ks_statistic(
                &intervened.content.column(j).to_vec(),
                &fresh.content.column(j).to_vec(),
            );
            assert!(d < crit, "dim {j}: KS {d} >= {crit}");
        }
    }

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (mut i, mut j) = (0usize, 0usize);
        let mut d: f64 = 0.0;
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fa = i as f64 / a.len() as f64;
            let fb = j as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn intervention_rejects_empty_batch() {
        assert!(matches!(intervene_content(&[], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn discretize_frequencies_are_uniform() {
        let values = Array2::zeros((30_000, 1));
        let classes = discretize_block(&values, 3, 77).unwrap();
        for k in 0..3u32 {
            let freq = classes.iter().filter(|c| **c == k).count() as f64 / 30_000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "class {k} frequency {freq}");
        }
    }

    #[test]
    fn discretize_is_deterministic_and_validates_k() {
        let values = Array2::zeros((1, 1));
        let a = discretize_block(&values, 2, 5).unwrap();
        let b = discretize_block(&values, 2, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(discretize_block(&values, 1, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn class_embedding_round_trips_and_centers() {
        let classes = Array2::from_shape_vec((2, 3), vec![0u32, 1, 2, 2, 1, 0]).unwrap();
        let embedded = embed_classes(&classes, 3);
        assert_eq!(embedded.row(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(recover_classes(&embedded, 3), classes);
        // even class count lands on half-integer codes
        let classes2 = Array2::from_shape_vec((1, 2), vec![0u32, 1]).unwrap();
        let embedded2 = embed_classes(&classes2, 2);
        assert_eq!(embedded2.row(0).to_vec(), vec![-0.5, 0.5]);
        assert_eq!(recover_classes(&embedded2, 2), classes2);
    }

    #[test]
    fn discrete_style_spec_samples_classes_and_perturbs_by_resampling() {
        let mut spec = unit_spec(1.0);
        spec.discrete_blocks.insert(Block::Style, 4);
        let batch = sample_batch(&spec, 5_000, 13).unwrap();
        for v in batch.style_1.iter() {
            let c = (*v + 1.5).round();
            assert!((0.0..=3.0).contains(&c) && ((*v + 1.5) - c).abs() < 1e-12);
        }
        // with pi = 1 every coordinate is redrawn; about 1/k collide
        let same = batch
            .style_1
            .iter()
            .zip(batch.style_2.iter())
            .filter(|(a, b)| a == b)
            .count() as f64
            / (5_000.0 * 4.0);
        assert!((same - 0.25).abs() < 0.03, "collision rate {same}");
    }

    #[test]
    fn causal_with_discrete_style_rejected() {
        let mut spec = unit_spec(0.75);
        spec.discrete_blocks.insert(Block::Style, 3);
        spec.causal_a[0] = 1.0;
        assert!(matches!(spec.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn random_correlation_is_unit_diagonal_spd() {
        let mut rng = rng::numbered_rng(3, 0);
        let corr = random_correlation(6, &mut rng);
        for i in 0..6 {
            assert_eq!(corr[[i, i]], 1.0);
        }
        assert!(corr.cholesky(UPLO::Lower).is_ok());
        let off = (0..6)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| corr[[i, j]].abs())
            .fold(0.0f64, f64::max);
        assert!(off > 0.0, "expected nonzero off-diagonal correlations");
    }

    #[test]
    fn pairs_round_trip_through_matrix_form() {
        let spec = unit_spec(0.5);
        let batch = sample_batch(&spec, 33, 21).unwrap();
        let pairs = batch.to_pairs();
        let back = LatentBatch::from_pairs(&pairs).unwrap();
        assert_eq!(batch, back);
    }

    #[test]
    fn csv_dump_has_expected_header_and_rows() {
        let spec = LatentSpec::independent(2, 1, 1, 2, 0.5);
        let batch = sample_batch(&spec, 3, 3).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "c_0,c_1,s_0,s_tilde_0,m1_0,m2_0,m2_1"
        );
        assert_eq!(lines.count(), 3);
    }
}
