//! Invertible nonlinear mixing functions.
//!
//! Observations are produced by pushing latent vectors through a stack of
//! square linear maps interleaved with LeakyReLU activations (none after the
//! final layer, so the map is onto `R^d`). Weight matrices are rejection
//! sampled until well conditioned, which keeps the stack bijective and the
//! stored inverse numerically trustworthy.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Inverse, SVD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Retry cap for rejection sampling of a single weight matrix.
const MAX_REJECTION_DRAWS: usize = 10_000;

/// A bijective multilayer nonlinear map with stored inverse data.
#[derive(Debug, Clone)]
pub struct InvertibleMixer {
    layers: Vec<Array2<f64>>,
    inverses: Vec<Array2<f64>>,
    dim: usize,
    alpha: f64,
    cond_ratio_threshold: f64,
}

impl InvertibleMixer {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn cond_ratio_threshold(&self) -> f64 {
        self.cond_ratio_threshold
    }

    /// Layer weight matrices, in application order.
    pub fn weights(&self) -> &[Array2<f64>] {
        &self.layers
    }

    /// Maps latent rows to observation rows.
    ///
    /// Each layer multiplies by its weight matrix; LeakyReLU is applied
    /// between layers but not after the last one.
    pub fn apply(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "mixer expects {} columns, got {}",
                self.dim,
                z.ncols()
            )));
        }
        let mut h = z.dot(&self.layers[0].t());
        for w in &self.layers[1..] {
            leaky_relu_inplace(&mut h, self.alpha);
            h = h.dot(&w.t());
        }
        Ok(h)
    }

    /// Exact layer-by-layer inverse of [`apply`](Self::apply).
    pub fn invert(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "mixer expects {} columns, got {}",
                self.dim,
                x.ncols()
            )));
        }
        let last = self.inverses.len() - 1;
        let mut h = x.dot(&self.inverses[last].t());
        for winv in self.inverses[..last].iter().rev() {
            leaky_relu_inverse_inplace(&mut h, self.alpha);
            h = h.dot(&winv.t());
        }
        Ok(h)
    }
}

fn leaky_relu_inplace(m: &mut Array2<f64>, alpha: f64) {
    m.mapv_inplace(|v| if v >= 0.0 { v } else { alpha * v });
}

fn leaky_relu_inverse_inplace(m: &mut Array2<f64>, alpha: f64) {
    m.mapv_inplace(|v| if v >= 0.0 { v } else { v / alpha });
}

/// Ratio of smallest to largest singular value.
fn singular_value_ratio(w: &Array2<f64>) -> Result<f64> {
    let (_, s, _) = w
        .svd(false, false)
        .map_err(|e| Error::Numerical(format!("svd failed: {e}")))?;
    let max = s[0];
    let min = s[s.len() - 1];
    if max == 0.0 {
        return Ok(0.0);
    }
    Ok(min / max)
}

/// Draws an invertible mixer: each layer matrix has i.i.d. standard normal
/// entries and is redrawn until `sigma_min/sigma_max >= cond_ratio_threshold`.
pub fn sample_mixer(
    d: usize,
    n_layers: usize,
    cond_ratio_threshold: f64,
    alpha: f64,
    rng_seed: u64,
) -> Result<InvertibleMixer> {
    let mut rng = rng::numbered_rng(rng_seed, 0);
    sample_mixer_with_rng(d, n_layers, cond_ratio_threshold, alpha, &mut rng)
}

/// As [`sample_mixer`], drawing from a caller-owned generator.
pub fn sample_mixer_with_rng(
    d: usize,
    n_layers: usize,
    cond_ratio_threshold: f64,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<InvertibleMixer> {
    if d < 1 {
        return Err(Error::InvalidArgument("mixer dimension must be >= 1".into()));
    }
    if n_layers < 1 {
        return Err(Error::InvalidArgument("mixer needs at least one layer".into()));
    }
    if !(cond_ratio_threshold > 0.0 && cond_ratio_threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "condition ratio threshold must lie in (0, 1), got {cond_ratio_threshold}"
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "LeakyReLU slope must be positive, got {alpha}"
        )));
    }

    let mut layers = Vec::with_capacity(n_layers);
    let mut inverses = Vec::with_capacity(n_layers);
    for layer_idx in 0..n_layers {
        let mut accepted = None;
        for _ in 0..MAX_REJECTION_DRAWS {
            let data: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
            let w = Array2::from_shape_vec((d, d), data).expect("shape");
            if singular_value_ratio(&w)? >= cond_ratio_threshold {
                accepted = Some(w);
                break;
            }
        }
        let w = accepted.ok_or_else(|| {
            Error::Resource(format!(
                "layer {layer_idx}: no matrix satisfied sigma_min/sigma_max >= \
                 {cond_ratio_threshold} within {MAX_REJECTION_DRAWS} draws"
            ))
        })?;
        let winv = w
            .inv()
            .map_err(|e| Error::Numerical(format!("layer {layer_idx}: inversion failed: {e}")))?;
        layers.push(w);
        inverses.push(winv);
    }

    Ok(InvertibleMixer {
        layers,
        inverses,
        dim: d,
        alpha,
        cond_ratio_threshold,
    })
}

/// Writes the mixer weights as CSV rows `layer,row,col,value`, keyed by the
/// caller through the file name. Values round-trip exactly through `f64`
/// display parsing.
pub fn write_weights_csv<W: std::io::Write>(mixer: &InvertibleMixer, out: &mut W) -> Result<()> {
    writeln!(out, "layer,row,col,value")?;
    for (l, w) in mixer.weights().iter().enumerate() {
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                writeln!(out, "{l},{r},{c},{}", w[[r, c]])?;
            }
        }
    }
    Ok(())
}

/// Reads weights written by [`write_weights_csv`] back into a mixer.
pub fn read_weights_csv<R: std::io::BufRead>(
    input: R,
    alpha: f64,
    cond_ratio_threshold: f64,
) -> Result<InvertibleMixer> {
    let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::ConfigParse(format!(
                "malformed mixer csv line {lineno}: expected 4 fields"
            )));
        }
        let l: usize = fields[0]
            .parse()
            .map_err(|e| Error::ConfigParse(format!("line {lineno}: {e}")))?;
        let r: usize = fields[1]
            .parse()
            .map_err(|e| Error::ConfigParse(format!("line {lineno}: {e}")))?;
        let c: usize = fields[2]
            .parse()
            .map_err(|e| Error::ConfigParse(format!("line {lineno}: {e}")))?;
        let v: f64 = fields[3]
            .parse()
            .map_err(|e| Error::ConfigParse(format!("line {lineno}: {e}")))?;
        entries.push((l, r, c, v));
    }
    if entries.is_empty() {
        return Err(Error::ConfigParse("mixer csv holds no weights".into()));
    }
    let n_layers = entries.iter().map(|e| e.0).max().unwrap() + 1;
    let d = entries.iter().map(|e| e.1).max().unwrap() + 1;
    let mut layers = vec![Array2::<f64>::zeros((d, d)); n_layers];
    for (l, r, c, v) in entries {
        layers[l][[r, c]] = v;
    }
    let mut inverses = Vec::with_capacity(n_layers);
    for (l, w) in layers.iter().enumerate() {
        inverses.push(
            w.inv()
                .map_err(|e| Error::Numerical(format!("layer {l}: inversion failed: {e}")))?,
        );
    }
    Ok(InvertibleMixer {
        layers,
        inverses,
        dim: d,
        alpha,
        cond_ratio_threshold,
    })
}

/// Convenience for diagnostics on a single vector.
pub fn apply_vec(mixer: &InvertibleMixer, z: &Array1<f64>) -> Result<Array1<f64>> {
    let m = z.view().insert_axis(ndarray::Axis(0)).to_owned();
    Ok(mixer.apply(&m)?.row(0).to_owned())
}
