//! Infinite-width signal propagation for ReLU networks at He initialization.
//!
//! Inputs are tracked at the correlation level: `c_{l+1} = g(c_l)` with the
//! ReLU correlation map `g`, and gradient covariances decay through the
//! running products `ζ_m = Π_{k<m} g′(c_k)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Distance kept from `c0 = −1`, where `g′` vanishes and kills every product.
pub const GRID_LOWER_OFFSET: f64 = 1e-3;

/// Default grid cutoff below `c0 = 1`.
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Exponent of the forward/backward balance point `l = L^{3/5}`.
pub const EQUILIBRIUM_EXPONENT: f64 = 0.6;

const CLAMP_SLACK: f64 = 1e-12;

fn clamp_corr(c: f64) -> Result<f64> {
    if c.is_nan() || c.abs() > 1.0 + CLAMP_SLACK {
        return Err(Error::Domain(format!("correlation {c} outside [-1, 1]")));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// ReLU correlation map `g(c) = (c·asin c + √(1−c²))/π + c/2`.
pub fn relu_corr(c: f64) -> Result<f64> {
    let c = clamp_corr(c)?;
    Ok(relu_corr_unchecked(c))
}

/// Derivative `g′(c) = asin(c)/π + 1/2`.
pub fn relu_corr_deriv(c: f64) -> Result<f64> {
    let c = clamp_corr(c)?;
    Ok(relu_corr_deriv_unchecked(c))
}

fn relu_corr_unchecked(c: f64) -> f64 {
    let g = (c * c.asin() + (1.0 - c * c).max(0.0).sqrt()) / PI + 0.5 * c;
    g.clamp(0.0, 1.0)
}

fn relu_corr_deriv_unchecked(c: f64) -> f64 {
    (c.asin() / PI + 0.5).clamp(0.0, 1.0)
}

/// Correlation orbit of one input pair through `L` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationProfile {
    pub c0: f64,
    /// `c_1..c_L`, stored at index `l − 1`.
    pub corr: Vec<f64>,
    /// `g′(c_1)..g′(c_{L−1})`, stored at index `l − 1`.
    pub gprime: Vec<f64>,
    /// `ζ_1..ζ_L` with `ζ_1 = 1`, stored at index `m − 1`.
    pub zeta: Vec<f64>,
}

impl PropagationProfile {
    pub fn depth(&self) -> usize {
        self.corr.len()
    }

    /// `c_l` for `1 ≤ l ≤ L`.
    pub fn c(&self, l: usize) -> f64 {
        self.corr[l - 1]
    }

    /// `ζ_m` for `1 ≤ m ≤ L`.
    pub fn zeta_at(&self, m: usize) -> f64 {
        self.zeta[m - 1]
    }
}

/// Iterate the correlation map `depth` times from `c0`.
pub fn propagate(c0: f64, depth: usize) -> Result<PropagationProfile> {
    let c0 = clamp_corr(c0)?;
    if depth == 0 {
        return Err(Error::Domain("depth must be at least 1".into()));
    }
    let mut corr = Vec::with_capacity(depth);
    let mut c = c0;
    for _ in 0..depth {
        c = relu_corr_unchecked(c);
        corr.push(c);
    }
    let gprime: Vec<f64> = corr[..depth - 1]
        .iter()
        .map(|&c| relu_corr_deriv_unchecked(c))
        .collect();
    let mut zeta = Vec::with_capacity(depth);
    let mut z = 1.0;
    zeta.push(z);
    for &g in &gprime {
        z *= g;
        zeta.push(z);
    }
    Ok(PropagationProfile {
        c0,
        corr,
        gprime,
        zeta,
    })
}

/// `ζ_L/ζ_l = Π_{k=l}^{L−1} g′(c_k)`, evaluated as the product itself.
pub fn backward_ratio(p: &PropagationProfile, l: usize, depth: usize) -> Result<f64> {
    if l == 0 || l > depth || depth > p.depth() {
        return Err(Error::Index(format!(
            "backward ratio needs 1 <= l <= L <= {}, got l={l}, L={depth}",
            p.depth()
        )));
    }
    Ok(p.gprime[l - 1..depth - 1].iter().product())
}

/// Forward and backward information-loss curves over a grid of initial
/// correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoLossCurves {
    pub epsilon: f64,
    pub depth: usize,
    pub c0_grid: Vec<f64>,
    /// `forward[l−1] = max_grid (1 − c_l)`.
    pub forward: Vec<f64>,
    /// `backward[l−1] = max_grid ζ_L/ζ_l`.
    pub backward: Vec<f64>,
}

impl InfoLossCurves {
    pub fn forward_at(&self, l: usize) -> f64 {
        self.forward[l - 1]
    }

    pub fn backward_at(&self, l: usize) -> f64 {
        self.backward[l - 1]
    }
}

/// Sup-over-grid information-loss curves for a depth-`depth` network.
///
/// The grid is uniform over `[−1 + 1e−3, 1 − ε]`.
pub fn info_loss_curves(epsilon: f64, grid_size: usize, depth: usize) -> Result<InfoLossCurves> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("epsilon {epsilon} outside (0, 1)")));
    }
    if grid_size < 2 {
        return Err(Error::Domain("grid needs at least two points".into()));
    }
    if depth == 0 {
        return Err(Error::Domain("depth must be at least 1".into()));
    }
    let lo = -1.0 + GRID_LOWER_OFFSET;
    let hi = 1.0 - epsilon;
    let step = (hi - lo) / (grid_size - 1) as f64;
    let c0_grid: Vec<f64> = (0..grid_size).map(|i| lo + step * i as f64).collect();
    let mut forward = vec![0.0_f64; depth];
    let mut backward = vec![0.0_f64; depth];
    for &c0 in &c0_grid {
        let p = propagate(c0, depth)?;
        for (f, c) in forward.iter_mut().zip(&p.corr) {
            *f = f.max(1.0 - c);
        }
        // Suffix products give ζ_L/ζ_l for every l in one pass.
        let mut suffix = 1.0;
        for l in (1..=depth).rev() {
            if l < depth {
                suffix *= p.gprime[l - 1];
            }
            backward[l - 1] = backward[l - 1].max(suffix);
        }
    }
    Ok(InfoLossCurves {
        epsilon,
        depth,
        c0_grid,
        forward,
        backward,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumMode {
    /// `L^{3/5}`, the solution of `l⁻² = (l/L)³`.
    Closed,
    /// Crossing of the numerical information-loss curves.
    Numeric,
}

/// Layer where forward and backward information losses balance.
pub fn equilibrium_layer(
    depth: usize,
    mode: EquilibriumMode,
    curves: Option<&InfoLossCurves>,
) -> Result<f64> {
    if depth < 2 {
        return Err(Error::Domain("equilibrium needs depth >= 2".into()));
    }
    match mode {
        EquilibriumMode::Closed => Ok(closed_equilibrium(depth)),
        EquilibriumMode::Numeric => {
            let curves = curves.ok_or_else(|| {
                Error::Precondition("numeric equilibrium requires information-loss curves".into())
            })?;
            if curves.depth != depth {
                return Err(Error::Precondition(format!(
                    "curves computed for depth {}, asked for {depth}",
                    curves.depth
                )));
            }
            let mut best = (f64::INFINITY, 1usize);
            for l in 1..=depth {
                let gap = (curves.forward_at(l).ln() - curves.backward_at(l).ln()).abs();
                if gap < best.0 {
                    best = (gap, l);
                }
            }
            Ok(best.1 as f64)
        }
    }
}

// L^{3/5} as the root of x⁵ = L³, polished so exact powers come out exact.
fn closed_equilibrium(depth: usize) -> f64 {
    let l = depth as f64;
    let cube = l * l * l;
    let mut x = l.powf(EQUILIBRIUM_EXPONENT);
    x -= (x.powi(5) - cube) / (5.0 * x.powi(4));
    let r = x.round();
    if r.powi(5) == cube {
        r
    } else {
        x
    }
}

/// Numerical check of `log b_l = −a log l + κ log(l)/l + O(1/l)` for
/// `b_l = Π β_k`, `β_k = 1 − a/k + κ log(k)/k²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCheck {
    pub a: u32,
    pub kappa: f64,
    /// First factor index, `a + 1`.
    pub start: usize,
    pub l_max: usize,
    /// `log b_l` for `l = start..=l_max`.
    pub log_b: Vec<f64>,
    /// `r_l = log b_l + a log l − κ log(l)/l` for `l = start..=l_max`.
    pub residuals: Vec<f64>,
    /// `sup_{l ≥ l_max/2} l·|r_l − r_{l_max}|`.
    pub tail_sup: f64,
    /// Extrapolated `lim r_l`.
    pub limit: f64,
}

impl AsymptoticCheck {
    pub fn log_b_at(&self, l: usize) -> f64 {
        self.log_b[l - self.start]
    }

    pub fn r_at(&self, l: usize) -> f64 {
        self.residuals[l - self.start]
    }

    /// `l·|r_l − r_∞|` with the extrapolated limit.
    pub fn scaled_error(&self, l: usize) -> f64 {
        l as f64 * (self.r_at(l) - self.limit).abs()
    }
}

fn beta(a: f64, kappa: f64, k: usize) -> f64 {
    let k = k as f64;
    1.0 - a / k + kappa * k.ln() / (k * k)
}

fn r_value(a: f64, kappa: f64, l: usize, log_b: f64) -> f64 {
    let lf = l as f64;
    log_b + a * lf.ln() - kappa * lf.ln() / lf
}

pub fn asymptotic_check(a: u32, kappa: f64, l_max: usize) -> Result<AsymptoticCheck> {
    if l_max < 100 {
        return Err(Error::Domain("l_max must be at least 100".into()));
    }
    let af = a as f64;
    let start = a as usize + 1;
    let mut log_b = Vec::with_capacity(l_max + 1 - start);
    let mut residuals = Vec::with_capacity(l_max + 1 - start);
    let mut acc = 0.0;
    for k in start..=l_max {
        let b = beta(af, kappa, k);
        if b <= 0.0 {
            return Err(Error::Domain(format!(
                "factor beta_{k} = {b} is not positive"
            )));
        }
        acc += (b - 1.0).ln_1p();
        log_b.push(acc);
        residuals.push(r_value(af, kappa, k, acc));
    }
    let r_end = *residuals.last().expect("nonempty range");
    let tail_sup = (l_max / 2..=l_max)
        .filter(|&l| l >= start)
        .map(|l| l as f64 * (residuals[l - start] - r_end).abs())
        .fold(0.0_f64, f64::max);

    // Continue the product far beyond l_max and eliminate the
    // r_∞ + (A log l + B)/l corrections from three samples.
    let probes = [16 * l_max, 32 * l_max, 64 * l_max];
    let mut samples = [0.0; 3];
    let mut k = l_max;
    for (slot, &target) in samples.iter_mut().zip(&probes) {
        while k < target {
            k += 1;
            acc += (beta(af, kappa, k) - 1.0).ln_1p();
        }
        *slot = r_value(af, kappa, target, acc);
    }
    let limit = extrapolate_limit(&probes, &samples);

    Ok(AsymptoticCheck {
        a,
        kappa,
        start,
        l_max,
        log_b,
        residuals,
        tail_sup,
        limit,
    })
}

// Solve r = r∞ + A·log(l)/l + B/l through three points.
fn extrapolate_limit(ls: &[usize; 3], rs: &[f64; 3]) -> f64 {
    let rows: Vec<[f64; 4]> = ls
        .iter()
        .zip(rs)
        .map(|(&l, &r)| {
            let l = l as f64;
            [1.0, l.ln() / l, 1.0 / l, r]
        })
        .collect();
    let m = [rows[0], rows[1], rows[2]];
    let det3 = |c0: usize, c1: usize, c2: usize| {
        m[0][c0] * (m[1][c1] * m[2][c2] - m[1][c2] * m[2][c1])
            - m[0][c1] * (m[1][c0] * m[2][c2] - m[1][c2] * m[2][c0])
            + m[0][c2] * (m[1][c0] * m[2][c1] - m[1][c1] * m[2][c0])
    };
    det3(3, 1, 2) / det3(0, 1, 2)
}

/// Log-log fit of peak layers against depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepFit {
    pub depths: Vec<f64>,
    pub peak_layers: Vec<f64>,
    pub free_slope: f64,
    pub free_intercept: f64,
    /// `C` minimizing `Σ (log l* − 0.6 log L − C)²`.
    pub fixed_slope_intercept: f64,
    pub r2: f64,
}

pub fn fit_peak_line(depths: &[f64], peaks: &[f64]) -> Result<SweepFit> {
    if depths.len() != peaks.len() {
        return Err(Error::Dimension(format!(
            "{} depths but {} peaks",
            depths.len(),
            peaks.len()
        )));
    }
    if depths.len() < 2 {
        return Err(Error::Degenerate("need at least two depths".into()));
    }
    if depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Degenerate(
            "depths must be strictly increasing".into(),
        ));
    }
    if let Some(p) = peaks.iter().find(|&&p| p.is_nan() || p < 1.0) {
        return Err(Error::Domain(format!("peak layer {p} below 1")));
    }
    if let Some(d) = depths.iter().find(|&&d| d.is_nan() || d < 1.0) {
        return Err(Error::Domain(format!("depth {d} below 1")));
    }
    let xs: Vec<f64> = depths.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = peaks.iter().map(|p| p.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    let fixed = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - EQUILIBRIUM_EXPONENT * x)
        .sum::<f64>()
        / n;
    Ok(SweepFit {
        depths: depths.to_vec(),
        peak_layers: peaks.to_vec(),
        free_slope: slope,
        free_intercept: intercept,
        fixed_slope_intercept: fixed,
        r2,
    })
}
