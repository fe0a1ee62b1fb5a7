//! Synthetic data with a known shared subspace between target and sensitive
//! attribute, plus a misspecified variant with a quadratic term.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, TargetKind, Truth};
use crate::error::{Result, SfpError};
use crate::rng;

/// Upper bound on `exp` inside the group shift.
pub const EXP_CLAMP: f64 = 1e6;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub p: usize,
    /// Number of target outputs.
    pub k: usize,
    /// Dimension of the target subspace.
    pub q: usize,
    /// Dimension of the sensitive subspace.
    pub r: usize,
    /// Dimension of their intersection.
    pub s: usize,
    pub noise_y_sd: f64,
    /// Scale of the covariate shift applied to the `Z = 1` group.
    pub shift_scale: f64,
    /// Adds `coef·‖X‖²/p` to every target and to the latent score.
    pub misspecified: bool,
    pub nonlinear_coef: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            p: 10,
            k: 5,
            q: 8,
            r: 8,
            s: 6,
            noise_y_sd: 0.5,
            shift_scale: 0.5,
            misspecified: false,
            nonlinear_coef: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The linear scenario: n 5000, p 10, K 5, q = r = 8, s = 6.
    pub fn linear(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// The misspecified scenario: p 30 with q = r = s = 30.
    pub fn misspecified(seed: u64) -> Self {
        Self {
            p: 30,
            q: 30,
            r: 30,
            s: 30,
            misspecified: true,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SfpError::Input(m));
        if self.n < 2 || self.p == 0 || self.k == 0 {
            return bad(format!("need n >= 2, p >= 1, K >= 1 (got {}, {}, {})", self.n, self.p, self.k));
        }
        if self.s > self.q.min(self.r) {
            return bad(format!("s = {} exceeds min(q, r) = {}", self.s, self.q.min(self.r)));
        }
        if self.q + self.r - self.s > self.p {
            return bad(format!(
                "q + r - s = {} directions do not fit in p = {}",
                self.q + self.r - self.s,
                self.p
            ));
        }
        if !(self.noise_y_sd >= 0.0) || !self.shift_scale.is_finite() || !self.nonlinear_coef.is_finite() {
            return bad("noise, shift and nonlinear coefficients must be finite and noise >= 0".into());
        }
        Ok(())
    }
}

fn normal_matrix(rows: usize, cols: usize, r: &mut rng::Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(r);
        }
    }
    m
}

/// Draws the linear DGP (or the misspecified one when `cfg.misspecified`).
///
/// Draw order: `A`, `X`, `θ`, target noise, latent-score noise. Targets and
/// the sensitive attribute are generated from the unshifted covariates; the
/// shift `X ← X + c·exp(X A_Z A_Zᵀ)` on `Z = 1` rows is applied last.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let SynthConfig { n, p, k, q, r, s, .. } = *cfg;
    let mut rg = rng::seeded(cfg.seed);

    let g = normal_matrix(p, q + r - s, &mut rg);
    let a = g.qr().q();
    let truth = Truth {
        a: a.clone(),
        q,
        r,
        s,
        theta: DMatrix::zeros(p, k),
    };
    let x = normal_matrix(n, p, &mut rg);
    let theta_dist = Normal::new(1.0, 1.0).expect("valid normal");
    let mut theta = DMatrix::zeros(p, k);
    for i in 0..p {
        for j in 0..k {
            theta[(i, j)] = theta_dist.sample(&mut rg);
        }
    }
    let eps_y = normal_matrix(n, k, &mut rg) * cfg.noise_y_sd;
    let eps_z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rg)).collect();
    assemble(cfg, Truth { theta, ..truth }, x, eps_y, eps_z)
}

/// A fresh sample of `cfg.n` rows from the DGP with fixed directions and
/// coefficients. Draw order: `X`, target noise, latent-score noise.
pub fn resample(cfg: &SynthConfig, truth: &Truth, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rg = rng::seeded(seed);
    let x = normal_matrix(cfg.n, cfg.p, &mut rg);
    let eps_y = normal_matrix(cfg.n, cfg.k, &mut rg) * cfg.noise_y_sd;
    let eps_z: Vec<f64> = (0..cfg.n).map(|_| StandardNormal.sample(&mut rg)).collect();
    assemble(cfg, truth.clone(), x, eps_y, eps_z)
}

fn assemble(cfg: &SynthConfig, truth: Truth, x: DMatrix<f64>, eps_y: DMatrix<f64>, eps_z: Vec<f64>) -> Result<Dataset> {
    let SynthConfig { n, p, k, .. } = *cfg;
    let a_y = truth.a_y();
    let a_z = truth.a_z();
    let p_y = &a_y * a_y.transpose();
    let p_z = &a_z * a_z.transpose();

    let u_y = &x * &p_y;
    let mut y = &u_y * &truth.theta + eps_y;
    let u_z = &x * &p_z;
    let mut xi: Vec<f64> = (0..n)
        .map(|i| u_z.row(i).iter().map(|v| v.tanh()).sum::<f64>() / p as f64 + eps_z[i])
        .collect();

    if cfg.misspecified && cfg.nonlinear_coef != 0.0 {
        for i in 0..n {
            let extra = cfg.nonlinear_coef * x.row(i).norm_squared() / p as f64;
            for j in 0..k {
                y[(i, j)] += extra;
            }
            xi[i] += extra;
        }
    }
    let z: Vec<usize> = xi.iter().map(|&v| (v >= 1.0) as usize).collect();

    let mut x = x;
    let mut clamped = 0usize;
    if cfg.shift_scale != 0.0 {
        for i in 0..n {
            if z[i] == 1 {
                for j in 0..p {
                    let e = u_z[(i, j)].exp();
                    let e = if e > EXP_CLAMP {
                        clamped += 1;
                        EXP_CLAMP
                    } else {
                        e
                    };
                    x[(i, j)] += cfg.shift_scale * e;
                }
            }
        }
    }

    let mut ds = Dataset::new(x, y, z, TargetKind::Continuous)?;
    ds.truth = Some(truth);
    if clamped > 0 {
        ds.notes.push(format!("exp clamped at {EXP_CLAMP:e} in {clamped} entries"));
    }
    Ok(ds)
}

/// The linear DGP; rejects configs flagged as misspecified.
pub fn gen_linear_dgp(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.misspecified {
        return Err(SfpError::Input("config is flagged misspecified".into()));
    }
    generate(cfg)
}

/// The misspecified DGP with the quadratic term forced on.
pub fn gen_misspecified_dgp(cfg: &SynthConfig) -> Result<Dataset> {
    let cfg = SynthConfig {
        misspecified: true,
        ..cfg.clone()
    };
    generate(&cfg)
}
