//! Noise-schedule calculus.
//!
//! A Markovian schedule is a strictly decreasing sequence of signal fractions
//! ᾱ_t. The independent-noising counterpart assigns each level its own γ_t,
//! linked through the cumulative SNR identity
//! ᾱ_t/(1−ᾱ_t) = Σ_{s=t}^T γ_s/(1−γ_s).
//! All schedule math is done in f64 once at construction; training code reads
//! the stored values as constants.

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::rng;

/// Markovian base schedule: ᾱ_t for t = 1..T (index 0 holds t=1).
#[derive(Debug, Clone)]
pub struct MarkovSchedule {
    pub t_count: usize,
    pub alpha_bar: Vec<f64>,
}

impl MarkovSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(CoreError::InvalidArgument("empty schedule".into()));
        }
        if alpha_bar[0] >= 1.0 {
            return Err(CoreError::InvalidSchedule(
                "alpha_bar_1 must be < 1".into(),
            ));
        }
        for w in alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(CoreError::InvalidSchedule(format!(
                    "alpha_bar not strictly decreasing: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if *alpha_bar.last().unwrap() < 0.0 {
            return Err(CoreError::InvalidSchedule("alpha_bar_T < 0".into()));
        }
        Ok(Self {
            t_count: alpha_bar.len(),
            alpha_bar,
        })
    }

    /// ᾱ_t with ᾱ_0 := 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// β_t = 1 − ᾱ_t/ᾱ_{t−1}.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar_at(t) / self.alpha_bar_at(t - 1)
    }
}

/// ᾱ_t = cos(π/2 · t/T). The terminal level is pure noise: ᾱ_T = 0 exactly.
pub fn cosine_markov(t_count: usize) -> Result<MarkovSchedule> {
    if t_count == 0 {
        return Err(CoreError::InvalidArgument("T must be >= 1".into()));
    }
    let alpha_bar = (1..=t_count)
        .map(|t| {
            if t == t_count {
                0.0
            } else {
                (std::f64::consts::FRAC_PI_2 * t as f64 / t_count as f64).cos()
            }
        })
        .collect();
    MarkovSchedule::new(alpha_bar)
}

/// A cosine schedule with `steps` levels whose level positions are mapped
/// onto a coarser `t_scale`-level axis. Used to drive a model trained at
/// `t_scale` levels with more sampling steps.
pub fn cosine_markov_rescaled(steps: usize, t_scale: usize) -> Result<(MarkovSchedule, Vec<f64>)> {
    let m = cosine_markov(steps)?;
    let positions = (1..=steps)
        .map(|t| t_scale as f64 * t as f64 / steps as f64)
        .collect();
    Ok((m, positions))
}

/// Independent-noising schedule with derived weights.
///
/// γ_0 is pinned to 1 (the clean endpoint); η_t = γ_t/(1−γ_t);
/// η̄_t = Σ_{s=t}^T η_s; ω_t is the SNR weight η̄_t and ω̃_t the raw ELBO
/// weight with ω_t = η_{t−1}·ω̃_t.
#[derive(Debug, Clone)]
pub struct GammaSchedule {
    pub t_count: usize,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub eta_bar: Vec<f64>,
    pub omega: Vec<f64>,
    pub omega_tilde: Vec<f64>,
}

impl GammaSchedule {
    pub const GAMMA_0: f64 = 1.0;

    /// Build directly from per-level γ values.
    pub fn from_gamma(gamma: Vec<f64>) -> Result<Self> {
        let t_count = gamma.len();
        if t_count == 0 {
            return Err(CoreError::InvalidArgument("empty schedule".into()));
        }
        for (i, &g) in gamma.iter().enumerate() {
            if !(0.0..1.0).contains(&g) {
                return Err(CoreError::InvalidSchedule(format!(
                    "gamma_{} = {} outside [0,1)",
                    i + 1,
                    g
                )));
            }
        }
        let eta: Vec<f64> = gamma.iter().map(|&g| g / (1.0 - g)).collect();
        let mut eta_bar = vec![0.0; t_count];
        let mut acc = 0.0;
        for t in (0..t_count).rev() {
            acc += eta[t];
            eta_bar[t] = acc;
        }
        let omega = eta_bar.clone();
        let omega_tilde = Self::tilde_from(&omega, &eta);
        Ok(Self {
            t_count,
            gamma,
            eta,
            eta_bar,
            omega,
            omega_tilde,
        })
    }

    fn tilde_from(omega: &[f64], eta: &[f64]) -> Vec<f64> {
        // ω_t = η_{t−1}·ω̃_t. η_0 = γ_0/(1−γ_0) diverges, so ω̃_1 = 0.
        let mut tilde = vec![0.0; omega.len()];
        for t in 1..omega.len() {
            tilde[t] = if eta[t - 1] > 0.0 {
                omega[t] / eta[t - 1]
            } else {
                0.0
            };
        }
        tilde
    }

    /// γ_t with the γ_0 := 1 boundary.
    pub fn gamma_at(&self, t: usize) -> f64 {
        if t == 0 {
            Self::GAMMA_0
        } else {
            self.gamma[t - 1]
        }
    }

    pub fn eta_bar_at(&self, t: usize) -> f64 {
        self.eta_bar[t - 1]
    }

    /// √γ_t of the v-parameterization.
    pub fn alpha_coef(&self, t: usize) -> f64 {
        self.gamma_at(t).sqrt()
    }

    /// √(1−γ_t) of the v-parameterization.
    pub fn sigma_coef(&self, t: usize) -> f64 {
        (1.0 - self.gamma_at(t)).sqrt()
    }
}

/// Invert the cumulative-SNR identity: recover the γ levels whose summed
/// per-level SNRs reproduce each ᾱ_t/(1−ᾱ_t).
pub fn markov_to_gamma(m: &MarkovSchedule) -> Result<GammaSchedule> {
    let t_count = m.t_count;
    let eta_bar: Vec<f64> = m
        .alpha_bar
        .iter()
        .map(|&a| a / (1.0 - a))
        .collect();
    let mut gamma = vec![0.0; t_count];
    for t in 0..t_count {
        let next = if t + 1 < t_count { eta_bar[t + 1] } else { 0.0 };
        let eta_t = eta_bar[t] - next;
        if eta_t < 0.0 {
            return Err(CoreError::InvalidSchedule(format!(
                "negative per-level SNR at t={}",
                t + 1
            )));
        }
        // When the remaining tail is empty, γ_t = ᾱ_t exactly.
        gamma[t] = if next == 0.0 {
            m.alpha_bar[t]
        } else {
            eta_t / (1.0 + eta_t)
        };
    }
    GammaSchedule::from_gamma(gamma)
}

/// SNR loss weights ω_t = η̄_t, equal to the paired Markov ᾱ_t/(1−ᾱ_t).
pub fn snr_weights(g: &GammaSchedule) -> Vec<f64> {
    g.omega.clone()
}

/// Loss-weighting choices. SNR is the default; SNR+1 keeps the terminal
/// pure-noise level supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Snr,
    SnrPlusOne,
}

impl Weighting {
    pub fn weights(self, g: &GammaSchedule) -> Vec<f64> {
        match self {
            Weighting::Snr => g.omega.clone(),
            Weighting::SnrPlusOne => g.omega.iter().map(|w| w + 1.0).collect(),
        }
    }

    pub fn markov_weights(self, m: &MarkovSchedule) -> Vec<f64> {
        let snr: Vec<f64> = m.alpha_bar.iter().map(|&a| a / (1.0 - a)).collect();
        match self {
            Weighting::Snr => snr,
            Weighting::SnrPlusOne => snr.iter().map(|w| w + 1.0).collect(),
        }
    }
}

/// Coefficients of the auxiliary Markov chain built from weighted sums of the
/// independent-noising levels. Levels with η̄_t = 0 carry no signal and are
/// excluded.
#[derive(Debug, Clone)]
pub struct YProcessCertificate {
    /// Levels t (1-based) included in the chain, ascending.
    pub levels: Vec<usize>,
    /// ρ_t = 1/√(η̄_t² + η̄_t) per included level.
    pub rho: Vec<f64>,
    /// λ^t_s = ρ_t·√γ_s/(1−γ_s) for s = t..T, one vector per included level.
    pub lambda: Vec<Vec<f64>>,
    /// Markov transition y_t -> y_{t+1}: mean coefficient and variance.
    pub transition_mean_coef: Vec<f64>,
    pub transition_var: Vec<f64>,
    gamma: Vec<f64>,
    eta: Vec<f64>,
    eta_bar: Vec<f64>,
}

/// Build the y-process coefficients for every level with positive η̄.
pub fn y_process_build(g: &GammaSchedule) -> Result<YProcessCertificate> {
    // A zero-SNR level below a positive-SNR one would sit inside the chain.
    for t in 0..g.t_count {
        if g.eta_bar[t] == 0.0 && t + 1 < g.t_count && g.eta_bar[t + 1] > 0.0 {
            return Err(CoreError::DegenerateLevel { t: t + 1 });
        }
    }
    let levels: Vec<usize> = (1..=g.t_count).filter(|&t| g.eta_bar[t - 1] > 0.0).collect();
    if levels.is_empty() {
        return Err(CoreError::InvalidSchedule(
            "no level has positive SNR".into(),
        ));
    }
    let rho: Vec<f64> = levels
        .iter()
        .map(|&t| {
            let eb = g.eta_bar[t - 1];
            1.0 / (eb * eb + eb).sqrt()
        })
        .collect();
    let lambda: Vec<Vec<f64>> = levels
        .iter()
        .zip(&rho)
        .map(|(&t, &r)| {
            (t..=g.t_count)
                .map(|s| r * g.gamma[s - 1].sqrt() / (1.0 - g.gamma[s - 1]))
                .collect()
        })
        .collect();
    let mut transition_mean_coef = Vec::new();
    let mut transition_var = Vec::new();
    for i in 0..levels.len().saturating_sub(1) {
        let (t, tn) = (levels[i], levels[i + 1]);
        let (eb, ebn) = (g.eta_bar[t - 1], g.eta_bar[tn - 1]);
        let (r, rn) = (rho[i], rho[i + 1]);
        transition_mean_coef.push(rn * ebn / (r * eb));
        let var = rn * rn * ebn * g.eta[t - 1] / eb;
        if var <= 0.0 {
            return Err(CoreError::InvalidSchedule(format!(
                "non-positive transition variance at t={}",
                t
            )));
        }
        transition_var.push(var);
    }
    Ok(YProcessCertificate {
        levels,
        rho,
        lambda,
        transition_mean_coef,
        transition_var,
        gamma: g.gamma.clone(),
        eta: g.eta.clone(),
        eta_bar: g.eta_bar.clone(),
    })
}

/// One level's Monte-Carlo report from [`y_markov_check`].
#[derive(Debug, Clone, Serialize)]
pub struct YLevelReport {
    pub t: usize,
    pub direct_mean: f64,
    pub direct_var: f64,
    pub transition_mean: f64,
    pub transition_var: f64,
    pub mean_gap_se: f64,
    pub var_gap_se: f64,
    pub recovery_max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct YMarkovReport {
    pub n: usize,
    pub levels: Vec<YLevelReport>,
    pub max_recovery_err: f64,
    pub max_var_gap_se: f64,
}

/// Monte-Carlo confirmation that the y-chain is Markov and invertible:
/// (a) building y_{t+1} through the one-step transition matches the direct
/// construction in mean and variance, and (b) each x_t is recovered exactly
/// from adjacent y values when the underlying noises are shared.
pub fn y_markov_check(cert: &YProcessCertificate, n: usize, seed: u64) -> Result<YMarkovReport> {
    if n < 10_000 {
        return Err(CoreError::InvalidArgument(
            "need at least 10,000 samples".into(),
        ));
    }
    let t_max = *cert.levels.last().unwrap();
    let mut levels_out = Vec::new();
    let mut max_recovery = 0.0f64;
    let mut max_var_gap = 0.0f64;

    for (i, &t) in cert.levels.iter().enumerate() {
        let mut rng = rng::substream(&[seed, 0x9A5, t as u64]);
        let mut direct = vec![0.0f64; n];
        let mut through = vec![0.0f64; n];
        let mut recovery_err = 0.0f64;

        for s_idx in 0..n {
            let x0 = rng::normal_f64(&mut rng);
            // Shared per-level noises ε_t..ε_T.
            let eps: Vec<f64> = (t..=t_max).map(|_| rng::normal_f64(&mut rng)).collect();

            let y_at = |lvl_i: usize, eps_off: usize| -> f64 {
                let lvl = cert.levels[lvl_i];
                let mut acc = cert.eta_bar[lvl - 1] * x0;
                for s in lvl..=t_max {
                    acc += cert.eta[s - 1].sqrt() * eps[s - t + eps_off];
                }
                cert.rho[lvl_i] * acc
            };
            let y_t = y_at(i, 0);
            direct[s_idx] = y_t;

            if i + 1 < cert.levels.len() {
                let y_next_direct = y_at(i + 1, 0);
                let fresh = rng::normal_f64(&mut rng);
                through[s_idx] = cert.transition_mean_coef[i] * y_t
                    + cert.transition_var[i].sqrt() * fresh;
                // Recovery with shared noises.
                let x_t = cert.gamma[t - 1].sqrt() * x0
                    + (1.0 - cert.gamma[t - 1]).sqrt() * eps[0];
                let rec = (y_t / cert.rho[i] - y_next_direct / cert.rho[i + 1])
                    * (1.0 - cert.gamma[t - 1])
                    / cert.gamma[t - 1].sqrt();
                recovery_err = recovery_err.max((rec - x_t).abs());
                direct[s_idx] = y_next_direct;
            } else {
                // Terminal included level: single-noise recovery branch.
                let x_t = cert.gamma[t - 1].sqrt() * x0
                    + (1.0 - cert.gamma[t - 1]).sqrt() * eps[0];
                let rec = (y_t / cert.rho[i]) * (1.0 - cert.gamma[t - 1])
                    / cert.gamma[t - 1].sqrt();
                if t == t_max && cert.eta[t - 1] == cert.eta_bar[t - 1] {
                    recovery_err = recovery_err.max((rec - x_t).abs());
                }
                through[s_idx] = y_t;
            }
        }

        let stats = |v: &[f64]| -> (f64, f64) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (v.len() - 1) as f64;
            (mean, var)
        };
        let (dm, dv) = stats(&direct);
        let (tm, tv) = stats(&through);
        // Standard errors for a unit-variance Gaussian population.
        let se_mean = (1.0 / n as f64).sqrt();
        let se_var = (2.0 / n as f64).sqrt();
        let mean_gap_se = (dm - tm).abs() / (se_mean * std::f64::consts::SQRT_2);
        let var_gap_se = (dv - tv).abs() / (se_var * std::f64::consts::SQRT_2);
        max_var_gap = max_var_gap.max(var_gap_se);
        max_recovery = max_recovery.max(recovery_err);
        levels_out.push(YLevelReport {
            t,
            direct_mean: dm,
            direct_var: dv,
            transition_mean: tm,
            transition_var: tv,
            mean_gap_se,
            var_gap_se,
            recovery_max_abs_err: recovery_err,
        });
    }
    Ok(YMarkovReport {
        n,
        levels: levels_out,
        max_recovery_err: max_recovery,
        max_var_gap_se: max_var_gap,
    })
}

/// Signal-to-noise ratio of Σ λ_s·x_s for arbitrary coefficients over levels
/// t..T. Peaks at η̄_t when λ_s ∝ √γ_s/(1−γ_s).
pub fn snr_of_combination(g: &GammaSchedule, t: usize, lambda: &[f64]) -> f64 {
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (off, &l) in lambda.iter().enumerate() {
        let s = t + off;
        signal += l * g.gamma[s - 1].sqrt();
        noise += l * l * (1.0 - g.gamma[s - 1]);
    }
    if noise == 0.0 {
        return 0.0;
    }
    signal * signal / noise
}

/// Row of the schedule table emitted by the CLI.
#[derive(Debug, Serialize)]
pub struct ScheduleRow {
    pub t: usize,
    #[serde(rename = "ᾱ_t")]
    pub alpha_bar: f64,
    #[serde(rename = "γ_t")]
    pub gamma: f64,
    #[serde(rename = "η_t")]
    pub eta: f64,
    #[serde(rename = "η̄_t")]
    pub eta_bar: f64,
    #[serde(rename = "ω_t")]
    pub omega: f64,
    #[serde(rename = "ρ_t")]
    pub rho: Option<f64>,
}

pub fn schedule_table(m: &MarkovSchedule) -> Result<Vec<ScheduleRow>> {
    let g = markov_to_gamma(m)?;
    let cert = y_process_build(&g)?;
    Ok((1..=m.t_count)
        .map(|t| {
            let rho = cert
                .levels
                .iter()
                .position(|&lv| lv == t)
                .map(|i| cert.rho[i]);
            ScheduleRow {
                t,
                alpha_bar: m.alpha_bar[t - 1],
                gamma: g.gamma[t - 1],
                eta: g.eta[t - 1],
                eta_bar: g.eta_bar[t - 1],
                omega: g.omega[t - 1],
                rho,
            }
        })
        .collect())
}
