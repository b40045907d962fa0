//! End-to-end schedule verification: the bijection round trip, the
//! variance-preserving auxiliary chain, its Markov transition and inversion,
//! and the SNR maximality bound.

use serde::Serialize;

use crate::error::Result;
use crate::rng;
use crate::schedule::{
    cosine_markov, markov_to_gamma, snr_of_combination, y_markov_check, y_process_build,
};

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub t_count: usize,
    pub base: String,
    pub n: usize,
    pub seed: u64,
    pub round_trip_max_err: f64,
    pub round_trip_pass: bool,
    pub y_variance_max_gap_se: f64,
    pub y_variance_pass: bool,
    pub transition_var_max_gap_se: f64,
    pub transition_pass: bool,
    pub recovery_max_err: f64,
    pub recovery_pass: bool,
    pub snr_max_violation: f64,
    pub snr_pass: bool,
    pub pass: bool,
}

pub fn verify_prop1(t_count: usize, n: usize, seed: u64) -> Result<VerifyReport> {
    let m = cosine_markov(t_count)?;
    let g = markov_to_gamma(&m)?;

    // Cumulative-SNR round trip.
    let mut round_trip_max_err = 0.0f64;
    for t in 1..=t_count {
        let sum: f64 = (t..=t_count).map(|s| g.eta[s - 1]).sum();
        let target = m.alpha_bar[t - 1] / (1.0 - m.alpha_bar[t - 1]);
        round_trip_max_err = round_trip_max_err.max((sum - target).abs());
    }
    let round_trip_pass = round_trip_max_err < 1e-9;

    // A schedule whose every level is pure noise has no chain to verify.
    if g.eta_bar.iter().all(|&e| e == 0.0) {
        return Ok(VerifyReport {
            t_count,
            base: "cosine".to_string(),
            n,
            seed,
            round_trip_max_err,
            round_trip_pass,
            y_variance_max_gap_se: 0.0,
            y_variance_pass: true,
            transition_var_max_gap_se: 0.0,
            transition_pass: true,
            recovery_max_err: 0.0,
            recovery_pass: true,
            snr_max_violation: 0.0,
            snr_pass: true,
            pass: round_trip_pass,
        });
    }

    // Monte-Carlo variance of the unit-variance chain.
    let cert = y_process_build(&g)?;
    let se = (2.0 / n as f64).sqrt();
    let mut y_variance_max_gap_se = 0.0f64;
    for (i, &t) in cert.levels.iter().enumerate() {
        let mut r = rng::substream(&[seed, 0x1A, t as u64]);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x0 = rng::normal_f64(&mut r);
            let mut y = g.eta_bar[t - 1] * x0;
            for s in t..=t_count {
                y += g.eta[s - 1].sqrt() * rng::normal_f64(&mut r);
            }
            y *= cert.rho[i];
            sum += y;
            sq += y * y;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        y_variance_max_gap_se = y_variance_max_gap_se.max((var - 1.0).abs() / se);
    }
    let y_variance_pass = y_variance_max_gap_se < 3.0;

    // Markov transition vs direct construction, and exact inversion.
    let report = y_markov_check(&cert, n, seed)?;
    let transition_pass = report.max_var_gap_se < 3.0;
    let recovery_pass = report.max_recovery_err < 1e-9;

    // SNR bound over random coefficient vectors.
    let mut snr_max_violation: f64 = 0.0;
    let mut r = rng::substream(&[seed, 0x2B]);
    for t in cert.levels.iter().copied() {
        let width = t_count - t + 1;
        let bound = g.eta_bar[t - 1];
        for _ in 0..1000 {
            let lam: Vec<f64> = (0..width).map(|_| rng::normal_f64(&mut r)).collect();
            let snr = snr_of_combination(&g, t, &lam);
            snr_max_violation = snr_max_violation.max(snr - bound);
        }
    }
    let snr_pass = snr_max_violation < 1e-9;

    let pass = round_trip_pass && y_variance_pass && transition_pass && recovery_pass && snr_pass;
    Ok(VerifyReport {
        t_count,
        base: "cosine".to_string(),
        n,
        seed,
        round_trip_max_err,
        round_trip_pass,
        y_variance_max_gap_se,
        y_variance_pass,
        transition_var_max_gap_se: report.max_var_gap_se,
        transition_pass,
        recovery_max_err: report.max_recovery_err,
        recovery_pass,
        snr_max_violation,
        snr_pass,
        pass,
    })
}
