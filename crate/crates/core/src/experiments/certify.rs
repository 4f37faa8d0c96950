//! Log-Sobolev certificates from a computed trajectory.
//!
//! If `eta_ij >= C` for all `i != j`, then `H(rho) <= I(rho) / C`, and by
//! Gronwall `H(rho_t) <= H(rho_0) e^{-C t}` along the flow.

use serde::{Deserialize, Serialize};

use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::flow::{decay_rate_estimate, DecayFit, Trajectory};

/// Rounding allowance on the pointwise inequality, relative to `I / C`.
const POINTWISE_ROUNDOFF: f64 = 1e-12;
/// Absolute floor below which entropies are rounding noise.
const ENTROPY_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsiCertificate {
    /// `min_{i != j} eta_ij`.
    pub constant: f64,
    /// `false` when `C = 0`; the decay fit is still reported.
    pub certified: bool,
    pub states_checked: usize,
    /// `min_t (I/C - H)` over states with finite `I`.
    pub worst_pointwise_slack: f64,
    pub worst_pointwise_time: f64,
    pub pointwise_holds: bool,
    /// `max_t H(rho_t) / (H(rho_0) e^{-C t})`.
    pub worst_envelope_ratio: f64,
    pub worst_envelope_time: f64,
    pub envelope_holds: bool,
    pub tolerance: f64,
    pub decay: Option<DecayFit>,
}

impl LsiCertificate {
    pub fn passes(&self) -> bool {
        self.certified && self.pointwise_holds && self.envelope_holds
    }

    /// Turns a failed certificate into an error.
    pub fn require(&self) -> Result<()> {
        if self.passes() {
            return Ok(());
        }
        Err(Error::Certificate(if !self.certified {
            "kernel vanishes on some pair; no log-Sobolev constant".into()
        } else if !self.pointwise_holds {
            format!(
                "H > I/C at t = {} (slack {:e})",
                self.worst_pointwise_time, self.worst_pointwise_slack
            )
        } else {
            format!(
                "entropy above the e^(-Ct) envelope at t = {} (ratio {})",
                self.worst_envelope_time, self.worst_envelope_ratio
            )
        }))
    }
}

pub fn lsi_certify(sys: &DiscreteSystem, traj: &Trajectory, tolerance: f64) -> Result<LsiCertificate> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let c = sys.min_offdiag_eta();
    let decay = decay_rate_estimate(traj, 0.5).ok();
    let h0 = traj.diagnostics[0].entropy;
    let mut cert = LsiCertificate {
        constant: c,
        certified: c > 0.0,
        states_checked: 0,
        worst_pointwise_slack: f64::INFINITY,
        worst_pointwise_time: 0.0,
        pointwise_holds: true,
        worst_envelope_ratio: 0.0,
        worst_envelope_time: 0.0,
        envelope_holds: true,
        tolerance,
        decay,
    };
    if !cert.certified {
        cert.pointwise_holds = false;
        cert.envelope_holds = false;
        return Ok(cert);
    }
    for d in &traj.diagnostics {
        cert.states_checked += 1;
        if let Some(i) = d.fisher.finite() {
            let bound = i / c;
            let slack = bound - d.entropy;
            if slack < cert.worst_pointwise_slack {
                cert.worst_pointwise_slack = slack;
                cert.worst_pointwise_time = d.t;
            }
            if slack < -(POINTWISE_ROUNDOFF * bound + ENTROPY_FLOOR) {
                cert.pointwise_holds = false;
            }
        }
        let envelope = h0 * (-c * d.t).exp();
        if envelope > 0.0 {
            let ratio = d.entropy / envelope;
            if ratio > cert.worst_envelope_ratio {
                cert.worst_envelope_ratio = ratio;
                cert.worst_envelope_time = d.t;
            }
        }
        if d.entropy > envelope * (1.0 + tolerance) + ENTROPY_FLOOR {
            cert.envelope_holds = false;
        }
    }
    Ok(cert)
}
