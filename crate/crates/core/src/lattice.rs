//! Closed-form checks linking the Planck mass to the fine-structure constant.
//!
//! The source relation is written with double-valued (±) quantities; only
//! magnitudes are computed here, the sign bookkeeping carries no numeric content.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Physical constants in CGS units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    pub alpha: f64,
    /// Proton mass, g.
    pub m_p: f64,
    /// Electron mass, g.
    pub m_e: f64,
    /// erg·s.
    pub hbar: f64,
    /// cm/s.
    pub c: f64,
    /// cm³ g⁻¹ s⁻².
    #[serde(rename = "G")]
    pub g: f64,
}

impl Default for PhysicalConstants {
    /// CODATA 2018.
    fn default() -> Self {
        Self {
            alpha: 7.297_352_569_3e-3,
            m_p: 1.672_621_923_69e-24,
            m_e: 9.109_383_701_5e-28,
            hbar: 1.054_571_817e-27,
            c: 2.997_924_58e10,
            g: 6.674_30e-8,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("m_p", self.m_p),
            ("m_e", self.m_e),
            ("hbar", self.hbar),
            ("c", self.c),
            ("G", self.g),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("constant {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Stored lattice-model constants. No dynamics are derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeModel {
    /// Total number of sites N⁽³⁾.
    pub n3: f64,
    /// Sites in the "nucleus".
    pub n_nucleus: f64,
    /// s.
    pub tau_mu: f64,
    /// cm.
    pub r_mu: f64,
}

impl Default for LatticeModel {
    fn default() -> Self {
        Self { n3: 1.302e19, n_nucleus: 5.2780e4, tau_mu: 2e-6, r_mu: 6e4 }
    }
}

impl LatticeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.n3 > self.n_nucleus && self.n_nucleus > 0.0) {
            return Err(domain("lattice model needs n3 > n_nucleus > 0"));
        }
        Ok(())
    }
}

/// Quoted relative agreement tolerance for the Planck identity.
pub const IDENTITY_TOLERANCE: f64 = 2e-3;

/// N⁽³⁾ = 2^{9/2} / (3π²α⁹).
pub fn n3_from_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(2f64.powf(4.5) / (3.0 * std::f64::consts::PI.powi(2) * alpha.powi(9)))
}

/// √(ħc/G), g.
pub fn planck_mass(pc: &PhysicalConstants) -> Result<f64> {
    for (name, v) in [("hbar", pc.hbar), ("c", pc.c), ("G", pc.g)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(domain(format!("{name} must be non-negative and finite, got {v}")));
        }
    }
    if pc.g == 0.0 {
        return Err(domain("G must be positive"));
    }
    Ok((pc.hbar * pc.c / pc.g).sqrt())
}

/// Mass predicted by the lattice relation, N⁽³⁾(m_p + m_e), g.
pub fn lattice_mass(pc: &PhysicalConstants) -> Result<f64> {
    Ok(n3_from_alpha(pc.alpha)? * (pc.m_p + pc.m_e))
}

/// |N⁽³⁾(α)·(m_p + m_e) − √(ħc/G)| / √(ħc/G).
pub fn planck_identity_residual(pc: &PhysicalConstants) -> Result<f64> {
    pc.validate()?;
    let m_pl = planck_mass(pc)?;
    Ok((lattice_mass(pc)? - m_pl).abs() / m_pl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub n3: f64,
    pub planck_mass: f64,
    pub lattice_mass: f64,
    pub residual: f64,
    pub pass: bool,
}

pub fn check_identity(pc: &PhysicalConstants) -> Result<IdentityCheck> {
    let residual = planck_identity_residual(pc)?;
    Ok(IdentityCheck {
        n3: n3_from_alpha(pc.alpha)?,
        planck_mass: planck_mass(pc)?,
        lattice_mass: lattice_mass(pc)?,
        residual,
        pass: residual <= IDENTITY_TOLERANCE,
    })
}
