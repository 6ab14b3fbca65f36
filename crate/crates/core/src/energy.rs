//! DDR transfer-energy model for near-memory sampling versus host-side
//! pipelines that stream the full dataset over the board link.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PICOJOULE: f64 = 1e-12;

/// Per-bit link energies in joules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    pub e_pcb: f64,
    pub e_nm: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        Self {
            e_pcb: 10.0 * PICOJOULE,
            e_nm: 0.5 * PICOJOULE,
        }
    }
}

impl EnergyCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_pcb > 0.0 && self.e_nm > 0.0 && self.e_pcb.is_finite()) {
            return Err(Error::Config(
                "link energies must be positive and finite".into(),
            ));
        }
        if self.e_nm >= self.e_pcb {
            return Err(Error::Config(format!(
                "near-memory energy {} must be below board energy {}",
                self.e_nm, self.e_pcb
            )));
        }
        Ok(())
    }
}

/// Full-dataset traversals per link plus one kept-subset transfer term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferScenario {
    pub pcb_full_passes: f64,
    pub nm_full_passes: f64,
    pub kept_pcb_passes: f64,
    pub keeping_ratio: f64,
    pub dataset_bits: u64,
}

impl TransferScenario {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pcb_full_passes", self.pcb_full_passes),
            ("nm_full_passes", self.nm_full_passes),
            ("kept_pcb_passes", self.kept_pcb_passes),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.keeping_ratio > 0.0 && self.keeping_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keeping ratio {} outside (0, 1]",
                self.keeping_ratio
            )));
        }
        if self.dataset_bits == 0 {
            return Err(Error::Config("dataset_bits must be positive".into()));
        }
        Ok(())
    }
}

/// Energy in joules.
pub fn scenario_energy(s: &TransferScenario, c: &EnergyCoefficients) -> f64 {
    s.dataset_bits as f64
        * (s.pcb_full_passes * c.e_pcb
            + s.nm_full_passes * c.e_nm
            + s.kept_pcb_passes * s.keeping_ratio * c.e_pcb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Sampling next to memory; only the kept subset crosses the board.
    Nms,
    /// Host-side sampling with one full read.
    Dq,
    /// Host-side iterative selection with repeated full reads.
    Nessa,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Nms, Method::Dq, Method::Nessa];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Nms => "nms",
            Method::Dq => "dq",
            Method::Nessa => "nessa",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nms" => Ok(Method::Nms),
            "dq" => Ok(Method::Dq),
            "nessa" => Ok(Method::Nessa),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected nms, dq or nessa)"
            ))),
        }
    }
}

/// Pass counts `(pcb_full, nm_full, kept_pcb)` of a method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Passes {
    pub pcb_full: f64,
    pub nm_full: f64,
    pub kept_pcb: f64,
}

impl Passes {
    /// Fitted defaults.
    pub fn calibrated(method: Method) -> Self {
        let (pcb_full, nm_full) = match method {
            Method::Nms => (0.0, 1.0),
            Method::Dq => (1.0, 0.0),
            Method::Nessa => (11.0, 0.0),
        };
        Self {
            pcb_full,
            nm_full,
            kept_pcb: 1.0,
        }
    }
}

/// Per-method pass counts; missing methods use the calibrated defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassTable {
    overrides: BTreeMap<Method, Passes>,
}

impl PassTable {
    pub fn get(&self, m: Method) -> Passes {
        self.overrides
            .get(&m)
            .copied()
            .unwrap_or_else(|| Passes::calibrated(m))
    }

    pub fn is_calibrated(&self, m: Method) -> bool {
        self.get(m) == Passes::calibrated(m)
    }

    pub fn set(&mut self, m: Method, p: Passes) {
        self.overrides.insert(m, p);
    }

    /// Apply `method=pcb` or `method.field=value`, field one of `pcb`, `nm`, `kept`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("override '{spec}' has a non-numeric value")))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "override '{spec}' must be finite and >= 0"
            )));
        }
        let (method, field) = match key.trim().split_once('.') {
            Some((m, f)) => (m, f),
            None => (key.trim(), "pcb"),
        };
        let m: Method = method.parse()?;
        let mut p = self.get(m);
        match field {
            "pcb" => p.pcb_full = v,
            "nm" => p.nm_full = v,
            "kept" => p.kept_pcb = v,
            other => {
                return Err(Error::Config(format!(
                    "unknown pass field '{other}' (expected pcb, nm or kept)"
                )))
            }
        }
        self.set(m, p);
        Ok(())
    }
}

pub fn preset(method: Method, keeping_ratio: f64, dataset_bits: u64) -> TransferScenario {
    preset_with(method, &PassTable::default(), keeping_ratio, dataset_bits)
}

pub fn preset_with(
    method: Method,
    passes: &PassTable,
    keeping_ratio: f64,
    dataset_bits: u64,
) -> TransferScenario {
    let p = passes.get(method);
    TransferScenario {
        pcb_full_passes: p.pcb_full,
        nm_full_passes: p.nm_full,
        kept_pcb_passes: p.kept_pcb,
        keeping_ratio,
        dataset_bits,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub method: Method,
    pub keeping_ratio: f64,
    pub energy_j: f64,
    pub nms_energy_j: f64,
    /// `energy / nms energy` at the same keeping ratio.
    pub ratio_vs_nms: f64,
    /// `calibrated` when both methods use fitted pass counts, else `extrapolated`.
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dataset_bits: u64,
    pub coefficients: EnergyCoefficients,
    pub rows: Vec<EnergyRow>,
}

impl EnergyReport {
    pub fn ratio(&self, method: Method, keeping_ratio: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.keeping_ratio == keeping_ratio)
            .map(|r| r.ratio_vs_nms)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,keeping_ratio,energy_j,nms_energy_j,ratio_vs_nms,model\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method,
                crate::json::fmt_f64(r.keeping_ratio),
                crate::json::fmt_f64(r.energy_j),
                crate::json::fmt_f64(r.nms_energy_j),
                crate::json::fmt_f64(r.ratio_vs_nms),
                r.model
            ));
        }
        out
    }
}

/// Energies of every `(method, keeping_ratio)` pair, with ratios against nms.
pub fn compare(
    methods: &[Method],
    keeping_ratios: &[f64],
    dataset_bits: u64,
    coeffs: &EnergyCoefficients,
    passes: &PassTable,
) -> Result<EnergyReport> {
    if methods.is_empty() || keeping_ratios.is_empty() {
        return Err(Error::Config(
            "energy comparison needs methods and keeping ratios".into(),
        ));
    }
    coeffs.validate()?;
    let mut rows = Vec::with_capacity(methods.len() * keeping_ratios.len());
    for &kr in keeping_ratios {
        let nms = preset_with(Method::Nms, passes, kr, dataset_bits);
        nms.validate()?;
        let base = scenario_energy(&nms, coeffs);
        for &m in methods {
            let s = preset_with(m, passes, kr, dataset_bits);
            s.validate()?;
            let e = scenario_energy(&s, coeffs);
            let calibrated = passes.is_calibrated(m) && passes.is_calibrated(Method::Nms);
            rows.push(EnergyRow {
                method: m,
                keeping_ratio: kr,
                energy_j: e,
                nms_energy_j: base,
                ratio_vs_nms: e / base,
                model: if calibrated {
                    "calibrated"
                } else {
                    "extrapolated"
                }
                .into(),
            });
        }
    }
    Ok(EnergyReport {
        dataset_bits,
        coefficients: *coeffs,
        rows,
    })
}
