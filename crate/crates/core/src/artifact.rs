//! Design artifact: every offline result of a configuration in one JSON
//! bundle, reloadable without recomputing the tightening.
//!
//! Floats are written with round-trip precision, so a reloaded design
//! produces bit-identical simulations.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, Matrix};
use crate::controllers::{ControllerDesign, ControllerKind, MultiStep};
use crate::design::{design_all, resolve_gain, DesignedController, FeasibilityEntry, TubeSet};
use crate::error::{Result, SmpcError};
use crate::polytope::Polytope;
use crate::simulator::{Entry, Policy};
use crate::system::{closed_loop, LinearStochasticSystem};
use crate::terminal::TerminalSet;
use crate::tightening::{ProfileKind, ScenarioConfig, TighteningProfile, TuneTarget};

pub const ARTIFACT_VERSION: u32 = 1;

fn rows_of(m: &DMatrix<f64>) -> Matrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    #[serde(rename = "N_s")]
    pub num_samples: usize,
    pub delta: f64,
}

impl From<ScenarioConfig> for Provenance {
    fn from(s: ScenarioConfig) -> Self {
        Self {
            seed: s.seed,
            num_samples: s.num_samples,
            delta: s.delta,
        }
    }
}

impl From<&Provenance> for ScenarioConfig {
    fn from(p: &Provenance) -> Self {
        Self {
            num_samples: p.num_samples,
            delta: p.delta,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileArtifact {
    pub kind: ProfileKind,
    pub rows: usize,
    pub k_bar: usize,
    /// `(k̄ + 1) × rows`, row-major by index.
    pub prefix: Vec<f64>,
    pub saturation: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl From<&TighteningProfile<f64>> for ProfileArtifact {
    fn from(p: &TighteningProfile<f64>) -> Self {
        Self {
            kind: p.kind,
            rows: p.rows(),
            k_bar: p.k_bar(),
            prefix: p.prefix.transpose().iter().copied().collect(),
            saturation: p.saturation.iter().copied().collect(),
            provenance: p.provenance.map(Provenance::from),
        }
    }
}

impl ProfileArtifact {
    pub fn to_profile(&self) -> Result<TighteningProfile<f64>> {
        if self.prefix.len() != (self.k_bar + 1) * self.rows || self.saturation.len() != self.rows {
            return Err(SmpcError::dim("profile artifact has inconsistent lengths"));
        }
        let prefix = DMatrix::from_row_slice(self.k_bar + 1, self.rows, &self.prefix);
        let mut p = TighteningProfile::new(self.kind, prefix, DVector::from_vec(self.saturation.clone()))?;
        p.provenance = self.provenance.as_ref().map(ScenarioConfig::from);
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeArtifact {
    #[serde(rename = "H")]
    pub h: Vec<f64>,
    pub b: Vec<f64>,
    pub dim: usize,
    pub determination_index: usize,
    pub offset: usize,
    pub empty: bool,
}

impl From<&TerminalSet<f64>> for PolytopeArtifact {
    fn from(t: &TerminalSet<f64>) -> Self {
        Self {
            h: t.polytope.h().transpose().iter().copied().collect(),
            b: t.polytope.b().iter().copied().collect(),
            dim: t.polytope.dim(),
            determination_index: t.determination_index,
            offset: t.offset,
            empty: t.empty,
        }
    }
}

impl PolytopeArtifact {
    pub fn to_set(&self) -> Result<TerminalSet<f64>> {
        if self.dim == 0 || self.h.len() != self.b.len() * self.dim {
            return Err(SmpcError::dim("polytope artifact has inconsistent lengths"));
        }
        let h = DMatrix::from_row_slice(self.b.len(), self.dim, &self.h);
        Ok(TerminalSet {
            polytope: Polytope::new(h, DVector::from_vec(self.b.clone()))?,
            determination_index: self.determination_index,
            offset: self.offset,
            empty: self.empty,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeArtifact {
    #[serde(rename = "K")]
    pub k: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub phi: Matrix,
    pub f_tilde: Matrix,
    pub p_f: Matrix,
    pub p_f_lin: Vec<f64>,
    pub spectral_radius: f64,
    pub k_bar: usize,
    pub tail: Vec<f64>,
    pub a: ProfileArtifact,
    pub gamma: ProfileArtifact,
    pub beta: ProfileArtifact,
    /// `β̃` for every finite `M` used by a configured controller.
    pub beta_tilde: Vec<MultiStepProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiStepProfile {
    #[serde(rename = "M")]
    pub m: usize,
    pub profile: ProfileArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerArtifact {
    pub name: String,
    pub kind: String,
    pub tube: usize,
    pub feasible: bool,
    /// `1 − saturation` per constraint row.
    pub row_slack: Vec<f64>,
    pub profile: ProfileArtifact,
    pub terminal: Vec<PolytopeArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_terminal: Option<PolytopeArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineArtifact {
    pub name: String,
    pub tube: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignArtifact {
    pub format_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub section_hashes: BTreeMap<String, String>,
    pub scenario: Provenance,
    pub tubes: Vec<TubeArtifact>,
    pub controllers: Vec<ControllerArtifact>,
    pub baselines: Vec<BaselineArtifact>,
}

/// Designed controllers and baselines ready for simulation.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    pub system: LinearStochasticSystem<f64>,
    pub x0: DVector<f64>,
    pub controllers: Vec<(String, Arc<ControllerDesign<f64>>)>,
    pub baselines: Vec<(String, DMatrix<f64>)>,
    pub reference: Option<String>,
}

impl DesignBundle {
    /// Controllers first, then baselines, in configuration order.
    pub fn entries(&self) -> Vec<Entry<f64>> {
        let mpc = self.controllers.iter().map(|(name, d)| Entry {
            name: name.clone(),
            policy: Policy::Mpc(d.clone()),
        });
        let fb = self.baselines.iter().map(|(name, k)| Entry {
            name: name.clone(),
            policy: Policy::Feedback(k.clone()),
        });
        mpc.chain(fb).collect()
    }
}

/// Full offline design of a configuration.
#[derive(Debug, Clone)]
pub struct DesignOutput {
    pub artifact: DesignArtifact,
    pub bundle: DesignBundle,
    pub tubes: TubeSet<f64>,
    pub controllers: Vec<DesignedController<f64>>,
    pub feasibility: Vec<FeasibilityEntry>,
}

/// Runs the offline pipeline for every controller and baseline.
pub fn design_from_config(cfg: &ConfigFile) -> Result<DesignOutput> {
    cfg.validate()?;
    let sys = cfg.system()?;
    let scenario = cfg.tightening.scenario();
    let mut tubes = TubeSet::new(scenario, cfg.tightening.k_bar);
    let specs = cfg.controller_specs()?;
    let controllers = design_all(&sys, &specs, &mut tubes)?;
    let mut baselines = Vec::new();
    let mut baseline_art = Vec::new();
    for b in &cfg.baselines {
        let (k, w) = resolve_gain(&sys, &b.gain.to_spec()?, TuneTarget::If, &scenario, cfg.tightening.k_bar)?;
        let idx = tubes.get_or_insert(&sys, k.clone(), w)?;
        baselines.push((b.name.clone(), k));
        baseline_art.push(BaselineArtifact {
            name: b.name.clone(),
            tube: idx,
        });
    }
    let feasibility: Vec<FeasibilityEntry> = controllers.iter().map(|c| c.feasibility()).collect();
    let mut ms: Vec<usize> = specs
        .iter()
        .filter_map(|s| match s.kind {
            ControllerKind::Ms(MultiStep::Finite(m)) => Some(m),
            _ => None,
        })
        .collect();
    ms.sort_unstable();
    ms.dedup();

    let tube_art = tubes
        .tubes
        .iter()
        .map(|t| -> Result<TubeArtifact> {
            let d = &t.design;
            Ok(TubeArtifact {
                k: rows_of(&t.k),
                weight: t.weight,
                phi: rows_of(&d.phi),
                f_tilde: rows_of(&d.f_tilde),
                p_f: rows_of(&d.p_f),
                p_f_lin: d.p_f_lin.iter().copied().collect(),
                spectral_radius: d.spectral_radius,
                k_bar: t.tightening.k_bar,
                tail: t.tightening.tail.iter().copied().collect(),
                a: (&t.tightening.a).into(),
                gamma: (&t.tightening.gamma).into(),
                beta: (&t.tightening.beta()?).into(),
                beta_tilde: ms
                    .iter()
                    .map(|&m| {
                        Ok(MultiStepProfile {
                            m,
                            profile: (&t.tightening.beta_tilde(m)?).into(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ctrl_art = controllers
        .iter()
        .zip(&feasibility)
        .map(|(c, f)| ControllerArtifact {
            name: c.spec.name.clone(),
            kind: c.spec.kind.to_string(),
            tube: c.tube,
            feasible: f.feasible,
            row_slack: f.rows.iter().map(|r| r.slack).collect(),
            profile: (&c.controller.profile).into(),
            terminal: c.controller.terminal.iter().map(PolytopeArtifact::from).collect(),
            z_terminal: c.controller.z_terminal.as_ref().map(PolytopeArtifact::from),
        })
        .collect();
    let artifact = DesignArtifact {
        format_version: ARTIFACT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.design_hash()?,
        section_hashes: cfg.section_hashes()?,
        scenario: scenario.into(),
        tubes: tube_art,
        controllers: ctrl_art,
        baselines: baseline_art,
    };
    let bundle = DesignBundle {
        x0: cfg.x0()?,
        controllers: controllers
            .iter()
            .map(|c| (c.spec.name.clone(), c.controller.clone()))
            .collect(),
        baselines,
        reference: cfg.reference.clone(),
        system: sys,
    };
    Ok(DesignOutput {
        artifact,
        bundle,
        tubes,
        controllers,
        feasibility,
    })
}

impl DesignArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let art: DesignArtifact = serde_json::from_str(&text)?;
        if art.format_version != ARTIFACT_VERSION {
            return Err(SmpcError::config(format!(
                "artifact format {} is not supported (expected {ARTIFACT_VERSION})",
                art.format_version
            )));
        }
        Ok(art)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Fails with the differing sections when `cfg` is not the
    /// configuration this artifact was designed from.
    pub fn check_config(&self, cfg: &ConfigFile) -> Result<()> {
        let hash = cfg.design_hash()?;
        if hash == self.config_hash {
            return Ok(());
        }
        let now = cfg.section_hashes()?;
        let diff: Vec<String> = now
            .iter()
            .filter(|(k, v)| self.section_hashes.get(*k) != Some(v))
            .map(|(k, v)| {
                let old = self.section_hashes.get(k).map_or("missing", String::as_str);
                format!("{k}: artifact {} config {}", &old[..old.len().min(12)], &v[..12])
            })
            .collect();
        Err(SmpcError::config(format!(
            "artifact was designed from a different configuration (hash {} vs {}); differing sections: {}",
            &self.config_hash[..12.min(self.config_hash.len())],
            &hash[..12],
            if diff.is_empty() { "none recorded".to_string() } else { diff.join("; ") }
        )))
    }

    /// Rebuilds the controllers from the stored profiles and terminal sets.
    pub fn restore(&self, cfg: &ConfigFile) -> Result<DesignBundle> {
        self.check_config(cfg)?;
        let sys = cfg.system()?;
        let specs = cfg.controller_specs()?;
        if specs.len() != self.controllers.len() {
            return Err(SmpcError::config("artifact and configuration list different controllers"));
        }
        let tube_design = |i: usize| -> Result<_> {
            let t = self
                .tubes
                .get(i)
                .ok_or_else(|| SmpcError::config(format!("artifact references missing tube {i}")))?;
            let rows = t.k.len();
            let cols = t.k.first().map_or(0, Vec::len);
            let k = DMatrix::from_fn(rows, cols, |r, c| t.k[r][c]);
            Ok((closed_loop(&sys, &k)?, k))
        };
        let mut controllers = Vec::with_capacity(specs.len());
        for (spec, art) in specs.iter().zip(&self.controllers) {
            if spec.name != art.name {
                return Err(SmpcError::config(format!(
                    "artifact controller {:?} does not match {:?}",
                    art.name, spec.name
                )));
            }
            let (design, _) = tube_design(art.tube)?;
            let terminal = art.terminal.iter().map(PolytopeArtifact::to_set).collect::<Result<Vec<_>>>()?;
            let z_terminal = art.z_terminal.as_ref().map(PolytopeArtifact::to_set).transpose()?;
            let c = ControllerDesign::from_parts(
                spec.kind,
                spec.horizon,
                spec.measured_input,
                design,
                sys.cost.clone(),
                sys.h_u().clone(),
                art.profile.to_profile()?,
                terminal,
                z_terminal,
            )?;
            controllers.push((spec.name.clone(), Arc::new(c)));
        }
        let baselines = self
            .baselines
            .iter()
            .map(|b| Ok((b.name.clone(), tube_design(b.tube)?.1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DesignBundle {
            x0: cfg.x0()?,
            controllers,
            baselines,
            reference: cfg.reference.clone(),
            system: sys,
        })
    }
}
