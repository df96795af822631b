//! JSON experiment configuration.
//!
//! Matrices are nested row arrays. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{ControllerKind, MultiStep};
use crate::design::{ControllerSpec, GainSpec};
use crate::error::{Result, SmpcError};
use crate::polytope::Polytope;
use crate::simulator::ExperimentConfig;
use crate::system::{ConstraintSpec, CostSpec, Distribution, DisturbanceModel, LinearStochasticSystem};
use crate::tightening::ScenarioConfig;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Matrix,
    pub b: Matrix,
    pub d: Matrix,
    /// Initial state of every simulation; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub distribution: Distribution,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Pre-truncation covariance for `truncated_gaussian`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub h_x: Matrix,
    pub rhs_x: Vec<f64>,
    pub p: Vec<f64>,
    pub h_u: Matrix,
    pub rhs_u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: Matrix,
    pub r: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lin: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_lin: Option<Vec<f64>>,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum GainSection {
    Explicit(Matrix),
    Lqr {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r: Option<Matrix>,
    },
    Tuned {
        #[serde(default)]
        entry: usize,
        target: f64,
        range: (f64, f64),
    },
}

impl Default for GainSection {
    fn default() -> Self {
        GainSection::Lqr { q: None, r: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    Naive,
    Rs,
    If,
    Ms,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub name: String,
    pub kind: KindName,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<MultiStep>,
    #[serde(default = "default_true")]
    pub remark4_input_handling: bool,
    #[serde(default)]
    pub gain: GainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub name: String,
    #[serde(default)]
    pub gain: GainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(rename = "M")]
    pub m: Vec<MultiStep>,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(default = "default_true")]
    pub remark4_input_handling: bool,
    pub gain: GainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TighteningSection {
    #[serde(rename = "N_s", default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_bar: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    ScenarioConfig::default().num_samples
}

fn default_delta() -> f64 {
    ScenarioConfig::default().delta
}

impl Default for TighteningSection {
    fn default() -> Self {
        Self {
            num_samples: default_samples(),
            delta: default_delta(),
            k_bar: None,
            seed: 0,
        }
    }
}

impl TighteningSection {
    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            num_samples: self.num_samples,
            delta: self.delta,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
}

fn all_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv, Format::Svg]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            formats: all_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub disturbance: DisturbanceSection,
    pub constraints: ConstraintSection,
    pub cost: CostSection,
    pub controllers: Vec<ControllerSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<BaselineSection>,
    /// Entry whose average cost normalizes the others.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub tightening: TighteningSection,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputSection,
}

fn matrix(name: &str, rows: &Matrix) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(SmpcError::dim(format!("{name}: rows have different lengths")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SmpcError::config(format!("{name}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(name: &str, v: &[f64]) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SmpcError::config(format!("{name}: non-finite entry")));
    }
    Ok(DVector::from_column_slice(v))
}

fn matrix_with_cols(name: &str, rows: &Matrix, cols: usize) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, cols));
    }
    let m = matrix(name, rows)?;
    if m.ncols() != cols {
        return Err(SmpcError::dim(format!("{name}: expected {cols} columns, got {}", m.ncols())));
    }
    Ok(m)
}

impl GainSection {
    pub fn to_spec(&self) -> Result<GainSpec<f64>> {
        Ok(match self {
            GainSection::Explicit(k) => GainSpec::Explicit(matrix("gain", k)?),
            GainSection::Lqr { q, r } => GainSpec::Lqr {
                q: q.as_ref().map(|q| matrix("gain.q", q)).transpose()?,
                r: r.as_ref().map(|r| matrix("gain.r", r)).transpose()?,
            },
            GainSection::Tuned { entry, target, range } => GainSpec::Tuned {
                entry: *entry,
                target: *target,
                range: *range,
            },
        })
    }
}

impl ControllerSection {
    pub fn kind(&self) -> Result<ControllerKind> {
        match (self.kind, self.m) {
            (KindName::Ms, Some(m)) => Ok(ControllerKind::Ms(m)),
            (KindName::Ms, None) => Err(SmpcError::config(format!("{}: ms controller needs M", self.name))),
            (_, Some(_)) => Err(SmpcError::config(format!("{}: M only applies to ms", self.name))),
            (KindName::Naive, None) => Ok(ControllerKind::Naive),
            (KindName::Rs, None) => Ok(ControllerKind::Rs),
            (KindName::If, None) => Ok(ControllerKind::If),
        }
    }

    pub fn to_spec(&self) -> Result<ControllerSpec<f64>> {
        if self.horizon == 0 {
            return Err(SmpcError::config(format!("{}: N must be ≥ 1", self.name)));
        }
        Ok(ControllerSpec {
            name: self.name.clone(),
            kind: self.kind()?,
            horizon: self.horizon,
            measured_input: self.remark4_input_handling,
            gain: self.gain.to_spec()?,
        })
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that does not need numerical work.
    pub fn validate(&self) -> Result<()> {
        self.system()?;
        self.experiment.validate()?;
        self.x0()?;
        let mut names: Vec<&str> = self.controllers.iter().map(|c| c.name.as_str()).collect();
        names.extend(self.baselines.iter().map(|b| b.name.as_str()));
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(SmpcError::config("controller and baseline names must be unique"));
        }
        if let Some(r) = &self.reference {
            if !names.contains(&r.as_str()) {
                return Err(SmpcError::config(format!("reference {r:?} names no controller or baseline")));
            }
        }
        for c in &self.controllers {
            c.to_spec()?;
        }
        for b in &self.baselines {
            b.gain.to_spec()?;
        }
        if let Some(s) = &self.sweep {
            if s.m.is_empty() || s.horizon == 0 {
                return Err(SmpcError::config("sweep needs a nonempty M list and N ≥ 1"));
            }
            s.gain.to_spec()?;
        }
        if self.tightening.num_samples == 0 || !(self.tightening.delta > 0.0 && self.tightening.delta < 1.0) {
            return Err(SmpcError::config("tightening needs N_s ≥ 1 and 0 < delta < 1"));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<LinearStochasticSystem<f64>> {
        let a = matrix("system.a", &self.system.a)?;
        let n = a.nrows();
        let b = matrix("system.b", &self.system.b)?;
        let d = matrix("system.d", &self.system.d)?;
        let dist = &self.disturbance;
        let disturbance = match dist.distribution {
            Distribution::Uniform => {
                if dist.covariance.is_some() {
                    return Err(SmpcError::config("covariance only applies to truncated_gaussian"));
                }
                DisturbanceModel::uniform_box(&dist.lower, &dist.upper)?
            }
            Distribution::TruncatedGaussian => {
                let cov = dist
                    .covariance
                    .as_ref()
                    .ok_or_else(|| SmpcError::config("truncated_gaussian needs a covariance"))?;
                let support = Polytope::from_box(&dist.lower, &dist.upper)?;
                DisturbanceModel::truncated_gaussian(support, matrix("disturbance.covariance", cov)?)?
            }
        };
        let c = &self.constraints;
        let m = b.ncols();
        let constraints = ConstraintSpec {
            h_x: matrix_with_cols("constraints.h_x", &c.h_x, n)?,
            rhs_x: vector("constraints.rhs_x", &c.rhs_x)?,
            p: c.p.clone(),
            h_u: matrix_with_cols("constraints.h_u", &c.h_u, m)?,
            rhs_u: vector("constraints.rhs_u", &c.rhs_u)?,
        };
        let k = &self.cost;
        let mut cost = CostSpec::quadratic(matrix("cost.q", &k.q)?, matrix("cost.r", &k.r)?);
        if let Some(q) = &k.q_lin {
            cost.q = vector("cost.q_lin", q)?;
        }
        if let Some(r) = &k.r_lin {
            cost.r = vector("cost.r_lin", r)?;
        }
        cost.offset = k.offset;
        cost.lower_bound = k.lower_bound;
        LinearStochasticSystem::new(a, b, d, constraints, disturbance, cost)
    }

    pub fn x0(&self) -> Result<DVector<f64>> {
        let n = self.system.a.len();
        match &self.system.x0 {
            None => Ok(DVector::zeros(n)),
            Some(v) if v.len() == n => vector("system.x0", v),
            Some(v) => Err(SmpcError::dim(format!("x0 has length {}, expected {n}", v.len()))),
        }
    }

    pub fn controller_specs(&self) -> Result<Vec<ControllerSpec<f64>>> {
        self.controllers.iter().map(ControllerSection::to_spec).collect()
    }

    /// SHA-256 of each section that determines the design artifact.
    pub fn section_hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut put = |name: &str, v: serde_json::Value| {
            let digest = Sha256::digest(v.to_string().as_bytes());
            out.insert(name.to_string(), hex::encode(digest));
        };
        put("system", serde_json::to_value(&self.system)?);
        put("disturbance", serde_json::to_value(&self.disturbance)?);
        put("constraints", serde_json::to_value(&self.constraints)?);
        put("cost", serde_json::to_value(&self.cost)?);
        put("controllers", serde_json::to_value(&self.controllers)?);
        put("baselines", serde_json::to_value(&self.baselines)?);
        put("reference", serde_json::to_value(&self.reference)?);
        put("tightening", serde_json::to_value(&self.tightening)?);
        Ok(out)
    }

    /// Hash over all design-relevant sections.
    pub fn design_hash(&self) -> Result<String> {
        let sections = self.section_hashes()?;
        let mut h = Sha256::new();
        for (k, v) in &sections {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }
}
