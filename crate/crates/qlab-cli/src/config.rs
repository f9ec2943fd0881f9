use serde::{Deserialize, Serialize};

use qlab::environment::EnvironmentModel;
use qlab::systems::{make_circle_family, make_sft_family, CircleFiber, FiberedSystem, FnSpec, RandomFunction};
use qlab::transfer::Discretization;

use crate::CliError;

pub const ANALYSES: [&str; 8] = ["rpf", "decay", "cones", "blocks", "clt", "mdp", "var", "mixing"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSection,
    pub system: SystemSection,
    pub discretization: DiscretizationSection,
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentSection {
    Iid { marginal: Vec<f64>, seed: u64 },
    Markov { transition: Vec<Vec<f64>>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSection {
    Circle {
        alpha: f64,
        fibers: Vec<CircleFiber>,
        potential: FnList,
        observable: FnList,
    },
    Sft {
        alpha: f64,
        matrices: Vec<Vec<Vec<u8>>>,
        potential: FnList,
        observable: FnList,
    },
}

/// One spec for every state, or one per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FnList {
    One(FnSpec),
    PerState(Vec<FnSpec>),
}

impl FnList {
    pub fn to_random(&self) -> RandomFunction {
        match self {
            FnList::One(s) => RandomFunction::uniform(s.clone()),
            FnList::PerState(v) => RandomFunction { specs: v.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    /// Ulam cells (circle) or cylinder depth (sft).
    pub resolution: usize,
    pub burn_in: usize,
    #[serde(default = "default_rpf_tol")]
    pub rpf_tol: f64,
}

fn default_rpf_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub run: Vec<String>,
    pub seed: u64,
    pub rpf: Option<RpfSection>,
    pub decay: Option<DecaySection>,
    pub cones: Option<ConesSection>,
    pub blocks: Option<BlocksSection>,
    pub clt: Option<CltSection>,
    pub mdp: Option<MdpSection>,
    pub var: Option<VarSection>,
    pub mixing: Option<MixingSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpfSection {
    #[serde(default = "default_residual")]
    pub max_residual: f64,
}

fn default_residual() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySection {
    pub n_max: usize,
    #[serde(default = "default_levels")]
    pub levels: u32,
    /// "exponential", "polynomial" or "indeterminate".
    pub expect_regime: Option<String>,
}

fn default_levels() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConesSection {
    #[serde(default = "default_matrices")]
    pub matrices: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_matrices() -> usize {
    100
}
fn default_dim() -> usize {
    8
}
fn default_pairs() -> usize {
    64
}
fn default_slack() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocksSection {
    pub beta: f64,
    pub eps: f64,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(default = "default_j_max")]
    pub j_max: usize,
    #[serde(default = "default_j_cut")]
    pub j_cut: usize,
    #[serde(default = "default_rays")]
    pub rays: usize,
    #[serde(default = "default_block_tol")]
    pub tol: f64,
    /// Visit level set, one flag per state; all states when absent.
    pub level_set: Option<Vec<bool>>,
}

fn default_eps0() -> f64 {
    qlab::blocks::EPS0_DEFAULT
}
fn default_j_max() -> usize {
    40
}
fn default_j_cut() -> usize {
    3
}
fn default_rays() -> usize {
    8
}
fn default_block_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSection {
    pub n_grid: Vec<usize>,
    pub samples: usize,
    #[serde(default = "default_panels")]
    pub panels: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff_factor: f64,
    /// Asserted upper bound on the fitted log-log KS slope.
    pub max_slope: Option<f64>,
    pub max_ks: Option<f64>,
}

fn default_panels() -> usize {
    128
}
fn default_cutoff() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSection {
    pub exponent: f64,
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<f64>,
    #[serde(default)]
    pub sets: Vec<[f64; 2]>,
    pub samples: usize,
    #[serde(default = "default_cumulant_tol")]
    pub cumulant_tol: f64,
    pub set_rate_tol: Option<f64>,
}

fn default_cumulant_tol() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarSection {
    pub n_max: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_env_samples")]
    pub env_samples: usize,
    pub expect_sigma2: Option<f64>,
    #[serde(default = "default_sigma2_tol")]
    pub tol: f64,
    pub max_slope: Option<f64>,
}

fn default_k_max() -> usize {
    32
}
fn default_env_samples() -> usize {
    64
}
fn default_sigma2_tol() -> f64 {
    0.002
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSection {
    /// g per state, 0 < g ≤ 1.
    pub g: Vec<f64>,
    pub n_max: usize,
    pub samples: usize,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
}

fn default_sigmas() -> f64 {
    3.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
}

impl SystemSection {
    pub fn build(&self) -> qlab::Result<FiberedSystem> {
        match self {
            SystemSection::Circle { alpha, fibers, .. } => make_circle_family(fibers.clone(), *alpha),
            SystemSection::Sft { alpha, matrices, .. } => make_sft_family(matrices.clone(), *alpha),
        }
    }

    pub fn potential(&self) -> RandomFunction {
        match self {
            SystemSection::Circle { potential, .. } | SystemSection::Sft { potential, .. } => potential.to_random(),
        }
    }

    pub fn observable(&self) -> RandomFunction {
        match self {
            SystemSection::Circle { observable, .. } | SystemSection::Sft { observable, .. } => observable.to_random(),
        }
    }

    pub fn is_circle(&self) -> bool {
        matches!(self, SystemSection::Circle { .. })
    }
}

impl EnvironmentSection {
    pub fn build(&self) -> qlab::Result<EnvironmentModel> {
        match self {
            EnvironmentSection::Iid { marginal, seed } => EnvironmentModel::iid(marginal.clone(), *seed),
            EnvironmentSection::Markov { transition, seed } => EnvironmentModel::markov(transition.clone(), *seed),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            EnvironmentSection::Iid { seed, .. } | EnvironmentSection::Markov { seed, .. } => *seed,
        }
    }

    fn set_seed(&mut self, s: u64) {
        match self {
            EnvironmentSection::Iid { seed, .. } | EnvironmentSection::Markov { seed, .. } => *seed = s,
        }
    }

    pub fn states(&self) -> usize {
        match self {
            EnvironmentSection::Iid { marginal, .. } => marginal.len(),
            EnvironmentSection::Markov { transition, .. } => transition.len(),
        }
    }
}

impl DiscretizationSection {
    pub fn to_disc(&self, circle: bool) -> Discretization {
        if circle {
            Discretization::Ulam { cells: self.resolution }
        } else {
            Discretization::Cylinder { depth: self.resolution }
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces both seeds; the analysis seed is derived so the streams differ.
    pub fn override_seed(&mut self, seed: u64) {
        self.environment.set_seed(seed);
        self.analysis.seed = seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let a = &self.analysis;
        for name in &a.run {
            if !ANALYSES.contains(&name.as_str()) {
                return bad(format!("unknown analysis {name:?}; expected one of {ANALYSES:?}"));
            }
            let present = match name.as_str() {
                "rpf" => a.rpf.is_some(),
                "decay" => a.decay.is_some(),
                "cones" => a.cones.is_some(),
                "blocks" => a.blocks.is_some(),
                "clt" => a.clt.is_some(),
                "mdp" => a.mdp.is_some(),
                "var" => a.var.is_some(),
                _ => a.mixing.is_some(),
            };
            if !present {
                return bad(format!("analysis {name:?} is listed but [analysis.{name}] is missing"));
            }
        }
        let circle = self.system.is_circle();
        for name in ["clt", "mdp", "blocks"] {
            if !circle && self.runs(name) {
                return bad(format!("analysis {name:?} needs a circle family"));
            }
        }
        if self.discretization.resolution == 0 {
            return bad("discretization.resolution must be positive".into());
        }
        self.environment.build().map_err(|e| CliError::Config(format!("environment: {e}")))?;
        let sys = self.system.build().map_err(|e| CliError::Config(format!("system: {e}")))?;
        if sys.state_count() != self.environment.states() {
            return bad(format!(
                "system has {} states but the environment has {}",
                sys.state_count(),
                self.environment.states()
            ));
        }
        for (label, f) in [("potential", self.system.potential()), ("observable", self.system.observable())] {
            f.validate(&sys).map_err(|e| CliError::Config(format!("{label}: {e}")))?;
        }
        self.discretization
            .to_disc(circle)
            .validate(&sys)
            .map_err(|e| CliError::Config(format!("discretization: {e}")))?;
        if let Some(m) = &a.mixing {
            if m.g.len() != sys.state_count() {
                return bad("analysis.mixing.g needs one value per state".into());
            }
        }
        if let Some(b) = &a.blocks {
            if b.level_set.as_ref().is_some_and(|l| l.len() != sys.state_count()) {
                return bad("analysis.blocks.level_set needs one flag per state".into());
            }
        }
        Ok(())
    }

    pub fn runs(&self, name: &str) -> bool {
        self.analysis.run.iter().any(|r| r == name)
    }
}
