use crate::config::ExperimentConfig;

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub toml: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "uniform-doubling",
        description: "doubling map with cos(2πx): exact triplet, exponential decay, Σ² = 1/2, CLT table",
        toml: r#"
[environment]
kind = "iid"
marginal = [1.0]
seed = 1

[system]
family = "circle"
alpha = 1.0
fibers = [{ k = 2, eps = 0.0, shape = "sin", mode = 1 }]
potential = { type = "neg_log_derivative" }
observable = { type = "fourier", terms = [{ amp = 1.0, freq = 1, shape = "cos" }] }

[discretization]
resolution = 256
burn_in = 20

[analysis]
run = ["rpf", "decay", "var", "clt", "cones"]
seed = 2

[analysis.rpf]

[analysis.decay]
n_max = 12
levels = 6
expect_regime = "exponential"

[analysis.var]
n_max = 256
expect_sigma2 = 0.5
tol = 0.002

[analysis.clt]
n_grid = [64, 256, 1024]
samples = 20000
panels = 64

[analysis.cones]
matrices = 20
"#,
    },
    Preset {
        name: "perturbed-circle",
        description: "two perturbed expanding circle maps in an iid environment: variance, inducing blocks, mixing products",
        toml: r#"
[environment]
kind = "iid"
marginal = [0.5, 0.5]
seed = 7

[system]
family = "circle"
alpha = 1.0
fibers = [
    { k = 2, eps = 0.08, shape = "sin", mode = 1 },
    { k = 3, eps = 0.05, shape = "cos", mode = 1 },
]
potential = { type = "neg_log_derivative" }
observable = { type = "fourier", terms = [{ amp = 1.0, freq = 1, shape = "cos" }] }

[discretization]
resolution = 96
burn_in = 60

[analysis]
run = ["rpf", "var", "blocks", "mixing"]
seed = 8

[analysis.rpf]

[analysis.var]
n_max = 512
env_samples = 128

[analysis.blocks]
beta = 2.0
eps = 0.5

[analysis.mixing]
g = [0.5, 1.0]
n_max = 20
samples = 20000
"#,
    },
    Preset {
        name: "random-sft-2",
        description: "two golden-mean/full-shift subshifts under a Markov environment with pair potentials",
        toml: r#"
[environment]
kind = "markov"
transition = [[0.9, 0.1], [0.2, 0.8]]
seed = 3

[system]
family = "sft"
alpha = 1.0
matrices = [[[1, 1], [1, 0]], [[1, 1], [1, 1]]]
potential = [
    { type = "pair", values = [[0.3, -0.2], [0.5, 0.0]] },
    { type = "pair", values = [[0.0, 0.1], [-0.4, 0.2]] },
]
observable = { type = "symbol", values = [1.0, -1.0] }

[discretization]
resolution = 6
burn_in = 40

[analysis]
run = ["rpf", "decay", "var", "mixing"]
seed = 4

[analysis.rpf]

[analysis.decay]
n_max = 40

[analysis.var]
n_max = 256

[analysis.mixing]
g = [0.5, 1.0]
n_max = 30
samples = 20000
"#,
    },
    Preset {
        name: "coboundary-null",
        description: "doubling map with a coboundary observable: Σ² vanishes",
        toml: r#"
[environment]
kind = "iid"
marginal = [1.0]
seed = 1

[system]
family = "circle"
alpha = 1.0
fibers = [{ k = 2, eps = 0.0, shape = "sin", mode = 1 }]
potential = { type = "neg_log_derivative" }
observable = { type = "coboundary", inner = { type = "fourier", terms = [{ amp = 1.0, freq = 1, shape = "cos" }] } }

[discretization]
resolution = 4096
burn_in = 20

[analysis]
run = ["var"]
seed = 2

[analysis.var]
n_max = 256
expect_sigma2 = 0.0
tol = 1e-6
"#,
    },
    Preset {
        name: "mdp-demo",
        description: "scaled cumulants and interval rates for a_n = n^0.1 on the doubling map",
        toml: r#"
[environment]
kind = "iid"
marginal = [1.0]
seed = 1

[system]
family = "circle"
alpha = 1.0
fibers = [{ k = 2, eps = 0.0, shape = "sin", mode = 1 }]
potential = { type = "neg_log_derivative" }
observable = { type = "fourier", terms = [{ amp = 1.0, freq = 1, shape = "cos" }] }

[discretization]
resolution = 128
burn_in = 20

[analysis]
run = ["mdp"]
seed = 5

[analysis.mdp]
exponent = 0.1
n_grid = [256, 1024, 4096]
t_grid = [-0.5, -0.25, 0.25, 0.5]
sets = [[0.5, inf]]
samples = 5000
"#,
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        ExperimentConfig::parse(self.toml).expect("presets parse")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        assert!(PRESETS.len() >= 5);
        for p in PRESETS {
            let cfg = p.config();
            let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, again, "{}", p.name);
        }
    }
}
