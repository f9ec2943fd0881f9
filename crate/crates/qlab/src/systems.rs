//! Concrete fibered systems: random full-branch circle maps and random
//! subshifts of finite type, with the per-fiber geometry the estimates use.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::environment::EnvPath;
use crate::error::{arg, Error, Result};

/// Constant in ξ = C·min(1, Z⁻¹) for the unit circle with diameter-one metric.
pub const XI_CONST: f64 = 0.5;
pub const PRIMITIVITY_CUTOFF: usize = 64;
const Z_TAIL_REL: f64 = 1e-12;
const GRID_BASE: usize = 64;
const GRID_REFINE: usize = 8;
const GRID_MAX_ROUNDS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sin,
    Cos,
}

/// x ↦ k·x + ε·g(x) mod 1 with g = sin(2πmx) or cos(2πmx).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleFiber {
    pub k: u32,
    pub eps: f64,
    pub shape: Shape,
    pub mode: u32,
}

impl CircleFiber {
    pub fn linear(k: u32) -> Self {
        CircleFiber { k, eps: 0.0, shape: Shape::Sin, mode: 1 }
    }

    fn g(&self, x: f64) -> f64 {
        let t = 2.0 * PI * self.mode as f64 * x;
        match self.shape {
            Shape::Sin => t.sin(),
            Shape::Cos => t.cos(),
        }
    }

    fn dg(&self, x: f64) -> f64 {
        let w = 2.0 * PI * self.mode as f64;
        let t = w * x;
        match self.shape {
            Shape::Sin => w * t.cos(),
            Shape::Cos => -w * t.sin(),
        }
    }

    /// Lift F(x) = kx + εg(x) on ℝ; F(x+1) = F(x) + k.
    pub fn lift(&self, x: f64) -> f64 {
        if self.eps == 0.0 {
            return self.k as f64 * x;
        }
        self.k as f64 * x + self.eps * self.g(x)
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.lift(x).rem_euclid(1.0)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.k as f64 + self.eps * self.dg(x)
    }

    /// Bound on |T″|.
    pub fn second_derivative_bound(&self) -> f64 {
        self.eps.abs() * (2.0 * PI * self.mode as f64).powi(2)
    }

    /// The k preimages of x ∈ [0,1), sorted, in [0,1).
    pub fn preimages(&self, x: f64) -> Vec<f64> {
        let f0 = self.lift(0.0);
        let k = self.k as usize;
        let mut out = Vec::with_capacity(k);
        // Targets x + r lying in [F(0), F(0) + k).
        let r0 = (f0 - x).ceil();
        for i in 0..k {
            let target = x + r0 + i as f64;
            out.push(self.solve_lift(target));
        }
        out.iter_mut().for_each(|y| *y = y.rem_euclid(1.0));
        out.sort_by(|a, b| a.total_cmp(b));
        out
    }

    /// Solves F(y) = target for y ∈ [0, 1] by safeguarded Newton.
    pub(crate) fn solve_lift(&self, target: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut y = ((target - self.lift(0.0)) / self.k as f64).clamp(0.0, 1.0);
        for _ in 0..200 {
            let r = self.lift(y) - target;
            if r.abs() < 1e-15 {
                break;
            }
            if r > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let step = y - r / self.derivative(y);
            y = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-16 {
                break;
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftFiber {
    /// 0–1 transition matrix from this fiber's alphabet to the next one.
    pub matrix: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Circle(Vec<CircleFiber>),
    Sft(Vec<SftFiber>),
}

/// Per-state metadata that does not depend on the past of the orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateGeometry {
    /// γ = min|T′| (circle, sampled) or e (sft).
    pub gamma: f64,
    /// Lipschitz slack of the sampled minimum at the final grid.
    pub gamma_slack: f64,
    /// N(ω) = max|T′| (circle) or e (sft).
    pub holder_bound: f64,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberedSystem {
    pub family: Family,
    pub alpha: f64,
    pub states: Vec<StateGeometry>,
}

/// Sampled min and max of |T′| with grid refinement until the Lipschitz
/// slack is below 1% of the minimum.
fn certify_derivative(f: &CircleFiber) -> (f64, f64, f64) {
    let lip = f.second_derivative_bound();
    let mut n = GRID_BASE;
    let mut round = 0;
    loop {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = f.derivative(i as f64 / n as f64).abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let slack = lip * 0.5 / n as f64;
        if slack < 0.01 * lo || round >= GRID_MAX_ROUNDS {
            return (lo, hi, slack);
        }
        n *= GRID_REFINE;
        round += 1;
    }
}

pub fn make_circle_family(fibers: Vec<CircleFiber>, alpha: f64) -> Result<FiberedSystem> {
    if fibers.is_empty() {
        return arg("circle family needs at least one fiber");
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return arg(format!("Hölder exponent {alpha} outside (0, 1]"));
    }
    let mut states = Vec::with_capacity(fibers.len());
    for (s, f) in fibers.iter().enumerate() {
        if f.k < 1 {
            return Err(Error::Model(format!("state {s}: degree must be at least 1")));
        }
        let (lo, hi, slack) = certify_derivative(f);
        if lo < 1.0 - 1e-12 {
            return Err(Error::Model(format!("state {s}: min |T′| = {lo} < 1, map is not expanding")));
        }
        states.push(StateGeometry {
            gamma: lo.max(1.0),
            gamma_slack: slack,
            holder_bound: hi,
            degree: f.k as usize,
        });
    }
    if states.iter().all(|g| g.gamma <= 1.0 + 1e-12) {
        return Err(Error::Model("no state is strictly expanding".into()));
    }
    Ok(FiberedSystem {
        family: Family::Circle(fibers),
        alpha,
        states,
    })
}

pub fn make_sft_family(matrices: Vec<Vec<Vec<u8>>>, alpha: f64) -> Result<FiberedSystem> {
    if matrices.is_empty() {
        return arg("sft family needs at least one matrix");
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return arg(format!("Hölder exponent {alpha} outside (0, 1]"));
    }
    let d = matrices[0].len();
    let mut states = Vec::new();
    for (s, m) in matrices.iter().enumerate() {
        if m.len() != d || m.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension(format!(
                "state {s}: every transition matrix must be {d}×{d}"
            )));
        }
        if m.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Model(format!("state {s}: matrix entries must be 0 or 1")));
        }
        for i in 0..d {
            if m[i].iter().all(|&v| v == 0) {
                return Err(Error::Model(format!("state {s}: row {i} is zero")));
            }
            if m.iter().all(|r| r[i] == 0) {
                return Err(Error::Model(format!("state {s}: column {i} is zero")));
            }
        }
        states.push(StateGeometry {
            gamma: std::f64::consts::E,
            gamma_slack: 0.0,
            holder_bound: std::f64::consts::E,
            degree: d,
        });
    }
    Ok(FiberedSystem {
        family: Family::Sft(matrices.into_iter().map(|matrix| SftFiber { matrix }).collect()),
        alpha,
        states,
    })
}

impl FiberedSystem {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn circle(&self, state: usize) -> Option<&CircleFiber> {
        match &self.family {
            Family::Circle(f) => f.get(state),
            Family::Sft(_) => None,
        }
    }

    pub fn sft(&self, state: usize) -> Option<&SftFiber> {
        match &self.family {
            Family::Sft(f) => f.get(state),
            Family::Circle(_) => None,
        }
    }

    pub fn is_circle(&self) -> bool {
        matches!(self.family, Family::Circle(_))
    }

    pub fn alphabet(&self) -> usize {
        match &self.family {
            Family::Sft(f) => f[0].matrix.len(),
            Family::Circle(_) => 0,
        }
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.state_count() {
            return Err(Error::Dimension(format!(
                "environment state {s} but system has {} states",
                self.state_count()
            )));
        }
        Ok(())
    }

    /// E[γ^{−α}] under a marginal; below one for the Q and Z series.
    pub fn mean_inverse_expansion(&self, marginal: &[f64], alpha: f64) -> f64 {
        self.states
            .iter()
            .zip(marginal)
            .map(|(g, p)| p * g.gamma.powf(-alpha))
            .sum()
    }

    /// Admissible words of length `depth` on the fiber at `index`.
    pub fn cylinder_words(&self, path: &EnvPath, index: i64, depth: usize) -> Result<Vec<Vec<u16>>> {
        let Family::Sft(fibers) = &self.family else {
            return arg("cylinder words exist only for sft systems");
        };
        let d = fibers[0].matrix.len();
        let mut words: Vec<Vec<u16>> = (0..d as u16).map(|a| vec![a]).collect();
        for pos in 1..depth {
            let s = path.at(index + pos as i64 - 1)?;
            self.check_state(s)?;
            let m = &fibers[s].matrix;
            let mut next = Vec::new();
            for w in &words {
                let last = *w.last().unwrap() as usize;
                for b in 0..d {
                    if m[last][b] == 1 {
                        let mut v = w.clone();
                        v.push(b as u16);
                        next.push(v);
                    }
                }
            }
            words = next;
        }
        Ok(words)
    }
}

/// Geometry attached to one point of the orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberGeometry {
    pub index: i64,
    pub gamma: f64,
    pub xi: f64,
    pub degree: usize,
    pub holder_bound: f64,
    pub z_value: Option<f64>,
    pub cover_count: usize,
}

/// Z_ω = Σ_{j≥1} ∏_{i=1}^{j} γ_{θ^{−i}ω}^{−1} from the stored past. If the
/// window runs out before the tail drops below 1e-12 of the sum, the rest is
/// replaced by its expectation under the geometric envelope E[γ⁻¹].
pub fn z_value(system: &FiberedSystem, path: &EnvPath, index: i64, mean_inv: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut prod = 1.0;
    let mut i = 1;
    loop {
        let at = index - i;
        if at < path.offset {
            if mean_inv >= 1.0 {
                return Err(Error::Truncation("E[γ⁻¹] ≥ 1, Z series has no envelope".into()));
            }
            sum += prod * mean_inv / (1.0 - mean_inv);
            return Ok(sum);
        }
        let s = path.at(at)?;
        system.check_state(s)?;
        prod /= system.states[s].gamma;
        sum += prod;
        let tail = if mean_inv < 1.0 {
            prod * mean_inv / (1.0 - mean_inv)
        } else {
            f64::INFINITY
        };
        if tail < Z_TAIL_REL * sum {
            return Ok(sum);
        }
        i += 1;
    }
}

pub fn fiber_geometry(
    system: &FiberedSystem,
    path: &EnvPath,
    index: i64,
    marginal: &[f64],
) -> Result<FiberGeometry> {
    let s = path.at(index)?;
    system.check_state(s)?;
    let st = system.states[s];
    match &system.family {
        Family::Circle(_) => {
            let z = z_value(system, path, index, system.mean_inverse_expansion(marginal, 1.0))?;
            let xi = XI_CONST * (1.0f64).min(1.0 / z);
            Ok(FiberGeometry {
                index,
                gamma: st.gamma,
                xi,
                degree: st.degree,
                holder_bound: st.holder_bound,
                z_value: Some(z),
                cover_count: (1.0 / xi).ceil() as usize,
            })
        }
        Family::Sft(_) => Ok(FiberGeometry {
            index,
            gamma: st.gamma,
            xi: (-1.0f64).exp(),
            degree: st.degree,
            holder_bound: st.holder_bound,
            z_value: None,
            cover_count: st.degree,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveringTimes {
    pub index: i64,
    pub m: usize,
    pub j: usize,
}

/// m at a single index; circle uses ξ⁻¹∏γ⁻¹ ≤ R, sft uses matrix positivity.
pub fn covering_time(
    system: &FiberedSystem,
    path: &EnvPath,
    index: i64,
    r_const: f64,
    marginal: &[f64],
) -> Result<usize> {
    match &system.family {
        Family::Circle(_) => {
            let xi = fiber_geometry(system, path, index, marginal)?.xi;
            let mut v = 1.0 / xi;
            for n in 1..=100_000usize {
                let s = path.at(index + n as i64 - 1)?;
                v /= system.states[s].gamma;
                if v <= r_const {
                    return Ok(n);
                }
            }
            Err(Error::WindowExhausted("covering time exceeds 10⁵ steps".into()))
        }
        Family::Sft(fibers) => {
            let d = fibers[0].matrix.len();
            let mut prod: Vec<Vec<u64>> = (0..d)
                .map(|i| (0..d).map(|j| u64::from(i == j)).collect())
                .collect();
            for n in 1..=PRIMITIVITY_CUTOFF {
                let s = path.at(index + n as i64 - 1)?;
                system.check_state(s)?;
                let m = &fibers[s].matrix;
                let mut next = vec![vec![0u64; d]; d];
                for i in 0..d {
                    for k in 0..d {
                        if prod[i][k] > 0 {
                            for j in 0..d {
                                if m[k][j] == 1 {
                                    // Only positivity matters; saturate to 1.
                                    next[i][j] = 1;
                                }
                            }
                        }
                    }
                }
                prod = next;
                if prod.iter().flatten().all(|&v| v > 0) {
                    return Ok(n);
                }
            }
            Err(Error::Primitivity { index, cutoff: PRIMITIVITY_CUTOFF })
        }
    }
}

/// Covering and reversed covering times for `count` indices from `from`.
/// j_ω = min{n ≥ 1 : m(θ^{−n}ω) ≤ n} needs m at earlier indices.
pub fn covering_times(
    system: &FiberedSystem,
    path: &EnvPath,
    r_const: f64,
    marginal: &[f64],
    from: i64,
    count: usize,
) -> Result<Vec<CoveringTimes>> {
    if !(r_const > 0.0) {
        return arg("R must be positive");
    }
    let mut cache = std::collections::HashMap::new();
    let mut m_at = |i: i64| -> Result<usize> {
        if let Some(&v) = cache.get(&i) {
            return Ok(v);
        }
        let v = covering_time(system, path, i, r_const, marginal)?;
        cache.insert(i, v);
        Ok(v)
    };
    let mut out = Vec::with_capacity(count);
    for t in 0..count as i64 {
        let index = from + t;
        let m = m_at(index)?;
        let mut j = None;
        for n in 1.. {
            if index - n < path.offset {
                return Err(Error::WindowExhausted(format!(
                    "reversed covering time at {index} needs the past beyond {}",
                    path.offset
                )));
            }
            if m_at(index - n)? <= n as usize {
                j = Some(n as usize);
                break;
            }
        }
        out.push(CoveringTimes { index, m, j: j.unwrap() });
    }
    Ok(out)
}

/// Rows (k, ℙ̂(j > k), ℙ̂(m > k)) of the empirical tail comparison.
pub fn covering_tails(times: &[CoveringTimes]) -> Vec<(usize, f64, f64)> {
    let kmax = times.iter().map(|t| t.m.max(t.j)).max().unwrap_or(0);
    let n = times.len() as f64;
    (0..=kmax)
        .map(|k| {
            let pj = times.iter().filter(|t| t.j > k).count() as f64 / n;
            let pm = times.iter().filter(|t| t.m > k).count() as f64 / n;
            (k, pj, pm)
        })
        .collect()
}

/// Checks that the arc of d-radius ξ around every grid point covers the
/// circle after n ≥ m steps of the lift.
pub fn verify_circle_cover(
    system: &FiberedSystem,
    path: &EnvPath,
    index: i64,
    xi: f64,
    n: usize,
    grid: usize,
) -> Result<bool> {
    let Family::Circle(fibers) = &system.family else {
        return arg("arc covering applies to circle systems");
    };
    let maps: Vec<CircleFiber> = (0..n)
        .map(|t| path.at(index + t as i64).map(|s| fibers[s]))
        .collect::<Result<_>>()?;
    let half = xi / 2.0; // d = 2·dist, so the ball is an arc of length ξ.
    Ok((0..grid).all(|g| {
        let x = (g as f64 + 0.5) / grid as f64;
        let (mut a, mut b) = (x - half, x + half);
        for f in &maps {
            let base = a.floor();
            let (la, lb) = (a - base, b - base);
            a = f.lift(la) + f.k as f64 * base;
            b = f.lift(lb) + f.k as f64 * base;
            if b - a >= 1.0 {
                return true;
            }
        }
        b - a >= 1.0
    }))
}

/// A per-state real function on the fiber space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FnSpec {
    Zero,
    Constant { value: f64 },
    /// Σ a·cos(2πmx) or a·sin(2πmx).
    Fourier { terms: Vec<FourierTerm> },
    /// dist(x, 2^{−k}ℤ).
    Sawtooth { level: u32 },
    /// φ = −log|T′_ω|.
    NegLogDerivative,
    /// u − u∘T_ω.
    Coboundary { inner: Box<FnSpec> },
    /// f(w) = v[w₀] on sft words.
    Symbol { values: Vec<f64> },
    /// φ(w) = P[w₀][w₁] on sft words.
    Pair { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub amp: f64,
    pub freq: u32,
    pub shape: Shape,
}

impl FnSpec {
    pub fn cos(freq: u32) -> Self {
        FnSpec::Fourier { terms: vec![FourierTerm { amp: 1.0, freq, shape: Shape::Cos }] }
    }

    pub fn eval_circle(&self, fiber: &CircleFiber, x: f64) -> f64 {
        match self {
            FnSpec::Zero => 0.0,
            FnSpec::Constant { value } => *value,
            FnSpec::Fourier { terms } => terms
                .iter()
                .map(|t| {
                    let a = 2.0 * PI * t.freq as f64 * x;
                    t.amp * match t.shape {
                        Shape::Cos => a.cos(),
                        Shape::Sin => a.sin(),
                    }
                })
                .sum(),
            FnSpec::Sawtooth { level } => {
                let h = 0.5f64.powi(*level as i32);
                let r = x.rem_euclid(h);
                r.min(h - r)
            }
            FnSpec::NegLogDerivative => -fiber.derivative(x).abs().ln(),
            FnSpec::Coboundary { inner } => {
                inner.eval_circle(fiber, x) - inner.eval_circle(fiber, fiber.apply(x))
            }
            FnSpec::Symbol { .. } | FnSpec::Pair { .. } => f64::NAN,
        }
    }

    pub fn eval_word(&self, w: &[u16]) -> f64 {
        match self {
            FnSpec::Zero => 0.0,
            FnSpec::Constant { value } => *value,
            FnSpec::Symbol { values } => values[w[0] as usize],
            FnSpec::Pair { values } => values[w[0] as usize][w[1] as usize],
            _ => f64::NAN,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, FnSpec::Zero)
    }

    fn valid_for(&self, circle: bool) -> bool {
        match self {
            FnSpec::Zero | FnSpec::Constant { .. } => true,
            FnSpec::Fourier { .. } | FnSpec::Sawtooth { .. } | FnSpec::NegLogDerivative => circle,
            FnSpec::Coboundary { inner } => circle && inner.valid_for(true),
            FnSpec::Symbol { .. } | FnSpec::Pair { .. } => !circle,
        }
    }

    /// (sup |f|, sup |f′|) bounds on the circle, with x the usual coordinate.
    fn circle_bounds(&self, fiber: &CircleFiber) -> (f64, f64) {
        match self {
            FnSpec::Zero => (0.0, 0.0),
            FnSpec::Constant { value } => (value.abs(), 0.0),
            FnSpec::Fourier { terms } => terms.iter().fold((0.0, 0.0), |(s, l), t| {
                (s + t.amp.abs(), l + t.amp.abs() * 2.0 * PI * t.freq as f64)
            }),
            FnSpec::Sawtooth { level } => (0.5f64.powi(*level as i32 + 1), 1.0),
            FnSpec::NegLogDerivative => {
                let (lo, hi, _) = certify_derivative(fiber);
                let sup = lo.ln().abs().max(hi.ln().abs());
                (sup, fiber.second_derivative_bound() / lo)
            }
            FnSpec::Coboundary { inner } => {
                let (s, l) = inner.circle_bounds(fiber);
                let (_, hi, _) = certify_derivative(fiber);
                (2.0 * s, l * (1.0 + hi))
            }
            FnSpec::Symbol { .. } | FnSpec::Pair { .. } => (f64::NAN, f64::NAN),
        }
    }
}

/// Per-state functions; a single entry is shared by every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFunction {
    pub specs: Vec<FnSpec>,
}

/// Analytic bounds attached to one state's function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionBounds {
    pub sup_norm: f64,
    pub holder_seminorm: f64,
    /// H = max(1, ‖·‖_α).
    pub h_bound: f64,
}

impl RandomFunction {
    pub fn uniform(spec: FnSpec) -> Self {
        RandomFunction { specs: vec![spec] }
    }

    pub fn zero() -> Self {
        Self::uniform(FnSpec::Zero)
    }

    pub fn spec(&self, state: usize) -> &FnSpec {
        if self.specs.len() == 1 {
            &self.specs[0]
        } else {
            &self.specs[state]
        }
    }

    pub fn is_zero(&self) -> bool {
        self.specs.iter().all(FnSpec::is_zero)
    }

    pub fn validate(&self, system: &FiberedSystem) -> Result<()> {
        if self.specs.len() != 1 && self.specs.len() != system.state_count() {
            return Err(Error::Dimension(format!(
                "{} function specs for {} states",
                self.specs.len(),
                system.state_count()
            )));
        }
        let circle = system.is_circle();
        for s in &self.specs {
            if !s.valid_for(circle) {
                return Err(Error::Model(format!("function {s:?} does not fit this family")));
            }
            if let FnSpec::Symbol { values } = s {
                if values.len() != system.alphabet() {
                    return Err(Error::Dimension("symbol function length differs from alphabet".into()));
                }
            }
            if let FnSpec::Pair { values } = s {
                let d = system.alphabet();
                if values.len() != d || values.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension("pair potential must be d×d".into()));
                }
            }
        }
        Ok(())
    }

    /// Sup norm, α-Hölder seminorm and H-bound on the fiber of `state`.
    pub fn bounds(&self, system: &FiberedSystem, state: usize) -> FunctionBounds {
        let alpha = system.alpha;
        let spec = self.spec(state);
        let (sup, semi) = match &system.family {
            Family::Circle(f) => {
                let (sup, deriv) = spec.circle_bounds(&f[state]);
                // In the diameter-one metric d = 2·dist the Lipschitz constant halves.
                let lip = deriv / 2.0;
                let semi = if lip == 0.0 {
                    0.0
                } else {
                    let cross = 2.0 * sup / lip;
                    if cross >= 1.0 {
                        lip
                    } else {
                        lip * cross.powf(1.0 - alpha)
                    }
                };
                (sup, semi)
            }
            Family::Sft(_) => {
                let d = system.alphabet();
                let words: Vec<[u16; 2]> = (0..d as u16)
                    .flat_map(|a| (0..d as u16).map(move |b| [a, b]))
                    .collect();
                let sup = words.iter().map(|w| spec.eval_word(w).abs()).fold(0.0, f64::max);
                let mut semi: f64 = 0.0;
                for u in &words {
                    for v in &words {
                        let dist = crate::geometry::word_dist(u, v);
                        if dist > 0.0 {
                            let diff = (spec.eval_word(u) - spec.eval_word(v)).abs();
                            semi = semi.max(diff / dist.powf(alpha));
                        }
                    }
                }
                (sup, semi)
            }
        };
        FunctionBounds {
            sup_norm: sup,
            holder_seminorm: semi,
            h_bound: (sup + semi).max(1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{sample_path, EnvironmentModel};
    use approx::assert_abs_diff_eq;

    fn const_path(state: usize, len: usize, offset: i64) -> EnvPath {
        EnvPath { offset, states: vec![state; len] }
    }

    #[test]
    fn doubling_geometry() {
        let sys = make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap();
        assert_eq!(sys.states[0].gamma, 2.0);
        assert_eq!(sys.states[0].holder_bound, 2.0);
        assert_eq!(sys.states[0].degree, 2);
        let path = const_path(0, 200, -100);
        let g = fiber_geometry(&sys, &path, 0, &[1.0]).unwrap();
        assert_abs_diff_eq!(g.z_value.unwrap(), 1.0, epsilon = 1e-11);
        assert_abs_diff_eq!(g.xi, 0.5, epsilon = 1e-11);
        // ξ⁻¹·2⁻ⁿ ≤ 1 first at n = 1.
        assert_eq!(covering_time(&sys, &path, 0, 1.0, &[1.0]).unwrap(), 1);
    }

    #[test]
    fn perturbed_minimum_derivative() {
        let f = CircleFiber { k: 2, eps: 0.01, shape: Shape::Sin, mode: 1 };
        let sys = make_circle_family(vec![f], 1.0).unwrap();
        assert_abs_diff_eq!(sys.states[0].gamma, 2.0 - 0.02 * PI, epsilon = 1e-12);
    }

    #[test]
    fn neutral_state_allowed_but_not_alone() {
        let neutral = CircleFiber { k: 2, eps: -1.0 / (2.0 * PI), shape: Shape::Sin, mode: 1 };
        let sys = make_circle_family(vec![CircleFiber::linear(2), neutral], 1.0).unwrap();
        assert_abs_diff_eq!(sys.states[1].gamma, 1.0, epsilon = 1e-12);
        assert!(make_circle_family(vec![neutral], 1.0).is_err());
        let bad = CircleFiber { k: 2, eps: -0.2, shape: Shape::Sin, mode: 1 };
        assert!(matches!(make_circle_family(vec![bad], 1.0), Err(Error::Model(_))));
    }

    #[test]
    fn preimages_invert_the_map() {
        let f = CircleFiber { k: 3, eps: 0.05, shape: Shape::Cos, mode: 2 };
        for &x in &[0.0, 0.1234, 0.5, 0.999] {
            let ys = f.preimages(x);
            assert_eq!(ys.len(), 3);
            for y in ys {
                let d = (f.apply(y) - x).abs();
                assert!(d.min(1.0 - d) < 1e-12);
            }
        }
    }

    #[test]
    fn sft_covering_times() {
        let full = make_sft_family(vec![vec![vec![1, 1], vec![1, 1]]], 1.0).unwrap();
        let path = const_path(0, 20, 0);
        let t = covering_times(&full, &path, 1.0, &[1.0], 5, 5).unwrap();
        assert!(t.iter().all(|c| c.m == 1 && c.j == 1));
        let golden = make_sft_family(vec![vec![vec![0, 1], vec![1, 1]]], 1.0).unwrap();
        assert_eq!(covering_time(&golden, &path, 0, 1.0, &[1.0]).unwrap(), 2);
        let t = covering_times(&golden, &path, 1.0, &[1.0], 5, 3).unwrap();
        assert!(t.iter().all(|c| c.j == 2));
        assert!(make_sft_family(vec![vec![vec![0, 0], vec![1, 1]]], 1.0).is_err());
        let id = make_sft_family(vec![vec![vec![1, 0], vec![0, 1]]], 1.0).unwrap();
        assert!(matches!(
            covering_time(&id, &const_path(0, 100, 0), 0, 1.0, &[1.0]),
            Err(Error::Primitivity { .. })
        ));
    }

    #[test]
    fn sft_words_follow_admissibility() {
        let golden = make_sft_family(vec![vec![vec![0, 1], vec![1, 1]]], 1.0).unwrap();
        let path = const_path(0, 10, 0);
        let w = golden.cylinder_words(&path, 0, 3).unwrap();
        // Fibonacci count of admissible words of length 3.
        assert_eq!(w.len(), 5);
    }

    #[test]
    fn reversed_covering_tail_is_dominated() {
        let neutral = CircleFiber { k: 2, eps: -1.0 / (2.0 * PI), shape: Shape::Sin, mode: 1 };
        let sys = make_circle_family(vec![CircleFiber::linear(2), neutral], 1.0).unwrap();
        let env = EnvironmentModel::iid(vec![0.5, 0.5], 0).unwrap();
        let path = sample_path(&env, -400, 2000, 1).unwrap();
        let times = covering_times(&sys, &path, 1.0, &env.marginal, 0, 1000).unwrap();
        for (k, pj, pm) in covering_tails(&times) {
            assert!(pj <= pm + 0.05, "k={k}: {pj} > {pm}");
        }
        for t in times.iter().take(50) {
            let xi = fiber_geometry(&sys, &path, t.index, &env.marginal).unwrap().xi;
            assert!(verify_circle_cover(&sys, &path, t.index, xi, t.m, 64).unwrap());
        }
    }

    #[test]
    fn function_bounds() {
        let sys = make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap();
        let f = RandomFunction::uniform(FnSpec::cos(1));
        let b = f.bounds(&sys, 0);
        assert_abs_diff_eq!(b.sup_norm, 1.0);
        assert_abs_diff_eq!(b.holder_seminorm, PI, epsilon = 1e-12);
        let geom = crate::geometry::CellGeometry::circle(128);
        let v: Vec<f64> = (0..128)
            .map(|i| f.spec(0).eval_circle(&CircleFiber::linear(2), geom.midpoint(i)))
            .collect();
        assert!(crate::geometry::seminorm(&v, &geom, 1.0, None) <= b.holder_seminorm + 1e-12);
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        assert_abs_diff_eq!(phi.bounds(&sys, 0).sup_norm, 2f64.ln());
        assert_abs_diff_eq!(phi.bounds(&sys, 0).h_bound, 1.0);
    }
}
