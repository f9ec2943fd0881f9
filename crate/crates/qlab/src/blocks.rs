//! Contracting blocks, inducing on visiting times, joined operators and
//! their complex triplets.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvPath, VisitRecord};
use crate::error::{arg, Error, Result};
use crate::geometry::{holder_norm, holder_norm_c, CellGeometry};
use crate::par;
use crate::rpf::{circle_tests, RPFTriplet, DECAY_FLOOR};
use crate::stats::linear_fit;
use crate::systems::{FiberedSystem, RandomFunction};
use crate::transfer::{CocycleWindow, OperatorMatrix};

/// Upper end of the admissible ε₀ range.
pub const EPS0_MAX: f64 = 0.17;
pub const EPS0_DEFAULT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub c1: f64,
    pub beta: f64,
    pub eps: f64,
    pub eps0: f64,
    pub u0: f64,
    /// n[j] = n_j for j = 0..=j_max+1, n[0] = 0.
    pub n: Vec<u64>,
    /// cum[j] = N_j for j = 0..=j_max+1.
    pub cum: Vec<u64>,
    pub c3: f64,
    pub c4: f64,
    pub a1: f64,
    pub a2: f64,
    pub a1p: f64,
    pub a2p: f64,
    /// min_j N_j/(A₁ j^p) and max_j N_j/(A₂ j^p), p = β/(β−ε).
    pub lower_ratio: f64,
    pub upper_ratio: f64,
    pub block_lower_ratio: f64,
    pub block_upper_ratio: f64,
}

impl BlockSchedule {
    pub fn j_max(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn sandwich_holds(&self) -> bool {
        self.lower_ratio >= 1.0 && self.upper_ratio <= 1.0
    }

    pub fn block_sandwich_holds(&self) -> bool {
        self.block_lower_ratio >= 1.0 && self.block_upper_ratio <= 1.0
    }

    /// B_j = [N_j, N_j + n_{j+1}).
    pub fn block(&self, j: usize) -> std::ops::Range<u64> {
        self.cum[j]..self.cum[j] + self.n[j + 1]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["j", "n_j", "N_j", "block_start", "block_len"])?;
        for j in 0..self.cum.len() - 1 {
            wr.write_record([
                j.to_string(),
                self.n[j].to_string(),
                self.cum[j].to_string(),
                self.cum[j].to_string(),
                self.n[j + 1].to_string(),
            ])?;
        }
        wr.flush()
    }
}

/// n₁ = ⌊(u₀C₁)^{1/β}⌋, n_{j+1} = ⌊(u₀C₁)^{1/β}N_j^{ε/β}⌋, u₀ = 2/ε₀ + 1.
pub fn build_schedule(c1: f64, beta: f64, eps: f64, eps0: f64, j_max: usize) -> Result<BlockSchedule> {
    if !(c1 >= 1.0) {
        return arg(format!("C1 = {c1} must be at least 1"));
    }
    if !(beta > 0.0 && eps > 0.0) {
        return arg("β and ε must be positive");
    }
    if eps >= beta {
        return arg(format!("ε = {eps} ≥ β = {beta}: schedule diverges"));
    }
    if !(eps0 > 0.0 && eps0 < EPS0_MAX) {
        return arg(format!("ε₀ = {eps0} outside (0, {EPS0_MAX})"));
    }
    if j_max == 0 {
        return arg("j_max must be positive");
    }
    let u0 = 2.0 / eps0 + 1.0;
    let c4 = (u0 * c1).powf(1.0 / beta);
    let c3 = c4 - 1.0;
    let p = beta / (beta - eps);
    let a1 = 0.5 * ((beta - eps) / beta).powf(p) * c3;
    let a2 = c4.powf(p);
    let a1p = c3 * a1.powf(eps / beta);
    let a2p = c4 * a2.powf(eps / beta);
    let mut n = vec![0u64, c4.floor() as u64];
    let mut cum = vec![0u64, n[1]];
    for j in 1..=j_max {
        let next = (c4 * (cum[j] as f64).powf(eps / beta)).floor();
        let Some(total) = (next < u64::MAX as f64).then(|| cum[j].checked_add(next as u64)).flatten() else {
            return arg(format!("N_j overflows u64 before j = {j_max}"));
        };
        n.push(next as u64);
        cum.push(total);
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let (mut blo, mut bhi) = (f64::INFINITY, 0.0f64);
    for j in 1..=j_max {
        let jf = j as f64;
        let nj = cum[j] as f64;
        lo = lo.min(nj / (a1 * jf.powf(p)));
        hi = hi.max(nj / (a2 * jf.powf(p)));
        let q = jf.powf(eps / (beta - eps));
        blo = blo.min(n[j + 1] as f64 / (a1p * q));
        bhi = bhi.max(n[j + 1] as f64 / (a2p * q));
    }
    Ok(BlockSchedule {
        c1,
        beta,
        eps,
        eps0,
        u0,
        n,
        cum,
        c3,
        c4,
        a1,
        a2,
        a1p,
        a2p,
        lower_ratio: lo,
        upper_ratio: hi,
        block_lower_ratio: blo,
        block_upper_ratio: bhi,
    })
}

/// m_n ≤ E₂n^{1+η₀} and m_{n+1} − m_n ≤ E₃n^δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitGrowth {
    pub eta0: f64,
    pub delta: f64,
    pub e2: f64,
    pub e3: f64,
}

/// Exponents from log-log regressions of m_k and of the running maximal
/// gap, floored at η₀ = 10⁻³ and δ = 0; constants are the sups.
pub fn fit_visit_growth(visits: &[usize]) -> Result<VisitGrowth> {
    if visits.len() < 3 {
        return Err(Error::EmptyRecord(format!("{} visits are too few to fit growth", visits.len())));
    }
    let lk: Vec<f64> = (1..=visits.len()).map(|k| (k as f64).ln()).collect();
    let lm: Vec<f64> = visits.iter().map(|&m| (m as f64).ln()).collect();
    let eta0 = linear_fit(&lk, &lm).map_or(0.0, |f| f.slope - 1.0).max(1e-3);
    let e2 = visits
        .iter()
        .enumerate()
        .map(|(k, &m)| m as f64 / ((k + 1) as f64).powf(1.0 + eta0))
        .fold(0.0, f64::max);
    let gaps: Vec<f64> = visits.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let mut run = 0.0f64;
    let lg: Vec<f64> = gaps
        .iter()
        .map(|&g| {
            run = run.max(g);
            run.ln()
        })
        .collect();
    let delta = linear_fit(&lk[..gaps.len()], &lg).map_or(0.0, |f| f.slope).max(0.0);
    let e3 = gaps
        .iter()
        .enumerate()
        .map(|(k, &g)| g / ((k + 1) as f64).powf(delta))
        .fold(1.0, f64::max);
    Ok(VisitGrowth { eta0, delta, e2, e3 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedIndex {
    /// m[0] = 0 followed by the visits.
    pub m: Vec<usize>,
    /// ℓ_j = m_{N_j} while available.
    pub ell: Vec<usize>,
    pub growth: VisitGrowth,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub d3: f64,
    pub d4: f64,
    pub eta: f64,
    pub max_l_gap: usize,
    /// max_n (n − ℓ_{L_n})/(D₃n^{(ε+δβ)/β}).
    pub tail_ratio: f64,
    /// Extremes of L_n against its two power bounds.
    pub l_lower_ok: bool,
    pub l_upper_ok: bool,
}

impl InducedIndex {
    /// L_n = max{k : ℓ_k ≤ n}.
    pub fn big_l(&self, n: usize) -> usize {
        self.ell.partition_point(|&l| l <= n).saturating_sub(1)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["j", "ell_j"])?;
        for (j, l) in self.ell.iter().enumerate() {
            wr.write_record([j.to_string(), l.to_string()])?;
        }
        wr.flush()
    }
}

/// Inducing indices and the gap constants; `e4` and `a` describe
/// ‖f_ℓ‖_α ≤ E₄ℓ^a.
pub fn induced_index(visits: &[usize], schedule: &BlockSchedule, e4: f64, a: f64) -> Result<InducedIndex> {
    let growth = fit_visit_growth(visits)?;
    let mut m = vec![0usize];
    m.extend_from_slice(visits);
    if m.windows(2).any(|w| w[1] <= w[0]) {
        return arg("visits must be strictly increasing and positive");
    }
    let ell: Vec<usize> = schedule
        .cum
        .iter()
        .take_while(|&&nj| (nj as usize) < m.len())
        .map(|&nj| m[nj as usize])
        .collect();
    if ell.len() < 2 {
        return Err(Error::Demand { required: schedule.cum[1] as usize + 1, available: m.len() });
    }
    let (beta, eps) = (schedule.beta, schedule.eps);
    let VisitGrowth { eta0, delta, e2, e3 } = growth;
    let q1 = 0.5 * e2.powf(-1.0 / (1.0 + eta0)) * schedule.a2.powf(-(beta - eps) / beta);
    let q2 = schedule.a1.powf(-(beta - eps) / beta);
    let r = (eps + delta * beta) / (beta - eps);
    let q3 = 2f64.powf(r) * e3 * schedule.a2p * schedule.a2.powf(delta);
    let d3 = q3 * q2.powf(r);
    let eta = (a * beta + eps + delta * beta) / beta;
    let d4 = d3 * e4;
    let mut idx = InducedIndex {
        m,
        ell,
        growth,
        q1,
        q2,
        q3,
        d3,
        d4,
        eta,
        max_l_gap: 0,
        tail_ratio: 0.0,
        l_lower_ok: true,
        l_upper_ok: true,
    };
    let last = *idx.ell.last().unwrap();
    let mut prev = idx.big_l(1);
    let tail_exp = (eps + delta * beta) / beta;
    for n in 1..=last {
        let ln = idx.big_l(n);
        idx.max_l_gap = idx.max_l_gap.max(ln - prev);
        prev = ln;
        let nf = n as f64;
        idx.tail_ratio = idx.tail_ratio.max((n - idx.ell[ln]) as f64 / (d3 * nf.powf(tail_exp)));
        if (ln as f64) < q1 * nf.powf((beta - eps) / (beta * (1.0 + eta0))) - 1.0 {
            idx.l_lower_ok = false;
        }
        if (ln as f64) > q2 * nf.powf((beta - eps) / beta) {
            idx.l_upper_ok = false;
        }
    }
    Ok(idx)
}

/// Probe functions for discrete operator norms: multi-scale sawtooths,
/// Fourier modes and tents on the circle, cell indicators on words.
pub fn probe_set(geom: &CellGeometry) -> Vec<Vec<f64>> {
    let n = geom.len();
    match geom {
        CellGeometry::Circle { .. } => {
            let levels = (n as f64).log2().floor().clamp(1.0, 8.0) as u32;
            let mut out: Vec<Vec<f64>> = circle_tests(n, levels).into_iter().map(|(_, v)| v).collect();
            let tau = 2.0 * std::f64::consts::PI;
            for k in 2..=4 {
                out.push((0..n).map(|i| (tau * k as f64 * geom.midpoint(i)).cos()).collect());
                out.push((0..n).map(|i| (tau * k as f64 * geom.midpoint(i)).sin()).collect());
            }
            for c in [0.1, 0.35, 0.6, 0.85] {
                out.push(
                    (0..n)
                        .map(|i| {
                            let d = (geom.midpoint(i) - c).abs();
                            (1.0 - 8.0 * d.min(1.0 - d)).max(0.0)
                        })
                        .collect(),
                );
            }
            out
        }
        CellGeometry::Words { .. } => {
            let mut out: Vec<Vec<f64>> = (0..n.min(64))
                .map(|i| (0..n).map(|k| f64::from(k == i)).collect())
                .collect();
            out.push((0..n).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect());
            out
        }
    }
}

/// sup over probes of ‖Ag − μ(g)·1‖_α/‖g‖_α.
pub fn rank_one_gap(
    apply: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync),
    mu: &[f64],
    src: &CellGeometry,
    tgt: &CellGeometry,
    alpha: f64,
) -> Result<f64> {
    let probes = probe_set(src);
    let gaps: Vec<Result<f64>> = par::map_slice(&probes, |g| {
        let norm = holder_norm(g, src, alpha, None);
        if norm == 0.0 {
            return Ok(0.0);
        }
        let m: f64 = g.iter().zip(mu).map(|(a, b)| a * b).sum();
        let out: Vec<f64> = apply(g)?.iter().map(|v| v - m).collect();
        Ok(holder_norm(&out, tgt, alpha, None) / norm)
    });
    gaps.into_iter().try_fold(0.0f64, |acc, g| Ok(acc.max(g?)))
}

/// Fits C₁ in ‖L_{m_j}^{n} − μ‖_α ≤ C₁(1+j^ε)n^{−β} (inducing steps counted
/// in visits) as the sup over j < j_fit, n ≤ n_fit; at least 1.
#[allow(clippy::too_many_arguments)]
pub fn fit_decay_constant(
    window: &CocycleWindow,
    triplet: &RPFTriplet,
    base: i64,
    visits: &[usize],
    beta: f64,
    eps: f64,
    alpha: f64,
    j_fit: usize,
    n_fit: usize,
) -> Result<f64> {
    let mut m = vec![0usize];
    m.extend_from_slice(visits);
    if m.len() < j_fit + n_fit + 1 {
        return Err(Error::Demand { required: j_fit + n_fit + 1, available: m.len() });
    }
    require_normalized(window)?;
    let rows: Vec<Result<f64>> = par::map_range(j_fit, |j| {
        let from = base + m[j] as i64;
        let mu = triplet.mu_at(from)?;
        let src = window.geometry(from)?.clone();
        let mut best = 0.0f64;
        for n in 1..=n_fit {
            let to = base + m[j + n] as i64;
            let steps = (to - from) as usize;
            let tgt = window.geometry(to)?.clone();
            let gap = rank_one_gap(&|g: &[f64]| window.push_re(from, steps, g), &mu, &src, &tgt, alpha)?;
            best = best.max(gap * (n as f64).powf(beta) / (1.0 + (j as f64).powf(eps)));
        }
        Ok(best)
    });
    rows.into_iter().try_fold(1.0f64, |acc, r| Ok(acc.max(r?)))
}

fn require_normalized(window: &CocycleWindow) -> Result<()> {
    if !window.is_normalized() {
        return arg("block constructions need the normalized window");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCocycle {
    pub base: i64,
    pub eps0: f64,
    pub alpha: f64,
    pub schedule: BlockSchedule,
    pub index: InducedIndex,
    /// 𝒜_j = L_{ℓ_j}^{ℓ_{j+1}−ℓ_j}, j < count.
    pub plain: Vec<OperatorMatrix>,
    /// μ_{ℓ_j}, j ≤ count.
    pub mus: Vec<Vec<f64>>,
    pub geoms: Vec<CellGeometry>,
    /// decay[j][n−1] = ‖𝒜_j^n − μ_{ℓ_j}‖_α for n ≤ 5.
    pub decay: Vec<Vec<f64>>,
}

impl BlockCocycle {
    pub fn count(&self) -> usize {
        self.plain.len()
    }

    /// ‖𝒜_j^n − μ‖ ≤ ε₀ⁿ at every tabulated (j, n).
    pub fn eps0_contraction_holds(&self) -> bool {
        self.decay
            .iter()
            .all(|row| row.iter().enumerate().all(|(k, d)| *d <= self.eps0.powi(k as i32 + 1)))
    }

    pub fn worst_eps0_ratio(&self) -> f64 {
        self.decay
            .iter()
            .flat_map(|row| row.iter().enumerate().map(|(k, d)| d / self.eps0.powi(k as i32 + 1)))
            .fold(0.0, f64::max)
    }

    pub fn block_start(&self, j: usize) -> i64 {
        self.base + self.index.ell[j] as i64
    }

    pub fn block_len(&self, j: usize) -> usize {
        self.index.ell[j + 1] - self.index.ell[j]
    }
}

/// Composes the block operators over the normalized window from `base`
/// (visits are relative to `base`) and re-verifies the ε₀-contraction.
#[allow(clippy::too_many_arguments)]
pub fn induce(
    window: &CocycleWindow,
    alpha: f64,
    triplet: &RPFTriplet,
    base: i64,
    visits: &VisitRecord,
    schedule: &BlockSchedule,
    e4: f64,
    a: f64,
    min_blocks: usize,
) -> Result<BlockCocycle> {
    require_normalized(window)?;
    let index = induced_index(&visits.visit_indices, schedule, e4, a)?;
    let avail = (window.end() - base).max(0) as usize;
    let count = index.ell.iter().skip(1).take_while(|&&l| l <= avail).count();
    if count < min_blocks.max(1) {
        let need = index.ell.get(min_blocks.max(1)).copied().unwrap_or(usize::MAX);
        return Err(Error::Demand { required: need, available: avail });
    }
    let plain: Vec<Result<OperatorMatrix>> = par::map_range(count, |j| {
        let from = base + index.ell[j] as i64;
        window.compose(from, index.ell[j + 1] - index.ell[j])
    });
    let plain: Vec<OperatorMatrix> = plain.into_iter().collect::<Result<_>>()?;
    let mut mus = Vec::with_capacity(count + 1);
    let mut geoms = Vec::with_capacity(count + 1);
    for j in 0..=count {
        let at = base + index.ell[j] as i64;
        mus.push(triplet.mu_at(at)?);
        geoms.push(window.geometry(at)?.clone());
    }
    let decay: Vec<Result<Vec<f64>>> = par::map_range(count, |j| {
        let depth = 5.min(count - j);
        let mut row = Vec::with_capacity(depth);
        for n in 1..=depth {
            let apply = |g: &[f64]| -> Result<Vec<f64>> {
                let mut v = g.to_vec();
                for op in &plain[j..j + n] {
                    v = op.apply_re(&v);
                }
                Ok(v)
            };
            row.push(rank_one_gap(&apply, &mus[j], &geoms[j], &geoms[j + n], alpha)?);
        }
        Ok(row)
    });
    Ok(BlockCocycle {
        base,
        eps0: schedule.eps0,
        alpha,
        schedule: schedule.clone(),
        index,
        plain,
        mus,
        geoms,
        decay: decay.into_iter().collect::<Result<_>>()?,
    })
}

/// 𝒜_{J,j,z}: twisted blocks for j ≤ J (from the normalized twisted
/// window), plain afterwards.
pub fn joined_operators(bc: &BlockCocycle, twisted: &CocycleWindow, j_cut: usize) -> Result<Vec<OperatorMatrix>> {
    if !twisted.is_normalized() {
        return arg("the twisted window must carry the base normalization");
    }
    let upto = (j_cut + 1).min(bc.count());
    let tw: Vec<Result<OperatorMatrix>> = par::map_range(upto, |j| twisted.compose(bc.block_start(j), bc.block_len(j)));
    let mut out: Vec<OperatorMatrix> = tw.into_iter().collect::<Result<_>>()?;
    out.extend(bc.plain[upto..].iter().cloned());
    Ok(out)
}

/// Growth constants entering the twisted-domain radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConstants {
    pub a: f64,
    pub e4: f64,
    pub kappa: f64,
    pub a0: f64,
    pub e6: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub e5: f64,
    pub e9: f64,
    pub c_eps0: f64,
    /// Set when E₆ is so large that the decay model fits poorly.
    pub poor_gamma_fit: bool,
}

impl BlockConstants {
    /// δ_J = ε₀·C_{ε₀}⁻¹·min(E₅⁻¹, E₉⁻¹)·(J+1)^{−ζ₁−ζ₂}.
    pub fn radius(&self, eps0: f64, j_cut: usize) -> f64 {
        eps0 / self.c_eps0 * (1.0 / self.e5).min(1.0 / self.e9) * ((j_cut + 1) as f64).powf(-self.zeta1 - self.zeta2)
    }
}

/// E₆ = sup_{s,d} ∏_{k=s}^{s+d−1}γ_k^{−α}/(s^κ d^{−a₀}) over s + d ≤ span + 1
/// (s counted from 1 after `base`).
pub fn gamma_decay_constant(system: &FiberedSystem, path: &EnvPath, base: i64, span: usize, kappa: f64, a0: f64) -> Result<f64> {
    let alpha = system.alpha;
    let logs: Vec<f64> = (1..=span as i64)
        .map(|k| Ok(-alpha * system.states[path.at(base + k)?].gamma.ln()))
        .collect::<Result<_>>()?;
    let mut best = 0.0f64;
    for s in 1..=span {
        let mut acc = 0.0;
        for d in 1..=span + 1 - s {
            acc += logs[s + d - 2];
            let v = (acc - kappa * (s as f64).ln() + a0 * (d as f64).ln()).exp();
            best = best.max(v);
        }
    }
    Ok(best)
}

/// Measures E₅ from Σ‖f‖∞ over each block and E₉ from probe norms of
/// 𝒜_{j,z} − 𝒜_j at the real twist `z_probe`.
#[allow(clippy::too_many_arguments)]
pub fn measure_constants(
    system: &FiberedSystem,
    path: &EnvPath,
    bc: &BlockCocycle,
    probe_window: &CocycleWindow,
    observable: &RandomFunction,
    kappa: f64,
    a0: f64,
    z_probe: f64,
) -> Result<BlockConstants> {
    if !(kappa > 0.0 && kappa < 1.0 && a0 > 1.0) {
        return arg("decay model needs 0 < κ < 1 and a₀ > 1");
    }
    let a = 0.0;
    let mut e4: f64 = 0.0;
    for s in 0..system.state_count() {
        let b = observable.bounds(system, s);
        e4 = e4.max(b.sup_norm + b.holder_seminorm);
    }
    let g = bc.index.growth;
    let (beta, eps) = (bc.schedule.beta, bc.schedule.eps);
    let zeta1 = (beta * (a * (1.0 + g.eta0) + g.delta) + eps) / (beta - eps);
    let zeta2 = (a + kappa) * beta * (1.0 + g.eta0) / (beta - eps);
    let mut e5: f64 = 0.0;
    for j in 0..bc.count() {
        let mut u = 0.0;
        for k in 0..bc.block_len(j) as i64 {
            u += observable.bounds(system, path.at(bc.block_start(j) + k)?).sup_norm;
        }
        e5 = e5.max(u / ((j + 1) as f64).powf(zeta1));
    }
    let e5 = e5.max(1e-12);
    let span = bc.index.ell.last().copied().unwrap_or(1).clamp(1, 256);
    let e6 = gamma_decay_constant(system, path, bc.base, span, kappa, a0)?;
    let z = Complex64::new(z_probe, 0.0);
    let ops = joined_operators(bc, probe_window, bc.count())?;
    let rows: Vec<Result<f64>> = par::map_range(bc.count(), |j| {
        let probes = probe_set(&bc.geoms[j]);
        let mut worst = 0.0f64;
        for p in &probes {
            let norm = holder_norm(p, &bc.geoms[j], bc.alpha, None);
            if norm == 0.0 {
                continue;
            }
            let pc: Vec<Complex64> = p.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            let a = ops[j].apply(&pc);
            let b = bc.plain[j].apply_re(p);
            let d: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            worst = worst.max(holder_norm_c(&d, &bc.geoms[j + 1], bc.alpha, None) / norm);
        }
        let jf = j as f64;
        Ok(worst / (z.norm() * (e5 * z.norm() * jf.powf(zeta1)).exp() * (jf + 1.0).powf(zeta1 + zeta2)))
    });
    let e9 = rows.into_iter().try_fold(1e-12f64, |acc, r| Ok(acc.max(r?)))?;
    Ok(BlockConstants {
        a,
        e4,
        kappa,
        a0,
        e6,
        zeta1,
        zeta2,
        e5,
        e9,
        c_eps0: 1.0,
        poor_gamma_fit: !(e6.is_finite() && e6 < 1e6),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTriplet {
    pub z: Complex64,
    pub lambdas: Vec<Complex64>,
    pub h: Vec<Vec<Complex64>>,
    pub nu: Vec<Vec<Complex64>>,
    /// max_j max(|ν_j(1) − 1|, |ν_j(h_j) − 1|).
    pub normalization_residual: f64,
    /// max_j ‖𝒜_j h_j − λ_j h_{j+1}‖∞.
    pub eigen_residual: f64,
    /// max_j ‖𝒜_j^*ν_{j+1} − λ_j ν_j‖₁.
    pub dual_residual: f64,
    /// ν_0 from two terminal starts, total variation apart.
    pub nu_convergence: f64,
    /// (n, ‖λ_{0,n}⁻¹𝒜_0^n − ν_0⊗h_n‖_α) above the decay floor.
    pub decay: Vec<(usize, f64)>,
    pub ratio: f64,
    pub r0: f64,
}

fn csum(v: &[Complex64]) -> Complex64 {
    v.iter().sum()
}

fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Triplet of the joined sequence anchored at h₀ ≡ 1: ν_j ∝ 𝒜_j^*ν_{j+1}
/// with ν_j(1) = 1 from the terminal μ, λ_j = ν_{j+1}(𝒜_j1)·… chosen so
/// that 𝒜_j^*ν_{j+1} = λ_jν_j, and h_{j+1} = 𝒜_jh_j/λ_j.
pub fn block_triplet(z: Complex64, ops: &[OperatorMatrix], mus: &[Vec<f64>], geoms: &[CellGeometry], alpha: f64, n_decay: usize) -> Result<BlockTriplet> {
    let k = ops.len();
    if k == 0 || mus.len() != k + 1 || geoms.len() != k + 1 {
        return Err(Error::Dimension("need one measure and geometry per block boundary".into()));
    }
    let c = |v: &[f64]| -> Vec<Complex64> { v.iter().map(|&x| Complex64::new(x, 0.0)).collect() };
    let backward = |terminal: Vec<Complex64>| -> Result<(Vec<Vec<Complex64>>, Vec<Complex64>)> {
        let mut nus = vec![Vec::new(); k + 1];
        let mut lams = vec![Complex64::new(0.0, 0.0); k];
        nus[k] = terminal;
        for j in (0..k).rev() {
            let raw = ops[j].apply_adjoint(&nus[j + 1]);
            let lam = csum(&raw);
            if !(lam.norm() > 1e-12) || !lam.is_finite() {
                return Err(Error::Convergence {
                    message: format!("λ vanished at block {j}"),
                    trace: vec![lam.norm()],
                });
            }
            lams[j] = lam;
            nus[j] = raw.into_iter().map(|v| v / lam).collect();
        }
        Ok((nus, lams))
    };
    let (nu, lambdas) = backward(c(&mus[k]))?;
    let dk = geoms[k].len();
    let (nu_alt, _) = backward(vec![Complex64::new(1.0 / dk as f64, 0.0); dk])?;
    let nu_convergence: f64 = nu[0].iter().zip(&nu_alt[0]).map(|(a, b)| (a - b).norm()).sum();
    let mut h = vec![vec![Complex64::new(1.0, 0.0); geoms[0].len()]];
    for j in 0..k {
        let next: Vec<Complex64> = ops[j].apply(&h[j]).into_iter().map(|v| v / lambdas[j]).collect();
        h.push(next);
    }
    let mut norm_res: f64 = 0.0;
    let mut eig: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for j in 0..=k {
        norm_res = norm_res.max((csum(&nu[j]) - 1.0).norm()).max((cdot(&nu[j], &h[j]) - 1.0).norm());
        if j < k {
            let ah = ops[j].apply(&h[j]);
            eig = eig.max(ah.iter().zip(&h[j + 1]).map(|(a, b)| (a - lambdas[j] * b).norm()).fold(0.0, f64::max));
            let an = ops[j].apply_adjoint(&nu[j + 1]);
            dual = dual.max(an.iter().zip(&nu[j]).map(|(a, b)| (a - lambdas[j] * b).norm()).sum());
        }
    }
    let probes = probe_set(&geoms[0]);
    let depth = n_decay.min(k);
    let mut decay = Vec::with_capacity(depth);
    let mut vs: Vec<Vec<Complex64>> = probes.iter().map(|p| c(p)).collect();
    let norms: Vec<f64> = probes.iter().map(|p| holder_norm(p, &geoms[0], alpha, None)).collect();
    let weights: Vec<Complex64> = vs.iter().map(|p| cdot(&nu[0], p)).collect();
    let mut lam_prod = Complex64::new(1.0, 0.0);
    for n in 1..=depth {
        lam_prod *= lambdas[n - 1];
        let mut worst = 0.0f64;
        for (i, v) in vs.iter_mut().enumerate() {
            *v = ops[n - 1].apply(v);
            if norms[i] == 0.0 {
                continue;
            }
            let d: Vec<Complex64> = v.iter().zip(&h[n]).map(|(x, hn)| x / lam_prod - weights[i] * hn).collect();
            worst = worst.max(holder_norm_c(&d, &geoms[n], alpha, None) / norms[i]);
        }
        decay.push((n, worst));
    }
    let usable: Vec<(usize, f64)> = decay.iter().cloned().filter(|(_, d)| *d > DECAY_FLOOR).collect();
    let ratio = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|(n, _)| *n as f64).collect();
        let y: Vec<f64> = usable.iter().map(|(_, d)| d.ln()).collect();
        linear_fit(&x, &y).map_or(f64::NAN, |f| f.slope.exp())
    } else if let Some(&(n, d)) = usable.first() {
        // next step already under the floor
        (DECAY_FLOOR / d).powf(1.0 / (n as f64 + 1.0)).max(d.powf(1.0 / n as f64)).min(1.0)
    } else {
        0.0
    };
    let r0 = decay
        .iter()
        .map(|(n, d)| if ratio > 0.0 { d / ratio.powi(*n as i32) } else { *d })
        .fold(0.0, f64::max);
    Ok(BlockTriplet {
        z,
        lambdas,
        h,
        nu,
        normalization_residual: norm_res,
        eigen_residual: eig,
        dual_residual: dual,
        nu_convergence,
        decay,
        ratio,
        r0,
    })
}

/// Complex z-grid: 0 plus `rays` points on circles of radius r and r/2.
pub fn z_grid(radius: f64, rays: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0)];
    for frac in [1.0, 0.5] {
        for k in 0..rays {
            out.push(Complex64::from_polar(radius * frac, 2.0 * std::f64::consts::PI * k as f64 / rays as f64));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRpfReport {
    pub j_cut: usize,
    pub radius: f64,
    pub constants: BlockConstants,
    pub triplets: Vec<BlockTriplet>,
    /// At z = 0: max |λ − 1|, ‖h − 1‖∞, ‖ν − μ‖₁ over blocks.
    pub z0_deviation: f64,
    pub max_normalization_residual: f64,
    pub max_ratio: f64,
    /// Central-difference λ₀′(0) against Σ_k μ(f) over block 0.
    pub derivative_error: f64,
}

impl BlockRpfReport {
    pub fn holds(&self, tol: f64, eps0: f64) -> bool {
        self.z0_deviation <= tol && self.max_normalization_residual <= tol && self.max_ratio <= 2.0 * eps0
    }
}

/// Builds joined triplets over the z-grid inside V_J and the z = 0 and
/// derivative consistency checks.
#[allow(clippy::too_many_arguments)]
pub fn block_rpf(
    system: &FiberedSystem,
    path: &EnvPath,
    potential: &RandomFunction,
    observable: &RandomFunction,
    window: &CocycleWindow,
    bc: &BlockCocycle,
    constants: &BlockConstants,
    j_cut: usize,
    rays: usize,
    n_decay: usize,
) -> Result<BlockRpfReport> {
    let radius = constants.radius(bc.eps0, j_cut);
    let grid = z_grid(radius, rays);
    let triplet_at = |z: Complex64| -> Result<BlockTriplet> {
        let ops = if z == Complex64::new(0.0, 0.0) {
            bc.plain.clone()
        } else {
            let tw = window.twisted(system, path, potential, observable, z)?;
            joined_operators(bc, &tw, j_cut)?
        };
        block_triplet(z, &ops, &bc.mus, &bc.geoms, bc.alpha, n_decay)
    };
    let triplets: Vec<BlockTriplet> = grid.iter().map(|&z| triplet_at(z)).collect::<Result<_>>()?;
    let t0 = &triplets[0];
    let mut dev: f64 = 0.0;
    for j in 0..=bc.count() {
        if j < bc.count() {
            dev = dev.max((t0.lambdas[j] - 1.0).norm());
        }
        dev = dev.max(t0.h[j].iter().map(|v| (v - 1.0).norm()).fold(0.0, f64::max));
        dev = dev.max(t0.nu[j].iter().zip(&bc.mus[j]).map(|(a, b)| (a - b).norm()).sum());
    }
    let step = radius / 8.0;
    let tp = triplet_at(Complex64::new(step, 0.0))?;
    let tm = triplet_at(Complex64::new(-step, 0.0))?;
    let fd = (tp.lambdas[0] - tm.lambdas[0]) / (2.0 * step);
    let mut oracle = 0.0;
    for k in 0..bc.block_len(0) as i64 {
        let at = bc.block_start(0) + k;
        let fv = window.sample_function(system, path, observable, at)?;
        let mu = bc_mu(window, bc, at)?;
        oracle += fv.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(BlockRpfReport {
        j_cut,
        radius,
        constants: *constants,
        max_normalization_residual: triplets.iter().map(|t| t.normalization_residual).fold(0.0, f64::max),
        max_ratio: triplets.iter().map(|t| t.ratio).fold(0.0, f64::max),
        triplets,
        z0_deviation: dev,
        derivative_error: (fd - oracle).norm(),
    })
}

/// μ at an arbitrary fiber of block 0, pushed forward from μ_{ℓ_0} with the
/// normalized adjoint identities (μ_{i+1}(Lg) = μ_i(g)).
fn bc_mu(window: &CocycleWindow, bc: &BlockCocycle, at: i64) -> Result<Vec<f64>> {
    // Pull the terminal block measure back to `at`.
    let end = bc.block_start(1);
    let mut nu = bc.mus[1].clone();
    let mut i = end;
    while i > at {
        nu = window.apply_adjoint_re(i - 1, &nu)?;
        i -= 1;
    }
    Ok(nu)
}

/// Burkholder-type constant used in the moment bound: (p − 1) for the
/// martingale part plus 4 for the coboundary and tail terms.
pub fn moment_constant(p: f64) -> f64 {
    p - 1.0 + 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub j: usize,
    pub n: usize,
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub e10: f64,
    pub e11: f64,
    pub e12: f64,
    pub zeta: f64,
    /// Relative standard error of the Monte Carlo p-th moment.
    pub rel_se: f64,
    /// rel_se ≤ 20%.
    pub stable: bool,
}

impl MomentCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// ‖S_{j,n}f − μ_j(S_{j,n}f)‖_{L^p} by Monte Carlo against
/// C·E₁₂(j+n)^ζ n^{1/2}, with E₀ = C₁ and D = 1.
#[allow(clippy::too_many_arguments)]
pub fn moment_bound_check(
    q: &crate::limits::Quenched,
    bc: &BlockCocycle,
    constants: &BlockConstants,
    j: usize,
    n: usize,
    p: f64,
    samples: usize,
    seed: u64,
) -> Result<MomentCheck> {
    if !(p > 2.0) {
        return arg(format!("p = {p} must exceed 2"));
    }
    let s = &bc.schedule;
    let idx = &bc.index;
    let g = idx.growth;
    let (beta, eps, a) = (s.beta, s.eps, constants.a);
    let z1 = beta * (eps + a) * (1.0 + g.eta0) / (beta - eps);
    let z2 = (beta * (a * (1.0 + g.eta0) + g.delta) + eps) / (beta - eps);
    let zeta = z1.max(z2);
    let growth = (a + eps) * (1.0 + g.eta0);
    let e10 = s.c1 * constants.e4 * g.e2.powf(growth) * s.a2.powf(growth);
    let e11 = idx.q2 * (g.e2 * s.a2).powf((beta - eps) / beta);
    let e12 = constants.e4 * idx.q3 * idx.q2.powf((eps + g.delta * beta) / (beta - eps))
        + idx.q2.powf(zeta) * (constants.e5 + e10)
        + e10 * (e11 * idx.q2).powf(z1);
    let (lhs, rel_se) = if q.observable.is_zero() {
        (0.0, 0.0)
    } else {
        crate::limits::centered_lp_norm(q, bc.base + j as i64, n, p, samples, seed)?
    };
    let constant = moment_constant(p);
    let rhs = constant * e12 * ((j + n) as f64).powf(zeta) * (n as f64).sqrt();
    Ok(MomentCheck { j, n, p, lhs, rhs, constant, e10, e11, e12, zeta, rel_se, stable: rel_se <= 0.2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_example_values() {
        let s = build_schedule(1.0, 2.0, 1.0, 0.1, 5).unwrap();
        assert_abs_diff_eq!(s.u0, 21.0);
        assert_eq!(&s.n[1..4], &[4, 9, 16]);
        assert_eq!(&s.cum[1..3], &[4, 13]);
        assert!(s.sandwich_holds());
        assert!(s.block_sandwich_holds());
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(build_schedule(1.0, 2.0, 2.0, 0.1, 5).is_err());
        assert!(build_schedule(1.0, 2.0, 1.0, 0.17, 5).is_err());
        assert!(build_schedule(0.5, 2.0, 1.0, 0.1, 5).is_err());
    }

    #[test]
    fn vanishing_eps_gives_linear_schedule() {
        let s = build_schedule(4.0, 2.0, 1e-12, 0.1, 50).unwrap();
        let n1 = (21.0f64 * 4.0).sqrt().floor() as u64;
        assert!(s.n[1..].iter().all(|&n| n == n1));
        assert_eq!(s.cum[50], 50 * n1);
    }

    #[test]
    fn blocks_partition_the_integers() {
        let s = build_schedule(4.0, 3.0, 1.5, 0.1, 200).unwrap();
        let mut next = 0;
        for j in 0..200 {
            let b = s.block(j);
            assert_eq!(b.start, next);
            next = b.end;
        }
    }

    #[test]
    fn even_visits_give_doubled_ells() {
        let s = build_schedule(1.0, 2.0, 1.0, 0.1, 6).unwrap();
        let visits: Vec<usize> = (1..=200).map(|k| 2 * k).collect();
        let idx = induced_index(&visits, &s, 1.0, 0.0).unwrap();
        for (j, l) in idx.ell.iter().enumerate() {
            assert_eq!(*l, 2 * s.cum[j] as usize);
        }
        for n in 0..idx.ell[3] {
            let expect = (0..idx.ell.len()).filter(|&k| 2 * s.cum[k] as usize <= n).max().unwrap();
            assert_eq!(idx.big_l(n), expect);
        }
        assert!(idx.max_l_gap <= 2);
        assert!(idx.tail_ratio <= 1.0);
        assert!(idx.l_upper_ok && idx.l_lower_ok);
    }

    #[test]
    fn block_triplet_on_identity_blocks() {
        let ops = vec![OperatorMatrix::identity(0, 4); 3];
        let mus = vec![vec![0.25; 4]; 4];
        let geoms = vec![CellGeometry::circle(4); 4];
        let t = block_triplet(Complex64::new(0.0, 0.0), &ops, &mus, &geoms, 1.0, 2).unwrap();
        assert!(t.normalization_residual < 1e-15);
        t.lambdas.iter().for_each(|l| assert_abs_diff_eq!(l.re, 1.0, epsilon = 1e-15));
    }
}
