//! Analytic model blocks evaluated path by path.
//!
//! Every path has length `T`; values before date 0 and from date `T` on are
//! steady-state zeros.

use serde::Serialize;

use crate::calibration::{
    CountryCalibration, Indexation, PolicyRegime, Sector, SectorParams, Transfer, WorkerGroup,
};
use crate::error::{Error, Result};
use crate::suffstats::kappa_group;

/// `x_t - x_{t-1}` with `x_{-1} = 0`.
pub fn diff(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| x[t] - if t > 0 { x[t - 1] } else { 0.0 })
        .collect()
}

/// `x_{t-1}` with `x_{-1} = 0`.
pub fn lag(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| if t > 0 { x[t - 1] } else { 0.0 })
        .collect()
}

/// `x_{t+1}` with `x_T = 0`.
pub fn lead(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| if t + 1 < x.len() { x[t + 1] } else { 0.0 })
        .collect()
}

/// Running sum: the level path of a sequence of changes.
pub fn cumsum(x: &[f64]) -> Vec<f64> {
    x.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

fn same_len(paths: &[&[f64]]) -> Result<usize> {
    let n = paths[0].len();
    if paths.iter().any(|p| p.len() != n) {
        return Err(Error::Invalid("path lengths differ".into()));
    }
    Ok(n)
}

/// Price-stickiness slope of a sector Phillips curve; `calvo_reset` is the
/// per-quarter reset probability.
pub fn kappa_price(calvo_reset: f64, beta: f64) -> f64 {
    let stick = 1.0 - calvo_reset;
    (1.0 - stick) * (1.0 - beta * stick) / stick
}

/// Wage Phillips curve residual of one type:
/// `π^w_t − βπ^w_{t+1} − κ_g ω̂_t − θ_g(1+φ_g) π^exp_t`.
pub fn type_wage_pc_residual(
    group: &WorkerGroup,
    beta: f64,
    pi_w: &[f64],
    pi_exp: &[f64],
    omega_hat: &[f64],
) -> Result<Vec<f64>> {
    same_len(&[pi_w, pi_exp, omega_hat])?;
    let kappa = kappa_group(group.theta, beta);
    let next = lead(pi_w);
    Ok((0..pi_w.len())
        .map(|t| {
            pi_w[t]
                - beta * next[t]
                - kappa * omega_hat[t]
                - group.theta * (1.0 + group.phi) * pi_exp[t]
        })
        .collect())
}

/// Aggregate wage Phillips curve split into its components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WageDecomposition {
    pub residual: Vec<f64>,
    /// Σ η π^w
    pub pi_w: Vec<f64>,
    pub gap_term: Vec<f64>,
    /// θ̄ π̄, with θ weighted by (1+φ)
    pub level_term: Vec<f64>,
    /// θ̄ Ω, with θ weighted by (1+φ)
    pub wedge_term: Vec<f64>,
    pub rwei: Vec<f64>,
    pub pi_bar: Vec<f64>,
}

/// Population-weighted aggregation of type wage Phillips curves with the
/// level/wedge split of the experienced-inflation term.
pub fn aggregate_wage_pc(
    country: &CountryCalibration,
    beta: f64,
    pi_w: &[Vec<f64>],
    pi_exp: &[Vec<f64>],
    omega_hat: &[f64],
) -> Result<WageDecomposition> {
    let t_len = omega_hat.len();
    let groups = &country.groups;
    if pi_w.len() != groups.len() || pi_exp.len() != groups.len() {
        return Err(Error::GroupCount {
            expected: groups.len(),
            found: pi_w.len().min(pi_exp.len()),
        });
    }
    let mut residual = vec![0.0; t_len];
    let mut agg = vec![0.0; t_len];
    for (g, (pw, pe)) in groups.iter().zip(pi_w.iter().zip(pi_exp)) {
        let r = type_wage_pc_residual(g, beta, pw, pe, omega_hat)?;
        for t in 0..t_len {
            residual[t] += g.eta * r[t];
            agg[t] += g.eta * pw[t];
        }
    }
    let eff: Vec<f64> = groups.iter().map(|g| g.theta * (1.0 + g.phi)).collect();
    let theta_bar: f64 = groups.iter().zip(&eff).map(|(g, e)| g.eta * e).sum();
    let kappa: f64 = country.mean_by(|g| kappa_group(g.theta, beta));
    let mut level = vec![0.0; t_len];
    let mut wedge = vec![0.0; t_len];
    let mut rwei = vec![0.0; t_len];
    let mut pi_bar = vec![0.0; t_len];
    for t in 0..t_len {
        pi_bar[t] = groups.iter().zip(pi_exp).map(|(g, p)| g.eta * p[t]).sum();
        rwei[t] = groups
            .iter()
            .zip(eff.iter().zip(pi_exp))
            .map(|(g, (e, p))| g.eta * e * p[t])
            .sum::<f64>()
            / theta_bar;
        level[t] = theta_bar * pi_bar[t];
        wedge[t] = theta_bar * (rwei[t] - pi_bar[t]);
    }
    Ok(WageDecomposition {
        residual,
        pi_w: agg,
        gap_term: omega_hat.iter().map(|w| kappa * w).collect(),
        level_term: level,
        wedge_term: wedge,
        rwei,
        pi_bar,
    })
}

/// Expected inflation of a type: common signal plus its own experienced
/// inflation scaled by the sensitivity `phi`.
pub fn expectations(pi_bar: &[f64], pi_exp: &[f64], phi: f64) -> Result<Vec<f64>> {
    same_len(&[pi_bar, pi_exp])?;
    Ok(pi_bar
        .iter()
        .zip(pi_exp)
        .map(|(b, e)| b + phi * e)
        .collect())
}

/// Salient experienced inflation of one type from item price changes and the
/// change in its net transfer.
pub fn experienced_path(
    group: &WorkerGroup,
    lambda_e: f64,
    dpe: &[f64],
    dpd: &[f64],
    dps: &[f64],
    dtransfer: &[f64],
) -> Vec<f64> {
    (0..dpe.len())
        .map(|t| {
            lambda_e * group.alpha_e * dpe[t] + group.alpha_d * dpd[t] + group.alpha_s * dps[t]
                - dtransfer[t]
        })
        .collect()
}

/// Sectoral price Phillips curve residual
/// `π_t − βπ_{t+1} − κ^p mc_t − cost_push_t`.
#[allow(clippy::too_many_arguments)]
pub fn sector_price_residual(
    sector: &SectorParams,
    beta: f64,
    own: Sector,
    wage: &[f64],
    p_services: &[f64],
    p_goods: &[f64],
    p_e: &[f64],
    cost_push: &[f64],
) -> Result<Vec<f64>> {
    same_len(&[wage, p_services, p_goods, p_e, cost_push])?;
    let kp = kappa_price(sector.calvo_reset, beta);
    let p_own = match own {
        Sector::Services => p_services,
        Sector::Goods => p_goods,
    };
    let pi = diff(p_own);
    let pi_next = lead(&pi);
    let a = sector.labor_share;
    let xe = sector.essentials_input_share;
    Ok((0..wage.len())
        .map(|t| {
            let domestic =
                sector.io_weights.services * p_services[t] + sector.io_weights.goods * p_goods[t];
            let cost = a * wage[t] + (1.0 - a) * ((1.0 - xe) * domestic + xe * p_e[t]);
            pi[t] - beta * pi_next[t] - kp * (cost - p_own[t]) - cost_push[t]
        })
        .collect())
}

/// Euler-equation residual `x_t − x_{t+1} + σ^{-1}(i_t − π_{t+1} − r^n_t)`.
pub fn is_residual(
    sigma: f64,
    x: &[f64],
    i: &[f64],
    pi_next: &[f64],
    rn: &[f64],
) -> Result<Vec<f64>> {
    same_len(&[x, i, pi_next, rn])?;
    let xn = lead(x);
    Ok((0..x.len())
        .map(|t| x[t] - xn[t] + (i[t] - pi_next[t] - rn[t]) / sigma)
        .collect())
}

/// Union policy rate from union core inflation and output gap.
pub fn taylor_rate(
    policy: &PolicyRegime,
    pi_core: &[f64],
    x: &[f64],
    r_star: f64,
) -> Result<Vec<f64>> {
    same_len(&[pi_core, x, &policy.taylor_pi_path])?;
    Ok((0..x.len())
        .map(|t| r_star + policy.taylor_pi_path[t] * pi_core[t] + policy.taylor_y * x[t])
        .collect())
}

/// Log deviation of export demand facing `own` relative to its partners'
/// goods prices.
pub fn trade_demand(eps: f64, shares: &[f64], own: &[f64], partners: &[&[f64]]) -> Vec<f64> {
    (0..own.len())
        .map(|t| {
            -eps * shares
                .iter()
                .zip(partners)
                .map(|(w, p)| w * (own[t] - p[t]))
                .sum::<f64>()
        })
        .collect()
}

/// Indexation adjustments of one type's wage Phillips curve.
///
/// Returns the path subtracted from wage inflation (indexed component) and
/// the effective experienced-inflation forcing.
pub fn apply_indexation(
    mode: Indexation,
    own_exp: &[f64],
    pi_bar: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let gamma = mode.gamma();
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::OutOfRange {
            entity: "indexation".into(),
            field: "gamma",
            value: gamma,
            expected: "[0,1]",
        });
    }
    Ok(match mode {
        Indexation::None => (vec![0.0; own_exp.len()], own_exp.to_vec()),
        Indexation::Cpi { .. } => (
            lag(pi_bar).iter().map(|v| gamma * v).collect(),
            own_exp
                .iter()
                .zip(pi_bar)
                .map(|(e, b)| e - gamma * b)
                .collect(),
        ),
        Indexation::TypeSpecific { .. } => (
            lag(own_exp).iter().map(|v| gamma * v).collect(),
            own_exp.iter().map(|e| (1.0 - gamma) * e).collect(),
        ),
    })
}

/// Asymmetric catch-up added to the reset wage: `b′ max(p_g − w_{g,t−1}, 0)`.
pub fn catch_up(p_g: &[f64], w_lag: &[f64], b: f64) -> Vec<f64> {
    p_g.iter()
        .zip(w_lag)
        .map(|(p, w)| b * (p - w).max(0.0))
        .collect()
}

/// Reset wage with the nonlinear catch-up term.
pub fn nonlinear_reset(w_lin: &[f64], p_g: &[f64], w_lag: &[f64], b: f64) -> Result<Vec<f64>> {
    same_len(&[w_lin, p_g, w_lag])?;
    Ok(w_lin
        .iter()
        .zip(catch_up(p_g, w_lag, b))
        .map(|(l, c)| l + c)
        .collect())
}

/// Fiscal paths of one country under a policy regime.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiscalPaths {
    /// Gross transfer level per group (fraction of steady-state income)
    pub gross: Vec<Vec<f64>>,
    /// Lump-sum tax level, equal across groups
    pub tax: Vec<f64>,
    /// Net transfer level per group
    pub net: Vec<Vec<f64>>,
    /// Shift in the log consumer price of essentials
    pub essentials_shift: Vec<f64>,
}

/// Transfers, balanced-budget taxes and the subsidy shift of the consumer
/// essentials price. Transfers and the subsidy start at quarter 0 and stay.
pub fn fiscal_apply(
    policy: &PolicyRegime,
    country: &CountryCalibration,
    horizon: usize,
) -> Result<FiscalPaths> {
    let g = country.groups.len();
    let mut level = vec![0.0; g];
    match &policy.transfer {
        Transfer::None => {}
        Transfer::Uniform { amount } => level.iter_mut().for_each(|v| *v = *amount),
        Transfer::Targeted { group, amount } => {
            let (k, _) = country.group(group).ok_or_else(|| Error::Unknown {
                kind: "transfer group",
                name: format!("{} in {}", group, country.code),
            })?;
            level[k] = *amount;
        }
    }
    let tax: f64 = country
        .groups
        .iter()
        .zip(&level)
        .map(|(gr, l)| gr.eta * l)
        .sum();
    let shift = (1.0 - policy.subsidy).ln();
    Ok(FiscalPaths {
        gross: level.iter().map(|l| vec![*l; horizon]).collect(),
        tax: vec![tax; horizon],
        net: level.iter().map(|l| vec![l - tax; horizon]).collect(),
        essentials_shift: vec![shift; horizon],
    })
}
