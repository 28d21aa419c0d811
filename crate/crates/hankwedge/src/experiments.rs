//! Paired heterogeneous/standard-twin experiments and their reports.
//!
//! Every experiment is a pure function of the runner (calibration, base
//! scenario, demand block, solver settings). Gaps are the heterogeneous
//! minus the standard-twin cumulative core inflation over `window`
//! quarters, in percentage points.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    read_csv, CommonParams, CountryCalibration, Indexation, Sector, ShockScenario, Transfer, Union,
    WorkerGroup, QUARTERS_PER_YEAR,
};
use crate::error::{Error, Result};
use crate::household::{HouseholdJacobians, JacobianCache};
use crate::solver::{solve, standard_twin, Demand, Model, SolverSettings, TransitionResult};
use crate::suffstats::{mwsi, reset_weights, wedge, PriceChange};

/// Quarters summed in cumulative statistics.
pub const WINDOW: usize = 40;

const PP: f64 = 100.0;

/// Quarters over which the wedge persistence is measured.
const RHO_WINDOW: std::ops::RangeInclusive<usize> = 1..=20;

/// HANK demand with household Jacobians at unit steady-state wage.
pub fn hank_demand(common: &CommonParams, cache: Option<&JacobianCache>) -> Result<Demand> {
    let j = HouseholdJacobians::build(common, 1.0, common.horizon_t, cache)?;
    Ok(Demand::Hank(Arc::new(j)))
}

/// A heterogeneous solution and its standard twin under the same scenario.
#[derive(Debug, Clone)]
pub struct Pair {
    pub het: TransitionResult,
    pub std: TransitionResult,
}

impl Pair {
    /// Cumulative core gap of country `c` in percentage points.
    pub fn gap(&self, c: usize, window: usize) -> f64 {
        PP * (self.het.countries[c].cumulative_core(window)
            - self.std.countries[c].cumulative_core(window))
    }

    pub fn union_gap(&self, window: usize) -> f64 {
        PP * (self.het.union_cumulative_core(window) - self.std.union_cumulative_core(window))
    }
}

/// Element of largest magnitude, keeping its sign.
pub fn extreme(path: &[f64]) -> f64 {
    path.iter()
        .copied()
        .fold(0.0, |acc, v| if v.abs() > acc.abs() { v } else { acc })
}

fn peak(path: &[f64]) -> f64 {
    path.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// First-order autocorrelation coefficient of `path` over quarters 1–20,
/// fitted through the origin.
pub fn persistence(path: &[f64]) -> f64 {
    let (num, den) = RHO_WINDOW
        .filter(|t| *t < path.len())
        .fold((0.0, 0.0), |(n, d), t| {
            (n + path[t] * path[t - 1], d + path[t - 1] * path[t - 1])
        });
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

/// Run `f` over `items` on up to `threads` scoped threads, preserving order.
fn par_map<T, R, F>(threads: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("experiment worker panicked")?);
        }
        Ok(out)
    })
}

// ------------------------------------------------------------ calibrations

/// η-weighted pooling of groups. Each part becomes one group labelled with
/// its members joined by `+`, working in the sector that employs most of them.
pub fn pool_groups(
    country: &CountryCalibration,
    partition: &[&[usize]],
) -> Result<CountryCalibration> {
    let mut seen = vec![false; country.groups.len()];
    for k in partition.iter().flat_map(|p| p.iter()) {
        match seen.get_mut(*k) {
            Some(s) if !*s => *s = true,
            _ => return Err(Error::Invalid(format!("bad group partition at index {k}"))),
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Invalid(
            "group partition does not cover every group".into(),
        ));
    }
    let mut c = country.clone();
    c.groups = partition
        .iter()
        .map(|part| {
            let members: Vec<&WorkerGroup> = part.iter().map(|k| &country.groups[*k]).collect();
            let eta: f64 = members.iter().map(|g| g.eta).sum();
            let avg = |f: fn(&WorkerGroup) -> f64| {
                members.iter().map(|g| g.eta * f(g)).sum::<f64>() / eta
            };
            let in_goods: f64 = members
                .iter()
                .filter(|g| g.sector == Sector::Goods)
                .map(|g| g.eta)
                .sum();
            let sector = if in_goods > eta - in_goods {
                Sector::Goods
            } else {
                Sector::Services
            };
            let mpc = members
                .iter()
                .map(|g| g.mpc.map(|m| g.eta * m))
                .sum::<Option<f64>>()
                .map(|m| m / eta);
            WorkerGroup {
                label: members
                    .iter()
                    .map(|g| g.label.as_str())
                    .collect::<Vec<_>>()
                    .join("+"),
                eta,
                theta: avg(|g| g.theta),
                alpha_e: avg(|g| g.alpha_e),
                alpha_d: avg(|g| g.alpha_d),
                alpha_s: avg(|g| g.alpha_s),
                sector,
                phi: avg(|g| g.phi),
                mpc,
            }
        })
        .collect();
    Ok(c)
}

/// Named robustness variants of a five-group union: catch-up strength,
/// expectation amplifier, essentials salience and the number of groups.
pub fn robustness_configs(union: &Union) -> Result<Vec<(String, Union)>> {
    let mut out = vec![("baseline".to_string(), union.clone())];
    for b in [0.0, 0.3] {
        let mut u = union.clone();
        u.common.b_catchup = b;
        out.push((format!("b_catchup={b}"), u));
    }
    for phi in [0.0, 0.5] {
        let mut u = union.clone();
        u.common.phi_bar = phi;
        u.countries
            .iter_mut()
            .flat_map(|c| c.groups.iter_mut())
            .for_each(|g| g.phi = phi);
        out.push((format!("phi_bar={phi}"), u));
    }
    for l in [1.0, 1.5] {
        let mut u = union.clone();
        u.common.lambda_e = l;
        out.push((format!("lambda_e={l}"), u));
    }
    let two: [&[usize]; 2] = [&[0, 1], &[2, 3, 4]];
    let three: [&[usize]; 3] = [&[0, 1], &[2], &[3, 4]];
    for (name, part) in [("groups=2", &two[..]), ("groups=3", &three[..])] {
        let mut u = union.clone();
        u.countries = union
            .countries
            .iter()
            .map(|c| {
                if c.groups.len() != 5 {
                    return Err(Error::GroupCount {
                        expected: 5,
                        found: c.groups.len(),
                    });
                }
                pool_groups(c, part)
            })
            .collect::<Result<_>>()?;
        out.push((name.to_string(), u));
    }
    Ok(out)
}

fn single_country(common: &CommonParams, mut c: CountryCalibration) -> Union {
    c.gdp_weight = 1.0;
    c.trade_shares = [(c.code.clone(), 1.0)].into_iter().collect();
    Union {
        common: common.clone(),
        countries: vec![c],
    }
}

/// Every group consumes the population-average basket.
fn uniform_baskets(c: &mut CountryCalibration) {
    let (e, d, s) = (
        c.mean_by(|g| g.alpha_e),
        c.mean_by(|g| g.alpha_d),
        c.mean_by(|g| g.alpha_s),
    );
    for g in &mut c.groups {
        g.alpha_e = e;
        g.alpha_d = d;
        g.alpha_s = s;
    }
}

fn uniform_resets(c: &mut CountryCalibration) {
    let theta = c.mean_by(|g| g.theta);
    c.groups.iter_mut().for_each(|g| g.theta = theta);
}

/// Every sector pays the economy-wide average wage.
fn uniform_propagation(c: &mut CountryCalibration) {
    c.groups
        .iter_mut()
        .for_each(|g| g.sector = Sector::Services);
}

/// Essentials shares falling linearly from `first` to `last` across groups,
/// with each group's goods/services split kept.
fn gradient_baskets(c: &mut CountryCalibration, first: f64, last: f64) {
    let n = c.groups.len();
    for (k, g) in c.groups.iter_mut().enumerate() {
        let f = if n > 1 {
            k as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let e = first + (last - first) * f;
        let rest = g.alpha_d + g.alpha_s;
        let d = if rest > 0.0 { g.alpha_d / rest } else { 0.5 };
        g.alpha_e = e;
        g.alpha_d = (1.0 - e) * d;
        g.alpha_s = 1.0 - e - g.alpha_d;
    }
}

// ------------------------------------------------------------------ shocks

/// Which prices the shock moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockKind {
    Essentials,
    /// Every item's experienced inflation rises by the same amount.
    Uniform,
    /// Goods and services cost-push only.
    NonEssentials,
}

impl ShockKind {
    pub const ALL: [ShockKind; 3] = [
        ShockKind::Essentials,
        ShockKind::Uniform,
        ShockKind::NonEssentials,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShockKind::Essentials => "essentials",
            ShockKind::Uniform => "uniform",
            ShockKind::NonEssentials => "non_essentials",
        }
    }
}

/// Fiscal and monetary regimes compared in the policy matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Hawkish rule, no fiscal response
    A,
    /// Uniform transfer
    B,
    /// Transfer targeted at the bottom group
    C,
    /// Essentials subsidy
    D,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::A, Regime::B, Regime::C, Regime::D];

    pub fn name(self) -> &'static str {
        match self {
            Regime::A => "a",
            Regime::B => "b",
            Regime::C => "c",
            Regime::D => "d",
        }
    }
}

/// Sizes of the policy regimes at the baseline shock scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeSizes {
    pub hawkish_phi: f64,
    pub subsidy: f64,
}

impl Default for RegimeSizes {
    fn default() -> Self {
        RegimeSizes {
            hawkish_phi: 2.5,
            subsidy: 0.06,
        }
    }
}

// ------------------------------------------------------------------ runner

#[derive(Debug, Clone)]
pub struct Runner {
    pub union: Union,
    /// Scenario every experiment starts from
    pub base: ShockScenario,
    pub demand: Demand,
    pub settings: SolverSettings,
    pub window: usize,
    pub threads: usize,
    pub regimes: RegimeSizes,
}

impl Runner {
    pub fn new(union: Union, base: ShockScenario, demand: Demand) -> Self {
        Runner {
            union,
            base,
            demand,
            settings: SolverSettings::tight(),
            window: WINDOW,
            threads: 1,
            regimes: RegimeSizes::default(),
        }
    }

    pub fn run(&self, union: &Union, scenario: &ShockScenario) -> Result<TransitionResult> {
        let model = Model::new(union.clone(), scenario.clone(), self.demand.clone())?;
        solve(&model, &self.settings)
    }

    pub fn pair(&self, union: &Union, scenario: &ShockScenario) -> Result<Pair> {
        let het = self.run(union, scenario)?;
        let (u, s) = standard_twin(union, scenario);
        let std = self.run(&u, &s)?;
        Ok(Pair { het, std })
    }

    fn with_mode(&self, nonlinear: bool) -> ShockScenario {
        let mut s = self.base.clone();
        s.nonlinear = nonlinear;
        s
    }

    /// Base scenario with every shock path multiplied by `k`.
    pub fn scaled(&self, k: f64) -> ShockScenario {
        let mut s = self.base.clone();
        for p in [
            &mut s.essentials_path,
            &mut s.goods_path,
            &mut s.services_path,
        ] {
            p.iter_mut().for_each(|v| *v *= k);
        }
        s
    }

    /// Annualized peak of the base essentials path.
    pub fn base_peak(&self) -> f64 {
        QUARTERS_PER_YEAR * extreme(&self.base.essentials_path).abs()
    }

    fn rescaled_to(&self, peak_annual: f64) -> Result<ShockScenario> {
        let base = self.base_peak();
        if base == 0.0 {
            return Err(Error::Invalid(
                "base scenario has no essentials shock to rescale".into(),
            ));
        }
        Ok(self.scaled(peak_annual / base))
    }

    /// Base scenario recast as a shock of the given kind with the same
    /// essentials path `x`: uniform moves essentials by `x/λ_e` and adds
    /// cost-push `x` in both sectors; non-essentials is the cost-push alone.
    pub fn shock(&self, kind: ShockKind) -> ShockScenario {
        let mut s = self.base.clone();
        let x = s.essentials_path.clone();
        match kind {
            ShockKind::Essentials => {}
            ShockKind::Uniform => {
                let l = self.union.common.lambda_e;
                s.essentials_path = x.iter().map(|v| v / l).collect();
                s.goods_path = x.clone();
                s.services_path = x;
            }
            ShockKind::NonEssentials => {
                s.essentials_path = vec![0.0; x.len()];
                s.goods_path = x.clone();
                s.services_path = x;
            }
        }
        s
    }

    fn country_gaps(&self, pair: &Pair) -> Vec<CountryGap> {
        pair.het
            .countries
            .iter()
            .zip(&pair.std.countries)
            .enumerate()
            .map(|(k, (h, s))| CountryGap {
                country: h.code.clone(),
                cum_core_het: PP * h.cumulative_core(self.window),
                cum_core_std: PP * s.cumulative_core(self.window),
                gap: pair.gap(k, self.window),
                peak_core_het: PP * peak(&h.pi_core),
                peak_core_std: PP * peak(&s.pi_core),
                peak_omega: PP * extreme(&h.omega_shock),
                peak_omega_endogenous: PP * extreme(&h.omega),
                half_life_het: h.half_life(),
                half_life_std: s.half_life(),
            })
            .collect()
    }

    fn essentials_cum(&self, scenario: &ShockScenario) -> f64 {
        scenario.essentials_path.iter().take(self.window).sum()
    }

    /// Per-country gaps, wedge peaks and half-lives in the base mode, with
    /// linear-solver half-lives alongside.
    pub fn wedge_table(&self) -> Result<WedgeTable> {
        let pair = self.pair(&self.union, &self.base)?;
        let linear = if self.base.nonlinear {
            self.pair(&self.union, &self.with_mode(false))?
        } else {
            pair.clone()
        };
        let u_cum = self.essentials_cum(&self.base);
        let lambda = self.union.common.lambda_e;
        let rows = self
            .country_gaps(&pair)
            .into_iter()
            .enumerate()
            .map(|(k, g)| {
                let c = &self.union.countries[k];
                let theta_bar = reset_weights(c).theta_bar;
                let omega0 = wedge(c, PriceChange::essentials(1.0), lambda)?;
                let denom = theta_bar * omega0 * u_cum;
                Ok(WedgeRow {
                    r_c: pair.std.countries[k].cumulative_core(self.window) / u_cum,
                    s_c: if denom != 0.0 {
                        g.gap / PP / denom
                    } else {
                        f64::NAN
                    },
                    rho_omega: persistence(&pair.het.countries[k].omega_shock),
                    half_life_het_linear: linear.het.countries[k].half_life(),
                    half_life_std_linear: linear.std.countries[k].half_life(),
                    country: g.country,
                    cum_core_het: g.cum_core_het,
                    cum_core_std: g.cum_core_std,
                    gap: g.gap,
                    peak_core_het: g.peak_core_het,
                    peak_core_std: g.peak_core_std,
                    peak_omega: g.peak_omega,
                    peak_omega_endogenous: g.peak_omega_endogenous,
                    half_life_het: g.half_life_het,
                    half_life_std: g.half_life_std,
                })
            })
            .collect::<Result<_>>()?;
        Ok(WedgeTable {
            nonlinear: self.base.nonlinear,
            union_gap: pair.union_gap(self.window),
            rows,
        })
    }

    pub fn shock_composition(&self, kinds: &[ShockKind]) -> Result<ShockComposition> {
        let runs = par_map(self.threads, kinds, |k| {
            self.pair(&self.union, &self.shock(*k))
        })?;
        let rows = kinds
            .iter()
            .zip(&runs)
            .flat_map(|(kind, pair)| {
                self.country_gaps(pair).into_iter().map(|g| ShockRow {
                    shock: kind.name(),
                    country: g.country,
                    peak_omega: g.peak_omega,
                    peak_omega_endogenous: g.peak_omega_endogenous,
                    gap: g.gap,
                })
            })
            .collect();
        Ok(ShockComposition { rows })
    }

    /// Two single-country economies with the same aggregate essentials share
    /// and average reset probability: `A` has essentials shares falling from
    /// `first` to `last` across groups, `B` gives every group A's average
    /// basket. Country `code` supplies everything else.
    pub fn same_openness(&self, code: &str, first: f64, last: f64) -> Result<SameOpenness> {
        let base = self.union.country(code).ok_or_else(|| Error::Unknown {
            kind: "country",
            name: code.to_string(),
        })?;
        let mut a = base.clone();
        gradient_baskets(&mut a, first, last);
        let mut b = a.clone();
        uniform_baskets(&mut b);
        let mut rows = Vec::new();
        let mut cum = Vec::new();
        for (label, c) in [("A", a), ("B", b)] {
            let u = single_country(&self.union.common, c);
            let pair = self.pair(&u, &self.base)?;
            let g = self.country_gaps(&pair).remove(0);
            let c = &u.countries[0];
            cum.push(g.cum_core_het);
            rows.push(OpennessRow {
                spec: label,
                essentials_share: c.mean_by(|g| g.alpha_e),
                theta_bar: c.mean_by(|g| g.theta),
                peak_omega: g.peak_omega,
                cum_core: g.cum_core_het,
                gap_vs_twin: g.gap,
            });
        }
        Ok(SameOpenness {
            gap_ab: cum[0] - cum[1],
            rows,
        })
    }

    /// Scenario for one policy regime on `union`. Fiscal sizes scale with
    /// the shock relative to the bundled baseline, so a zero shock carries
    /// no policy response.
    pub fn regime_scenario(&self, union: &Union, regime: Regime) -> Result<ShockScenario> {
        let baseline = ShockScenario::baseline(&union.common);
        let scale =
            extreme(&self.base.essentials_path).abs() / extreme(&baseline.essentials_path).abs();
        let w = union.weights();
        let avg = |f: &dyn Fn(&CountryCalibration) -> f64| -> f64 {
            union.countries.iter().zip(&w).map(|(c, w)| w * f(c)).sum()
        };
        let size = self.regimes.subsidy * scale;
        let alpha_e = avg(&|c| c.mean_by(|g| g.alpha_e));
        let mut s = self.base.clone();
        let t = s.policy.taylor_pi_path.len();
        match regime {
            Regime::A => s.policy.taylor_pi_path = vec![self.regimes.hawkish_phi; t],
            Regime::B => {
                s.policy.transfer = Transfer::Uniform {
                    amount: size * alpha_e,
                }
            }
            Regime::C => {
                let first = &union.countries[0].groups[0].label;
                if union.countries.iter().any(|c| c.groups[0].label != *first) {
                    return Err(Error::Invalid(
                        "countries disagree on the bottom group label".into(),
                    ));
                }
                let eta = avg(&|c| c.groups[0].eta);
                s.policy.transfer = Transfer::Targeted {
                    group: first.clone(),
                    amount: size * alpha_e / eta,
                };
            }
            Regime::D => s.policy.subsidy = size,
        }
        Ok(s)
    }

    /// Union loss under regimes (a)–(d) for each configuration, normalized
    /// by regime (a).
    pub fn policy_matrix(&self, configs: &[(String, Union)]) -> Result<PolicyMatrix> {
        let jobs: Vec<(usize, Regime)> = (0..configs.len())
            .flat_map(|k| Regime::ALL.into_iter().map(move |r| (k, r)))
            .collect();
        let runs = par_map(self.threads, &jobs, |(k, r)| {
            let u = &configs[*k].1;
            let s = self.regime_scenario(u, *r)?;
            let res = self.run(u, &s)?;
            Ok((
                res.union_loss(u.common.beta, u.common.loss_weight_x),
                PP * res.union_cumulative_core(self.window),
                s.policy.taylor_pi_path.last().copied().unwrap_or(f64::NAN),
            ))
        })?;
        let mut rows = Vec::new();
        let mut rankings = Vec::new();
        for (k, (name, _)) in configs.iter().enumerate() {
            let block = &runs[4 * k..4 * k + 4];
            let la = block[0].0;
            for (r, (loss, cum, phi)) in Regime::ALL.iter().zip(block) {
                rows.push(PolicyRow {
                    config: name.clone(),
                    regime: r.name(),
                    taylor_pi: *phi,
                    loss: *loss,
                    loss_normalized: if la > 0.0 { loss / la } else { f64::NAN },
                    cum_core: *cum,
                });
            }
            let mut order: Vec<(f64, Regime)> =
                block.iter().map(|b| b.0).zip(Regime::ALL).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let order: Vec<Regime> = order.into_iter().map(|o| o.1).collect();
            let strict = block.windows(2).all(|w| w[1].0 < w[0].0);
            rankings.push(Ranking {
                config: name.clone(),
                order: order.iter().map(|r| r.name()).collect::<Vec<_>>().join("<"),
                expected_order: strict,
            });
        }
        Ok(PolicyMatrix { rows, rankings })
    }

    pub fn indexation_table(&self, modes: &[Indexation]) -> Result<IndexationTable> {
        let runs = par_map(self.threads, modes, |m| {
            let mut s = self.base.clone();
            s.indexation = *m;
            self.pair(&self.union, &s)
        })?;
        let rows = modes
            .iter()
            .zip(&runs)
            .flat_map(|(m, pair)| {
                self.country_gaps(pair)
                    .into_iter()
                    .map(move |g| IndexationRow {
                        indexation: indexation_name(m),
                        country: g.country,
                        peak_omega: g.peak_omega,
                        gap: g.gap,
                    })
            })
            .collect();
        Ok(IndexationTable { rows })
    }

    /// Immediate response against no inflation response for `delay` quarters.
    pub fn delayed_policy(&self, delay: usize) -> Result<DelayedPolicy> {
        let mut delayed = self.base.clone();
        delayed
            .policy
            .taylor_pi_path
            .iter_mut()
            .take(delay)
            .for_each(|v| *v = 0.0);
        let scenarios = [self.base.clone(), delayed];
        let runs = par_map(self.threads, &scenarios, |s| self.pair(&self.union, s))?;
        let now = self.country_gaps(&runs[0]);
        let late = self.country_gaps(&runs[1]);
        let share = |g: &CountryGap| {
            if g.cum_core_het != 0.0 {
                g.gap / g.cum_core_het
            } else {
                f64::NAN
            }
        };
        let rows = now
            .iter()
            .zip(&late)
            .map(|(a, b)| DelayRow {
                country: a.country.clone(),
                gap_immediate: a.gap,
                gap_delayed: b.gap,
                share_immediate: share(a),
                share_delayed: share(b),
            })
            .collect();
        Ok(DelayedPolicy { delay, rows })
    }

    /// Linear union gap with basket, propagation and reset heterogeneity
    /// removed one at a time, and with all of them plus the expectation
    /// amplifier removed. Every row is measured against the standard twin
    /// of the unmodified calibration.
    pub fn channel_decomposition(&self) -> Result<ChannelDecomposition> {
        let s = self.with_mode(false);
        let (tu, ts) = standard_twin(&self.union, &s);
        let twin = self.run(&tu, &ts)?;
        let variant = |f: &dyn Fn(&mut CountryCalibration)| {
            let mut u = self.union.clone();
            u.countries.iter_mut().for_each(f);
            u
        };
        let all = |c: &mut CountryCalibration| {
            uniform_baskets(c);
            uniform_resets(c);
            uniform_propagation(c);
            c.groups.iter_mut().for_each(|g| {
                g.phi = 0.0;
                g.mpc = None;
            });
        };
        let cases: Vec<(&'static str, Union)> = vec![
            ("full", self.union.clone()),
            ("no_basket", variant(&uniform_baskets)),
            ("no_propagation", variant(&uniform_propagation)),
            ("no_reset", variant(&uniform_resets)),
            ("all", variant(&all)),
        ];
        let runs = par_map(self.threads, &cases, |(_, u)| self.run(u, &s))?;
        let std_cum = twin.union_cumulative_core(self.window);
        let gaps: Vec<f64> = runs
            .iter()
            .map(|r| PP * (r.union_cumulative_core(self.window) - std_cum))
            .collect();
        let rows = cases
            .iter()
            .zip(&gaps)
            .map(|((name, _), g)| ChannelRow {
                channel: name,
                gap: *g,
                delta: g - gaps[0],
            })
            .collect();
        Ok(ChannelDecomposition { rows })
    }

    /// Regression through the origin of country gaps on MWSI, pooled over
    /// annualized essentials peaks.
    pub fn estimate_psi(&self, peaks: &[f64]) -> Result<PsiEstimate> {
        let lambda = self.union.common.lambda_e;
        let scenarios = peaks
            .iter()
            .map(|p| self.rescaled_to(*p))
            .collect::<Result<Vec<_>>>()?;
        let runs = par_map(self.threads, &scenarios, |s| self.pair(&self.union, s))?;
        let mut points = Vec::new();
        for ((p, s), pair) in peaks.iter().zip(&scenarios).zip(&runs) {
            let u_cum = self.essentials_cum(s);
            for (k, c) in self.union.countries.iter().enumerate() {
                points.push(PsiPoint {
                    peak: *p,
                    country: c.code.clone(),
                    mwsi: PP * mwsi(c, PriceChange::essentials(u_cum), lambda)?,
                    gap: pair.gap(k, self.window),
                    fitted: 0.0,
                    residual: 0.0,
                });
            }
        }
        let (slope, r2) = origin_fit(points.iter().map(|p| (p.mwsi, p.gap)));
        for p in &mut points {
            p.fitted = slope * p.mwsi;
            p.residual = p.gap - p.fitted;
        }
        let residual_ratio = peaks
            .iter()
            .map(|pk| {
                let (r, g) = points
                    .iter()
                    .filter(|p| p.peak == *pk)
                    .fold((0.0, 0.0), |(r, g), p| {
                        (r + p.residual * p.residual, g + p.gap * p.gap)
                    });
                (r / g).sqrt()
            })
            .collect();
        Ok(PsiEstimate {
            slope,
            r2,
            residual_ratio,
            points,
        })
    }

    /// Country-optimal inflation responses by grid search and the split of their cross-country variance between the
    /// propagation and wedge regressors.
    pub fn oca_decomposition(&self, grid: &[f64]) -> Result<OcaDecomposition> {
        if grid.is_empty() {
            return Err(Error::Invalid("empty policy grid".into()));
        }
        let base = &self.base;
        let pair = self.pair(&self.union, base)?;
        let evaluate = |phi: &f64| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut s = base.clone();
            s.policy.taylor_pi_path.iter_mut().for_each(|v| *v = *phi);
            let r = self.run(&self.union, &s)?;
            let c = &self.union.common;
            let losses = r
                .countries
                .iter()
                .map(|p| p.loss(c.beta, c.loss_weight_x))
                .collect();
            Ok((losses, r.union.rate))
        };
        // Coarse pass on every tenth grid point, then the full grid around
        // each country's coarse minimum.
        let mut cache: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let fill =
            |idx: Vec<usize>, cache: &mut BTreeMap<usize, (Vec<f64>, Vec<f64>)>| -> Result<()> {
                let todo: Vec<usize> = idx.into_iter().filter(|i| !cache.contains_key(i)).collect();
                let vals = par_map(self.threads, &todo, |i| evaluate(&grid[*i]))?;
                cache.extend(todo.into_iter().zip(vals));
                Ok(())
            };
        let mut coarse: Vec<usize> = (0..grid.len()).step_by(10).collect();
        coarse.push(grid.len() - 1);
        fill(coarse, &mut cache)?;
        let n = self.union.countries.len();
        let argmin = |c: usize, cache: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>| -> usize {
            cache
                .iter()
                .min_by(|a, b| a.1 .0[c].total_cmp(&b.1 .0[c]))
                .map(|(i, _)| *i)
                .expect("non-empty cache")
        };
        let near: Vec<usize> = (0..n)
            .flat_map(|c| {
                let i = argmin(c, &cache);
                i.saturating_sub(9)..(i + 10).min(grid.len())
            })
            .collect();
        fill(near, &mut cache)?;

        let lambda = self.union.common.lambda_e;
        let common_phi = self
            .base
            .policy
            .taylor_pi_path
            .last()
            .copied()
            .unwrap_or(f64::NAN);
        let u_cum = self.essentials_cum(base);
        let mut rows = Vec::with_capacity(n);
        for (k, c) in self.union.countries.iter().enumerate() {
            let i = argmin(k, &cache);
            let rate = &cache[&i].1;
            let theta_bar = reset_weights(c).theta_bar;
            let phi = grid[i];
            rows.push(OcaRow {
                country: c.code.clone(),
                phi_opt: phi,
                i_star: PP * rate.iter().take(self.window).sum::<f64>(),
                r_c: pair.std.countries[k].cumulative_core(self.window) / u_cum,
                theta_omega: PP * theta_bar * wedge(c, PriceChange::essentials(1.0), lambda)?,
                stance: if common_phi > phi + 1e-12 {
                    "over-tightened"
                } else if common_phi < phi - 1e-12 {
                    "under-tightened"
                } else {
                    "neutral"
                },
            });
        }
        let y: Vec<f64> = rows.iter().map(|r| r.i_star).collect();
        let x1: Vec<f64> = rows.iter().map(|r| r.r_c).collect();
        let x2: Vec<f64> = rows.iter().map(|r| r.theta_omega).collect();
        let split = projection_split(&y, &x1, &x2);
        Ok(OcaDecomposition {
            common_phi,
            variance: split.total,
            propagation_term: split.first,
            wedge_term: split.second,
            rows,
        })
    }

    /// Nonlinear over linear union gap across annualized essentials peaks.
    pub fn amplification_curve(&self, peaks: &[f64]) -> Result<AmplificationCurve> {
        let rows = par_map(self.threads, peaks, |p| {
            let s = self.rescaled_to(*p)?;
            let mut lin = s.clone();
            lin.nonlinear = false;
            let mut nl = s.clone();
            nl.nonlinear = true;
            let (tu, ts) = standard_twin(&self.union, &lin);
            let std = PP * self.run(&tu, &ts)?.union_cumulative_core(self.window);
            let gl = PP
                * self
                    .run(&self.union, &lin)?
                    .union_cumulative_core(self.window)
                - std;
            let gn = PP
                * self
                    .run(&self.union, &nl)?
                    .union_cumulative_core(self.window)
                - std;
            Ok(AmplificationRow {
                peak: *p,
                gap_linear: gl,
                gap_nonlinear: gn,
                ratio: gn / gl,
            })
        })?;
        Ok(AmplificationCurve { rows })
    }
}

fn indexation_name(m: &Indexation) -> String {
    match m {
        Indexation::None => "none".into(),
        Indexation::Cpi { gamma } => format!("cpi({gamma})"),
        Indexation::TypeSpecific { gamma } => format!("type_specific({gamma})"),
    }
}

/// Slope and uncentered R² of a regression through the origin.
pub fn origin_fit(points: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64) {
    let (sxy, sxx, syy) = points.clone().fold((0.0, 0.0, 0.0), |(a, b, c), (x, y)| {
        (a + x * y, b + x * x, c + y * y)
    });
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let ssr: f64 = points.map(|(x, y)| (y - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    (slope, r2)
}

/// Variance of `y` and the parts explained by each of two regressors in a
/// least-squares fit with intercept. The covariance term is split evenly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectionSplit {
    pub total: f64,
    pub first: f64,
    pub second: f64,
}

pub fn projection_split(y: &[f64], x1: &[f64], x2: &[f64]) -> ProjectionSplit {
    let n = y.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let cov = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (mean(a), mean(b));
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n
    };
    let total = cov(y, y);
    let (s11, s22, s12) = (cov(x1, x1), cov(x2, x2), cov(x1, x2));
    let (c1, c2) = (cov(x1, y), cov(x2, y));
    // Regressors without variation carry no coefficient.
    let tiny = 1e-14 * (1.0 + total);
    let (b1, b2) = match (s11 > tiny, s22 > tiny) {
        (false, false) => (0.0, 0.0),
        (true, false) => (c1 / s11, 0.0),
        (false, true) => (0.0, c2 / s22),
        (true, true) => {
            let det = s11 * s22 - s12 * s12;
            if det.abs() <= 1e-12 * s11 * s22 {
                (c1 / s11, 0.0)
            } else {
                ((c1 * s22 - c2 * s12) / det, (c2 * s11 - c1 * s12) / det)
            }
        }
    };
    ProjectionSplit {
        total,
        first: b1 * b1 * s11 + b1 * b2 * s12,
        second: b2 * b2 * s22 + b1 * b2 * s12,
    }
}

// ----------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountryGap {
    pub country: String,
    pub cum_core_het: f64,
    pub cum_core_std: f64,
    pub gap: f64,
    pub peak_core_het: f64,
    pub peak_core_std: f64,
    /// Extreme of the wedge implied by the exogenous impulses
    pub peak_omega: f64,
    /// Extreme of the wedge in equilibrium experienced inflation
    pub peak_omega_endogenous: f64,
    pub half_life_het: Option<usize>,
    pub half_life_std: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WedgeRow {
    pub country: String,
    pub cum_core_het: f64,
    pub cum_core_std: f64,
    pub gap: f64,
    pub peak_core_het: f64,
    pub peak_core_std: f64,
    pub peak_omega: f64,
    pub peak_omega_endogenous: f64,
    pub half_life_het: Option<usize>,
    pub half_life_std: Option<usize>,
    pub half_life_het_linear: Option<usize>,
    pub half_life_std_linear: Option<usize>,
    /// Standard-twin cumulative core per unit of cumulative essentials shock
    pub r_c: f64,
    /// Gap per unit of θ̄·Ω at a unit essentials shock and cumulative shock
    pub s_c: f64,
    pub rho_omega: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WedgeTable {
    pub nonlinear: bool,
    pub union_gap: f64,
    pub rows: Vec<WedgeRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShockRow {
    pub shock: &'static str,
    pub country: String,
    pub peak_omega: f64,
    pub peak_omega_endogenous: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShockComposition {
    pub rows: Vec<ShockRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpennessRow {
    pub spec: &'static str,
    pub essentials_share: f64,
    pub theta_bar: f64,
    pub peak_omega: f64,
    pub cum_core: f64,
    pub gap_vs_twin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SameOpenness {
    /// Cumulative core of A minus that of B
    pub gap_ab: f64,
    pub rows: Vec<OpennessRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyRow {
    pub config: String,
    pub regime: &'static str,
    pub taylor_pi: f64,
    pub loss: f64,
    pub loss_normalized: f64,
    pub cum_core: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Ranking {
    pub config: String,
    /// Regimes from lowest to highest loss
    pub order: String,
    /// Loss strictly falls from (a) to (d)
    pub expected_order: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyMatrix {
    pub rows: Vec<PolicyRow>,
    pub rankings: Vec<Ranking>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexationRow {
    pub indexation: String,
    pub country: String,
    pub peak_omega: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexationTable {
    pub rows: Vec<IndexationRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DelayRow {
    pub country: String,
    pub gap_immediate: f64,
    pub gap_delayed: f64,
    /// Gap as a share of heterogeneous cumulative core inflation
    pub share_immediate: f64,
    pub share_delayed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DelayedPolicy {
    pub delay: usize,
    pub rows: Vec<DelayRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelRow {
    pub channel: &'static str,
    pub gap: f64,
    /// Change against the full model
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelDecomposition {
    pub rows: Vec<ChannelRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiPoint {
    pub peak: f64,
    pub country: String,
    pub mwsi: f64,
    pub gap: f64,
    pub fitted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiEstimate {
    pub slope: f64,
    pub r2: f64,
    /// Residual norm over gap norm at each peak, in input order
    pub residual_ratio: Vec<f64>,
    pub points: Vec<PsiPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OcaRow {
    pub country: String,
    pub phi_opt: f64,
    /// Cumulative policy rate under the country-optimal response
    pub i_star: f64,
    pub r_c: f64,
    pub theta_omega: f64,
    pub stance: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct OcaDecomposition {
    pub common_phi: f64,
    pub variance: f64,
    pub propagation_term: f64,
    pub wedge_term: f64,
    pub rows: Vec<OcaRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AmplificationRow {
    pub peak: f64,
    pub gap_linear: f64,
    pub gap_nonlinear: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AmplificationCurve {
    pub rows: Vec<AmplificationRow>,
}

/// Reset-gap components for countries outside the union.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct PortabilityInput {
    pub country: String,
    /// Essentials share of the bottom quintile, percent
    pub q1_share: f64,
    pub q5_share: f64,
    /// Annual reset-probability gap between bottom and top quintiles
    pub delta_theta_annual: f64,
    pub reported_index: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct OmegaInput {
    country: String,
    omega_pp: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PortabilityRow {
    pub country: String,
    /// Essentials-share gap times reset gap
    pub rwei_index: f64,
    pub reported_index: f64,
    pub omega_pp: f64,
    pub predicted_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PortabilityStats {
    pub psi: f64,
    /// Countries with components, by falling index
    pub index_ranking: Vec<String>,
    /// All countries with a wedge, by falling predicted gap
    pub gap_ranking: Vec<String>,
    pub rows: Vec<PortabilityRow>,
}

/// Portability statistics from `components.csv` and `omega.csv` in `dir`.
/// Countries listed only in `omega.csv` get a predicted gap but no index.
pub fn portability_stats(dir: &Path, psi: f64) -> Result<PortabilityStats> {
    let comps: Vec<PortabilityInput> = read_csv(&dir.join("components.csv"))?;
    let omegas: Vec<OmegaInput> = read_csv(&dir.join("omega.csv"))?;
    let mut rows: Vec<PortabilityRow> = omegas
        .iter()
        .map(|o| {
            let c = comps.iter().find(|c| c.country == o.country);
            PortabilityRow {
                country: o.country.clone(),
                rwei_index: c.map_or(f64::NAN, |c| {
                    (c.q1_share - c.q5_share) * c.delta_theta_annual
                }),
                reported_index: c.map_or(f64::NAN, |c| c.reported_index),
                omega_pp: o.omega_pp,
                predicted_gap: psi * o.omega_pp,
            }
        })
        .collect();
    for c in comps
        .iter()
        .filter(|c| !omegas.iter().any(|o| o.country == c.country))
    {
        rows.push(PortabilityRow {
            country: c.country.clone(),
            rwei_index: (c.q1_share - c.q5_share) * c.delta_theta_annual,
            reported_index: c.reported_index,
            omega_pp: f64::NAN,
            predicted_gap: f64::NAN,
        });
    }
    let ranked = |key: fn(&PortabilityRow) -> f64| {
        let mut v: Vec<&PortabilityRow> = rows.iter().filter(|r| key(r).is_finite()).collect();
        v.sort_by(|a, b| key(b).total_cmp(&key(a)));
        v.into_iter().map(|r| r.country.clone()).collect::<Vec<_>>()
    };
    Ok(PortabilityStats {
        psi,
        index_ranking: ranked(|r| r.rwei_index),
        gap_ranking: ranked(|r| r.predicted_gap),
        rows,
    })
}

// ------------------------------------------------------------- artifacts

/// A report with a flat table for CSV output; JSON gets the whole value.
pub trait Report: Serialize {
    type Row: Serialize;
    fn rows(&self) -> &[Self::Row];
}

macro_rules! report {
    ($($t:ty => $row:ty, $field:ident;)*) => {
        $(impl Report for $t {
            type Row = $row;
            fn rows(&self) -> &[$row] {
                &self.$field
            }
        })*
    };
}

report! {
    WedgeTable => WedgeRow, rows;
    ShockComposition => ShockRow, rows;
    SameOpenness => OpennessRow, rows;
    PolicyMatrix => PolicyRow, rows;
    IndexationTable => IndexationRow, rows;
    DelayedPolicy => DelayRow, rows;
    ChannelDecomposition => ChannelRow, rows;
    PsiEstimate => PsiPoint, points;
    OcaDecomposition => OcaRow, rows;
    AmplificationCurve => AmplificationRow, rows;
    PortabilityStats => PortabilityRow, rows;
}

/// Write `<name>.csv` and `<name>.json` into `dir`.
pub fn write_report<R: Report>(dir: &Path, name: &str, report: &R) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join(format!("{name}.csv"));
    let json_path = dir.join(format!("{name}.json"));
    let csv_err = |source| Error::Csv {
        path: csv_path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for row in report.rows() {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;
    crate::calibration::write_json(&json_path, report)?;
    Ok(vec![csv_path, json_path])
}

/// sha256 of the JSON serialization.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: &'static str,
    pub calibration_hash: String,
    pub scenario_hash: String,
    pub demand: &'static str,
    pub horizon: usize,
    pub window: usize,
    pub threads: usize,
    pub settings: SolverSettings,
    pub files: Vec<String>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join("manifest.json");
        crate::calibration::write_json(&p, self)?;
        Ok(p)
    }
}

pub fn demand_name(d: &Demand) -> &'static str {
    match d {
        Demand::Hank(_) => "hank",
        Demand::Euler => "euler",
    }
}

/// Experiments that run on a union calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    WedgeTable,
    ShockComposition,
    SameOpenness,
    PolicyMatrix,
    IndexationTable,
    DelayedPolicy,
    ChannelDecomposition,
    EstimatePsi,
    OcaDecomposition,
    AmplificationCurve,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::WedgeTable,
        Experiment::ShockComposition,
        Experiment::SameOpenness,
        Experiment::PolicyMatrix,
        Experiment::IndexationTable,
        Experiment::DelayedPolicy,
        Experiment::ChannelDecomposition,
        Experiment::EstimatePsi,
        Experiment::OcaDecomposition,
        Experiment::AmplificationCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::WedgeTable => "wedge-table",
            Experiment::ShockComposition => "shock-composition",
            Experiment::SameOpenness => "same-openness",
            Experiment::PolicyMatrix => "policy-matrix",
            Experiment::IndexationTable => "indexation-table",
            Experiment::DelayedPolicy => "delayed-policy",
            Experiment::ChannelDecomposition => "channel-decomposition",
            Experiment::EstimatePsi => "estimate-psi",
            Experiment::OcaDecomposition => "oca-decomposition",
            Experiment::AmplificationCurve => "amplification-curve",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "experiment",
                name: s.to_string(),
            })
    }
}

/// Grid of φ_π values searched for country-optimal responses.
pub fn phi_grid() -> Vec<f64> {
    (101..=500).map(|k| k as f64 / 100.0).collect()
}

/// Annualized essentials peaks of the amplification curve.
pub const AMPLIFICATION_PEAKS: [f64; 6] = [0.01, 0.05, 0.10, 0.15, 0.20, 0.25];

/// Annualized peaks pooled in the ψ regression.
pub const PSI_PEAKS: [f64; 3] = [0.01, 0.02, 0.04];

/// Run one experiment with its default arguments and write its report and
/// manifest into `out`.
pub fn run_experiment(runner: &Runner, exp: Experiment, out: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let name = exp.name();
    let files = match exp {
        Experiment::WedgeTable => write_report(out, name, &runner.wedge_table()?)?,
        Experiment::ShockComposition => {
            write_report(out, name, &runner.shock_composition(&ShockKind::ALL)?)?
        }
        Experiment::SameOpenness => {
            let code = runner.union.countries[0].code.clone();
            write_report(out, name, &runner.same_openness(&code, 0.48, 0.10)?)?
        }
        Experiment::PolicyMatrix => {
            let configs = if runner.union.countries.iter().all(|c| c.groups.len() == 5) {
                robustness_configs(&runner.union)?
            } else {
                vec![("baseline".to_string(), runner.union.clone())]
            };
            write_report(out, name, &runner.policy_matrix(&configs)?)?
        }
        Experiment::IndexationTable => write_report(
            out,
            name,
            &runner.indexation_table(&[
                Indexation::None,
                Indexation::Cpi { gamma: 1.0 },
                Indexation::TypeSpecific { gamma: 1.0 },
            ])?,
        )?,
        Experiment::DelayedPolicy => write_report(out, name, &runner.delayed_policy(5)?)?,
        Experiment::ChannelDecomposition => {
            write_report(out, name, &runner.channel_decomposition()?)?
        }
        Experiment::EstimatePsi => write_report(out, name, &runner.estimate_psi(&PSI_PEAKS)?)?,
        Experiment::OcaDecomposition => {
            write_report(out, name, &runner.oca_decomposition(&phi_grid())?)?
        }
        Experiment::AmplificationCurve => write_report(
            out,
            name,
            &runner.amplification_curve(&AMPLIFICATION_PEAKS)?,
        )?,
    };
    let manifest = Manifest {
        experiment: name.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        calibration_hash: content_hash(&runner.union),
        scenario_hash: content_hash(&runner.base),
        demand: demand_name(&runner.demand),
        horizon: runner.union.common.horizon_t,
        window: runner.window,
        threads: runner.threads,
        settings: runner.settings,
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ar1_path;
    use crate::solver::tests::{small_union, two_country};

    const T: usize = 24;

    fn runner(u: Union) -> Runner {
        let base = ShockScenario::essentials(&u.common, ar1_path(0.02, 0.7, 2, u.common.horizon_t));
        Runner::new(u, base, Demand::Euler)
    }

    fn five_groups() -> CountryCalibration {
        let mut c = small_union(T).countries.remove(0);
        let g = c.groups[0].clone();
        c.groups = (0..5)
            .map(|k| WorkerGroup {
                label: format!("Q{}", k + 1),
                eta: 0.2,
                theta: 0.3 - 0.05 * k as f64,
                alpha_e: 0.4 - 0.06 * k as f64,
                alpha_d: 0.3,
                alpha_s: 0.3 + 0.06 * k as f64,
                sector: if k < 3 {
                    Sector::Services
                } else {
                    Sector::Goods
                },
                ..g.clone()
            })
            .collect();
        c
    }

    #[test]
    fn pooling_keeps_population_means() {
        let c = five_groups();
        let p = pool_groups(&c, &[&[0, 1], &[2, 3, 4]]).unwrap();
        assert_eq!(p.groups.len(), 2);
        assert_eq!(p.groups[0].label, "Q1+Q2");
        assert_eq!(p.groups[1].sector, Sector::Goods);
        for f in [
            |g: &WorkerGroup| g.theta,
            |g: &WorkerGroup| g.alpha_e,
            |g: &WorkerGroup| g.alpha_s,
        ] {
            assert!((p.mean_by(f) - c.mean_by(f)).abs() < 1e-15);
        }
        assert!((p.groups.iter().map(|g| g.eta).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(pool_groups(&c, &[&[0, 1], &[2, 3]]).is_err());
        assert!(pool_groups(&c, &[&[0, 1, 1], &[2, 3, 4]]).is_err());
    }

    #[test]
    fn robustness_set_names() {
        let mut u = small_union(T);
        u.countries = vec![five_groups()];
        let names: Vec<String> = robustness_configs(&u)
            .unwrap()
            .into_iter()
            .map(|c| c.0)
            .collect();
        assert_eq!(
            names,
            [
                "baseline",
                "b_catchup=0",
                "b_catchup=0.3",
                "phi_bar=0",
                "phi_bar=0.5",
                "lambda_e=1",
                "lambda_e=1.5",
                "groups=2",
                "groups=3"
            ]
        );
        assert!(robustness_configs(&small_union(T)).is_err());
    }

    #[test]
    fn shock_kinds_sign_the_wedge() {
        let r = runner(small_union(T));
        let out = r.shock_composition(&ShockKind::ALL).unwrap();
        let get = |k: &str| out.rows.iter().find(|row| row.shock == k).unwrap();
        assert!(get("essentials").peak_omega > 0.0);
        assert!(get("uniform").peak_omega.abs() < 1e-12);
        assert!(get("non_essentials").peak_omega < 0.0);
    }

    #[test]
    fn twin_against_itself_has_no_gap() {
        let r = runner(small_union(T));
        let (u, s) = standard_twin(&r.union, &r.base);
        let pair = r.pair(&u, &s).unwrap();
        assert_eq!(pair.gap(0, WINDOW), 0.0);
    }

    #[test]
    fn indexation_rows() {
        let r = runner(two_country(T));
        let t = r
            .indexation_table(&[
                Indexation::None,
                Indexation::Cpi { gamma: 1.0 },
                Indexation::TypeSpecific { gamma: 1.0 },
            ])
            .unwrap();
        assert_eq!(t.rows.len(), 6);
        for c in ["AA", "BB"] {
            let get = |m: &str| {
                t.rows
                    .iter()
                    .find(|x| x.indexation == m && x.country == c)
                    .unwrap()
            };
            assert!((get("none").peak_omega - get("cpi(1)").peak_omega).abs() < 1e-9);
            assert!(get("type_specific(1)").peak_omega.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_delay_is_baseline() {
        let r = runner(two_country(T));
        let d = r.delayed_policy(0).unwrap();
        for row in &d.rows {
            assert_eq!(row.gap_immediate, row.gap_delayed);
        }
    }

    #[test]
    fn all_channels_off_is_the_twin() {
        let r = runner(two_country(T));
        let d = r.channel_decomposition().unwrap();
        let names: Vec<&str> = d.rows.iter().map(|x| x.channel).collect();
        assert_eq!(
            names,
            ["full", "no_basket", "no_propagation", "no_reset", "all"]
        );
        assert!(d.rows[4].gap.abs() < 1e-10, "{}", d.rows[4].gap);
        assert_eq!(d.rows[0].delta, 0.0);
    }

    #[test]
    fn one_point_psi_is_a_ratio() {
        let r = runner(small_union(T));
        let e = r.estimate_psi(&[r.base_peak()]).unwrap();
        assert_eq!(e.points.len(), 1);
        let p = &e.points[0];
        assert!((e.slope - p.gap / p.mwsi).abs() < 1e-12 * e.slope.abs());
        assert!(e.slope > 0.0);
        assert!((e.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_countries_have_no_oca_cost() {
        let mut u = two_country(T);
        let mut b = u.countries[0].clone();
        b.code = "BB".into();
        b.gdp_weight = 0.4;
        b.trade_shares = [("AA".to_string(), 1.0)].into_iter().collect();
        u.countries[1] = b;
        let r = runner(u);
        let grid: Vec<f64> = (0..=20).map(|k| 1.1 + 0.1 * k as f64).collect();
        let o = r.oca_decomposition(&grid).unwrap();
        assert_eq!(o.rows[0].phi_opt, o.rows[1].phi_opt);
        assert!(o.variance.abs() < 1e-20);
        assert_eq!((o.propagation_term, o.wedge_term), (0.0, 0.0));
    }

    #[test]
    fn projection_split_cases() {
        let y = [1.0, 2.0, 4.0, 3.0];
        let x1 = [0.0, 1.0, 3.0, 2.0];
        let flat = [0.5; 4];
        let s = projection_split(&y, &x1, &flat);
        assert_eq!(s.second, 0.0);
        assert!((s.first - s.total).abs() < 1e-12);
        let x2 = [1.0, 0.0, 1.0, 0.0];
        let s = projection_split(&y, &x1, &x2);
        assert!(s.first + s.second <= s.total + 1e-12);
        let s = projection_split(&[2.0; 4], &flat, &flat);
        assert_eq!((s.total, s.first, s.second), (0.0, 0.0, 0.0));
    }

    #[test]
    fn no_catch_up_no_amplification() {
        let mut u = small_union(T);
        u.common.b_catchup = 0.0;
        let r = runner(u);
        let c = r.amplification_curve(&[0.02, 0.08]).unwrap();
        for row in &c.rows {
            assert!((row.ratio - 1.0).abs() < 1e-9, "{}", row.ratio);
        }
    }

    #[test]
    fn zero_shock_zero_loss() {
        let mut u = small_union(80);
        u.countries = vec![five_groups()];
        let mut r = runner(u.clone());
        r.base = ShockScenario::essentials(&u.common, vec![0.0; 80]);
        let m = r.policy_matrix(&[("z".to_string(), u)]).unwrap();
        assert!(m.rows.iter().all(|x| x.loss == 0.0));
    }

    #[test]
    fn portability_from_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("components.csv"),
            "country,q1_share,q5_share,delta_theta_annual,reported_index\nAA,30,10,0.2,1\nBB,30,20,0.1,2\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("omega.csv"),
            "country,omega_pp\nAA,0.5\nZZ,0.7\nBB,0.1\n",
        )
        .unwrap();
        let p = portability_stats(dir.path(), 2.0).unwrap();
        assert_eq!(p.index_ranking, ["AA", "BB"]);
        assert_eq!(p.gap_ranking, ["ZZ", "AA", "BB"]);
        let aa = p.rows.iter().find(|r| r.country == "AA").unwrap();
        assert_eq!((aa.rwei_index, aa.predicted_gap), (4.0, 1.0));
    }

    #[test]
    fn reports_are_deterministic() {
        let r = runner(two_country(T));
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            let m = run_experiment(&r, Experiment::WedgeTable, d.path()).unwrap();
            assert_eq!(m.files, ["wedge-table.csv", "wedge-table.json"]);
        }
        for f in ["wedge-table.csv", "wedge-table.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let text = std::fs::read_to_string(a.path().join("wedge-table.csv")).unwrap();
        assert!(text.starts_with("country,cum_core_het,"));
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn persistence_of_geometric_path() {
        let p: Vec<f64> = (0..30).map(|t| 0.8f64.powi(t)).collect();
        assert!((persistence(&p) - 0.8).abs() < 1e-14);
        assert!(persistence(&[0.0; 30]).is_nan());
    }
}
