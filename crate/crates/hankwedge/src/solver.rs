//! Sequence-space solution of the union.
//!
//! Unknowns are, per country, the log wage level of every group and the two
//! sectoral price levels. Targets are the matching wage and price Phillips
//! curves. The output gap of each country is a linear function of all
//! unknowns (demand, trade and the common policy rate), so the Jacobian
//! has the form `A + B M` with `A` block-diagonal across countries and `B M`
//! of rank at most `N T`. Solves use the Woodbury identity on that split.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::Serialize;

use crate::blocks::{
    aggregate_wage_pc, apply_indexation, catch_up, cumsum, diff, experienced_path, fiscal_apply,
    kappa_price, lag, sector_price_residual, trade_demand, type_wage_pc_residual,
};
use crate::calibration::{
    CountryCalibration, Indexation, Sector, ShockScenario, Transfer, Union, WorkerGroup,
};
use crate::error::{Error, Result};
use crate::household::HouseholdJacobians;
use crate::suffstats::{kappa_aggregate, kappa_group};

/// Consumption block used for the output gap.
#[derive(Debug, Clone)]
pub enum Demand {
    /// Heterogeneous households through their sequence Jacobians.
    Hank(Arc<HouseholdJacobians>),
    /// Representative-agent Euler equation.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    /// Sup-norm tolerance on the target residuals
    pub tol: f64,
    pub max_iter: usize,
    /// Step length while the residual is large
    pub damping: f64,
    /// Residual below which full steps are taken
    pub damping_band: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-3,
            max_iter: 200,
            damping: 0.3,
            damping_band: 0.05,
        }
    }
}

impl SolverSettings {
    /// Tolerance used by the experiment runners.
    pub fn tight() -> Self {
        SolverSettings {
            tol: 1e-10,
            ..Self::default()
        }
    }
}

/// Exogenous paths of one country.
#[derive(Debug, Clone)]
struct Exog {
    pe_market: Vec<f64>,
    pe_consumer: Vec<f64>,
    dpe_consumer: Vec<f64>,
    push_d: Vec<f64>,
    push_s: Vec<f64>,
    net: Vec<Vec<f64>>,
    dnet: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Layout {
    offset: usize,
    groups: usize,
    /// Employment weights of each group in the services and goods wage
    sector_wage: [Vec<f64>; 2],
    /// (partner index, share)
    partners: Vec<(usize, f64)>,
    omega_d: f64,
    omega_s: f64,
    income_scale: Vec<f64>,
    eta: Vec<f64>,
}

impl Layout {
    fn mean_income_scale(&self) -> f64 {
        self.eta
            .iter()
            .zip(&self.income_scale)
            .map(|(e, m)| e * m)
            .sum()
    }
    fn size(&self, t: usize) -> usize {
        (self.groups + 2) * t
    }
    fn w(&self, g: usize, t: usize) -> usize {
        self.offset + g * t
    }
    fn pd(&self, t: usize) -> usize {
        self.offset + self.groups * t
    }
    fn ps(&self, t: usize) -> usize {
        self.offset + (self.groups + 1) * t
    }
}

fn sector_slot(s: Sector) -> usize {
    match s {
        Sector::Services => 0,
        Sector::Goods => 1,
    }
}

/// A union plus scenario, ready to evaluate and solve.
#[derive(Debug, Clone)]
pub struct Model {
    pub union: Union,
    pub scenario: ShockScenario,
    pub demand: Demand,
    t: usize,
    weights: Vec<f64>,
    layout: Vec<Layout>,
    exog: Vec<Exog>,
    ops: Vec<DemandOps>,
    rate_lu: LU<f64, Dyn, Dyn>,
}

/// Per-country demand operators.
#[derive(Debug, Clone)]
struct DemandOps {
    /// Response of the output gap to the policy rate path
    q: DMatrix<f64>,
    /// `(I − K)^{-1}` of the income-expenditure feedback, identity without it
    multiplier: DMatrix<f64>,
    /// Population-weighted income scale
    mbar: f64,
    /// Consumption response to the real rate net of the taxes that finance
    /// interest on household bonds
    c_r_net: DMatrix<f64>,
}

impl Model {
    pub fn new(union: Union, scenario: ShockScenario, demand: Demand) -> Result<Self> {
        union.validate_params()?;
        let t = union.common.horizon_t;
        scenario.validate(t)?;
        if let Demand::Hank(j) = &demand {
            if j.t != t {
                return Err(Error::Invalid(format!(
                    "household Jacobians have horizon {} but the model uses {t}",
                    j.t
                )));
            }
        }
        let weights = union.weights();
        let mut layout = Vec::with_capacity(union.countries.len());
        let mut offset = 0;
        for c in &union.countries {
            let g = c.groups.len();
            let mut sector_wage = [vec![0.0; g], vec![0.0; g]];
            for (slot, wts) in sector_wage.iter_mut().enumerate() {
                let members: f64 = c
                    .groups
                    .iter()
                    .filter(|gr| sector_slot(gr.sector) == slot)
                    .map(|gr| gr.eta)
                    .sum();
                for (k, gr) in c.groups.iter().enumerate() {
                    wts[k] = if members > 0.0 {
                        if sector_slot(gr.sector) == slot {
                            gr.eta / members
                        } else {
                            0.0
                        }
                    } else {
                        gr.eta
                    };
                }
            }
            let partners = c
                .trade_shares
                .iter()
                .map(|(code, s)| (union.country_index(code).expect("validated partner"), *s))
                .collect();
            let total = c.goods.gdp_weight + c.services.gdp_weight;
            let income_scale = c
                .groups
                .iter()
                .map(|gr| match (&demand, gr.mpc) {
                    (Demand::Hank(j), Some(m)) => m / j.mpc,
                    _ => 1.0,
                })
                .collect();
            let l = Layout {
                offset,
                groups: g,
                sector_wage,
                partners,
                omega_d: c.goods.gdp_weight / total,
                omega_s: c.services.gdp_weight / total,
                income_scale,
                eta: c.groups.iter().map(|g| g.eta).collect(),
            };
            offset += l.size(t);
            layout.push(l);
        }

        let mut exog = Vec::with_capacity(union.countries.len());
        let pe_market = cumsum(&scenario.essentials_path);
        for c in &union.countries {
            let fiscal = fiscal_apply(&scenario.policy, c, t)?;
            let pe_consumer: Vec<f64> = pe_market
                .iter()
                .zip(&fiscal.essentials_shift)
                .map(|(p, s)| p + s)
                .collect();
            exog.push(Exog {
                pe_market: pe_market.clone(),
                dpe_consumer: diff(&pe_consumer),
                pe_consumer,
                push_d: ShockScenario::padded(&scenario.goods_path, t),
                push_s: ShockScenario::padded(&scenario.services_path, t),
                dnet: fiscal.net.iter().map(|n| diff(n)).collect(),
                net: fiscal.net,
            });
        }

        let ops: Vec<DemandOps> = layout
            .iter()
            .map(|l| demand_ops(&demand, union.common.sigma, t, l))
            .collect::<Result<_>>()?;
        let mut rate = DMatrix::identity(t, t);
        for (o, w) in ops.iter().zip(&weights) {
            rate -= &o.q * (scenario.policy.taylor_y * w);
        }
        let rate_lu = rate.lu();
        let model = Model {
            union,
            scenario,
            demand,
            t,
            weights,
            layout,
            exog,
            ops,
            rate_lu,
        };
        model.check_determinacy()?;
        Ok(model)
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    pub fn n_unknowns(&self) -> usize {
        self.layout.iter().map(|l| l.size(self.t)).sum()
    }

    /// Normalized country weights used for union aggregates.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Long-run Taylor principle with the output response converted through
    /// the steady-state wage Phillips curve.
    fn check_determinacy(&self) -> Result<()> {
        let c = &self.union.common;
        let tail = *self.scenario.policy.taylor_pi_path.last().unwrap_or(&0.0);
        let kappa: f64 = self
            .union
            .countries
            .iter()
            .zip(&self.weights)
            .map(|(k, w)| w * kappa_aggregate(k, c.beta))
            .sum::<f64>()
            * (c.sigma + c.phi_n);
        let response = tail + (1.0 - c.beta) * self.scenario.policy.taylor_y / kappa;
        if response <= 1.0 {
            return Err(Error::Indeterminate { response });
        }
        Ok(())
    }

    /// Evaluate every block along the candidate path `u` and return the
    /// stacked target residuals with all intermediate paths.
    pub fn evaluate(&self, u: &[f64], nonlinear: bool) -> Result<Evaluation> {
        if u.len() != self.n_unknowns() {
            return Err(Error::Invalid(format!(
                "unknown vector has length {} but the model has {}",
                u.len(),
                self.n_unknowns()
            )));
        }
        let t = self.t;
        let common = &self.union.common;
        let pre: Vec<Pre> = self
            .union
            .countries
            .iter()
            .enumerate()
            .map(|(ci, c)| self.prepare(ci, c, u))
            .collect();

        // exports need every country's goods price
        let exports: Vec<Vec<f64>> = self
            .layout
            .iter()
            .zip(&pre)
            .map(|(l, p)| {
                let shares: Vec<f64> = l.partners.iter().map(|(_, s)| *s).collect();
                let partners: Vec<&[f64]> = l
                    .partners
                    .iter()
                    .map(|(k, _)| pre[*k].p_d.as_slice())
                    .collect();
                trade_demand(common.eps_trade, &shares, &p.p_d, &partners)
            })
            .collect();

        // union rate: i = Φ π_u + φ_y (x_u(i=0) + Q i)
        let zero = vec![0.0; t];
        let mut pi_u = vec![0.0; t];
        let mut x0_u = vec![0.0; t];
        for (ci, p) in pre.iter().enumerate() {
            let (_, x0) = self.demand_gap(ci, p, &exports[ci], &zero);
            let wgt = self.weights[ci];
            for s in 0..t {
                pi_u[s] += wgt * p.pi_core[s];
                x0_u[s] += wgt * x0[s];
            }
        }
        let policy = &self.scenario.policy;
        let rhs = DVector::from_iterator(
            t,
            (0..t).map(|s| policy.taylor_pi_path[s] * pi_u[s] + policy.taylor_y * x0_u[s]),
        );
        let rate: Vec<f64> = self
            .rate_lu
            .solve(&rhs)
            .ok_or(Error::Singular {
                condition: f64::INFINITY,
            })?
            .iter()
            .copied()
            .collect();

        let mut residual = Vec::with_capacity(self.n_unknowns());
        let mut countries = Vec::with_capacity(pre.len());
        let mut x_u = vec![0.0; t];
        for (ci, (c, p)) in self.union.countries.iter().zip(pre).enumerate() {
            let l = &self.layout[ci];
            let ex = &self.exog[ci];
            let (c_hat, x) = self.demand_gap(ci, &p, &exports[ci], &rate);
            for s in 0..t {
                x_u[s] += self.weights[ci] * x[s];
            }
            let omega_hat: Vec<f64> = x
                .iter()
                .map(|v| (common.sigma + common.phi_n) * v)
                .collect();

            let mut indexed = Vec::with_capacity(l.groups);
            let mut forcing = Vec::with_capacity(l.groups);
            let mut shock_forcing = Vec::with_capacity(l.groups);
            for (g, gr) in c.groups.iter().enumerate() {
                let pi_w = diff(&p.w[g]);
                let (ix, f) = apply_indexation(self.scenario.indexation, &p.pi_exp[g], &p.pi_bar)?;
                let mut r = type_wage_pc_residual(
                    gr,
                    common.beta,
                    &pi_w.iter().zip(&ix).map(|(a, b)| a - b).collect::<Vec<_>>(),
                    &f,
                    &omega_hat,
                )?;
                if nonlinear && common.b_catchup > 0.0 {
                    let cu = catch_up(&p.p_group[g], &lag(&p.w[g]), common.b_catchup);
                    r.iter_mut().zip(cu).for_each(|(v, k)| *v -= gr.theta * k);
                }
                residual.extend(r);
                indexed.push(pi_w.iter().zip(&ix).map(|(a, b)| a - b).collect::<Vec<_>>());
                forcing.push(f);
                shock_forcing.push(experienced_path(
                    gr,
                    common.lambda_e,
                    &ex.dpe_consumer,
                    &ex.push_d,
                    &ex.push_s,
                    &ex.dnet[g],
                ));
            }
            for (own, slot) in [(Sector::Goods, 1), (Sector::Services, 0)] {
                let wage: Vec<f64> = (0..t)
                    .map(|s| {
                        l.sector_wage[slot]
                            .iter()
                            .zip(&p.w)
                            .map(|(a, w)| a * w[s])
                            .sum()
                    })
                    .collect();
                let push = if own == Sector::Goods {
                    &ex.push_d
                } else {
                    &ex.push_s
                };
                residual.extend(sector_price_residual(
                    c.sector(own),
                    common.beta,
                    own,
                    &wage,
                    &p.p_s,
                    &p.p_d,
                    &ex.pe_market,
                    push,
                )?);
            }

            let dec = aggregate_wage_pc(c, common.beta, &indexed, &forcing, &omega_hat)?;
            let shock_bar: Vec<f64> = (0..t)
                .map(|s| {
                    c.groups
                        .iter()
                        .zip(&shock_forcing)
                        .map(|(g, f)| g.eta * f[s])
                        .sum()
                })
                .collect();
            let (_, shock_forcing_ix): (Vec<_>, Vec<_>) = shock_forcing
                .iter()
                .map(|f| apply_indexation(self.scenario.indexation, f, &shock_bar))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let zeros = vec![vec![0.0; t]; l.groups];
            let shock_dec =
                aggregate_wage_pc(c, common.beta, &zeros, &shock_forcing_ix, &vec![0.0; t])?;

            let real_rate: Vec<f64> = (0..t)
                .map(|s| {
                    if s == 0 {
                        0.0
                    } else {
                        rate[s - 1] - p.pi_cpi[s]
                    }
                })
                .collect();
            countries.push(CountryPaths {
                code: c.code.clone(),
                groups: c.groups.iter().map(|g| g.label.clone()).collect(),
                pi_w_group: p.w.iter().map(|w| diff(w)).collect(),
                pi_w: dec.pi_w.clone(),
                wage: p.w,
                pi_exp_group: p.pi_exp,
                p_goods: p.p_d,
                p_services: p.p_s,
                p_essentials: ex.pe_consumer.clone(),
                pi_core: p.pi_core,
                pi_cpi: p.pi_cpi,
                pi_bar: p.pi_bar,
                rwei: dec.rwei.clone(),
                omega: dec
                    .rwei
                    .iter()
                    .zip(&dec.pi_bar)
                    .map(|(a, b)| a - b)
                    .collect(),
                omega_shock: shock_dec
                    .rwei
                    .iter()
                    .zip(&shock_dec.pi_bar)
                    .map(|(a, b)| a - b)
                    .collect(),
                wedge_term: dec.wedge_term,
                level_term: dec.level_term,
                gap_term: dec.gap_term,
                c_hat,
                exports: exports[ci].clone(),
                real_rate,
                x,
            });
        }
        Ok(Evaluation {
            residual: DVector::from_vec(residual),
            union: UnionPaths {
                rate,
                pi_core: pi_u,
                x: x_u,
            },
            countries,
        })
    }

    fn prepare(&self, ci: usize, c: &CountryCalibration, u: &[f64]) -> Pre {
        let t = self.t;
        let l = &self.layout[ci];
        let ex = &self.exog[ci];
        let lambda = self.union.common.lambda_e;
        let w: Vec<Vec<f64>> = (0..l.groups)
            .map(|g| u[l.w(g, t)..l.w(g, t) + t].to_vec())
            .collect();
        let p_d = u[l.pd(t)..l.pd(t) + t].to_vec();
        let p_s = u[l.ps(t)..l.ps(t) + t].to_vec();
        let dpd = diff(&p_d);
        let dps = diff(&p_s);
        let pi_exp: Vec<Vec<f64>> = c
            .groups
            .iter()
            .zip(&ex.dnet)
            .map(|(g, dn)| experienced_path(g, lambda, &ex.dpe_consumer, &dpd, &dps, dn))
            .collect();
        let pi_bar = (0..t)
            .map(|s| {
                c.groups
                    .iter()
                    .zip(&pi_exp)
                    .map(|(g, p)| g.eta * p[s])
                    .sum()
            })
            .collect();
        let pi_cpi = (0..t)
            .map(|s| {
                c.mean_by(|g| g.alpha_e) * ex.dpe_consumer[s]
                    + c.mean_by(|g| g.alpha_d) * dpd[s]
                    + c.mean_by(|g| g.alpha_s) * dps[s]
            })
            .collect();
        let pi_core = (0..t)
            .map(|s| l.omega_d * dpd[s] + l.omega_s * dps[s])
            .collect();
        let consumer = |g: &WorkerGroup, s: usize| {
            g.alpha_e * ex.pe_consumer[s] + g.alpha_d * p_d[s] + g.alpha_s * p_s[s]
        };
        let p_group = c
            .groups
            .iter()
            .zip(&ex.net)
            .map(|(g, n)| (0..t).map(|s| consumer(g, s) - n[s]).collect())
            .collect();
        // income redistribution across groups matters only with unequal
        // income scales; aggregate labor income follows output
        let mbar = self.ops[ci].mbar;
        let mut real_wage = vec![0.0; t];
        let mut transfer = vec![0.0; t];
        for (k, g) in c.groups.iter().enumerate() {
            let scale = g.eta * l.income_scale[k];
            let excess = g.eta * (l.income_scale[k] - mbar);
            for s in 0..t {
                real_wage[s] += excess * (w[k][s] - consumer(g, s));
                transfer[s] += scale * ex.net[k][s];
            }
        }
        Pre {
            w,
            p_d,
            p_s,
            pi_exp,
            pi_bar,
            pi_cpi,
            pi_core,
            p_group,
            real_wage,
            transfer,
        }
    }

    /// Consumption deviation and output gap of country `ci` given the rate
    /// path.
    fn demand_gap(
        &self,
        ci: usize,
        p: &Pre,
        exports: &[f64],
        rate: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let t = self.t;
        let open = self.layout[ci].omega_d;
        match &self.demand {
            Demand::Hank(j) => {
                let r = DVector::from_iterator(
                    t,
                    (0..t).map(|s| {
                        if s == 0 {
                            0.0
                        } else {
                            rate[s - 1] - p.pi_cpi[s]
                        }
                    }),
                );
                let wv = DVector::from_column_slice(&p.real_wage) * j.w_ss;
                let tv = DVector::from_column_slice(&p.transfer) * j.w_ss;
                let ex = DVector::from_column_slice(exports) * open;
                let direct =
                    (&j.c_w * wv + &j.c_transfer * tv + &self.ops[ci].c_r_net * r) / j.c_ss + ex;
                let x = &self.ops[ci].multiplier * direct;
                let c: Vec<f64> = (0..t).map(|s| x[s] - open * exports[s]).collect();
                (c, x.iter().copied().collect())
            }
            Demand::Euler => {
                let sigma = self.union.common.sigma;
                let mut c = vec![0.0; t];
                for s in (0..t).rev() {
                    let next = if s + 1 < t { c[s + 1] } else { 0.0 };
                    let pi_next = if s + 1 < t { p.pi_cpi[s + 1] } else { 0.0 };
                    c[s] = next - (rate[s] - pi_next) / sigma;
                }
                let x = (0..t).map(|s| c[s] + open * exports[s]).collect();
                (c, x)
            }
        }
    }

    /// Stacked residual of the targets.
    pub fn residual(&self, u: &[f64], nonlinear: bool) -> Result<DVector<f64>> {
        Ok(self.evaluate(u, nonlinear)?.residual)
    }

    /// Linear part of the system in structured form.
    pub fn linear_system(&self) -> LinearSystem {
        let t = self.t;
        let common = &self.union.common;
        let beta = common.beta;
        let n = self.n_unknowns();
        let eye = DMatrix::<f64>::identity(t, t);
        let lagm = DMatrix::<f64>::from_fn(t, t, |r, c| if r == c + 1 { 1.0 } else { 0.0 });
        let leadm = DMatrix::<f64>::from_fn(t, t, |r, c| if c == r + 1 { 1.0 } else { 0.0 });
        let d = &eye - &lagm;
        let pc = &eye - &leadm * beta;
        let pcd = &pc * &d;
        let pcld = &pc * &lagm * &d;
        let gamma = self.scenario.indexation.gamma();

        let mut blocks = Vec::with_capacity(self.layout.len());
        let mut couplings = Vec::with_capacity(self.layout.len());
        let mut g_rows = DMatrix::<f64>::zeros(self.layout.len() * t, n);
        let mut core_u = DMatrix::<f64>::zeros(t, n);
        for (ci, (c, l)) in self.union.countries.iter().zip(&self.layout).enumerate() {
            let size = l.size(t);
            let off = l.offset;
            let loc = |k: usize| k - off;
            let mut a = DMatrix::<f64>::zeros(size, size);
            let mut b = DMatrix::<f64>::zeros(size, t);
            let bar_d = c.mean_by(|g| g.alpha_d);
            let bar_s = c.mean_by(|g| g.alpha_s);
            for (g, gr) in c.groups.iter().enumerate() {
                let row = loc(l.w(g, t));
                let eff = gr.theta * (1.0 + gr.phi);
                let (ind_d, ind_s, f_d, f_s) = match self.scenario.indexation {
                    Indexation::None => (0.0, 0.0, gr.alpha_d, gr.alpha_s),
                    Indexation::Cpi { .. } => (
                        bar_d,
                        bar_s,
                        gr.alpha_d - gamma * bar_d,
                        gr.alpha_s - gamma * bar_s,
                    ),
                    Indexation::TypeSpecific { .. } => (
                        gr.alpha_d,
                        gr.alpha_s,
                        (1.0 - gamma) * gr.alpha_d,
                        (1.0 - gamma) * gr.alpha_s,
                    ),
                };
                a.view_mut((row, row), (t, t)).copy_from(&pcd);
                a.view_mut((row, loc(l.pd(t))), (t, t))
                    .copy_from(&(&pcld * (-gamma * ind_d) - &d * (eff * f_d)));
                a.view_mut((row, loc(l.ps(t))), (t, t))
                    .copy_from(&(&pcld * (-gamma * ind_s) - &d * (eff * f_s)));
                let slope = kappa_group(gr.theta, beta) * (common.sigma + common.phi_n);
                b.view_mut((row, 0), (t, t)).copy_from(&(&eye * -slope));
            }
            for (own, slot) in [(Sector::Goods, 1usize), (Sector::Services, 0usize)] {
                let sp = c.sector(own);
                let kp = kappa_price(sp.calvo_reset, beta);
                let row = loc(if own == Sector::Goods {
                    l.pd(t)
                } else {
                    l.ps(t)
                });
                let inter = kp * (1.0 - sp.labor_share) * (1.0 - sp.essentials_input_share);
                let (own_io, other_io, other_col) = match own {
                    Sector::Goods => (sp.io_weights.goods, sp.io_weights.services, loc(l.ps(t))),
                    Sector::Services => (sp.io_weights.services, sp.io_weights.goods, loc(l.pd(t))),
                };
                a.view_mut((row, row), (t, t))
                    .copy_from(&(&pcd + &eye * (kp - inter * own_io)));
                a.view_mut((row, other_col), (t, t))
                    .copy_from(&(&eye * (-inter * other_io)));
                for g in 0..l.groups {
                    let share = l.sector_wage[slot][g];
                    if share != 0.0 {
                        a.view_mut((row, loc(l.w(g, t))), (t, t))
                            .copy_from(&(&eye * (-kp * sp.labor_share * share)));
                    }
                }
            }
            blocks.push(a);
            couplings.push(b);

            // consumption and exports at a zero rate path
            let mut gc = g_rows.view_mut((ci * t, 0), (t, n));
            match &self.demand {
                Demand::Hank(j) => {
                    let kw = &j.c_w * (j.w_ss / j.c_ss);
                    let mut cpi = DMatrix::<f64>::zeros(t, t);
                    for s in 1..t {
                        cpi.set_row(s, &d.row(s));
                    }
                    let kr = &self.ops[ci].c_r_net * (-1.0 / j.c_ss) * &cpi;
                    let mut pd_col = &kr * bar_d;
                    let mut ps_col = &kr * bar_s;
                    let mbar = self.ops[ci].mbar;
                    for (g, gr) in c.groups.iter().enumerate() {
                        let sc = gr.eta * (l.income_scale[g] - mbar);
                        gc.view_mut((0, l.w(g, t)), (t, t)).copy_from(&(&kw * sc));
                        pd_col -= &kw * (sc * gr.alpha_d);
                        ps_col -= &kw * (sc * gr.alpha_s);
                    }
                    gc.view_mut((0, l.pd(t)), (t, t)).copy_from(&pd_col);
                    gc.view_mut((0, l.ps(t)), (t, t)).copy_from(&ps_col);
                }
                Demand::Euler => {
                    let sf = DMatrix::<f64>::from_fn(t, t, |r, c| if c >= r { 1.0 } else { 0.0 });
                    let k = sf * &leadm * &d / common.sigma;
                    gc.view_mut((0, l.pd(t)), (t, t)).copy_from(&(&k * bar_d));
                    gc.view_mut((0, l.ps(t)), (t, t)).copy_from(&(&k * bar_s));
                }
            }
            let trade = common.eps_trade * l.omega_d;
            for (k, share) in &l.partners {
                let partner = &self.layout[*k];
                let mut own_block = gc.view_mut((0, l.pd(t)), (t, t));
                own_block -= &eye * (trade * share);
                let mut other = gc.view_mut((0, partner.pd(t)), (t, t));
                other += &eye * (trade * share);
            }
            if let Demand::Hank(_) = &self.demand {
                let scaled = &self.ops[ci].multiplier * gc.clone_owned();
                gc.copy_from(&scaled);
            }

            let wgt = self.weights[ci];
            let mut cu = core_u.view_mut((0, l.pd(t)), (t, t));
            cu += &d * (wgt * l.omega_d);
            let mut cu = core_u.view_mut((0, l.ps(t)), (t, t));
            cu += &d * (wgt * l.omega_s);
        }

        // i = (I - φ_y Q)^{-1} (Φ π_u + φ_y x0_u)
        let policy = &self.scenario.policy;
        let mut x0_u = DMatrix::<f64>::zeros(t, n);
        for ci in 0..self.layout.len() {
            x0_u += g_rows.rows(ci * t, t) * self.weights[ci];
        }
        let phi = DMatrix::from_diagonal(&DVector::from_column_slice(&policy.taylor_pi_path));
        let rate_rhs = phi * core_u + x0_u * policy.taylor_y;
        let lambda = self
            .rate_lu
            .solve(&rate_rhs)
            .expect("rate operator is invertible");
        let mut m = g_rows;
        for ci in 0..self.layout.len() {
            let qlam = &self.ops[ci].q * &lambda;
            let mut rows = m.rows_mut(ci * t, t);
            rows += &qlam;
        }
        LinearSystem {
            t,
            offsets: self.layout.iter().map(|l| l.offset).collect(),
            blocks,
            couplings,
            m,
        }
    }

    /// Quarters where the catch-up term binds, per country and group.
    pub fn catch_up_active(&self, u: &[f64]) -> Vec<Vec<Vec<bool>>> {
        let b = self.union.common.b_catchup;
        self.union
            .countries
            .iter()
            .enumerate()
            .map(|(ci, c)| {
                let p = self.prepare(ci, c, u);
                p.p_group
                    .iter()
                    .zip(&p.w)
                    .map(|(pg, w)| {
                        let wl = lag(w);
                        pg.iter()
                            .zip(&wl)
                            .map(|(a, v)| b > 0.0 && a - v > 0.0)
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Linear system plus the derivative of the catch-up term where it binds.
    pub fn linear_system_at(&self, active: &[Vec<Vec<bool>>]) -> LinearSystem {
        let mut sys = self.linear_system();
        let t = self.t;
        let b = self.union.common.b_catchup;
        for (ci, (c, l)) in self.union.countries.iter().zip(&self.layout).enumerate() {
            let a = &mut sys.blocks[ci];
            let off = l.offset;
            for (g, gr) in c.groups.iter().enumerate() {
                let k = gr.theta * b;
                let row0 = l.w(g, t) - off;
                for s in (0..t).filter(|s| active[ci][g][*s]) {
                    if s > 0 {
                        a[(row0 + s, row0 + s - 1)] += k;
                    }
                    a[(row0 + s, l.pd(t) - off + s)] -= k * gr.alpha_d;
                    a[(row0 + s, l.ps(t) - off + s)] -= k * gr.alpha_s;
                }
            }
        }
        sys
    }

    /// Copy of the model with a different essentials path and no fiscal
    /// or cost-push terms. Skips scenario validation so that impulses at
    /// any date are allowed.
    fn with_essentials_only(&self, path: &[f64]) -> Model {
        let mut m = self.clone();
        let pe = cumsum(path);
        for (ex, l) in m.exog.iter_mut().zip(&self.layout) {
            ex.pe_market = pe.clone();
            ex.pe_consumer = pe.clone();
            ex.dpe_consumer = path.to_vec();
            ex.push_d = vec![0.0; self.t];
            ex.push_s = vec![0.0; self.t];
            ex.net = vec![vec![0.0; self.t]; l.groups];
            ex.dnet = ex.net.clone();
        }
        m
    }

    /// Jacobian of the targets with respect to the essentials path, by
    /// unit impulses through the evaluator.
    pub fn essentials_jacobian(&self) -> Result<DMatrix<f64>> {
        let n = self.n_unknowns();
        let u = vec![0.0; n];
        let r0 = self
            .with_essentials_only(&vec![0.0; self.t])
            .residual(&u, false)?;
        let mut fz = DMatrix::zeros(n, self.t);
        for s in 0..self.t {
            let mut path = vec![0.0; self.t];
            path[s] = 1.0;
            let r = self.with_essentials_only(&path).residual(&u, false)?;
            fz.set_column(s, &(r - &r0));
        }
        Ok(fz)
    }
}

/// Per-country paths that depend only on the candidate unknowns.
struct Pre {
    w: Vec<Vec<f64>>,
    p_d: Vec<f64>,
    p_s: Vec<f64>,
    pi_exp: Vec<Vec<f64>>,
    pi_bar: Vec<f64>,
    pi_cpi: Vec<f64>,
    pi_core: Vec<f64>,
    p_group: Vec<Vec<f64>>,
    real_wage: Vec<f64>,
    transfer: Vec<f64>,
}

/// Demand operators of one country. With household Jacobians, labor income
/// moves with output, which closes an income-expenditure multiplier
/// `x = (I − K)^{-1}(direct effects)` with `K = m̄ (w/C) J^{C,w}`. The rate
/// path enters only through the real rate.
fn demand_ops(demand: &Demand, sigma: f64, t: usize, l: &Layout) -> Result<DemandOps> {
    match demand {
        Demand::Hank(j) => {
            // income scales are population weighted through the layout
            let mbar = l.mean_income_scale();
            let k = &j.c_w * (mbar * j.w_ss / j.c_ss);
            let multiplier =
                (DMatrix::identity(t, t) - k)
                    .try_inverse()
                    .ok_or(Error::Singular {
                        condition: f64::INFINITY,
                    })?;
            let c_r_net = &j.c_r - &j.c_transfer * j.a_ss;
            let raw = DMatrix::from_fn(t, t, |r, c| {
                if c + 1 < t {
                    c_r_net[(r, c + 1)] / j.c_ss
                } else {
                    0.0
                }
            });
            Ok(DemandOps {
                q: &multiplier * raw,
                multiplier,
                mbar,
                c_r_net,
            })
        }
        Demand::Euler => Ok(DemandOps {
            q: DMatrix::from_fn(t, t, |r, c| if c >= r { -1.0 / sigma } else { 0.0 }),
            multiplier: DMatrix::identity(t, t),
            mbar: 1.0,
            c_r_net: DMatrix::zeros(0, 0),
        }),
    }
}

/// `F_X = A + B M` kept in factors.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub t: usize,
    pub offsets: Vec<usize>,
    /// Country diagonal blocks of `A`
    pub blocks: Vec<DMatrix<f64>>,
    /// Country blocks of `B`: response of the targets to that country's output gap
    pub couplings: Vec<DMatrix<f64>>,
    /// Output gaps as a linear function of all unknowns
    pub m: DMatrix<f64>,
}

impl LinearSystem {
    pub fn size(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    /// Dense `F_X`; only sensible for small systems.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut f = DMatrix::zeros(n, n);
        for (ci, (a, b)) in self.blocks.iter().zip(&self.couplings).enumerate() {
            let off = self.offsets[ci];
            let k = a.nrows();
            let mut view = f.view_mut((off, off), (k, k));
            view += a;
            let bm = b * self.m.rows(ci * self.t, self.t);
            let mut rows = f.rows_mut(off, k);
            rows += bm;
        }
        f
    }

    /// Factor with the Woodbury identity. Fails on numerically singular
    /// pieces.
    pub fn factor(&self) -> Result<Factorization> {
        let t = self.t;
        let mut lus = Vec::with_capacity(self.blocks.len());
        let mut z = Vec::with_capacity(self.blocks.len());
        let mut condition: f64 = 1.0;
        for (a, b) in self.blocks.iter().zip(&self.couplings) {
            let lu = a.clone().lu();
            condition = condition.max(pivot_ratio(&lu));
            let zc = lu.solve(b).ok_or(Error::Singular {
                condition: f64::INFINITY,
            })?;
            z.push(zc);
            lus.push(lu);
        }
        let nt = self.blocks.len() * t;
        let mut cap = DMatrix::<f64>::identity(nt, nt);
        for (ci, zc) in z.iter().enumerate() {
            let cols = self.m.columns(self.offsets[ci], zc.nrows());
            let mut view = cap.columns_mut(ci * t, t);
            view += cols * zc;
        }
        let cap_lu = cap.lu();
        condition = condition.max(pivot_ratio(&cap_lu));
        if !condition.is_finite() || condition > 1e13 {
            return Err(Error::Singular { condition });
        }
        Ok(Factorization {
            t,
            offsets: self.offsets.clone(),
            lus,
            z,
            cap_lu,
            m: self.m.clone(),
            condition,
        })
    }
}

fn pivot_ratio(lu: &LU<f64, Dyn, Dyn>) -> f64 {
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone)]
pub struct Factorization {
    t: usize,
    offsets: Vec<usize>,
    lus: Vec<LU<f64, Dyn, Dyn>>,
    z: Vec<DMatrix<f64>>,
    cap_lu: LU<f64, Dyn, Dyn>,
    m: DMatrix<f64>,
    condition: f64,
}

impl Factorization {
    /// Pivot-ratio estimate of the condition number.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solve `F_X y = h`.
    pub fn solve(&self, h: &DVector<f64>) -> DVector<f64> {
        let t = self.t;
        let mut a = DVector::zeros(h.len());
        for (ci, lu) in self.lus.iter().enumerate() {
            let off = self.offsets[ci];
            let k = self.z[ci].nrows();
            let part = lu
                .solve(&h.rows(off, k).into_owned())
                .expect("factored block");
            a.rows_mut(off, k).copy_from(&part);
        }
        let ma = &self.m * &a;
        let v = self.cap_lu.solve(&ma).expect("factored capacitance");
        for (ci, zc) in self.z.iter().enumerate() {
            let off = self.offsets[ci];
            let corr = zc * v.rows(ci * t, t);
            let mut rows = a.rows_mut(off, zc.nrows());
            rows -= corr;
        }
        a
    }
}

/// Blocks of the model in evaluation order, with the paths each reads and
/// writes. Used to check that the evaluator has no cycles.
#[derive(Debug, Clone, Serialize)]
pub struct BlockSpec {
    pub name: &'static str,
    pub inputs: Vec<&'static str>,
    pub outputs: Vec<&'static str>,
}

pub fn system_graph() -> Vec<BlockSpec> {
    let b = |name, inputs: &[&'static str], outputs: &[&'static str]| BlockSpec {
        name,
        inputs: inputs.to_vec(),
        outputs: outputs.to_vec(),
    };
    vec![
        b(
            "fiscal",
            &["transfer", "subsidy"],
            &["net_transfer", "p_e_consumer"],
        ),
        b(
            "prices",
            &["p_d", "p_s", "p_e_consumer", "net_transfer"],
            &["pi_exp", "pi_bar", "pi_cpi", "pi_core", "p_group"],
        ),
        b("trade", &["p_d"], &["exports"]),
        b(
            "income",
            &["w", "p_group", "net_transfer"],
            &["real_wage", "transfer_income"],
        ),
        b(
            "policy",
            &[
                "pi_core",
                "real_wage",
                "transfer_income",
                "pi_cpi",
                "exports",
            ],
            &["i"],
        ),
        b(
            "households",
            &["real_wage", "transfer_income", "i", "pi_cpi", "exports"],
            &["c_hat", "x"],
        ),
        b(
            "wage_pc",
            &["w", "pi_exp", "pi_bar", "x", "p_group"],
            &["wage_residual"],
        ),
        b(
            "price_pc",
            &["w", "p_d", "p_s", "p_e_market"],
            &["price_residual"],
        ),
    ]
}

/// Topological check: every input is either exogenous/unknown or produced by
/// an earlier block, and no block writes a path twice.
pub fn check_graph(graph: &[BlockSpec], roots: &[&str]) -> Result<()> {
    let mut known: std::collections::BTreeSet<&str> = roots.iter().copied().collect();
    for blk in graph {
        if let Some(missing) = blk.inputs.iter().find(|i| !known.contains(*i)) {
            return Err(Error::Invalid(format!(
                "block {} reads {missing} before it is written",
                blk.name
            )));
        }
        for o in &blk.outputs {
            if !known.insert(o) {
                return Err(Error::Invalid(format!("path {o} written twice")));
            }
        }
    }
    Ok(())
}

/// Evaluator output at one candidate path.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub residual: DVector<f64>,
    pub countries: Vec<CountryPaths>,
    pub union: UnionPaths,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountryPaths {
    pub code: String,
    pub groups: Vec<String>,
    /// Log wage level by group
    pub wage: Vec<Vec<f64>>,
    pub pi_w_group: Vec<Vec<f64>>,
    pub pi_exp_group: Vec<Vec<f64>>,
    pub pi_w: Vec<f64>,
    pub p_goods: Vec<f64>,
    pub p_services: Vec<f64>,
    /// Consumer price of essentials, net of any subsidy
    pub p_essentials: Vec<f64>,
    pub pi_core: Vec<f64>,
    pub pi_cpi: Vec<f64>,
    pub pi_bar: Vec<f64>,
    pub rwei: Vec<f64>,
    /// Wedge between reset-weighted and average experienced inflation
    pub omega: Vec<f64>,
    /// Wedge implied by the exogenous price impulses alone
    pub omega_shock: Vec<f64>,
    pub wedge_term: Vec<f64>,
    pub level_term: Vec<f64>,
    pub gap_term: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub exports: Vec<f64>,
    pub real_rate: Vec<f64>,
    pub x: Vec<f64>,
}

impl CountryPaths {
    /// Sum of core inflation over the first `quarters` quarters.
    pub fn cumulative_core(&self, quarters: usize) -> f64 {
        self.pi_core.iter().take(quarters).sum()
    }

    /// Discounted quadratic loss in core inflation and the output gap.
    pub fn loss(&self, beta: f64, weight_x: f64) -> f64 {
        self.pi_core
            .iter()
            .zip(&self.x)
            .enumerate()
            .map(|(t, (p, x))| beta.powi(t as i32) * (p * p + weight_x * x * x))
            .sum()
    }

    /// First quarter after the peak at which core inflation is below half
    /// of its peak; `None` if it never gets there.
    pub fn half_life(&self) -> Option<usize> {
        half_life(&self.pi_core)
    }

    fn named(&self) -> Vec<(String, &Vec<f64>)> {
        let mut v: Vec<(String, &Vec<f64>)> = Vec::new();
        for (g, label) in self.groups.iter().enumerate() {
            v.push((format!("w_{label}"), &self.wage[g]));
            v.push((format!("pi_w_{label}"), &self.pi_w_group[g]));
            v.push((format!("pi_exp_{label}"), &self.pi_exp_group[g]));
        }
        for (k, p) in [
            ("pi_w", &self.pi_w),
            ("p_goods", &self.p_goods),
            ("p_services", &self.p_services),
            ("p_essentials", &self.p_essentials),
            ("pi_core", &self.pi_core),
            ("pi_cpi", &self.pi_cpi),
            ("pi_bar", &self.pi_bar),
            ("rwei", &self.rwei),
            ("omega", &self.omega),
            ("omega_shock", &self.omega_shock),
            ("wedge_term", &self.wedge_term),
            ("level_term", &self.level_term),
            ("gap_term", &self.gap_term),
            ("c_hat", &self.c_hat),
            ("exports", &self.exports),
            ("real_rate", &self.real_rate),
            ("x", &self.x),
        ] {
            v.push((k.to_string(), p));
        }
        v
    }
}

/// First index after the peak of `path` where it falls below half the peak.
pub fn half_life(path: &[f64]) -> Option<usize> {
    let (peak_t, peak) = path
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (t, v)| {
            if *v > acc.1 {
                (t, *v)
            } else {
                acc
            }
        });
    if peak <= 0.0 {
        return None;
    }
    path.iter()
        .enumerate()
        .skip(peak_t)
        .find(|(_, v)| **v < 0.5 * peak)
        .map(|(t, _)| t)
}

#[derive(Debug, Clone, Serialize)]
pub struct UnionPaths {
    /// Policy rate deviation
    pub rate: Vec<f64>,
    pub pi_core: Vec<f64>,
    pub x: Vec<f64>,
}

/// Solved transition with convergence diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionResult {
    pub horizon: usize,
    pub nonlinear: bool,
    pub iterations: usize,
    /// Sup norm of the target residuals at the solution
    pub residual: f64,
    pub condition: f64,
    pub weights: Vec<f64>,
    pub countries: Vec<CountryPaths>,
    pub union: UnionPaths,
    #[serde(skip)]
    pub unknowns: Vec<f64>,
}

impl TransitionResult {
    pub fn country(&self, code: &str) -> Option<&CountryPaths> {
        self.countries.iter().find(|c| c.code == code)
    }

    /// GDP-weighted union loss.
    pub fn union_loss(&self, beta: f64, weight_x: f64) -> f64 {
        self.countries
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * c.loss(beta, weight_x))
            .sum()
    }

    /// Union-weighted cumulative core inflation over `quarters`.
    pub fn union_cumulative_core(&self, quarters: usize) -> f64 {
        self.union.pi_core.iter().take(quarters).sum()
    }

    /// Long format: country, variable, quarter, value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["country", "variable", "quarter", "value"])
            .map_err(|e| csv_err(path, e))?;
        let mut put = |country: &str, var: &str, p: &[f64]| -> Result<()> {
            for (t, v) in p.iter().enumerate() {
                w.write_record([country, var, &t.to_string(), &format!("{v:.17e}")])
                    .map_err(|e| csv_err(path, e))?;
            }
            Ok(())
        };
        for c in &self.countries {
            for (name, p) in c.named() {
                put(&c.code, &name, p)?;
            }
        }
        put("UNION", "rate", &self.union.rate)?;
        put("UNION", "pi_core", &self.union.pi_core)?;
        put("UNION", "x", &self.union.x)?;
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::calibration::write_json(path, self)
    }
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn finish(
    model: &Model,
    u: DVector<f64>,
    nonlinear: bool,
    iterations: usize,
    condition: f64,
) -> Result<TransitionResult> {
    let ev = model.evaluate(u.as_slice(), nonlinear)?;
    Ok(TransitionResult {
        horizon: model.t,
        nonlinear,
        iterations,
        residual: ev.residual.amax(),
        condition,
        weights: model.weights.clone(),
        countries: ev.countries,
        union: ev.union,
        unknowns: u.iter().copied().collect(),
    })
}

/// Solution of the model without the catch-up term: one exact Newton step
/// from the steady state.
pub fn solve_linear(model: &Model) -> Result<TransitionResult> {
    let f = model.linear_system().factor()?;
    let zero = vec![0.0; model.n_unknowns()];
    let h = model.residual(&zero, false)?;
    let u = -f.solve(&h);
    finish(model, u, false, 1, f.condition())
}

/// Semi-smooth Newton on the full residual. The Jacobian is the linear one
/// plus the catch-up derivative on the quarters where the catch-up binds; it
/// is refactored only when that set changes. Steps are damped while the
/// residual is large.
pub fn solve_nonlinear(model: &Model, settings: &SolverSettings) -> Result<TransitionResult> {
    let mut u = DVector::zeros(model.n_unknowns());
    let mut active = model.catch_up_active(u.as_slice());
    let mut f = model.linear_system_at(&active).factor()?;
    let mut res = f64::INFINITY;
    for it in 0..settings.max_iter {
        let h = model.residual(u.as_slice(), true)?;
        res = h.amax();
        log::debug!("Newton iteration {it}: residual {res:e}");
        if !res.is_finite() {
            break;
        }
        if res < settings.tol {
            return finish(model, u, true, it, f.condition());
        }
        let now = model.catch_up_active(u.as_slice());
        if now != active {
            active = now;
            f = model.linear_system_at(&active).factor()?;
        }
        let step = if res > settings.damping_band {
            settings.damping
        } else {
            1.0
        };
        u -= f.solve(&h) * step;
    }
    Err(Error::NoConvergence {
        iterations: settings.max_iter,
        residual: res,
    })
}

/// Solve with the scenario's own linear/nonlinear flag.
pub fn solve(model: &Model, settings: &SolverSettings) -> Result<TransitionResult> {
    if model.scenario.nonlinear {
        solve_nonlinear(model, settings)
    } else {
        solve_linear(model)
    }
}

/// Single representative worker per country: reset probability and basket
/// pooled with population weights, no expectation amplifier.
pub fn standard_country(country: &CountryCalibration) -> CountryCalibration {
    let mut c = country.clone();
    c.groups = vec![WorkerGroup {
        label: "ALL".into(),
        eta: 1.0,
        theta: country.mean_by(|g| g.theta),
        alpha_e: country.mean_by(|g| g.alpha_e),
        alpha_d: country.mean_by(|g| g.alpha_d),
        alpha_s: country.mean_by(|g| g.alpha_s),
        sector: Sector::Services,
        phi: 0.0,
        mpc: None,
    }];
    c
}

/// Standard-model twin of a union: pooled workers and no catch-up. Group
/// transfers net out with one worker type, so they are dropped.
pub fn standard_twin(union: &Union, scenario: &ShockScenario) -> (Union, ShockScenario) {
    let mut u = union.clone();
    u.common.b_catchup = 0.0;
    u.countries = union.countries.iter().map(standard_country).collect();
    let mut s = scenario.clone();
    s.policy.transfer = Transfer::None;
    (u, s)
}

/// Solve the standard twin of a model.
pub fn run_standard_twin(model: &Model, settings: &SolverSettings) -> Result<TransitionResult> {
    let (u, s) = standard_twin(&model.union, &model.scenario);
    let twin = Model::new(u, s, model.demand.clone())?;
    solve(&twin, settings)
}

/// Heterogeneous solution and its standard twin.
pub fn solve_pair(
    model: &Model,
    settings: &SolverSettings,
) -> Result<(TransitionResult, TransitionResult)> {
    Ok((solve(model, settings)?, run_standard_twin(model, settings)?))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::calibration::tests::sample_common;
    use crate::calibration::{ar1_path, PolicyRegime};
    use crate::suffstats::tests::two_type;

    pub(crate) fn small_union(t: usize) -> Union {
        let mut common = sample_common();
        common.horizon_t = t;
        let mut c = two_type();
        c.groups.iter_mut().for_each(|g| g.phi = 0.35);
        Union {
            common,
            countries: vec![c],
        }
    }

    pub(crate) fn two_country(t: usize) -> Union {
        let mut u = small_union(t);
        let mut a = u.countries[0].clone();
        a.code = "AA".into();
        let mut b = a.clone();
        b.code = "BB".into();
        b.groups[0].theta = 0.3;
        b.services.labor_share = 0.7;
        a.gdp_weight = 0.6;
        b.gdp_weight = 0.4;
        a.trade_shares = [("BB".to_string(), 1.0)].into_iter().collect();
        b.trade_shares = [("AA".to_string(), 1.0)].into_iter().collect();
        u.countries = vec![a, b];
        u
    }

    fn scenario(u: &Union) -> ShockScenario {
        let t = u.common.horizon_t;
        let mut s = ShockScenario::essentials(&u.common, ar1_path(0.05, 0.7, 2, t));
        s.goods_path = (0..t)
            .map(|k| {
                if k < t - 1 {
                    0.01 * 0.5f64.powi(k as i32)
                } else {
                    0.0
                }
            })
            .collect();
        s
    }

    fn random_u(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect()
    }

    /// Central-difference Jacobian of the evaluator.
    fn fd_jacobian(m: &Model, u: &[f64]) -> DMatrix<f64> {
        let n = u.len();
        let h = 1e-6;
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[k] += h;
            dn[k] -= h;
            let col =
                (m.residual(&up, false).unwrap() - m.residual(&dn, false).unwrap()) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    #[test]
    fn assembled_jacobian_matches_finite_differences() {
        let u = small_union(10);
        for idx in [
            Indexation::None,
            Indexation::Cpi { gamma: 0.6 },
            Indexation::TypeSpecific { gamma: 0.4 },
        ] {
            let mut s = scenario(&u);
            s.indexation = idx;
            let m = Model::new(u.clone(), s, Demand::Euler).unwrap();
            let x = random_u(m.n_unknowns(), 3);
            let fd = fd_jacobian(&m, &x);
            let fx = m.linear_system().dense();
            assert!((fd - fx).amax() < 1e-6);
        }
    }

    #[test]
    fn household_demand_jacobian_matches_finite_differences() {
        let mut u = two_country(10);
        u.countries[0].groups[0].mpc = Some(0.08);
        let j = HouseholdJacobians::build(&u.common, 1.0, 10, None).unwrap();
        let mut s = scenario(&u);
        s.policy.transfer = Transfer::Targeted {
            group: "H".into(),
            amount: 0.02,
        };
        let m = Model::new(u, s, Demand::Hank(Arc::new(j))).unwrap();
        let x = random_u(m.n_unknowns(), 5);
        let fd = fd_jacobian(&m, &x);
        assert!((fd - m.linear_system().dense()).amax() < 1e-6);
        let r = solve_linear(&m).unwrap();
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn woodbury_solve_matches_dense() {
        let u = two_country(12);
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let sys = m.linear_system();
        let fd = fd_jacobian(&m, &random_u(m.n_unknowns(), 9));
        assert!((&fd - sys.dense()).amax() < 1e-6);
        let h = DVector::from_vec(random_u(m.n_unknowns(), 4));
        let y = sys.factor().unwrap().solve(&h);
        let direct = sys.dense().lu().solve(&h).unwrap();
        assert!((y - direct).amax() < 1e-10);
    }

    #[test]
    fn linear_solution_zeroes_residual() {
        let u = two_country(20);
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let r = solve_linear(&m).unwrap();
        assert!(r.residual < 1e-12);
        assert!(r.countries[0].pi_core.iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn doubling_shocks_doubles_responses() {
        let u = two_country(20);
        let s1 = scenario(&u);
        let mut s2 = s1.clone();
        s2.essentials_path.iter_mut().for_each(|v| *v *= 2.0);
        s2.goods_path.iter_mut().for_each(|v| *v *= 2.0);
        let r1 = solve_linear(&Model::new(u.clone(), s1, Demand::Euler).unwrap()).unwrap();
        let r2 = solve_linear(&Model::new(u, s2, Demand::Euler).unwrap()).unwrap();
        let scale = r1.unknowns.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in r1.unknowns.iter().zip(&r2.unknowns) {
            assert!((2.0 * a - b).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn countries_decouple_without_trade_or_policy() {
        let u = two_country(8);
        let mut s = scenario(&u);
        s.policy.taylor_pi_path = vec![0.0; 8];
        s.policy.taylor_y = 0.0;
        // bypass the determinacy guard: the decoupling check is structural
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let mut m2 = m.clone();
        m2.union.common.eps_trade = 0.0;
        m2.scenario = s;
        m2.rate_lu = DMatrix::<f64>::identity(8, 8).lu();
        let f = m2.linear_system().dense();
        let n0 = m2.layout[1].offset;
        assert_eq!(f.view((0, n0), (n0, f.ncols() - n0)).amax(), 0.0);
        assert_eq!(f.view((n0, 0), (f.nrows() - n0, n0)).amax(), 0.0);
        // the common policy rate alone couples them
        let f = m.linear_system().dense();
        assert!(f.view((0, n0), (n0, f.ncols() - n0)).amax() > 0.0);
    }

    #[test]
    fn essentials_jacobian_is_the_shock_response() {
        let u = small_union(8);
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let fz = m.essentials_jacobian().unwrap();
        let mut plain = scenario(&u);
        plain.goods_path.clear();
        let mp = Model::new(u, plain.clone(), Demand::Euler).unwrap();
        let h = mp.residual(&vec![0.0; mp.n_unknowns()], false).unwrap();
        let via = &fz * DVector::from_vec(plain.essentials_path);
        assert!((h - via).amax() < 1e-14);
    }

    #[test]
    fn nonlinear_without_catch_up_is_linear() {
        let mut u = two_country(20);
        u.common.b_catchup = 0.0;
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let lin = solve_linear(&m).unwrap();
        let nl = solve_nonlinear(&m, &SolverSettings::tight()).unwrap();
        for (a, b) in lin.unknowns.iter().zip(&nl.unknowns) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn catch_up_raises_inflation() {
        let mut u = two_country(30);
        u.common.b_catchup = 0.15;
        let mut s = scenario(&u);
        s.nonlinear = true;
        let m = Model::new(u, s, Demand::Euler).unwrap();
        let lin = solve_linear(&m).unwrap();
        let nl = solve_nonlinear(&m, &SolverSettings::tight()).unwrap();
        assert!(nl.residual < 1e-10);
        assert!(nl.countries[0].cumulative_core(30) > lin.countries[0].cumulative_core(30));
    }

    #[test]
    fn indeterminate_rule_is_refused() {
        let u = small_union(8);
        let mut s = scenario(&u);
        s.policy.taylor_pi_path = vec![0.0; 8];
        s.policy.taylor_y = 0.0;
        assert!(matches!(
            Model::new(u.clone(), s, Demand::Euler),
            Err(Error::Indeterminate { .. })
        ));
        let mut s = scenario(&u);
        s.policy = PolicyRegime::delayed(&u.common, 4);
        assert!(Model::new(u, s, Demand::Euler).is_ok());
    }

    #[test]
    fn twin_of_homogeneous_union_is_itself() {
        let mut u = small_union(16);
        u.common.b_catchup = 0.0;
        let c = &mut u.countries[0];
        let g0 = c.groups[0].clone();
        c.groups[1] = WorkerGroup {
            label: "L".into(),
            sector: Sector::Goods,
            ..g0
        };
        c.groups.iter_mut().for_each(|g| g.phi = 0.0);
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let (het, std) = solve_pair(&m, &SolverSettings::tight()).unwrap();
        for (a, b) in het.countries[0]
            .pi_core
            .iter()
            .zip(&std.countries[0].pi_core)
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_graph_is_acyclic() {
        let roots = ["w", "p_d", "p_s", "p_e_market", "transfer", "subsidy"];
        check_graph(&system_graph(), &roots).unwrap();
        let mut g = system_graph();
        g.swap(0, 1);
        assert!(check_graph(&g, &roots).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let u = small_union(8);
        let m = Model::new(u.clone(), scenario(&u), Demand::Euler).unwrap();
        let r = solve_linear(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("irf.csv");
        r.write_csv(&p).unwrap();
        let mut rd = csv::Reader::from_path(&p).unwrap();
        let mut found = 0;
        for rec in rd.records() {
            let rec = rec.unwrap();
            if &rec[0] == "F4" && &rec[1] == "pi_core" {
                let t: usize = rec[2].parse().unwrap();
                let v: f64 = rec[3].parse().unwrap();
                assert_eq!(v, r.countries[0].pi_core[t]);
                found += 1;
            }
        }
        assert_eq!(found, 8);
        r.write_json(&dir.path().join("irf.json")).unwrap();
    }

    #[test]
    fn half_life_counts_from_peak() {
        assert_eq!(half_life(&[0.1, 0.4, 0.3, 0.19, 0.1]), Some(3));
        assert_eq!(half_life(&[0.0, 0.0]), None);
        assert_eq!(half_life(&[1.0, 0.9]), None);
    }
}
