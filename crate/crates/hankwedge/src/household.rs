//! Consumption-savings block: income discretization, endogenous-gridpoint
//! policies, lottery distributions and fake-news sequence Jacobians.
//!
//! States are stored income-major: index `e * n_a + i`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CommonParams;
use crate::error::{Error, Result};

const EGM_TOL: f64 = 1e-10;
const DIST_TOL: f64 = 1e-12;
const MAX_ITER: usize = 200_000;
/// Step for the central differences inside the fake-news backward sweep.
const FAKE_NEWS_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct IncomeProcess {
    /// Log productivity levels
    pub grid: Vec<f64>,
    /// Row-stochastic transition matrix, row-major `n x n`
    pub transition: Vec<f64>,
    pub stationary: Vec<f64>,
}

impl IncomeProcess {
    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn p(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.n() + to]
    }

    /// Productivity levels normalized to unit mean under the stationary law.
    pub fn levels(&self) -> Vec<f64> {
        let raw: Vec<f64> = self.grid.iter().map(|x| x.exp()).collect();
        let mean: f64 = raw.iter().zip(&self.stationary).map(|(e, p)| e * p).sum();
        raw.iter().map(|e| e / mean).collect()
    }
}

/// Rouwenhorst discretization of `x' = rho x + eps` with `n` states whose
/// stationary standard deviation is `sigma`.
pub fn rouwenhorst(rho: f64, sigma: f64, n: usize) -> Result<IncomeProcess> {
    if n < 2 {
        return Err(Error::Invalid(format!("rouwenhorst needs n >= 2, got {n}")));
    }
    if !(rho.abs() < 1.0) || !(sigma > 0.0) {
        return Err(Error::Invalid(format!(
            "rouwenhorst needs |rho| < 1 and sigma > 0 (rho {rho}, sigma {sigma})"
        )));
    }
    let p = (1.0 + rho) / 2.0;
    let mut m = vec![p, 1.0 - p, 1.0 - p, p];
    for k in 3..=n {
        let prev = k - 1;
        let mut next = vec![0.0; k * k];
        for i in 0..prev {
            for j in 0..prev {
                let v = m[i * prev + j];
                next[i * k + j] += p * v;
                next[i * k + j + 1] += (1.0 - p) * v;
                next[(i + 1) * k + j] += (1.0 - p) * v;
                next[(i + 1) * k + j + 1] += p * v;
            }
        }
        // interior rows were counted twice
        for i in 1..k - 1 {
            for j in 0..k {
                next[i * k + j] /= 2.0;
            }
        }
        m = next;
    }
    // exact row normalization keeps rows at one to rounding
    for i in 0..n {
        let s: f64 = m[i * n..(i + 1) * n].iter().sum();
        m[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
    }
    let psi = sigma * ((n - 1) as f64).sqrt();
    let grid = (0..n)
        .map(|i| -psi + 2.0 * psi * i as f64 / (n - 1) as f64)
        .collect();
    // binomial stationary law
    let mut stationary: Vec<f64> = (0..n)
        .map(|i| binomial(n - 1, i) * 0.5f64.powi((n - 1) as i32))
        .collect();
    let s: f64 = stationary.iter().sum();
    stationary.iter_mut().for_each(|v| *v /= s);
    Ok(IncomeProcess {
        grid,
        transition: m,
        stationary,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Quadratically spaced asset grid starting at the borrowing limit 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetGrid(pub Vec<f64>);

impl AssetGrid {
    pub fn quadratic(a_max: f64, n: usize) -> Self {
        let d = (n - 1) as f64;
        AssetGrid((0..n).map(|i| a_max * (i as f64 / d).powi(2)).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Primitives of the household problem.
#[derive(Debug, Clone)]
pub struct Household {
    pub income: IncomeProcess,
    pub e: Vec<f64>,
    pub grid: AssetGrid,
    pub beta: f64,
    pub sigma: f64,
}

impl Household {
    pub fn from_common(common: &CommonParams) -> Result<Self> {
        let income = rouwenhorst(common.rho_e, common.sigma_e, common.n_e)?;
        Ok(Household {
            e: income.levels(),
            income,
            grid: AssetGrid::quadratic(common.a_max, common.n_a),
            beta: common.beta,
            sigma: common.sigma,
        })
    }

    pub fn n_e(&self) -> usize {
        self.e.len()
    }

    pub fn n_a(&self) -> usize {
        self.grid.len()
    }

    fn size(&self) -> usize {
        self.n_e() * self.n_a()
    }

    /// One backward step: given next period's marginal value of assets,
    /// return this period's (marginal value, savings, consumption).
    pub fn backward(&self, va_next: &[f64], r: f64, w: f64, transfer: f64) -> Policy {
        let (ne, na) = (self.n_e(), self.n_a());
        let a = self.grid.points();
        let mut va = vec![0.0; ne * na];
        let mut a_next = vec![0.0; ne * na];
        let mut c = vec![0.0; ne * na];
        let mut m_endo = vec![0.0; na];
        for ie in 0..ne {
            for k in 0..na {
                let ev: f64 = (0..ne)
                    .map(|je| self.income.p(ie, je) * va_next[je * na + k])
                    .sum();
                let c_endo = (self.beta * ev).powf(-1.0 / self.sigma);
                m_endo[k] = c_endo + a[k];
            }
            let y = w * self.e[ie] + transfer;
            let mut seg = 0;
            for i in 0..na {
                let coh = (1.0 + r) * a[i] + y;
                let ap = if coh <= m_endo[0] {
                    0.0
                } else {
                    while seg + 2 < na && coh > m_endo[seg + 1] {
                        seg += 1;
                    }
                    let t = (coh - m_endo[seg]) / (m_endo[seg + 1] - m_endo[seg]);
                    (a[seg] + t * (a[seg + 1] - a[seg])).clamp(0.0, a[na - 1])
                };
                let idx = ie * na + i;
                a_next[idx] = ap;
                c[idx] = coh - ap;
                va[idx] = (1.0 + r) * c[idx].powf(-self.sigma);
            }
        }
        Policy { va, a: a_next, c }
    }

    /// Bracketing indices and lower weights of a savings policy.
    pub fn lottery(&self, a_next: &[f64]) -> Lottery {
        let a = self.grid.points();
        let na = self.n_a();
        let mut idx = Vec::with_capacity(a_next.len());
        let mut w = Vec::with_capacity(a_next.len());
        for &ap in a_next {
            let j = match a.binary_search_by(|x| x.partial_cmp(&ap).unwrap()) {
                Ok(j) => j.min(na - 2),
                Err(j) => j.saturating_sub(1).min(na - 2),
            };
            let lo = (a[j + 1] - ap) / (a[j + 1] - a[j]);
            idx.push(j);
            w.push(lo.clamp(0.0, 1.0));
        }
        Lottery { idx, lo: w }
    }

    /// Push a distribution one period forward.
    pub fn forward(&self, lot: &Lottery, d: &[f64]) -> Vec<f64> {
        let (ne, na) = (self.n_e(), self.n_a());
        let mut tilde = vec![0.0; ne * na];
        for (s, &mass) in d.iter().enumerate() {
            let e = s / na;
            let j = lot.idx[s];
            let lo = mass * lot.lo[s];
            tilde[e * na + j] += lo;
            tilde[e * na + j + 1] += mass - lo;
        }
        self.mix_income(&tilde)
    }

    /// Apply the income transition to a distribution over (e, a').
    fn mix_income(&self, tilde: &[f64]) -> Vec<f64> {
        let (ne, na) = (self.n_e(), self.n_a());
        let mut out = vec![0.0; ne * na];
        for ie in 0..ne {
            for je in 0..ne {
                let p = self.income.p(ie, je);
                if p == 0.0 {
                    continue;
                }
                let src = &tilde[ie * na..(ie + 1) * na];
                let dst = &mut out[je * na..(je + 1) * na];
                dst.iter_mut().zip(src).for_each(|(o, s)| *o += p * s);
            }
        }
        out
    }

    /// Derivative of the forward map with respect to the savings policy,
    /// holding brackets fixed.
    fn forward_derivative(&self, lot: &Lottery, d: &[f64], da: &[f64]) -> Vec<f64> {
        let (ne, na) = (self.n_e(), self.n_a());
        let a = self.grid.points();
        let mut tilde = vec![0.0; ne * na];
        for s in 0..d.len() {
            let e = s / na;
            let j = lot.idx[s];
            let flow = d[s] * da[s] / (a[j + 1] - a[j]);
            tilde[e * na + j] -= flow;
            tilde[e * na + j + 1] += flow;
        }
        self.mix_income(&tilde)
    }

    /// Expectation operator: value of `x` next period from each state today.
    fn expectation(&self, lot: &Lottery, x: &[f64]) -> Vec<f64> {
        let (ne, na) = (self.n_e(), self.n_a());
        let mut ex = vec![0.0; ne * na];
        for ie in 0..ne {
            for je in 0..ne {
                let p = self.income.p(ie, je);
                for k in 0..na {
                    ex[ie * na + k] += p * x[je * na + k];
                }
            }
        }
        (0..ne * na)
            .map(|s| {
                let e = s / na;
                let j = lot.idx[s];
                let lo = lot.lo[s];
                lo * ex[e * na + j] + (1.0 - lo) * ex[e * na + j + 1]
            })
            .collect()
    }

    /// Initial guess: consume the annuity value of cash on hand.
    fn initial_va(&self, r: f64, w: f64, transfer: f64) -> Vec<f64> {
        let a = self.grid.points();
        let na = self.n_a();
        (0..self.size())
            .map(|s| {
                let coh = (1.0 + r) * a[s % na] + w * self.e[s / na] + transfer;
                (1.0 + r) * (0.1 * coh).max(1e-8).powf(-self.sigma)
            })
            .collect()
    }
}

/// Policies and marginal values produced by one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub va: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

/// Lower bracket index and weight on the lower gridpoint for every state.
#[derive(Debug, Clone, PartialEq)]
pub struct Lottery {
    pub idx: Vec<usize>,
    pub lo: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HouseholdSteadyState {
    pub household: Household,
    pub r: f64,
    pub w: f64,
    pub transfer: f64,
    pub policy: Policy,
    pub lottery: Lottery,
    pub dist: Vec<f64>,
    pub c_agg: f64,
    pub a_agg: f64,
    pub mpc: f64,
    pub iterations: (usize, usize),
}

impl HouseholdSteadyState {
    /// Largest Euler-equation residual over unconstrained states, relative to
    /// marginal utility. Continuation marginal value between gridpoints is
    /// interpolated linearly in consumption space, as the endogenous grid
    /// implies.
    pub fn euler_residual(&self) -> f64 {
        let h = &self.household;
        let (ne, na) = (h.n_e(), h.n_a());
        let va = &self.policy.va;
        // implied consumption at each (e, a') knot
        let mut c_knot = vec![0.0; ne * na];
        for ie in 0..ne {
            for k in 0..na {
                let ev: f64 = (0..ne).map(|je| h.income.p(ie, je) * va[je * na + k]).sum();
                c_knot[ie * na + k] = (h.beta * ev).powf(-1.0 / h.sigma);
            }
        }
        (0..self.dist.len())
            .filter(|&s| self.policy.a[s] > 1e-12 && self.policy.a[s] < h.grid.0[na - 1])
            .map(|s| {
                let (e, j, lo) = (s / na, self.lottery.idx[s], self.lottery.lo[s]);
                let c_next = lo * c_knot[e * na + j] + (1.0 - lo) * c_knot[e * na + j + 1];
                let mu = self.policy.c[s].powf(-h.sigma);
                (mu - c_next.powf(-h.sigma)).abs() / mu
            })
            .fold(0.0, f64::max)
    }
}

/// Solve the stationary household problem at interest rate `r`, wage `w`.
pub fn solve_steady_state(common: &CommonParams, r: f64, w: f64) -> Result<HouseholdSteadyState> {
    let hh = Household::from_common(common)?;
    steady_state(hh, r, w, 0.0)
}

pub fn steady_state(hh: Household, r: f64, w: f64, transfer: f64) -> Result<HouseholdSteadyState> {
    if hh.beta * (1.0 + r) >= 1.0 {
        return Err(Error::Steady(format!(
            "beta (1 + r) = {} is not below one",
            hh.beta * (1.0 + r)
        )));
    }
    let mut va = hh.initial_va(r, w, transfer);
    let mut a_old = vec![f64::INFINITY; hh.size()];
    let mut it_egm = 0;
    let policy = loop {
        let p = hh.backward(&va, r, w, transfer);
        let diff =
            p.a.iter()
                .zip(&a_old)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
        it_egm += 1;
        if diff < EGM_TOL {
            break p;
        }
        if it_egm > MAX_ITER {
            return Err(Error::Steady(format!(
                "policy iteration stalled at sup-norm change {diff:e}"
            )));
        }
        a_old = p.a.clone();
        va = p.va;
    };
    let lottery = hh.lottery(&policy.a);
    let na = hh.n_a();
    let mut dist: Vec<f64> = (0..hh.size())
        .map(|s| {
            if s % na == 0 {
                hh.income.stationary[s / na]
            } else {
                0.0
            }
        })
        .collect();
    let mut it_dist = 0;
    loop {
        let next = hh.forward(&lottery, &dist);
        let diff: f64 = next.iter().zip(&dist).map(|(x, y)| (x - y).abs()).sum();
        dist = next;
        it_dist += 1;
        if diff < DIST_TOL {
            break;
        }
        if it_dist > MAX_ITER {
            return Err(Error::Steady(format!(
                "distribution iteration stalled at L1 change {diff:e}"
            )));
        }
    }
    let c_agg = dot(&dist, &policy.c);
    let a_agg = dot(&dist, &policy.a);
    let mut ss = HouseholdSteadyState {
        household: hh,
        r,
        w,
        transfer,
        policy,
        lottery,
        dist,
        c_agg,
        a_agg,
        mpc: 0.0,
        iterations: (it_egm, it_dist),
    };
    ss.mpc = impact_mpc(&ss);
    log::debug!(
        "household steady state: C {:.4} A {:.4} MPC {:.4} after {:?} iterations",
        ss.c_agg,
        ss.a_agg,
        ss.mpc,
        ss.iterations
    );
    Ok(ss)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Aggregate consumption response to a one-quarter transfer.
fn impact_mpc(ss: &HouseholdSteadyState) -> f64 {
    let h = FAKE_NEWS_STEP;
    let hh = &ss.household;
    let va = &ss.policy.va;
    let up = hh.backward(va, ss.r, ss.w, ss.transfer + h);
    let dn = hh.backward(va, ss.r, ss.w, ss.transfer - h);
    (dot(&ss.dist, &up.c) - dot(&ss.dist, &dn.c)) / (2.0 * h)
}

/// Aggregate inputs the household block responds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HhInput {
    R,
    W,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HhOutput {
    C,
    A,
}

impl std::str::FromStr for HhInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(HhInput::R),
            "w" => Ok(HhInput::W),
            "transfer" | "T" => Ok(HhInput::Transfer),
            _ => Err(Error::Unknown {
                kind: "household input",
                name: s.into(),
            }),
        }
    }
}

impl std::str::FromStr for HhOutput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" => Ok(HhOutput::C),
            "A" => Ok(HhOutput::A),
            _ => Err(Error::Unknown {
                kind: "household output",
                name: s.into(),
            }),
        }
    }
}

/// Square `T x T` Jacobian of one aggregate path with respect to one input
/// path; column `s` is the response to a date-`s` impulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceJacobian {
    pub input: HhInput,
    pub output: HhOutput,
    pub t: usize,
    /// Row-major entries
    pub data: Vec<f64>,
}

impl SequenceJacobian {
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.data[t * self.t + s]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.t, self.t, &self.data)
    }

    pub fn scaled(&self, k: f64) -> DMatrix<f64> {
        self.to_matrix() * k
    }
}

/// Perturb one input of a backward step in direction `dir`.
fn shifted(ss: &HouseholdSteadyState, input: Option<HhInput>, eps: f64) -> (f64, f64, f64) {
    let (mut r, mut w, mut tr) = (ss.r, ss.w, ss.transfer);
    match input {
        Some(HhInput::R) => r += eps,
        Some(HhInput::W) => w += eps,
        Some(HhInput::Transfer) => tr += eps,
        None => {}
    }
    (r, w, tr)
}

/// Fake-news Jacobians of both outputs with respect to `input`.
pub fn fake_news(
    ss: &HouseholdSteadyState,
    input: HhInput,
    t: usize,
) -> (SequenceJacobian, SequenceJacobian) {
    let hh = &ss.household;
    let h = FAKE_NEWS_STEP;
    let n = ss.dist.len();

    // backward sweep: policy responses to news s periods ahead
    let mut dy_c = vec![0.0; t];
    let mut dy_a = vec![0.0; t];
    let mut d_dist: Vec<Vec<f64>> = Vec::with_capacity(t);
    let mut dva = vec![0.0; n];
    for s in 0..t {
        let (up, dn) = if s == 0 {
            let (r1, w1, t1) = shifted(ss, Some(input), h);
            let (r0, w0, t0) = shifted(ss, Some(input), -h);
            (
                hh.backward(&ss.policy.va, r1, w1, t1),
                hh.backward(&ss.policy.va, r0, w0, t0),
            )
        } else {
            let plus: Vec<f64> = ss
                .policy
                .va
                .iter()
                .zip(&dva)
                .map(|(v, d)| v + h * d)
                .collect();
            let minus: Vec<f64> = ss
                .policy
                .va
                .iter()
                .zip(&dva)
                .map(|(v, d)| v - h * d)
                .collect();
            (
                hh.backward(&plus, ss.r, ss.w, ss.transfer),
                hh.backward(&minus, ss.r, ss.w, ss.transfer),
            )
        };
        let diff = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        };
        let dc = diff(&up.c, &dn.c);
        let da = diff(&up.a, &dn.a);
        dva = diff(&up.va, &dn.va);
        dy_c[s] = dot(&ss.dist, &dc);
        dy_a[s] = dot(&ss.dist, &da);
        d_dist.push(hh.forward_derivative(&ss.lottery, &ss.dist, &da));
    }

    // forward sweep: expectation vectors of each output
    let mut exp_c = Vec::with_capacity(t);
    let mut exp_a = Vec::with_capacity(t);
    let mut ec = ss.policy.c.clone();
    let mut ea = ss.policy.a.clone();
    for _ in 0..t.saturating_sub(1) {
        exp_c.push(ec.clone());
        exp_a.push(ea.clone());
        ec = hh.expectation(&ss.lottery, &ec);
        ea = hh.expectation(&ss.lottery, &ea);
    }

    let build = |dy: &[f64], exps: &[Vec<f64>], output: HhOutput| {
        let mut f = vec![0.0; t * t];
        for s in 0..t {
            f[s] = dy[s];
            for row in 1..t {
                f[row * t + s] = dot(&exps[row - 1], &d_dist[s]);
            }
        }
        let mut j = f.clone();
        for row in 1..t {
            for s in 1..t {
                j[row * t + s] += j[(row - 1) * t + s - 1];
            }
        }
        SequenceJacobian {
            input,
            output,
            t,
            data: j,
        }
    };
    (
        build(&dy_c, &exp_c, HhOutput::C),
        build(&dy_a, &exp_a, HhOutput::A),
    )
}

/// Jacobian of a single output with respect to a single input.
pub fn fake_news_jacobian(
    ss: &HouseholdSteadyState,
    input: HhInput,
    output: HhOutput,
    t: usize,
) -> Result<SequenceJacobian> {
    if t == 0 {
        return Err(Error::Invalid("Jacobian horizon must be positive".into()));
    }
    let (c, a) = fake_news(ss, input, t);
    Ok(match output {
        HhOutput::C => c,
        HhOutput::A => a,
    })
}

/// Aggregate consumption and asset paths under given input paths, solved
/// exactly backward from the steady state at the horizon.
pub fn transition(
    ss: &HouseholdSteadyState,
    r: &[f64],
    w: &[f64],
    transfer: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hh = &ss.household;
    let t = r.len();
    let mut policies = Vec::with_capacity(t);
    let mut va = ss.policy.va.clone();
    for s in (0..t).rev() {
        let p = hh.backward(&va, r[s], w[s], transfer[s]);
        va = p.va.clone();
        policies.push(p);
    }
    policies.reverse();
    let mut d = ss.dist.clone();
    let mut c = Vec::with_capacity(t);
    let mut a = Vec::with_capacity(t);
    for p in &policies {
        c.push(dot(&d, &p.c));
        a.push(dot(&d, &p.a));
        let lot = hh.lottery(&p.a);
        d = hh.forward(&lot, &d);
    }
    (c, a)
}

/// The three consumption Jacobians a country's demand block needs.
#[derive(Debug, Clone)]
pub struct HouseholdJacobians {
    pub t: usize,
    pub c_ss: f64,
    pub a_ss: f64,
    pub w_ss: f64,
    pub mpc: f64,
    pub c_r: DMatrix<f64>,
    pub c_w: DMatrix<f64>,
    pub c_transfer: DMatrix<f64>,
}

impl HouseholdJacobians {
    pub fn compute(ss: &HouseholdSteadyState, t: usize) -> Self {
        let (c_r, _) = fake_news(ss, HhInput::R, t);
        let (c_w, _) = fake_news(ss, HhInput::W, t);
        let (c_tr, _) = fake_news(ss, HhInput::Transfer, t);
        HouseholdJacobians {
            t,
            c_ss: ss.c_agg,
            a_ss: ss.a_agg,
            w_ss: ss.w,
            mpc: ss.mpc,
            c_r: c_r.to_matrix(),
            c_w: c_w.to_matrix(),
            c_transfer: c_tr.to_matrix(),
        }
    }

    /// Solve the steady state and compute Jacobians, going through the
    /// on-disk cache when `cache` is given.
    pub fn build(
        common: &CommonParams,
        w_ss: f64,
        t: usize,
        cache: Option<&JacobianCache>,
    ) -> Result<Self> {
        let key = cache_key(common, w_ss, t);
        if let Some(c) = cache {
            match c.load(&key) {
                Ok(Some(j)) => return Ok(j),
                Ok(None) => {}
                Err(e) => log::warn!("ignoring cache entry {key}: {e}"),
            }
        }
        let ss = solve_steady_state(common, common.r_ss, w_ss)?;
        let j = Self::compute(&ss, t);
        if let Some(c) = cache {
            if let Err(e) = c.store(&key, &j) {
                log::warn!("could not write cache entry {key}: {e}");
            }
        }
        Ok(j)
    }
}

/// Content hash of everything the household Jacobians depend on.
pub fn cache_key(common: &CommonParams, w_ss: f64, t: usize) -> String {
    let mut h = Sha256::new();
    for v in [
        common.beta,
        common.sigma,
        common.rho_e,
        common.sigma_e,
        common.a_max,
        common.r_ss,
        w_ss,
    ] {
        h.update(v.to_le_bytes());
    }
    for v in [common.n_e, common.n_a, t] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(b"fake-news-v1");
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheSidecar {
    key: String,
    t: usize,
    labels: Vec<String>,
    c_ss: f64,
    a_ss: f64,
    w_ss: f64,
    mpc: f64,
}

/// Directory of cached Jacobians: raw little-endian f64 blobs, row-major,
/// with a JSON sidecar.
#[derive(Debug, Clone)]
pub struct JacobianCache {
    pub dir: PathBuf,
}

impl JacobianCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        JacobianCache { dir: dir.into() }
    }

    /// Cache from the `HANKWEDGE_CACHE` environment variable, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os("HANKWEDGE_CACHE").map(Self::new)
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{key}.bin")),
            self.dir.join(format!("{key}.json")),
        )
    }

    pub fn load(&self, key: &str) -> Result<Option<HouseholdJacobians>> {
        let (bin, side) = self.paths(key);
        if !bin.is_file() || !side.is_file() {
            return Ok(None);
        }
        let meta: CacheSidecar = crate::calibration::read_json(&side)?;
        let bytes = fs::read(&bin).map_err(|source| Error::Io {
            path: bin.clone(),
            source,
        })?;
        let t = meta.t;
        if meta.key != key || meta.labels.len() != 3 || bytes.len() != 3 * t * t * 8 {
            return Err(Error::Cache(key.to_string()));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let m = |k: usize| DMatrix::from_row_slice(t, t, &vals[k * t * t..(k + 1) * t * t]);
        Ok(Some(HouseholdJacobians {
            t,
            c_ss: meta.c_ss,
            a_ss: meta.a_ss,
            w_ss: meta.w_ss,
            mpc: meta.mpc,
            c_r: m(0),
            c_w: m(1),
            c_transfer: m(2),
        }))
    }

    pub fn store(&self, key: &str, j: &HouseholdJacobians) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|source| Error::Io {
            path: self.dir.clone(),
            source,
        })?;
        let (bin, side) = self.paths(key);
        let mut bytes = Vec::with_capacity(3 * j.t * j.t * 8);
        for m in [&j.c_r, &j.c_w, &j.c_transfer] {
            for row in 0..j.t {
                for col in 0..j.t {
                    bytes.extend_from_slice(&m[(row, col)].to_le_bytes());
                }
            }
        }
        write_file(&bin, &bytes)?;
        let meta = CacheSidecar {
            key: key.to_string(),
            t: j.t,
            labels: vec!["C<-r".into(), "C<-w".into(), "C<-transfer".into()],
            c_ss: j.c_ss,
            a_ss: j.a_ss,
            w_ss: j.w_ss,
            mpc: j.mpc,
        };
        crate::calibration::write_json(&side, &meta)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
