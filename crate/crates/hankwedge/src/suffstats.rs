//! Closed-form reset-heterogeneity statistics computed from calibration data
//! alone.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::calibration::{CountryCalibration, Item, Sector, SectorParams};
use crate::error::{Error, Result};

/// Tolerance for the internal direct-vs-covariance identity check.
const IDENTITY_TOL: f64 = 1e-12;

/// Item price changes over one period.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PriceChange {
    pub e: f64,
    pub d: f64,
    pub s: f64,
}

impl PriceChange {
    pub fn essentials(x: f64) -> Self {
        PriceChange {
            e: x,
            d: 0.0,
            s: 0.0,
        }
    }

    pub fn uniform(x: f64) -> Self {
        PriceChange { e: x, d: x, s: x }
    }

    pub fn scale(self, k: f64) -> Self {
        PriceChange {
            e: k * self.e,
            d: k * self.d,
            s: k * self.s,
        }
    }

    pub fn get(&self, item: Item) -> f64 {
        match item {
            Item::Essentials => self.e,
            Item::Goods => self.d,
            Item::Services => self.s,
        }
    }

    /// Build from a map; every item must be present.
    pub fn from_map(map: &BTreeMap<Item, f64>) -> Result<Self> {
        let get = |i: Item| {
            map.get(&i)
                .copied()
                .ok_or_else(|| Error::MissingItem(i.key().to_string()))
        };
        Ok(PriceChange {
            e: get(Item::Essentials)?,
            d: get(Item::Goods)?,
            s: get(Item::Services)?,
        })
    }
}

/// Salient experienced inflation of every group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperiencedInflation {
    pub per_group: Vec<f64>,
    pub dp: PriceChange,
    pub lambda_e: f64,
}

/// Salience-weighted basket inflation of each group in `country`.
pub fn experienced_inflation(
    country: &CountryCalibration,
    dp: &BTreeMap<Item, f64>,
    lambda_e: f64,
) -> Result<ExperiencedInflation> {
    let dp = PriceChange::from_map(dp)?;
    Ok(experienced(country, dp, lambda_e))
}

pub fn experienced(
    country: &CountryCalibration,
    dp: PriceChange,
    lambda_e: f64,
) -> ExperiencedInflation {
    let per_group = country
        .groups
        .iter()
        .map(|g| lambda_e * g.alpha_e * dp.e + g.alpha_d * dp.d + g.alpha_s * dp.s)
        .collect();
    ExperiencedInflation {
        per_group,
        dp,
        lambda_e,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResetWeights {
    pub weights: Vec<f64>,
    pub theta_bar: f64,
}

/// Shares of aggregate wage resets by group.
pub fn reset_weights(country: &CountryCalibration) -> ResetWeights {
    let theta_bar = country.mean_by(|g| g.theta);
    let weights = country
        .groups
        .iter()
        .map(|g| g.eta * g.theta / theta_bar)
        .collect();
    ResetWeights { weights, theta_bar }
}

pub fn rwei(country: &CountryCalibration, dp: PriceChange, lambda_e: f64) -> f64 {
    let pi = experienced(country, dp, lambda_e).per_group;
    reset_weights(country)
        .weights
        .iter()
        .zip(&pi)
        .map(|(w, p)| w * p)
        .sum()
}

/// Population-weighted experienced inflation.
pub fn avg_pi(country: &CountryCalibration, dp: PriceChange, lambda_e: f64) -> f64 {
    let pi = experienced(country, dp, lambda_e).per_group;
    country.groups.iter().zip(&pi).map(|(g, p)| g.eta * p).sum()
}

/// Normalized covariance form `(1/θ̄) Cov_η(θ, π̃)`.
pub fn wedge_covariance(country: &CountryCalibration, dp: PriceChange, lambda_e: f64) -> f64 {
    let pi = experienced(country, dp, lambda_e).per_group;
    let theta_bar = country.mean_by(|g| g.theta);
    let pi_bar: f64 = country.groups.iter().zip(&pi).map(|(g, p)| g.eta * p).sum();
    let cov: f64 = country
        .groups
        .iter()
        .zip(&pi)
        .map(|(g, p)| g.eta * (g.theta - theta_bar) * (p - pi_bar))
        .sum();
    cov / theta_bar
}

/// Reset-heterogeneity wedge RWEI − π̄, cross-checked against the covariance form.
pub fn wedge(country: &CountryCalibration, dp: PriceChange, lambda_e: f64) -> Result<f64> {
    let direct = rwei(country, dp, lambda_e) - avg_pi(country, dp, lambda_e);
    let cov = wedge_covariance(country, dp, lambda_e);
    let diff = (direct - cov).abs();
    if diff > IDENTITY_TOL {
        return Err(Error::Identity {
            what: "direct and covariance wedge forms disagree",
            diff,
        });
    }
    Ok(direct)
}

/// Two-type closed form `(η_H η_L / θ̄)(θ_H − θ_L)(π̃_H − π̃_L)`, with the
/// experienced-inflation gap expanded item by item.
pub fn wedge_closed_form_2type(
    country: &CountryCalibration,
    dp: PriceChange,
    lambda_e: f64,
) -> Result<f64> {
    let [h, l] = match country.groups.as_slice() {
        [a, b] => [a, b],
        gs => {
            return Err(Error::GroupCount {
                expected: 2,
                found: gs.len(),
            })
        }
    };
    let theta_bar = h.eta * h.theta + l.eta * l.theta;
    let gap = lambda_e * (h.alpha_e - l.alpha_e) * dp.e
        + (h.alpha_d - l.alpha_d) * dp.d
        + (h.alpha_s - l.alpha_s) * dp.s;
    Ok(h.eta * l.eta / theta_bar * (h.theta - l.theta) * gap)
}

/// Labor share times centrality times price-rigidity amplification.
pub fn propagation_weight(sector: &SectorParams) -> Result<f64> {
    if !(sector.calvo_reset < 1.0) {
        return Err(Error::OutOfRange {
            entity: "sector".into(),
            field: "calvo_reset",
            value: sector.calvo_reset,
            expected: "< 1",
        });
    }
    Ok(sector.labor_share * sector.centrality / (1.0 - sector.calvo_reset))
}

/// MWSI with explicit sector propagation weights.
pub fn mwsi_with(
    country: &CountryCalibration,
    dp: PriceChange,
    lambda_e: f64,
    nu_services: f64,
    nu_goods: f64,
) -> f64 {
    let pi = experienced(country, dp, lambda_e).per_group;
    let rw = reset_weights(country);
    country
        .groups
        .iter()
        .zip(rw.weights.iter().zip(&pi))
        .map(|(g, (w, p))| {
            let nu = match g.sector {
                Sector::Services => nu_services,
                Sector::Goods => nu_goods,
            };
            (w - g.eta) * nu * p
        })
        .sum()
}

pub fn mwsi(country: &CountryCalibration, dp: PriceChange, lambda_e: f64) -> Result<f64> {
    let nu_s = propagation_weight(&country.services)?;
    let nu_d = propagation_weight(&country.goods)?;
    Ok(mwsi_with(country, dp, lambda_e, nu_s, nu_d))
}

/// Indices of the groups with the highest and lowest reset weight.
fn extreme_groups(country: &CountryCalibration) -> (usize, usize) {
    let w = reset_weights(country).weights;
    let by = |cmp: fn(&f64, &f64) -> bool| {
        (0..w.len())
            .reduce(|a, b| if cmp(&w[b], &w[a]) { b } else { a })
            .unwrap()
    };
    (by(|x, y| x > y), by(|x, y| x < y))
}

/// Essentials subsidy `Ω / (ω_H (α_He − α_Le) λ_e)` with H and L the groups of
/// extreme reset weight.
pub fn optimal_subsidy(country: &CountryCalibration, omega: f64, lambda_e: f64) -> Result<f64> {
    let (h, l) = extreme_groups(country);
    let gap = country.groups[h].alpha_e - country.groups[l].alpha_e;
    if gap.abs() < 1e-15 {
        return Err(Error::ZeroShareGap);
    }
    let w_h = reset_weights(country).weights[h];
    Ok(omega / (w_h * gap * lambda_e))
}

/// Subsidy that zeroes the two-type wedge exactly: the reset weight in the
/// denominator is replaced by its excess over the population share.
pub fn optimal_subsidy_exact(
    country: &CountryCalibration,
    omega: f64,
    lambda_e: f64,
) -> Result<f64> {
    let (h, l) = extreme_groups(country);
    let gap = country.groups[h].alpha_e - country.groups[l].alpha_e;
    let excess = reset_weights(country).weights[h] - country.groups[h].eta;
    if gap.abs() < 1e-15 || excess.abs() < 1e-15 {
        return Err(Error::ZeroShareGap);
    }
    Ok(omega / (excess * gap * lambda_e))
}

/// Aggregate wage Phillips curve slope `Σ η θ (1 − βΘ)/Θ`.
pub fn kappa_aggregate(country: &CountryCalibration, beta: f64) -> f64 {
    country.mean_by(|g| kappa_group(g.theta, beta))
}

pub fn kappa_group(theta: f64, beta: f64) -> f64 {
    let big = 1.0 - theta;
    theta * (1.0 - beta * big) / big
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Channels {
    pub level: f64,
    pub composition: f64,
    pub demand: f64,
}

/// Cumulative wage response split into level catch-up, composition and
/// demand channels.
pub fn cumulative_decomposition(
    country: &CountryCalibration,
    beta: f64,
    dp: PriceChange,
    lambda_e: f64,
    wedge_persistence: f64,
    avg_gap: f64,
) -> Result<Channels> {
    if !(0.0..1.0).contains(&wedge_persistence) {
        return Err(Error::OutOfRange {
            entity: "decomposition".into(),
            field: "wedge_persistence",
            value: wedge_persistence,
            expected: "[0,1)",
        });
    }
    let theta_bar = country.mean_by(|g| g.theta);
    let pi_bar = avg_pi(country, dp, lambda_e);
    let omega0 = wedge(country, dp, lambda_e)?;
    Ok(channels(
        beta,
        theta_bar,
        kappa_aggregate(country, beta),
        pi_bar,
        omega0,
        wedge_persistence,
        avg_gap,
    ))
}

/// The three channels from raw inputs.
pub fn channels(
    beta: f64,
    theta_bar: f64,
    kappa: f64,
    pi_bar: f64,
    omega0: f64,
    rho: f64,
    avg_gap: f64,
) -> Channels {
    Channels {
        level: theta_bar * pi_bar / (1.0 - beta),
        composition: theta_bar * omega0 / (1.0 - beta * rho),
        demand: kappa * avg_gap / (1.0 - beta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceTerms {
    pub level: f64,
    pub wedge: f64,
    pub covariance: f64,
}

/// GDP-weighted cross-country decomposition of cumulative core inflation
/// variance into level, wedge and twice-covariance terms.
pub fn variance_decomposition(
    weights: &[f64],
    r: &[f64],
    s: &[f64],
    omega: &[f64],
    theta_bar: &[f64],
    u: f64,
) -> Result<VarianceTerms> {
    let n = weights.len();
    if n < 2 {
        return Err(Error::Invalid(
            "variance decomposition needs at least two countries".into(),
        ));
    }
    if [r.len(), s.len(), omega.len(), theta_bar.len()]
        .iter()
        .any(|&k| k != n)
    {
        return Err(Error::Invalid("country vectors differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let a: Vec<f64> = r.iter().map(|x| x * u).collect();
    let b: Vec<f64> = (0..n).map(|i| s[i] * theta_bar[i] * omega[i] * u).collect();
    let mean = |v: &[f64]| v.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = |x: &[f64], mx: f64, y: &[f64], my: f64| {
        (0..n)
            .map(|i| w[i] * (x[i] - mx) * (y[i] - my))
            .sum::<f64>()
    };
    Ok(VarianceTerms {
        level: cov(&a, ma, &a, ma),
        wedge: cov(&b, mb, &b, mb),
        covariance: 2.0 * cov(&a, ma, &b, mb),
    })
}

/// Every statistic for one country and price-change vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficientStats {
    pub rwei: f64,
    pub avg_pi: f64,
    pub omega: f64,
    pub mwsi: f64,
    pub reset_weights: Vec<f64>,
    pub theta_bar: f64,
    pub nu_services: f64,
    pub nu_goods: f64,
}

impl SufficientStats {
    pub fn compute(country: &CountryCalibration, dp: PriceChange, lambda_e: f64) -> Result<Self> {
        let rw = reset_weights(country);
        Ok(SufficientStats {
            rwei: rwei(country, dp, lambda_e),
            avg_pi: avg_pi(country, dp, lambda_e),
            omega: wedge(country, dp, lambda_e)?,
            mwsi: mwsi(country, dp, lambda_e)?,
            reset_weights: rw.weights,
            theta_bar: rw.theta_bar,
            nu_services: propagation_weight(&country.services)?,
            nu_goods: propagation_weight(&country.goods)?,
        })
    }
}
