//! Parameter data model, validation and on-disk formats.
//!
//! A union directory holds `common.json`, an optional `countries.csv` with GDP
//! weights, and one subdirectory per country with `groups.csv`, `sectors.csv`
//! and `trade.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHARE_TOL: f64 = 1e-12;
const GDP_TOL: f64 = 1e-9;

/// Sector a worker group is employed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    Services,
    Goods,
}

impl Sector {
    pub const ALL: [Sector; 2] = [Sector::Services, Sector::Goods];

    pub fn as_str(self) -> &'static str {
        match self {
            Sector::Services => "services",
            Sector::Goods => "goods",
        }
    }

    /// Default placement of income quintiles: the bottom three work in services.
    pub fn default_for_label(label: &str) -> Option<Sector> {
        match label {
            "Q1" | "Q2" | "Q3" => Some(Sector::Services),
            "Q4" | "Q5" => Some(Sector::Goods),
            _ => None,
        }
    }
}

impl std::str::FromStr for Sector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "services" | "s" => Ok(Sector::Services),
            "goods" | "d" => Ok(Sector::Goods),
            other => Err(Error::Unknown {
                kind: "sector",
                name: other.to_string(),
            }),
        }
    }
}

/// One worker type, typically an income quintile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerGroup {
    pub label: String,
    /// Population share
    pub eta: f64,
    /// Quarterly probability of resetting the wage
    pub theta: f64,
    pub alpha_e: f64,
    pub alpha_d: f64,
    pub alpha_s: f64,
    pub sector: Sector,
    /// Sensitivity of wage demands to experienced inflation
    pub phi: f64,
    /// Impact MPC override; the household block is used when absent
    #[serde(default)]
    pub mpc: Option<f64>,
}

impl WorkerGroup {
    pub fn validate(&self, country: &str) -> Result<()> {
        let entity = format!("{country}/{}", self.label);
        in_range(&entity, "eta", self.eta, |v| v > 0.0 && v <= 1.0, "(0,1]")?;
        in_range(
            &entity,
            "theta",
            self.theta,
            |v| v > 0.0 && v < 1.0,
            "(0,1)",
        )?;
        for (field, v) in [
            ("alpha_e", self.alpha_e),
            ("alpha_d", self.alpha_d),
            ("alpha_s", self.alpha_s),
        ] {
            in_range(&entity, field, v, |v| v >= 0.0, ">= 0")?;
        }
        in_range(&entity, "phi", self.phi, |v| v >= 0.0, ">= 0")?;
        if let Some(m) = self.mpc {
            in_range(&entity, "mpc", m, |v| (0.0..=1.0).contains(&v), "[0,1]")?;
        }
        let sum = self.alpha_e + self.alpha_d + self.alpha_s;
        if (sum - 1.0).abs() > SHARE_TOL {
            return Err(Error::ShareSum { entity, sum });
        }
        Ok(())
    }

    /// Expenditure share on `item`.
    pub fn share(&self, item: Item) -> f64 {
        match item {
            Item::Essentials => self.alpha_e,
            Item::Goods => self.alpha_d,
            Item::Services => self.alpha_s,
        }
    }
}

/// Consumption items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Item {
    #[serde(rename = "e")]
    Essentials,
    #[serde(rename = "d")]
    Goods,
    #[serde(rename = "s")]
    Services,
}

impl Item {
    pub const ALL: [Item; 3] = [Item::Essentials, Item::Goods, Item::Services];

    pub fn key(self) -> &'static str {
        match self {
            Item::Essentials => "e",
            Item::Goods => "d",
            Item::Services => "s",
        }
    }
}

/// Domestic intermediate-input weights of one sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoWeights {
    pub services: f64,
    pub goods: f64,
}

impl IoWeights {
    pub fn get(&self, s: Sector) -> f64 {
        match s {
            Sector::Services => self.services,
            Sector::Goods => self.goods,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorParams {
    pub labor_share: f64,
    pub calvo_reset: f64,
    pub io_weights: IoWeights,
    /// Share of essentials in non-labor costs
    pub essentials_input_share: f64,
    pub gdp_weight: f64,
    /// Eigenvector centrality in the domestic input-output network (derived)
    pub centrality: f64,
}

impl SectorParams {
    fn validate(&self, entity: &str) -> Result<()> {
        in_range(
            entity,
            "labor_share",
            self.labor_share,
            |v| v > 0.0 && v < 1.0,
            "(0,1)",
        )?;
        in_range(
            entity,
            "calvo_reset",
            self.calvo_reset,
            |v| v > 0.0 && v < 1.0,
            "(0,1)",
        )?;
        in_range(
            entity,
            "xi_essentials",
            self.essentials_input_share,
            |v| (0.0..=1.0).contains(&v),
            "[0,1]",
        )?;
        in_range(entity, "gdp_weight", self.gdp_weight, |v| v >= 0.0, ">= 0")?;
        in_range(
            entity,
            "xi_services",
            self.io_weights.services,
            |v| v >= 0.0,
            ">= 0",
        )?;
        in_range(
            entity,
            "xi_goods",
            self.io_weights.goods,
            |v| v >= 0.0,
            ">= 0",
        )?;
        let sum = self.io_weights.services + self.io_weights.goods;
        if (sum - 1.0).abs() > SHARE_TOL {
            return Err(Error::ShareSum {
                entity: format!("{entity} io_weights"),
                sum,
            });
        }
        Ok(())
    }
}

/// Parameters shared by every country in the union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommonParams {
    pub beta: f64,
    pub sigma: f64,
    pub phi_n: f64,
    pub chi: f64,
    pub eps_w: f64,
    pub eps_trade: f64,
    pub b_catchup: f64,
    pub lambda_e: f64,
    pub phi_bar: f64,
    pub rho_e: f64,
    pub sigma_e: f64,
    pub n_e: usize,
    pub n_a: usize,
    pub a_max: f64,
    pub r_ss: f64,
    pub taylor_pi: f64,
    pub taylor_y: f64,
    #[serde(rename = "horizon_T")]
    pub horizon_t: usize,
    pub loss_weight_x: f64,
}

impl CommonParams {
    /// Full file-level validation, including the minimum truncation length.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        in_range(
            "common",
            "horizon_T",
            self.horizon_t as f64,
            |v| v >= 80.0,
            ">= 80",
        )
    }

    /// Parameter checks without the truncation floor; short horizons are
    /// legitimate for unit checks of the solver.
    pub fn validate_params(&self) -> Result<()> {
        let e = "common";
        in_range(e, "beta", self.beta, |v| v > 0.0 && v < 1.0, "(0,1)")?;
        for (field, v) in [
            ("sigma", self.sigma),
            ("phi_n", self.phi_n),
            ("chi", self.chi),
            ("eps_w", self.eps_w),
            ("eps_trade", self.eps_trade),
        ] {
            in_range(e, field, v, |v| v > 0.0, "> 0")?;
        }
        in_range(e, "b_catchup", self.b_catchup, |v| v >= 0.0, ">= 0")?;
        in_range(e, "lambda_e", self.lambda_e, |v| v > 0.0, "> 0")?;
        in_range(e, "rho_e", self.rho_e, |v| v.abs() < 1.0, "(-1,1)")?;
        in_range(e, "sigma_e", self.sigma_e, |v| v > 0.0, "> 0")?;
        in_range(e, "a_max", self.a_max, |v| v > 0.0, "> 0")?;
        in_range(e, "taylor_pi", self.taylor_pi, |v| v >= 0.0, ">= 0")?;
        in_range(e, "taylor_y", self.taylor_y, |v| v >= 0.0, ">= 0")?;
        in_range(e, "horizon_T", self.horizon_t as f64, |v| v >= 1.0, ">= 1")?;
        if self.n_e < 2 || self.n_a < 2 {
            return Err(Error::Invalid(
                "grid sizes n_e and n_a must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryCalibration {
    pub code: String,
    pub gdp_weight: f64,
    pub groups: Vec<WorkerGroup>,
    pub services: SectorParams,
    pub goods: SectorParams,
    pub trade_shares: BTreeMap<String, f64>,
}

impl CountryCalibration {
    pub fn sector(&self, s: Sector) -> &SectorParams {
        match s {
            Sector::Services => &self.services,
            Sector::Goods => &self.goods,
        }
    }

    pub fn sector_mut(&mut self, s: Sector) -> &mut SectorParams {
        match s {
            Sector::Services => &mut self.services,
            Sector::Goods => &mut self.goods,
        }
    }

    pub fn group(&self, label: &str) -> Option<(usize, &WorkerGroup)> {
        self.groups
            .iter()
            .enumerate()
            .find(|(_, g)| g.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Invalid(format!("{}: no worker groups", self.code)));
        }
        for g in &self.groups {
            g.validate(&self.code)?;
        }
        let eta: f64 = self.groups.iter().map(|g| g.eta).sum();
        if (eta - 1.0).abs() > SHARE_TOL {
            return Err(Error::ShareSum {
                entity: format!("{} population shares", self.code),
                sum: eta,
            });
        }
        for s in Sector::ALL {
            self.sector(s)
                .validate(&format!("{}/{}", self.code, s.as_str()))?;
        }
        if self.services.labor_share <= self.goods.labor_share {
            return Err(Error::LaborShareOrder {
                country: self.code.clone(),
                services: self.services.labor_share,
                goods: self.goods.labor_share,
            });
        }
        let trade: f64 = self.trade_shares.values().sum();
        if (trade - 1.0).abs() > SHARE_TOL {
            return Err(Error::ShareSum {
                entity: format!("{} trade shares", self.code),
                sum: trade,
            });
        }
        Ok(())
    }

    /// Recompute sector centralities from the I-O weights.
    pub fn refresh_centrality(&mut self) {
        let (cs, cd) = centrality(&self.services.io_weights, &self.goods.io_weights);
        self.services.centrality = cs;
        self.goods.centrality = cd;
    }

    /// Population-weighted mean of a group field.
    pub fn mean_by<F: Fn(&WorkerGroup) -> f64>(&self, f: F) -> f64 {
        self.groups.iter().map(|g| g.eta * f(g)).sum()
    }
}

/// Eigenvector centrality of (services, goods) in the domestic input-output
/// network, normalized to sum to one.
///
/// Rows of the weight matrix add to one, so the dominant left eigenvector of
/// `[[a, 1-a], [1-b, b]]` is proportional to `(1-b, 1-a)`.
pub fn centrality(services: &IoWeights, goods: &IoWeights) -> (f64, f64) {
    let x = goods.services; // 1 - b
    let y = services.goods; // 1 - a
    if x + y <= 0.0 {
        return (0.5, 0.5);
    }
    (x / (x + y), y / (x + y))
}

/// Union of countries sharing monetary policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Union {
    pub common: CommonParams,
    pub countries: Vec<CountryCalibration>,
}

impl Union {
    pub fn validate(&self) -> Result<()> {
        self.common.validate()?;
        self.validate_params()
    }

    /// Everything in [`Union::validate`] except the truncation floor.
    pub fn validate_params(&self) -> Result<()> {
        self.common.validate_params()?;
        for c in &self.countries {
            c.validate()?;
        }
        // Weights may cover only part of a wider union; aggregates renormalize.
        let w: f64 = self.countries.iter().map(|c| c.gdp_weight).sum();
        if !(w > 0.0 && w <= 1.0 + GDP_TOL) {
            return Err(Error::ShareSum {
                entity: "union gdp weights".into(),
                sum: w,
            });
        }
        let codes: Vec<&str> = self.countries.iter().map(|c| c.code.as_str()).collect();
        for c in &self.countries {
            for partner in c.trade_shares.keys() {
                if !codes.contains(&partner.as_str()) {
                    return Err(Error::Unknown {
                        kind: "trade partner",
                        name: format!("{} in {}", partner, c.code),
                    });
                }
            }
        }
        Ok(())
    }

    /// GDP weights normalized to sum to one over the countries present.
    pub fn weights(&self) -> Vec<f64> {
        let total: f64 = self.countries.iter().map(|c| c.gdp_weight).sum();
        self.countries
            .iter()
            .map(|c| c.gdp_weight / total)
            .collect()
    }

    pub fn country(&self, code: &str) -> Option<&CountryCalibration> {
        self.countries.iter().find(|c| c.code == code)
    }

    pub fn country_index(&self, code: &str) -> Option<usize> {
        self.countries.iter().position(|c| c.code == code)
    }
}

/// Quarterly reset probability implied by an average contract duration.
pub fn reset_prob_from_duration(duration_quarters: f64) -> Result<f64> {
    if !(duration_quarters > 0.0) || !duration_quarters.is_finite() {
        return Err(Error::OutOfRange {
            entity: "contract".into(),
            field: "duration_quarters",
            value: duration_quarters,
            expected: "> 0",
        });
    }
    Ok((1.0 / duration_quarters).clamp(1e-9, 0.999))
}

fn in_range(
    entity: &str,
    field: &'static str,
    value: f64,
    ok: impl Fn(f64) -> bool,
    expected: &'static str,
) -> Result<()> {
    if value.is_finite() && ok(value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            entity: entity.to_string(),
            field,
            value,
            expected,
        })
    }
}

// ---------------------------------------------------------------- file formats

#[derive(Debug, Serialize, Deserialize)]
struct GroupRow {
    label: String,
    eta: f64,
    theta: f64,
    alpha_e: f64,
    alpha_d: f64,
    alpha_s: f64,
    #[serde(default)]
    sector: Option<String>,
    phi: f64,
    #[serde(default)]
    mpc: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectorRow {
    sector: String,
    labor_share: f64,
    calvo_reset: f64,
    xi_services: f64,
    xi_goods: f64,
    xi_essentials: f64,
    gdp_weight: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TradeRow {
    partner: String,
    share: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountryRow {
    country: String,
    gdp_weight: f64,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}

pub(crate) fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let path = require(path.to_path_buf())?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|source| Error::Csv {
            path: path.clone(),
            source,
        })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|source| Error::Csv { path, source })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    for r in rows {
        w.serialize(r).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let path = require(path.to_path_buf())?;
    let text = fs::read_to_string(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Fill in missing Q2 and Q4 rows as midpoints of their neighbours, then
/// renormalize population shares.
fn interpolate_quintiles(groups: &mut Vec<WorkerGroup>) {
    let has = |gs: &[WorkerGroup], l: &str| gs.iter().any(|g| g.label == l);
    if !(has(groups, "Q1") && has(groups, "Q3") && has(groups, "Q5")) {
        return;
    }
    let mut inserted = false;
    for (missing, lo, hi) in [("Q2", "Q1", "Q3"), ("Q4", "Q3", "Q5")] {
        if has(groups, missing) {
            continue;
        }
        let a = groups.iter().find(|g| g.label == lo).unwrap();
        let b = groups.iter().find(|g| g.label == hi).unwrap();
        let mid = |x: f64, y: f64| 0.5 * (x + y);
        let mpc = match (a.mpc, b.mpc) {
            (Some(x), Some(y)) => Some(mid(x, y)),
            _ => None,
        };
        let g = WorkerGroup {
            label: missing.to_string(),
            eta: mid(a.eta, b.eta),
            theta: mid(a.theta, b.theta),
            alpha_e: mid(a.alpha_e, b.alpha_e),
            alpha_d: mid(a.alpha_d, b.alpha_d),
            alpha_s: mid(a.alpha_s, b.alpha_s),
            sector: Sector::default_for_label(missing).unwrap(),
            phi: mid(a.phi, b.phi),
            mpc,
        };
        groups.push(g);
        inserted = true;
    }
    if inserted {
        groups.sort_by(|a, b| a.label.cmp(&b.label));
        let total: f64 = groups.iter().map(|g| g.eta).sum();
        for g in groups.iter_mut() {
            g.eta /= total;
        }
    }
}

/// Load one country directory. `gdp_weight` comes from the union level.
pub fn load_country(dir: &Path, code: &str, gdp_weight: f64) -> Result<CountryCalibration> {
    let rows: Vec<GroupRow> = read_csv(&dir.join("groups.csv"))?;
    let mut groups = rows
        .into_iter()
        .map(|r| {
            let sector = match r.sector.as_deref().map(str::trim) {
                Some(s) if !s.is_empty() => s.parse()?,
                _ => Sector::default_for_label(&r.label).ok_or_else(|| {
                    Error::Invalid(format!("{code}/{}: no sector given", r.label))
                })?,
            };
            Ok(WorkerGroup {
                label: r.label,
                eta: r.eta,
                theta: r.theta,
                alpha_e: r.alpha_e,
                alpha_d: r.alpha_d,
                alpha_s: r.alpha_s,
                sector,
                phi: r.phi,
                mpc: r.mpc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    interpolate_quintiles(&mut groups);

    let srows: Vec<SectorRow> = read_csv(&dir.join("sectors.csv"))?;
    let mut sectors: BTreeMap<Sector, SectorParams> = BTreeMap::new();
    for r in srows {
        let s: Sector = r.sector.parse()?;
        sectors.insert(
            s,
            SectorParams {
                labor_share: r.labor_share,
                calvo_reset: r.calvo_reset,
                io_weights: IoWeights {
                    services: r.xi_services,
                    goods: r.xi_goods,
                },
                essentials_input_share: r.xi_essentials,
                gdp_weight: r.gdp_weight,
                centrality: 0.0,
            },
        );
    }
    let mut take = |s: Sector| {
        sectors.remove(&s).ok_or_else(|| {
            Error::Invalid(format!("{code}: sectors.csv lacks a {} row", s.as_str()))
        })
    };
    let services = take(Sector::Services)?;
    let goods = take(Sector::Goods)?;

    let trade: Vec<TradeRow> = read_csv(&dir.join("trade.csv"))?;
    let trade_shares = trade.into_iter().map(|r| (r.partner, r.share)).collect();

    let mut c = CountryCalibration {
        code: code.to_string(),
        gdp_weight,
        groups,
        services,
        goods,
        trade_shares,
    };
    c.refresh_centrality();
    c.validate()?;
    Ok(c)
}

/// Load and validate a whole union directory.
pub fn load_union(dir: &Path) -> Result<Union> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let common: CommonParams = read_json(&dir.join("common.json"))?;
    common.validate()?;

    let weights_path = dir.join("countries.csv");
    let weights: Vec<(String, f64)> = if weights_path.is_file() {
        read_csv::<CountryRow>(&weights_path)?
            .into_iter()
            .map(|r| (r.country, r.gdp_weight))
            .collect()
    } else {
        // a single-country directory carries no weights file
        let mut subdirs: Vec<String> = fs::read_dir(dir)
            .map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("groups.csv").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        subdirs.sort();
        match subdirs.len() {
            0 => return Err(Error::MissingFile(dir.join("<country>/groups.csv"))),
            1 => vec![(subdirs.remove(0), 1.0)],
            _ => return Err(Error::MissingFile(weights_path)),
        }
    };

    let countries = weights
        .iter()
        .map(|(code, w)| load_country(&dir.join(code), code, *w))
        .collect::<Result<Vec<_>>>()?;
    let union = Union { common, countries };
    union.validate()?;
    Ok(union)
}

/// Write a union in the same layout `load_union` reads.
pub fn write_union(union: &Union, dir: &Path) -> Result<()> {
    let mk = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    mk(dir)?;
    write_json(&dir.join("common.json"), &union.common)?;
    let rows: Vec<CountryRow> = union
        .countries
        .iter()
        .map(|c| CountryRow {
            country: c.code.clone(),
            gdp_weight: c.gdp_weight,
        })
        .collect();
    write_csv(&dir.join("countries.csv"), &rows)?;
    for c in &union.countries {
        let cdir = dir.join(&c.code);
        mk(&cdir)?;
        write_country(c, &cdir)?;
    }
    Ok(())
}

fn write_country(c: &CountryCalibration, dir: &Path) -> Result<()> {
    let groups: Vec<GroupRow> = c
        .groups
        .iter()
        .map(|g| GroupRow {
            label: g.label.clone(),
            eta: g.eta,
            theta: g.theta,
            alpha_e: g.alpha_e,
            alpha_d: g.alpha_d,
            alpha_s: g.alpha_s,
            sector: Some(g.sector.as_str().to_string()),
            phi: g.phi,
            mpc: g.mpc,
        })
        .collect();
    write_csv(&dir.join("groups.csv"), &groups)?;
    let sectors: Vec<SectorRow> = Sector::ALL
        .iter()
        .map(|&s| {
            let p = c.sector(s);
            SectorRow {
                sector: s.as_str().to_string(),
                labor_share: p.labor_share,
                calvo_reset: p.calvo_reset,
                xi_services: p.io_weights.services,
                xi_goods: p.io_weights.goods,
                xi_essentials: p.essentials_input_share,
                gdp_weight: p.gdp_weight,
            }
        })
        .collect();
    write_csv(&dir.join("sectors.csv"), &sectors)?;
    let trade: Vec<TradeRow> = c
        .trade_shares
        .iter()
        .map(|(p, s)| TradeRow {
            partner: p.clone(),
            share: *s,
        })
        .collect();
    write_csv(&dir.join("trade.csv"), &trade)
}

// ---------------------------------------------------------------- scenarios

/// Wage indexation regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Indexation {
    #[default]
    None,
    /// Indexation to lagged average (salient) experienced inflation.
    Cpi { gamma: f64 },
    /// Indexation of each type to its own lagged experienced inflation.
    TypeSpecific { gamma: f64 },
}

impl Indexation {
    pub fn gamma(&self) -> f64 {
        match *self {
            Indexation::None => 0.0,
            Indexation::Cpi { gamma } | Indexation::TypeSpecific { gamma } => gamma,
        }
    }
}

/// Fiscal transfer. Amounts are per-recipient level transfers as a fraction
/// of steady-state labor income, paid from quarter 0 on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transfer {
    #[default]
    None,
    Uniform {
        amount: f64,
    },
    Targeted {
        group: String,
        amount: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRegime {
    pub taylor_pi_path: Vec<f64>,
    pub taylor_y: f64,
    #[serde(default)]
    pub transfer: Transfer,
    /// Permanent proportional cut in the consumer price of essentials
    #[serde(default)]
    pub subsidy: f64,
}

impl PolicyRegime {
    /// Constant Taylor rule from the common parameters.
    pub fn taylor(common: &CommonParams) -> Self {
        PolicyRegime {
            taylor_pi_path: vec![common.taylor_pi; common.horizon_t],
            taylor_y: common.taylor_y,
            transfer: Transfer::None,
            subsidy: 0.0,
        }
    }

    /// No inflation response for quarters `0..delay`, then `common.taylor_pi`.
    pub fn delayed(common: &CommonParams, delay: usize) -> Self {
        let mut p = Self::taylor(common);
        p.taylor_pi_path
            .iter_mut()
            .take(delay)
            .for_each(|v| *v = 0.0);
        p
    }

    pub fn validate(&self) -> Result<()> {
        for (t, v) in self.taylor_pi_path.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::OutOfRange {
                    entity: format!("policy quarter {t}"),
                    field: "taylor_pi",
                    value: *v,
                    expected: ">= 0",
                });
            }
        }
        in_range("policy", "taylor_y", self.taylor_y, |v| v >= 0.0, ">= 0")?;
        in_range(
            "policy",
            "subsidy",
            self.subsidy,
            |v| (0.0..1.0).contains(&v),
            "[0,1)",
        )?;
        match &self.transfer {
            Transfer::None => {}
            Transfer::Uniform { amount } | Transfer::Targeted { amount, .. } => {
                in_range("policy", "transfer amount", *amount, |v| v >= 0.0, ">= 0")?
            }
        }
        Ok(())
    }
}

/// Shock peaks in scenario files are annualized rates; paths are quarterly.
pub const QUARTERS_PER_YEAR: f64 = 4.0;

/// Exogenous paths plus policy for one experiment.
///
/// `essentials_path[t]` is the quarter-`t` log change of the essentials price;
/// the price level is its cumulative sum. `goods_path` and `services_path` are
/// cost-push terms added to the sectoral price Phillips curves and default to
/// zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockScenario {
    pub essentials_path: Vec<f64>,
    #[serde(default)]
    pub goods_path: Vec<f64>,
    #[serde(default)]
    pub services_path: Vec<f64>,
    pub policy: PolicyRegime,
    #[serde(default)]
    pub indexation: Indexation,
    #[serde(default)]
    pub nonlinear: bool,
}

impl ShockScenario {
    /// Essentials-only scenario under the default Taylor rule.
    pub fn essentials(common: &CommonParams, path: Vec<f64>) -> Self {
        ShockScenario {
            essentials_path: path,
            goods_path: Vec::new(),
            services_path: Vec::new(),
            policy: PolicyRegime::taylor(common),
            indexation: Indexation::None,
            nonlinear: false,
        }
    }

    /// AR(1) essentials shock whose peak is given as an annualized rate.
    pub fn ar1_annual(
        common: &CommonParams,
        peak_annual: f64,
        persistence: f64,
        peak_quarter: usize,
    ) -> Self {
        Self::essentials(
            common,
            ar1_path(
                peak_annual / QUARTERS_PER_YEAR,
                persistence,
                peak_quarter,
                common.horizon_t,
            ),
        )
    }

    /// The bundled baseline: essentials inflation peaking at 25% annualized
    /// in quarter 4, persistence 0.88.
    pub fn baseline(common: &CommonParams) -> Self {
        Self::ar1_annual(common, 0.25, 0.88, 4)
    }

    pub fn horizon(&self) -> usize {
        self.essentials_path.len()
    }

    /// Path padded with zeros to length `t`.
    pub fn padded(path: &[f64], t: usize) -> Vec<f64> {
        let mut v = path.to_vec();
        v.resize(t, 0.0);
        v
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.essentials_path.len() != horizon {
            return Err(Error::Invalid(format!(
                "essentials_path has length {} but the horizon is {horizon}",
                self.essentials_path.len()
            )));
        }
        for (name, p) in [
            ("essentials_path", &self.essentials_path),
            ("goods_path", &self.goods_path),
            ("services_path", &self.services_path),
        ] {
            if p.len() > horizon {
                return Err(Error::Invalid(format!("{name} is longer than the horizon")));
            }
            if let Some(t) = p.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("{name}[{t}] is not finite")));
            }
            if let Some(last) = p.last() {
                if p.len() == horizon && last.abs() >= 1e-6 {
                    return Err(Error::Invalid(format!(
                        "{name} has not died out by the horizon (last value {last:e})"
                    )));
                }
            }
        }
        if self.policy.taylor_pi_path.len() != horizon {
            return Err(Error::Invalid(format!(
                "taylor_pi_path has length {} but the horizon is {horizon}",
                self.policy.taylor_pi_path.len()
            )));
        }
        self.policy.validate()
    }
}

/// Cosine taper applied over the last quarter of the horizon so that a path
/// ends exactly at zero.
fn taper(path: &mut [f64]) {
    let t = path.len();
    if t < 4 {
        return;
    }
    let start = (3 * t) / 4;
    let span = (t - 1 - start) as f64;
    for (i, v) in path.iter_mut().enumerate().skip(start) {
        let x = (i - start) as f64 / span;
        let w = (0.5 * std::f64::consts::PI * x).cos();
        *v *= if i == t - 1 { 0.0 } else { w * w };
    }
}

/// Linear ramp to `peak` at quarter `peak_quarter`, geometric decay afterwards.
pub fn ar1_path(peak: f64, persistence: f64, peak_quarter: usize, horizon: usize) -> Vec<f64> {
    let k = peak_quarter as f64;
    let mut p: Vec<f64> = (0..horizon)
        .map(|t| {
            if t <= peak_quarter {
                peak * (t as f64 + 1.0) / (k + 1.0)
            } else {
                peak * persistence.powi((t - peak_quarter) as i32)
            }
        })
        .collect();
    taper(&mut p);
    p
}

/// Hump-shaped impulse response of an AR(2) with real roots `decay` and a
/// rise root chosen so the continuous peak falls on `peak_quarter`.
pub fn hump_path(peak: f64, decay: f64, peak_quarter: usize, horizon: usize) -> Result<Vec<f64>> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::OutOfRange {
            entity: "hump".into(),
            field: "decay",
            value: decay,
            expected: "(0,1)",
        });
    }
    // f(s) = d^s - r^s peaks at s* = ln(ln r / ln d) / ln(d / r)
    let target = peak_quarter as f64 + 1.0;
    let argmax = |r: f64| (r.ln() / decay.ln()).ln() / (decay / r).ln();
    let limit = -1.0 / decay.ln();
    if target >= limit {
        return Err(Error::Invalid(format!(
            "peak quarter {peak_quarter} is unreachable with decay {decay}"
        )));
    }
    let (mut lo, mut hi) = (1e-12, decay * (1.0 - 1e-12));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if argmax(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rise = 0.5 * (lo + hi);
    let mut p: Vec<f64> = (0..horizon)
        .map(|t| decay.powi(t as i32 + 1) - rise.powi(t as i32 + 1))
        .collect();
    let top = p.iter().cloned().fold(f64::MIN, f64::max);
    p.iter_mut().for_each(|v| *v *= peak / top);
    taper(&mut p);
    Ok(p)
}

/// Shock helper parameters; `peak` is an annualized rate.
#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ShockSpec {
    Ar1 {
        peak: f64,
        persistence: f64,
        peak_quarter: usize,
    },
    Hump {
        peak: f64,
        decay: f64,
        peak_quarter: usize,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySpec {
    #[serde(default)]
    taylor_pi_path: Option<Vec<f64>>,
    #[serde(default)]
    taylor_pi: Option<f64>,
    #[serde(default)]
    delay_quarters: usize,
    #[serde(default)]
    taylor_y: Option<f64>,
    #[serde(default)]
    transfer: Transfer,
    #[serde(default)]
    subsidy: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSpec {
    #[serde(default)]
    essentials_path: Option<Vec<f64>>,
    #[serde(default)]
    shock: Option<ShockSpec>,
    #[serde(default)]
    goods_path: Vec<f64>,
    #[serde(default)]
    services_path: Vec<f64>,
    #[serde(default)]
    policy: Option<PolicySpec>,
    #[serde(default)]
    indexation: Indexation,
    #[serde(default)]
    nonlinear: bool,
}

/// Read a `scenario.json` file against the given common parameters.
pub fn load_scenario(path: &Path, common: &CommonParams) -> Result<ShockScenario> {
    let spec: ScenarioSpec = read_json(path)?;
    scenario_from_spec(spec, common)
}

/// Parse a scenario from a JSON string.
pub fn parse_scenario(text: &str, common: &CommonParams) -> Result<ShockScenario> {
    let spec: ScenarioSpec = serde_json::from_str(text).map_err(|source| Error::Json {
        path: PathBuf::from("<scenario>"),
        source,
    })?;
    scenario_from_spec(spec, common)
}

fn scenario_from_spec(spec: ScenarioSpec, common: &CommonParams) -> Result<ShockScenario> {
    let horizon = common.horizon_t;
    let essentials_path = match (spec.essentials_path, spec.shock) {
        (Some(p), None) => ShockScenario::padded(&p, horizon),
        (
            None,
            Some(ShockSpec::Ar1 {
                peak,
                persistence,
                peak_quarter,
            }),
        ) => ar1_path(peak / QUARTERS_PER_YEAR, persistence, peak_quarter, horizon),
        (
            None,
            Some(ShockSpec::Hump {
                peak,
                decay,
                peak_quarter,
            }),
        ) => hump_path(peak / QUARTERS_PER_YEAR, decay, peak_quarter, horizon)?,
        (None, None) => ShockScenario::baseline(common).essentials_path,
        (Some(_), Some(_)) => {
            return Err(Error::Invalid(
                "scenario gives both essentials_path and shock".into(),
            ))
        }
    };
    let policy = match spec.policy {
        None => PolicyRegime::taylor(common),
        Some(p) => {
            let taylor_pi_path = match p.taylor_pi_path {
                Some(path) => ShockScenario::padded(&path, horizon),
                None => {
                    let phi = p.taylor_pi.unwrap_or(common.taylor_pi);
                    (0..horizon)
                        .map(|t| if t < p.delay_quarters { 0.0 } else { phi })
                        .collect()
                }
            };
            PolicyRegime {
                taylor_pi_path,
                taylor_y: p.taylor_y.unwrap_or(common.taylor_y),
                transfer: p.transfer,
                subsidy: p.subsidy,
            }
        }
    };
    let s = ShockScenario {
        essentials_path,
        goods_path: spec.goods_path,
        services_path: spec.services_path,
        policy,
        indexation: spec.indexation,
        nonlinear: spec.nonlinear,
    };
    s.validate(horizon)?;
    Ok(s)
}
