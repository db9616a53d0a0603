//! Response files and component/treatment value files.
//!
//! A response file is comma-separated with a header. Columns named after the
//! observational tier's factors (name or abbreviation) identify the unit; every
//! other column is a response. Factor labels are ranked within each class of the
//! factor's nesting factors (numerically when all labels are numbers), and rows
//! are reordered to the standard order of the tier. A file without factor
//! columns is taken to be in standard order already.

use crate::anova::{AnovaTable, Basis};
use crate::chain::ExperimentChain;
use crate::error::{Error, Result};
use crate::estimation::ComponentMap;
use nalgebra::DVector;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct DataFile {
    /// Response columns in file order, values in standard unit order.
    pub responses: Vec<(String, DVector<f64>)>,
}

impl DataFile {
    /// The named response, or the only one when `name` is `None`.
    pub fn response(&self, name: Option<&str>) -> Result<&DVector<f64>> {
        match name {
            Some(n) => self
                .responses
                .iter()
                .find(|(c, _)| c == n)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Data(format!("no response column {}", n))),
            None if self.responses.len() == 1 => Ok(&self.responses[0].1),
            None => Err(Error::Data(format!(
                "{} response columns; choose one of {}",
                self.responses.len(),
                self.responses
                    .iter()
                    .map(|(c, _)| c.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn read_data(path: &Path, chain: &ExperimentChain) -> Result<DataFile> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_data(&text, &path.display().to_string(), chain)
}

fn rank_labels(labels: &BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.iter().cloned().collect();
    let nums: Option<Vec<f64>> = v.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(nums) = nums {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(v).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        v = pairs.into_iter().map(|p| p.1).collect();
    }
    v
}

pub fn parse_data(text: &str, file: &str, chain: &ExperimentChain) -> Result<DataFile> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {}", file, e)))?
        .iter()
        .map(String::from)
        .collect();
    let mut records: Vec<Vec<String>> = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| Error::Data(format!("{}: {}", file, e)))?;
        records.push(r.iter().map(String::from).collect());
    }
    let s = &chain.tiers[0].structure;
    let n = s.unit_count();
    if records.len() != n {
        return Err(Error::Data(format!(
            "{} has {} rows but tier {} has {} units",
            file,
            records.len(),
            chain.tiers[0].name,
            n
        )));
    }
    let factors = s.factors();
    let real: Vec<usize> = (0..factors.len()).filter(|&f| !factors[f].pseudo).collect();
    let col_of: Vec<Option<usize>> = real
        .iter()
        .map(|&f| {
            header
                .iter()
                .position(|h| *h == factors[f].name || *h == factors[f].abbrev)
        })
        .collect();
    let present = col_of.iter().filter(|c| c.is_some()).count();
    let order: Vec<usize> = if present == 0 {
        (0..n).collect()
    } else if present < real.len() {
        let missing: Vec<&str> = real
            .iter()
            .zip(&col_of)
            .filter(|(_, c)| c.is_none())
            .map(|(&f, _)| factors[f].name.as_str())
            .collect();
        return Err(Error::Data(format!(
            "{} lacks factor columns {}",
            file,
            missing.join(", ")
        )));
    } else {
        unit_order(&records, &real, &col_of, s, file)?
    };
    let factor_cols: BTreeSet<usize> = col_of.iter().flatten().copied().collect();
    let mut responses = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if factor_cols.contains(&c) {
            continue;
        }
        let mut v = DVector::zeros(n);
        for (row, rec) in records.iter().enumerate() {
            let cell = rec.get(c).map(String::as_str).unwrap_or("");
            let x: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{} row {} column {}: '{}' is not a number",
                    file,
                    row + 2,
                    name,
                    cell
                ))
            })?;
            if !x.is_finite() {
                return Err(Error::Data(format!(
                    "{} row {} column {} is not finite",
                    file,
                    row + 2,
                    name
                )));
            }
            v[order[row]] = x;
        }
        responses.push((name.clone(), v));
    }
    if responses.is_empty() {
        return Err(Error::Data(format!("{} has no response column", file)));
    }
    Ok(DataFile { responses })
}

/// Standard-order unit of every record.
fn unit_order(
    records: &[Vec<String>],
    real: &[usize],
    col_of: &[Option<usize>],
    s: &crate::structure::PosetBlockStructure,
    file: &str,
) -> Result<Vec<usize>> {
    let factors = s.factors();
    let anc = s.ancestors();
    let n = records.len();
    let label = |row: usize, k: usize| records[row][col_of[k].unwrap()].clone();
    let pos_of: HashMap<usize, usize> = real.iter().enumerate().map(|(k, &f)| (f, k)).collect();
    let mut codes = vec![vec![0usize; real.len()]; n];
    for (k, &f) in real.iter().enumerate() {
        let nest: Vec<usize> = anc[f].iter().filter_map(|a| pos_of.get(a).copied()).collect();
        let mut classes: BTreeMap<Vec<String>, BTreeSet<String>> = BTreeMap::new();
        for row in 0..n {
            let key: Vec<String> = nest.iter().map(|&j| label(row, j)).collect();
            classes.entry(key).or_default().insert(label(row, k));
        }
        let mut rank: HashMap<(Vec<String>, String), usize> = HashMap::new();
        for (key, labels) in &classes {
            if labels.len() != factors[f].levels {
                return Err(Error::Data(format!(
                    "{}: factor {} has {} levels within {:?}, expected {}",
                    file,
                    factors[f].name,
                    labels.len(),
                    key,
                    factors[f].levels
                )));
            }
            for (i, l) in rank_labels(labels).into_iter().enumerate() {
                rank.insert((key.clone(), l), i);
            }
        }
        for (row, c) in codes.iter_mut().enumerate() {
            let key: Vec<String> = nest.iter().map(|&j| label(row, j)).collect();
            c[k] = rank[&(key, label(row, k))];
        }
    }
    let index: HashMap<Vec<usize>, usize> = (0..n)
        .map(|u| (real.iter().map(|&f| factors[f].codes[u]).collect(), u))
        .collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for (row, c) in codes.iter().enumerate() {
        let u = *index
            .get(c)
            .ok_or_else(|| Error::Data(format!("{} row {} does not match a unit of the design", file, row + 2)))?;
        if seen[u] {
            return Err(Error::Data(format!("{} row {} repeats a unit", file, row + 2)));
        }
        seen[u] = true;
        order.push(u);
    }
    Ok(order)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Component values, one `symbol = value` per line. Symbols may be spectral or
/// canonical (Greek or ASCII names); within one tier all must use one basis, and
/// every component of each mentioned tier must be given.
pub fn parse_components(text: &str, file: &str, table: &AnovaTable, chain: &ExperimentChain) -> Result<ComponentMap> {
    let perr = |line: usize, message: String| Error::Parse {
        file: file.to_string(),
        line,
        message,
    };
    let mut given: BTreeMap<usize, (Basis, BTreeMap<usize, f64>)> = BTreeMap::new();
    for (ln, l) in lines(text) {
        let (name, value) = l
            .split_once('=')
            .ok_or_else(|| perr(ln, format!("expected 'symbol = value', found '{}'", l)))?;
        let (id, basis) = table
            .parse_component(name)
            .ok_or_else(|| perr(ln, format!("unknown component {}", name.trim())))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| perr(ln, format!("'{}' is not a number", value.trim())))?;
        let entry = given.entry(id.tier).or_insert((basis, BTreeMap::new()));
        if entry.0 != basis {
            return Err(perr(
                ln,
                format!("tier {} mixes spectral and canonical components", table.tiers[id.tier]),
            ));
        }
        if entry.1.insert(id.gf, v).is_some() {
            return Err(perr(ln, format!("{} given twice", name.trim())));
        }
    }
    let mut out = ComponentMap::new();
    for k in 0..chain.random_tiers() {
        let s = &chain.tiers[k].structure;
        let m = s.generalized_factors().len();
        let Some((basis, vals)) = given.get(&k) else {
            return Err(Error::Data(format!(
                "{}: no components for tier {}",
                file, table.tiers[k]
            )));
        };
        let missing: Vec<String> = (0..m)
            .filter(|h| !vals.contains_key(h))
            .map(|h| {
                let c = table.component(crate::anova::ComponentId { tier: k, gf: h });
                match basis {
                    Basis::Spectral => c.spectral.clone(),
                    Basis::Canonical => c.canonical.clone(),
                }
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("{}: missing {}", file, missing.join(", "))));
        }
        let v: Vec<f64> = (0..m).map(|h| vals[&h]).collect();
        let spectral = match basis {
            Basis::Spectral => v,
            Basis::Canonical => s.spectral_from_canonical(&v),
        };
        for (h, x) in spectral.into_iter().enumerate() {
            out.insert(crate::anova::ComponentId { tier: k, gf: h }, x);
        }
    }
    Ok(out)
}

pub fn read_components(path: &Path, table: &AnovaTable, chain: &ExperimentChain) -> Result<ComponentMap> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_components(&text, &path.display().to_string(), table, chain)
}

/// Treatment values, one number per line in the treatment tier's standard order.
pub fn parse_tau(text: &str, file: &str, chain: &ExperimentChain) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (ln, l) in lines(text) {
        for tok in l
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            out.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                file: file.to_string(),
                line: ln,
                message: format!("'{}' is not a number", tok),
            })?);
        }
    }
    let t = chain.treatment_tier().unit_count();
    if out.len() != t {
        return Err(Error::Data(format!(
            "{} gives {} treatment values, expected {}",
            file,
            out.len(),
            t
        )));
    }
    Ok(out)
}

pub fn read_tau(path: &Path, chain: &ExperimentChain) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_tau(&text, &path.display().to_string(), chain)
}
