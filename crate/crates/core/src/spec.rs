//! Line-oriented design description format.
//!
//! ```text
//! [tier Tastings]                 observational tier first, treatments last
//! layout tastings.csv             per-unit columns, rows in standard order
//! factor Sessions S 3
//! factor Panellists P 12 in Sessions
//! pseudofactor F1 F1 in Blocks column F1      (or: levels 0 0 1 1 ...)
//! split Fibres by F1; F1*Blocks              (terms: [Label =] A*B + C ...)
//! [treatments Treatments]
//! factor Rosemary R 2
//! [map Tastings -> Meatloaves]
//! columns Blocks Meatloaves      source-layout columns, one per target factor
//! assign 0 0 1 1                 (alternative: target unit per source unit)
//! replication 12                 (optional declared replication)
//! [options]
//! tolerance = 1e-9
//! max_denominator = 64
//! ```
//!
//! Units of a tier are numbered in standard order: lexicographic in the
//! declared factors, first factor slowest, nested factors by within-nest code.

use crate::chain::{DesignMap, ExperimentChain, Options, PseudoTerm, SplitDecl, Tier};
use crate::error::{Error, Result};
use crate::rational::MAX_DENOMINATOR;
use crate::structure::{FactorDecl, PosetBlockStructure};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub enum CodeSource {
    Column(String),
    Levels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSpec {
    pub name: String,
    pub abbrev: String,
    pub nested_in: Vec<String>,
    pub codes: CodeSource,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermSpec {
    pub label: Option<String>,
    /// Each set is a `*`-joined list of factor names.
    pub sets: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub parent: Vec<String>,
    pub terms: Vec<TermSpec>,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TierSpec {
    pub name: String,
    pub treatments: bool,
    pub layout: Option<String>,
    pub factors: Vec<FactorDecl>,
    pub pseudofactors: Vec<PseudoSpec>,
    pub splits: Vec<SplitSpec>,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MapSource {
    Columns(Vec<String>),
    Assign(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSpec {
    pub from: String,
    pub to: String,
    pub source: Option<MapSource>,
    pub replication: Option<usize>,
    pub line: usize,
}

#[derive(Clone, Debug)]
pub struct DesignSpec {
    pub tiers: Vec<TierSpec>,
    pub maps: Vec<MapSpec>,
    pub options: Options,
    /// Name used in diagnostics.
    pub file: String,
    /// Directory that layout paths are relative to.
    pub base_dir: PathBuf,
}

enum Section {
    None,
    Tier(usize),
    Map(usize),
    Options,
}

fn perr(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_usize(file: &str, line: usize, tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| {
        perr(
            file,
            line,
            format!("{} must be a non-negative integer, found '{}'", what, tok),
        )
    })
}

fn parse_set(s: &str) -> Vec<String> {
    s.split('*')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Parse a design description; layout files are resolved against `base_dir`.
pub fn parse_design_text(text: &str, file: &str, base_dir: &Path) -> Result<DesignSpec> {
    let mut tiers: Vec<TierSpec> = Vec::new();
    let mut maps: Vec<MapSpec> = Vec::new();
    let mut options = Options::from_env();
    let mut section = Section::None;
    for (idx, raw) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(head) = line.strip_prefix('[') {
            let head = head
                .strip_suffix(']')
                .ok_or_else(|| perr(file, ln, "section header must end with ']'"))?
                .trim();
            let (kind, rest) = head.split_once(char::is_whitespace).unwrap_or((head, ""));
            let rest = rest.trim();
            section = match kind {
                "tier" | "treatments" => {
                    if rest.is_empty() || rest.contains(char::is_whitespace) {
                        return Err(perr(file, ln, format!("[{}] needs a single-word name", kind)));
                    }
                    if tiers.iter().any(|t| t.name == rest) {
                        return Err(perr(file, ln, format!("tier {} declared twice", rest)));
                    }
                    if tiers.last().map(|t| t.treatments).unwrap_or(false) {
                        return Err(perr(file, ln, "the treatments tier must be the last tier"));
                    }
                    tiers.push(TierSpec {
                        name: rest.to_string(),
                        treatments: kind == "treatments",
                        layout: None,
                        factors: Vec::new(),
                        pseudofactors: Vec::new(),
                        splits: Vec::new(),
                        line: ln,
                    });
                    Section::Tier(tiers.len() - 1)
                }
                "map" => {
                    let (a, b) = rest
                        .split_once("->")
                        .ok_or_else(|| perr(file, ln, "map header must read [map From -> To]"))?;
                    maps.push(MapSpec {
                        from: a.trim().to_string(),
                        to: b.trim().to_string(),
                        source: None,
                        replication: None,
                        line: ln,
                    });
                    Section::Map(maps.len() - 1)
                }
                "options" => Section::Options,
                other => return Err(perr(file, ln, format!("unknown section [{}]", other))),
            };
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::None => return Err(perr(file, ln, "statement outside any section")),
            Section::Tier(t) => parse_tier_line(file, ln, line, &toks, &mut tiers[t])?,
            Section::Map(m) => {
                let map = &mut maps[m];
                match toks[0] {
                    "columns" | "assign" if map.source.is_some() => {
                        return Err(perr(file, ln, "map assignment given twice"))
                    }
                    "columns" if toks.len() > 1 => {
                        map.source = Some(MapSource::Columns(toks[1..].iter().map(|s| s.to_string()).collect()))
                    }
                    "assign" if toks.len() > 1 => {
                        let v = toks[1..]
                            .iter()
                            .map(|t| parse_usize(file, ln, t, "target unit"))
                            .collect::<Result<Vec<_>>>()?;
                        map.source = Some(MapSource::Assign(v))
                    }
                    "replication" if toks.len() == 2 => {
                        map.replication = Some(parse_usize(file, ln, toks[1], "replication")?)
                    }
                    _ => return Err(perr(file, ln, format!("cannot read map statement '{}'", line))),
                }
            }
            Section::Options => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| perr(file, ln, "options read 'key = value'"))?;
                let v = v.trim();
                match k.trim() {
                    "tolerance" => {
                        options.tol = v
                            .parse::<f64>()
                            .ok()
                            .filter(|t| *t > 0.0)
                            .ok_or_else(|| perr(file, ln, "tolerance must be a positive number"))?
                    }
                    "max_denominator" => {
                        options.max_denominator = v
                            .parse::<i64>()
                            .ok()
                            .filter(|d| *d > 0)
                            .ok_or_else(|| perr(file, ln, "max_denominator must be a positive integer"))?
                    }
                    other => return Err(perr(file, ln, format!("unknown option '{}'", other))),
                }
            }
        }
    }
    if tiers.len() < 2 {
        return Err(perr(
            file,
            text.lines().count().max(1),
            "need at least one unit tier and a treatments tier",
        ));
    }
    if !tiers.last().unwrap().treatments {
        return Err(perr(
            file,
            tiers.last().unwrap().line,
            "the last tier must be declared with [treatments ...]",
        ));
    }
    for t in &tiers {
        if t.factors.is_empty() {
            return Err(perr(file, t.line, format!("tier {} declares no factors", t.name)));
        }
    }
    Ok(DesignSpec {
        tiers,
        maps,
        options,
        file: file.to_string(),
        base_dir: base_dir.to_path_buf(),
    })
}

fn parse_tier_line(file: &str, ln: usize, line: &str, toks: &[&str], tier: &mut TierSpec) -> Result<()> {
    match toks[0] {
        "layout" if toks.len() == 2 => {
            if tier.layout.is_some() {
                return Err(perr(file, ln, "layout given twice"));
            }
            tier.layout = Some(toks[1].to_string());
        }
        "factor" => {
            if toks.len() < 4 || (toks.len() > 4 && toks[4] != "in") || toks.len() == 5 {
                return Err(perr(file, ln, "factor reads: factor Name Abbrev levels [in Name ...]"));
            }
            let levels = parse_usize(file, ln, toks[3], "level count")?;
            if levels == 0 {
                return Err(perr(file, ln, format!("factor {} has no levels", toks[1])));
            }
            tier.factors.push(FactorDecl {
                name: toks[1].to_string(),
                abbrev: toks[2].to_string(),
                levels,
                nested_in: toks.iter().skip(5).map(|s| s.to_string()).collect(),
            });
        }
        "pseudofactor" => {
            if toks.len() < 5 {
                return Err(perr(
                    file,
                    ln,
                    "pseudofactor reads: pseudofactor Name Abbrev [in Name ...] (column C | levels c ...)",
                ));
            }
            let mut at = 3;
            let mut nested_in = Vec::new();
            if toks[3] == "in" {
                at = 4;
                while at < toks.len() && toks[at] != "column" && toks[at] != "levels" {
                    nested_in.push(toks[at].to_string());
                    at += 1;
                }
            }
            let codes = match toks.get(at).copied() {
                Some("column") if toks.len() == at + 2 => CodeSource::Column(toks[at + 1].to_string()),
                Some("levels") if toks.len() > at + 1 => CodeSource::Levels(
                    toks[at + 1..]
                        .iter()
                        .map(|t| parse_usize(file, ln, t, "pseudofactor level"))
                        .collect::<Result<_>>()?,
                ),
                _ => return Err(perr(file, ln, "pseudofactor needs 'column C' or 'levels c ...'")),
            };
            tier.pseudofactors.push(PseudoSpec {
                name: toks[1].to_string(),
                abbrev: toks[2].to_string(),
                nested_in,
                codes,
                line: ln,
            });
        }
        "split" => {
            let body = line["split".len()..].trim();
            let (parent, terms) = body
                .split_once(" by ")
                .ok_or_else(|| perr(file, ln, "split reads: split Parent by term; term ..."))?;
            let mut out = Vec::new();
            for term in terms.split(';') {
                let term = term.trim();
                if term.is_empty() {
                    continue;
                }
                let (label, sets) = match term.split_once('=') {
                    Some((l, r)) => (Some(l.trim().to_string()), r),
                    None => (None, term),
                };
                let sets: Vec<Vec<String>> = sets.split('+').map(parse_set).collect();
                if sets.iter().any(|s| s.is_empty()) {
                    return Err(perr(file, ln, format!("empty factor set in split term '{}'", term)));
                }
                out.push(TermSpec { label, sets });
            }
            if out.is_empty() {
                return Err(perr(file, ln, "split has no terms"));
            }
            tier.splits.push(SplitSpec {
                parent: parse_set(parent),
                terms: out,
                line: ln,
            });
        }
        _ => return Err(perr(file, ln, format!("cannot read tier statement '{}'", line))),
    }
    Ok(())
}

/// Read a design file.
pub fn parse_design_file(path: &Path) -> Result<DesignSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_design_text(&text, &path.display().to_string(), &base)
}

/// Read and validate a design file into a chain.
pub fn parse_design_spec(path: &Path) -> Result<ExperimentChain> {
    parse_design_file(path)?.build()
}

type Layout = HashMap<String, Vec<String>>;

fn read_layout(path: &Path) -> Result<(Layout, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols: Layout = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
        for (h, v) in headers.iter().zip(rec.iter()) {
            cols.get_mut(h).unwrap().push(v.to_string());
        }
        rows += 1;
    }
    Ok((cols, rows))
}

fn column_codes(spec: &DesignSpec, layout: &Layout, tier: &str, col: &str, line: usize) -> Result<Vec<usize>> {
    let values = layout.get(col).ok_or_else(|| {
        perr(
            &spec.file,
            line,
            format!("layout of tier {} has no column {}", tier, col),
        )
    })?;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.parse::<usize>().map_err(|_| {
                Error::Data(format!(
                    "layout of tier {}: column {} row {} holds '{}', expected a 0-based code",
                    tier,
                    col,
                    i + 2,
                    v
                ))
            })
        })
        .collect()
}

fn resolve(s: &PosetBlockStructure, names: &[String], tier: &str, file: &str, line: usize) -> Result<BTreeSet<usize>> {
    names
        .iter()
        .map(|n| {
            s.factor_index(n)
                .ok_or_else(|| perr(file, line, format!("tier {} has no factor {}", tier, n)))
        })
        .collect()
}

impl DesignSpec {
    /// Validate against the layouts and build the chain.
    pub fn build(&self) -> Result<ExperimentChain> {
        let mut layouts: Vec<Option<Layout>> = Vec::new();
        let mut tiers: Vec<Tier> = Vec::new();
        for ts in &self.tiers {
            let mut s = PosetBlockStructure::from_declarations(&ts.factors)
                .map_err(|e| perr(&self.file, ts.line, format!("tier {}: {}", ts.name, e)))?;
            let layout = match &ts.layout {
                None => None,
                Some(p) => {
                    let (cols, rows) = read_layout(&self.base_dir.join(p))?;
                    if rows != s.unit_count() {
                        return Err(Error::Data(format!(
                            "layout {} has {} rows but tier {} has {} units",
                            p,
                            rows,
                            ts.name,
                            s.unit_count()
                        )));
                    }
                    for (fi, f) in ts.factors.iter().enumerate() {
                        if cols.contains_key(&f.name) {
                            let codes = column_codes(self, &cols, &ts.name, &f.name, ts.line)?;
                            if let Some(u) = (0..rows).find(|&u| codes[u] != s.factors()[fi].codes[u]) {
                                return Err(Error::Data(format!(
                                    "layout {} row {} is out of standard order for factor {}",
                                    p,
                                    u + 2,
                                    f.name
                                )));
                            }
                        }
                    }
                    Some(cols)
                }
            };
            for ps in &ts.pseudofactors {
                let codes = match &ps.codes {
                    CodeSource::Levels(v) => v.clone(),
                    CodeSource::Column(c) => {
                        let l = layout.as_ref().ok_or_else(|| {
                            perr(
                                &self.file,
                                ps.line,
                                format!("tier {} has no layout to read column {} from", ts.name, c),
                            )
                        })?;
                        column_codes(self, l, &ts.name, c, ps.line)?
                    }
                };
                let nest: Vec<usize> = resolve(&s, &ps.nested_in, &ts.name, &self.file, ps.line)?
                    .into_iter()
                    .collect();
                s.add_pseudofactor(&ps.name, &ps.abbrev, &nest, codes)
                    .map_err(|e| perr(&self.file, ps.line, format!("tier {}: {}", ts.name, e)))?;
            }
            let mut splits = Vec::new();
            for sp in &ts.splits {
                let set = resolve(&s, &sp.parent, &ts.name, &self.file, sp.line)?;
                let closed = s.nest_closure(&set);
                let parent = s.gf_index(&closed).ok_or_else(|| {
                    perr(
                        &self.file,
                        sp.line,
                        format!("{} is not a stratum of tier {}", sp.parent.join("*"), ts.name),
                    )
                })?;
                let mut terms = Vec::new();
                for t in &sp.terms {
                    let sets = t
                        .sets
                        .iter()
                        .map(|names| resolve(&s, names, &ts.name, &self.file, sp.line))
                        .collect::<Result<Vec<_>>>()?;
                    terms.push(PseudoTerm {
                        label: t.label.clone(),
                        sets,
                    });
                }
                splits.push(SplitDecl {
                    parent,
                    terms,
                    residual_label: None,
                });
            }
            let mut tier = Tier::new(ts.name.clone(), s);
            tier.splits = splits;
            tiers.push(tier);
            layouts.push(layout);
        }
        let mut maps = Vec::new();
        for i in 0..tiers.len() - 1 {
            let (from, to) = (&self.tiers[i].name, &self.tiers[i + 1].name);
            let ms = self
                .maps
                .iter()
                .find(|m| &m.from == from && &m.to == to)
                .ok_or_else(|| perr(&self.file, 1, format!("no [map {} -> {}] section", from, to)))?;
            let name = format!("{} -> {}", from, to);
            let target = &tiers[i + 1];
            let assignment = match &ms.source {
                None => return Err(perr(&self.file, ms.line, format!("map {} has no assignment", name))),
                Some(MapSource::Assign(v)) => {
                    if v.len() != tiers[i].unit_count() {
                        return Err(perr(
                            &self.file,
                            ms.line,
                            format!(
                                "map {} assigns {} units, tier {} has {}",
                                name,
                                v.len(),
                                from,
                                tiers[i].unit_count()
                            ),
                        ));
                    }
                    v.clone()
                }
                Some(MapSource::Columns(cols)) => {
                    let declared = &self.tiers[i + 1].factors;
                    if cols.len() != declared.len() {
                        return Err(perr(
                            &self.file,
                            ms.line,
                            format!(
                                "map {} needs one column per factor of {} ({})",
                                name,
                                to,
                                declared.len()
                            ),
                        ));
                    }
                    let layout = layouts[i].as_ref().ok_or_else(|| {
                        perr(
                            &self.file,
                            ms.line,
                            format!("tier {} has no layout for map {}", from, name),
                        )
                    })?;
                    let codes = cols
                        .iter()
                        .map(|c| column_codes(self, layout, from, c, ms.line))
                        .collect::<Result<Vec<_>>>()?;
                    let mut out = vec![0usize; tiers[i].unit_count()];
                    for (u, slot) in out.iter_mut().enumerate() {
                        let mut idx = 0;
                        for (k, f) in declared.iter().enumerate() {
                            let c = codes[k][u];
                            if c >= f.levels {
                                return Err(Error::Data(format!(
                                    "map {}: row {} gives {} = {} but it has {} levels",
                                    name,
                                    u + 2,
                                    cols[k],
                                    c,
                                    f.levels
                                )));
                            }
                            idx = idx * f.levels + c;
                        }
                        *slot = idx;
                    }
                    out
                }
            };
            let map = DesignMap::new(name.clone(), target.unit_count(), assignment)?;
            if let Some(r) = ms.replication {
                let actual = map.check_equireplicate()?;
                if actual != r {
                    return Err(Error::Chain(format!(
                        "map {} declares replication {} but assigns {}",
                        name, r, actual
                    )));
                }
            }
            maps.push(map);
        }
        ExperimentChain::new(tiers, maps, self.options)
    }
}

impl fmt::Display for DesignSpec {
    /// Canonical form: one blank line between sections, single spaces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.tiers {
            if !first {
                writeln!(f)?;
            }
            first = false;
            let kind = if t.treatments { "treatments" } else { "tier" };
            writeln!(f, "[{} {}]", kind, t.name)?;
            if let Some(l) = &t.layout {
                writeln!(f, "layout {}", l)?;
            }
            for d in &t.factors {
                write!(f, "factor {} {} {}", d.name, d.abbrev, d.levels)?;
                if !d.nested_in.is_empty() {
                    write!(f, " in {}", d.nested_in.join(" "))?;
                }
                writeln!(f)?;
            }
            for p in &t.pseudofactors {
                write!(f, "pseudofactor {} {}", p.name, p.abbrev)?;
                if !p.nested_in.is_empty() {
                    write!(f, " in {}", p.nested_in.join(" "))?;
                }
                match &p.codes {
                    CodeSource::Column(c) => writeln!(f, " column {}", c)?,
                    CodeSource::Levels(v) => writeln!(f, " levels {}", join_nums(v))?,
                }
            }
            for s in &t.splits {
                let terms: Vec<String> = s
                    .terms
                    .iter()
                    .map(|t| {
                        let sets: Vec<String> = t.sets.iter().map(|s| s.join("*")).collect();
                        match &t.label {
                            Some(l) => format!("{} = {}", l, sets.join(" + ")),
                            None => sets.join(" + "),
                        }
                    })
                    .collect();
                writeln!(f, "split {} by {}", s.parent.join("*"), terms.join("; "))?;
            }
        }
        for m in &self.maps {
            writeln!(f)?;
            writeln!(f, "[map {} -> {}]", m.from, m.to)?;
            match &m.source {
                Some(MapSource::Columns(c)) => writeln!(f, "columns {}", c.join(" "))?,
                Some(MapSource::Assign(v)) => writeln!(f, "assign {}", join_nums(v))?,
                None => {}
            }
            if let Some(r) = m.replication {
                writeln!(f, "replication {}", r)?;
            }
        }
        let d = Options::default();
        if self.options.tol != d.tol || self.options.max_denominator != MAX_DENOMINATOR {
            writeln!(f)?;
            writeln!(f, "[options]")?;
            writeln!(f, "tolerance = {:e}", self.options.tol)?;
            writeln!(f, "max_denominator = {}", self.options.max_denominator)?;
        }
        Ok(())
    }
}

fn join_nums(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}
