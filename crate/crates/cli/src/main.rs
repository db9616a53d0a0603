//! Command-line front end: skeleton tables, design checks, fitting and simulation.

use clap::{Args, Parser, Subcommand, ValueEnum};
use multitier::anova::{estimability_report, skeleton_table, AnovaTable, Basis, EstimabilityReport};
use multitier::balance::{chain_decompose, AnovaKind, Decomposition};
use multitier::chain::ExperimentChain;
use multitier::data::{read_components, read_data, read_tau};
use multitier::estimation::{anova_fit, combine_information, gls_fit, CombineMode, FitResult, Method};
use multitier::oracle::{simulate, SimulationReport, Tolerances};
use multitier::spec::parse_design_spec;
use multitier::Error;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "multitier",
    version,
    about = "Analysis of variance for multitiered experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the skeleton analysis of variance.
    Skeleton {
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "spectral")]
        basis: BasisArg,
        #[arg(long)]
        json: bool,
    },
    /// Report efficiency factors, applicability and estimability.
    Check {
        spec: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Fit a response file.
    Fit(FitArgs),
    /// Simulate the randomization distribution and compare with the EMS.
    Simulate {
        spec: PathBuf,
        #[arg(long)]
        components: PathBuf,
        /// Treatment values, one per line; zero when omitted.
        #[arg(long)]
        tau: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct FitArgs {
    /// Design description.
    spec: PathBuf,
    /// Comma-separated responses with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Response column; needed when the file has several.
    #[arg(long)]
    response: Option<String>,
    /// Equate residual mean squares to their expectations (the default).
    #[arg(long, group = "method")]
    anova: bool,
    /// Combine information across strata, re-estimating the components.
    #[arg(long, group = "method")]
    combine: bool,
    /// Generalized least squares at given or estimated components.
    #[arg(long, group = "method")]
    gls: bool,
    /// Component values: fixed for --gls, starting values for --combine.
    #[arg(long)]
    components: Option<PathBuf>,
    /// Line-delimited JSON records instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Spectral,
    Canonical,
}

impl From<BasisArg> for Basis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Spectral => Basis::Spectral,
            BasisArg::Canonical => Basis::Canonical,
        }
    }
}

/// Exit status per diagnostic category.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Io { .. } => 3,
        Error::Structure(_) | Error::Chain(_) | Error::Balance { .. } => 4,
        Error::NotApplicable(_) | Error::Unsupported(_) => 5,
        Error::Data(_) | Error::Estimation(_) => 6,
    }
}

struct Loaded {
    chain: ExperimentChain,
    d: Decomposition,
    table: AnovaTable,
}

fn load(spec: &Path) -> multitier::Result<Loaded> {
    let chain = parse_design_spec(spec)?;
    let d = chain_decompose(&chain)?;
    let table = skeleton_table(&d, &chain);
    Ok(Loaded { chain, d, table })
}

/// Write to stdout; a closed pipe (as with `| head`) ends the process quietly.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("multitier: writing output: {}", e);
        std::process::exit(3);
    }
}

fn print_records(records: impl IntoIterator<Item = serde_json::Value>) {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    emit(&text);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("multitier: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> multitier::Result<u8> {
    match cmd {
        Command::Skeleton { spec, basis, json } => {
            let l = load(&spec)?;
            if json {
                print_records(l.table.records());
            } else {
                emit(&l.table.render_text(basis.into()));
            }
            Ok(0)
        }
        Command::Check { spec, json } => {
            let l = load(&spec)?;
            let report = estimability_report(&l.table, &l.d, &l.chain);
            if json {
                print_records(check_records(&l, &report));
            } else {
                emit(&check_text(&l, &report));
            }
            Ok(0)
        }
        Command::Fit(args) => {
            let l = load(&args.spec)?;
            let data = read_data(&args.data, &l.chain)?;
            let y = data.response(args.response.as_deref())?;
            let comps = match &args.components {
                Some(p) => Some(read_components(p, &l.table, &l.chain)?),
                None => None,
            };
            let fit = if args.gls {
                match comps {
                    Some(c) => gls_fit(y, &l.chain, &l.d, &l.table, &c, Method::GlsKnownV)?,
                    None => {
                        // Estimated GLS at the best available component estimates.
                        let est = if l.d.anova_applicable() {
                            combine_information(y, &l.chain, &l.d, &l.table, CombineMode::Estimate(None))?
                        } else {
                            return Err(Error::NotApplicable(
                                "no anova estimates of the components for this chain; supply --components".into(),
                            ));
                        };
                        gls_fit(
                            y,
                            &l.chain,
                            &l.d,
                            &l.table,
                            &est.components.spectral_map(),
                            Method::GlsEgls,
                        )?
                    }
                }
            } else if args.combine {
                combine_information(y, &l.chain, &l.d, &l.table, CombineMode::Estimate(comps))?
            } else {
                anova_fit(y, &l.chain, &l.d, &l.table)?
            };
            if args.json {
                print_records(fit_records(&fit));
            } else {
                emit(&fit_text(&fit));
            }
            Ok(0)
        }
        Command::Simulate {
            spec,
            components,
            tau,
            draws,
            seed,
            json,
        } => {
            let l = load(&spec)?;
            let comps = read_components(&components, &l.table, &l.chain)?;
            let tau = match tau {
                Some(p) => read_tau(&p, &l.chain)?,
                None => vec![0.0; l.chain.treatment_tier().unit_count()],
            };
            let r = simulate(
                &l.chain,
                &l.d,
                &l.table,
                &comps,
                &tau,
                draws,
                seed,
                Tolerances::default(),
            )?;
            if json {
                print_records(simulation_records(&r));
            } else {
                emit(&simulation_text(&r));
            }
            Ok(if r.pass { 0 } else { 1 })
        }
    }
}

/// Distinct efficiency factors below one, in table order.
fn efficiency_list(table: &AnovaTable) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in &table.rows {
        for e in r.effs.iter().flatten() {
            let s = e.to_string();
            if !e.is_one() && !out.contains(&s) {
                out.push(s);
            }
        }
    }
    out
}

fn kind_text(k: AnovaKind) -> &'static str {
    match k {
        AnovaKind::Full => "applicable",
        AnovaKind::Partial => "applicable (partial)",
        AnovaKind::NotApplicable => "not applicable",
    }
}

fn check_text(l: &Loaded, r: &EstimabilityReport) -> String {
    let mut s = String::new();
    let tiers: Vec<String> = l
        .chain
        .tiers
        .iter()
        .map(|t| format!("{} ({})", t.name, t.unit_count()))
        .collect();
    s += &format!("tiers: {}\n", tiers.join(" -> "));
    s += &format!("replication: {:?}\n", l.chain.replication);
    let effs = efficiency_list(&l.table);
    if effs.is_empty() {
        s += "efficiency factors: all 1 (orthogonal)\n";
    } else {
        s += &format!("efficiency factors: {}\n", effs.join(", "));
    }
    s += "balance: structure balanced at every stage\n";
    let a = &l.d.applicability;
    s += &format!("anova: {}\n", kind_text(a.kind));
    for (t, parts) in &a.split_treatments {
        s += &format!("partial information: {} in {} parts\n", t, parts.len());
    }
    for (name, e) in [("spectral", &r.spectral), ("canonical", &r.canonical)] {
        s += &format!("estimable ({}): {}\n", name, list_or_none(&e.estimable));
        let sums: Vec<String> = e.confounded_sums.iter().map(|c| c.render()).collect();
        s += &format!("estimable only as sums ({}): {}\n", name, list_or_none(&sums));
        s += &format!("never estimable ({}): {}\n", name, list_or_none(&e.never_estimable));
    }
    match &r.ldcvs {
        None => s += "linear dependence among residual EMS: none\n",
        Some(ld) => {
            for rel in &ld.relations {
                let terms: Vec<String> = rel
                    .iter()
                    .map(|(row, c)| format!("{:+} MS[{}]", c, row_name(&l.table, *row)))
                    .collect();
                s += &format!("LDCVS: {} = 0 in expectation\n", terms.join(" "));
            }
        }
    }
    s += &format!("negative-estimate risk: {}\n", list_or_none(&r.negative_risk));
    s += &format!("absorbed by treatments: {}\n", list_or_none(&r.absorbed));
    s
}

fn row_name(table: &AnovaTable, i: usize) -> String {
    table.rows[i]
        .sources
        .iter()
        .filter(|x| !x.is_empty())
        .cloned()
        .collect::<Vec<_>>()
        .join(" / ")
}

fn list_or_none(v: &[String]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.join(", ")
    }
}

fn check_records(l: &Loaded, r: &EstimabilityReport) -> Vec<serde_json::Value> {
    let mut out = Vec::new();
    for (k, t) in l.d.stage_tables.iter().enumerate() {
        for (qi, up) in t.upper.iter().enumerate() {
            for (ri, low) in t.lower.iter().enumerate() {
                let e = t.get(qi, ri);
                if e.value > l.chain.options.tol {
                    out.push(json!({"record": "efficiency", "stage": k + 1, "upper": up, "lower": low, "eff": e}));
                }
            }
        }
    }
    out.push(json!({"record": "applicability", "applicability": l.d.applicability}));
    out.push(json!({"record": "estimability", "report": r}));
    out
}

fn fit_text(f: &FitResult) -> String {
    let mut s = format!(
        "method: {}\n",
        serde_json::to_value(f.method).unwrap().as_str().unwrap()
    );
    if f.method == Method::Combined {
        s += &format!(
            "iterations: {} ({})\n",
            f.components.iterations,
            if f.components.converged {
                "converged"
            } else {
                "not converged"
            }
        );
    }
    s += "mean squares:\n";
    let w = f
        .mean_squares
        .iter()
        .map(|m| m.source.chars().count())
        .max()
        .unwrap_or(0);
    for m in &f.mean_squares {
        s += &format!("  {:w$}  {:4}  {:14.6}  {:14.6}\n", m.source, m.df, m.ss, m.ms, w = w);
    }
    s += "components:\n";
    for c in &f.components.spectral {
        s += &format!("  {} = {:.6}\n", c.symbol, c.value);
    }
    for c in &f.components.canonical {
        s += &format!("  {} = {:.6}\n", c.symbol, c.value);
    }
    for c in &f.components.sums {
        s += &format!("  {} = {:.6}\n", c.combination.render(), c.value);
    }
    for d in &f.components.defects {
        let rel: Vec<String> = d.relation.iter().map(|(l, c)| format!("{:+} MS[{}]", c, l)).collect();
        s += &format!("  inconsistency {} = {:.6}\n", rel.join(" "), d.value);
    }
    if !f.components.constrained_zero.is_empty() {
        let names: Vec<String> = f
            .components
            .spectral
            .iter()
            .filter(|c| f.components.constrained_zero.contains(&c.id))
            .map(|c| c.symbol.clone())
            .collect();
        s += &format!("  set to zero: {}\n", names.join(", "));
    }
    for (k, v) in &f.components.effective_df {
        s += &format!("  effective df {}: {:.4}\n", k, v);
    }
    s += "effects:\n";
    for e in &f.effects {
        let var = e.variance.map(|v| format!("{:.6}", v)).unwrap_or_else(|| "n/a".into());
        let from = e.source.as_ref().map(|x| format!(" from {}", x)).unwrap_or_default();
        s += &format!("  {} (rank {}): variance {}{}\n", e.treatment, e.rank, var, from);
    }
    s += "treatment values:\n";
    for (i, v) in f.treatment_values.iter().enumerate() {
        s += &format!("  {} {:.6}\n", i, v);
    }
    s
}

fn fit_records(f: &FitResult) -> Vec<serde_json::Value> {
    let mut out = vec![json!({
        "record": "fit",
        "method": f.method,
        "converged": f.components.converged,
        "iterations": f.components.iterations,
        "treatment_values": f.treatment_values,
    })];
    out.extend(f.mean_squares.iter().map(
        |m| json!({"record": "mean_square", "part": m.part, "source": m.source, "ss": m.ss, "df": m.df, "ms": m.ms}),
    ));
    out.push(json!({"record": "components", "components": f.components}));
    out.extend(f.effects.iter().map(|e| {
        json!({"record": "effect", "treatment": e.treatment, "rank": e.rank, "variance": e.variance, "source": e.source, "estimate": e.estimate})
    }));
    out
}

fn simulation_text(r: &SimulationReport) -> String {
    let mut s = format!("draws: {} (seed {})\n", r.draws, r.seed);
    let w = r.rows.iter().map(|x| x.source.chars().count()).max().unwrap_or(0);
    for x in &r.rows {
        s += &format!(
            "  {:w$}  {:4}  empirical {:12.6} ± {:.6}  EMS {:12.6}  {}\n",
            x.source,
            x.df,
            x.empirical,
            x.std_error,
            x.theoretical,
            if x.pass { "ok" } else { "FAIL" },
            w = w
        );
    }
    for e in &r.estimators {
        s += &format!(
            "  estimator {} from {}: variance {:.6} vs {:.6} ({:.2}%), bias {:.4} ± {:.4}  {}\n",
            e.treatment,
            e.source,
            e.empirical_variance,
            e.theoretical_variance,
            100.0 * e.relative_error,
            e.bias,
            e.bias_std_error,
            if e.pass { "ok" } else { "FAIL" }
        );
    }
    s += &format!("result: {}\n", if r.pass { "pass" } else { "fail" });
    s
}

fn simulation_records(r: &SimulationReport) -> Vec<serde_json::Value> {
    let mut out = vec![json!({"record": "simulation", "draws": r.draws, "seed": r.seed, "pass": r.pass})];
    out.extend(r.rows.iter().map(|x| json!({"record": "ms_check", "check": x})));
    out.extend(
        r.estimators
            .iter()
            .map(|x| json!({"record": "estimator_check", "check": x})),
    );
    out
}
