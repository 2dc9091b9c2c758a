//! `asrlab score`: error rates and relative reductions.
//!
//! Pair mode scores a hypothesis file against a reference file (CER or WER
//! by `--unit`), optionally with a baseline hypothesis file for the relative
//! error-rate reduction. Table mode aggregates per-set rates
//! (`name<TAB>rate` lines) into a benchmark table with its average row,
//! optionally against a baseline table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use asrlab::eval::{
    cerr, error_rate, format_rate, read_trn, score_corpus, BenchmarkTable, EditCounts, Unit,
};
use asrlab::{Error, Result};
use clap::{Args, ValueEnum};

#[derive(Args)]
pub struct ScoreArgs {
    /// Reference file, `utt_id<TAB>text` per line
    #[arg(long = "ref", conflicts_with = "table", requires = "hyp")]
    pub reference: Option<PathBuf>,
    /// Hypothesis file, `utt_id<TAB>text` per line
    #[arg(long, requires = "reference")]
    pub hyp: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = UnitArg::Char)]
    pub unit: UnitArg,
    /// Pair mode: baseline hypothesis file; table mode: baseline rate table
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Aggregate mode: per-set rates as `name<TAB>rate` lines
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Machine-readable output
    #[arg(long)]
    pub json: bool,
    /// Accepted for interface uniformity; scoring draws no random numbers
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Char,
    Word,
}

impl UnitArg {
    fn unit(self) -> Unit {
        match self {
            UnitArg::Char => Unit::Char,
            UnitArg::Word => Unit::Word,
        }
    }

    fn label(self) -> &'static str {
        match self {
            UnitArg::Char => "CER",
            UnitArg::Word => "WER",
        }
    }
}

/// Ids common to both files, in reference order; the symmetric difference is
/// listed on stderr as a warning.
fn intersect_by_id(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
    what: &str,
) -> Result<Vec<(String, String)>> {
    let missing: Vec<&String> = refs.keys().filter(|id| !hyps.contains_key(*id)).collect();
    let extra: Vec<&String> = hyps.keys().filter(|id| !refs.contains_key(*id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        eprintln!(
            "warning: utterance id mismatch with {what}: {} reference-only ({}), {} \
             hypothesis-only ({}); scoring the intersection",
            missing.len(),
            join_sample(&missing),
            extra.len(),
            join_sample(&extra),
        );
    }
    let pairs: Vec<(String, String)> = refs
        .iter()
        .filter_map(|(id, r)| hyps.get(id).map(|h| (r.clone(), h.clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Eval(format!("no utterance ids in common with {what}")));
    }
    Ok(pairs)
}

fn join_sample(ids: &[&String]) -> String {
    const SHOW: usize = 5;
    let mut shown: Vec<&str> = ids.iter().take(SHOW).map(|s| s.as_str()).collect();
    if ids.len() > SHOW {
        shown.push("...");
    }
    shown.join(" ")
}

fn score_file_pair(
    refs: &BTreeMap<String, String>,
    hyp_path: &Path,
    unit: Unit,
    what: &str,
) -> Result<(f64, EditCounts, usize, usize)> {
    let hyps = read_trn(hyp_path)?;
    let pairs = intersect_by_id(refs, &hyps, what)?;
    let scored = score_corpus(&pairs, unit);
    let rate = error_rate(&scored)?;
    let mut counts = EditCounts::default();
    let mut ref_len = 0usize;
    for p in &scored {
        counts.sub += p.counts.sub;
        counts.del += p.counts.del;
        counts.ins += p.counts.ins;
        ref_len += p.ref_len;
    }
    Ok((rate, counts, ref_len, scored.len()))
}

fn run_pair_mode(args: &ScoreArgs) -> Result<i32> {
    let (Some(ref_path), Some(hyp_path)) = (&args.reference, &args.hyp) else {
        return Err(Error::Config(
            "score needs either --ref/--hyp or --table (see --help)".to_string(),
        ));
    };
    let refs = read_trn(ref_path)?;
    let unit = args.unit.unit();
    let (rate, counts, ref_len, n) = score_file_pair(&refs, hyp_path, unit, "hypothesis file")?;
    let baseline = match &args.baseline {
        None => None,
        Some(b) => {
            let (brate, ..) = score_file_pair(&refs, b, unit, "baseline file")?;
            Some((brate, cerr(brate, rate)?))
        }
    };

    let label = args.unit.label();
    if args.json {
        let mut report = serde_json::json!({
            "unit": label,
            "utterances": n,
            "ref_len": ref_len,
            "sub": counts.sub,
            "del": counts.del,
            "ins": counts.ins,
            "rate": rate,
            "rate_display": format_rate(rate, 2),
        });
        if let Some((brate, reduction)) = baseline {
            report["baseline_rate"] = serde_json::json!(brate);
            report["baseline_rate_display"] = serde_json::json!(format_rate(brate, 2));
            report["cerr"] = serde_json::json!(reduction);
            report["cerr_display"] = serde_json::json!(format_rate(reduction, 1));
        }
        println!("{report:#}");
    } else {
        println!("utterances {n}");
        println!("errors {} (sub {}, del {}, ins {})", counts.total(), counts.sub, counts.del, counts.ins);
        println!("ref_len {ref_len}");
        println!("{label} {}", format_rate(rate, 2));
        if let Some((brate, reduction)) = baseline {
            println!("baseline {label} {}", format_rate(brate, 2));
            println!("{label}R {}", format_rate(reduction, 1));
        }
    }
    Ok(0)
}

/// Read `name<TAB>rate` lines into a table.
fn read_rates(path: &Path) -> Result<BenchmarkTable> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read rate table {}: {e}", path.display())))?;
    let mut table = BenchmarkTable::default();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once('\t')
            .and_then(|(name, rate)| rate.trim().parse::<f64>().ok().map(|r| (name, r)));
        let Some((name, rate)) = parsed else {
            return Err(Error::Config(format!(
                "{}:{}: expected name<TAB>rate, found {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        table.push(name, rate);
    }
    if table.rows.is_empty() {
        return Err(Error::Eval(format!("rate table {} is empty", path.display())));
    }
    Ok(table)
}

fn run_table_mode(table_path: &Path, args: &ScoreArgs) -> Result<i32> {
    let ours = read_rates(table_path)?;
    let baseline = args.baseline.as_deref().map(read_rates).transpose()?;

    if args.json {
        let mut report = serde_json::json!({ "ours": ours.render_json()? });
        if let Some(base) = &baseline {
            let reductions = per_set_reductions(base, &ours)?;
            report["baseline"] = base.render_json()?;
            report["cerr"] = serde_json::json!({
                "sets": reductions.iter().map(|(name, r)| serde_json::json!({
                    "name": name, "value": r, "display": format_rate(*r, 1),
                })).collect::<Vec<_>>(),
                "average": cerr(base.average()?, ours.average()?)?,
                "average_display": format_rate(cerr(base.average()?, ours.average()?)?, 1),
            });
        }
        println!("{report:#}");
        return Ok(0);
    }

    print!("{}", ours.render_text()?);
    if let Some(base) = &baseline {
        println!("\nbaseline:");
        print!("{}", base.render_text()?);
        println!("\nrelative reduction:");
        for (name, r) in per_set_reductions(base, &ours)? {
            println!("{name}  {}", format_rate(r, 1));
        }
        let avg = cerr(base.average()?, ours.average()?)?;
        println!("Average-{}  {}", ours.rows.len(), format_rate(avg, 1));
    }
    Ok(0)
}

/// Per-set reductions; the two tables must list the same set names in the
/// same order for the comparison to mean anything.
fn per_set_reductions(
    base: &BenchmarkTable,
    ours: &BenchmarkTable,
) -> Result<Vec<(String, f64)>> {
    if base.rows.len() != ours.rows.len()
        || base.rows.iter().zip(&ours.rows).any(|((a, _), (b, _))| a != b)
    {
        return Err(Error::Eval(
            "baseline table and rate table list different sets".to_string(),
        ));
    }
    base.rows
        .iter()
        .zip(&ours.rows)
        .map(|((name, b), (_, o))| Ok((name.clone(), cerr(*b, *o)?)))
        .collect()
}

pub fn run(args: ScoreArgs) -> Result<i32> {
    match &args.table {
        Some(table_path) => run_table_mode(&table_path.clone(), &args),
        None => run_pair_mode(&args),
    }
}
