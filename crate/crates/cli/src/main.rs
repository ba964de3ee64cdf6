//! Command-line front end for the adaptation pipeline.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 pseudo-labeling
//! collapse during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cvadapt::adapter::{adapt, load_checkpoint, save_checkpoint};
use cvadapt::featstore::{
    gem_pool, l2_normalize, load_feature_map, load_feature_set, load_geo_tags, save_feature_set,
    FeatureSet, ViewTag,
};
use cvadapt::inspect::{delta_sims, similarity_histogram, write_delta_csv, write_histogram_csv};
use cvadapt::retrieval::{evaluate, localize, write_localizations_csv, GroundTruth, RetrievalReport};
use cvadapt::synthbench::{g1, generate, read_gt_csv, write_gt_csv, SynthConfig};
use cvadapt::trainer::{train_adapter, TrainConfig};
use cvadapt::Error;

#[derive(Parser)]
#[command(name = "cvadapt", version, about = "Cross-view embedding adaptation without pair labels")]
struct Cli {
    /// Log progress details to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewArg {
    Query,
    Reference,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InspectMode {
    /// Matched vs unmatched top-1 similarity histogram.
    Histogram,
    /// Per-query margin between the true match and the hardest negative.
    Deltasim,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark instance (feature files + ground truth).
    Synth {
        /// Generator config JSON; mutually exclusive with --preset.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset ("g1").
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate local feature maps into a normalized feature set.
    Pool {
        /// Directory of .cvfm feature-map files.
        #[arg(long)]
        maps: PathBuf,
        /// Generalized-mean exponent.
        #[arg(long, default_value_t = 3.0)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
        /// View tag recorded in the output file.
        #[arg(long, value_enum, default_value_t = ViewArg::Query)]
        view: ViewArg,
    },
    /// Train the adapter on unlabeled query/reference features.
    Train {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Training config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (checkpoint + training log).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank queries against references and report Recall@K / mean AP.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Adapter checkpoint; omit to evaluate the raw (frozen) features.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Ground-truth CSV (query_id,ref_id).
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated recall cutoffs.
        #[arg(long, default_value = "1,5,10")]
        k: String,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-query CSV export.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Derive diagnostics from an eval report.
    Inspect {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        mode: InspectMode,
        #[arg(long)]
        out: PathBuf,
        /// Histogram bin count.
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Assign each query the geo-tag of its top-ranked reference.
    Localize {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Geo-tag CSV (id,lat,lon) covering the references.
        #[arg(long)]
        geo: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_default_env()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::PseudoLabelingCollapsed(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { config, preset, out } => cmd_synth(config, preset, &out),
        Command::Pool { maps, p, out, view } => cmd_pool(&maps, p, &out, view),
        Command::Train {
            queries,
            refs,
            config,
            out,
        } => cmd_train(&queries, &refs, &config, &out),
        Command::Eval {
            queries,
            refs,
            ckpt,
            gt,
            k,
            out,
            csv,
        } => cmd_eval(&queries, &refs, ckpt.as_deref(), &gt, &k, &out, csv.as_deref()),
        Command::Inspect {
            report,
            mode,
            out,
            bins,
        } => cmd_inspect(&report, mode, &out, bins),
        Command::Localize {
            queries,
            refs,
            geo,
            ckpt,
            out,
        } => cmd_localize(&queries, &refs, &geo, ckpt.as_deref(), &out),
    }
}

fn cmd_synth(config: Option<PathBuf>, preset: Option<String>, out: &Path) -> Result<(), Error> {
    let cfg = match (config, preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(&path)?;
            SynthConfig::from_json(&text)?
        }
        (None, Some(name)) => match name.as_str() {
            "g1" => g1(),
            other => return Err(Error::invalid(format!("unknown preset `{other}`"))),
        },
        (None, None) => return Err(Error::invalid("either --config or --preset is required")),
        (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
    };
    let data = generate(&cfg)?;
    fs::create_dir_all(out)?;
    save_feature_set(&data.queries, out.join("queries.cvft"))?;
    save_feature_set(&data.references, out.join("references.cvft"))?;
    let mut gt_file = fs::File::create(out.join("gt.csv"))?;
    write_gt_csv(&data.gt_pairs, &mut gt_file)?;
    let mut files = serde_json::json!({
        "queries": "queries.cvft",
        "references": "references.cvft",
        "gt": "gt.csv",
    });
    if let Some(eval_queries) = &data.eval_queries {
        save_feature_set(eval_queries, out.join("queries_eval.cvft"))?;
        let mut f = fs::File::create(out.join("gt_eval.csv"))?;
        write_gt_csv(&data.eval_gt_pairs, &mut f)?;
        files["queries_eval"] = "queries_eval.cvft".into();
        files["gt_eval"] = "gt_eval.csv".into();
    }
    let manifest = serde_json::json!({
        "config": cfg,
        "files": files,
        "num_references": data.references.len(),
        "num_queries": data.queries.len(),
        "num_eval_queries": data.eval_queries.as_ref().map_or(0, |s| s.len()),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} queries, {} references to {}",
        data.queries.len(),
        data.references.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pool(maps_dir: &Path, p: f64, out: &Path, view: ViewArg) -> Result<(), Error> {
    let mut paths: Vec<PathBuf> = fs::read_dir(maps_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| path.extension().is_some_and(|ext| ext == "cvfm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid("no input maps"));
    }
    let mut records = Vec::with_capacity(paths.len());
    let mut dim = None;
    for path in &paths {
        let map = load_feature_map(path)?;
        match dim {
            None => dim = Some(map.dim()),
            Some(d) if d != map.dim() => {
                return Err(Error::invalid(format!(
                    "mixed dims across maps: {} has {}, expected {d}",
                    path.display(),
                    map.dim()
                )))
            }
            _ => {}
        }
        let pooled = gem_pool(&map, p)?;
        let unit = l2_normalize(&pooled)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad file name {}", path.display())))?
            .to_string();
        records.push((id, unit.iter().map(|&v| v as f32).collect::<Vec<f32>>()));
    }
    let tag = match view {
        ViewArg::Query => ViewTag::Query,
        ViewArg::Reference => ViewTag::Reference,
    };
    let set = FeatureSet::from_records(tag, dim.unwrap(), true, records)?;
    save_feature_set(&set, out)?;
    println!("pooled {} maps into {}", set.len(), out.display());
    Ok(())
}

fn cmd_train(queries: &Path, refs: &Path, config: &Path, out: &Path) -> Result<(), Error> {
    let q = load_feature_set(queries)?;
    let r = load_feature_set(refs)?;
    let cfg = TrainConfig::from_json(&fs::read_to_string(config)?)?;
    let outcome = train_adapter(&cfg, &q, &r)?;
    fs::create_dir_all(out)?;
    save_checkpoint(
        out.join("adapter.cvad"),
        &outcome.adapter,
        &outcome.reverter,
        cfg.iterations,
    )?;
    let mut log_file = fs::File::create(out.join("trainlog.csv"))?;
    outcome.log.write_csv(&mut log_file)?;
    match outcome.log.entries.last() {
        Some(last) => println!(
            "finished {} iterations: l_em_qr={:.6} l_em_rq={:.6} l_re_q={:.6} l_re_r={:.6} valid_rows={}",
            cfg.iterations, last.l_em_qr, last.l_em_rq, last.l_re_q, last.l_re_r, last.valid_rows
        ),
        None => println!("finished 0 iterations (checkpoint is the initialization)"),
    }
    Ok(())
}

/// A checkpoint argument may name the file itself or the training output
/// directory containing `adapter.cvad`.
fn resolve_ckpt(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("adapter.cvad")
    } else {
        path.to_path_buf()
    }
}

fn load_inputs_maybe_adapted(
    queries: &Path,
    refs: &Path,
    ckpt: Option<&Path>,
) -> Result<(FeatureSet, FeatureSet), Error> {
    let q = load_feature_set(queries)?;
    let r = load_feature_set(refs)?;
    match ckpt {
        Some(path) => {
            let (params, _, _) = load_checkpoint(resolve_ckpt(path))?;
            Ok((adapt(&params, &q)?, adapt(&params, &r)?))
        }
        None => Ok((q, r)),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    queries: &Path,
    refs: &Path,
    ckpt: Option<&Path>,
    gt: &Path,
    k: &str,
    out: &Path,
    csv: Option<&Path>,
) -> Result<(), Error> {
    let ks: Vec<u32> = k
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::invalid(format!("bad recall cutoff `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    let (zq, zr) = load_inputs_maybe_adapted(queries, refs, ckpt)?;
    let pairs = read_gt_csv(gt)?;
    let gt = GroundTruth::from_id_pairs(&pairs, &zq, &zr)?;
    let top_keep = ks.iter().copied().max().unwrap_or(1) as usize;
    let report = evaluate(&zq, &zr, &gt, &ks, top_keep)?;
    fs::write(out, report.to_json()?)?;
    if let Some(csv_path) = csv {
        let mut f = fs::File::create(csv_path)?;
        report.write_csv(&mut f)?;
    }
    for (k, v) in &report.recall {
        println!("R@{k} = {v:.4}");
    }
    println!("mAP = {:.4}", report.mean_ap);
    if report.queries_without_gt > 0 {
        eprintln!(
            "warning: {} queries had no ground truth and were excluded from mean AP",
            report.queries_without_gt
        );
    }
    Ok(())
}

fn cmd_inspect(report: &Path, mode: InspectMode, out: &Path, bins: usize) -> Result<(), Error> {
    let report = RetrievalReport::from_json(&fs::read_to_string(report)?)?;
    let mut f = fs::File::create(out)?;
    match mode {
        InspectMode::Histogram => {
            let rows = similarity_histogram(&report, bins)?;
            write_histogram_csv(&rows, &mut f)?;
            println!("wrote {} histogram bins to {}", rows.len(), out.display());
        }
        InspectMode::Deltasim => {
            let rows = delta_sims(&report)?;
            write_delta_csv(&rows, &mut f)?;
            println!("wrote {} margin rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn cmd_localize(
    queries: &Path,
    refs: &Path,
    geo: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<(), Error> {
    let (zq, zr) = load_inputs_maybe_adapted(queries, refs, ckpt)?;
    let tags = load_geo_tags(geo)?;
    let rows = localize(&zq, &zr, &tags)?;
    let mut f = fs::File::create(out)?;
    write_localizations_csv(&rows, &mut f)?;
    println!("localized {} queries to {}", rows.len(), out.display());
    Ok(())
}
