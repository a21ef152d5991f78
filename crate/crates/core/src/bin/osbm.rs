use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use osbm::error::{OsbmError, Result};
use osbm::io::{
    self, config_digest, parse_edge_list, parse_memberships_csv, read_any_fit, sha256_hex, write_dot, write_edge_list, write_fit_document,
    write_memberships_csv, write_selection_document, write_tau_csv, ExperimentConfig, ExperimentKind, KeyValueDoc, Provenance,
};
use osbm::metrics::{self, cluster_distance, membership_summary, threshold_memberships, ConfusionMatrix, CoverageReport, NetworkOutcome};
use osbm::model::{sample_network, OsbmParameters};
use osbm::selection::{derive_seed, select_q, PriorConstants};
use osbm::vbem::FitOptions;

#[derive(Parser)]
#[command(name = "osbm", version, about = "Overlapping stochastic block model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample networks and their true memberships from an experiment config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model with a fixed number of classes.
    Fit {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        q: usize,
        #[command(flatten)]
        common: FitArgs,
        /// Also write the membership probabilities as CSV.
        #[arg(long)]
        tau_out: Option<PathBuf>,
    },
    /// Choose the number of classes by maximising IL_osbm.
    Select {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 2)]
        q_min: usize,
        #[arg(long, default_value_t = 8)]
        q_max: usize,
        #[command(flatten)]
        common: FitArgs,
    },
    /// Compare a fit with true memberships.
    Evaluate {
        /// Fit or selection document.
        #[arg(long)]
        fit: PathBuf,
        /// True membership CSV.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Write a DOT drawing of the graph coloured by estimated class.
        #[arg(long, requires = "graph")]
        dot: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a confusion or coverage study and write per-cell CSVs.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn with_workers<T: Send>(workers: Option<usize>, job: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => job(),
        Some(0) => Err(OsbmError::InvalidInput("--workers must be at least 1".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| OsbmError::InvalidInput(e.to_string()))?
            .install(job),
    }
}

#[derive(Serialize)]
struct FitRunConfig<'a> {
    command: &'a str,
    graph_sha256: String,
    q_range: Vec<usize>,
    restarts: usize,
    seed: u64,
    priors: PriorConstants,
    options: FitOptions,
}

fn run_selection(graph: &Path, q_range: Vec<usize>, args: &FitArgs, command: &str) -> Result<(osbm::SelectionReport, Provenance)> {
    let text = fs::read_to_string(graph)?;
    let x = io::parse_edge_list_str(&text)?;
    if let Some(&q) = q_range.iter().find(|&&q| q == 0 || q > x.n()) {
        return Err(OsbmError::InvalidInput(format!("q = {q} is outside 1..={}", x.n())));
    }
    let priors = PriorConstants::default();
    let options = FitOptions::default();
    let run = FitRunConfig { command, graph_sha256: sha256_hex(write_edge_list(&x).as_bytes()), q_range, restarts: args.restarts, seed: args.seed, priors, options };
    let prov = Provenance::new(args.seed, &run);
    let report = with_workers(args.workers, || select_q(&x, &run.q_range, args.restarts, &priors, args.seed, &options))?;
    Ok((report, prov))
}

fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_toml(&fs::read_to_string(config)?)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let prov = Provenance::new(cfg.run.seed, &cfg);
    fs::create_dir_all(out)?;
    let g = &cfg.generative;
    for (li, &lambda) in g.lambdas.iter().enumerate() {
        for (bi, balance) in g.balances.iter().enumerate() {
            for &q in &g.q_true {
                let params = OsbmParameters::structured(balance.alpha(q), lambda, g.epsilon, g.w_star);
                for m in 0..cfg.run.replicates {
                    let s = derive_seed(cfg.run.seed, &[li as u64, bi as u64, q as u64, m as u64]);
                    let (x, z) = sample_network(&params, g.n, s)?;
                    let stem = format!("net_l{lambda}_{}_q{q}_r{m}", balance.tag());
                    let header = format!("# tool_version={} seed={s} config_digest={}\n", io::TOOL_VERSION, prov.config_digest);
                    fs::write(out.join(format!("{stem}.edges")), format!("{header}{}", write_edge_list(&x)))?;
                    let cell_prov = Provenance { seed: s, config_digest: prov.config_digest.clone() };
                    fs::write(out.join(format!("{stem}.truth.csv")), write_memberships_csv(&z, Some(&cell_prov)))?;
                }
            }
        }
    }
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn evaluate(fit: &Path, truth: &Path, threshold: f64, dot: Option<&Path>, graph: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(OsbmError::InvalidInput("--threshold must lie in (0, 1)".into()));
    }
    let fit_text = fs::read_to_string(fit)?;
    let truth_text = fs::read_to_string(truth)?;
    let (fit_res, fit_prov) = read_any_fit(&fit_text)?;
    let z = parse_memberships_csv(&truth_text)?;
    if z.n() != fit_res.state.n() {
        return Err(OsbmError::InvalidInput(format!("truth has {} vertices, fit has {}", z.n(), fit_res.state.n())));
    }
    let z_hat = threshold_memberships(&fit_res.state.tau, threshold);
    let digest = config_digest(&(sha256_hex(fit_text.as_bytes()), sha256_hex(truth_text.as_bytes()), threshold));
    let prov = Provenance { seed: fit_prov.seed, config_digest: digest };

    let mut doc = KeyValueDoc::new();
    doc.set("schema", "osbm-evaluation/1");
    doc.set("tool_version", io::TOOL_VERSION);
    doc.set("seed", prov.seed);
    doc.set("config_digest", &prov.config_digest);
    doc.set("threshold", io::fmt_f64(threshold));
    doc.set_f64("cluster_distance", cluster_distance(&z, &z_hat));
    for (name, m) in [("truth", &z), ("estimate", &z_hat)] {
        let s = membership_summary(m);
        doc.set(&format!("{name}.classes"), m.q());
        doc.set(&format!("{name}.class_sizes"), s.class_sizes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
        doc.set(&format!("{name}.overlaps"), s.overlaps);
        doc.set(&format!("{name}.outliers"), s.outliers);
    }
    emit(out, &doc.render())?;

    if let (Some(dot_path), Some(graph_path)) = (dot, graph) {
        let x = parse_edge_list(graph_path)?;
        if x.n() != z_hat.n() {
            return Err(OsbmError::InvalidInput("graph and fit sizes differ".into()));
        }
        fs::write(dot_path, format!("// tool_version={} seed={} config_digest={}\n{}", io::TOOL_VERSION, prov.seed, prov.config_digest, write_dot(&x, &z_hat)))?;
    }
    Ok(())
}

fn confusion_csvs(cm: &ConfusionMatrix, prov: &Provenance) -> (String, String, String) {
    let mut counts = prov.csv_comment();
    counts.push_str("q_true");
    for q in &cm.q_selected {
        counts.push_str(&format!(",selected_{q}"));
    }
    counts.push_str(",failures\n");
    let mut quantiles = prov.csv_comment();
    quantiles.push_str("q_true,networks,min,q1,median,q3,max\n");
    let mut networks = prov.csv_comment();
    networks.push_str("q_true,replicate,q_selected,cluster_distance,error\n");
    for (row, &qt) in cm.q_true.iter().enumerate() {
        counts.push_str(&qt.to_string());
        for c in &cm.counts[row] {
            counts.push_str(&format!(",{c}"));
        }
        counts.push_str(&format!(",{}\n", cm.failures[row]));
        let d = cm.distances(qt);
        let qs: Vec<String> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&p| io::fmt_f64(metrics::quantile(&d, p))).collect();
        quantiles.push_str(&format!("{qt},{},{}\n", d.len(), qs.join(",")));
        for (m, o) in cm.outcomes[row].iter().enumerate() {
            match o {
                NetworkOutcome::Selected { q_selected, distance } => networks.push_str(&format!("{qt},{m},{q_selected},{},\n", io::fmt_f64(*distance))),
                NetworkOutcome::Failed(e) => networks.push_str(&format!("{qt},{m},,,{}\n", e.replace([',', '\n'], ";"))),
            }
        }
    }
    (counts, quantiles, networks)
}

fn coverage_csv(rep: &CoverageReport, prov: &Provenance) -> String {
    let mut s = prov.csv_comment();
    s.push_str("parameter,truth,hits,trials,coverage\n");
    for p in &rep.parameters {
        s.push_str(&format!("{},{},{},{},{}\n", p.label, io::fmt_f64(p.truth), p.hits, p.trials, io::fmt_f64(p.rate())));
    }
    for (m, e) in &rep.failures {
        s.push_str(&format!("# failed network {m}: {}\n", e.replace('\n', " ")));
    }
    s
}

fn experiment(config: &Path, out: Option<&Path>, seed: Option<u64>, workers: Option<usize>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_toml(&fs::read_to_string(config)?)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let dir = match (out, &cfg.run.output_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(OsbmError::InvalidInput("no output directory given".into())),
    };
    fs::create_dir_all(&dir)?;
    let prov = Provenance::new(cfg.run.seed, &cfg);
    let opts = cfg.inference.options;
    match cfg.run.kind {
        ExperimentKind::Confusion => {
            let grid = cfg.confusion_grid();
            let cms = with_workers(workers, || metrics::confusion_experiment(&grid, cfg.run.replicates, cfg.run.seed, &opts))?;
            for cm in &cms {
                let stem = format!("l{}_{}", cm.lambda, cm.balance.tag());
                let (counts, quantiles, networks) = confusion_csvs(cm, &prov);
                fs::write(dir.join(format!("confusion_{stem}.csv")), counts)?;
                fs::write(dir.join(format!("distance_quantiles_{stem}.csv")), quantiles)?;
                fs::write(dir.join(format!("networks_{stem}.csv")), networks)?;
            }
        }
        ExperimentKind::Coverage => {
            let cov = cfg.coverage_config();
            let rep = with_workers(workers, || metrics::coverage_experiment(&cov, cfg.run.replicates, cfg.run.seed, &opts))?;
            fs::write(dir.join("coverage.csv"), coverage_csv(&rep, &prov))?;
        }
    }
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => generate(&config, &out, seed),
        Command::Fit { graph, q, common, tau_out } => {
            let (rep, prov) = run_selection(&graph, vec![q], &common, "fit")?;
            let best = rep.best();
            emit(common.out.as_deref(), &write_fit_document(best, &prov))?;
            if let Some(p) = tau_out {
                fs::write(p, write_tau_csv(&best.state.tau, Some(&prov)))?;
            }
            Ok(())
        }
        Command::Select { graph, q_min, q_max, common } => {
            if q_min == 0 || q_min > q_max {
                return Err(OsbmError::InvalidInput("need 1 <= --q-min <= --q-max".into()));
            }
            let (rep, prov) = run_selection(&graph, (q_min..=q_max).collect(), &common, "select")?;
            emit(common.out.as_deref(), &write_selection_document(&rep, &prov))
        }
        Command::Evaluate { fit, truth, threshold, dot, graph, out } => evaluate(&fit, &truth, threshold, dot.as_deref(), graph.as_deref(), out.as_deref()),
        Command::Experiment { config, out, seed, workers } => experiment(&config, out.as_deref(), seed, workers),
    }
}

fn report(kind: &str, message: String, exit_code: i32) -> ExitCode {
    let record = ErrorRecord { error: kind, message, exit_code };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serialises"));
    ExitCode::from(exit_code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("usage", e.to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), e.to_string(), e.exit_code()),
    }
}
