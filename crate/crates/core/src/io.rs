//! Text formats: edge lists, membership CSVs, the key-value documents that
//! hold fits and selection reports, experiment configuration, DOT export and
//! provenance digests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OsbmError, Result};
use crate::metrics::{Balance, ConfusionGrid, CoverageConfig, DEFAULT_THRESHOLD};
use crate::model::{AdjacencyMatrix, MembershipMatrix};
use crate::selection::{PriorConstants, RestartOutcome, SelectionReport};
use crate::vbem::{FitOptions, FitResult, VariationalState};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const FIT_SCHEMA: &str = "osbm-fit/1";
pub const SELECTION_SCHEMA: &str = "osbm-selection/1";

fn invalid(msg: impl Into<String>) -> OsbmError {
    OsbmError::InvalidInput(msg.into())
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Digest of any serialisable configuration, taken over its JSON form.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("configuration serialises"))
}

/// Identifies a run in every artifact it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    pub fn new<T: Serialize>(seed: u64, config: &T) -> Self {
        Provenance { seed, config_digest: config_digest(config) }
    }

    /// Comment line used at the top of CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!("# tool_version={TOOL_VERSION} seed={} config_digest={}\n", self.seed, self.config_digest)
    }
}

// ---------------------------------------------------------------- edge lists

/// Parses `src dst` lines with 0-based ids. An optional first line
/// `nodes N` fixes the vertex count, otherwise it is the largest id plus
/// one. Blank lines and lines starting with `#` are skipped; repeated edges
/// are stored once.
pub fn parse_edge_list_str(text: &str) -> Result<AdjacencyMatrix> {
    let mut declared: Option<usize> = None;
    let mut edges = Vec::new();
    let mut seen_content = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = || OsbmError::MalformedLine { line: line_no, content: raw.to_string() };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(malformed());
        }
        if tokens[0] == "nodes" {
            if seen_content {
                return Err(malformed());
            }
            declared = Some(tokens[1].parse().map_err(|_| malformed())?);
            seen_content = true;
            continue;
        }
        seen_content = true;
        let src: usize = tokens[0].parse().map_err(|_| malformed())?;
        let dst: usize = tokens[1].parse().map_err(|_| malformed())?;
        if src == dst {
            return Err(OsbmError::SelfLoop { line: line_no, vertex: src });
        }
        if let Some(n) = declared {
            if src >= n || dst >= n {
                return Err(malformed());
            }
        }
        edges.push((src, dst));
    }
    let n = match declared {
        Some(n) => n,
        None => edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0),
    };
    if n == 0 {
        return Err(OsbmError::EmptyGraph);
    }
    AdjacencyMatrix::from_edges(n, &edges)
}

pub fn parse_edge_list(path: &Path) -> Result<AdjacencyMatrix> {
    parse_edge_list_str(&std::fs::read_to_string(path)?)
}

/// `nodes N` header followed by the edges in row-major order.
pub fn write_edge_list(x: &AdjacencyMatrix) -> String {
    let mut s = format!("nodes {}\n", x.n());
    for (i, j) in x.edges() {
        let _ = writeln!(s, "{i} {j}");
    }
    s
}

// ----------------------------------------------------------- membership CSV

pub fn write_memberships_csv(z: &MembershipMatrix, prov: Option<&Provenance>) -> String {
    let mut s = prov.map(|p| p.csv_comment()).unwrap_or_default();
    s.push_str("vertex");
    for c in 0..z.q() {
        let _ = write!(s, ",class{}", c + 1);
    }
    s.push('\n');
    for i in 0..z.n() {
        let _ = write!(s, "{i}");
        for &b in z.row(i) {
            let _ = write!(s, ",{b}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_memberships_csv(text: &str) -> Result<MembershipMatrix> {
    let mut rows: Vec<Vec<u8>> = Vec::new();
    let mut header_seen = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = || OsbmError::MalformedLine { line: idx + 1, content: raw.to_string() };
        if !header_seen {
            if !line.starts_with("vertex") {
                return Err(malformed());
            }
            header_seen = true;
            continue;
        }
        let mut fields = line.split(',');
        let vertex: usize = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(malformed)?;
        if vertex != rows.len() {
            return Err(malformed());
        }
        let row = fields
            .map(|f| match f.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(malformed()),
            })
            .collect::<Result<Vec<u8>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(OsbmError::EmptyGraph);
    }
    MembershipMatrix::from_rows(&rows)
}

/// Soft memberships as CSV with 17 significant digits.
pub fn write_tau_csv(tau: &DMatrix<f64>, prov: Option<&Provenance>) -> String {
    let mut s = prov.map(|p| p.csv_comment()).unwrap_or_default();
    s.push_str("vertex");
    for c in 0..tau.ncols() {
        let _ = write!(s, ",tau{}", c + 1);
    }
    s.push('\n');
    for i in 0..tau.nrows() {
        let _ = write!(s, "{i}");
        for c in 0..tau.ncols() {
            let _ = write!(s, ",{:?}", tau[(i, c)]);
        }
        s.push('\n');
    }
    s
}

// ------------------------------------------------------ key-value documents

/// Ordered `key = value` document. Values are single tokens or
/// whitespace-separated lists; lines starting with `#` are comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValueDoc {
    entries: Vec<(String, String)>,
}

impl KeyValueDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, fmt_f64(value));
    }

    pub fn set_list(&mut self, key: &str, values: impl IntoIterator<Item = f64>) {
        let joined = values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(" ");
        self.set(key, joined);
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| invalid(format!("missing key {key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| invalid(format!("bad value for {key}")))
    }

    pub fn get_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| invalid(format!("bad number in {key}"))))
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KeyValueDoc::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| OsbmError::MalformedLine { line: idx + 1, content: raw.to_string() })?;
            doc.set(k.trim(), v.trim());
        }
        Ok(doc)
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn put_header(doc: &mut KeyValueDoc, schema: &str, prov: &Provenance) {
    doc.set("schema", schema);
    doc.set("tool_version", TOOL_VERSION);
    doc.set("seed", prov.seed);
    doc.set("config_digest", &prov.config_digest);
}

fn put_fit(doc: &mut KeyValueDoc, prefix: &str, fit: &FitResult) {
    let s = &fit.state;
    let key = |k: &str| format!("{prefix}{k}");
    doc.set(&key("n"), s.n());
    doc.set(&key("q"), s.q());
    doc.set_f64(&key("il_osbm"), fit.il_osbm);
    doc.set_f64(&key("final_bound"), fit.final_bound());
    doc.set(&key("converged"), fit.converged);
    doc.set(&key("iterations"), fit.iterations);
    doc.set(&key("estep_capped"), fit.estep_capped);
    doc.set_list(&key("eta_n"), s.eta_n.iter().copied());
    doc.set_list(&key("zeta_n"), s.zeta_n.iter().copied());
    doc.set_f64(&key("a_n"), s.a_n);
    doc.set_f64(&key("b_n"), s.b_n);
    doc.set_list(&key("w_n_vec"), s.w_n_vec.iter().copied());
    doc.set_list(&key("sigma_n"), s.sigma_n.iter().copied());
    doc.set_list(&key("tau"), s.tau.transpose().iter().copied());
    doc.set_list(&key("xi"), s.xi.transpose().iter().copied());
    doc.set_list(&key("bound_trace"), fit.bound_trace.iter().copied());
}

fn take_fit(doc: &KeyValueDoc, prefix: &str) -> Result<FitResult> {
    let key = |k: &str| format!("{prefix}{k}");
    let n: usize = doc.get_parsed(&key("n"))?;
    let q: usize = doc.get_parsed(&key("q"))?;
    let k = q + 1;
    let sized = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = doc.get_list(&key(name))?;
        if v.len() != len {
            return Err(invalid(format!("{name} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    };
    let state = VariationalState {
        tau: DMatrix::from_row_slice(n, q, &sized("tau", n * q)?),
        eta_n: sized("eta_n", q)?,
        zeta_n: sized("zeta_n", q)?,
        w_n_vec: DVector::from_vec(sized("w_n_vec", k * k)?),
        sigma_n: DMatrix::from_column_slice(k * k, k * k, &sized("sigma_n", k.pow(4))?),
        a_n: doc.get_parsed(&key("a_n"))?,
        b_n: doc.get_parsed(&key("b_n"))?,
        xi: DMatrix::from_row_slice(n, n, &sized("xi", n * n)?),
    };
    Ok(FitResult {
        state,
        il_osbm: doc.get_parsed(&key("il_osbm"))?,
        bound_trace: doc.get_list(&key("bound_trace"))?,
        converged: doc.get_parsed(&key("converged"))?,
        iterations: doc.get_parsed(&key("iterations"))?,
        estep_capped: doc.get_parsed(&key("estep_capped"))?,
    })
}

fn check_schema(doc: &KeyValueDoc, schema: &str) -> Result<Provenance> {
    let found = doc.get("schema")?;
    if found != schema {
        return Err(invalid(format!("expected schema {schema}, found {found}")));
    }
    Ok(Provenance { seed: doc.get_parsed("seed")?, config_digest: doc.get("config_digest")?.to_string() })
}

pub fn write_fit_document(fit: &FitResult, prov: &Provenance) -> String {
    let mut doc = KeyValueDoc::new();
    put_header(&mut doc, FIT_SCHEMA, prov);
    put_fit(&mut doc, "", fit);
    doc.render()
}

pub fn read_fit_document(text: &str) -> Result<(FitResult, Provenance)> {
    let doc = KeyValueDoc::parse(text)?;
    let prov = check_schema(&doc, FIT_SCHEMA)?;
    Ok((take_fit(&doc, "")?, prov))
}

/// Per-candidate summary followed by the chosen fit under the `best.`
/// prefix. Wall-clock times are not written.
pub fn write_selection_document(rep: &SelectionReport, prov: &Provenance) -> String {
    let mut doc = KeyValueDoc::new();
    put_header(&mut doc, SELECTION_SCHEMA, prov);
    doc.set("q_range", rep.cells.iter().map(|c| c.q.to_string()).collect::<Vec<_>>().join(" "));
    doc.set("q_star", rep.q_star);
    for cell in &rep.cells {
        let p = format!("q{}.", cell.q);
        doc.set(&format!("{p}best_il"), cell.best_il().map(fmt_f64).unwrap_or_else(|| "failed".into()));
        doc.set(&format!("{p}best_restart"), cell.best_restart.map(|r| r.to_string()).unwrap_or_else(|| "none".into()));
        let ils: Vec<String> = cell.restarts.iter().map(|o| o.il().map(fmt_f64).unwrap_or_else(|| "failed".into())).collect();
        doc.set(&format!("{p}restart_il"), ils.join(" "));
        let failures: Vec<String> = cell
            .restarts
            .iter()
            .enumerate()
            .filter_map(|(r, o)| match o {
                RestartOutcome::Failed(msg) => Some(format!("{r}:{}", msg.replace(char::is_whitespace, "_"))),
                RestartOutcome::Fitted { .. } => None,
            })
            .collect();
        doc.set(&format!("{p}failures"), failures.join(" "));
    }
    put_fit(&mut doc, "best.", rep.best());
    doc.render()
}

/// Reads back `q_star`, the per-candidate best IL values and the chosen fit.
pub fn read_selection_document(text: &str) -> Result<(usize, BTreeMap<usize, Option<f64>>, FitResult, Provenance)> {
    let doc = KeyValueDoc::parse(text)?;
    let prov = check_schema(&doc, SELECTION_SCHEMA)?;
    let q_star = doc.get_parsed("q_star")?;
    let mut best = BTreeMap::new();
    for tok in doc.get("q_range")?.split_whitespace() {
        let q: usize = tok.parse().map_err(|_| invalid("bad q_range"))?;
        let v = doc.get(&format!("q{q}.best_il"))?;
        best.insert(q, if v == "failed" { None } else { Some(v.parse().map_err(|_| invalid("bad best_il"))?) });
    }
    Ok((q_star, best, take_fit(&doc, "best.")?, prov))
}

/// Reads either document kind and returns the fit it carries.
pub fn read_any_fit(text: &str) -> Result<(FitResult, Provenance)> {
    let doc = KeyValueDoc::parse(text)?;
    match doc.get("schema")? {
        FIT_SCHEMA => read_fit_document(text),
        SELECTION_SCHEMA => read_selection_document(text).map(|(_, _, f, p)| (f, p)),
        other => Err(invalid(format!("unknown schema {other}"))),
    }
}

// ------------------------------------------------------------ configuration

/// Networks to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
    pub w_star: f64,
    pub q_true: Vec<usize>,
    pub balances: Vec<Balance>,
}

/// How simulated networks are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub q_min: usize,
    pub q_max: usize,
    pub restarts: usize,
    pub threshold: f64,
    /// Credibility level of the coverage experiment.
    pub level: f64,
    pub priors: PriorConstants,
    #[serde(default)]
    pub options: FitOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Confusion,
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Networks per grid cell.
    pub replicates: usize,
    pub output_dir: Option<String>,
}

/// Full description of a simulation study, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub generative: GenerativeConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid = ConfusionGrid::default();
        ExperimentConfig {
            run: RunConfig { kind: ExperimentKind::Confusion, seed: 1, replicates: 20, output_dir: None },
            generative: GenerativeConfig {
                n: grid.n,
                lambdas: grid.lambdas,
                epsilon: grid.epsilon,
                w_star: grid.w_star,
                q_true: grid.q_true,
                balances: grid.balances,
            },
            inference: InferenceConfig {
                q_min: 2,
                q_max: 8,
                restarts: grid.restarts,
                threshold: DEFAULT_THRESHOLD,
                level: 0.99,
                priors: PriorConstants::default(),
                options: FitOptions::default(),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generative;
        let inf = &self.inference;
        if g.n < 2 {
            return Err(invalid("generative.n must be at least 2"));
        }
        if g.lambdas.is_empty() || g.q_true.is_empty() || g.balances.is_empty() {
            return Err(invalid("generative grid lists must be non-empty"));
        }
        if g.q_true.contains(&0) {
            return Err(invalid("generative.q_true entries must be positive"));
        }
        let finite = g.lambdas.iter().all(|l| l.is_finite()) && g.epsilon.is_finite() && g.w_star.is_finite();
        if !finite {
            return Err(invalid("generative parameters must be finite"));
        }
        for b in &g.balances {
            if let Balance::Geometric { a } = b {
                if !(*a > 0.0 && a.is_finite()) {
                    return Err(invalid("geometric balance needs a > 0"));
                }
            }
        }
        if inf.q_min == 0 || inf.q_min > inf.q_max || inf.q_max > g.n {
            return Err(invalid("inference range must satisfy 1 <= q_min <= q_max <= n"));
        }
        if inf.restarts == 0 {
            return Err(invalid("inference.restarts must be at least 1"));
        }
        if !(inf.threshold > 0.0 && inf.threshold < 1.0) || !(inf.level > 0.0 && inf.level < 1.0) {
            return Err(invalid("threshold and level must lie in (0, 1)"));
        }
        let p = &inf.priors;
        if ![p.eta0, p.zeta0, p.a0, p.b0].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(invalid("prior constants must be positive"));
        }
        Ok(())
    }

    pub fn q_range(&self) -> Vec<usize> {
        (self.inference.q_min..=self.inference.q_max).collect()
    }

    pub fn confusion_grid(&self) -> ConfusionGrid {
        let g = &self.generative;
        ConfusionGrid {
            n: g.n,
            lambdas: g.lambdas.clone(),
            balances: g.balances.clone(),
            q_true: g.q_true.clone(),
            epsilon: g.epsilon,
            w_star: g.w_star,
            q_range: self.q_range(),
            restarts: self.inference.restarts,
            threshold: self.inference.threshold,
            priors: self.inference.priors,
        }
    }

    /// Coverage setup from the first entry of each generative list.
    pub fn coverage_config(&self) -> CoverageConfig {
        let g = &self.generative;
        CoverageConfig {
            n: g.n,
            q: g.q_true[0],
            lambda: g.lambdas[0],
            epsilon: g.epsilon,
            w_star: g.w_star,
            balance: g.balances[0],
            level: self.inference.level,
            restarts: self.inference.restarts,
            threshold: self.inference.threshold,
            priors: self.inference.priors,
            ..CoverageConfig::default()
        }
    }
}

// ---------------------------------------------------------------------- DOT

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

/// Directed graph with nodes filled by class colour. Overlapping vertices
/// are drawn as wedges, outliers in white.
pub fn write_dot(x: &AdjacencyMatrix, z: &MembershipMatrix) -> String {
    let mut s = String::from("digraph osbm {\n  node [shape=circle, style=filled];\n");
    for i in 0..x.n() {
        let colours: Vec<&str> = (0..z.q()).filter(|&c| z.get(i, c)).map(|c| PALETTE[c % PALETTE.len()]).collect();
        let (style, fill) = match colours.len() {
            0 => ("filled", "white".to_string()),
            1 => ("filled", colours[0].to_string()),
            _ => ("wedged", colours.join(":")),
        };
        let _ = writeln!(s, "  {i} [style={style}, fillcolor=\"{fill}\"];");
    }
    for (i, j) in x.edges() {
        let _ = writeln!(s, "  {i} -> {j};");
    }
    s.push_str("}\n");
    s
}
