//! Count tables on disk, embedded datasets and grid reports.
//!
//! Count files are UTF-8 text with one `x,count` pair per line. An optional
//! header line (any first line that is not two integers, e.g. `x,count`) is
//! skipped, as are blank lines and lines starting with `#`. Repeated `x`
//! rows are summed.
//!
//! The peritonitis incidence data used with the geometric family is not
//! shipped. Supply it in the same format, e.g. `data/peritonitis.csv` with
//! rows `0,<patients with no infection>`, `1,<patients with one>`, …, and
//! pass it with `--data`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::asymptotics::attach_sandwich;
use crate::divergence::TuningPair;
use crate::error::{LsdError, Result};
use crate::estimation::{minimize_lsd, EstimatorConfig, FrequencyTable};
use crate::models::ModelFamily;
use crate::testing::{signed_two_sample_test, PValueConvention};

/// Reads an `x,count` table.
pub fn parse_counts<R: BufRead>(reader: R) -> Result<FrequencyTable> {
    let mut pairs: Vec<(u64, u64)> = Vec::new();
    let mut seen_data = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| LsdError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let looks_numeric = fields.iter().all(|f| {
            f.chars()
                .all(|c| c.is_ascii_digit() || c == '-' || c == '+')
        });
        if !seen_data && !looks_numeric {
            seen_data = true;
            continue;
        }
        seen_data = true;
        let err = |message: String| LsdError::Parse {
            line: lineno,
            message,
        };
        if fields.len() != 2 {
            return Err(err(format!(
                "expected `x,count`, got {} field(s)",
                fields.len()
            )));
        }
        let x: u64 = fields[0].parse().map_err(|_| {
            err(format!(
                "`{}` is not a nonnegative integer value",
                fields[0]
            ))
        })?;
        let count: i64 = fields[1]
            .parse()
            .map_err(|_| err(format!("`{}` is not an integer count", fields[1])))?;
        if count < 0 {
            return Err(err(format!("negative count {count}")));
        }
        pairs.push((x, count as u64));
    }
    FrequencyTable::from_counts(pairs)
}

pub fn parse_counts_path(path: &Path) -> Result<FrequencyTable> {
    let file = File::open(path).map_err(|e| LsdError::Io(format!("{}: {e}", path.display())))?;
    parse_counts(BufReader::new(file))
}

/// Writes a table in the format [`parse_counts`] reads.
pub fn format_counts(table: &FrequencyTable) -> String {
    let mut out = String::from("x,count\n");
    for (x, c) in table.counts() {
        let _ = writeln!(out, "{x},{c}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: &'static str,
    pub table: FrequencyTable,
    pub provenance: &'static str,
}

pub const BUILTIN_NAMES: [&str; 3] = ["drosophila_one", "drosophila_control", "drosophila_treated"];

const DROSOPHILA_SOURCE: &str = "Woodruff et al. (1984), recessive lethal daughters of \
    Drosophila males exposed to a chemical; see also Simpson (1989)";

pub fn builtin_dataset(name: &str) -> Result<Dataset> {
    let (name, counts): (&'static str, &[(u64, u64)]) = match name {
        "drosophila_one" => ("drosophila_one", &[(0, 23), (1, 3), (3, 1), (4, 1)]),
        "drosophila_control" => ("drosophila_control", &[(0, 159), (1, 15), (2, 3)]),
        "drosophila_treated" => (
            "drosophila_treated",
            &[(0, 110), (1, 11), (2, 5), (6, 1), (7, 1)],
        ),
        other => return Err(LsdError::UnknownDataset(other.to_string())),
    };
    Ok(Dataset {
        name,
        table: FrequencyTable::from_counts(counts.iter().copied())?,
        provenance: DROSOPHILA_SOURCE,
    })
}

/// Expected counts `n f_θ(0), …, n f_θ(last − 1)` followed by the tail
/// `n P_θ(X ≥ last)`.
pub fn predicted_frequencies(
    family: &dyn ModelFamily,
    theta: &[f64],
    n: u64,
    last: u64,
) -> Result<Vec<f64>> {
    family.check_theta(theta)?;
    let n = n as f64;
    let mut out: Vec<f64> = (0..last)
        .map(|x| n * family.ln_pmf(theta, x).exp())
        .collect();
    let head: f64 = out.iter().sum();
    out.push((n - head).max(0.0));
    Ok(out)
}

/// Rounds half to even at `decimals` places.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round_ties_even() / scale
}

/// Displayed precision of report cells.
pub const REPORT_DECIMALS: usize = 3;

fn display(x: f64) -> String {
    format!(
        "{:.*}",
        REPORT_DECIMALS,
        round_half_even(x, REPORT_DECIMALS as i32)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridTask {
    Fit,
    TestTwoSigned,
}

impl std::str::FromStr for GridTask {
    type Err = LsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit" => Ok(GridTask::Fit),
            "test-two-signed" => Ok(GridTask::TestTwoSigned),
            other => Err(LsdError::BadParameter(format!(
                "unknown grid task `{other}` (fit | test-two-signed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridInput {
    OneSample(FrequencyTable),
    TwoSample {
        control: FrequencyTable,
        treated: FrequencyTable,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub task: GridTask,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub alpha: f64,
    pub convention: PValueConvention,
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    /// `A ≤ 0`: the estimator is undefined.
    Degenerate,
    Failed(String),
}

impl CellStatus {
    pub fn label(&self) -> String {
        match self {
            CellStatus::Ok => "ok".into(),
            CellStatus::Degenerate => "degenerate".into(),
            CellStatus::Failed(msg) => format!("error: {msg}"),
        }
    }
}

/// One `(β, γ)` cell. For the signed task `theta_hat` is
/// `[control, treated, pooled]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub beta: f64,
    pub gamma: f64,
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub statistic: Option<f64>,
    pub pvalue: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub task: GridTask,
    pub convention: Option<PValueConvention>,
    pub rows: Vec<GridRow>,
}

fn empty_row(beta: f64, gamma: f64, status: CellStatus) -> GridRow {
    GridRow {
        beta,
        gamma,
        theta_hat: Vec::new(),
        se: Vec::new(),
        statistic: None,
        pvalue: None,
        status,
    }
}

fn run_cell(
    input: &GridInput,
    family: &dyn ModelFamily,
    spec: &GridSpec,
    beta: f64,
    gamma: f64,
) -> GridRow {
    let t = match TuningPair::new(beta, gamma) {
        Ok(t) => t,
        Err(e) => return empty_row(beta, gamma, CellStatus::Failed(e.to_string())),
    };
    if !t.a_positive() {
        return empty_row(beta, gamma, CellStatus::Degenerate);
    }
    let outcome = match input {
        GridInput::OneSample(table) => minimize_lsd(table, family, &t, &spec.estimator)
            .and_then(|fit| attach_sandwich(fit, family))
            .map(|fit| GridRow {
                beta,
                gamma,
                se: fit.standard_errors(table.n()).unwrap_or_default(),
                theta_hat: fit.theta_hat,
                statistic: None,
                pvalue: None,
                status: CellStatus::Ok,
            }),
        GridInput::TwoSample { control, treated } => signed_two_sample_test(
            control,
            treated,
            family,
            &t,
            spec.alpha,
            spec.convention,
            &spec.estimator,
        )
        .map(|r| GridRow {
            beta,
            gamma,
            theta_hat: r.estimates.into_iter().flatten().collect(),
            se: Vec::new(),
            statistic: Some(r.statistic),
            pvalue: Some(r.pvalue),
            status: CellStatus::Ok,
        }),
    };
    outcome.unwrap_or_else(|e| empty_row(beta, gamma, CellStatus::Failed(e.to_string())))
}

/// Evaluates every `(β, γ)` cell, rows ordered by `γ` then `β`.
pub fn run_grid(
    input: &GridInput,
    family: &dyn ModelFamily,
    spec: &GridSpec,
) -> Result<GridReport> {
    match (spec.task, input) {
        (GridTask::Fit, GridInput::OneSample(_))
        | (GridTask::TestTwoSigned, GridInput::TwoSample { .. }) => {}
        (GridTask::Fit, _) => {
            return Err(LsdError::BadParameter(
                "the fit task takes one table".into(),
            ))
        }
        (GridTask::TestTwoSigned, _) => {
            return Err(LsdError::BadParameter(
                "the test-two-signed task takes control and treated tables".into(),
            ))
        }
    }
    if spec
        .betas
        .iter()
        .chain(&spec.gammas)
        .any(|v| !v.is_finite())
    {
        return Err(LsdError::BadParameter("grid values must be finite".into()));
    }
    let mut gammas = spec.gammas.clone();
    let mut betas = spec.betas.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let cells: Vec<(f64, f64)> = gammas
        .iter()
        .flat_map(|&g| betas.iter().map(move |&b| (b, g)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(b, g)| run_cell(input, family, spec, b, g))
        .collect();
    Ok(GridReport {
        task: spec.task,
        convention: (spec.task == GridTask::TestTwoSigned).then_some(spec.convention),
        rows,
    })
}

const MARKER: &str = "--";

fn opt_cell(v: Option<f64>) -> String {
    v.map(display).unwrap_or_else(|| MARKER.into())
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl GridReport {
    /// Display table rounded half-even; unavailable values print as `--`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.task {
            GridTask::Fit => out.push_str("beta,gamma,theta_hat,se,status\n"),
            GridTask::TestTwoSigned => out.push_str(
                "beta,gamma,theta_control,theta_treated,theta_pooled,statistic,pvalue,status\n",
            ),
        }
        for r in &self.rows {
            let theta: Vec<String> = match self.task {
                GridTask::Fit => vec![opt_cell(r.theta_hat.first().copied())],
                GridTask::TestTwoSigned => (0..3)
                    .map(|i| opt_cell(r.theta_hat.get(i).copied()))
                    .collect(),
            };
            let mut fields = vec![r.beta.to_string(), r.gamma.to_string()];
            fields.extend(theta);
            match self.task {
                GridTask::Fit => fields.push(opt_cell(r.se.first().copied())),
                GridTask::TestTwoSigned => {
                    fields.push(opt_cell(r.statistic));
                    fields.push(opt_cell(r.pvalue));
                }
            }
            fields.push(csv_escape(&r.status.label()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Full-precision rows.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            beta: f64,
            gamma: f64,
            theta_hat: Option<&'a [f64]>,
            se: Option<&'a [f64]>,
            statistic: Option<f64>,
            pvalue: Option<f64>,
            status: String,
        }
        #[derive(Serialize)]
        struct Report<'a> {
            task: &'static str,
            #[serde(skip_serializing_if = "Option::is_none")]
            convention: Option<&'static str>,
            rows: Vec<Row<'a>>,
        }
        fn non_empty(v: &[f64]) -> Option<&[f64]> {
            (!v.is_empty()).then_some(v)
        }
        let report = Report {
            task: match self.task {
                GridTask::Fit => "fit",
                GridTask::TestTwoSigned => "test-two-signed",
            },
            convention: self.convention.map(PValueConvention::name),
            rows: self
                .rows
                .iter()
                .map(|r| Row {
                    beta: r.beta,
                    gamma: r.gamma,
                    theta_hat: non_empty(&r.theta_hat),
                    se: non_empty(&r.se),
                    statistic: r.statistic,
                    pvalue: r.pvalue,
                    status: r.status.label(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&report).expect("report serializes")
    }

    /// Row for a cell, if present.
    pub fn cell(&self, beta: f64, gamma: f64) -> Option<&GridRow> {
        self.rows
            .iter()
            .find(|r| r.beta == beta && r.gamma == gamma)
    }

    /// `θ̂` keyed by `(γ, β)` in thousandths, for table lookups.
    pub fn estimates_by_cell(&self) -> BTreeMap<(i64, i64), f64> {
        self.rows
            .iter()
            .filter_map(|r| {
                let key = (
                    (r.gamma * 1000.0).round() as i64,
                    (r.beta * 1000.0).round() as i64,
                );
                r.theta_hat.first().map(|&t| (key, t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::poisson_family;

    fn parse(s: &str) -> Result<FrequencyTable> {
        parse_counts(s.as_bytes())
    }

    #[test]
    fn parse_examples() {
        let t = parse("0,23\n1,3\n3,1\n4,1").unwrap();
        assert_eq!(t.n(), 28);
        assert_eq!(t, builtin_dataset("drosophila_one").unwrap().table);
        let t = parse("5,1").unwrap();
        assert_eq!(t.n(), 1);
        assert_eq!(t.count(5), 1);
        assert!(matches!(
            parse("0,-1"),
            Err(LsdError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn parse_header_comments_and_duplicates() {
        let t = parse("x,count\n# comment\n\n0, 4\n1,2\n0,1\n").unwrap();
        assert_eq!(t.count(0), 5);
        assert_eq!(t.n(), 7);
        assert!(matches!(parse("x,count\n"), Err(LsdError::EmptyData)));
        assert!(matches!(parse("0,0\n"), Err(LsdError::EmptyData)));
        assert!(matches!(
            parse("0,1\n1,x\n"),
            Err(LsdError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse("0,1\n1\n"),
            Err(LsdError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse("0,1,2\n"),
            Err(LsdError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse("-1,2\n"),
            Err(LsdError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip() {
        for name in BUILTIN_NAMES {
            let t = builtin_dataset(name).unwrap().table;
            assert_eq!(parse(&format_counts(&t)).unwrap(), t);
        }
    }

    #[test]
    fn builtin_sizes() {
        let sizes: Vec<u64> = BUILTIN_NAMES
            .iter()
            .map(|n| builtin_dataset(n).unwrap().table.n())
            .collect();
        assert_eq!(sizes, vec![28, 177, 128]);
        let treated = builtin_dataset("drosophila_treated").unwrap().table;
        assert_eq!(treated.count(6), 1);
        assert_eq!(treated.count(7), 1);
        assert!(matches!(
            builtin_dataset("peritonitis"),
            Err(LsdError::UnknownDataset(_))
        ));
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(0.125, 2), 0.12);
        assert_eq!(round_half_even(0.375, 2), 0.38);
        assert_eq!(display(0.3571), "0.357");
    }

    #[test]
    fn predicted_frequencies_sum_to_n() {
        let p = predicted_frequencies(&poisson_family(), &[0.36], 28, 5).unwrap();
        assert_eq!(p.len(), 6);
        assert!((p.iter().sum::<f64>() - 28.0).abs() < 1e-9);
    }

    fn fit_spec(betas: Vec<f64>, gammas: Vec<f64>) -> GridSpec {
        GridSpec {
            task: GridTask::Fit,
            betas,
            gammas,
            alpha: 0.05,
            convention: PValueConvention::SignedRoot,
            estimator: EstimatorConfig::default(),
        }
    }

    #[test]
    fn grid_markers_and_order() {
        let input = GridInput::OneSample(builtin_dataset("drosophila_one").unwrap().table);
        let spec = fit_spec(vec![0.5, 0.0], vec![0.0, -1.0]);
        let report = run_grid(&input, &poisson_family(), &spec).unwrap();
        let order: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.gamma, r.beta)).collect();
        assert_eq!(
            order,
            vec![(-1.0, 0.0), (-1.0, 0.5), (0.0, 0.0), (0.0, 0.5)]
        );
        assert_eq!(
            report.cell(0.0, -1.0).unwrap().status,
            CellStatus::Degenerate
        );
        let csv = report.to_csv();
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("0,-1,--,--,degenerate"));
        assert!(csv.contains("0,0,0.357,"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        let first = &json["rows"][0];
        for key in [
            "beta",
            "gamma",
            "theta_hat",
            "se",
            "statistic",
            "pvalue",
            "status",
        ] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn empty_grid_and_bad_config() {
        let input = GridInput::OneSample(builtin_dataset("drosophila_one").unwrap().table);
        let report = run_grid(&input, &poisson_family(), &fit_spec(vec![], vec![0.0])).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.to_csv().lines().count(), 1);
        let mut spec = fit_spec(vec![0.0], vec![0.0]);
        spec.task = GridTask::TestTwoSigned;
        assert!(run_grid(&input, &poisson_family(), &spec).is_err());
    }

    #[test]
    fn grid_is_deterministic() {
        let input = GridInput::OneSample(builtin_dataset("drosophila_one").unwrap().table);
        let spec = fit_spec(vec![0.0, 0.3, 1.0], vec![-0.5, 0.0, 0.5]);
        let a = run_grid(&input, &poisson_family(), &spec).unwrap();
        let b = run_grid(&input, &poisson_family(), &spec).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
    }
}
