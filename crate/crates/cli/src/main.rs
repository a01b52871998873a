use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use lsd_core::asymptotics::{attach_sandwich, model_lsd};
use lsd_core::divergence::lsd_divergence;
use lsd_core::estimation::{relative_density, working_support};
use lsd_core::io::{
    builtin_dataset, parse_counts_path, predicted_frequencies, run_grid, GridInput, GridSpec,
    GridTask,
};
use lsd_core::models::{family_by_name, model_density, SUPPORT_EPS};
use lsd_core::testing::{
    one_sample_test, signed_two_sample_test, simulate_estimator_distribution, two_sample_test,
    NullSpec, PValueConvention, Sides, TestOptions,
};
use lsd_core::{minimize_lsd, EstimatorConfig, FrequencyTable, LsdError, ModelFamily, TuningPair};

mod output;
mod settings;

use output::{emit, render, Record};
use settings::{Format, Settings};

/// Minimum logarithmic super divergence estimation and tests for count data.
#[derive(Debug, Parser)]
#[command(name = "lsd", version)]
struct Cli {
    /// TOML file with defaults for any flag (flags win).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Minimum LSD estimate with its sandwich standard error.
    Fit,
    /// LSD between the data (or model `--theta-g`) and the model at `--theta`.
    Divergence,
    /// Test `theta = --theta0` with W = 2n LSD(f_hat, f_theta0).
    TestOne,
    /// Two-sample test; `--convention` selects the directional statistic.
    TestTwo,
    /// Fits or signed two-sample tests over a (beta, gamma) grid.
    Grid,
    /// Sampling distribution of the estimator against its sandwich variance.
    Simulate,
}

fn load_table(
    data: &Option<PathBuf>,
    builtin: &Option<String>,
    drop: &Option<Vec<u64>>,
    which: &str,
) -> anyhow::Result<FrequencyTable> {
    let table = match (data, builtin) {
        (Some(path), None) => parse_counts_path(path)?,
        (None, Some(name)) => builtin_dataset(name)?.table,
        (Some(_), Some(_)) => bail!("give either a data file or a builtin {which}, not both"),
        (None, None) => bail!(
            "{which} is required (--data{s} PATH or --builtin{s} NAME)",
            s = if which == "second sample" { "2" } else { "" }
        ),
    };
    match drop {
        Some(cells) if !cells.is_empty() => Ok(table.without_cells(cells)?),
        _ => Ok(table),
    }
}

fn first_table(s: &Settings) -> anyhow::Result<FrequencyTable> {
    load_table(&s.data, &s.builtin, &s.drop_cells, "data")
}

fn second_table(s: &Settings) -> anyhow::Result<FrequencyTable> {
    load_table(&s.data2, &s.builtin2, &s.drop_cells2, "second sample")
}

fn tuning(s: &Settings) -> anyhow::Result<TuningPair> {
    Ok(TuningPair::new(s.beta()?, s.gamma()?)?)
}

fn test_options(s: &Settings) -> TestOptions {
    let defaults = TestOptions::default();
    TestOptions {
        estimator: EstimatorConfig::default(),
        draws: s.draws.unwrap_or(defaults.draws),
        seed: s.seed(),
    }
}

fn convention(s: &Settings) -> anyhow::Result<Option<PValueConvention>> {
    s.convention
        .as_deref()
        .map(|c| c.parse::<PValueConvention>().map_err(anyhow::Error::from))
        .transpose()
}

fn scalar(v: &[f64]) -> Value {
    match v {
        [x] => json!(x),
        many => json!(many),
    }
}

fn sides_name(s: Sides) -> &'static str {
    match s {
        Sides::OneSided => "one-sided",
        Sides::TwoSided => "two-sided",
    }
}

fn record(pairs: Vec<(&str, Value)>) -> Record {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn cmd_fit(s: &Settings, family: &dyn ModelFamily) -> anyhow::Result<Record> {
    let table = first_table(s)?;
    let t = tuning(s)?;
    let fit = minimize_lsd(&table, family, &t, &EstimatorConfig::default())?;
    let fit = attach_sandwich(fit, family)?;
    let mut r = record(vec![
        ("beta", json!(t.beta())),
        ("gamma", json!(t.gamma())),
        ("n", json!(table.n())),
        ("theta_hat", scalar(&fit.theta_hat)),
        (
            "se",
            fit.standard_errors(table.n())
                .map_or(Value::Null, |v| scalar(&v)),
        ),
        ("objective", json!(fit.objective_value)),
        ("converged", json!(fit.converged)),
        ("iterations", json!(fit.iterations)),
        ("residual_norm", json!(fit.residual_norm)),
    ]);
    if let Some(k) = s.predicted {
        let p = predicted_frequencies(family, &fit.theta_hat, table.n(), k)?;
        r.insert("predicted".into(), json!(p));
    }
    Ok(r)
}

fn cmd_divergence(s: &Settings, family: &dyn ModelFamily) -> anyhow::Result<Record> {
    let t = tuning(s)?;
    let theta = Settings::require(&s.theta, "theta")?;
    let value = match s.theta_g {
        Some(theta_g) => model_lsd(family, &[theta_g], &[theta], &t)?,
        None => {
            let table = first_table(s)?;
            family.check_theta(&[theta])?;
            let support = working_support(&table, family, &[theta], SUPPORT_EPS);
            let g = relative_density(&table, &support)?;
            let f = model_density(family, &[theta], &support)?;
            lsd_divergence(&g, &f, &t)?
        }
    };
    Ok(record(vec![
        ("beta", json!(t.beta())),
        ("gamma", json!(t.gamma())),
        ("theta_g", s.theta_g.map_or(Value::Null, |v| json!(v))),
        ("theta", json!(theta)),
        ("lsd", json!(value)),
    ]))
}

fn null_eigenvalues(null: &NullSpec) -> Value {
    match null {
        NullSpec::QuadForm(q) => json!(q.eigenvalues),
        NullSpec::ChiSquareOne => json!("chi2(1)"),
    }
}

fn cmd_test_one(s: &Settings, family: &dyn ModelFamily) -> anyhow::Result<Record> {
    let table = first_table(s)?;
    let t = tuning(s)?;
    let theta0 = Settings::require(&s.theta0, "theta0")?;
    let r = one_sample_test(&table, family, &[theta0], &t, s.alpha(), &test_options(s))?;
    Ok(record(vec![
        ("beta", json!(t.beta())),
        ("gamma", json!(t.gamma())),
        ("theta0", json!(theta0)),
        ("theta_hat", scalar(&r.estimates[0])),
        ("statistic", json!(r.statistic)),
        ("pvalue", json!(r.pvalue)),
        ("pvalue_se", json!(r.pvalue_std_error)),
        ("null_eigenvalues", null_eigenvalues(&r.null_spec)),
        ("alpha", json!(r.alpha)),
        ("reject", json!(r.rejects())),
    ]))
}

fn cmd_test_two(s: &Settings, family: &dyn ModelFamily) -> anyhow::Result<Record> {
    let first = first_table(s)?;
    let second = second_table(s)?;
    let t = tuning(s)?;
    let r = match convention(s)? {
        Some(c) => signed_two_sample_test(
            &first,
            &second,
            family,
            &t,
            s.alpha(),
            c,
            &EstimatorConfig::default(),
        )?,
        None => two_sample_test(&first, &second, family, &t, s.alpha(), &test_options(s))?,
    };
    let pooled = r.estimates.get(2).map_or(Value::Null, |v| scalar(v));
    Ok(record(vec![
        ("beta", json!(t.beta())),
        ("gamma", json!(t.gamma())),
        ("theta_1", scalar(&r.estimates[0])),
        ("theta_2", scalar(&r.estimates[1])),
        ("theta_pooled", pooled),
        ("statistic", json!(r.statistic)),
        ("pvalue", json!(r.pvalue)),
        ("pvalue_se", json!(r.pvalue_std_error)),
        ("null", null_eigenvalues(&r.null_spec)),
        ("sides", json!(sides_name(r.sides))),
        (
            "convention",
            r.convention.map_or(Value::Null, |c| json!(c.name())),
        ),
        ("alpha", json!(r.alpha)),
        ("reject", json!(r.rejects())),
    ]))
}

fn cmd_grid(s: &Settings, family: &dyn ModelFamily) -> anyhow::Result<String> {
    let task: GridTask = s.task.as_deref().unwrap_or("fit").parse()?;
    let input = match task {
        GridTask::Fit => GridInput::OneSample(first_table(s)?),
        GridTask::TestTwoSigned => GridInput::TwoSample {
            control: first_table(s)?,
            treated: second_table(s)?,
        },
    };
    let spec = GridSpec {
        task,
        betas: Settings::require(&s.betas, "betas")?,
        gammas: Settings::require(&s.gammas, "gammas")?,
        alpha: s.alpha(),
        convention: convention(s)?.unwrap_or_default(),
        estimator: EstimatorConfig::default(),
    };
    let report = run_grid(&input, family, &spec)?;
    Ok(match s.format() {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json() + "\n",
    })
}

fn cmd_simulate(s: &Settings, family: &dyn ModelFamily) -> anyhow::Result<Record> {
    let t = tuning(s)?;
    let theta = Settings::require(&s.theta, "theta")?;
    let n = Settings::require(&s.n, "n")?;
    let replicates = s.replicates.unwrap_or(1000);
    let sum = simulate_estimator_distribution(
        family,
        theta,
        &t,
        n,
        replicates,
        s.seed(),
        &EstimatorConfig::default(),
    )?;
    Ok(record(vec![
        ("beta", json!(t.beta())),
        ("gamma", json!(t.gamma())),
        ("theta", json!(theta)),
        ("n", json!(n)),
        ("replicates", json!(replicates)),
        ("fits", json!(sum.estimates.len())),
        ("failures", json!(sum.failures)),
        ("unconverged", json!(sum.unconverged)),
        ("mean", json!(sum.mean)),
        ("variance", json!(sum.variance)),
        ("sandwich", json!(sum.sandwich)),
    ]))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = match &cli.config {
        Some(path) => cli.settings.over(Settings::from_file(path)?),
        None => cli.settings,
    };
    let family = family_by_name(settings.family())?;
    let family = family.as_ref();
    let text = match cli.command {
        Command::Grid => cmd_grid(&settings, family)?,
        other => {
            let rec = match other {
                Command::Fit => cmd_fit(&settings, family),
                Command::Divergence => cmd_divergence(&settings, family),
                Command::TestOne => cmd_test_one(&settings, family),
                Command::TestTwo => cmd_test_two(&settings, family),
                Command::Simulate => cmd_simulate(&settings, family),
                Command::Grid => unreachable!(),
            }?;
            render(rec, settings.format())
        }
    };
    emit(&text, settings.out.as_deref()).context("writing output")
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<LsdError>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
