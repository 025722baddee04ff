mod ingest;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use panelmix::asymdist::NullDistribution;
use panelmix::dgp::{generate, run_experiment, summary_csv, DGPSpec, ExperimentDesign};
use panelmix::em::{self, EMConfig};
use panelmix::penalty::{compute_an, AnMode};
use panelmix::scores::{score_general, score_homogeneity};
use panelmix::sht::{information_criteria, select_sht, LevelSchedule};
use panelmix::testing::{bootstrap_test, null_distribution, run_test, Method, TestConfig};
use panelmix::{rng, PanelDataset};
use serde_json::{json, Value};

use crate::ingest::{ingest, ColumnSpec};
use crate::report::{render, Format};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "panelmix", version, about = "Finite mixtures of normal panel regressions: estimation and tests for the number of components")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Penalized MLE with a given number of components.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, short)]
        m: usize,
        /// Tuning constant of the variance penalty (default 1/sqrt(n)).
        #[arg(long)]
        an: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Test H0: M = M0 against M0 + 1 components.
    Test {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        m0: usize,
        #[arg(long, value_enum, default_value = "em")]
        method: MethodArg,
        /// Parametric bootstrap with this many replications instead of the limiting distribution.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Level of the reported decision.
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Estimate the number of components by sequential testing, AIC and BIC.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 6)]
        mbar: usize,
        #[arg(long, value_enum, default_value = "em")]
        method: MethodArg,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        /// Use the level min(0.05, c / ln n) instead of a fixed level.
        #[arg(long)]
        shrink: Option<f64>,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Run a simulation experiment described by a TOML file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed of the design file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Critical values from the limiting null distribution at the fitted null model.
    Crit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        m0: usize,
        #[arg(long, default_value_t = 2000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the sorted draws to this CSV file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Score matrix at the fitted null model, one row per unit (CSV).
    DumpScores {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        m0: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dump the information matrix of the scores instead.
        #[arg(long)]
        information: bool,
    },
    /// Simulate a dataset from a TOML model description and write it as long-format CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Destination of the simulated data.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tuning constant of the EM test for a design.
    AnTable {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        m0: usize,
        /// Misclassification rate of the null model (needed for M0 = 2..4).
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        covariates: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Long-format CSV with a header row.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, default_value = "unit")]
    unit: String,
    #[arg(long, default_value = "period")]
    period: String,
    #[arg(long, default_value = "y")]
    y: String,
    /// Regressors with component-specific slopes (comma separated).
    #[arg(long, value_delimiter = ',')]
    x: Vec<String>,
    /// Regressors with a common slope (comma separated).
    #[arg(long, value_delimiter = ',')]
    z: Vec<String>,
    #[arg(long, default_value = ",")]
    delimiter: char,
}

#[derive(Args, Debug, Clone)]
struct TestArgs {
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the tabulated tuning constant.
    #[arg(long)]
    an: Option<f64>,
    /// Proportion floor (EM-test restricted fits; PLRT bound when --method plrt).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    tau: Vec<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Em,
    Plrt,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Em => Method::EmTest,
            MethodArg::Plrt => Method::Plrt,
        }
    }
}

impl DataArgs {
    fn load(&self) -> Result<PanelDataset> {
        if !self.delimiter.is_ascii() {
            bail!("delimiter must be a single ASCII character");
        }
        let spec = ColumnSpec {
            unit: self.unit.clone(),
            period: self.period.clone(),
            y: self.y.clone(),
            x: self.x.clone(),
            z: self.z.clone(),
            delimiter: self.delimiter as u8,
        };
        ingest(&self.input, &spec)
    }

    fn echo(&self, data: &PanelDataset) -> Value {
        json!({
            "input": self.input.display().to_string(),
            "unit": self.unit, "period": self.period, "y": self.y, "x": self.x, "z": self.z,
            "n": data.n(), "T": data.periods(), "q": data.q(), "p": data.p(),
        })
    }
}

impl TestArgs {
    fn config(&self, method: Method) -> TestConfig {
        let mut cfg = TestConfig { n_draws: self.draws, an_override: self.an, ..TestConfig::default() };
        cfg.em.seed = self.seed;
        cfg.em.k_steps = self.k;
        cfg.em.tau_set = self.tau.clone();
        if let Some(e) = self.epsilon {
            match method {
                Method::EmTest => cfg.em.epsilon_alpha = e,
                Method::Plrt => cfg.plrt_epsilon = e,
            }
        }
        cfg
    }
}

fn an_source(mode: AnMode) -> &'static str {
    match mode {
        AnMode::Formula => "formula",
        AnMode::CovariateConstants => "constant",
        AnMode::UserFixed => "user",
        AnMode::SampleSize => "sample_size",
    }
}

fn dispatch(cli: &Cli) -> Result<(Value, Option<String>)> {
    Ok(match &cli.command {
        Command::Fit { data, m, an, seed } => {
            let d = data.load()?;
            let base = em::estimation_penalty(&d)?;
            let pen = match an {
                Some(a) => base.with_an(*a, AnMode::UserFixed)?,
                None => base,
            };
            let cfg = EMConfig { seed: *seed, ..EMConfig::default() };
            let fits = em::fit_sequence(&d, *m, &pen, &cfg)?;
            let fit = fits.last().expect("m >= 1");
            if !fit.converged {
                return Err(anyhow!(panelmix::Error::NonConvergence(format!(
                    "{m}-component fit did not converge in {} iterations",
                    fit.iterations
                ))));
            }
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "fit",
                "inputs": { "data": data.echo(&d), "m": m, "seed": seed },
                "a_n": pen.a_n,
                "a_n_source": an_source(pen.an_mode),
                "sigma0_sq": pen.sigma0_sq,
                "fit": fit,
            });
            (report, None)
        }
        Command::Test { data, m0, method, bootstrap, level, test } => {
            let d = data.load()?;
            let method: Method = (*method).into();
            let cfg = test.config(method);
            let out = match bootstrap {
                Some(b) => bootstrap_test(&d, *m0, method, &cfg, *b)?,
                None => run_test(&d, *m0, method, &cfg, None)?,
            };
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "test",
                "inputs": { "data": data.echo(&d), "m0": m0, "bootstrap": bootstrap, "config": cfg },
                "seeds": { "master": cfg.em.seed, "null_draws": out.diagnostics.null_draw_seed, "omega": rng::derive_seed(cfg.em.seed, 1) },
                "a_n": out.diagnostics.a_n,
                "a_n_source": an_source(out.diagnostics.an_mode),
                "statistic": out.statistic,
                "stars": panelmix::testing::stars(out.p_value),
                "decision": { "level": level, "reject": out.rejects(*level) },
                "outcome": out,
            });
            (report, None)
        }
        Command::Select { data, mbar, method, level, shrink, test } => {
            let d = data.load()?;
            let method: Method = (*method).into();
            let cfg = test.config(method);
            let schedule = match shrink {
                Some(c) => LevelSchedule::Shrinking { c: *c },
                None => LevelSchedule::Fixed { level: *level },
            };
            let sht = select_sht(&d, *mbar, schedule, method, &cfg)?;
            let (aic, bic) = information_criteria(&d, *mbar, &cfg.em)?;
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "select",
                "inputs": { "data": data.echo(&d), "mbar": mbar, "schedule": schedule, "config": cfg },
                "m_hat": { "sht": sht.m_hat, "aic": aic.m_hat, "bic": bic.m_hat },
                "sht": sht,
                "aic": aic,
                "bic": bic,
            });
            (report, None)
        }
        Command::Simulate { config, seed } => {
            let text = std::fs::read_to_string(config).with_context(|| format!("cannot read {}", config.display()))?;
            let mut design: ExperimentDesign = toml::from_str(&text).with_context(|| format!("invalid design file {}", config.display()))?;
            if let Some(s) = seed {
                design.seed = *s;
            }
            let summaries = run_experiment(&design)?;
            let csv = summary_csv(&summaries);
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "simulate",
                "inputs": { "design": design },
                "summaries": summaries,
            });
            (report, Some(csv))
        }
        Command::Crit { data, m0, draws, seed, dump } => {
            let d = data.load()?;
            let cfg = EMConfig { seed: *seed, ..EMConfig::default() };
            let null = panelmix::testing::fit_null(&d, *m0, &cfg)?;
            let draw_seed = rng::derive_seed(*seed, 2);
            let dist: NullDistribution = null_distribution(&d, &null.params, *draws, draw_seed)?;
            if let Some(path) = dump {
                let f = std::fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
                dist.write_csv(std::io::BufWriter::new(f))?;
            }
            let crit: Vec<Value> = panelmix::testing::SIGNIFICANCE_LEVELS
                .iter()
                .map(|&l| json!({ "level": l, "value": dist.critical_value(1.0 - l).expect("level in (0,1)") }))
                .collect();
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "crit",
                "inputs": { "data": data.echo(&d), "m0": m0, "draws": draws, "seed": seed },
                "seeds": { "null_draws": draw_seed },
                "null_fit": null,
                "crit": crit,
                "complementarity_failures": dist.complementarity_failures,
            });
            (report, None)
        }
        Command::DumpScores { data, m0, seed, information } => {
            let d = data.load()?;
            let cfg = EMConfig { seed: *seed, ..EMConfig::default() };
            let null = panelmix::testing::fit_null(&d, *m0, &cfg)?;
            let p = &null.params;
            let b = if p.m() == 1 { score_homogeneity(&d, &p.gamma, &p.components[0])? } else { score_general(&d, p)? };
            let mut names: Vec<String> = (0..b.d_eta).map(|k| format!("eta{k}")).collect();
            let pairs = panelmix::scores::lambda_pairs(b.q);
            for h in 0..b.m0 {
                names.extend(pairs.iter().map(|(k, l)| format!("lambda{h}_{k}{l}")));
            }
            let (row_label, labels, mat) = if *information {
                ("row", names.clone(), panelmix::scores::information(&b)?.i_full)
            } else {
                ("unit", d.unit_ids().to_vec(), b.full())
            };
            let mut csv = format!("{row_label},{}\n", names.join(","));
            for (i, label) in labels.iter().enumerate() {
                csv.push_str(label);
                for v in mat.row(i).iter() {
                    csv.push_str(&format!(",{v:e}"));
                }
                csv.push('\n');
            }
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "dump-scores",
                "inputs": { "data": data.echo(&d), "m0": m0, "seed": seed },
                "null_fit": null,
                "d_eta": b.d_eta,
                "d_lambda": b.d_lam,
            });
            (report, Some(csv))
        }
        Command::Generate { config, out, seed } => {
            let text = std::fs::read_to_string(config).with_context(|| format!("cannot read {}", config.display()))?;
            let mut spec: DGPSpec = toml::from_str(&text).with_context(|| format!("invalid model file {}", config.display()))?;
            if let Some(s) = seed {
                spec.seed = *s;
            }
            let d = generate(&spec)?;
            let f = std::fs::File::create(out).with_context(|| format!("cannot write {}", out.display()))?;
            write_long_csv(&d, std::io::BufWriter::new(f))?;
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "generate",
                "inputs": { "model": spec },
                "output": out.display().to_string(),
                "n": d.n(), "T": d.periods(),
            });
            (report, None)
        }
        Command::AnTable { n, t, m0, omega, covariates } => {
            let a = compute_an(*m0, *n, *t, *omega, *covariates)?;
            let mode = if *covariates { AnMode::CovariateConstants } else { AnMode::Formula };
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "an-table",
                "inputs": { "n": n, "T": t, "m0": m0, "omega": omega, "covariates": covariates },
                "a_n": a,
                "a_n_source": an_source(mode),
            });
            (report, None)
        }
    })
}

fn write_long_csv<W: Write>(d: &PanelDataset, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["unit".to_string(), "period".into(), "y".into()];
    header.extend((0..d.q()).map(|k| format!("x{}", k + 1)));
    header.extend((0..d.p()).map(|k| format!("z{}", k + 1)));
    w.write_record(&header)?;
    for i in 0..d.n() {
        for t in 0..d.periods() {
            let mut row = vec![d.unit_ids()[i].clone(), (t + 1).to_string(), d.y(i, t).to_string()];
            row.extend(d.x(i, t).iter().map(|v| v.to_string()));
            row.extend(d.z(i, t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// 2 bad input, 3 non-convergence, 4 numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<panelmix::Error>()) {
        Some(panelmix::Error::NonConvergence(_)) => 3,
        Some(panelmix::Error::Numerical(_)) | Some(panelmix::Error::Degenerate(_)) => 4,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("cannot configure thread pool")?;
    }
    let (report, csv) = dispatch(cli)?;
    let text = render(&report, csv.as_deref(), cli.format)?;
    match &cli.output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
