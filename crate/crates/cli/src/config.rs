//! Command-line flags, the TOML config file, and their merge into a resolved [`RunConfig`].

use std::path::{Path, PathBuf};

use cfm::error::{Error, Result};
use cfm::panel_io::{DesignSpec, Schema};
use cfm::problems::{FamilyKind, ModelFamily};
use cfm::simulate::Dgp;
use cfm::tuning::{empirical_grid, simulation_grid};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "cfm", version, about = "Nuclear-norm regularized estimation of conditional factor models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Subcommand, Debug)]
pub enum CliCommand {
    /// Fit one model and extract its factors.
    Estimate(Flags),
    /// Cross-validate the penalty scale c.
    Cv(Flags),
    /// Monte Carlo study on a simulated design.
    Simulate(Flags),
    /// In-sample and recursive out-of-sample R².
    Evaluate(Flags),
    /// Repeat the run recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Write to this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Cv,
    Simulate,
    Evaluate,
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format panel CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = ["unconstrained", "semiparametric", "homogeneous"])]
    pub family: Option<String>,
    #[arg(long)]
    pub zero_alpha: bool,
    #[arg(long = "lambda-c")]
    pub lambda_c: Option<f64>,
    /// Eigenvalue threshold for the number of factors.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Choose c by cross-validation.
    #[arg(long)]
    pub cv: bool,
    #[arg(long)]
    pub folds: Option<usize>,
    /// `simulation`, `empirical`, or a comma-separated list of c values.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub dgp: Option<u8>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// First out-of-sample period (1-based).
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    /// Numbers of factors scored by `evaluate`.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Re-run cross-validation on every rolling window.
    #[arg(long)]
    pub cv_each_period: bool,
    /// Solve every fit from zero.
    #[arg(long)]
    pub no_warm_start: bool,
    /// Also run the fixed-c sweep over the grid (`simulate`).
    #[arg(long)]
    pub sweep: bool,
    /// Plain design columns.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Rank-transform the plain columns within each period.
    #[arg(long)]
    pub rank: bool,
    /// Columns expanded into linear B-splines.
    #[arg(long, value_delimiter = ',')]
    pub splines: Option<Vec<String>>,
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSetting {
    Preset(String),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub asset: Option<String>,
    pub period: Option<String>,
    #[serde(rename = "return")]
    pub ret: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub intercept: Option<bool>,
    pub raw_columns: Option<Vec<String>>,
    pub rank_transform: Option<bool>,
    pub spline_columns: Option<Vec<String>>,
}

/// Contents of the config file; every key is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub family: Option<String>,
    pub zero_alpha: Option<bool>,
    pub lambda_c: Option<f64>,
    pub delta: Option<f64>,
    pub cv: Option<bool>,
    pub folds: Option<usize>,
    pub grid: Option<GridSetting>,
    pub dgp: Option<u8>,
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub reps: Option<usize>,
    pub burn_in: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub k: Option<Vec<usize>>,
    pub cv_each_period: Option<bool>,
    pub warm_start: Option<bool>,
    pub sweep: Option<bool>,
    pub schema: Option<SchemaConfig>,
    pub design: Option<DesignConfig>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    File {
        path: PathBuf,
        asset: String,
        period: String,
        #[serde(rename = "return")]
        ret: String,
    },
    Simulated {
        dgp: u8,
        n: usize,
        t: usize,
    },
}

/// Design in serializable form; `None` columns means every characteristic in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedDesign {
    pub intercept: bool,
    pub raw_columns: Option<Vec<String>>,
    pub rank_transform: bool,
    pub spline_columns: Vec<String>,
}

impl ResolvedDesign {
    pub fn to_spec(&self, characteristics: &[String]) -> DesignSpec {
        DesignSpec {
            intercept: self.intercept,
            raw_columns: self.raw_columns.clone().unwrap_or_else(|| characteristics.to_vec()),
            rank_transform: self.rank_transform,
            spline_columns: self.spline_columns.clone(),
        }
    }
}

/// Fully resolved run parameters; this is what the manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub source: DataSource,
    pub design: ResolvedDesign,
    pub family: String,
    pub zero_alpha: bool,
    pub lambda_c: Option<f64>,
    pub delta: Option<f64>,
    pub cv: bool,
    pub folds: usize,
    pub grid: Vec<f64>,
    pub warm_start: bool,
    pub reps: usize,
    pub burn_in: Option<usize>,
    pub k: Vec<usize>,
    pub cv_each_period: bool,
    pub sweep: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub tol: f64,
    pub max_iter: usize,
}

fn parse_grid(setting: &GridSetting) -> Result<Vec<f64>> {
    match setting {
        GridSetting::Preset(s) => match s.trim() {
            "simulation" => Ok(simulation_grid()),
            "empirical" => Ok(empirical_grid()),
            list => list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::ConfigError(format!("bad grid value `{v}`")))
                })
                .collect(),
        },
        GridSetting::List(v) => Ok(v.clone()),
    }
}

impl RunConfig {
    /// Merges flags over the config file and fills defaults.
    pub fn resolve(command: Command, flags: &Flags) -> Result<RunConfig> {
        let file = match &flags.config {
            Some(path) => FileConfig::read(path)?,
            None => FileConfig::default(),
        };
        let data = flags.data.clone().or(file.data);
        let dgp = flags.dgp.or(file.dgp);
        let source = match (data, dgp) {
            (Some(_), Some(_)) => return Err(Error::ConfigError("give either a data file or a DGP, not both".into())),
            (None, None) => return Err(Error::ConfigError("no data source: pass --data or --dgp".into())),
            (Some(path), None) => {
                if command == Command::Simulate {
                    return Err(Error::ConfigError("simulate needs --dgp".into()));
                }
                let schema = file.schema.unwrap_or_default();
                let defaults = Schema::default();
                DataSource::File {
                    path,
                    asset: schema.asset.unwrap_or(defaults.asset),
                    period: schema.period.unwrap_or(defaults.period),
                    ret: schema.ret.unwrap_or(defaults.ret),
                }
            }
            (None, Some(d)) => {
                if !(1..=3).contains(&d) {
                    return Err(Error::ConfigError(format!("dgp must be 1, 2 or 3, got {d}")));
                }
                DataSource::Simulated {
                    dgp: d,
                    n: flags.n.or(file.n).unwrap_or(50),
                    t: flags.t.or(file.t).unwrap_or(50),
                }
            }
        };
        let simulated = matches!(source, DataSource::Simulated { .. });
        let design_file = file.design.unwrap_or_default();
        let design = ResolvedDesign {
            intercept: !flags.no_intercept && design_file.intercept.unwrap_or(true),
            raw_columns: flags.columns.clone().or(design_file.raw_columns),
            rank_transform: flags.rank || design_file.rank_transform.unwrap_or(false),
            spline_columns: flags.splines.clone().or(design_file.spline_columns).unwrap_or_default(),
        };
        let family = match flags.family.clone().or(file.family) {
            Some(f) => f,
            None => match &source {
                DataSource::Simulated { dgp, .. } => {
                    format!("{}", dgp.to_string().parse::<Dgp>()?.default_family().kind)
                }
                DataSource::File { .. } => "unconstrained".into(),
            },
        };
        let grid = match flags.grid.clone().map(GridSetting::Preset).or(file.grid) {
            Some(g) => parse_grid(&g)?,
            None if simulated => simulation_grid(),
            None => empirical_grid(),
        };
        let config = RunConfig {
            command,
            source,
            design,
            family,
            zero_alpha: flags.zero_alpha || file.zero_alpha.unwrap_or(false),
            lambda_c: flags.lambda_c.or(file.lambda_c),
            delta: flags.delta.or(file.delta),
            cv: flags.cv || file.cv.unwrap_or(false),
            folds: flags.folds.or(file.folds).unwrap_or(5),
            grid,
            warm_start: !flags.no_warm_start && file.warm_start.unwrap_or(true),
            reps: flags.reps.or(file.reps).unwrap_or(100),
            burn_in: flags.burn_in.or(file.burn_in),
            k: flags.k.clone().or(file.k).unwrap_or_else(|| (1..=5).collect()),
            cv_each_period: flags.cv_each_period || file.cv_each_period.unwrap_or(false),
            sweep: flags.sweep || file.sweep.unwrap_or(false),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("cfm-out")),
            tol: flags.tol.or(file.tol).unwrap_or(1e-5),
            max_iter: flags.max_iter.or(file.max_iter).unwrap_or(5000),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let kind: FamilyKind = self.family.parse()?;
        let family = ModelFamily::new(kind).with_zero_alpha(self.zero_alpha);
        if !self.cv && self.lambda_c.is_none() && self.command != Command::Cv {
            return Err(Error::ConfigError("pass --lambda-c or --cv".into()));
        }
        if let Some(c) = self.lambda_c {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::ConfigError(format!("lambda-c must be finite and nonnegative, got {c}")));
            }
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0) {
                return Err(Error::ConfigError(format!("delta must be nonnegative, got {d}")));
            }
        }
        if self.folds < 2 {
            return Err(Error::ConfigError("need at least 2 folds".into()));
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[1] <= w[0]) || self.grid.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::ConfigError("grid must be nonempty, ascending and nonnegative".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::ConfigError("tol must be positive and max-iter at least 1".into()));
        }
        if self.reps == 0 {
            return Err(Error::ConfigError("reps must be at least 1".into()));
        }
        if self.command == Command::Evaluate && self.k.is_empty() {
            return Err(Error::ConfigError("evaluate needs at least one k".into()));
        }
        if let Some(b) = self.burn_in {
            if b < 2 {
                return Err(Error::ConfigError("burn-in must be at least 2".into()));
            }
        }
        if let DataSource::File { .. } = self.source {
            self.design.to_spec(&[]).validate(family).or_else(|e| {
                // an unspecified column list is only known after loading
                if self.design.raw_columns.is_none() { Ok(()) } else { Err(e) }
            })?;
        } else if let DataSource::Simulated { n, t, .. } = self.source {
            if n < 2 || t < 2 {
                return Err(Error::ConfigError("n and t must be at least 2".into()));
            }
        }
        Ok(())
    }

    pub fn model_family(&self) -> Result<ModelFamily> {
        Ok(ModelFamily::new(self.family.parse()?).with_zero_alpha(self.zero_alpha))
    }
}
