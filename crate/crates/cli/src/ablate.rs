//! `ablate`: a cross-product sweep with shared seeds and one aggregate CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use moex::model::InsertionPoint;
use moex::normalization::NormKind;

use crate::run::{run_experiment, write_file};
use crate::spec::{parse_insert, parse_scheme, ExchangeKnobs, LossFlag, RunFlags};
use crate::CliError;

#[derive(Args, Clone, Debug)]
pub struct AblateFlags {
    #[command(flatten)]
    pub run: RunFlags,
    /// Loss modes to sweep: plain, moex, smooth, interp-only.
    #[arg(long, default_value = "moex")]
    pub losses: String,
    #[arg(long, default_value = "0.6,0.7,0.8,0.9")]
    pub lambdas: String,
    #[arg(long, default_value = "0.25,0.5,0.75,1.0")]
    pub ps: String,
    #[arg(long, default_value = "pono")]
    pub schemes: String,
    #[arg(long, default_value = "stem")]
    pub inserts: String,
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
}

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const AGGREGATE_HEADER: &str =
    "loss,scheme,insert,lambda,p,seeds,completed,failed,mean_test_err,stderr_test_err,mean_train_loss";

fn list<T>(flag: &str, raw: &str, parse: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).map_err(|e| CliError::Config(format!("{flag}: {e}"))))
        .collect()
}

fn number(s: &str) -> Result<f64, CliError> {
    s.parse().map_err(|_| CliError::Config(format!("`{s}` is not a number")))
}

/// Sample mean and standard error of the mean (`sd / sqrt(n)`, `sd` with
/// `n - 1` in the denominator); the error is 0 for fewer than two values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    loss: LossFlag,
    scheme: Option<NormKind>,
    insert: Option<InsertionPoint>,
    lambda: Option<f64>,
    p: Option<f64>,
}

impl Cell {
    fn label(&self) -> String {
        let mut s = self.loss.to_possible_value().expect("named").get_name().to_string();
        if let Some(k) = self.scheme {
            let _ = write!(s, "_{k}");
        }
        if let Some(i) = self.insert {
            let _ = write!(s, "_{i}");
        }
        if let Some(l) = self.lambda {
            let _ = write!(s, "_l{l}");
        }
        if let Some(p) = self.p {
            let _ = write!(s, "_p{p}");
        }
        s
    }
}

fn cells(flags: &AblateFlags) -> Result<Vec<Cell>, CliError> {
    let losses = list("--losses", &flags.losses, |s| {
        LossFlag::from_str(s, true).map_err(|e| CliError::Config(e))
    })?;
    let lambdas = list("--lambdas", &flags.lambdas, number)?;
    let ps = list("--ps", &flags.ps, number)?;
    let schemes = list("--schemes", &flags.schemes, parse_scheme)?;
    let inserts = list("--inserts", &flags.inserts, parse_insert)?;
    for &v in lambdas.iter().chain(&ps) {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Config(format!("grid value {v} outside [0, 1]")));
        }
    }
    let mut out: Vec<Cell> = Vec::new();
    for &loss in &losses {
        for &scheme in &schemes {
            for &insert in &inserts {
                for &lambda in &lambdas {
                    for &p in &ps {
                        let cell = match loss {
                            LossFlag::Plain => Cell { loss, scheme: None, insert: None, lambda: None, p: None },
                            LossFlag::Smooth => Cell { loss, scheme: None, insert: None, lambda: Some(lambda), p: None },
                            LossFlag::InterpOnly => Cell { loss, scheme: None, insert: None, lambda: Some(lambda), p: Some(p) },
                            LossFlag::Moex => Cell {
                                loss,
                                scheme: Some(scheme),
                                insert: Some(insert),
                                lambda: Some(lambda),
                                p: Some(p),
                            },
                        };
                        if !out.contains(&cell) {
                            out.push(cell);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn cmd_ablate(flags: &AblateFlags) -> Result<(), CliError> {
    let grid = cells(flags)?;
    let seeds = list("--seeds", &flags.seeds, |s| {
        s.parse::<u64>().map_err(|_| CliError::Config(format!("`{s}` is not a seed")))
    })?;
    if grid.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("the ablation grid is empty".into()));
    }
    let defaults = flags.run.knobs().unwrap_or(ExchangeKnobs {
        loss: LossFlag::Moex,
        scheme: NormKind::Pono,
        insert: InsertionPoint::AfterFirstBlock,
        lambda: 0.9,
        p: 0.5,
        mode: moex::ExchangeMode::Both,
    });
    // Flags shared by every cell; the swept knobs come from the grid.
    let mut base = flags.run.clone();
    base.loss = None;
    base.moex_scheme = None;
    base.moex_p = None;
    base.moex_lambda = None;
    base.insert = None;
    let root: PathBuf = flags.run.out_dir();
    fs::create_dir_all(&root).map_err(|e| CliError::Io(root.clone(), e))?;

    let mut csv = String::from(AGGREGATE_HEADER);
    csv.push('\n');
    for cell in &grid {
        let knobs = ExchangeKnobs {
            loss: cell.loss,
            scheme: cell.scheme.unwrap_or(defaults.scheme),
            insert: cell.insert.unwrap_or(defaults.insert),
            lambda: cell.lambda.unwrap_or(defaults.lambda),
            p: cell.p.unwrap_or(defaults.p),
            mode: defaults.mode,
        };
        let mut errs = Vec::new();
        let mut losses = Vec::new();
        let mut failed = 0;
        for &seed in &seeds {
            let out = root.join("cells").join(cell.label()).join(format!("seed{seed}"));
            let result = base.resolve(&knobs, seed, out).and_then(run_experiment);
            match result {
                Ok(r) => {
                    let last = r.history.last().expect("at least one epoch");
                    errs.push(last.test_err);
                    losses.push(last.train_loss);
                }
                Err(e) => {
                    log::error!("cell {} seed {seed} failed: {e}", cell.label());
                    failed += 1;
                }
            }
        }
        let (mean, stderr) = mean_stderr(&errs);
        let (mean_loss, _) = mean_stderr(&losses);
        let opt = |v: Option<String>| v.unwrap_or_default();
        let fmt = |v: f64| if v.is_finite() { format!("{v:.4}") } else { String::new() };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            cell.loss.to_possible_value().expect("named").get_name(),
            opt(cell.scheme.map(|k| k.to_string())),
            opt(cell.insert.map(|i| i.to_string())),
            opt(cell.lambda.map(|l| l.to_string())),
            opt(cell.p.map(|p| p.to_string())),
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            errs.len(),
            failed,
            fmt(mean),
            fmt(stderr),
            fmt(mean_loss),
        );
    }
    let path = root.join(AGGREGATE_FILE);
    write_file(&path, csv.as_bytes())?;
    println!("{} cells x {} seeds; aggregate in {}", grid.len(), seeds.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::mean_stderr;

    #[test]
    fn stderr_of_three() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 4.0]);
        assert!((m - 7.0 / 3.0).abs() < 1e-12);
        let sd = ((1.0f64 - m).powi(2) + (2.0 - m).powi(2) + (4.0 - m).powi(2)).sqrt() / 2f64.sqrt();
        assert!((s - sd / 3f64.sqrt()).abs() < 1e-12);
    }
}
