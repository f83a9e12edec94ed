//! The strategy comparison: every strategy at every image size and seed.

use std::fmt::Write;

use super::config::ExperimentConfig;
use super::train::{evaluate, train_on};
use crate::decoders::{Strategy, ALL_STRATEGIES};
use crate::error::{ensure, Error, Result};
use crate::fields::CodeSource;
use crate::metrics::MetricsReport;

/// Parses `concat:global`, `film:local`, `cross_attention:tokens`, ...
pub fn parse_strategy(spec: &str) -> Result<(Strategy, CodeSource)> {
    let (s, c) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("strategy '{spec}' is not of the form strategy:code_source")))?;
    let strategy: Strategy = toml::Value::String(s.trim().to_string())
        .try_into()
        .map_err(|_| Error::Config(format!("unknown strategy '{s}'")))?;
    let source: CodeSource = toml::Value::String(c.trim().to_string())
        .try_into()
        .map_err(|_| Error::Config(format!("unknown code source '{c}'")))?;
    Ok((strategy, source))
}

pub fn strategy_spec(strategy: Strategy, source: CodeSource) -> String {
    let name = |v: toml::Value| v.as_str().unwrap_or_default().to_string();
    format!(
        "{}:{}",
        name(toml::Value::try_from(strategy).expect("enum serializes")),
        name(toml::Value::try_from(source).expect("enum serializes"))
    )
}

/// The strategies a comparison runs: the configured list or all seven.
pub fn selected_strategies(config: &ExperimentConfig) -> Result<Vec<(Strategy, CodeSource)>> {
    if config.compare.strategies.is_empty() {
        return Ok(ALL_STRATEGIES.to_vec());
    }
    config.compare.strategies.iter().map(|s| parse_strategy(s)).collect()
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub size: usize,
    pub strategy: Strategy,
    pub code_source: CodeSource,
    pub seed: u64,
    pub steps: usize,
    pub best_val_iou: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub sizes: Vec<usize>,
    pub strategies: Vec<(Strategy, CodeSource)>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
}

/// Median of a non-empty list; the lower of the two middle values for even
/// lengths, so the median of a monotone function of a metric is the function
/// of the median.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub const COMPARE_CSV_HEADER: &str =
    "size,strategy,code_source,seed,params,steps,best_val_iou,aggregate_iou,aggregate_f,mean_iou,mean_f";

impl Comparison {
    pub fn runs_for(&self, size: usize, strategy: Strategy, source: CodeSource) -> impl Iterator<Item = &RunResult> {
        self.runs
            .iter()
            .filter(move |r| r.size == size && r.strategy == strategy && r.code_source == source)
    }

    /// Median aggregate test IoU of one cell.
    pub fn median_iou(&self, size: usize, strategy: Strategy, source: CodeSource) -> Option<f64> {
        let v: Vec<f64> = self.runs_for(size, strategy, source).map(|r| r.test.iou.aggregate).collect();
        (!v.is_empty()).then(|| lower_median(&v))
    }

    /// Per-run rows followed by one `median` row per cell (seed column `median`).
    pub fn csv(&self) -> String {
        let mut s = format!("{COMPARE_CSV_HEADER}\n");
        let row = |s: &mut String, r: &RunResult, seed: &str| {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.size,
                r.strategy.label(),
                r.code_source.label(),
                seed,
                r.test.params,
                r.steps,
                r.best_val_iou,
                r.test.iou.aggregate,
                r.test.f.aggregate,
                r.test.iou.mean,
                r.test.f.mean
            )
            .unwrap();
        };
        for r in &self.runs {
            row(&mut s, r, &r.seed.to_string());
        }
        for &size in &self.sizes {
            for &(st, cs) in &self.strategies {
                let runs: Vec<&RunResult> = self.runs_for(size, st, cs).collect();
                if runs.is_empty() {
                    continue;
                }
                let med = |f: &dyn Fn(&RunResult) -> f64| lower_median(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
                writeln!(
                    s,
                    "{},{},{},median,{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    size,
                    st.label(),
                    cs.label(),
                    runs[0].test.params,
                    med(&|r| r.steps as f64),
                    med(&|r| r.best_val_iou),
                    med(&|r| r.test.iou.aggregate),
                    med(&|r| r.test.f.aggregate),
                    med(&|r| r.test.iou.mean),
                    med(&|r| r.test.f.mean)
                )
                .unwrap();
            }
        }
        s
    }

    /// Table with one row per strategy and `IoU | F-score | Params` per
    /// image size (median aggregate metrics over seeds), followed by the
    /// per-seed IoUs.
    pub fn table(&self) -> String {
        let mut s = String::new();
        write!(s, "{:<18}{:<10}", "Decoder", "Code").unwrap();
        for size in &self.sizes {
            write!(s, "| {:<28}", format!("{size}x{size}")).unwrap();
        }
        writeln!(s).unwrap();
        write!(s, "{:<28}", "").unwrap();
        for _ in &self.sizes {
            write!(s, "| {:<8}{:<9}{:<11}", "IoU", "F-score", "Params").unwrap();
        }
        writeln!(s).unwrap();
        for &(st, cs) in &self.strategies {
            write!(s, "{:<18}{:<10}", st.label(), cs.label()).unwrap();
            for &size in &self.sizes {
                let runs: Vec<&RunResult> = self.runs_for(size, st, cs).collect();
                if runs.is_empty() {
                    write!(s, "| {:<28}", "-").unwrap();
                    continue;
                }
                let iou = lower_median(&runs.iter().map(|r| r.test.iou.aggregate).collect::<Vec<_>>());
                let f = lower_median(&runs.iter().map(|r| r.test.f.aggregate).collect::<Vec<_>>());
                write!(s, "| {:<8.3}{:<9.3}{:<11}", iou, f, format_params(runs[0].test.params)).unwrap();
            }
            writeln!(s).unwrap();
        }
        writeln!(s, "\nper-seed aggregate test IoU (seeds {:?}):", self.seeds).unwrap();
        for &size in &self.sizes {
            for &(st, cs) in &self.strategies {
                let v: Vec<String> = self.runs_for(size, st, cs).map(|r| format!("{:.4}", r.test.iou.aggregate)).collect();
                writeln!(s, "  {size:>4}  {:<18}{:<10}{}", st.label(), cs.label(), v.join(" ")).unwrap();
            }
        }
        s
    }
}

fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}k", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Trains and tests every selected strategy at every configured size and
/// seed. `progress` is called after each run.
pub fn compare(template: &ExperimentConfig, seeds: &[u64], mut progress: impl FnMut(&RunResult)) -> Result<Comparison> {
    ensure!(!seeds.is_empty(), Config, "compare needs at least one seed");
    ensure!(!template.compare.sizes.is_empty(), Config, "compare needs at least one image size");
    let strategies = selected_strategies(template)?;
    let mut runs = Vec::new();
    for &size in &template.compare.sizes {
        for &(strategy, source) in &strategies {
            for &seed in seeds {
                let mut config = template.clone();
                config.model.strategy = strategy;
                config.model.code_source = source;
                config.data.image_size = size;
                config.training.seed = seed;
                config.validate()?;
                let data = config.dataset()?;
                let out = train_on(&config, &data, |_| {})?;
                ensure!(!data.test.is_empty(), Config, "the test split is empty");
                let test = evaluate(&out.best, &data.test)?;
                let r = RunResult {
                    size,
                    strategy,
                    code_source: source,
                    seed,
                    steps: out.steps,
                    best_val_iou: out.best.best_val_iou,
                    test,
                };
                progress(&r);
                runs.push(r);
            }
        }
    }
    Ok(Comparison {
        sizes: template.compare.sizes.clone(),
        strategies,
        seeds: seeds.to_vec(),
        runs,
    })
}
