use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use super::train::run_experiment;
use crate::config::ExperimentConfig;
use crate::error::{CliError, IoContext, Result};
use crate::output::{create_dir, write_text};

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Experiment config with a `[sweep]` table mapping dotted keys to lists.
    pub config: PathBuf,
    /// Overrides `output.dir`; runs go to `<dir>/run-NNN`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the expanded configs without training.
    #[arg(long)]
    pub dry_run: bool,
}

/// One expanded run: the chosen value of every swept key and the config text.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub values: Vec<(String, toml::Value)>,
    pub table: toml::Table,
}

/// Cartesian product of the `[sweep]` lists, last key varying fastest.
pub fn expand(mut base: toml::Table) -> Result<Vec<SweepRun>> {
    let sweep = match base.remove("sweep") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(CliError::usage("sweep must be a table")),
    };
    let mut axes = Vec::new();
    for (key, v) in sweep {
        let toml::Value::Array(values) = v else {
            return Err(CliError::usage(format!("sweep.{key:?} must be a list")));
        };
        if values.is_empty() {
            return Err(CliError::usage(format!("sweep.{key:?} is empty")));
        }
        axes.push((key, values));
    }
    let mut runs = vec![SweepRun {
        values: Vec::new(),
        table: base,
    }];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(runs.len() * values.len());
        for run in &runs {
            for v in values {
                let mut r = run.clone();
                set_dotted(&mut r.table, key, v.clone())?;
                r.values.push((key.clone(), v.clone()));
                next.push(r);
            }
        }
        runs = next;
    }
    Ok(runs)
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut t = table;
    for p in path {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = match entry {
            toml::Value::Table(inner) => inner,
            _ => return Err(CliError::usage(format!("sweep key {key:?}: {p:?} is not a section"))),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).context(|| format!("reading {}", args.config.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    let runs = expand(table)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let mut configs = Vec::with_capacity(runs.len());
    for run in &runs {
        let text = toml::to_string(&run.table).expect("table serialises");
        configs.push(ExperimentConfig::parse(&text)?);
    }
    let out_root = match &args.out {
        Some(o) => o.clone(),
        None => base.join(&configs[0].output.dir),
    };
    create_dir(&out_root)?;
    let mut index = String::from("run");
    for (k, _) in &runs[0].values {
        write!(index, ",{k}").unwrap();
    }
    index.push_str(",best_epoch,best_val\n");
    for (n, (run, mut cfg)) in runs.iter().zip(configs).enumerate() {
        let dir = out_root.join(format!("run-{n:03}"));
        create_dir(&dir)?;
        if !Path::new(&cfg.data.dir).is_absolute() {
            cfg.data.dir = base.join(&cfg.data.dir).to_string_lossy().into_owned();
        }
        cfg.output.dir = dir.to_string_lossy().into_owned();
        cfg.validate()?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        write!(index, "run-{n:03}").unwrap();
        for (_, v) in &run.values {
            write!(index, ",{}", v.to_string().replace(',', ";")).unwrap();
        }
        if args.dry_run {
            index.push_str(",,\n");
            continue;
        }
        println!("run-{n:03}: {}", describe(&run.values));
        let s = run_experiment(&cfg, true)?;
        let epoch = s.best_epoch.map(|e| e.to_string()).unwrap_or_default();
        writeln!(index, ",{epoch},{}", s.best_val).unwrap();
    }
    write_text(&out_root.join("sweep.csv"), &index)?;
    println!("{} runs under {}", runs.len(), out_root.display());
    Ok(())
}

fn describe(values: &[(String, toml::Value)]) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}")).collect::<Vec<_>>().join(", ")
}
