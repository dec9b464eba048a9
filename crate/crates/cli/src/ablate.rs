//! `ablate`: the full model against one variant per requested switch.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use jigsaw_core::data::{corrupt_house, read_jsonl, House};
use jigsaw_core::inference::EvalReport;
use jigsaw_core::training::{TrainConfig, Trainer};
use serde::Serialize;

use crate::config::FileConfig;
use crate::{evaluate_parallel, summary_table, CliResult, EvalFlags, TrainFlags};

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    /// Evaluation houses (defaults to the training set).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Directory for per-variant runs and the combined table.
    #[arg(short, long)]
    out: PathBuf,
    /// Add a variant without room-level self-attention.
    #[arg(long)]
    no_rsa: bool,
    /// Add a variant without global self-attention.
    #[arg(long)]
    no_gsa: bool,
    /// Add a variant trained without the door-matching loss.
    #[arg(long)]
    no_match_loss: bool,
    /// Add a variant whose train and test rooms carry no type.
    #[arg(long)]
    drop_types: bool,
    /// Add a variant whose train and test houses carry no doors.
    #[arg(long)]
    drop_doors: bool,
    /// Skip the unmodified model.
    #[arg(long)]
    skip_full: bool,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Switches {
    pub rsa: bool,
    pub gsa: bool,
    pub match_loss: bool,
    pub types: bool,
    pub doors: bool,
}

impl Switches {
    const FULL: Switches = Switches {
        rsa: true,
        gsa: true,
        match_loss: true,
        types: true,
        doors: true,
    };
}

fn variants(a: &AblateArgs) -> Vec<(&'static str, Switches)> {
    let full = Switches::FULL;
    let mut v = Vec::new();
    if !a.skip_full {
        v.push(("full", full));
    }
    if a.no_rsa {
        v.push(("no-rsa", Switches { rsa: false, ..full }));
    }
    if a.no_gsa {
        v.push(("no-gsa", Switches { gsa: false, ..full }));
    }
    if a.no_match_loss {
        v.push(("no-match-loss", Switches { match_loss: false, ..full }));
    }
    if a.drop_types {
        v.push(("drop-types", Switches { types: false, ..full }));
    }
    if a.drop_doors {
        v.push(("drop-doors", Switches { doors: false, ..full }));
    }
    v
}

fn corrupt(houses: &[House], s: Switches) -> Vec<House> {
    houses.iter().map(|h| corrupt_house(h, !s.types, !s.doors)).collect()
}

#[derive(Serialize)]
struct Row<'a> {
    variant: &'a str,
    #[serde(flatten)]
    switches: Switches,
    mpe_mean: f64,
    mpe_std: f64,
    ged_mean: Option<f64>,
    ged_std: Option<f64>,
    rotation_accuracy: f64,
}

pub fn run(a: AblateArgs, file: &FileConfig, seed: u64, workers: usize) -> CliResult<()> {
    let train = read_jsonl(&a.train)?;
    let test = match &a.test {
        Some(p) => read_jsonl(p)?,
        None => train.clone(),
    };
    let base = a.flags.apply(file.train.clone(), seed)?;
    let eval_cfg = a.eval.apply(file.eval.clone(), seed)?;
    let list = variants(&a);
    if list.is_empty() {
        return Err(crate::CliError::Usage("nothing to run: all variants skipped".into()));
    }
    fs::create_dir_all(&a.out)?;
    let mut reports: Vec<(&str, Switches, EvalReport)> = Vec::new();
    for (name, s) in list {
        let cfg = TrainConfig {
            use_match_loss: base.use_match_loss && s.match_loss,
            model: jigsaw_core::model::DenoiserConfig {
                use_rsa: base.model.use_rsa && s.rsa,
                use_gsa: base.model.use_gsa && s.gsa,
                ..base.model.clone()
            },
            ..base.clone()
        };
        log::info!("ablation variant `{name}`");
        let train_v = corrupt(&train, s);
        let test_v = corrupt(&test, s);
        let mut trainer = Trainer::new(cfg, Some(a.out.join(name)))?;
        trainer.fit(&train_v, &[])?;
        let report = evaluate_parallel(&trainer.model, &test_v, &eval_cfg, workers)?;
        reports.push((name, s, report));
    }
    let rows: Vec<Row> = reports
        .iter()
        .map(|(name, s, r)| Row {
            variant: name,
            switches: *s,
            mpe_mean: r.summary.mpe_mean,
            mpe_std: r.summary.mpe_std,
            ged_mean: r.summary.ged_mean,
            ged_std: r.summary.ged_std,
            rotation_accuracy: r.summary.rotation_accuracy_mean,
        })
        .collect();
    let mut csv = String::from("variant,rsa,gsa,match_loss,types,doors,mpe_mean,mpe_std,ged_mean,ged_std,rotation_accuracy\n");
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    for r in &rows {
        let s = r.switches;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{:.6}\n",
            r.variant,
            s.rsa,
            s.gsa,
            s.match_loss,
            s.types,
            s.doors,
            r.mpe_mean,
            r.mpe_std,
            na(r.ged_mean),
            na(r.ged_std),
            r.rotation_accuracy
        ));
    }
    fs::write(a.out.join("ablation.csv"), csv)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    let table = summary_table(&reports.iter().map(|(n, _, r)| (*n, r)).collect::<Vec<_>>());
    fs::write(a.out.join("ablation.md"), &table)?;
    println!("{table}");
    Ok(())
}
