//! Seed-level run bookkeeping: one directory per (setting, model, seed),
//! `RUNNING` while training, `DONE` once the record is written. Finished
//! seeds are restored instead of retrained.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mixsup::data::MixedDataset;
use mixsup::metrics::{evaluate, Branch};
use mixsup::model::load_checkpoint;
use mixsup::trainer::{
    aggregate_runs, proposal_retrain, train_with_checkpoint, ModelKind, RunRecord, Summary, TrainConfig,
};

pub const RUNNING: &str = "RUNNING";
pub const DONE: &str = "DONE";

pub const LADDER_CSV_HEADER: &str = "setting,model,top_dsc,top_dsc_std,top_hd95,top_hd95_std,\
bottom_dsc,bottom_dsc_std,bottom_hd95,bottom_hd95_std,failure";

pub struct Workspace<'a> {
    pub dataset: &'a MixedDataset<f32>,
    /// `<output_dir>/<setting>`.
    pub root: PathBuf,
}

/// What a ladder row trains.
#[derive(Clone, Copy, Debug)]
pub enum Job {
    Plain(ModelKind),
    /// Retrain on the serving-branch proposals of a base kind.
    Proposals(ModelKind),
}

impl Job {
    pub fn label(self) -> String {
        match self {
            Job::Plain(k) => k.name().to_string(),
            Job::Proposals(base) => format!("proposal_retrain:{}", base.name()),
        }
    }
}

impl<'a> Workspace<'a> {
    pub fn new(dataset: &'a MixedDataset<f32>, output_dir: &Path) -> Result<Self> {
        let root = output_dir.join(dataset.setting.label());
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        fs::write(root.join("split_manifest.txt"), dataset.manifest())?;
        Ok(Self { dataset, root })
    }

    fn seed_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.root.join(label).join(format!("seed{seed}"))
    }

    /// Trains (or restores) every configured seed of `config.model_kind`.
    pub fn run_kind(&self, config: &TrainConfig) -> Result<Vec<RunRecord<f32>>> {
        let label = config.model_kind.name();
        let records = config
            .seeds
            .iter()
            .map(|&seed| {
                self.run_seed(config, label, seed, |ckpt| {
                    Ok(train_with_checkpoint(self.dataset, config, seed, Some(ckpt))?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_summary(label, &records)?;
        Ok(records)
    }

    /// Base runs of `base`, then one retraining per seed on their proposals.
    pub fn run_proposals(&self, config: &TrainConfig, base: ModelKind) -> Result<Vec<RunRecord<f32>>> {
        let bases = self.run_kind(&config.with_kind(base))?;
        let label = Job::Proposals(base).label();
        let retrain = config.with_kind(ModelKind::ProposalRetrain);
        let records = bases
            .iter()
            .map(|b| {
                self.run_seed(&retrain, &label, b.seed, |_| {
                    Ok(proposal_retrain(self.dataset, b, &retrain, b.seed)?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_summary(&label, &records)?;
        Ok(records)
    }

    pub fn run_job(&self, config: &TrainConfig, job: Job) -> Result<Summary> {
        let records = match job {
            Job::Plain(kind) => self.run_kind(&config.with_kind(kind))?,
            Job::Proposals(base) => self.run_proposals(config, base)?,
        };
        Ok(aggregate_runs(&records)?)
    }

    fn write_summary(&self, label: &str, records: &[RunRecord<f32>]) -> Result<()> {
        let summary = aggregate_runs(records)?;
        fs::write(
            self.root.join(label).join("summary.csv"),
            mixsup::trainer::summary_csv(&[summary]),
        )?;
        Ok(())
    }

    fn run_seed(
        &self,
        config: &TrainConfig,
        label: &str,
        seed: u64,
        train: impl FnOnce(&Path) -> Result<RunRecord<f32>>,
    ) -> Result<RunRecord<f32>> {
        let dir = self.seed_dir(label, seed);
        let expected = TrainConfig {
            seeds: vec![seed],
            ..config.clone()
        };
        if dir.join(DONE).exists() {
            log::info!("{label} seed {seed}: already done, restoring");
            return restore(self.dataset, &dir, &expected);
        }
        if dir.join(RUNNING).exists() {
            log::warn!("{label} seed {seed}: previous attempt was interrupted, retraining");
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(RUNNING), format!("{label} seed {seed}\n"))?;
        let t = Instant::now();
        let record = train(&dir.join("model.ckpt"))?;
        record.save(&dir)?;
        fs::remove_file(dir.join(RUNNING))?;
        fs::write(dir.join(DONE), format!("{label} seed {seed}\n"))?;
        log::info!(
            "{label} seed {seed}: best epoch {} val {:.2} in {:.1}s",
            record.best_epoch,
            record.best_val_dsc,
            t.elapsed().as_secs_f64()
        );
        Ok(record)
    }
}

/// Rebuilds a finished record from its directory. Test metrics are
/// recomputed from the checkpoint, which reproduces them exactly.
fn restore(dataset: &MixedDataset<f32>, dir: &Path, expected: &TrainConfig) -> Result<RunRecord<f32>> {
    let saved = fs::read_to_string(dir.join("config.json"))
        .with_context(|| format!("reading {}", dir.join("config.json").display()))?;
    if saved != serde_json::to_string_pretty(expected)? {
        bail!(
            "{} holds a run with a different configuration; remove it to retrain",
            dir.display()
        );
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("record.json"))?)?;
    let model = load_checkpoint::<f32>(&dir.join("model.ckpt"))?.model;
    let mut test = BTreeMap::new();
    test.insert(Branch::Top, evaluate(&model, Branch::Top, &dataset.test)?);
    if model.is_dual() {
        test.insert(Branch::Bottom, evaluate(&model, Branch::Bottom, &dataset.test)?);
    }
    Ok(RunRecord {
        config: expected.clone(),
        setting: dataset.setting.label(),
        seed: expected.seeds[0],
        epochs: Vec::new(),
        best_epoch: meta["best_epoch"].as_u64().unwrap_or(0) as usize,
        best_val_dsc: meta["best_val_dsc"].as_f64().unwrap_or(f64::NAN),
        model: Some(model),
        test,
        wall_clock_secs: meta["wall_clock_secs"].as_f64().unwrap_or(0.0),
    })
}

pub struct LadderRow {
    pub setting: String,
    pub model: String,
    pub result: std::result::Result<Summary, String>,
}

fn branch_cells(row: &LadderRow, branch: Branch) -> Option<[f64; 4]> {
    let s = row.result.as_ref().ok()?.branches.get(&branch)?;
    Some([s.dsc_mean, s.dsc_std, s.hd95_mean, s.hd95_std])
}

pub fn ladder_csv(rows: &[LadderRow]) -> String {
    let mut out = format!("{LADDER_CSV_HEADER}\n");
    for row in rows {
        let mut line = format!("{},{}", row.setting, row.model);
        for branch in [Branch::Top, Branch::Bottom] {
            match branch_cells(row, branch) {
                Some(v) => v.iter().for_each(|x| {
                    let _ = write!(line, ",{x:.4}");
                }),
                None => line.push_str(",,,,"),
            }
        }
        let failure = row
            .result
            .as_ref()
            .err()
            .map(|e| e.replace([',', '\n'], ";"))
            .unwrap_or_default();
        let _ = writeln!(out, "{line},{failure}");
    }
    out
}

/// Aligned text table; absent branches show `--`.
pub fn ladder_table(rows: &[LadderRow]) -> String {
    let header = ["Setting", "Model", "Top DSC", "Top HD-95", "Bottom DSC", "Bottom HD-95"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in rows {
        let mut line = vec![row.setting.clone(), row.model.clone()];
        if let Err(e) = &row.result {
            line.extend(["failed".to_string(), e.lines().next().unwrap_or("").to_string()]);
            line.extend(["".to_string(), "".to_string()]);
        } else {
            for branch in [Branch::Top, Branch::Bottom] {
                match branch_cells(row, branch) {
                    Some([d, ds, h, hs]) => line.extend([format!("{d:.2} ± {ds:.2}"), format!("{h:.2} ± {hs:.2}")]),
                    None => line.extend(["--".to_string(), "--".to_string()]),
                }
            }
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &cells {
        let padded: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    }
    out
}
