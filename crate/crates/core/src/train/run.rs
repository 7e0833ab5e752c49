use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::{train_variant, TrainConfig, TrainError, TrainHistory};
use crate::pipeline::PreparedDataset;
use crate::seed::derive_seed;
use crate::zoo::{ModelBundle, VariantId};

pub const SUMMARY_HEADER: &str =
    "variant_id,class,status,params,epochs,best_epoch,train_loss,val_loss,error";

#[derive(Debug)]
pub enum VariantOutcome {
    Trained {
        variant: VariantId,
        bundle: Box<ModelBundle>,
        history: TrainHistory,
        bundle_path: PathBuf,
    },
    Failed {
        variant: VariantId,
        error: String,
    },
}

impl VariantOutcome {
    pub fn variant(&self) -> VariantId {
        match self {
            Self::Trained { variant, .. } | Self::Failed { variant, .. } => *variant,
        }
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub outcomes: Vec<VariantOutcome>,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, VariantOutcome::Failed { .. }))
            .count()
    }

    /// Deterministic summary: no timings.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for o in &self.outcomes {
            let v = o.variant();
            match o {
                VariantOutcome::Trained {
                    bundle, history, ..
                } => {
                    let params: usize = bundle.params.iter().map(|p| p.values.len()).sum();
                    let _ = writeln!(
                        s,
                        "{v},{},ok,{params},{},{},{},{},",
                        v.class().name(),
                        history.epochs.len(),
                        history.best_epoch,
                        bundle.meta.train_loss,
                        bundle.meta.val_loss
                    );
                }
                VariantOutcome::Failed { error, .. } => {
                    let clean = error.replace([',', '\n', '"'], " ");
                    let _ = writeln!(s, "{v},{},failed,,,,,,{clean}", v.class().name());
                }
            }
        }
        s
    }
}

/// Train `variants` in order with per-variant seeds, writing
/// `<id>.bundle`, `<id>.history.csv` and `summary.csv` into `dir`.
/// A failing variant is recorded and the batch continues.
pub fn run_variants_with<F>(
    variants: &[VariantId],
    dataset: &PreparedDataset,
    config: &TrainConfig,
    dir: &Path,
    mut trainer: F,
) -> Result<RunSummary, TrainError>
where
    F: FnMut(
        VariantId,
        &PreparedDataset,
        &TrainConfig,
    ) -> Result<(ModelBundle, TrainHistory), TrainError>,
{
    fs::create_dir_all(dir)?;
    let mut outcomes = Vec::with_capacity(variants.len());
    for &variant in variants {
        let vconfig = TrainConfig {
            seed: derive_seed(config.seed, variant.name()),
            ..config.clone()
        };
        log::info!("training {variant}");
        let outcome = match trainer(variant, dataset, &vconfig) {
            Ok((bundle, history)) => {
                let bundle_path = dir.join(format!("{variant}.bundle"));
                bundle.save(&bundle_path)?;
                history.write_csv(BufWriter::new(File::create(
                    dir.join(format!("{variant}.history.csv")),
                )?))?;
                VariantOutcome::Trained {
                    variant,
                    bundle: Box::new(bundle),
                    history,
                    bundle_path,
                }
            }
            Err(e) => {
                log::warn!("{variant} failed: {e}");
                VariantOutcome::Failed {
                    variant,
                    error: e.to_string(),
                }
            }
        };
        outcomes.push(outcome);
    }
    let summary = RunSummary {
        dir: dir.to_path_buf(),
        outcomes,
    };
    fs::write(dir.join("summary.csv"), summary.to_csv())?;
    Ok(summary)
}

/// Every registered variant, sequentially.
pub fn run_all_variants(
    dataset: &PreparedDataset,
    config: &TrainConfig,
    dir: &Path,
) -> Result<RunSummary, TrainError> {
    run_variants_with(&VariantId::ALL, dataset, config, dir, train_variant)
}
