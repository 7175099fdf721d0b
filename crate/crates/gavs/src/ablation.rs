//! The ten-row ablation matrix: decoder tuning strategies (a–f), audio
//! fusion versus audio prompting (g–h), then visual adapters (i) and
//! semantic-aware prompts (j) on top.
//!
//! Every cell shares the seed, the data and one pretrained backbone and
//! decoder. A failing cell is recorded and the rest still run.

use std::path::Path;

use gavs_core::data::{DatasetSpec, SceneSample};
use gavs_core::{FusionMode, GavsConfig, ParamStore, TuningStrategy};
use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::pipeline::{self, run_meta};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub key: char,
    pub label: &'static str,
    pub strategy: TuningStrategy,
    pub mode: FusionMode,
    pub visual_adapters: bool,
    pub sap: bool,
}

const fn row(key: char, label: &'static str, strategy: TuningStrategy, mode: FusionMode, visual_adapters: bool, sap: bool) -> AblationRow {
    AblationRow {
        key,
        label,
        strategy,
        mode,
        visual_adapters,
        sap,
    }
}

use FusionMode::{AudioPrompt, AvFusion};
use TuningStrategy::*;

pub const ROWS: [AblationRow; 10] = [
    row('a', "freeze", Freeze, AudioPrompt, false, false),
    row('b', "fine-tune", FineTune, AudioPrompt, false, false),
    row('c', "AV-adapter", AvAdapter, AudioPrompt, false, false),
    row('d', "VA-adapter", VaAdapter, AudioPrompt, false, false),
    row('e', "ColA", Cola, AudioPrompt, false, false),
    row('f', "ColA + AV + VA", ColaAvVa, AudioPrompt, false, false),
    row('g', "AV-fusion", Cola, AvFusion, false, false),
    row('h', "audio-prompt", Cola, AudioPrompt, false, false),
    row('i', "+visual-adapter", Cola, AudioPrompt, true, false),
    row('j', "+SAP", Cola, AudioPrompt, true, true),
];

impl AblationRow {
    pub fn config(&self, base: &GavsConfig) -> GavsConfig {
        let mut cfg = base.clone();
        cfg.decoder.tuning_strategy = self.strategy;
        cfg.decoder.fusion_mode = self.mode;
        cfg.encoder.adapters_enabled = self.visual_adapters;
        cfg.sap.enabled = self.sap;
        cfg
    }
}

/// Rows selected by key letters, e.g. `"aej"`.
pub fn select_rows(keys: &str) -> Result<Vec<AblationRow>> {
    keys.chars()
        .filter(|c| !matches!(c, ',' | ' '))
        .map(|k| {
            ROWS.iter()
                .find(|r| r.key == k)
                .copied()
                .ok_or_else(|| Error::Config(format!("unknown ablation row `{k}` (expected a-j)")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub row: char,
    pub method: &'static str,
    pub strategy: &'static str,
    pub mode: &'static str,
    pub visual_adapters: bool,
    pub sap: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub miou: Option<f64>,
    pub fscore: Option<f64>,
    pub ciou: Option<f64>,
    pub auc: Option<f64>,
    pub error: String,
}

fn run_cell(row: &AblationRow, base: &GavsConfig, dataset: &DatasetSpec, pretrained: &ParamStore, train: &[SceneSample], test: &[SceneSample]) -> Result<CellResult> {
    let cfg = row.config(base);
    let outcome = pipeline::train(&cfg, dataset, train, Some(pretrained))?;
    let eval = pipeline::evaluate(&outcome.model, test, None, run_meta(&cfg, None))?;
    let r = &eval.report;
    Ok(CellResult {
        initial_loss: outcome.log.first().map(|l| l.total),
        final_loss: outcome.log.last().map(|l| l.total),
        miou: Some(r.miou),
        fscore: Some(r.fscore),
        ciou: Some(r.ciou),
        auc: Some(r.auc),
        ..empty_cell(row)
    })
}

fn empty_cell(row: &AblationRow) -> CellResult {
    CellResult {
        row: row.key,
        method: row.label,
        strategy: row.strategy.as_str(),
        mode: row.mode.as_str(),
        visual_adapters: row.visual_adapters,
        sap: row.sap,
        initial_loss: None,
        final_loss: None,
        miou: None,
        fscore: None,
        ciou: None,
        auc: None,
        error: String::new(),
    }
}

/// Trains and scores each row in order.
pub fn run_ablation(
    base: &GavsConfig,
    dataset: &DatasetSpec,
    train: &[SceneSample],
    test: &[SceneSample],
    rows: &[AblationRow],
    mut on_cell: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    let (pre, _) = pipeline::pretrained_model(base, dataset)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let cell = run_cell(row, base, dataset, &pre.store, train, test).unwrap_or_else(|e| {
            log::error!("ablation row {}: {e}", row.key);
            CellResult {
                error: e.to_string(),
                ..empty_cell(row)
            }
        });
        on_cell(&cell);
        out.push(cell);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for c in cells {
        w.serialize(c).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_table() {
        let keys: String = ROWS.iter().map(|r| r.key).collect();
        assert_eq!(keys, "abcdefghij");
        // h repeats e; g differs from h only in how audio enters.
        assert_eq!(ROWS[4].config(&GavsConfig::default()), ROWS[7].config(&GavsConfig::default()));
        assert_eq!(ROWS[6].mode, AvFusion);
        assert!(ROWS[9].sap && ROWS[9].visual_adapters && !ROWS[8].sap);
    }

    #[test]
    fn row_selection() {
        assert_eq!(select_rows("a,e").unwrap(), vec![ROWS[0], ROWS[4]]);
        assert!(select_rows("z").is_err());
    }
}
