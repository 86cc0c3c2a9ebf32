//! Run reports: a versioned TOML document plus flat CSV sidecars for
//! plotting. Timing lives in the final `[timing]` table and is excluded
//! from determinism comparisons.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSection {
    pub wa_label: String,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub group_size: String,
    pub plus_fraction: f64,
    pub allocation: String,
    pub smooth_steps: usize,
    /// Distillation weight; `alpha` echoes the same knob under its other
    /// common name.
    pub lambda: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub lora_rank: usize,
    pub fp_seed: u64,
    pub finetune_seed: u64,
    pub eval_seeds: usize,
    pub planted_outliers: bool,
}

/// Per-layer allocation diagnostics: the kurtosis table, the chosen
/// candidate, and the objective of every candidate in the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub channels: usize,
    pub group_size: usize,
    pub chosen_m: usize,
    pub plus_extra: usize,
    pub promoted: Vec<usize>,
    pub demoted: Vec<usize>,
    pub kurtosis: Vec<f64>,
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingReport {
    pub fp_steps: usize,
    pub fp_loss_first: f64,
    pub fp_loss_last: f64,
    pub fp_curve_csv: String,
    pub finetune_steps: usize,
    pub ft_loss_first: f64,
    pub ft_loss_last: f64,
    pub ft_curve_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub rows_csv: String,
    pub median_trajectory_mse: f64,
    pub median_sqnr_db: f64,
    pub median_mode_coverage: f64,
    pub fp_mode_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SizeReport {
    pub payload_bytes: u64,
    pub total_bytes: u64,
    pub uniform_total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TimingReport {
    pub train_fp_seconds: f64,
    pub calibrate_seconds: f64,
    pub allocate_seconds: f64,
    pub finetune_seconds: f64,
    pub eval_seconds: f64,
}

/// The whole run report. `timing` must stay the last field so the TOML
/// document ends with the `[timing]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub run: RunSection,
    pub layers: Vec<LayerReport>,
    pub training: TrainingReport,
    pub evaluation: EvalReport,
    pub size: SizeReport,
    pub timing: TimingReport,
}

impl RunReport {
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Drop the `[timing]` table for byte-level determinism comparisons.
pub fn strip_timing(report_toml: &str) -> &str {
    match report_toml.find("[timing]") {
        Some(idx) => &report_toml[..idx],
        None => report_toml,
    }
}

/// Write a CSV file: header row, UTF-8, LF line endings.
pub fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> std::io::Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        RunReport {
            report_version: REPORT_VERSION,
            run: RunSection {
                wa_label: "W2A4".into(),
                weight_bits: 2,
                act_bits: 4,
                group_size: "auto".into(),
                plus_fraction: 0.1,
                allocation: "omq".into(),
                smooth_steps: 1,
                lambda: 2.0,
                alpha: 2.0,
                temperature: 1.0,
                lora_rank: 4,
                fp_seed: 100,
                finetune_seed: 200,
                eval_seeds: 10,
                planted_outliers: true,
            },
            layers: vec![LayerReport {
                name: "layer0".into(),
                channels: 4,
                group_size: 1,
                chosen_m: 1,
                plus_extra: 0,
                promoted: vec![2],
                demoted: vec![0],
                kurtosis: vec![1.5, 2.25, 9.875, 3.0],
                objectives: vec![4.5, 2.125, 3.0],
            }],
            training: TrainingReport {
                fp_steps: 10,
                fp_loss_first: 1.5,
                fp_loss_last: 0.25,
                fp_curve_csv: "train_loss.csv".into(),
                finetune_steps: 5,
                ft_loss_first: 0.75,
                ft_loss_last: 0.5,
                ft_curve_csv: "finetune_loss.csv".into(),
            },
            evaluation: EvalReport {
                rows_csv: "eval_seeds.csv".into(),
                median_trajectory_mse: 0.125,
                median_sqnr_db: 12.5,
                median_mode_coverage: 0.875,
                fp_mode_coverage: 0.9921875,
            },
            size: SizeReport {
                payload_bytes: 1440,
                total_bytes: 6081,
                uniform_total_bytes: 6081,
            },
            timing: TimingReport {
                train_fp_seconds: 1.25,
                ..TimingReport::default()
            },
        }
    }

    #[test]
    fn report_roundtrips_without_loss() {
        let report = sample_report();
        let text = report.to_toml_string().unwrap();
        let back = RunReport::from_toml_str(&text).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn timing_is_the_last_table_and_strippable() {
        let report = sample_report();
        let text = report.to_toml_string().unwrap();
        let idx = text.find("[timing]").expect("timing table present");
        assert!(!text[idx..].contains("\n["), "timing must be last");
        let stripped = strip_timing(&text);
        assert!(!stripped.contains("timing"));
        assert!(stripped.contains("[evaluation]"));
    }

    #[test]
    fn csv_has_header_and_lf_endings() {
        let dir = std::env::temp_dir().join(format!("mpqdm-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        write_csv(
            &path,
            &["seed", "value"],
            (0..3).map(|i| vec![i.to_string(), (i * 2).to_string()]),
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "seed,value\n0,0\n1,2\n2,4\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
