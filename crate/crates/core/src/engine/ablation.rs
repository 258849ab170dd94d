//! The fixed variant-by-k comparison grid.

use std::fmt::Write as _;
use std::path::Path;

use super::config::Config;
use super::data::Splits;
use super::eval::{evaluate, EvalReport};
use super::formats::write_file;
use super::train::{train, TrainOptions};
use super::checkpoint::TrainState;
use crate::error::Result;
use crate::frae::EmbeddingVariant;
use crate::metric::Metric;

pub const GRID_K: [usize; 3] = [1, 3, 5];

/// One row of the grid: an embedding paired with a similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub embedding: EmbeddingVariant,
    pub metric: Metric,
}

pub const VARIANTS: [AblationVariant; 5] = [
    AblationVariant {
        name: "NDPNet",
        embedding: EmbeddingVariant::Frae,
        metric: Metric::NdpAbsInner,
    },
    AblationVariant {
        name: "Conv-64F+NDP-SM",
        embedding: EmbeddingVariant::Conv64f,
        metric: Metric::NdpAbsInner,
    },
    AblationVariant {
        name: "FRaENet",
        embedding: EmbeddingVariant::Frae,
        metric: Metric::RawAbsInner,
    },
    AblationVariant {
        name: "NDPNet_Cos",
        embedding: EmbeddingVariant::Frae,
        metric: Metric::Cosine,
    },
    AblationVariant {
        name: "GK_FRaENet",
        embedding: EmbeddingVariant::Frae,
        metric: Metric::GaussianKernel,
    },
];

impl AblationVariant {
    /// `base` with this variant's embedding, metric and `k` swapped in.
    pub fn config(&self, base: &Config, k: usize) -> Config {
        let mut c = base.clone();
        c.model.embedding = self.embedding;
        c.model.metric = self.metric;
        c.model.k = k;
        c
    }

    /// Directory-safe cell name.
    pub fn slug(&self, k: usize) -> String {
        let name: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        format!("{name}_k{k}")
    }
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: AblationVariant,
    pub k: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, name: &str, k: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant.name == name && c.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,k,mean,half_width,episodes,final_loss\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.variant.name, c.k, c.report.mean, c.report.half_width, c.report.episodes, c.final_loss
            );
        }
        out
    }

    /// Variants down, k across, accuracy in percent as `mean ± half-width`.
    pub fn to_table(&self) -> String {
        let fmt = |c: Option<&AblationCell>| match c {
            Some(c) => format!("{:.2} ± {:.2}", 100.0 * c.report.mean, 100.0 * c.report.half_width),
            None => "-".to_string(),
        };
        let mut rows = vec![std::iter::once("variant".to_string())
            .chain(GRID_K.iter().map(|k| format!("k={k}")))
            .collect::<Vec<_>>()];
        for v in &VARIANTS {
            let mut row = vec![v.name.to_string()];
            row.extend(GRID_K.iter().map(|&k| fmt(self.cell(v.name, k))));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| {
                    let pad = " ".repeat(w - s.chars().count());
                    if i == 0 { format!("{s}{pad}") } else { format!("{pad}{s}") }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if n == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}

/// Trains and tests every cell of the grid from `base`. All cells share the
/// seed, so they see the same training and test episodes. With `out_dir` set
/// each cell writes its log and checkpoints under its own subdirectory and the
/// grid is written as `ablation.csv` and `ablation.txt`.
pub fn run_ablation(
    base: &Config,
    data: &Splits,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&AblationCell),
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for variant in VARIANTS {
        for k in GRID_K {
            let config = variant.config(base, k);
            config.validate()?;
            let cell_dir = out_dir.map(|d| d.join(variant.slug(k)));
            if let Some(dir) = &cell_dir {
                write_file(&dir.join("config.toml"), config.to_toml().as_bytes())?;
            }
            let mut options = TrainOptions {
                out_dir: cell_dir,
                ..Default::default()
            };
            let outcome = train(&config, data, TrainState::new(&config)?, &mut options)?;
            let final_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            let mut model = outcome.state.model;
            let eval = evaluate(
                &mut model,
                &data.test,
                config.eval.episodes,
                config.episode.eval_shape(),
                &config.augment,
                config.seed,
            )?;
            let cell = AblationCell {
                variant,
                k,
                final_loss,
                report: eval,
            };
            progress(&cell);
            report.cells.push(cell);
        }
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join("ablation.csv"), report.to_csv().as_bytes())?;
        write_file(&dir.join("ablation.txt"), report.to_table().as_bytes())?;
    }
    Ok(report)
}
