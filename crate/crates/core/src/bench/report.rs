use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelState};

use super::protocol::{AblationMatrix, ProtocolOutput, Summary};

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub u: usize,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub seed: u64,
}

impl From<&Summary> for SummaryRow {
    fn from(s: &Summary) -> Self {
        Self {
            variant: s.variant.name().to_string(),
            n: s.spec.n,
            k: s.spec.k,
            t: s.spec.t,
            u: s.spec.u,
            episodes: s.episodes,
            mean_acc: s.mean_acc,
            ci95: s.ci95,
            seed: s.seed,
        }
    }
}

/// One line of `episodes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode_index: usize,
    pub variant: String,
    pub accuracy: f64,
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Plain-text table: one row per variant, `mean ± ci95` in percent.
pub fn format_table(summaries: &[Summary], head: HeadKind) -> String {
    let Some(first) = summaries.first() else {
        return String::new();
    };
    let col = format!("{}-way {}-shot", first.spec.n, first.spec.k);
    let name_w = summaries
        .iter()
        .map(|s| s.variant.name().len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let cells: Vec<String> = summaries
        .iter()
        .map(|s| format!("{:.2} ± {:.2}", s.mean_acc, s.ci95))
        .collect();
    let cell_w = cells.iter().map(|c| c.chars().count()).max().unwrap_or(0).max(col.len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_w$}  {:<8}  {:>cell_w$}", "Method", "Head", col);
    let _ = writeln!(out, "{}", "-".repeat(name_w + 2 + 8 + 2 + cell_w));
    for (s, c) in summaries.iter().zip(&cells) {
        let pad = cell_w - c.chars().count();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<8}  {}{c}",
            s.variant.name(),
            head.to_string(),
            " ".repeat(pad)
        );
    }
    let _ = writeln!(
        out,
        "\n{} episodes, seed {}, t={} u={}; ± is the 95% confidence interval of the mean",
        first.episodes, first.seed, first.spec.t, first.spec.u
    );
    out
}

pub fn format_ablation(m: &AblationMatrix) -> String {
    let mut out = String::from("train \\ fine-tune");
    for fb in &m.finetune_blocks {
        let _ = write!(out, "  {:>15}", fb);
    }
    out.push('\n');
    for (tb, row) in m.train_blocks.iter().zip(&m.cells) {
        let _ = write!(out, "{:<17}", tb);
        for s in row {
            let _ = write!(out, "  {:>15}", format!("{:.2} ± {:.2}", s.mean_acc, s.ci95));
        }
        out.push('\n');
    }
    out
}

/// Files written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub summary: PathBuf,
    pub episodes: PathBuf,
    pub table: PathBuf,
    pub trace: Option<PathBuf>,
}

/// Writes `summary.csv`, `episodes.csv`, `table.txt` and, when traces were recorded,
/// `trace.jsonl` into `dir`.
pub fn write_report(output: &ProtocolOutput, head: HeadKind, dir: &Path) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = dir.join("summary.csv");
    let rows: Vec<SummaryRow> = output.summaries.iter().map(SummaryRow::from).collect();
    write_csv(&rows, &summary)?;

    let episodes = dir.join("episodes.csv");
    let rows: Vec<EpisodeRow> = output
        .records
        .iter()
        .map(|r| EpisodeRow {
            episode_index: r.episode_index,
            variant: r.variant.name().to_string(),
            accuracy: r.accuracy,
        })
        .collect();
    write_csv(&rows, &episodes)?;

    let table = dir.join("table.txt");
    std::fs::write(&table, format_table(&output.summaries, head)).map_err(|e| Error::io(&table, e))?;

    let trace = if output.records.iter().any(|r| !r.trace.is_empty()) {
        let path = dir.join("trace.jsonl");
        let mut text = String::new();
        for r in &output.records {
            for t in &r.trace {
                let line = serde_json::json!({
                    "episode": r.episode_index,
                    "variant": r.variant.name(),
                    "epoch": t.epoch,
                    "loss": t.loss,
                    "pseudo_label_accuracy": t.pseudo_label_accuracy,
                    "query_accuracy": t.query_accuracy,
                    "replaced": t.replaced,
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Some(path)
    } else {
        None
    };
    Ok(ReportPaths {
        summary,
        episodes,
        table,
        trace,
    })
}

/// `id,label,f0..f{d-1}` for every image of `dataset`.
pub fn write_embeddings(model: &ModelState, dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let d = model.backbone().embedding_dim();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("id,label");
    for i in 0..d {
        let _ = write!(header, ",f{i}");
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(256) {
        let feats = model.embed(&dataset.stack(chunk)?)?;
        for (row, &i) in chunk.iter().enumerate() {
            let s = &dataset.samples()[i];
            let mut line = format!("{},{}", s.id, s.label);
            for v in feats.row(row) {
                let _ = write!(line, ",{v}");
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
