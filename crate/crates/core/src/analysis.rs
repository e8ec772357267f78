//! Post-hoc analysis: task embeddings from adapted prompts, their pairwise
//! cosine-similarity matrix (text grid and heatmap), and the trainable-
//! parameter report.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{cosine, Matrix, Vector};
use crate::prompts::{
    compose, param_count, vanilla_param_count, ParamCountMode, SharedPrompt, TaskFactors,
};

/// Pairwise cosine similarities between task embeddings.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub task_ids: Vec<String>,
    pub entries: Matrix,
}

/// A task's embedding: compose the decomposition, then average over the
/// prompt rows, leaving one vector of length `d`.
pub fn prompt_embedding(shared: &SharedPrompt, factors: &TaskFactors) -> Result<Vector> {
    let composed = compose(shared, factors)?;
    let (l, d) = composed.shape();
    let mut mean = vec![0.0; d];
    for i in 0..l {
        for (m, &x) in mean.iter_mut().zip(composed.row(i).iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= l as f64;
    }
    Vector::from_vec(mean)
}

/// Cosine similarities between all pairs of task embeddings, ordered by the
/// map's key order. Fails on zero-norm embeddings.
pub fn similarity_matrix(embeddings: &BTreeMap<String, Vector>) -> Result<SimilarityMatrix> {
    if embeddings.len() < 2 {
        return Err(Error::arg(
            "similarity_matrix",
            "need at least two task embeddings",
        ));
    }
    let task_ids: Vec<String> = embeddings.keys().cloned().collect();
    let n = task_ids.len();
    let mut entries = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let c = cosine(&embeddings[&task_ids[i]], &embeddings[&task_ids[j]])?;
            entries.set(i, j, c);
        }
    }
    Ok(SimilarityMatrix { task_ids, entries })
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.task_ids.iter().position(|t| t == a)?;
        let j = self.task_ids.iter().position(|t| t == b)?;
        Some(self.entries.get(i, j))
    }

    /// Text grid: header row of task ids, then one row of fixed-point
    /// values (4 decimals) per task.
    pub fn export_text(&self) -> String {
        let mut out = self.task_ids.join(" ");
        out.push('\n');
        for i in 0..self.task_ids.len() {
            let row: Vec<String> = self
                .entries
                .row(i)
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Binary PPM heatmap (P6), `cell` pixels per matrix entry. The color
    /// map is linear: -1 is blue, 0 is white, +1 is red; the mapping is
    /// documented in a comment inside the file header.
    pub fn export_heatmap_ppm(&self, cell: usize) -> Vec<u8> {
        let n = self.task_ids.len();
        let size = n * cell.max(1);
        let mut out = format!(
            "P6\n# linear color map: value -1 -> (0,0,255), 0 -> (255,255,255), +1 -> (255,0,0)\n{size} {size}\n255\n"
        )
        .into_bytes();
        for py in 0..size {
            for px in 0..size {
                let v = self.entries.get(py / cell.max(1), px / cell.max(1));
                let v = v.clamp(-1.0, 1.0);
                let (r, g, b) = if v >= 0.0 {
                    let t = v;
                    (255, (255.0 * (1.0 - t)) as u8, (255.0 * (1.0 - t)) as u8)
                } else {
                    let t = -v;
                    ((255.0 * (1.0 - t)) as u8, (255.0 * (1.0 - t)) as u8, 255)
                };
                out.extend_from_slice(&[r, g, b]);
            }
        }
        out
    }
}

/// One row of the parameter-efficiency report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EfficiencyRow {
    pub method: String,
    pub params: String,
    pub params_exact: String,
}

/// Trainable-parameter accounting for prompt length `l`, embedding dim `d`,
/// and (for the grouped row) `tau` target tasks.
pub fn efficiency_report(l: u64, d: u64, tau: u64) -> Vec<EfficiencyRow> {
    let vanilla = vanilla_param_count(l, d);
    let single = param_count(l, d, ParamCountMode::SingleTask);
    let grouped = param_count(l, d, ParamCountMode::GroupedPerTask { tau });
    let row = |method: &str, exact: String, k: String| EfficiencyRow {
        method: method.to_string(),
        params: k,
        params_exact: exact,
    };
    vec![
        row(
            "vanilla prompt tuning (l*d)",
            vanilla.to_string(),
            crate::prompts::ParamCount::from_integer(vanilla).format_k(),
        ),
        row(
            "decomposed, single task (l*d + l + d)",
            single.exact_integer().map(|v| v.to_string()).unwrap_or_default(),
            single.format_k(),
        ),
        row(
            &format!("decomposed, grouped per task (l*d/{tau} + l + d)"),
            if let Some(v) = grouped.exact_integer() {
                v.to_string()
            } else {
                format!("{:.1}", grouped.as_f64())
            },
            grouped.format_k(),
        ),
        row(
            "compressed deployment (l*d)",
            vanilla.to_string(),
            crate::prompts::ParamCount::from_integer(vanilla).format_k(),
        ),
    ]
}

/// Renders the report as an aligned text table.
pub fn efficiency_report_text(l: u64, d: u64, tau: u64) -> String {
    let rows = efficiency_report(l, d, tau);
    let mut out = format!("trainable parameters at l={l}, d={d}, tau={tau}\n");
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0);
    for r in rows {
        out.push_str(&format!(
            "{:width$}  {:>12}  {}\n",
            r.method, r.params_exact, r.params
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedding(values: &[f64]) -> Vector {
        Vector::from_vec(values.to_vec()).unwrap()
    }

    #[test]
    fn prompt_embedding_row_mean() {
        let shared = SharedPrompt {
            matrix: Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap(),
        };
        let identity = TaskFactors::identity("t", 2, 2);
        let got = prompt_embedding(&shared, &identity).unwrap();
        assert_eq!(got.as_slice(), &[1.0, 1.0]);

        let single_row = SharedPrompt {
            matrix: Matrix::from_rows(&[&[3.0, -1.0]]).unwrap(),
        };
        let got = prompt_embedding(&single_row, &TaskFactors::identity("t", 1, 2)).unwrap();
        assert_eq!(got.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn similarity_matrix_properties() {
        let mut embeddings = BTreeMap::new();
        embeddings.insert("a".to_string(), embedding(&[1.0, 0.0, 0.0]));
        embeddings.insert("b".to_string(), embedding(&[0.0, 1.0, 0.0]));
        embeddings.insert("c".to_string(), embedding(&[1.0, 1.0, 0.0]));
        let sim = similarity_matrix(&embeddings).unwrap();

        for i in 0..3 {
            assert!((sim.entries.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!((sim.entries.get(i, j) - sim.entries.get(j, i)).abs() < 1e-12);
                assert!(sim.entries.get(i, j) <= 1.0 + 1e-12);
                assert!(sim.entries.get(i, j) >= -1.0 - 1e-12);
            }
        }
        assert!(sim.get("a", "b").unwrap().abs() < 1e-12);
        assert!((sim.get("a", "c").unwrap() - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn similarity_rejects_zero_norm_and_singletons() {
        let mut embeddings = BTreeMap::new();
        embeddings.insert("a".to_string(), embedding(&[1.0, 0.0]));
        assert!(similarity_matrix(&embeddings).is_err());
        embeddings.insert("z".to_string(), embedding(&[0.0, 0.0]));
        assert!(similarity_matrix(&embeddings).is_err());
    }

    #[test]
    fn export_text_layout() {
        let mut embeddings = BTreeMap::new();
        embeddings.insert("a".to_string(), embedding(&[1.0, 0.0]));
        embeddings.insert("b".to_string(), embedding(&[1.0, 0.0]));
        let sim = similarity_matrix(&embeddings).unwrap();
        let text = sim.export_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "a b");
        assert_eq!(lines[1], "1.0000 1.0000");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn heatmap_is_valid_ppm() {
        let mut embeddings = BTreeMap::new();
        embeddings.insert("a".to_string(), embedding(&[1.0, 0.0]));
        embeddings.insert("b".to_string(), embedding(&[-1.0, 0.0]));
        let sim = similarity_matrix(&embeddings).unwrap();
        let ppm = sim.export_heatmap_ppm(8);
        assert!(ppm.starts_with(b"P6\n"));
        let header_end = ppm
            .windows(4)
            .position(|w| w == b"255\n")
            .expect("maxval line")
            + 4;
        assert_eq!(ppm.len() - header_end, 16 * 16 * 3);
    }

    #[test]
    fn efficiency_report_values() {
        let rows = efficiency_report(100, 768, 8);
        assert_eq!(rows[0].params_exact, "76800");
        assert_eq!(rows[0].params, "76.8K");
        assert_eq!(rows[1].params_exact, "77668");
        assert_eq!(rows[1].params, "77.6K");
        assert_eq!(rows[2].params_exact, "10468");
        // compressed deployment always matches vanilla
        assert_eq!(rows[3].params_exact, rows[0].params_exact);

        let desk = efficiency_report(8, 16, 2);
        assert_eq!(desk[0].params_exact, "128");
        assert_eq!(desk[1].params_exact, "152");
        assert_eq!(desk[2].params_exact, "88");
    }

    #[test]
    fn efficiency_report_is_pure() {
        assert_eq!(efficiency_report(8, 16, 2), efficiency_report(8, 16, 2));
    }
}
