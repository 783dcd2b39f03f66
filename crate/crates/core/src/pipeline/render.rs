//! Report rendering: markdown summary plus hand-rolled SVG figures.
//!
//! Everything is generated from the [`RunReport`] alone, so a report can be
//! re-rendered from `run_report.json` without touching the other artifacts.
//! All numbers are written with fixed precision and all iteration orders are
//! fixed, which keeps rendered bytes identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PipelineError, RunReport};
use crate::eval::{aggregate_scores, AggregateLevel, ScoreEntry};
use crate::repsim::Dendrogram;

const FONT: &str = "font-family=\"sans-serif\"";
/// Fill colors for per-network bars, cycled when networks outnumber them.
const BAR_COLORS: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];
const CHANCE_LEVEL: f64 = 0.5;

/// Renders `report.md` and the SVG figures into `dir`.
///
/// Requires a non-empty score table; the dendrogram figure is produced only
/// when the report carries a clustering.
pub fn render_report(report: &RunReport, dir: &Path) -> Result<(), PipelineError> {
    if report.scores.entries.is_empty() {
        return Err(PipelineError::EmptyReport(
            "the run report carries no scores; run the evaluation stage first".into(),
        ));
    }
    fs::create_dir_all(dir)?;

    fs::write(dir.join("heatmap.svg"), heatmap_svg(&report.scores.entries))?;
    fs::write(
        dir.join("accuracy.svg"),
        accuracy_svg(&report.scores.entries)?,
    )?;
    if let Some(dendrogram) = &report.dendrogram {
        fs::write(dir.join("dendrogram.svg"), dendrogram_svg(dendrogram))?;
    }
    fs::write(dir.join("report.md"), markdown(report)?)?;
    Ok(())
}

/// First-appearance order of a key over the score entries.
fn distinct<F: Fn(&ScoreEntry) -> &str>(entries: &[ScoreEntry], key: F) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in entries {
        let k = key(e);
        if !out.iter().any(|v| v == k) {
            out.push(k.to_string());
        }
    }
    out
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// P-values switch to scientific notation below 1e-3 to stay readable.
fn fmt_p(p: f64) -> String {
    if p > 0.0 && p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

fn markdown(report: &RunReport) -> Result<String, PipelineError> {
    let agg = |level| {
        aggregate_scores(&report.scores, level).map_err(|e| PipelineError::Stage {
            stage: "render",
            message: e.to_string(),
        })
    };
    let mut md = String::new();
    let p = &report.provenance;
    let _ = writeln!(md, "# Decoding run report\n");
    let _ = writeln!(
        md,
        "Seed {}, toolkit version {}, configuration hash `{}`.\n",
        p.seed, p.toolkit_version, p.config_hash
    );
    let _ = writeln!(
        md,
        "- Subjects ({}): {}",
        p.subjects.len(),
        p.subjects.join(", ")
    );
    let _ = writeln!(
        md,
        "- Embedding sets ({}): {}\n",
        p.embedding_names.len(),
        p.embedding_names.join(", ")
    );

    let _ = writeln!(md, "## Decoding accuracy\n");
    let _ = writeln!(
        md,
        "Pairwise matching accuracy, averaged over subjects and ROIs; chance is {CHANCE_LEVEL:.2}.\n"
    );
    let _ = writeln!(md, "| embedding | tuning mode | accuracy | mse | jobs |");
    let _ = writeln!(md, "|---|---|---:|---:|---:|");
    for e in &agg(AggregateLevel::SubjectMean)?.entries {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            e.embedding_name,
            e.tuning_mode,
            fmt4(e.accuracy),
            fmt4(e.mse),
            e.count
        );
    }
    let _ = writeln!(md, "\n![accuracy by embedding set](accuracy.svg)\n");

    let _ = writeln!(md, "## Accuracy by ROI\n");
    let _ = writeln!(md, "| roi | network | embedding | accuracy | mse |");
    let _ = writeln!(md, "|---|---|---|---:|---:|");
    for e in &agg(AggregateLevel::Roi)?.entries {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            e.roi,
            e.network,
            e.embedding_name,
            fmt4(e.accuracy),
            fmt4(e.mse)
        );
    }
    let _ = writeln!(md, "\n![per-job accuracy heatmap](heatmap.svg)\n");

    let _ = writeln!(md, "## Fine-tuning vs prefix tuning\n");
    if report.significance.is_empty() {
        let _ = writeln!(md, "No paired comparisons were run.\n");
    } else {
        let _ = writeln!(
            md,
            "Paired two-sided t-test of finetune minus prefix accuracy over \
             (subject, ROI) cells, Bonferroni-corrected across {} task(s).\n",
            report.significance.len()
        );
        let _ = writeln!(md, "| task | t | df | p | p adjusted | significant |");
        let _ = writeln!(md, "|---|---:|---:|---:|---:|---|");
        for s in &report.significance {
            let r = &s.result;
            let _ = writeln!(
                md,
                "| {} | {:.3} | {} | {} | {} | {} |",
                s.task,
                r.t_statistic,
                r.degrees_of_freedom,
                fmt_p(r.p_value),
                fmt_p(r.p_adjusted),
                if r.significant { "yes" } else { "no" }
            );
        }
        let _ = writeln!(md);
    }

    let _ = writeln!(md, "## Representational similarity\n");
    match &report.rep_correlations {
        None => {
            let _ = writeln!(md, "Not computed.\n");
        }
        Some(corr) => {
            let _ = writeln!(md, "Correlation between embedding sets:\n");
            let _ = write!(md, "| |");
            for name in &corr.names {
                let _ = write!(md, " {name} |");
            }
            let _ = writeln!(md);
            let _ = write!(md, "|---|");
            for _ in &corr.names {
                let _ = write!(md, "---:|");
            }
            let _ = writeln!(md);
            for (i, name) in corr.names.iter().enumerate() {
                let _ = write!(md, "| {name} |");
                for j in 0..corr.names.len() {
                    let _ = write!(md, " {} |", fmt4(corr.values.get(i, j)));
                }
                let _ = writeln!(md);
            }
            let _ = writeln!(md);
            if let Some(d) = &report.dendrogram {
                let _ = writeln!(md, "Hierarchical clustering (distance 1 - r):\n");
                let _ = writeln!(md, "```\n{}\n```\n", d.to_newick());
                let _ = writeln!(md, "![dendrogram](dendrogram.svg)\n");
            }
        }
    }
    if let Some(v) = &report.variance {
        let _ = writeln!(md, "### Accuracy vs similarity to the untuned model\n");
        let _ = writeln!(
            md,
            "Linear fit of accuracy on correlation-to-untuned over {} embedding sets: \
             slope {}, intercept {}, r^2 {}.\n",
            v.n_points,
            fmt4(v.slope),
            fmt4(v.intercept),
            fmt4(v.r_squared)
        );
    }

    if !report.skipped.is_empty() {
        let _ = writeln!(md, "## Skipped\n");
        for s in &report.skipped {
            let _ = writeln!(md, "- {s}");
        }
        let _ = writeln!(md);
    }
    Ok(md)
}

/// Minimal SVG builder; every coordinate is written with two decimals.
struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Svg {
        Svg {
            body: String::new(),
            width,
            height,
        }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>"
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dashed: bool) {
        let dash = if dashed {
            " stroke-dasharray=\"4 3\""
        } else {
            ""
        };
        let _ = writeln!(
            self.body,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"{stroke}\" stroke-width=\"1\"{dash}/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"{size:.2}\" {FONT} \
             text-anchor=\"{anchor}\">{}</text>",
            escape(content)
        );
    }

    fn text_rotated(&mut self, x: f64, y: f64, size: f64, angle: f64, content: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"{size:.2}\" {FONT} \
             text-anchor=\"start\" transform=\"rotate({angle:.2} {x:.2} {y:.2})\">{}</text>",
            escape(content)
        );
    }

    fn raw(&mut self, fragment: &str) {
        let _ = writeln!(self.body, "{fragment}");
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.2}\" height=\"{:.2}\" \
             viewBox=\"0 0 {:.2} {:.2}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Diverging blue-white-red scale centered on the chance level.
fn accuracy_color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lo = (33.0, 102.0, 172.0);
    let mid = (247.0, 247.0, 247.0);
    let hi = (178.0, 24.0, 43.0);
    let (a, b, t) = if v < CHANCE_LEVEL {
        (lo, mid, v / CHANCE_LEVEL)
    } else {
        (mid, hi, (v - CHANCE_LEVEL) / (1.0 - CHANCE_LEVEL))
    };
    let channel = |x: f64, y: f64| (x + (y - x) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        channel(a.0, b.0),
        channel(a.1, b.1),
        channel(a.2, b.2)
    )
}

/// Accuracy per (subject x roi, embedding) with row/column labels and a
/// labeled color scale.
fn heatmap_svg(entries: &[ScoreEntry]) -> String {
    let rows: Vec<(String, String)> = {
        let mut out: Vec<(String, String)> = Vec::new();
        for e in entries {
            let key = (e.subject.clone(), e.roi.clone());
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    };
    let cols = distinct(entries, |e| &e.embedding_name);

    let cell_w = 30.0;
    let cell_h = 22.0;
    let row_label_w = 12.0
        + 7.0
            * rows
                .iter()
                .map(|(s, r)| s.len() + r.len() + 1)
                .max()
                .unwrap_or(4) as f64;
    let col_label_h = 14.0 + 6.0 * cols.iter().map(String::len).max().unwrap_or(4) as f64;
    let plot_w = cell_w * cols.len() as f64;
    let plot_h = cell_h * rows.len() as f64;
    let scale_w = 60.0;
    let mut svg = Svg::new(
        row_label_w + plot_w + scale_w + 30.0,
        col_label_h + plot_h + 20.0,
    );

    for (ri, (subject, roi)) in rows.iter().enumerate() {
        let y = col_label_h + ri as f64 * cell_h;
        svg.text(
            row_label_w - 6.0,
            y + cell_h / 2.0 + 4.0,
            11.0,
            "end",
            &format!("{subject} {roi}"),
        );
        for (ci, col) in cols.iter().enumerate() {
            let x = row_label_w + ci as f64 * cell_w;
            let accuracy = entries
                .iter()
                .find(|e| &e.subject == subject && &e.roi == roi && &e.embedding_name == col)
                .map(|e| e.accuracy);
            match accuracy {
                Some(a) => svg.rect(x, y, cell_w - 1.0, cell_h - 1.0, &accuracy_color(a)),
                None => svg.rect(x, y, cell_w - 1.0, cell_h - 1.0, "#dddddd"),
            }
        }
    }
    for (ci, col) in cols.iter().enumerate() {
        let x = row_label_w + ci as f64 * cell_w + cell_w / 2.0;
        svg.text_rotated(x, col_label_h - 6.0, 11.0, -60.0, col);
    }

    // Color scale: a labeled gradient bar from 0 at the bottom to 1 on top.
    let bar_x = row_label_w + plot_w + 24.0;
    let bar_h = plot_h.max(80.0);
    svg.raw(
        "<defs><linearGradient id=\"scale\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">\
         <stop offset=\"0%\" stop-color=\"#2166ac\"/>\
         <stop offset=\"50%\" stop-color=\"#f7f7f7\"/>\
         <stop offset=\"100%\" stop-color=\"#b2182b\"/></linearGradient></defs>",
    );
    svg.raw(&format!(
        "<rect x=\"{bar_x:.2}\" y=\"{:.2}\" width=\"14\" height=\"{bar_h:.2}\" \
         fill=\"url(#scale)\" stroke=\"#333333\"/>",
        col_label_h
    ));
    for (frac, label) in [(0.0, "1.00"), (0.5, "0.50"), (1.0, "0.00")] {
        let y = col_label_h + frac * bar_h;
        svg.text(bar_x + 18.0, y + 4.0, 10.0, "start", label);
    }
    svg.text(bar_x, col_label_h - 8.0, 10.0, "start", "accuracy");
    svg.finish()
}

/// Mean accuracy per embedding set, one bar per network, with a dashed
/// chance line at 0.50.
fn accuracy_svg(entries: &[ScoreEntry]) -> Result<String, PipelineError> {
    let embeddings = distinct(entries, |e| &e.embedding_name);
    let networks = distinct(entries, |e| &e.network);

    let margin_left = 46.0;
    let margin_top = 18.0 + 14.0 * networks.len() as f64;
    let margin_bottom = 16.0 + 6.0 * embeddings.iter().map(String::len).max().unwrap_or(4) as f64;
    let bar_w = 18.0;
    let group_gap = 14.0;
    let group_w = bar_w * networks.len() as f64 + group_gap;
    let plot_w = group_w * embeddings.len() as f64;
    let plot_h = 180.0;
    let mut svg = Svg::new(
        margin_left + plot_w + 20.0,
        margin_top + plot_h + margin_bottom,
    );

    let y_of = |v: f64| margin_top + plot_h * (1.0 - v);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(tick);
        svg.line(margin_left - 4.0, y, margin_left, y, "#333333", false);
        svg.text(
            margin_left - 8.0,
            y + 4.0,
            10.0,
            "end",
            &format!("{tick:.2}"),
        );
    }
    svg.line(
        margin_left,
        margin_top,
        margin_left,
        margin_top + plot_h,
        "#333333",
        false,
    );
    svg.line(
        margin_left,
        margin_top + plot_h,
        margin_left + plot_w,
        margin_top + plot_h,
        "#333333",
        false,
    );

    for (gi, embedding) in embeddings.iter().enumerate() {
        let group_x = margin_left + gi as f64 * group_w + group_gap / 2.0;
        for (ni, network) in networks.iter().enumerate() {
            let members: Vec<f64> = entries
                .iter()
                .filter(|e| &e.embedding_name == embedding && &e.network == network)
                .map(|e| e.accuracy)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            let x = group_x + ni as f64 * bar_w;
            svg.rect(
                x,
                y_of(mean),
                bar_w - 2.0,
                plot_h * mean,
                BAR_COLORS[ni % BAR_COLORS.len()],
            );
        }
        svg.text_rotated(
            group_x + 2.0,
            margin_top + plot_h + 12.0,
            10.0,
            45.0,
            embedding,
        );
    }

    let chance_y = y_of(CHANCE_LEVEL);
    svg.line(
        margin_left,
        chance_y,
        margin_left + plot_w,
        chance_y,
        "#555555",
        true,
    );
    svg.text(
        margin_left + plot_w + 4.0,
        chance_y + 4.0,
        10.0,
        "start",
        "chance",
    );

    for (ni, network) in networks.iter().enumerate() {
        let y = 12.0 + 14.0 * ni as f64;
        svg.rect(
            margin_left,
            y - 9.0,
            10.0,
            10.0,
            BAR_COLORS[ni % BAR_COLORS.len()],
        );
        svg.text(margin_left + 14.0, y, 10.0, "start", network);
    }
    svg.text(10.0, margin_top - 6.0, 10.0, "start", "accuracy");
    Ok(svg.finish())
}

/// Dendrogram drawn to scale: leaf joints sit at their merge distance.
fn dendrogram_svg(dendrogram: &Dendrogram) -> String {
    let k = dendrogram.leaf_count();
    let order = dendrogram.leaf_order();
    let max_height = dendrogram
        .merges
        .iter()
        .map(|m| m.height)
        .fold(0.0f64, f64::max)
        .max(1e-9);

    let label_w = 12.0
        + 7.0
            * dendrogram
                .leaf_names
                .iter()
                .map(String::len)
                .max()
                .unwrap_or(4) as f64;
    let row_h = 24.0;
    let plot_w = 260.0;
    let plot_h = row_h * k as f64;
    let margin_top = 12.0;
    let axis_h = 34.0;
    let mut svg = Svg::new(label_w + plot_w + 20.0, margin_top + plot_h + axis_h);

    let x_of = |h: f64| label_w + plot_w * (h / max_height);
    // Position of every node: leaves in display order, merges at their
    // children's midpoint.
    let mut pos: Vec<(f64, f64)> = vec![(0.0, 0.0); 2 * k - 1];
    for (slot, &leaf) in order.iter().enumerate() {
        let y = margin_top + row_h * (slot as f64 + 0.5);
        pos[leaf] = (x_of(0.0), y);
        svg.text(
            label_w - 6.0,
            y + 4.0,
            11.0,
            "end",
            &dendrogram.leaf_names[leaf],
        );
    }
    for (mi, merge) in dendrogram.merges.iter().enumerate() {
        let (x1, y1) = pos[merge.left];
        let (x2, y2) = pos[merge.right];
        let xm = x_of(merge.height);
        svg.line(x1, y1, xm, y1, "#333333", false);
        svg.line(x2, y2, xm, y2, "#333333", false);
        svg.line(xm, y1, xm, y2, "#333333", false);
        pos[k + mi] = (xm, (y1 + y2) / 2.0);
    }

    let axis_y = margin_top + plot_h + 10.0;
    svg.line(label_w, axis_y, label_w + plot_w, axis_y, "#333333", false);
    for frac in [0.0, 0.5, 1.0] {
        let x = label_w + plot_w * frac;
        svg.line(x, axis_y, x, axis_y + 4.0, "#333333", false);
        svg.text(
            x,
            axis_y + 16.0,
            10.0,
            "middle",
            &format!("{:.2}", max_height * frac),
        );
    }
    svg.text(
        label_w + plot_w / 2.0,
        axis_y + 30.0,
        10.0,
        "middle",
        "distance (1 - r)",
    );
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ScoreTable;
    use crate::pipeline::Provenance;

    fn entry(subject: &str, roi: &str, embedding: &str, accuracy: f64) -> ScoreEntry {
        ScoreEntry {
            subject: subject.into(),
            roi: roi.into(),
            network: if roi < "roi-3" { "net-a" } else { "net-b" }.into(),
            embedding_name: embedding.into(),
            tuning_mode: "none".into(),
            accuracy,
            mse: 0.5,
            count: 1,
        }
    }

    fn toy_report() -> RunReport {
        let mut entries = Vec::new();
        for subject in ["s01", "s02"] {
            for roi in ["roi-1", "roi-3"] {
                for (e, a) in [("truth", 0.95), ("untuned", 0.55)] {
                    entries.push(entry(subject, roi, e, a));
                }
            }
        }
        RunReport {
            provenance: Provenance {
                config_hash: "00".repeat(32),
                seed: 3,
                toolkit_version: "test".into(),
                subjects: vec!["s01".into(), "s02".into()],
                embedding_names: vec!["truth".into(), "untuned".into()],
            },
            scores: ScoreTable::new(entries).unwrap(),
            matches: Vec::new(),
            significance: Vec::new(),
            rep_correlations: None,
            dendrogram: None,
            variance: None,
            skipped: vec!["rsa: example reason".into()],
        }
    }

    #[test]
    fn report_files_carry_the_table_values() {
        let dir = tempfile::tempdir().unwrap();
        render_report(&toy_report(), dir.path()).unwrap();

        let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(
            md.contains("| truth | none | 0.9500 | 0.5000 | 4 |"),
            "{md}"
        );
        assert!(md.contains("chance is 0.50"), "{md}");
        assert!(md.contains("- rsa: example reason"), "{md}");
        assert!(md.contains("No paired comparisons were run."), "{md}");

        let heatmap = fs::read_to_string(dir.path().join("heatmap.svg")).unwrap();
        assert!(heatmap.contains("s01 roi-1"), "{heatmap}");
        assert!(heatmap.contains("accuracy"), "{heatmap}");
        assert!(heatmap.contains(&accuracy_color(0.95)), "{heatmap}");

        let bars = fs::read_to_string(dir.path().join("accuracy.svg")).unwrap();
        assert!(bars.contains("chance"), "{bars}");
        assert!(bars.contains("net-a"), "{bars}");
        assert!(!dir.path().join("dendrogram.svg").exists());
    }

    #[test]
    fn empty_scores_cannot_render() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = toy_report();
        report.scores = ScoreTable::default();
        assert!(matches!(
            render_report(&report, dir.path()),
            Err(PipelineError::EmptyReport(_))
        ));
    }

    #[test]
    fn color_scale_is_anchored_at_chance() {
        assert_eq!(accuracy_color(0.5), "#f7f7f7");
        assert_eq!(accuracy_color(0.0), "#2166ac");
        assert_eq!(accuracy_color(1.0), "#b2182b");
        assert_ne!(accuracy_color(0.4), accuracy_color(0.6));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        render_report(&toy_report(), a.path()).unwrap();
        render_report(&toy_report(), b.path()).unwrap();
        for file in ["report.md", "heatmap.svg", "accuracy.svg"] {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap(),
                "{file}"
            );
        }
    }
}
