//! How well a trained manifold reproduces its margins, and scatter plots of
//! 2-D embedding spaces.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SignalDataset;
use crate::error::{Error, Result};
use crate::inference::{argmin, embed_dataset, euclidean_distances, TrainedManifold};
use crate::manifold::MarginMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Distances between the per-state means of the evaluated embeddings.
    pub realized_margins: Vec<Vec<f64>>,
    /// `sqrt(Σ_{i<j} (realized_ij − m_ij)² / Σ_{i<j} m_ij²)`.
    pub margin_stress: f64,
    /// Mean distance of each state's embeddings to that state's mean.
    pub intra_state_spread: Vec<f64>,
    /// Fraction of samples whose nearest reference centroid is their own state.
    pub accuracy: f64,
}

impl EvalReport {
    pub fn mean_spread(&self) -> f64 {
        self.intra_state_spread.iter().sum::<f64>() / self.intra_state_spread.len() as f64
    }
}

pub fn margin_stress(realized: &[Vec<f64>], margins: &MarginMatrix) -> f64 {
    let s = margins.size();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s {
        for j in (i + 1)..s {
            num += (realized[i][j] - margins.get(i, j)).powi(2);
            den += margins.get(i, j).powi(2);
        }
    }
    (num / den).sqrt()
}

/// Report for embeddings (`n × p` rows) with state labels. `centroids` are
/// the reference means used for nearest-centroid accuracy.
pub fn report_from_embeddings(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    margins: &MarginMatrix,
    centroids: &[Vec<f64>],
) -> Result<EvalReport> {
    let s = margins.size();
    let p = embeddings.ncols();
    if labels.len() != embeddings.nrows() {
        return Err(Error::invalid("one label per embedding row is required"));
    }
    if centroids.len() != s {
        return Err(Error::invalid(format!("{} centroids for {s} states", centroids.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::invalid(format!("label {bad} outside the {s}-state manifold")));
    }
    let mut sums = vec![vec![0.0; p]; s];
    let mut counts = vec![0usize; s];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for k in 0..p {
            sums[l][k] += embeddings[(i, k)];
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("state {missing} has no evaluation samples")));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &c)| sum.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let realized: Vec<Vec<f64>> = means.iter().map(|a| euclidean_distances(a, &means)).collect();

    let mut spread = vec![0.0; s];
    let mut correct = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let row: Vec<f64> = embeddings.row(i).iter().copied().collect();
        spread[l] += euclidean_distances(&row, &means[l..=l])[0];
        if argmin(&euclidean_distances(&row, centroids)) == l {
            correct += 1;
        }
    }
    for (v, &c) in spread.iter_mut().zip(&counts) {
        *v /= c as f64;
    }
    Ok(EvalReport {
        margin_stress: margin_stress(&realized, margins),
        realized_margins: realized,
        intra_state_spread: spread,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Evaluates a model on a labelled dataset that covers all of its states.
pub fn evaluate(model: &TrainedManifold, test: &SignalDataset) -> Result<EvalReport> {
    if test.state_count() != model.spec.state_count() {
        return Err(Error::InsufficientData(format!(
            "test set covers {} states, manifold {} has {}",
            test.state_count(),
            model.spec.name,
            model.spec.state_count()
        )));
    }
    let emb = embed_dataset(model, test)?;
    report_from_embeddings(&emb, test.labels(), &model.spec.margins, &model.state_means)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn state_color(state: usize) -> &'static str {
    PALETTE[state % PALETTE.len()]
}

const PLOT: f64 = 600.0;
const PAD: f64 = 20.0;
const LEGEND_WIDTH: f64 = 180.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG scatter of 2-D embeddings: one circle per sample colored by
/// state, a cross at each state's mean, a legend, and equal axis scaling.
pub fn scatter_svg(embeddings: &DMatrix<f64>, labels: &[usize], state_names: &[&str]) -> Result<String> {
    if embeddings.ncols() != 2 {
        return Err(Error::UnsupportedDimension(embeddings.ncols()));
    }
    if labels.len() != embeddings.nrows() {
        return Err(Error::invalid("one label per embedding row is required"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= state_names.len()) {
        return Err(Error::invalid(format!("label {bad} has no state name")));
    }
    let n = embeddings.nrows();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..n {
        for k in 0..2 {
            lo[k] = lo[k].min(embeddings[(i, k)]);
            hi[k] = hi[k].max(embeddings[(i, k)]);
        }
    }
    if n == 0 {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9) * 1.1;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let scale = PLOT / span;
    let to_px = |x: f64, y: f64| {
        (
            PAD + PLOT / 2.0 + (x - center[0]) * scale,
            PAD + PLOT / 2.0 - (y - center[1]) * scale,
        )
    };

    let width = PLOT + 2.0 * PAD + LEGEND_WIDTH;
    let height = PLOT + 2.0 * PAD;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<rect x="{PAD}" y="{PAD}" width="{PLOT}" height="{PLOT}" fill="none" stroke="#cccccc"/>"##
    );

    let _ = writeln!(svg, r#"<g class="samples">"#);
    for i in 0..n {
        let (x, y) = to_px(embeddings[(i, 0)], embeddings[(i, 1)]);
        let _ = writeln!(
            svg,
            r#"<circle cx="{x:.3}" cy="{y:.3}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
            state_color(labels[i])
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g class="means">"#);
    for s in 0..state_names.len() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == s).collect();
        if members.is_empty() {
            continue;
        }
        let mx = members.iter().map(|&i| embeddings[(i, 0)]).sum::<f64>() / members.len() as f64;
        let my = members.iter().map(|&i| embeddings[(i, 1)]).sum::<f64>() / members.len() as f64;
        let (x, y) = to_px(mx, my);
        let a = 7.0;
        let _ = writeln!(
            svg,
            r##"<path d="M{:.3} {:.3} L{:.3} {:.3} M{:.3} {:.3} L{:.3} {:.3}" stroke="#000000" stroke-width="3"/>"##,
            x - a,
            y - a,
            x + a,
            y + a,
            x - a,
            y + a,
            x + a,
            y - a
        );
        let _ = writeln!(
            svg,
            r#"<path class="mean" d="M{:.3} {:.3} L{:.3} {:.3} M{:.3} {:.3} L{:.3} {:.3}" stroke="{}" stroke-width="1.5"/>"#,
            x - a,
            y - a,
            x + a,
            y + a,
            x - a,
            y + a,
            x + a,
            y - a,
            state_color(s)
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="14">"#);
    let lx = PLOT + 2.0 * PAD;
    for (s, name) in state_names.iter().enumerate() {
        let y = PAD + 10.0 + 24.0 * s as f64;
        let _ = writeln!(
            svg,
            r#"<rect class="legend-entry" x="{lx}" y="{y}" width="14" height="14" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            state_color(s),
            lx + 22.0,
            y + 12.0,
            escape(name)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render_scatter_svg(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    state_names: &[&str],
    out: impl AsRef<Path>,
) -> Result<()> {
    let svg = scatter_svg(embeddings, labels, state_names)?;
    fs::write(out.as_ref(), svg).map_err(|e| Error::io(out.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{canonical_margins, classical_mds, Canonical};

    fn layout_embeddings(which: Canonical, per_state: usize) -> (DMatrix<f64>, Vec<usize>, Vec<Vec<f64>>) {
        let margins = canonical_margins(which);
        let centroids = classical_mds(&margins, 2);
        let labels: Vec<usize> = (0..margins.size()).flat_map(|s| std::iter::repeat(s).take(per_state)).collect();
        let emb = DMatrix::from_fn(labels.len(), 2, |i, k| centroids[labels[i]][k]);
        (emb, labels, centroids)
    }

    #[test]
    fn perfect_model_has_zero_stress() {
        let (emb, labels, centroids) = layout_embeddings(Canonical::LoveLinear, 3);
        let report = report_from_embeddings(&emb, &labels, &canonical_margins(Canonical::LoveLinear), &centroids).unwrap();
        assert!(report.margin_stress < 1e-12, "{}", report.margin_stress);
        assert_eq!(report.accuracy, 1.0);
        assert!(report.intra_state_spread.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn collapsed_embeddings_have_unit_stress() {
        let labels = vec![0, 1, 2, 3, 0, 1];
        let emb = DMatrix::from_element(6, 2, 0.7);
        let margins = canonical_margins(Canonical::LoveNonlinear);
        let report = report_from_embeddings(&emb, &labels, &margins, &vec![vec![0.7, 0.7]; 4]).unwrap();
        assert!(report.realized_margins.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(report.margin_stress, 1.0);
    }

    #[test]
    fn stress_is_scale_sensitive() {
        let (emb, labels, centroids) = layout_embeddings(Canonical::LoveLinear, 2);
        let margins = canonical_margins(Canonical::LoveLinear);
        let doubled = &emb * 2.0;
        let report = report_from_embeddings(&doubled, &labels, &margins, &centroids).unwrap();
        assert!((report.margin_stress - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_state_is_insufficient() {
        let emb = DMatrix::zeros(2, 2);
        let margins = canonical_margins(Canonical::LoveLinear);
        let err = report_from_embeddings(&emb, &[0, 1], &margins, &vec![vec![0.0; 2]; 4]).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    fn count(svg: &str, needle: &str) -> usize {
        svg.matches(needle).count()
    }

    #[test]
    fn svg_element_counts() {
        let emb = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 2.0]);
        let svg = scatter_svg(&emb, &[0, 1, 2, 3], &["hate", "dislike", "like", "love"]).unwrap();
        assert_eq!(count(&svg, "<circle"), 4);
        assert_eq!(count(&svg, "class=\"legend-entry\""), 4);
        assert!(svg.contains(">love</text>"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_svg_has_legend_only() {
        let svg = scatter_svg(&DMatrix::zeros(0, 2), &[], &["a", "b"]).unwrap();
        assert_eq!(count(&svg, "<circle"), 0);
        assert_eq!(count(&svg, "class=\"mean\""), 0);
        assert_eq!(count(&svg, "class=\"legend-entry\""), 2);
    }

    #[test]
    fn svg_needs_two_dimensions() {
        let err = scatter_svg(&DMatrix::zeros(3, 3), &[0, 0, 0], &["a"]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDimension(3)));
    }

    #[test]
    fn svg_escapes_names() {
        let svg = scatter_svg(&DMatrix::zeros(1, 2), &[0], &["<fear & loathing>"]).unwrap();
        assert!(svg.contains("&lt;fear &amp; loathing&gt;"));
    }
}
