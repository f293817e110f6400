//! Scatter plots of 2D samples over the mixture modes.

use std::fmt::Write as _;
use std::path::Path;

use advdmd::flowmatch::MixtureTarget;
use advdmd::{Error, Result};
use ndarray::ArrayView2;

const SIZE: f64 = 480.0;
const DOT: f64 = 1.6;

fn color(c: usize, n: usize) -> String {
    format!("hsl({},70%,45%)", (360 * c) / n.max(1))
}

/// Renders the SVG document as a string. Modes are outlined circles of
/// radius 3 std; samples are dots coloured by condition.
pub fn scatter_svg(samples: ArrayView2<f64>, cond: &[usize], target: &MixtureTarget) -> Result<String> {
    if target.dim() != 2 || (samples.nrows() > 0 && samples.ncols() != 2) {
        return Err(Error::Shape(format!(
            "scatter plots need 2D data, got samples of width {} and a {}-D target",
            samples.ncols(),
            target.dim()
        )));
    }
    if cond.len() != samples.nrows() {
        return Err(Error::Shape(format!("{} conditions for {} samples", cond.len(), samples.nrows())));
    }
    let reach = target.means.iter().map(|m| m[0].abs().max(m[1].abs())).fold(0.0, f64::max);
    let half = reach + 6.0 * target.std + 0.5;
    let scale = SIZE / (2.0 * half);
    let px = |x: f64| (x + half) * scale;
    let py = |y: f64| (half - y) * scale;
    let n = target.n_components();

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<g fill=\"none\" stroke-width=\"1.5\">");
    for (k, m) in target.means.iter().enumerate() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" stroke=\"{}\"/>",
            px(m[0]),
            py(m[1]),
            3.0 * target.std * scale,
            color(k, n)
        );
    }
    s.push_str("</g>\n<g fill-opacity=\"0.6\">\n");
    for (row, &c) in samples.rows().into_iter().zip(cond) {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{DOT}\" fill=\"{}\"/>", px(row[0]), py(row[1]), color(c, n));
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn emit_scatter_svg(samples: ArrayView2<f64>, cond: &[usize], target: &MixtureTarget, path: &Path) -> Result<()> {
    std::fs::write(path, scatter_svg(samples, cond, target)?)?;
    Ok(())
}
