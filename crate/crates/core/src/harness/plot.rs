//! Dependency-free SVG rendering. Output is a pure function of the input
//! data: coordinates are printed with fixed precision and elements appear
//! in input order.

use std::fmt::Write as _;

use nalgebra::DVector;

use super::compare::ErrorTable;
use crate::error::{Error, Result};
use crate::mpc::EpisodeLog;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Affine map from a data box to the plotting area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(
        xs: impl Iterator<Item = f64> + Clone,
        ys: impl Iterator<Item = f64> + Clone,
        equal: bool,
    ) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        };
        let (mut x0, mut x1) = range(&mut xs.clone());
        let (mut y0, mut y1) = range(&mut ys.clone());
        for (lo, hi) in [(&mut x0, &mut x1), (&mut y0, &mut y1)] {
            if !lo.is_finite() {
                (*lo, *hi) = (0.0, 1.0);
            }
            if *hi - *lo < 1e-9 {
                *lo -= 0.5;
                *hi += 0.5;
            }
            let pad = 0.05 * (*hi - *lo);
            *lo -= pad;
            *hi += pad;
        }
        if equal {
            let sx = (x1 - x0) / (WIDTH - 2.0 * MARGIN);
            let sy = (y1 - y0) / (HEIGHT - 2.0 * MARGIN);
            let s = sx.max(sy);
            let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
            let hw = 0.5 * s * (WIDTH - 2.0 * MARGIN);
            let hh = 0.5 * s * (HEIGHT - 2.0 * MARGIN);
            (x0, x1, y0, y1) = (cx - hw, cx + hw, cy - hh, cy + hh);
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn scale_x(&self, len: f64) -> f64 {
        len / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{l:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{:.3}</text>"#,
        b + 14.0,
        f.x0
    );
    let _ = writeln!(
        out,
        r#"<text x="{r:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3}</text>"#,
        b + 14.0,
        f.x1
    );
    let _ = writeln!(
        out,
        r#"<text x="2" y="{b:.1}" font-family="sans-serif" font-size="10">{:.3}</text>"#,
        f.y0
    );
    let _ = writeln!(
        out,
        r#"<text x="2" y="{:.1}" font-family="sans-serif" font-size="10">{:.3}</text>"#,
        t + 4.0,
        f.y1
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 6.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.1}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {:.1})" text-anchor="middle">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

/// Polyline over the finite points; breaks at non-finite values.
fn polyline(out: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, dash: bool, label: &str) {
    let mut d = String::new();
    let mut pen_down = false;
    for &(x, y) in pts {
        if !(x.is_finite() && y.is_finite()) {
            pen_down = false;
            continue;
        }
        let _ = write!(
            d,
            "{}{:.2},{:.2} ",
            if pen_down { "L" } else { "M" },
            f.px(x),
            f.py(y)
        );
        pen_down = true;
    }
    if d.is_empty() {
        return;
    }
    let dash = if dash {
        r#" stroke-dasharray="5,3""#
    } else {
        ""
    };
    let _ = writeln!(
        out,
        r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}><title>{}</title></path>"#,
        d.trim_end(),
        escape(label)
    );
}

fn legend(out: &mut String, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = MARGIN + 12.0 * i as f64;
        let x = WIDTH - MARGIN - 110.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="3" fill="{color}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>"#,
            y - 3.0,
            x + 14.0,
            y,
            escape(label)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn non_empty(log: &EpisodeLog) -> Result<()> {
    if log.steps.is_empty() {
        Err(Error::param("cannot plot an empty log"))
    } else {
        Ok(())
    }
}

/// Reference and executed tip paths in the XY plane with the unsafe disk
/// `d_min` around each obstacle position.
pub fn trajectory_svg(log: &EpisodeLog, obstacles: &[DVector<f64>], d_min: f64) -> Result<String> {
    non_empty(log)?;
    let tip: Vec<(f64, f64)> = log.steps.iter().map(|s| (s.tip[0], s.tip[1])).collect();
    let target: Vec<(f64, f64)> = log
        .steps
        .iter()
        .map(|s| (s.target[0], s.target[1]))
        .collect();
    let xs = tip
        .iter()
        .chain(&target)
        .map(|p| p.0)
        .chain(obstacles.iter().flat_map(|o| [o[0] - d_min, o[0] + d_min]));
    let ys = tip
        .iter()
        .chain(&target)
        .map(|p| p.1)
        .chain(obstacles.iter().flat_map(|o| [o[1] - d_min, o[1] + d_min]));
    let f = Frame::fit(xs, ys, true);
    let mut out = String::new();
    open(&mut out, &format!("tip path ({})", log.kind.as_str()));
    axes(&mut out, &f, "x [m]", "y [m]");
    if !obstacles.is_empty() {
        out.push_str("<g id=\"unsafe\">\n");
        for o in obstacles {
            let _ = writeln!(
                out,
                r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#d62728" fill-opacity="0.25" stroke="#d62728"/>"##,
                f.px(o[0]),
                f.py(o[1]),
                f.scale_x(d_min)
            );
        }
        out.push_str("</g>\n");
    }
    polyline(&mut out, &f, &target, PALETTE[0], true, "reference");
    polyline(&mut out, &f, &tip, PALETTE[2], false, "executed");
    legend(
        &mut out,
        &[("reference", PALETTE[0]), ("executed", PALETTE[2])],
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// `d_min − d` of every collision sphere against time.
pub fn phi_svg(log: &EpisodeLog, dt: f64) -> Result<String> {
    non_empty(log)?;
    let spheres = log.steps[0].link_phi.len();
    let series: Vec<Vec<(f64, f64)>> = (0..spheres)
        .map(|i| {
            log.steps
                .iter()
                .map(|s| (s.t as f64 * dt, s.link_phi[i]))
                .collect()
        })
        .collect();
    let xs = series.iter().flatten().map(|p| p.0);
    let ys = series
        .iter()
        .flatten()
        .map(|p| p.1)
        .chain(std::iter::once(0.0));
    let f = Frame::fit(xs, ys, false);
    let mut out = String::new();
    open(
        &mut out,
        &format!("safety margin per sphere ({})", log.kind.as_str()),
    );
    axes(&mut out, &f, "time [s]", "d_min - d [m]");
    let t_end = log.steps.last().map(|s| s.t as f64 * dt).unwrap_or(0.0);
    polyline(
        &mut out,
        &f,
        &[(0.0, 0.0), (t_end, 0.0)],
        "black",
        true,
        "boundary",
    );
    let mut entries = Vec::new();
    let labels: Vec<String> = (0..spheres).map(|i| format!("sphere {i}")).collect();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut out, &f, s, color, false, &labels[i]);
        entries.push((labels[i].as_str(), color));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Counts of `data` in `bins` equal-width bins over `[lo, hi]`; the last
/// bin is closed. Values outside the range or non-finite are skipped.
pub fn histogram_counts(data: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 || !(hi > lo) {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in data {
        if !(v >= lo && v <= hi) {
            continue;
        }
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
}

/// Finite range shared by several samples.
pub fn shared_range<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Option<(f64, f64)> {
    let (lo, hi) = samples
        .into_iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    lo.is_finite().then_some({
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    })
}

/// Overlaid histograms of named samples on a common binning.
pub fn histogram_svg(title: &str, samples: &[(&str, &[f64])], bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::param("histogram needs at least one bin"));
    }
    let (lo, hi) = shared_range(samples.iter().map(|(_, s)| *s))
        .ok_or_else(|| Error::param("no finite data to bin"))?;
    let counts: Vec<Vec<usize>> = samples
        .iter()
        .map(|(_, s)| histogram_counts(s, lo, hi, bins))
        .collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    let f = Frame {
        x0: lo,
        x1: hi,
        y0: 0.0,
        y1: top.max(1.0) * 1.05,
    };
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, "error", "count");
    let width = (hi - lo) / bins as f64;
    let mut entries = Vec::new();
    for (j, ((name, _), c)) in samples.iter().zip(&counts).enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.45">"#);
        for (k, &n) in c.iter().enumerate() {
            let x = lo + width * k as f64;
            let (px0, px1) = (f.px(x), f.px(x + width));
            let (py0, py1) = (f.py(n as f64), f.py(0.0));
            let _ = writeln!(
                out,
                r#"<rect x="{px0:.2}" y="{py0:.2}" width="{:.2}" height="{:.2}"><title>{n}</title></rect>"#,
                px1 - px0,
                py1 - py0
            );
        }
        out.push_str("</g>\n");
        entries.push((*name, color));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Mean prediction error against horizon, one line per model.
pub fn error_curve_svg(table: &ErrorTable) -> Result<String> {
    if table.rows.is_empty() || table.horizons.is_empty() {
        return Err(Error::param("error table is empty"));
    }
    let xs = table.horizons.iter().map(|h| *h as f64);
    let ys = table
        .rows
        .iter()
        .flat_map(|(_, r)| r.iter().copied())
        .chain(std::iter::once(0.0));
    let f = Frame::fit(xs, ys, false);
    let mut out = String::new();
    open(&mut out, "open-loop prediction error");
    axes(&mut out, &f, "horizon [steps]", "mean error");
    let mut entries = Vec::new();
    for (i, (name, errs)) in table.rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = table
            .horizons
            .iter()
            .zip(errs)
            .map(|(h, e)| (*h as f64, *e))
            .collect();
        polyline(&mut out, &f, &pts, color, false, name);
        for &(x, y) in &pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                f.px(x),
                f.py(y)
            );
        }
        entries.push((name.as_str(), color));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{ControllerKind, ControllerStep};
    use crate::qp::QpStatus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log() -> EpisodeLog {
        EpisodeLog {
            kind: ControllerKind::Kmpc,
            steps: (0..30)
                .map(|t| {
                    let a = t as f64 * 0.1;
                    ControllerStep {
                        t,
                        status: QpStatus::Solved,
                        infeasible: false,
                        solve_ms: 0.0,
                        cost: 0.0,
                        link_phi: vec![-0.2 - 0.01 * a, -0.4, f64::NEG_INFINITY],
                        max_phi: -0.2,
                        mean_phi: -0.3,
                        min_dist: 0.4,
                        u: DVector::zeros(2),
                        slack_total: 0.0,
                        tip: DVector::from_vec(vec![a.cos(), a.sin()]),
                        target: DVector::from_vec(vec![1.1 * a.cos(), 1.1 * a.sin()]),
                        target_dist: 0.1,
                    }
                })
                .collect(),
            aborted: None,
        }
    }

    #[test]
    fn unsafe_layer_only_with_obstacles() {
        let l = log();
        let without = trajectory_svg(&l, &[], 0.2).unwrap();
        assert!(!without.contains("id=\"unsafe\""));
        let with = trajectory_svg(&l, &[DVector::from_vec(vec![0.5, 0.5])], 0.2).unwrap();
        assert!(with.contains("id=\"unsafe\""));
        assert_eq!(with.matches("<circle").count(), 1);
    }

    #[test]
    fn rendering_is_byte_stable() {
        let (a, b) = (log(), log());
        assert_eq!(
            trajectory_svg(&a, &[], 0.2).unwrap(),
            trajectory_svg(&b, &[], 0.2).unwrap()
        );
        assert_eq!(phi_svg(&a, 0.05).unwrap(), phi_svg(&b, 0.05).unwrap());
    }

    #[test]
    fn empty_logs_are_rejected() {
        let mut l = log();
        l.steps.clear();
        assert!(trajectory_svg(&l, &[], 0.2).is_err());
        assert!(phi_svg(&l, 0.05).is_err());
    }

    #[test]
    fn histogram_counts_match_direct_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let (lo, hi) = shared_range([data.as_slice()]).unwrap();
        let bins = 17;
        let counts = histogram_counts(&data, lo, hi, bins);
        // Recount by testing each value against explicit bin edges.
        let mut edges: Vec<f64> = (0..=bins)
            .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
            .collect();
        edges[bins] = hi;
        let mut expected = vec![0; bins];
        for v in &data {
            for k in 0..bins {
                let last = k == bins - 1;
                if *v >= edges[k] && (*v < edges[k + 1] || (last && *v <= edges[k + 1])) {
                    expected[k] += 1;
                    break;
                }
            }
        }
        assert_eq!(counts, expected);
        assert_eq!(counts.iter().sum::<usize>(), data.len());
        let svg = histogram_svg("h", &[("a", &data)], bins).unwrap();
        assert_eq!(svg.matches("<rect x=").count() - 1, bins);
    }
}
