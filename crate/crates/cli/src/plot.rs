//! Static SVG overlay of one SLAM result on its ground truth.

use std::collections::BTreeMap;
use std::fmt::Write;

use crowdslam::dataset::EpisodeRecord;
use crowdslam::slam::{Prediction, SlamResult};
use crowdslam::{Cov2, Point2};
use nalgebra::SymmetricEigen;

const WIDTH: f64 = 900.0;
const MARGIN: f64 = 20.0;

struct Frame {
    x0: f64,
    y1: f64,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit(points: &[Point2]) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
        }
        let span = (x1 - x0).max(y1 - y0).max(1e-3);
        let scale = (WIDTH - 2.0 * MARGIN) / span;
        Frame {
            x0,
            y1,
            scale,
            height: (y1 - y0) * scale + 2.0 * MARGIN,
        }
    }

    /// SVG y grows downwards.
    fn map(&self, p: &Point2) -> (f64, f64) {
        (MARGIN + (p.x - self.x0) * self.scale, MARGIN + (self.y1 - p.y) * self.scale)
    }
}

fn polyline(out: &mut String, frame: &Frame, points: &[Point2], class: &str) {
    if points.len() < 2 {
        return;
    }
    let coords: Vec<String> = points
        .iter()
        .map(|p| {
            let (x, y) = frame.map(p);
            format!("{x},{y}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline class="{class}" points="{}"/>"#, coords.join(" "));
}

fn ellipse(out: &mut String, frame: &Frame, center: &Point2, cov: &Cov2) {
    let eig = SymmetricEigen::new(*cov.matrix());
    let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let rx = eig.eigenvalues[i].max(0.0).sqrt() * frame.scale;
    let ry = eig.eigenvalues[j].max(0.0).sqrt() * frame.scale;
    let v = eig.eigenvectors.column(i);
    // Flipping y mirrors the rotation.
    let angle = -v[1].atan2(v[0]).to_degrees();
    let (cx, cy) = frame.map(center);
    let _ = writeln!(
        out,
        r#"<ellipse class="sigma" cx="{cx}" cy="{cy}" rx="{rx}" ry="{ry}" transform="rotate({angle} {cx} {cy})"/>"#
    );
}

/// Splits an ordered `(step, point)` sequence at missing steps.
fn segments(track: &[(usize, Point2)]) -> Vec<Vec<Point2>> {
    let mut out: Vec<Vec<Point2>> = Vec::new();
    let mut last = None;
    for &(s, p) in track {
        if last.is_none_or(|l: usize| l + 1 != s) {
            out.push(Vec::new());
        }
        out.last_mut().expect("segment started").push(p);
        last = Some(s);
    }
    out
}

fn forecast_step(result: &SlamResult) -> Option<usize> {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for p in result.predictions.iter().filter(|p| !p.positions.is_empty()) {
        *count.entry(p.step).or_default() += 1;
    }
    let best = count.values().copied().max()?;
    count.into_iter().find(|&(_, c)| c == best).map(|(s, _)| s)
}

/// Renders ground truth, MAP estimates and the forecasts issued at `step`
/// (default: the step with the most forecasts). Stochastic forecasts also
/// get a 1-sigma ellipse per future step.
pub fn render(result: &SlamResult, episode: &EpisodeRecord, step: Option<usize>) -> Result<String, String> {
    let step = match step {
        Some(s) if !result.predictions.iter().any(|p| p.step == s && !p.positions.is_empty()) => {
            return Err(format!("--step: no forecasts at step {s}"));
        }
        Some(s) => Some(s),
        None => forecast_step(result),
    };
    let forecasts: Vec<&Prediction> = result
        .predictions
        .iter()
        .filter(|p| Some(p.step) == step && !p.positions.is_empty())
        .collect();

    let gt_robot: Vec<Point2> = episode.steps.iter().map(|s| s.robot.position()).collect();
    let map_robot: Vec<Point2> = result.robot.iter().map(|p| p.position()).collect();
    let mut gt_peds: BTreeMap<u32, Vec<Point2>> = BTreeMap::new();
    for s in &episode.steps {
        for p in &s.pedestrians {
            gt_peds.entry(p.id).or_default().push(p.position);
        }
    }
    let mut tracks: BTreeMap<u32, Vec<(usize, Point2)>> = BTreeMap::new();
    for l in &result.landmarks {
        tracks.entry(l.ped_id).or_default().push((l.step, l.position));
    }
    for t in tracks.values_mut() {
        t.sort_by_key(|&(s, _)| s);
    }

    let mut all: Vec<Point2> = gt_robot.iter().chain(&map_robot).copied().collect();
    all.extend(gt_peds.values().flatten());
    all.extend(tracks.values().flatten().map(|&(_, p)| p));
    for f in &forecasts {
        all.extend(&f.positions);
    }
    let frame = Frame::fit(&all);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{}" viewBox="0 0 {WIDTH} {}">"#,
        frame.height, frame.height
    );
    out.push_str(concat!(
        "<style>polyline{fill:none;stroke-width:1.5}",
        ".gt-robot{stroke:#000}.map-robot{stroke:#d62728;stroke-dasharray:4 2}",
        ".gt-ped{stroke:#999}.map-ped{stroke:#1f77b4}",
        ".forecast{stroke:#8e44ad;stroke-width:2}",
        ".sigma{fill:#8e44ad;fill-opacity:0.08;stroke:#8e44ad;stroke-width:0.5}</style>\n"
    ));
    let _ = writeln!(
        out,
        "<title>{} seed {}{}</title>",
        result.method,
        result.seed,
        step.map(|s| format!(", forecasts from step {s}")).unwrap_or_default()
    );
    for path in gt_peds.values() {
        polyline(&mut out, &frame, path, "gt-ped");
    }
    for t in tracks.values() {
        for seg in segments(t) {
            polyline(&mut out, &frame, &seg, "map-ped");
        }
    }
    polyline(&mut out, &frame, &gt_robot, "gt-robot");
    polyline(&mut out, &frame, &map_robot, "map-robot");
    for f in &forecasts {
        let path: Vec<Point2> = std::iter::once(f.origin).chain(f.positions.iter().copied()).collect();
        polyline(&mut out, &frame, &path, "forecast");
        if let Some(covs) = &f.position_cov {
            for (p, c) in f.positions.iter().zip(covs) {
                ellipse(&mut out, &frame, p, c);
            }
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}
