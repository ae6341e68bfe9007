//! Static SVG figures rendered directly from a trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use junction_mpc::signal::Phase;
use junction_mpc::sim::{ScenarioConfig, StepRecord, Trace};

use crate::CliError;

pub const PLOT_FILES: [&str; 5] = ["positions.svg", "velocity.svg", "acceleration.svg", "lane_change.svg", "gaps.svg"];

const WIDTH: f64 = 960.0;
const PANEL_HEIGHT: f64 = 300.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 110.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

struct Series {
    vehicle: u32,
    points: Vec<(f64, f64)>,
    emphasis: bool,
}

struct Panel {
    title: String,
    y_label: String,
    series: Vec<Series>,
    hlines: Vec<(f64, String)>,
    bands: Vec<(f64, f64, Phase)>,
}

impl Panel {
    fn new(title: &str, y_label: &str) -> Self {
        Panel { title: title.into(), y_label: y_label.into(), series: Vec::new(), hlines: Vec::new(), bands: Vec::new() }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 7.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn y_range(p: &Panel) -> (f64, f64) {
    let ys = p.series.iter().flat_map(|s| s.points.iter().map(|q| q.1)).chain(p.hlines.iter().map(|h| h.0));
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn figure(title: &str, x_label: &str, x_range: (f64, f64), panels: &[Panel]) -> String {
    let height = TOP + panels.len() as f64 * PANEL_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1) = if x_range.1 > x_range.0 { x_range } else { (x_range.0, x_range.0 + 1.0) };
    for (k, p) in panels.iter().enumerate() {
        let top = TOP + k as f64 * PANEL_HEIGHT + 20.0;
        let bottom = TOP + (k + 1) as f64 * PANEL_HEIGHT - BOTTOM;
        let (left, right) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = y_range(p);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, (left + right) / 2.0, top - 6.0, escape(&p.title));
        for &(a, b, phase) in &p.bands {
            let (a, b) = (a.max(x0), b.min(x1));
            if b <= a {
                continue;
            }
            let fill = match phase {
                Phase::Red => "#f4c7c3",
                Phase::Green => "#d4edda",
            };
            let _ = writeln!(
                s,
                r#"<rect class="signal-{}" x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{fill}" opacity="0.6"/>"#,
                match phase {
                    Phase::Red => "red",
                    Phase::Green => "green",
                },
                sx(a),
                sx(b) - sx(a),
                bottom - top
            );
        }
        let _ = writeln!(s, r#"<rect x="{left}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, right - left, bottom - top);
        for t in nice_ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 4.0);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick_label(t));
        }
        for t in nice_ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#e0e0e0"/>"##);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, tick_label(t));
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (left + right) / 2.0, bottom + 32.0, escape(x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (top + bottom) / 2.0,
            (top + bottom) / 2.0,
            escape(&p.y_label)
        );
        for (v, label) in &p.hlines {
            let y = sy(*v);
            let _ = writeln!(s, r#"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="black" stroke-dasharray="6 4"/>"#);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, right + 4.0, y + 4.0, escape(label));
        }
        for ser in &p.series {
            let color = PALETTE[ser.vehicle as usize % PALETTE.len()];
            let width = if ser.emphasis { 2.2 } else { 1.0 };
            let mut pts = String::new();
            for &(x, y) in &ser.points {
                let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
            }
            let _ = writeln!(
                s,
                r#"<g class="vehicle" data-vehicle="{id}"><title>AV{id}</title><polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/></g>"#,
                pts.trim_end(),
                id = ser.vehicle
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn by_vehicle(trace: &Trace) -> BTreeMap<u32, Vec<&StepRecord>> {
    let mut m: BTreeMap<u32, Vec<&StepRecord>> = BTreeMap::new();
    for r in &trace.records {
        m.entry(r.vehicle_id).or_default().push(r);
    }
    m
}

fn series(groups: &BTreeMap<u32, Vec<&StepRecord>>, f: impl Fn(&StepRecord) -> Option<f64>, emphasis: Option<u32>) -> Vec<Series> {
    groups
        .iter()
        .map(|(id, rs)| Series {
            vehicle: *id,
            points: rs.iter().filter_map(|r| f(r).map(|y| (r.time, y))).collect(),
            emphasis: emphasis == Some(*id),
        })
        .collect()
}

/// Renders the five figures and returns their file names.
pub fn render_plots(trace: &Trace, cfg: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let groups = by_vehicle(trace);
    let xr = (0.0, trace.end_time);
    let b = &cfg.bounds;
    let name = &cfg.name;

    let mut pos = Panel::new("Longitudinal position", "xi_x [m]");
    pos.series = series(&groups, |r| Some(r.state[0]), None);
    pos.hlines.push((cfg.road.stop_line, "stop line".into()));
    pos.bands = trace.phases.clone();

    let mut vel = Panel::new("Longitudinal velocity", "v_x [m/s]");
    vel.series = series(&groups, |r| Some(r.state[2]), None);
    vel.hlines = vec![(b.state_lower[2], "v min".into()), (b.state_upper[2], "v max".into())];
    vel.bands = trace.phases.clone();

    let mut acc = Panel::new("Longitudinal acceleration", "a [m/s²]");
    acc.series = series(&groups, |r| Some(r.input[0]), None);
    acc.hlines = vec![(b.input_lower[0], "a min".into()), (b.input_upper[0], "a max".into())];

    let lcv = trace.lane_changes.first().map(|e| e.vehicle);
    let mut lat = Panel::new("Lateral position", "xi_y [m]");
    lat.series = series(&groups, |r| Some(r.state[1]), lcv);
    lat.hlines = cfg.road.lanes.iter().enumerate().map(|(i, y)| (*y, format!("lane {}", i + 1))).collect();
    let mut lane_panels = vec![lat];
    if let Some(id) = lcv {
        let only = |f: fn(&StepRecord) -> f64| move |r: &StepRecord| (r.vehicle_id == id).then(|| f(r));
        let mut yaw = Panel::new(&format!("Heading of AV{id}"), "psi [rad]");
        yaw.series = series(&groups, only(|r| r.state[4]), lcv);
        yaw.series.retain(|s| !s.points.is_empty());
        yaw.hlines = vec![(b.state_lower[4], "psi min".into()), (b.state_upper[4], "psi max".into())];
        let mut steer = Panel::new(&format!("Steering of AV{id}"), "delta [rad]");
        steer.series = series(&groups, only(|r| r.input[1]), lcv);
        steer.series.retain(|s| !s.points.is_empty());
        steer.hlines = vec![(b.input_lower[1], "delta min".into()), (b.input_upper[1], "delta max".into())];
        lane_panels.push(yaw);
        lane_panels.push(steer);
    }

    let mut gaps = Panel::new("Distance to nearest vehicle", "gap [m]");
    gaps.series = series(&groups, |r| r.min_gap, None);
    gaps.hlines.push((cfg.safety.gamma, "gamma".into()));

    let figures = [
        (PLOT_FILES[0], figure(&format!("{name}: positions"), "time [s]", xr, &[pos])),
        (PLOT_FILES[1], figure(&format!("{name}: velocity"), "time [s]", xr, &[vel])),
        (PLOT_FILES[2], figure(&format!("{name}: acceleration"), "time [s]", xr, &[acc])),
        (PLOT_FILES[3], figure(&format!("{name}: lane change"), "time [s]", xr, &lane_panels)),
        (PLOT_FILES[4], figure(&format!("{name}: gaps"), "time [s]", xr, &[gaps])),
    ];
    let mut out = Vec::new();
    for (file, svg) in figures {
        let path = out_dir.join(file);
        fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
        out.push(file.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 100.0);
        assert_eq!(t.first(), Some(&0.0));
        assert_eq!(t.last(), Some(&100.0));
        assert!(t.len() >= 4 && t.len() <= 8);
        let t = nice_ticks(-0.8, 0.8);
        assert!(t.contains(&0.0));
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }
}
