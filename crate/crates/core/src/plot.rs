//! Power curves as standalone SVG.

use std::fmt::Write;

use crate::simulator::PowerCell;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 40.0;
const TOP: f64 = 80.0;
const BOTTOM: f64 = 80.0;
const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Rejection probability against true effect, one polyline per sample size,
/// with dotted reference lines at 0.05 and 0.80.
pub fn power_svg(title: &str, cells: &[&PowerCell]) -> String {
    let mut ns: Vec<usize> = cells.iter().map(|c| c.params.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let effects: Vec<f64> = cells.iter().map(|c| c.true_effect).filter(|e| e.is_finite()).collect();
    let (mut lo, mut hi) = effects
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 0.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - lo) / (hi - lo) * pw;
    let sy = |y: f64| TOP + (1.0 - y) * ph;

    let flagged: Vec<String> = cells
        .iter()
        .filter(|c| c.flagged)
        .map(|c| format!("n={} effect={:.2}", c.params.n, c.true_effect))
        .collect();
    let subtitle = if flagged.is_empty() {
        "all cells within the failure tolerance".to_string()
    } else {
        format!("flagged (>2% failed replications): {}", flagged.join("; "))
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-size="18">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="52" text-anchor="middle" font-size="12" fill="gray">{}</text>"#, WIDTH / 2.0, escape(&subtitle));
    // Axes.
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph);
    for k in 0..=5 {
        let y = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{y:.1}</text>"#,
            LEFT - 8.0,
            sy(y) + 4.0
        );
        let x = lo + (hi - lo) * k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{x:.2}</text>"#,
            sx(x),
            TOP + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">True difference in mean risk behaviors</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 30.0
    );
    let _ = writeln!(
        s,
        r#"<text x="25" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 25 {})">Probability of rejecting the null</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for level in [0.05, 0.80] {
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="gray" stroke-dasharray="2,4"/>"#,
            sy(level),
            LEFT + pw,
            sy(level)
        );
    }
    for (k, &n) in ns.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.params.n == n && c.power.is_finite() && c.true_effect.is_finite())
            .map(|c| (c.true_effect, c.power))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = TOP + 16.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.1}" font-size="12" fill="{color}">n = {n}</text>"#,
            LEFT + pw - 70.0
        );
    }
    s.push_str("</svg>\n");
    s
}
