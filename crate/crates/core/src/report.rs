//! CSV tables and self-contained SVG plots for experiment outputs.

use std::fmt::Write;

use crate::harness::{AblationTable, FrequencyAnalysis, LossCurve, SweepTable};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per (fraction, seed) plus one `mean` row per fraction.
pub fn table1_csv(t: &SweepTable) -> String {
    let mut s = String::from("fraction,seed,labeled_frames,baseline_miou,consist_miou\n");
    for m in &t.means {
        for r in t.rows.iter().filter(|r| r.fraction == m.fraction) {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.fraction, r.seed, r.labeled_frames, r.baseline_miou, r.consist_miou
            );
        }
        let _ = writeln!(s, "{},mean,,{},{}", m.fraction, m.baseline_miou, m.consist_miou);
    }
    s
}

pub fn table2_csv(t: &AblationTable) -> String {
    let seeds = t.rows.first().map_or(0, |r| r.miou.len());
    let mut s = String::from("row,mean_miou");
    for i in 0..seeds {
        let _ = write!(s, ",seed_{i}");
    }
    s.push('\n');
    for r in &t.rows {
        let _ = write!(s, "{},{}", r.label(), r.mean_miou);
        for m in &r.miou {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
    }
    s
}

/// Per-class rows for every seed; the rank correlation repeats on each row
/// of its seed.
pub fn fig2_csv(runs: &[(usize, FrequencyAnalysis)]) -> String {
    let mut s = String::from("seed,class,frequency,baseline_iou,consist_iou,relative_improvement,spearman\n");
    for (seed, fa) in runs {
        for c in &fa.classes {
            let _ = writeln!(
                s,
                "{seed},{},{},{},{},{},{}",
                c.class,
                c.frequency,
                opt(c.baseline_iou),
                opt(c.consist_iou),
                opt(c.relative_improvement),
                opt(fa.spearman)
            );
        }
    }
    s
}

pub fn loss_curve_csv(phase1: &LossCurve, phase2: Option<&LossCurve>) -> String {
    let mut s = String::from("phase,step,supervised,consistency\n");
    for (i, v) in phase1.supervised.iter().enumerate() {
        let _ = writeln!(s, "1,{i},{v},");
    }
    if let Some(c) = phase2 {
        for (i, (v, k)) in c.supervised.iter().zip(&c.consistency).enumerate() {
            let _ = writeln!(s, "2,{i},{v},{k}");
        }
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Axes {
            x: span(xs),
            y: span(ys),
        }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn frame(s: &mut String, a: &Axes, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor, x, y) in [
        (a.x.0, "start", PAD, H - PAD + 14.0),
        (a.x.1, "end", W - PAD, H - PAD + 14.0),
        (a.y.0, "end", PAD - 4.0, H - PAD),
        (a.y.1, "end", PAD - 4.0, PAD + 8.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
}

/// Scatter of log10 class frequency against relative IOU improvement.
pub fn fig2_svg(runs: &[(usize, FrequencyAnalysis)]) -> String {
    let pts: Vec<(f64, f64)> = runs
        .iter()
        .flat_map(|(_, fa)| fa.classes.iter())
        .filter_map(|c| Some((c.frequency.max(1e-6).log10(), c.relative_improvement?)))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
    let a = Axes::fit(&xs, &ys);
    let mut s = String::new();
    frame(&mut s, &a, "Relative IOU improvement vs class frequency", "log10 labeled frequency", "relative improvement");
    if a.y.0 < 0.0 && a.y.1 > 0.0 {
        let y = a.py(0.0);
        let _ = writeln!(s, r##"<line x1="{PAD}" y1="{y}" x2="{}" y2="{y}" stroke="#999" stroke-dasharray="4 3"/>"##, W - PAD);
    }
    for (x, y) in pts {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, a.px(x), a.py(y));
    }
    s.push_str("</svg>\n");
    s
}

/// Mean MIOU against labeled fraction for both training regimes.
pub fn table1_svg(t: &SweepTable) -> String {
    let xs: Vec<f64> = t.means.iter().map(|m| m.fraction.log10()).collect();
    let ys: Vec<f64> = t.means.iter().flat_map(|m| [m.baseline_miou, m.consist_miou]).collect();
    let a = Axes::fit(&xs, &ys);
    let mut s = String::new();
    frame(&mut s, &a, "MIOU vs labeled fraction", "log10 fraction", "MIOU");
    for (color, pick) in [("#d62728", 0usize), ("#2ca02c", 1)] {
        let pts: Vec<String> = t
            .means
            .iter()
            .map(|m| {
                let y = if pick == 0 { m.baseline_miou } else { m.consist_miou };
                format!("{:.2},{:.2}", a.px(m.fraction.log10()), a.py(y))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
    }
    let _ = writeln!(s, r##"<text x="{}" y="{}" fill="#d62728">baseline</text>"##, PAD + 6.0, PAD + 14.0);
    let _ = writeln!(s, r##"<text x="{}" y="{}" fill="#2ca02c">consistency</text>"##, PAD + 6.0, PAD + 28.0);
    s.push_str("</svg>\n");
    s
}

/// Bar chart of mean MIOU per ablation row.
pub fn table2_svg(t: &AblationTable) -> String {
    let ys: Vec<f64> = t.rows.iter().map(|r| r.mean_miou).collect();
    let xs: Vec<f64> = vec![0.0, t.rows.len() as f64];
    let mut a = Axes::fit(&xs, &ys);
    a.x = (0.0, t.rows.len().max(1) as f64);
    a.y.0 = a.y.0.min(ys.iter().copied().fold(f64::INFINITY, f64::min) - 0.02);
    let mut s = String::new();
    frame(&mut s, &a, "Loss ablation", "", "mean MIOU");
    let bw = (W - 2.0 * PAD) / t.rows.len().max(1) as f64;
    for (i, r) in t.rows.iter().enumerate() {
        let x = a.px(i as f64) + 0.15 * bw;
        let top = a.py(r.mean_miou);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
            0.7 * bw,
            (H - PAD - top).max(0.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
            x + 0.35 * bw,
            H - PAD + 26.0,
            r.label()
        );
    }
    s.push_str("</svg>\n");
    s
}
