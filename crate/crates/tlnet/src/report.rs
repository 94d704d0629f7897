//! Evaluation reports: summary CSV, console table, PR-curve CSVs and SVG
//! plots.

use std::fmt::Write as _;

use tlnet_core::dataset::Difficulty;
use tlnet_core::eval::{EvalEntry, EvalReport, MatchCriterion, PrPoint};

pub const SUMMARY_HEADER: &str = "criterion,threshold,regime,ap,gt_count,tp,fp";
pub const PR_HEADER: &str = "recall,precision";

/// One row per `(criterion, regime)`, AP at full precision.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for e in &report.entries {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.criterion.name(),
            e.criterion.threshold,
            e.regime.name(),
            e.ap,
            e.gt_count,
            e.tp,
            e.fp
        )
        .unwrap();
    }
    out
}

fn criteria_in_order(report: &EvalReport) -> Vec<MatchCriterion> {
    let mut seen: Vec<MatchCriterion> = Vec::new();
    for e in &report.entries {
        if !seen.contains(&e.criterion) {
            seen.push(e.criterion);
        }
    }
    seen
}

fn label(c: &MatchCriterion) -> String {
    match c.name() {
        "iou3d" => format!("AP_3D  (IoU={})", c.threshold),
        "ioubev" => format!("AP_BEV (IoU={})", c.threshold),
        "loc" => format!("AP_LOC (<{}m)", c.threshold),
        _ => format!("AP_LOC_BEV (<{}m)", c.threshold),
    }
}

/// AP × 100 per criterion (rows) and regime (columns).
pub fn pretty_table(report: &EvalReport) -> String {
    let mut out = format!(
        "class {} ({:?} interpolation)\n{:<22} {:>9} {:>9} {:>9}\n",
        report.class_name, report.interpolation, "", "Easy", "Moderate", "Hard"
    );
    for c in criteria_in_order(report) {
        write!(out, "{:<22}", label(&c)).unwrap();
        for regime in Difficulty::REGIMES {
            match report.get(&c, regime) {
                Some(e) => write!(out, " {:>9.2}", 100.0 * e.ap).unwrap(),
                None => write!(out, " {:>9}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from(PR_HEADER);
    out.push('\n');
    for p in curve {
        writeln!(out, "{},{}", p.recall, p.precision).unwrap();
    }
    out
}

/// File name of an entry's PR curve, e.g. `pr_iou3d_0.5_moderate.csv`.
pub fn pr_file_name(e: &EvalEntry) -> String {
    format!(
        "pr_{}_{}_{}.csv",
        e.criterion.name(),
        e.criterion.threshold,
        e.regime.name()
    )
}

pub fn parse_pr_csv(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PR_HEADER) {
        return Err(format!("expected header {PR_HEADER:?}"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let (r, p) = l
                .split_once(',')
                .ok_or_else(|| format!("line {}: expected two columns", i + 2))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("line {}: bad number {s:?}", i + 2))
            };
            Ok((parse(r)?, parse(p)?))
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Recall–precision curves as a standalone SVG. Each curve is drawn as a
/// staircase through its points in recall order.
pub fn pr_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let x = |r: f64| m + r.clamp(0.0, 1.0) * (w - 2.0 * m);
    let y = |p: f64| h - m - p.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        w / 2.0,
        esc(title)
    );
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\
             <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            x(v),
            y(0.0),
            x(v),
            y(1.0),
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        )
        .unwrap();
        if k % 2 == 0 {
            writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
                x(v),
                h - m + 16.0,
                m - 6.0,
                y(v) + 4.0
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Recall</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">Precision</text>",
        w - 2.0 * m, h - 2.0 * m, w / 2.0, h - 10.0, h / 2.0, h / 2.0
    )
    .unwrap();
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut path = String::new();
        let mut prev: Option<(f64, f64)> = None;
        for &(r, p) in &pts {
            match prev {
                None => write!(path, "M{:.2},{:.2}", x(0.0), y(p)).unwrap(),
                Some(_) => write!(path, " V{:.2}", y(p)).unwrap(),
            }
            write!(path, " H{:.2}", x(r)).unwrap();
            prev = Some((r, p));
        }
        if !path.is_empty() {
            writeln!(
                s,
                "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
            )
            .unwrap();
        }
        let ly = m + 14.0 + 14.0 * i as f64;
        writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            w - m - 110.0,
            w - m - 90.0,
            w - m - 85.0,
            ly + 4.0,
            esc(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
