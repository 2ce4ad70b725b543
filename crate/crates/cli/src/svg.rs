use std::fmt::Write as _;

use histofuse_core::metrics::ConfusionMatrix;
use histofuse_core::optim::EpochHistory;

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 240.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 40.0;

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn panel(s: &mut String, id: &str, title: &str, offset: f64, epochs: &[usize], series: &[Series<'_>], y_range: (f64, f64)) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y_top, y_bot) = (offset + TOP, offset + PANEL_H - BOTTOM);
    let (e_lo, e_hi) = (epochs[0] as f64, *epochs.last().unwrap() as f64);
    let x = |e: usize| {
        if e_hi > e_lo {
            x0 + (e as f64 - e_lo) / (e_hi - e_lo) * (x1 - x0)
        } else {
            (x0 + x1) / 2.0
        }
    };
    let (lo, hi) = y_range;
    let y = |v: f64| y_bot - (v - lo) / (hi - lo) * (y_bot - y_top);
    let _ = writeln!(s, r#"<g class="panel" id="{id}">"#);
    let _ = writeln!(
        s,
        r#"<text class="title" x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
        num(WIDTH / 2.0),
        num(offset + TOP - 10.0),
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#,
        num(x0),
        num(y_bot),
        num(x1)
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#,
        num(x0),
        num(y_top),
        num(y_bot)
    );
    let mut ticks: Vec<usize> = vec![epochs[0], *epochs.last().unwrap()];
    let step = (epochs.len() / 5).max(1);
    ticks.extend(epochs.iter().step_by(step).copied());
    ticks.sort_unstable();
    ticks.dedup();
    for e in ticks {
        let _ = writeln!(
            s,
            r#"<text class="x-tick" x="{}" y="{}" text-anchor="middle" font-size="10">{e}</text>"#,
            num(x(e)),
            num(y_bot + 14.0)
        );
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text class="y-tick" x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#,
            num(x0 - 6.0),
            num(y(v) + 3.0),
            histofuse_core::optim::format_sig(v, 3)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle" font-size="11">epoch</text>"#,
        num((x0 + x1) / 2.0),
        num(y_bot + 30.0)
    );
    for (k, ser) in series.iter().enumerate() {
        let points: Vec<String> = epochs
            .iter()
            .zip(&ser.values)
            .map(|(&e, &v)| format!("{},{}", num(x(e)), num(y(v))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-series="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            ser.name,
            ser.color,
            points.join(" ")
        );
        for (&e, &v) in epochs.iter().zip(&ser.values) {
            let _ = writeln!(
                s,
                r#"<circle class="point" data-series="{}" data-epoch="{e}" cx="{}" cy="{}" r="2.5" fill="{}"/>"#,
                ser.name,
                num(x(e)),
                num(y(v)),
                ser.color
            );
        }
        let ly = y_top + 12.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{}" y="{}" font-size="10" fill="{}">{}</text>"#,
            num(x1 - 70.0),
            num(ly + 4.0),
            ser.color,
            ser.name
        );
    }
    s.push_str("</g>\n");
}

/// Accuracy panel over loss panel, train and validation series in each.
pub fn curves(history: &EpochHistory) -> String {
    let epochs: Vec<usize> = history.rows.iter().map(|r| r.epoch).collect();
    let col = |f: fn(&histofuse_core::optim::EpochRecord) -> f64| history.rows.iter().map(f).collect::<Vec<_>>();
    let acc = [
        Series { name: "train_acc", color: "#1f77b4", values: col(|r| r.train_acc) },
        Series { name: "val_acc", color: "#ff7f0e", values: col(|r| r.val_acc) },
    ];
    let loss = [
        Series { name: "train_loss", color: "#1f77b4", values: col(|r| r.train_loss) },
        Series { name: "val_loss", color: "#ff7f0e", values: col(|r| r.val_loss) },
    ];
    let finite_max = loss
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let loss_hi = if finite_max > 0.0 { finite_max * 1.05 } else { 1.0 };
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{1}" viewBox="0 0 {0} {1}">"#,
        WIDTH,
        2.0 * PANEL_H
    );
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if epochs.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    panel(&mut s, "accuracy", "Accuracy", 0.0, &epochs, &acc, (0.0, 1.0));
    panel(&mut s, "loss", "Loss", PANEL_H, &epochs, &loss, (0.0, loss_hi));
    s.push_str("</svg>\n");
    s
}

/// Counts as a shaded grid; rows are actual labels, columns predicted.
pub fn heatmap(cm: &ConfusionMatrix) -> String {
    let k = cm.k();
    let cell = 60.0;
    let (left, top) = (90.0, 60.0);
    let w = left + cell * k as f64 + 20.0;
    let h = top + cell * k as f64 + 20.0;
    let max = cm.counts().iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text class="title" x="{}" y="18" text-anchor="middle" font-size="13">predicted</text>"#,
        num(left + cell * k as f64 / 2.0)
    );
    let _ = writeln!(
        s,
        r#"<text class="title" x="12" y="{0}" font-size="13" transform="rotate(-90 12 {0})" text-anchor="middle">actual</text>"#,
        num(top + cell * k as f64 / 2.0)
    );
    for (j, l) in cm.labels().iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            num(left + cell * (j as f64 + 0.5)),
            num(top - 8.0),
            escape(l)
        );
    }
    for (i, (l, row)) in cm.labels().iter().zip(cm.counts()).enumerate() {
        let cy = top + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text class="row-label" x="{}" y="{}" text-anchor="end" font-size="11">{}</text>"#,
            num(left - 8.0),
            num(cy + cell / 2.0 + 4.0),
            escape(l)
        );
        for (j, &c) in row.iter().enumerate() {
            let t = c as f64 / max;
            let shade = (255.0 - 200.0 * t).round() as u8;
            let cx = left + cell * j as f64;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="white"/>"#,
                num(cx),
                num(cy)
            );
            let ink = if t > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text class="count" data-row="{i}" data-col="{j}" x="{}" y="{}" text-anchor="middle" font-size="13" fill="{ink}">{c}</text>"#,
                num(cx + cell / 2.0),
                num(cy + cell / 2.0 + 5.0)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
