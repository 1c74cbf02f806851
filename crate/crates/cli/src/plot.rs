//! Minimal SVG line charts for the CSVs written by `train` and `eval`.

use std::fmt::Write;

use omnivore_core::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: String,
    x_label: String,
    series: Vec<Series>,
}

/// Loss and accuracy panels for `metrics.csv`; accuracy vs clip length for a
/// clip sweep.
pub fn from_csv(text: &str) -> Result<String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty csv".into()))?
        .split(',')
        .collect();
    let rows: Vec<Vec<Option<f64>>> = lines
        .map(|l| l.split(',').map(|c| c.trim().parse().ok()).collect())
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let panels = if let (Some(step), Some(loss)) = (col("step"), col("loss")) {
        let series_of = |x: usize, y: usize, name: &str| Series {
            name: name.to_string(),
            points: rows
                .iter()
                .filter_map(|r| Some((r.get(x).copied()??, r.get(y).copied()??)))
                .collect(),
        };
        let acc = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.ends_with("_top1") || h.ends_with("_top1_ema"))
            .map(|(i, h)| series_of(step, i, h))
            .collect();
        vec![
            Panel {
                title: "training loss".into(),
                x_label: "step".into(),
                series: vec![series_of(step, loss, "loss")],
            },
            Panel {
                title: "top-1".into(),
                x_label: "step".into(),
                series: acc,
            },
        ]
    } else if let (Some(cl), Some(acc)) = (col("clip_len"), col("accuracy")) {
        let ds = col("dataset");
        let names: Vec<String> = text
            .lines()
            .skip(1)
            .filter_map(|l| ds.and_then(|d| l.split(',').nth(d)).map(str::to_string))
            .fold(Vec::new(), |mut v, n| {
                if !v.contains(&n) {
                    v.push(n);
                }
                v
            });
        let names = if names.is_empty() { vec!["accuracy".to_string()] } else { names };
        let series = names
            .iter()
            .map(|n| Series {
                name: n.clone(),
                points: text
                    .lines()
                    .skip(1)
                    .filter(|l| ds.map_or(true, |d| l.split(',').nth(d) == Some(n.as_str())))
                    .filter_map(|l| {
                        let c: Vec<&str> = l.split(',').collect();
                        Some((c.get(cl)?.parse().ok()?, c.get(acc)?.parse().ok()?))
                    })
                    .collect(),
            })
            .collect();
        vec![Panel {
            title: "clip-length sweep".into(),
            x_label: "clip length (frames)".into(),
            series,
        }]
    } else {
        return Err(Error::Format(
            "csv has neither step,loss nor clip_len,accuracy columns".into(),
        ));
    };
    Ok(render(&panels))
}

fn render(panels: &[Panel]) -> String {
    let total_h = H * panels.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{total_h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for (i, p) in panels.iter().enumerate() {
        panel(&mut svg, p, i as f64 * H);
    }
    svg.push_str("</svg>\n");
    svg
}

fn panel(svg: &mut String, p: &Panel, top: f64) {
    let pts = p.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| top + H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        top + 20.0,
        p.title
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{PAD}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        top + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>", PAD - 4.0, y + 4.0);
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(svg, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{v}</text>", top + H - PAD + 14.0);
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        top + H - 12.0,
        p.x_label
    );
    for (k, s) in p.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            W - PAD + 4.0 - 120.0,
            top + PAD + 14.0 * (k as f64 + 1.0),
            s.name
        );
    }
}
