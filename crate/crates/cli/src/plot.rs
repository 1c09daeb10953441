//! Loss and mIoU curves rendered as standalone SVG.
//!
//! The log parser is deliberately lenient: malformed lines are counted and
//! skipped so one corrupt record does not block plotting a long run.

use std::fs;
use std::path::Path;

use anyhow::{bail, Result};

#[derive(Debug, Clone, Copy)]
pub struct StepPoint {
    pub step: u64,
    pub total: f64,
    pub sup: f64,
    pub st: f64,
    pub ss: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalPoint {
    pub step: u64,
    pub miou: f64,
}

#[derive(Debug, Default)]
pub struct ParsedLog {
    pub steps: Vec<StepPoint>,
    pub evals: Vec<EvalPoint>,
    pub skipped: usize,
}

pub fn parse_log(path: &Path) -> Result<ParsedLog> {
    let text = fs::read_to_string(path)?;
    let mut out = ParsedLog::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Ok(value) = serde_json::from_str::<serde_json::Value>(line) else {
            out.skipped += 1;
            continue;
        };
        let get = |k: &str| value.get(k).and_then(|v| v.as_f64());
        let step = value.get("step").and_then(|v| v.as_u64());
        match (value.get("kind").and_then(|k| k.as_str()), step) {
            (Some("step"), Some(step)) => {
                match (get("total"), get("sup"), get("st"), get("ss")) {
                    (Some(total), Some(sup), Some(st), Some(ss)) => out.steps.push(StepPoint {
                        step,
                        total,
                        sup,
                        st,
                        ss,
                    }),
                    _ => out.skipped += 1,
                }
            }
            (Some("eval"), Some(step)) => match get("miou") {
                Some(miou) => out.evals.push(EvalPoint { step, miou }),
                None => out.skipped += 1,
            },
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = if self.x_max > self.x_min {
            (x - self.x_min) / (self.x_max - self.x_min)
        } else {
            0.5
        };
        let fy = if self.y_max > self.y_min {
            (y - self.y_min) / (self.y_max - self.y_min)
        } else {
            0.5
        };
        (self.x0 + fx * self.w, self.y0 + self.h - fy * self.h)
    }

    fn polyline(&self, points: impl Iterator<Item = (f64, f64)>, color: &str) -> String {
        let coords: Vec<String> = points
            .map(|(x, y)| {
                let (px, py) = self.map(x, y);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        )
    }

    fn chrome(&self, title: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#888\"/>\n",
            self.x0, self.y0, self.w, self.h
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" fill=\"#333\">{title}</text>\n",
            self.x0,
            self.y0 - 8.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\" text-anchor=\"end\">{:.3}</text>\n",
            self.x0 - 4.0,
            self.y0 + 10.0,
            self.y_max
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\" text-anchor=\"end\">{:.3}</text>\n",
            self.x0 - 4.0,
            self.y0 + self.h,
            self.y_min
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\">{}</text>\n",
            self.x0,
            self.y0 + self.h + 14.0,
            self.x_min as u64
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\" text-anchor=\"end\">{}</text>\n",
            self.x0 + self.w,
            self.y0 + self.h + 14.0,
            self.x_max as u64
        ));
        s
    }
}

fn finite_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render_curves(log: &ParsedLog) -> Result<String> {
    if log.steps.is_empty() && log.evals.is_empty() {
        bail!("log contains no plottable records");
    }
    let width = 860.0;
    let panel_h = 220.0;
    let left = 64.0;
    let right = 20.0;
    let mut panels = Vec::new();
    let mut y_cursor = 30.0;

    if !log.steps.is_empty() {
        let (x_min, x_max) = (
            log.steps.first().unwrap().step as f64,
            log.steps.last().unwrap().step as f64,
        );
        let (y_min, y_max) = finite_bounds(
            log.steps
                .iter()
                .flat_map(|p| [p.total, p.sup, p.st, p.ss]),
        );
        let frame = Frame {
            x0: left,
            y0: y_cursor,
            w: width - left - right,
            h: panel_h,
            x_min,
            x_max,
            y_min,
            y_max,
        };
        let mut body = frame.chrome("loss vs step");
        let series: [(&str, &str, fn(&StepPoint) -> f64); 4] = [
            ("total", "#1f77b4", |p| p.total),
            ("sup", "#2ca02c", |p| p.sup),
            ("st", "#ff7f0e", |p| p.st),
            ("ss", "#d62728", |p| p.ss),
        ];
        for (i, (name, color, pick)) in series.iter().enumerate() {
            body.push_str(&frame.polyline(
                log.steps.iter().map(|p| (p.step as f64, pick(p))),
                color,
            ));
            let lx = frame.x0 + frame.w - 260.0 + i as f64 * 65.0;
            body.push_str(&format!(
                "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
                frame.y0 - 18.0
            ));
            body.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333\">{name}</text>\n",
                lx + 14.0,
                frame.y0 - 9.0
            ));
        }
        panels.push(body);
        y_cursor += panel_h + 60.0;
    }

    if !log.evals.is_empty() {
        let (x_min, x_max) = (
            log.evals.first().unwrap().step as f64,
            log.evals.last().unwrap().step as f64,
        );
        let (y_min, y_max) = finite_bounds(log.evals.iter().map(|p| p.miou));
        let frame = Frame {
            x0: left,
            y0: y_cursor,
            w: width - left - right,
            h: panel_h,
            x_min,
            x_max,
            y_min: y_min.min(0.0),
            y_max: y_max.max(1.0),
        };
        let mut body = frame.chrome("mIoU vs step");
        body.push_str(&frame.polyline(
            log.evals.iter().map(|p| (p.step as f64, p.miou)),
            "#9467bd",
        ));
        for p in &log.evals {
            let (px, py) = frame.map(p.step as f64, p.miou);
            body.push_str(&format!(
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"2.5\" fill=\"#9467bd\"/>\n"
            ));
        }
        panels.push(body);
        y_cursor += panel_h + 60.0;
    }

    let height = y_cursor;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for p in panels {
        svg.push_str(&p);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
