//! Static SVG figures rendered from CSV text.
//!
//! Each emitter takes the CSV produced by the CLI and nothing else, so a
//! figure can always be regenerated from its table. Output contains no
//! timestamps or random ids and is byte-stable.

use std::fmt::Write as _;

use crate::error::{Result, SpfmError};

/// A parsed CSV table with named columns.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| SpfmError::Input(format!("csv header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|rec| rec.iter().map(str::to_owned).collect())
                    .map_err(|e| SpfmError::Input(format!("csv record: {e}")))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Table { headers, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let i = self
            .index(name)
            .ok_or_else(|| SpfmError::Input(format!("csv: missing column '{name}'")))?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .into_iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| SpfmError::Input(format!("csv: column '{name}' has non-number '{s}'")))
            })
            .collect()
    }
}

struct Frame {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        self.x + (v - self.x_lo) / (self.x_hi - self.x_lo) * self.w
    }

    fn py(&self, v: f64) -> f64 {
        self.y + self.h - (v - self.y_lo) / (self.y_hi - self.y_lo) * self.h
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            self.x, self.y, self.w, self.h
        );
        for k in 0..=4 {
            let fx = self.x_lo + (self.x_hi - self.x_lo) * k as f64 / 4.0;
            let fy = self.y_lo + (self.y_hi - self.y_lo) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
                self.px(fx),
                self.y + self.h + 14.0,
                tick(fx)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
                self.x - 4.0,
                self.py(fy) + 3.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            self.x + self.w / 2.0,
            self.y + self.h + 30.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            self.x - 38.0,
            self.y + self.h / 2.0,
            self.x - 38.0,
            self.y + self.h / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(width: f64, height: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// MSE against guidance scale, one line per series.
///
/// Requires `omega` and `mse` columns. Series are keyed by the `dataset`
/// and `model` columns when present.
pub fn mse_chart_svg(csv_text: &str) -> Result<String> {
    let t = Table::parse(csv_text)?;
    if t.is_empty() {
        return Err(SpfmError::Input("mse chart: empty table".into()));
    }
    let omega = t.column_f64("omega")?;
    let mse = t.column_f64("mse")?;
    let key_of = |name: &str| t.column(name).ok();
    let datasets = key_of("dataset");
    let models = key_of("model");
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for i in 0..t.len() {
        let mut key = Vec::new();
        if let Some(d) = &datasets {
            key.push(d[i]);
        }
        if let Some(m) = &models {
            key.push(m[i]);
        }
        let key = if key.is_empty() { "mse".to_string() } else { key.join(" / ") };
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((omega[i], mse[i])),
            None => series.push((key, vec![(omega[i], mse[i])])),
        }
    }
    let (x_lo, x_hi) = range(omega.iter().copied());
    let (_, y_hi) = range(mse.iter().copied());
    let frame = Frame { x: 70.0, y: 30.0, w: 420.0, h: 280.0, x_lo, x_hi, y_lo: 0.0, y_hi: y_hi * 1.05 };
    let mut out = header(720.0, 370.0);
    let _ = writeln!(out, r#"<text x="280" y="18" font-size="13" text-anchor="middle">conditional MSE vs guidance scale</text>"#);
    frame.axes(&mut out, "guidance scale ω", "MSE");
    for (k, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for (x, y) in pts.iter() {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, frame.px(*x), frame.py(*y));
        }
        let ly = 40.0 + 18.0 * k as f64;
        let _ = writeln!(out, r#"<rect x="505" y="{:.2}" width="12" height="12" fill="{color}"/>"#, ly - 10.0);
        let _ = writeln!(out, r#"<text x="522" y="{ly:.2}" font-size="11">{}</text>"#, escape(name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Loss-difference histogram for one `t'`, correct and incorrect labels
/// overlaid. Requires `t_prime, bin_lo, bin_hi, correct, incorrect`.
pub fn histogram_svg(csv_text: &str) -> Result<String> {
    let t = Table::parse(csv_text)?;
    if t.is_empty() {
        return Err(SpfmError::Input("histogram: empty table".into()));
    }
    let t_prime = t.column_f64("t_prime")?[0];
    let lo = t.column_f64("bin_lo")?;
    let hi = t.column_f64("bin_hi")?;
    let correct = t.column_f64("correct")?;
    let incorrect = t.column_f64("incorrect")?;
    let (x_lo, _) = range(lo.iter().copied());
    let (_, x_hi) = range(hi.iter().copied());
    let y_hi = correct.iter().chain(&incorrect).fold(1.0_f64, |a, &b| a.max(b));
    let frame = Frame { x: 70.0, y: 30.0, w: 440.0, h: 260.0, x_lo, x_hi, y_lo: 0.0, y_hi: y_hi * 1.05 };
    let mut out = header(660.0, 350.0);
    let _ = writeln!(
        out,
        r#"<text x="290" y="18" font-size="13" text-anchor="middle">L_cond − L_uncond at t′ = {}</text>"#,
        t_prime
    );
    frame.axes(&mut out, "loss difference", "count");
    for (counts, color) in [(&correct, PALETTE[0]), (&incorrect, PALETTE[1])] {
        for i in 0..counts.len() {
            if counts[i] == 0.0 {
                continue;
            }
            let x0 = frame.px(lo[i]);
            let x1 = frame.px(hi[i]);
            let y = frame.py(counts[i]);
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                (x1 - x0).max(0.5),
                frame.py(0.0) - y
            );
        }
    }
    if x_lo < 0.0 && x_hi > 0.0 {
        let zx = frame.px(0.0);
        let _ = writeln!(
            out,
            r##"<line x1="{zx:.2}" y1="{:.2}" x2="{zx:.2}" y2="{:.2}" stroke="#000" stroke-dasharray="4 3"/>"##,
            frame.y,
            frame.y + frame.h
        );
    }
    let _ = writeln!(out, r#"<rect x="525" y="40" width="12" height="12" fill="{}" fill-opacity="0.5"/>"#, PALETTE[0]);
    let _ = writeln!(out, r#"<text x="542" y="50" font-size="11">correct</text>"#);
    let _ = writeln!(out, r#"<rect x="525" y="58" width="12" height="12" fill="{}" fill-opacity="0.5"/>"#, PALETTE[1]);
    let _ = writeln!(out, r#"<text x="542" y="68" font-size="11">incorrect</text>"#);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grid of generated-sample scatter plots. Each panel is `(title, csv)` with
/// `condition_angle, gen_x, gen_y, sq_error` columns; points are coloured
/// by their conditioning angle and the panel title carries the mean of
/// `sq_error`.
pub fn scatter_grid_svg(panels: &[(String, String)], columns: usize) -> Result<String> {
    if panels.is_empty() || columns == 0 {
        return Err(SpfmError::Input("scatter grid needs panels and columns".into()));
    }
    let size = 220.0;
    let pad = 30.0;
    let rows = panels.len().div_ceil(columns);
    let width = columns as f64 * (size + pad) + pad;
    let height = rows as f64 * (size + pad + 20.0) + pad;
    let mut out = header(width, height);
    for (k, (title, csv_text)) in panels.iter().enumerate() {
        let t = Table::parse(csv_text)?;
        let angle = t.column_f64("condition_angle")?;
        let gx = t.column_f64("gen_x")?;
        let gy = t.column_f64("gen_y")?;
        let err = t.column_f64("sq_error")?;
        let mse = if err.is_empty() { f64::NAN } else { err.iter().sum::<f64>() / err.len() as f64 };
        let col = (k % columns) as f64;
        let row = (k / columns) as f64;
        let frame = Frame {
            x: pad + col * (size + pad),
            y: pad + 20.0 + row * (size + pad + 20.0),
            w: size,
            h: size,
            x_lo: -3.0,
            x_hi: 3.0,
            y_lo: -3.0,
            y_hi: 3.0,
        };
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{size:.2}" height="{size:.2}" fill="none" stroke="#444"/>"##,
            frame.x, frame.y
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{} (MSE {:.4})</text>"#,
            frame.x + size / 2.0,
            frame.y - 6.0,
            escape(title),
            mse
        );
        for i in 0..gx.len() {
            let (x, y) = (gx[i], gy[i]);
            if !(frame.x_lo..=frame.x_hi).contains(&x) || !(frame.y_lo..=frame.y_hi).contains(&y) {
                continue;
            }
            let hue = angle[i].rem_euclid(std::f64::consts::TAU).to_degrees();
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="hsl({hue:.0},70%,45%)"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_chart_groups_series() {
        let csv = "dataset,model,omega,mse\nspiral,baseline,0,2\nspiral,baseline,1,1\nspiral,spfm,0,0.2\nspiral,spfm,1,0.01\n";
        let svg = mse_chart_svg(csv).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("spiral / spfm"));
        assert_eq!(svg, mse_chart_svg(csv).unwrap());
    }

    #[test]
    fn histogram_needs_columns() {
        let csv = "t_prime,bin_lo,bin_hi,correct,incorrect\n0.5,-1,0,3,0\n0.5,0,1,1,4\n";
        let svg = histogram_svg(csv).unwrap();
        assert!(svg.contains("t′ = 0.5"));
        assert_eq!(svg.matches("fill-opacity=\"0.5\"/>").count(), 3 + 2);
        assert!(histogram_svg("t_prime,bin_lo\n0.5,1\n").is_err());
    }

    #[test]
    fn scatter_grid_reports_panel_mse() {
        let panel = "condition_angle,condition_radius,gen_x,gen_y,target_x,target_y,sq_error\n0,1,1,0,1,0,0.5\n1,1,0.5,0.8,0.54,0.84,1.5\n".to_string();
        let svg = scatter_grid_svg(&[("a".into(), panel.clone()), ("b".into(), panel)], 2).unwrap();
        assert_eq!(svg.matches("MSE 1.0000").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 4);
    }
}
