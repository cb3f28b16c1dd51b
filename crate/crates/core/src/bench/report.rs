//! Report rows, CSV I/O and a grouped bar chart of mean ± stddev.

use std::fmt::Write as _;
use std::io;

use super::ScenarioResult;

pub const CSV_HEADER: [&str; 9] = [
    "scenario",
    "qos",
    "load_fraction",
    "probe_carrier",
    "load_carrier",
    "n",
    "mean_ns",
    "stddev_ns",
    "drops",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub qos: bool,
    pub load_fraction: f64,
    pub probe_carrier: String,
    pub load_carrier: String,
    pub n: usize,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub drops: u64,
}

impl BenchRow {
    fn fields(&self) -> [String; 9] {
        [
            self.scenario.clone(),
            if self.qos { "on" } else { "off" }.to_string(),
            self.load_fraction.to_string(),
            self.probe_carrier.clone(),
            self.load_carrier.clone(),
            self.n.to_string(),
            format!("{:.1}", self.mean_ns),
            format!("{:.1}", self.stddev_ns),
            self.drops.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<BenchRow, String> {
        if rec.len() != CSV_HEADER.len() {
            return Err(format!(
                "expected {} columns, got {}",
                CSV_HEADER.len(),
                rec.len()
            ));
        }
        let num = |i: usize| -> Result<f64, String> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| format!("{}: {e}", CSV_HEADER[i]))
        };
        let qos = match &rec[1] {
            "on" => true,
            "off" => false,
            other => return Err(format!("qos: {other:?}")),
        };
        Ok(BenchRow {
            scenario: rec[0].to_string(),
            qos,
            load_fraction: num(2)?,
            probe_carrier: rec[3].to_string(),
            load_carrier: rec[4].to_string(),
            n: rec[5].parse().map_err(|e| format!("n: {e}"))?,
            mean_ns: num(6)?,
            stddev_ns: num(7)?,
            drops: rec[8].parse().map_err(|e| format!("drops: {e}"))?,
        })
    }

    fn group_label(&self) -> String {
        format!(
            "{} {}% {}/{}",
            self.scenario,
            (self.load_fraction * 100.0).round(),
            self.probe_carrier,
            self.load_carrier
        )
    }
}

impl From<&ScenarioResult> for BenchRow {
    fn from(r: &ScenarioResult) -> Self {
        BenchRow {
            scenario: r.config.scenario.as_str().to_string(),
            qos: r.config.qos,
            load_fraction: r.config.load_fraction,
            probe_carrier: r.config.probe_carrier.as_str().to_string(),
            load_carrier: r.config.load_carrier.as_str().to_string(),
            n: r.summary.n,
            mean_ns: r.summary.mean_ns,
            stddev_ns: r.summary.stddev_ns,
            drops: r.drops,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, result: &ScenarioResult) {
        self.rows.push(result.into());
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record(r.fields())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes a header-less row, for streaming output.
    pub fn write_row<W: io::Write>(row: &BenchRow, w: &mut csv::Writer<W>) -> csv::Result<()> {
        w.write_record(row.fields())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn from_csv<R: io::Read>(input: R) -> Result<BenchReport, String> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers().map_err(|e| e.to_string())?;
        if headers.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(format!("unexpected header {headers:?}"));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            rows.push(BenchRow::parse(&rec.map_err(|e| e.to_string())?)?);
        }
        Ok(BenchReport { rows })
    }

    /// Grouped bars (qos off beside qos on) with stddev whiskers, in microseconds.
    pub fn to_svg(&self) -> String {
        let mut groups: Vec<(String, [Option<&BenchRow>; 2])> = Vec::new();
        for r in &self.rows {
            let label = r.group_label();
            let slot = usize::from(r.qos);
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, g)) => g[slot] = Some(r),
                None => {
                    let mut g = [None, None];
                    g[slot] = Some(r);
                    groups.push((label, g));
                }
            }
        }
        let top_us = self
            .rows
            .iter()
            .map(|r| (r.mean_ns + r.stddev_ns) / 1e3)
            .fold(1.0, f64::max)
            * 1.1;
        let (bar_w, gap, left, plot_h, top) = (28.0, 30.0, 60.0, 300.0, 30.0);
        let group_w = 2.0 * bar_w + gap;
        let width = left + groups.len() as f64 * group_w + gap;
        let height = top + plot_h + 110.0;
        let y = |us: f64| top + plot_h - us / top_us * plot_h;
        let colors = ["#9e9e9e", "#1f77b4"];

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
            top + plot_h
        );
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{0}" x2="{width:.0}" y2="{0}" stroke="black"/>"#,
            top + plot_h
        );
        for i in 0..=4 {
            let v = top_us * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
                left - 4.0,
                y(v) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="12" y="{:.0}" transform="rotate(-90 12 {:.0})" text-anchor="middle">RTT (us)</text>"#,
            top + plot_h / 2.0,
            top + plot_h / 2.0
        );
        for (gi, (label, bars)) in groups.iter().enumerate() {
            let gx = left + gap / 2.0 + gi as f64 * group_w;
            for (slot, row) in bars.iter().enumerate() {
                let Some(r) = row else { continue };
                let x = gx + slot as f64 * bar_w;
                let (m, sd) = (r.mean_ns / 1e3, r.stddev_ns / 1e3);
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    y(m),
                    bar_w - 2.0,
                    top + plot_h - y(m),
                    colors[slot]
                );
                let cx = x + (bar_w - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                    y(m + sd),
                    y((m - sd).max(0.0))
                );
            }
            let lx = gx + bar_w;
            let ly = top + plot_h + 12.0;
            let _ = writeln!(
                s,
                r#"<text x="{lx:.1}" y="{ly:.1}" transform="rotate(40 {lx:.1} {ly:.1})">{}</text>"#,
                xml_escape(label)
            );
        }
        for (i, name) in ["qos off", "qos on"].iter().enumerate() {
            let lx = left + 10.0 + i as f64 * 80.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="8" width="10" height="10" fill="{}"/>"#,
                colors[i]
            );
            let _ = writeln!(s, r#"<text x="{}" y="17">{name}</text>"#, lx + 14.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(qos: bool, mean: f64) -> BenchRow {
        BenchRow {
            scenario: "nic".into(),
            qos,
            load_fraction: 0.7,
            probe_carrier: "tcp".into(),
            load_carrier: "udp".into(),
            n: 10,
            mean_ns: mean,
            stddev_ns: 3.5,
            drops: 0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let report = BenchReport {
            rows: vec![row(false, 1200.5), row(true, 800.0)],
        };
        let text = report.to_csv_string();
        assert!(text.starts_with(
            "scenario,qos,load_fraction,probe_carrier,load_carrier,n,mean_ns,stddev_ns,drops\n"
        ));
        assert!(text.contains("nic,on,0.7,tcp,udp,10,800.0,3.5,0\n"));
        assert_eq!(BenchReport::from_csv(text.as_bytes()).unwrap(), report);
    }

    #[test]
    fn svg_has_one_bar_per_row() {
        let report = BenchReport {
            rows: vec![row(false, 1200.0), row(true, 800.0)],
        };
        let svg = report.to_svg();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("fill=\"#1f77b4\"").count(), 2);
        assert_eq!(svg.matches("fill=\"#9e9e9e\"").count(), 2);
    }
}
