//! Text formats: model files and point CSVs.
//!
//! A model file is line oriented. Header lines are `key value`; parameters
//! follow one per line with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::atlas::Atlas;
use crate::error::{Error, Result};
use crate::flows::{ChartFlow, FlowConfig};
use crate::points::Points;

pub const ATLAS_MAGIC: &str = "chartflow-atlas";
pub const FLOW_MAGIC: &str = "chartflow-flow";
pub const FORMAT_VERSION: u32 = 1;

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            iter: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next non-empty, non-comment line.
    fn next(&mut self) -> Result<&'a str> {
        for (i, l) in self.iter.by_ref() {
            self.line = i + 1;
            let l = l.trim();
            if !l.is_empty() && !l.starts_with('#') {
                return Ok(l);
            }
        }
        Err(self.err("unexpected end of file"))
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let l = self.next()?;
        if l != want {
            return Err(self.err(format!("expected '{want}', found '{l}'")));
        }
        Ok(())
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let l = self.next()?;
        let (k, v) = l
            .split_once(char::is_whitespace)
            .ok_or_else(|| self.err(format!("expected '{key} <value>', found '{l}'")))?;
        if k != key {
            return Err(self.err(format!("expected key '{key}', found '{k}'")));
        }
        v.trim()
            .parse()
            .map_err(|e| self.err(format!("bad value for '{key}': {e}")))
    }

    fn magic(&mut self, magic: &str) -> Result<()> {
        let l = self.next()?;
        if l != magic {
            return Err(self.err(format!("not a {magic} document (found '{l}')")));
        }
        let version: u32 = self.field("version")?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }
}

fn write_flow(s: &mut String, f: &ChartFlow) {
    let c = &f.layout.config;
    let _ = writeln!(s, "{FLOW_MAGIC}");
    let _ = writeln!(s, "version {FORMAT_VERSION}");
    let _ = writeln!(s, "latent_dim {}", c.latent_dim);
    let _ = writeln!(s, "ambient_dim {}", c.ambient_dim);
    let _ = writeln!(s, "g_layers {}", c.g_layers);
    let _ = writeln!(s, "h_layers {}", c.h_layers);
    let _ = writeln!(s, "hidden {}", c.hidden);
    let _ = writeln!(s, "s_max {:.16e}", c.s_max);
    let _ = writeln!(s, "params {}", f.params.len());
    for p in &f.params {
        let _ = writeln!(s, "{p:.16e}");
    }
    let _ = writeln!(s, "end");
}

fn read_flow(lines: &mut Lines) -> Result<ChartFlow> {
    lines.magic(FLOW_MAGIC)?;
    let config = FlowConfig {
        latent_dim: lines.field("latent_dim")?,
        ambient_dim: lines.field("ambient_dim")?,
        g_layers: lines.field("g_layers")?,
        h_layers: lines.field("h_layers")?,
        hidden: lines.field("hidden")?,
        s_max: lines.field("s_max")?,
    };
    let n: usize = lines.field("params")?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let l = lines.next()?;
        let v: f64 = l
            .parse()
            .map_err(|e| lines.err(format!("bad parameter '{l}': {e}")))?;
        if !v.is_finite() {
            return Err(lines.err("non-finite parameter"));
        }
        params.push(v);
    }
    lines.expect("end")?;
    let flow = ChartFlow::new(config, 0)?;
    ChartFlow::from_parts(flow.layout, params)
}

impl ChartFlow {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_flow(&mut s, self);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        read_flow(&mut Lines::new(text))
    }
}

impl Atlas {
    /// Header with the atlas hyperparameters, then one flow block per chart.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{ATLAS_MAGIC}");
        let _ = writeln!(s, "version {FORMAT_VERSION}");
        let _ = writeln!(s, "charts {}", self.n_charts());
        let _ = writeln!(s, "latent_dim {}", self.latent_dim());
        let _ = writeln!(s, "ambient_dim {}", self.ambient_dim());
        let _ = writeln!(s, "resp_threshold {:.16e}", self.resp_threshold);
        let _ = writeln!(s, "lambda_recon {:.16e}", self.lambda_recon);
        let _ = writeln!(s, "lambda_balance {:.16e}", self.lambda_balance);
        let _ = writeln!(s, "data_radius {:.16e}", self.data_radius);
        for c in &self.charts {
            write_flow(&mut s, c);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        lines.magic(ATLAS_MAGIC)?;
        let n: usize = lines.field("charts")?;
        let d: usize = lines.field("latent_dim")?;
        let big_d: usize = lines.field("ambient_dim")?;
        let resp_threshold = lines.field("resp_threshold")?;
        let lambda_recon = lines.field("lambda_recon")?;
        let lambda_balance = lines.field("lambda_balance")?;
        let data_radius = lines.field("data_radius")?;
        let charts = (0..n)
            .map(|_| read_flow(&mut lines))
            .collect::<Result<Vec<_>>>()?;
        let mut atlas = Atlas::from_charts(charts)?;
        if atlas.latent_dim() != d || atlas.ambient_dim() != big_d {
            return Err(Error::Parse {
                line: 0,
                msg: "chart dimensions disagree with the atlas header".into(),
            });
        }
        atlas.resp_threshold = resp_threshold;
        atlas.lambda_recon = lambda_recon;
        atlas.lambda_balance = lambda_balance;
        atlas.data_radius = data_radius;
        Ok(atlas)
    }
}

/// Writes `# key=value` comment lines, a `x0,x1,...` header and one row per
/// point with 17 significant digits.
pub fn write_points_csv<W: Write>(
    mut w: W,
    points: &Points,
    meta: &[(&str, String)],
) -> Result<()> {
    let mut s = String::new();
    for (k, v) in meta {
        let _ = writeln!(s, "# {k}={v}");
    }
    let header: Vec<String> = (0..points.dim()).map(|i| format!("x{i}")).collect();
    let _ = writeln!(s, "{}", header.join(","));
    for row in points.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Reads a point CSV. Comment lines start with `#`; a first line that does
/// not parse as numbers is taken as the header.
pub fn read_points_csv<R: BufRead>(r: R) -> Result<Points> {
    let mut out: Option<Points> = None;
    let mut seen_data = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let row = match cells {
            Ok(row) => row,
            Err(e) => {
                if !seen_data && out.is_none() {
                    seen_data = true;
                    continue;
                }
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("bad number: {e}"),
                });
            }
        };
        seen_data = true;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "non-finite value".into(),
            });
        }
        let pts = out.get_or_insert_with(|| Points::new(row.len()));
        if row.len() != pts.dim() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} columns, got {}", pts.dim(), row.len()),
            });
        }
        pts.push(&row)?;
    }
    out.ok_or_else(|| Error::Validation("no data rows".into()))
}
