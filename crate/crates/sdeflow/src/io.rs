//! File formats.
//!
//! **Grid files** hold node values of a field on a box, row-major over nodes
//! (last axis fastest) with components innermost. Periodic grids list the
//! `n` nodes `lower + j (upper - lower) / n`; non-periodic grids list
//! `lower + j (upper - lower) / (n - 1)`, endpoints included.
//!
//! CSV layout:
//!
//! ```text
//! # sdeflow-grid 1
//! # dim 2
//! # lower 0 0
//! # upper 6.283185307179586 6.283185307179586
//! # shape 32 32
//! # components 2
//! # periodic true
//! c0,c1
//! 0.0,-0.0
//! ...
//! ```
//!
//! Binary layout (little endian): magic `SDFGRID1`, `u32` dim, `u32`
//! components, `u8` periodic, 3 padding bytes, `dim` x `f64` lower,
//! `dim` x `f64` upper, `dim` x `u64` shape, then the values as `f64`.
//!
//! **Noise blobs** (little endian): magic `SDFNOISE`, `u32` version (1),
//! `u32` dim, `u64` paths, `u64` steps, `f64` t_start, `f64` t_end, `u8`
//! has_seed, 7 padding bytes, `u64` seed, then `paths * steps * dim`
//! increments as `f64`, path-major then step then component.

use std::io::Write;
use std::path::Path;

use sdeflow_core::fields::GridSampled;
use sdeflow_core::paths::StoredIncrements;
use sdeflow_core::spectral::{GridField, PeriodicGrid};
use sdeflow_core::variational::GradientEstimate;
use sdeflow_core::{NoiseSource, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const GRID_MAGIC: &[u8; 8] = b"SDFGRID1";
const NOISE_MAGIC: &[u8; 8] = b"SDFNOISE";
const NOISE_VERSION: u32 = 1;

/// Format-level view of a sampled field.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub shape: Vec<usize>,
    pub components: usize,
    pub periodic: bool,
    /// Node-major, components innermost.
    pub values: Vec<f64>,
}

impl GridFile {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn nodes(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.upper.len() != d || self.shape.len() != d {
            return Err(CliError::format(
                "grid",
                "lower, upper and shape disagree on the dimension",
            ));
        }
        if self.components == 0 || self.values.len() != self.nodes() * self.components {
            return Err(CliError::format(
                "grid",
                format!(
                    "expected {} values, found {}",
                    self.nodes() * self.components,
                    self.values.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn from_field(f: &GridField) -> Self {
        let g = f.grid();
        let n = g.len();
        let c = f.components();
        let mut values = vec![0.0; n * c];
        for comp in 0..c {
            for (idx, v) in f.component(comp).iter().enumerate() {
                values[idx * c + comp] = *v;
            }
        }
        Self {
            lower: g.origin().to_vec(),
            upper: g.origin().iter().map(|o| o + g.length()).collect(),
            shape: g.shape().to_vec(),
            components: c,
            periodic: true,
            values,
        }
    }

    pub fn to_field(&self) -> Result<GridField> {
        self.validate()?;
        if !self.periodic {
            return Err(CliError::format(
                "grid",
                "a torus field needs a periodic grid file",
            ));
        }
        let length = self.upper[0] - self.lower[0];
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| ((u - l) - length).abs() > 1e-12 * length.abs().max(1.0))
        {
            return Err(CliError::format(
                "grid",
                "torus fields need equal side lengths",
            ));
        }
        let grid = PeriodicGrid::new(self.lower.clone(), length, self.shape.clone())
            .map_err(|e| CliError::format("grid", e.to_string()))?;
        let n = self.nodes();
        let c = self.components;
        let mut values = vec![0.0; n * c];
        for idx in 0..n {
            for comp in 0..c {
                values[comp * n + idx] = self.values[idx * c + comp];
            }
        }
        GridField::new(grid, c, values).map_err(|e| CliError::format("grid", e.to_string()))
    }

    pub fn from_sampled(f: &GridSampled) -> Self {
        Self {
            lower: f.lower().to_vec(),
            upper: f.upper().to_vec(),
            shape: f.shape().to_vec(),
            components: f.components(),
            periodic: false,
            values: f.values().to_vec(),
        }
    }

    pub fn to_sampled(&self) -> Result<GridSampled> {
        self.validate()?;
        if self.periodic {
            return Err(CliError::format(
                "grid",
                "a box-sampled field needs a non-periodic grid file",
            ));
        }
        GridSampled::new(
            self.lower.clone(),
            self.upper.clone(),
            self.shape.clone(),
            self.components,
            self.values.clone(),
        )
        .map_err(|e| CliError::format("grid", e.to_string()))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "# sdeflow-grid 1");
        let _ = writeln!(out, "# dim {}", self.dim());
        let _ = writeln!(out, "# lower {}", join(&self.lower));
        let _ = writeln!(out, "# upper {}", join(&self.upper));
        let shape: Vec<String> = self.shape.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "# shape {}", shape.join(" "));
        let _ = writeln!(out, "# components {}", self.components);
        let _ = writeln!(out, "# periodic {}", self.periodic);
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.components).map(|c| format!("c{c}")).collect();
        w.write_record(&header).map_err(csv_err)?;
        for row in self.values.chunks(self.components) {
            w.serialize(row).map_err(csv_err)?;
        }
        w.into_inner()
            .map_err(|e| CliError::format("grid csv", e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let text =
            std::str::from_utf8(bytes).map_err(|e| CliError::format("grid csv", e.to_string()))?;
        let mut header = std::collections::HashMap::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else {
                break;
            };
            body_start += line.len();
            let mut parts = rest.split_whitespace();
            if let Some(key) = parts.next() {
                header.insert(
                    key.to_string(),
                    parts.map(str::to_string).collect::<Vec<_>>(),
                );
            }
        }
        let field = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| CliError::format("grid csv", format!("missing header line '{k}'")))
        };
        if field("sdeflow-grid")?.first().map(String::as_str) != Some("1") {
            return Err(CliError::format("grid csv", "unsupported version"));
        }
        let floats = |k: &str| -> Result<Vec<f64>> {
            field(k)?
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| CliError::format("grid csv", format!("bad number in '{k}'")))
                })
                .collect()
        };
        let ints = |k: &str| -> Result<Vec<usize>> {
            field(k)?
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| CliError::format("grid csv", format!("bad integer in '{k}'")))
                })
                .collect()
        };
        let dim = ints("dim")?;
        let components = ints("components")?;
        let periodic = match field("periodic")?.first().map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            _ => {
                return Err(CliError::format(
                    "grid csv",
                    "periodic must be true or false",
                ))
            }
        };
        let (lower, upper, shape) = (floats("lower")?, floats("upper")?, ints("shape")?);
        if dim.len() != 1 || dim[0] != lower.len() || components.len() != 1 {
            return Err(CliError::format(
                "grid csv",
                "inconsistent dim or components",
            ));
        }
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(&bytes[body_start..]);
        let mut values = Vec::new();
        for rec in rd.deserialize::<Vec<f64>>() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != components[0] {
                return Err(CliError::format(
                    "grid csv",
                    "row width differs from components",
                ));
            }
            values.extend(rec);
        }
        let g = Self {
            lower,
            upper,
            shape,
            components: components[0],
            periodic,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_binary(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(32 + 24 * self.dim() + 8 * self.values.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.components as u32).to_le_bytes());
        out.extend_from_slice(&[self.periodic as u8, 0, 0, 0]);
        self.lower
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.upper
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.shape
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as u64).to_le_bytes()));
        self.values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        Ok(out)
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes, "grid binary");
        if r.take(8)? != GRID_MAGIC {
            return Err(CliError::format("grid binary", "bad magic"));
        }
        let dim = r.u32()? as usize;
        let components = r.u32()? as usize;
        let periodic = r.take(4)?[0] != 0;
        if dim == 0 || dim > 8 {
            return Err(CliError::format("grid binary", "dimension out of range"));
        }
        let lower = r.f64s(dim)?;
        let upper = r.f64s(dim)?;
        let shape = (0..dim)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(components, |acc, s| acc.checked_mul(*s))
            .ok_or_else(|| CliError::format("grid binary", "size overflow"))?;
        let values = r.f64s(count)?;
        r.finish()?;
        let g = Self {
            lower,
            upper,
            shape,
            components,
            periodic,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    /// Reads either layout, choosing by the magic bytes.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        if bytes.starts_with(GRID_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            Self::from_csv(&bytes)
        }
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::format("csv", e.to_string())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| CliError::format(self.what, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CliError::format(self.what, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(CliError::format(self.what, "trailing bytes"))
        }
    }
}

/// Serializes the increments of `noise` as a noise blob.
pub fn write_noise(noise: &dyn NoiseSource) -> Vec<u8> {
    let grid = noise.grid();
    let stored = StoredIncrements::from_noise(noise);
    let mut out = Vec::with_capacity(64 + 8 * stored.data().len());
    out.extend_from_slice(NOISE_MAGIC);
    out.extend_from_slice(&NOISE_VERSION.to_le_bytes());
    out.extend_from_slice(&(noise.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(noise.n_paths() as u64).to_le_bytes());
    out.extend_from_slice(&(grid.steps() as u64).to_le_bytes());
    out.extend_from_slice(&grid.t_start().to_le_bytes());
    out.extend_from_slice(&grid.t_end().to_le_bytes());
    let seed = noise.seed();
    out.extend_from_slice(&[seed.is_some() as u8, 0, 0, 0, 0, 0, 0, 0]);
    out.extend_from_slice(&seed.unwrap_or(0).to_le_bytes());
    stored
        .data()
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn read_noise(bytes: &[u8]) -> Result<StoredIncrements> {
    let mut r = Cursor::new(bytes, "noise blob");
    if r.take(8)? != NOISE_MAGIC {
        return Err(CliError::format("noise blob", "bad magic"));
    }
    if r.u32()? != NOISE_VERSION {
        return Err(CliError::format("noise blob", "unsupported version"));
    }
    let dim = r.u32()? as usize;
    let n_paths = r.u64()? as usize;
    let steps = r.u64()? as usize;
    let (t0, t1) = (r.f64()?, r.f64()?);
    let has_seed = r.take(8)?[0] != 0;
    let seed = r.u64()?;
    let count = n_paths
        .checked_mul(steps)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| CliError::format("noise blob", "size overflow"))?;
    let data = r.f64s(count)?;
    r.finish()?;
    let grid =
        TimeGrid::new(t0, t1, steps).map_err(|e| CliError::format("noise blob", e.to_string()))?;
    StoredIncrements::new(grid, n_paths, dim, has_seed.then_some(seed), data)
        .map_err(|e| CliError::format("noise blob", e.to_string()))
}

/// One result line: `(experiment, parameter, statistic, value, std_error)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub parameter: String,
    pub statistic: String,
    pub value: f64,
    pub std_error: Option<f64>,
}

impl ResultRow {
    pub fn new(
        experiment: &str,
        parameter: impl Into<String>,
        statistic: &str,
        value: f64,
    ) -> Self {
        Self {
            experiment: experiment.to_string(),
            parameter: parameter.into(),
            statistic: statistic.to_string(),
            value,
            std_error: None,
        }
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["experiment", "parameter", "statistic", "value", "std_error"])
            .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| CliError::format("csv", e.to_string()))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

/// Gradient payload `{point, horizon, estimate[], std_error[], n_paths, dt}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientJson {
    pub point: Vec<f64>,
    pub horizon: f64,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
}

impl From<&GradientEstimate> for GradientJson {
    fn from(g: &GradientEstimate) -> Self {
        Self {
            point: g.point.clone(),
            horizon: g.horizon,
            estimate: g.estimate.clone(),
            std_error: g.std_error.clone(),
            n_paths: g.n_paths,
            dt: g.dt,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable value");
    out.push(b'\n');
    out
}
