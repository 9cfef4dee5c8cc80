//! On-disk formats. Tables are CSV with a header row and numbers written
//! with 12 significant digits; every directory-producing command also
//! leaves a `meta.json`.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backward_filter::{BackwardFilterSolution, FilterOptions, LinearGuide};
use crate::error::{Error, Result};
use crate::models::{build_guide, build_model};
use crate::sde::{ModelSpec, ObservationRecord, Path, TimeGrid};
use crate::variational::GuideParams;

/// 12 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.11e}")
}

fn format_err(path: &FsPath, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn csv_err(path: &FsPath, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => format_err(path, format!("{other:?}")),
    }
}

pub fn ensure_dir(dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn ensure_parent(path: &FsPath) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

pub fn write_table(
    path: &FsPath,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Header and numeric rows.
pub fn read_table(path: &FsPath) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(format_err(path, "file does not exist"));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format_err(path, format!("row {}: `{s}` is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(format_err(
                path,
                format!("row {} has {} fields", i + 1, row.len()),
            ));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Wide format: `t`, then `{prefix}1 .. {prefix}d`.
pub fn write_path(path: &FsPath, p: &Path, prefix: &str) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=p.dim()).map(|i| format!("{prefix}{i}")));
    let rows = (0..p.grid.n_nodes()).map(|k| {
        let mut row = vec![fmt_num(p.grid.time(k))];
        row.extend(p.values.column(k).iter().map(|v| fmt_num(*v)));
        row
    });
    write_table(path, &header, rows)
}

pub fn read_path(path: &FsPath, grid: TimeGrid) -> Result<Path> {
    let (header, rows) = read_table(path)?;
    if rows.len() != grid.n_nodes() {
        return Err(format_err(
            path,
            format!("expected {} rows, found {}", grid.n_nodes(), rows.len()),
        ));
    }
    let d = header.len().saturating_sub(1);
    let mut values = DMatrix::zeros(d, rows.len());
    for (k, row) in rows.iter().enumerate() {
        if (row[0] - grid.time(k)).abs() > 1e-9 * grid.t_end().max(1.0) {
            return Err(format_err(
                path,
                format!("row {k}: time {} off the grid", row[0]),
            ));
        }
        for i in 0..d {
            values[(i, k)] = row[i + 1];
        }
    }
    Path::new(grid, values)
}

pub fn write_vector(path: &FsPath, name: &str, v: &DVector<f64>) -> Result<()> {
    let header = vec!["index".to_string(), name.to_string()];
    write_table(
        path,
        &header,
        v.iter()
            .enumerate()
            .map(|(i, x)| vec![(i + 1).to_string(), fmt_num(*x)]),
    )
}

pub fn read_vector(path: &FsPath) -> Result<DVector<f64>> {
    let (header, rows) = read_table(path)?;
    if header.len() != 2 {
        return Err(format_err(path, "expected columns index,value"));
    }
    Ok(DVector::from_iterator(
        rows.len(),
        rows.iter().map(|r| r[1]),
    ))
}

pub fn write_matrix(path: &FsPath, m: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("c{j}")).collect();
    write_table(
        path,
        &header,
        m.row_iter()
            .map(|r| r.iter().map(|v| fmt_num(*v)).collect()),
    )
}

pub fn read_matrix(path: &FsPath) -> Result<DMatrix<f64>> {
    let (header, rows) = read_table(path)?;
    Ok(DMatrix::from_fn(rows.len(), header.len(), |i, j| {
        rows[i][j]
    }))
}

pub fn write_json(path: &FsPath, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Seconds since the Unix epoch.
pub fn timestamp() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `meta.json` of an observation directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservationMeta {
    pub model: String,
    pub d: usize,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
    pub seeds: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub parameters: serde_json::Value,
    #[serde(default)]
    pub version: String,
    #[serde(default)]
    pub timestamp: f64,
}

/// A loaded observation directory.
#[derive(Debug, Clone)]
pub struct ObservationData {
    pub meta: ObservationMeta,
    pub model: ModelSpec,
    pub grid: TimeGrid,
    pub obs: ObservationRecord,
    /// The latent path, when the directory holds a simulated data set.
    pub truth: Option<Path>,
}

pub fn save_observation(
    dir: &FsPath,
    meta: &ObservationMeta,
    x: &Path,
    obs: &ObservationRecord,
) -> Result<()> {
    ensure_dir(dir)?;
    write_path(&dir.join("x.csv"), x, "x")?;
    write_path(&dir.join("y.csv"), &obs.y_path, "y")?;
    if let Some(z) = &obs.zeta {
        write_vector(&dir.join("zeta.csv"), "zeta", z)?;
    }
    write_json(&dir.join("meta.json"), meta)
}

pub fn load_observation(dir: &FsPath) -> Result<ObservationData> {
    let meta: ObservationMeta = read_json(&dir.join("meta.json"))?;
    let model = build_model(&meta.model, meta.d)?;
    let grid = TimeGrid::new(meta.t_end, meta.steps)?;
    let y = read_path(&dir.join("y.csv"), grid)?;
    if y.dim() != model.dim_y() {
        return Err(format_err(
            &dir.join("y.csv"),
            "observation dimension differs from the model",
        ));
    }
    let zeta_path = dir.join("zeta.csv");
    let zeta = if zeta_path.exists() {
        Some(read_vector(&zeta_path)?)
    } else {
        None
    };
    let x_path = dir.join("x.csv");
    let truth = if x_path.exists() {
        Some(read_path(&x_path, grid)?)
    } else {
        None
    };
    let obs = ObservationRecord::new(y, zeta)?;
    Ok(ObservationData {
        meta,
        model,
        grid,
        obs,
        truth,
    })
}

/// Registry name, or `file:<theta.csv>` for fitted parameters.
pub fn resolve_guide(spec: &str, model: &ModelSpec) -> Result<LinearGuide> {
    match spec.strip_prefix("file:") {
        Some(file) => {
            let theta = read_vector(FsPath::new(file))?;
            let params = GuideParams::new(model.dim_x(), theta)?;
            let sigma = model
                .dynamics
                .constant_dispersion()
                .ok_or_else(|| Error::config("fitted guides need a constant dispersion"))?;
            Ok(params.to_guide(sigma.clone()))
        }
        None => build_guide(spec, model),
    }
}

/// Sidecar of a filter file: the guide it was solved for and the grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FilterMeta {
    pub guide: String,
    pub d: usize,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
    pub kappa: f64,
    pub terminal_matches_likelihood: bool,
    /// Row-major `B`.
    pub b: Vec<f64>,
    pub m: Vec<f64>,
    /// Row-major `σ̃`, `d × sigma_cols`.
    pub sigma: Vec<f64>,
    pub sigma_cols: usize,
    #[serde(default)]
    pub version: String,
}

pub fn filter_meta_path(path: &FsPath) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Columns `t, nu1..nud, P11..Pdd (row-major), logC`.
pub fn write_filter(
    path: &FsPath,
    sol: &BackwardFilterSolution,
    guide_name: &str,
    guide: &LinearGuide,
    opts: FilterOptions,
) -> Result<()> {
    let d = sol.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("nu{i}")));
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("P{i}_{j}"));
        }
    }
    header.push("logC".into());
    let grid = sol.grid;
    let rows = (0..grid.n_nodes()).map(|k| {
        let mut row = vec![fmt_num(grid.time(k))];
        row.extend(sol.nu[k].iter().map(|v| fmt_num(*v)));
        row.extend(row_major(&sol.p[k]).into_iter().map(fmt_num));
        row.push(fmt_num(sol.log_c[k]));
        row
    });
    write_table(path, &header, rows)?;
    let b = guide
        .b
        .as_constant()
        .ok_or_else(|| Error::config("only time-constant guides can be stored"))?;
    let m = guide.m.as_constant().expect("constant with b");
    let sigma = guide.sigma.as_constant().expect("constant with b");
    let meta = FilterMeta {
        guide: guide_name.to_string(),
        d,
        t_end: grid.t_end(),
        steps: grid.n_steps(),
        kappa: opts.kappa,
        terminal_matches_likelihood: sol.terminal_matches_likelihood(),
        b: row_major(b),
        m: m.as_slice().to_vec(),
        sigma: row_major(sigma),
        sigma_cols: sigma.ncols(),
        version: VERSION.into(),
    };
    write_json(&filter_meta_path(path), &meta)
}

pub fn read_filter(path: &FsPath) -> Result<(BackwardFilterSolution, LinearGuide, FilterMeta)> {
    let meta: FilterMeta = read_json(&filter_meta_path(path))?;
    let d = meta.d;
    let grid = TimeGrid::new(meta.t_end, meta.steps)?;
    let (header, rows) = read_table(path)?;
    if header.len() != 2 + d + d * d {
        return Err(format_err(
            path,
            format!("expected {} columns", 2 + d + d * d),
        ));
    }
    if rows.len() != grid.n_nodes() {
        return Err(format_err(
            path,
            format!("expected {} rows", grid.n_nodes()),
        ));
    }
    let mut nu = Vec::with_capacity(rows.len());
    let mut p = Vec::with_capacity(rows.len());
    let mut log_c = Vec::with_capacity(rows.len());
    for row in &rows {
        nu.push(DVector::from_column_slice(&row[1..1 + d]));
        p.push(DMatrix::from_row_slice(d, d, &row[1 + d..1 + d + d * d]));
        log_c.push(row[1 + d + d * d]);
    }
    let sol =
        BackwardFilterSolution::from_parts(grid, nu, p, log_c, meta.terminal_matches_likelihood)?;
    if meta.b.len() != d * d || meta.m.len() != d || meta.sigma.len() != d * meta.sigma_cols {
        return Err(format_err(
            &filter_meta_path(path),
            "guide coefficients have the wrong size",
        ));
    }
    let guide = LinearGuide::constant(
        DMatrix::from_row_slice(d, d, &meta.b),
        DVector::from_column_slice(&meta.m),
        DMatrix::from_row_slice(d, meta.sigma_cols, &meta.sigma),
    );
    Ok((sol, guide, meta))
}
