//! Legacy ASCII VTK export and import of mesh fields, and CSV telemetry.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::IoError;
use crate::fem::{ElementField, NodalField};
use crate::mesh::TriMesh;
use crate::metrics::Psnr;
use crate::tpg::{SubstepRecord, SweepRecord};

pub const RESIDUAL_HEADER: [&str; 5] = ["sweep", "substep", "residual", "lambda", "mu"];
pub const SWEEP_HEADER: [&str; 6] = ["sweep", "residual_sq_sum", "bregman", "e_l1", "psnr", "lambda_sum"];

/// Renders an unstructured grid with nodal fields as `POINT_DATA` and
/// element fields as `CELL_DATA`. Floats use shortest round-trip formatting.
pub fn vtk_string(
    mesh: &TriMesh,
    title: &str,
    point: &[(&str, &NodalField)],
    cell: &[(&str, &ElementField)],
) -> String {
    let np = mesh.node_count();
    let nt = mesh.triangle_count();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.lines().next().unwrap_or(""));
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS {np} double");
    for p in mesh.nodes() {
        let _ = writeln!(s, "{:?} {:?} 0", p[0], p[1]);
    }
    let _ = writeln!(s, "CELLS {nt} {}", 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }
    let mut block = |kind: &str, count: usize, fields: Vec<(&str, &[f64])>| {
        if fields.is_empty() {
            return;
        }
        let _ = writeln!(s, "{kind} {count}");
        for (name, values) in fields {
            let _ = writeln!(s, "SCALARS {} double 1\nLOOKUP_TABLE default", name.replace(char::is_whitespace, "_"));
            for v in values {
                let _ = writeln!(s, "{v:?}");
            }
        }
    };
    block("POINT_DATA", np, point.iter().map(|(n, f)| (*n, f.values.as_slice())).collect());
    block("CELL_DATA", nt, cell.iter().map(|(n, f)| (*n, f.values.as_slice())).collect());
    s
}

pub fn write_vtk(
    path: &Path,
    mesh: &TriMesh,
    title: &str,
    point: &[(&str, &NodalField)],
    cell: &[(&str, &ElementField)],
) -> Result<(), IoError> {
    std::fs::write(path, vtk_string(mesh, title, point, cell))?;
    Ok(())
}

/// Contents of a legacy VTK unstructured grid made of triangles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VtkData {
    pub title: String,
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u8>,
    pub point_data: Vec<(String, Vec<f64>)>,
    pub cell_data: Vec<(String, Vec<f64>)>,
}

impl VtkData {
    pub fn point_field(&self, name: &str) -> Option<&[f64]> {
        self.point_data.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn cell_field(&self, name: &str) -> Option<&[f64]> {
        self.cell_data.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

struct Tokens<'a> {
    path: String,
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    pending: std::vec::IntoIter<&'a str>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn err(&self, message: impl Into<String>) -> IoError {
        IoError::Parse { path: self.path.clone(), line: self.line, message: message.into() }
    }

    fn next(&mut self) -> Option<&'a str> {
        loop {
            if let Some(t) = self.pending.next() {
                return Some(t);
            }
            let (k, l) = self.lines.next()?;
            self.line = k + 1;
            self.pending = l.split_whitespace().collect::<Vec<_>>().into_iter();
        }
    }

    fn expect(&mut self, what: &str) -> Result<&'a str, IoError> {
        self.next().ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), IoError> {
        let t = self.expect(kw)?;
        if t.eq_ignore_ascii_case(kw) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{kw}`, found `{t}`")))
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let t = self.expect(what)?;
        t.parse().map_err(|_| self.err(format!("invalid {what} `{t}`")))
    }
}

/// Parses the subset of legacy ASCII VTK written by [`vtk_string`]:
/// an unstructured grid with scalar point and cell data.
pub fn parse_vtk(text: &str, path: &str) -> Result<VtkData, IoError> {
    let mut lines = text.lines().enumerate().peekable();
    let parse_err = |line, message: &str| IoError::Parse { path: path.into(), line, message: message.into() };
    match lines.next() {
        Some((_, l)) if l.starts_with("# vtk DataFile") => {}
        _ => return Err(parse_err(1, "missing `# vtk DataFile` header")),
    }
    let title = lines.next().map(|(_, l)| l.to_string()).ok_or_else(|| parse_err(2, "missing title"))?;
    let mut tk = Tokens { path: path.into(), lines, pending: Vec::new().into_iter(), line: 2 };
    tk.keyword("ASCII")?;
    tk.keyword("DATASET")?;
    tk.keyword("UNSTRUCTURED_GRID")?;
    tk.keyword("POINTS")?;
    let np: usize = tk.parse("point count")?;
    tk.expect("point type")?;
    let mut data = VtkData { title, ..VtkData::default() };
    for _ in 0..np {
        data.points.push([tk.parse("coordinate")?, tk.parse("coordinate")?, tk.parse("coordinate")?]);
    }
    tk.keyword("CELLS")?;
    let nc: usize = tk.parse("cell count")?;
    tk.parse::<usize>("cell list size")?;
    for _ in 0..nc {
        let k: usize = tk.parse("cell size")?;
        let mut cell = Vec::with_capacity(k);
        for _ in 0..k {
            let v: usize = tk.parse("cell index")?;
            if v >= np {
                return Err(tk.err(format!("cell index {v} out of range")));
            }
            cell.push(v);
        }
        data.cells.push(cell);
    }
    tk.keyword("CELL_TYPES")?;
    if tk.parse::<usize>("cell type count")? != nc {
        return Err(tk.err("cell type count differs from cell count"));
    }
    for _ in 0..nc {
        data.cell_types.push(tk.parse("cell type")?);
    }
    let mut section: Option<(bool, usize)> = None;
    while let Some(t) = tk.next() {
        match t.to_ascii_uppercase().as_str() {
            "POINT_DATA" => {
                let n: usize = tk.parse("point data count")?;
                if n != np {
                    return Err(tk.err("POINT_DATA count differs from point count"));
                }
                section = Some((true, n));
            }
            "CELL_DATA" => {
                let n: usize = tk.parse("cell data count")?;
                if n != nc {
                    return Err(tk.err("CELL_DATA count differs from cell count"));
                }
                section = Some((false, n));
            }
            "SCALARS" => {
                let (is_point, n) = section.ok_or_else(|| tk.err("SCALARS outside a data section"))?;
                let name = tk.expect("field name")?.to_string();
                tk.expect("field type")?;
                let mut next = tk.expect("LOOKUP_TABLE")?;
                if next.parse::<usize>().is_ok() {
                    next = tk.expect("LOOKUP_TABLE")?;
                }
                if !next.eq_ignore_ascii_case("LOOKUP_TABLE") {
                    return Err(tk.err(format!("expected `LOOKUP_TABLE`, found `{next}`")));
                }
                tk.expect("lookup table name")?;
                let values = (0..n).map(|_| tk.parse::<f64>("value")).collect::<Result<Vec<_>, _>>()?;
                if is_point {
                    data.point_data.push((name, values));
                } else {
                    data.cell_data.push((name, values));
                }
            }
            other => return Err(tk.err(format!("unsupported section `{other}`"))),
        }
    }
    Ok(data)
}

pub fn read_vtk(path: &Path) -> Result<VtkData, IoError> {
    let text = std::fs::read_to_string(path)?;
    parse_vtk(&text, &path.display().to_string())
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IoError::Io(io),
        kind => IoError::Parse { path: path.display().to_string(), line, message: format!("{kind:?}") },
    }
}

/// Writes one row per sub-step; an empty slice gives a header-only file.
pub fn write_residuals_csv(path: &Path, records: &[SubstepRecord]) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(RESIDUAL_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_residuals_csv(path: &Path) -> Result<Vec<SubstepRecord>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(RESIDUAL_HEADER) {
        return Err(IoError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize().collect::<Result<Vec<SubstepRecord>, _>>().map_err(|e| csv_err(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepRow {
    sweep: usize,
    residual_sq_sum: f64,
    bregman: Option<f64>,
    e_l1: Option<f64>,
    /// dB value, `exact`, or empty.
    psnr: Option<String>,
    lambda_sum: f64,
}

pub fn write_sweeps_csv(path: &Path, records: &[SweepRecord]) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SWEEP_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        let row = SweepRow {
            sweep: r.sweep,
            residual_sq_sum: r.residual_sq_sum,
            bregman: r.bregman,
            e_l1: r.e_l1,
            psnr: r.psnr.map(|p| match p {
                Psnr::Db(v) => format!("{v:?}"),
                Psnr::Exact(_) => "exact".into(),
            }),
            lambda_sum: r.lambda_sum,
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweeps_csv(path: &Path) -> Result<Vec<SweepRecord>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<SweepRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let psnr = match row.psnr.as_deref() {
            None | Some("") => None,
            Some("exact") => Some(Psnr::Exact(crate::metrics::ExactTag::Exact)),
            Some(v) => Some(Psnr::Db(v.parse().map_err(|_| IoError::Parse {
                path: path.display().to_string(),
                line: out.len() + 2,
                message: format!("invalid psnr `{v}`"),
            })?)),
        };
        out.push(SweepRecord {
            sweep: row.sweep,
            residual_sq_sum: row.residual_sq_sum,
            bregman: row.bregman,
            e_l1: row.e_l1,
            psnr,
            lambda_sum: row.lambda_sum,
        });
    }
    Ok(out)
}
