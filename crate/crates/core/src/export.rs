//! Embedding tables, 2-D projections and scatter plots.
//!
//! Embedding CSV: `record_id,cat_id,entity_id,e0,...,e{E-1}`. Projection CSV
//! (also the external projector's stdout): `id,x,y`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::embed_dataset;
use crate::network::InferenceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub record_id: String,
    pub cat_id: String,
    pub entity_id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<EmbeddingRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.vector.len() != dim) {
            return Err(Error::Validation(format!(
                "row {} has {} values, table width is {dim}",
                r.record_id,
                r.vector.len()
            )));
        }
        Ok(EmbeddingTable { dim, rows })
    }

    pub fn from_dataset(dataset: &Dataset, dim: usize, embeddings: Vec<Vec<f32>>) -> Result<Self> {
        let rows = embeddings
            .into_iter()
            .enumerate()
            .map(|(i, vector)| EmbeddingRow {
                record_id: dataset.records[i].record_id(),
                cat_id: dataset.records[i].cat_id.clone(),
                entity_id: dataset.entity_of[i].to_string(),
                vector,
            })
            .collect();
        Self::new(dim, rows)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["record_id".to_string(), "cat_id".into(), "entity_id".into()];
        h.extend((0..self.dim).map(|i| format!("e{i}")));
        h
    }

    pub fn write_csv_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.record_id.clone(), r.cat_id.clone(), r.entity_id.clone()];
            // shortest representation that parses back to the same f32
            rec.extend(r.vector.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let fixed = ["record_id", "cat_id", "entity_id"];
        if header.len() < 3 || header.iter().take(3).ne(fixed) {
            return Err(Error::Validation(format!("{}: not an embedding table", path.display())));
        }
        let dim = header.len() - 3;
        for (i, name) in header.iter().skip(3).enumerate() {
            if name != format!("e{i}") {
                return Err(Error::Validation(format!("{}: unexpected column {name}", path.display())));
            }
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let vector = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f32>().map_err(|_| Error::Validation(format!("bad value {v}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(EmbeddingRow {
                record_id: rec[0].to_string(),
                cat_id: rec[1].to_string(),
                entity_id: rec[2].to_string(),
                vector,
            });
        }
        Self::new(dim, rows)
    }
}

/// Embeds every record with the full stream and writes the table to `path`.
pub fn export_embeddings(model: &InferenceModel, dataset: &Dataset, path: &Path) -> Result<EmbeddingTable> {
    if dataset.is_empty() {
        log::warn!("dataset is empty; writing a header-only embedding table");
    }
    let embeddings = embed_dataset(model, dataset, 32)?;
    let table = EmbeddingTable::from_dataset(dataset, model.config().embed_dim, embeddings)?;
    table.write_csv(path)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProjectionMethod {
    /// Top two principal directions.
    LinearPrincipal,
    /// Program and arguments; reads the embedding CSV on stdin and writes
    /// `id,x,y` on stdout.
    External(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    pub warnings: Vec<String>,
}

pub fn project_2d(table: &EmbeddingTable, method: &ProjectionMethod) -> Result<Projection> {
    if table.rows.len() < 3 {
        return Err(Error::Validation(format!(
            "projection needs at least 3 rows, table has {}",
            table.rows.len()
        )));
    }
    match method {
        ProjectionMethod::LinearPrincipal => Ok(principal_projection(table)),
        ProjectionMethod::External(cmd) => external_projection(table, cmd),
    }
}

fn principal_projection(table: &EmbeddingTable) -> Projection {
    let n = table.rows.len();
    let e = table.dim;
    let mut x = DMatrix::<f64>::from_fn(n, e, |i, j| table.rows[i].vector[j] as f64);
    let mean: DVector<f64> = x.row_mean().transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    // eigenvectors of the smaller of the Gram and scatter matrices
    let (values, directions) = if n < e {
        let eig = (&x * x.transpose()).symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let dirs: Vec<DVector<f64>> = order
            .iter()
            .zip(&vals)
            .map(|(&i, &l)| {
                let u = eig.eigenvectors.column(i);
                if l > 0.0 {
                    x.transpose() * u / l.sqrt()
                } else {
                    DVector::zeros(e)
                }
            })
            .collect();
        (vals, dirs)
    } else {
        let eig = (x.transpose() * &x).symmetric_eigen();
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let dirs = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
        (vals, dirs)
    };
    let top = values.first().copied().unwrap_or(0.0);
    let tol = top * 1e-12 + f64::MIN_POSITIVE;
    let rank = values.iter().take(2).filter(|&&v| v > tol).count();
    let mut warnings = Vec::new();
    if rank < 2 {
        let msg = format!("data has {rank} non-degenerate direction(s); padding with zeros");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut coords = vec![[0.0f64; 2]; n];
    for (k, dir) in directions.iter().take(rank).enumerate() {
        // fix the sign: the largest-magnitude loading is positive
        let mut best = 0;
        for j in 1..dir.len() {
            if dir[j].abs() > dir[best].abs() {
                best = j;
            }
        }
        let sign = if dir[best] < 0.0 { -1.0 } else { 1.0 };
        let scores = &x * dir;
        for i in 0..n {
            coords[i][k] = sign * scores[i];
        }
    }
    Projection {
        points: table
            .rows
            .iter()
            .zip(coords)
            .map(|(r, c)| ProjectedPoint {
                id: r.record_id.clone(),
                x: c[0],
                y: c[1],
            })
            .collect(),
        warnings,
    }
}

fn external_projection(table: &EmbeddingTable, cmd: &[String]) -> Result<Projection> {
    let (program, args) = cmd
        .split_first()
        .ok_or_else(|| Error::Projector("empty projector command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Projector(format!("cannot start {program}: {e}")))?;
    let mut input = Vec::new();
    table.write_csv_to(&mut input)?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        stdin
            .write_all(&input)
            .map_err(|e| Error::Projector(format!("writing to {program}: {e}")))?;
    }
    let output = child
        .wait_with_output()
        .map_err(|e| Error::Projector(format!("waiting for {program}: {e}")))?;
    if !output.status.success() {
        return Err(Error::Projector(format!(
            "{program} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let points = read_projection(&output.stdout[..])?;
    let expected: BTreeSet<&str> = table.rows.iter().map(|r| r.record_id.as_str()).collect();
    let got: BTreeSet<&str> = points.iter().map(|p| p.id.as_str()).collect();
    if points.len() != table.rows.len() || expected != got {
        return Err(Error::Projector(format!(
            "{program} returned {} rows not matching the {} input ids",
            points.len(),
            table.rows.len()
        )));
    }
    Ok(Projection {
        points,
        warnings: Vec::new(),
    })
}

pub fn read_projection<R: std::io::Read>(r: R) -> Result<Vec<ProjectedPoint>> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers()?.clone();
    if header.iter().ne(["id", "x", "y"]) {
        return Err(Error::Projector("projection CSV must have header id,x,y".into()));
    }
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        let p: ProjectedPoint = rec.map_err(|e| Error::Projector(format!("bad projection row: {e}")))?;
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::Projector(format!("non-finite coordinate for {}", p.id)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_projection(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Marker {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Star,
}

const MARKERS: [Marker; 6] = [
    Marker::Circle,
    Marker::Square,
    Marker::Triangle,
    Marker::Diamond,
    Marker::Cross,
    Marker::Star,
];

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Colour per cat and marker per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterStyle {
    pub colors: BTreeMap<String, String>,
    pub markers: BTreeMap<String, Marker>,
}

impl ScatterStyle {
    /// Entities of one cat share its colour. Markers follow the entity label
    /// after the cat prefix (e.g. `left/night`), so a marker means the same
    /// side and time for every cat.
    pub fn for_table(table: &EmbeddingTable) -> Self {
        let cats: BTreeSet<&str> = table.rows.iter().map(|r| r.cat_id.as_str()).collect();
        let colors = cats
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), PALETTE[i % PALETTE.len()].to_string()))
            .collect();
        let suffix = |r: &EmbeddingRow| -> String {
            r.entity_id
                .strip_prefix(&r.cat_id)
                .unwrap_or(&r.entity_id)
                .trim_start_matches('/')
                .to_string()
        };
        let suffixes: BTreeSet<String> = table.rows.iter().map(suffix).collect();
        let suffix_marker: BTreeMap<String, Marker> = suffixes
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, MARKERS[i % MARKERS.len()]))
            .collect();
        let markers = table
            .rows
            .iter()
            .map(|r| (r.entity_id.clone(), suffix_marker[&suffix(r)]))
            .collect();
        ScatterStyle { colors, markers }
    }
}

fn marker_svg(m: Marker, x: f64, y: f64, color: &str) -> String {
    let r = 5.0;
    match m {
        Marker::Circle => format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}"/>"#),
        Marker::Square => format!(
            r#"<rect x="{:.2}" y="{:.2}" width="{}" height="{}" fill="{color}"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        Marker::Triangle => format!(
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
            x,
            y - r,
            x - r,
            y + r,
            x + r,
            y + r
        ),
        Marker::Diamond => format!(
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y
        ),
        Marker::Cross => format!(
            r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="{color}" stroke-width="2.5"/>"#,
            x - r,
            y - r,
            x + r,
            y + r,
            x - r,
            y + r,
            x + r,
            y - r
        ),
        Marker::Star => {
            let pts: Vec<String> = (0..10)
                .map(|i| {
                    let a = std::f64::consts::PI * (i as f64) / 5.0 - std::f64::consts::FRAC_PI_2;
                    let rr = if i % 2 == 0 { r * 1.2 } else { r * 0.5 };
                    format!("{:.2},{:.2}", x + rr * a.cos(), y + rr * a.sin())
                })
                .collect();
            format!(r#"<polygon points="{}" fill="{color}"/>"#, pts.join(" "))
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter plot of a projection as SVG, with a legend.
pub fn render_scatter_svg(table: &EmbeddingTable, points: &[ProjectedPoint]) -> Result<(String, ScatterStyle)> {
    let style = ScatterStyle::for_table(table);
    let by_id: BTreeMap<&str, &EmbeddingRow> = table.rows.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let (w, h, pad, legend_w) = (640.0, 480.0, 30.0, 180.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let sx = if x1 > x0 { (w - 2.0 * pad) / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { (h - 2.0 * pad) / (y1 - y0) } else { 0.0 };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{h}" viewBox="0 0 {} {h}">"#,
        w + legend_w,
        w + legend_w
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for p in points {
        let row = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Validation(format!("projected id {} not in table", p.id)))?;
        let px = if sx > 0.0 { pad + (p.x - x0) * sx } else { w / 2.0 };
        let py = if sy > 0.0 { h - pad - (p.y - y0) * sy } else { h / 2.0 };
        let _ = writeln!(
            svg,
            "{}",
            marker_svg(style.markers[&row.entity_id], px, py, &style.colors[&row.cat_id])
        );
    }
    let mut ly = 20.0;
    for (entity, marker) in &style.markers {
        let cat = table
            .rows
            .iter()
            .find(|r| &r.entity_id == entity)
            .map(|r| r.cat_id.as_str())
            .unwrap_or_default();
        let _ = writeln!(svg, "{}", marker_svg(*marker, w + 15.0, ly, &style.colors[cat]));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            w + 28.0,
            ly + 4.0,
            escape(entity)
        );
        ly += 18.0;
    }
    svg.push_str("</svg>\n");
    Ok((svg, style))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &str, &str, Vec<f32>)]) -> EmbeddingTable {
        let dim = rows[0].3.len();
        EmbeddingTable::new(
            dim,
            rows.iter()
                .map(|(id, cat, ent, v)| EmbeddingRow {
                    record_id: id.to_string(),
                    cat_id: cat.to_string(),
                    entity_id: ent.to_string(),
                    vector: v.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[
            ("a.png", "a", "a/left", vec![0.1, -3.5e-8, 1.0 / 3.0]),
            ("b,c.png", "b", "b/right", vec![f32::MAX, f32::MIN_POSITIVE, 0.0]),
        ]);
        let path = dir.path().join("e.csv");
        t.write_csv(&path).unwrap();
        assert_eq!(EmbeddingTable::read_csv(&path).unwrap(), t);
    }

    #[test]
    fn empty_table_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        EmbeddingTable::new(4, vec![]).unwrap().write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "record_id,cat_id,entity_id,e0,e1,e2,e3");
        assert_eq!(EmbeddingTable::read_csv(&path).unwrap().dim, 4);
    }

    #[test]
    fn collinear_points_pad_with_zeros() {
        let t = table(&[
            ("1", "a", "a", vec![0.0, 0.0, 0.0]),
            ("2", "a", "a", vec![1.0, 1.0, 0.0]),
            ("3", "a", "a", vec![2.0, 2.0, 0.0]),
        ]);
        let p = project_2d(&t, &ProjectionMethod::LinearPrincipal).unwrap();
        assert_eq!(p.warnings.len(), 1);
        assert!(p.points.iter().all(|q| q.y == 0.0));
        assert!((p.points[2].x - p.points[0].x - 8f64.sqrt()).abs() < 1e-9);
        let short = table(&[("1", "a", "a", vec![0.0]), ("2", "a", "a", vec![1.0])]);
        assert!(project_2d(&short, &ProjectionMethod::LinearPrincipal).is_err());
    }

    #[test]
    fn one_colour_per_cat_one_marker_per_entity() {
        let t = table(&[
            ("1", "a", "a/left", vec![0.0, 1.0]),
            ("2", "a", "a/right", vec![1.0, 0.0]),
            ("3", "b", "b/left", vec![1.0, 1.0]),
            ("4", "b", "b/right", vec![0.5, 1.0]),
        ]);
        let pts = project_2d(&t, &ProjectionMethod::LinearPrincipal).unwrap().points;
        let (svg, style) = render_scatter_svg(&t, &pts).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(style.colors.len(), 2);
        assert_ne!(style.colors["a"], style.colors["b"]);
        assert_ne!(style.markers["a/left"], style.markers["a/right"]);
        assert_eq!(style.markers["a/left"], style.markers["b/left"]);
    }
}
