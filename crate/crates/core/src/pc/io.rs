//! Point cloud file formats: PLY (ascii and binary little-endian) and
//! whitespace-delimited XYZ text with an optional label column.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::cloud::{Point3, PointCloud, SemanticClass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Xyz,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(CloudFormat::Ply),
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Ply => parse_ply(&bytes),
        CloudFormat::Xyz => parse_xyz(std::str::from_utf8(&bytes).map_err(|e| {
            Error::parse_byte(e.valid_up_to() as u64, "xyz file is not valid utf-8")
        })?),
    }
}

/// Shifts absolute coordinates by the floor of their minimum corner.
fn localize(absolute: Vec<Point3>) -> (Vec<Point3>, Vector3<f64>) {
    let Some(first) = absolute.first() else {
        return (absolute, Vector3::zeros());
    };
    let min = absolute.iter().fold(*first, |m, p| m.inf(p));
    let offset = min.map(f64::floor);
    (absolute.into_iter().map(|p| p - offset).collect(), offset)
}

fn build_cloud(
    absolute: Vec<Point3>,
    labels: Option<Vec<SemanticClass>>,
    ids: Option<Vec<u32>>,
) -> PointCloud {
    let (points, origin_offset) = localize(absolute);
    PointCloud {
        points,
        labels,
        instance_ids: ids,
        origin_offset,
    }
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Byte offset of the payload.
    body_start: usize,
    /// Number of header lines, for ascii line numbering.
    header_lines: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let Some(rel_end) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(Error::parse_byte(pos as u64, "header not terminated by end_header"));
        };
        let raw = &bytes[pos..pos + rel_end];
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::parse_line(line_no, "header is not valid utf-8"))?
            .trim_end_matches('\r');
        pos += rel_end + 1;
        let mut tok = line.split_whitespace();
        let Some(keyword) = tok.next() else { continue };
        match keyword {
            "ply" if line_no == 1 => {}
            _ if line_no == 1 => return Err(Error::parse_line(1, "missing ply magic")),
            "format" => {
                encoding = Some(match tok.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    other => {
                        return Err(Error::parse_line(
                            line_no,
                            format!("unsupported ply format {other:?}"),
                        ))
                    }
                });
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::parse_line(line_no, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse_line(line_no, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse_line(line_no, "property before any element"))?;
                let bad = || Error::parse_line(line_no, "malformed property");
                let first = tok.next().ok_or_else(bad)?;
                if first == "list" {
                    let count = tok.next().and_then(ScalarType::parse).ok_or_else(bad)?;
                    let item = tok.next().and_then(ScalarType::parse).ok_or_else(bad)?;
                    el.properties.push(Property::List { count, item });
                } else {
                    let ty = ScalarType::parse(first).ok_or_else(bad)?;
                    let name = tok.next().ok_or_else(bad)?;
                    el.properties.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            "end_header" => break,
            other => {
                return Err(Error::parse_line(line_no, format!("unknown header keyword {other}")))
            }
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse_line(line_no, "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        body_start: pos,
        header_lines: line_no,
    })
}

/// Scalar columns of the vertex element.
struct VertexTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl VertexTable {
    fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }
}

fn read_vertices(bytes: &[u8], header: &Header) -> Result<VertexTable> {
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse_line(header.header_lines, "no vertex element"))?;
    let vertex = &header.elements[vertex_pos];
    let names: Vec<String> = vertex
        .properties
        .iter()
        .filter_map(|p| match p {
            Property::Scalar { name, .. } => Some(name.clone()),
            Property::List { .. } => None,
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(vertex.count); names.len()];
    match header.encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(&bytes[header.body_start..])
                .map_err(|_| Error::parse_line(header.header_lines + 1, "payload is not utf-8"))?;
            let mut lines = text.lines().enumerate();
            for (ei, el) in header.elements.iter().enumerate().take(vertex_pos + 1) {
                for _ in 0..el.count {
                    let (li, line) = lines.next().ok_or_else(|| {
                        Error::parse_line(
                            header.header_lines + text.lines().count() + 1,
                            format!("truncated payload: element {} declares {} rows", el.name, el.count),
                        )
                    })?;
                    let line_no = header.header_lines + li + 1;
                    if ei != vertex_pos {
                        continue;
                    }
                    let mut tok = line.split_whitespace();
                    let mut col = 0;
                    for prop in &el.properties {
                        let mut next = || -> Result<f64> {
                            tok.next()
                                .ok_or_else(|| Error::parse_line(line_no, "too few values on row"))?
                                .parse::<f64>()
                                .map_err(|_| Error::parse_line(line_no, "unparsable value"))
                        };
                        match prop {
                            Property::Scalar { .. } => {
                                columns[col].push(next()?);
                                col += 1;
                            }
                            Property::List { .. } => {
                                let n = next()? as usize;
                                for _ in 0..n {
                                    next()?;
                                }
                            }
                        }
                    }
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut pos = header.body_start;
            let need = |pos: usize, n: usize, what: &str| -> Result<()> {
                if pos + n > bytes.len() {
                    Err(Error::parse_byte(
                        pos as u64,
                        format!("truncated payload while reading {what}"),
                    ))
                } else {
                    Ok(())
                }
            };
            for (ei, el) in header.elements.iter().enumerate().take(vertex_pos + 1) {
                for _ in 0..el.count {
                    let mut col = 0;
                    for prop in &el.properties {
                        match prop {
                            Property::Scalar { ty, .. } => {
                                need(pos, ty.size(), &el.name)?;
                                if ei == vertex_pos {
                                    columns[col].push(ty.read_le(&bytes[pos..]));
                                    col += 1;
                                }
                                pos += ty.size();
                            }
                            Property::List { count, item } => {
                                need(pos, count.size(), &el.name)?;
                                let n = count.read_le(&bytes[pos..]) as usize;
                                pos += count.size();
                                need(pos, n * item.size(), &el.name)?;
                                pos += n * item.size();
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(VertexTable { names, columns })
}

fn row_location(header: &Header, row: usize) -> crate::error::Location {
    use crate::error::Location;
    match header.encoding {
        PlyEncoding::Ascii => Location::Line(header.header_lines + row + 1),
        PlyEncoding::BinaryLittleEndian => Location::Byte(header.body_start as u64),
    }
}

/// Parses PLY bytes into a cloud. Recognized vertex properties are `x`, `y`,
/// `z`, `label` and `instance` (or `instance_id`); everything else is skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let table = read_vertices(bytes, &header)?;
    let coord = |name: &str| {
        table.column(name).ok_or_else(|| {
            Error::parse_line(header.header_lines, format!("vertex element lacks property {name}"))
        })
    };
    let (xs, ys, zs) = (coord("x")?, coord("y")?, coord("z")?);
    let mut points = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let p = Point3::new(xs[i], ys[i], zs[i]);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Parse {
                location: row_location(&header, i),
                message: format!("non-finite coordinate in vertex {i}"),
            });
        }
        points.push(p);
    }
    let labels = match table.column("label") {
        Some(col) => Some(
            col.iter()
                .enumerate()
                .map(|(i, &v)| {
                    SemanticClass::from_id(v as i64).ok_or_else(|| Error::Parse {
                        location: row_location(&header, i),
                        message: format!("label {v} outside 0..=4"),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let ids = table
        .column("instance")
        .or_else(|| table.column("instance_id"))
        .map(|col| col.iter().map(|&v| v as u32).collect());
    Ok(build_cloud(points, labels, ids))
}

/// Extra per-vertex integer property for [`write_ply`].
#[derive(Debug, Clone)]
pub struct ExtraProperty {
    pub name: String,
    pub values: Vec<u32>,
    /// Written as `uchar` when true, `uint` otherwise.
    pub byte: bool,
}

/// Writes absolute coordinates (points plus origin offset) as doubles, the
/// label as `uchar`, instance ids as `uint`, then any extra properties.
pub fn write_ply(
    path: &Path,
    cloud: &PointCloud,
    encoding: PlyEncoding,
    extras: &[ExtraProperty],
) -> Result<()> {
    let bytes = encode_ply(cloud, encoding, extras)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ply(cloud: &PointCloud, encoding: PlyEncoding, extras: &[ExtraProperty]) -> Result<Vec<u8>> {
    cloud.validate()?;
    for e in extras {
        if e.values.len() != cloud.len() {
            return Err(Error::LabelCountMismatch {
                expected: cloud.len(),
                found: e.values.len(),
            });
        }
    }
    let mut out = Vec::new();
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len()).unwrap();
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.labels.is_some() {
        out.extend_from_slice(b"property uchar label\n");
    }
    if cloud.instance_ids.is_some() {
        out.extend_from_slice(b"property uint instance\n");
    }
    for e in extras {
        let ty = if e.byte { "uchar" } else { "uint" };
        writeln!(out, "property {ty} {}", e.name).unwrap();
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let abs = p + cloud.origin_offset;
        let label = cloud.labels.as_ref().map(|l| l[i].id());
        let id = cloud.instance_ids.as_ref().map(|l| l[i]);
        match encoding {
            PlyEncoding::Ascii => {
                write!(out, "{} {} {}", abs.x, abs.y, abs.z).unwrap();
                if let Some(l) = label {
                    write!(out, " {l}").unwrap();
                }
                if let Some(id) = id {
                    write!(out, " {id}").unwrap();
                }
                for e in extras {
                    write!(out, " {}", e.values[i]).unwrap();
                }
                out.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => {
                for c in abs.iter() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(l) = label {
                    out.push(l);
                }
                if let Some(id) = id {
                    out.extend_from_slice(&id.to_le_bytes());
                }
                for e in extras {
                    if e.byte {
                        out.push(e.values[i].min(255) as u8);
                    } else {
                        out.extend_from_slice(&e.values[i].to_le_bytes());
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- XYZ

/// `x y z [label]` per line; blank lines and `#` comments are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut has_label: Option<bool> = None;
    for (li, line) in text.lines().enumerate() {
        let line_no = li + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let labeled = match fields.len() {
            3 => false,
            4 => true,
            n => return Err(Error::parse_line(line_no, format!("expected 3 or 4 columns, got {n}"))),
        };
        if *has_label.get_or_insert(labeled) != labeled {
            return Err(Error::parse_line(line_no, "inconsistent label column"));
        }
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            xyz[k] = fields[k]
                .parse::<f64>()
                .map_err(|_| Error::parse_line(line_no, format!("unparsable coordinate {:?}", fields[k])))?;
            if !xyz[k].is_finite() {
                return Err(Error::parse_line(line_no, "non-finite coordinate"));
            }
        }
        points.push(Point3::from(xyz));
        if labeled {
            let id: i64 = fields[3]
                .parse()
                .map_err(|_| Error::parse_line(line_no, "unparsable label"))?;
            labels.push(
                SemanticClass::from_id(id).ok_or(Error::UnknownClassId { line: line_no, id })?,
            );
        }
    }
    let labels = has_label.unwrap_or(false).then_some(labels);
    Ok(build_cloud(points, labels, None))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let a = p + cloud.origin_offset;
        match &cloud.labels {
            Some(l) => out.push_str(&format!("{} {} {} {}\n", a.x, a.y, a.z, l[i].id())),
            None => out.push_str(&format!("{} {} {}\n", a.x, a.y, a.z)),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
