//! PLY 1.0 reader/writer (ASCII and binary little-endian).

use std::path::Path;

use super::{
    is_degenerate, rgb_to_u8, Model, ModelKind, PointSet, Rgb, TriMesh, Vec3, OTHER_GRAY,
};
use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_bytes};

/// DC spherical-harmonic basis constant used by 3D Gaussian splats.
pub const SH_C0: f64 = 0.28209479177387814;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
    body_line: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::PlyParse {
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();

    loop {
        line_no += 1;
        let rest = &bytes[offset..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(parse_err(line_no, "header ended before `end_header`"));
        };
        let raw = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse_err(line_no, "header line is not valid UTF-8"))?;
        offset += end + 1;
        let line = raw.trim_end_matches('\r').trim();
        let mut words = line.split_whitespace();
        let keyword = words.next().unwrap_or("");

        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(1, "missing `ply` magic"));
            }
            continue;
        }

        match keyword {
            "format" => {
                let f = match words.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("binary_big_endian") => {
                        return Err(parse_err(line_no, "big-endian PLY is not supported"))
                    }
                    other => {
                        return Err(parse_err(line_no, format!("unknown format {other:?}")))
                    }
                };
                if words.next() != Some("1.0") {
                    return Err(parse_err(line_no, "expected PLY version 1.0"));
                }
                format = Some(f);
            }
            "element" => {
                let (Some(name), Some(count)) = (words.next(), words.next()) else {
                    return Err(parse_err(line_no, "element needs a name and a count"));
                };
                let count = count
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let Some(element) = elements.last_mut() else {
                    return Err(parse_err(line_no, "property before any element"));
                };
                let words: Vec<&str> = words.collect();
                let unknown = |t: &str| parse_err(line_no, format!("unknown property type `{t}`"));
                let prop = match words.as_slice() {
                    ["list", count, item, name] => Property {
                        name: name.to_string(),
                        kind: PropKind::List {
                            count: Scalar::parse(count).ok_or_else(|| unknown(count))?,
                            item: Scalar::parse(item).ok_or_else(|| unknown(item))?,
                        },
                    },
                    [ty, name] => Property {
                        name: name.to_string(),
                        kind: PropKind::Scalar(Scalar::parse(ty).ok_or_else(|| unknown(ty))?),
                    },
                    _ => return Err(parse_err(line_no, "malformed property line")),
                };
                element.props.push(prop);
            }
            "comment" | "obj_info" | "" => {}
            "end_header" => {
                let format = format.ok_or_else(|| parse_err(line_no, "missing format line"))?;
                return Ok(Header {
                    format,
                    elements,
                    body_offset: offset,
                    body_line: line_no + 1,
                });
            }
            other => return Err(parse_err(line_no, format!("unexpected keyword `{other}`"))),
        }
    }
}

/// Sequential access to body values regardless of encoding.
enum Body<'a> {
    Ascii {
        text: &'a [u8],
        pos: usize,
        line: usize,
    },
    Binary {
        data: &'a [u8],
        pos: usize,
    },
}

impl Body<'_> {
    fn location(&self) -> String {
        match self {
            Body::Ascii { line, .. } => format!("line {line}"),
            Body::Binary { pos, .. } => format!("body byte {pos}"),
        }
    }

    fn read(&mut self, ty: Scalar) -> Result<f64> {
        match self {
            Body::Ascii { text, pos, line } => {
                while *pos < text.len() && text[*pos].is_ascii_whitespace() {
                    if text[*pos] == b'\n' {
                        *line += 1;
                    }
                    *pos += 1;
                }
                let start = *pos;
                while *pos < text.len() && !text[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if start == *pos {
                    return Err(parse_err(*line, "unexpected end of data"));
                }
                let tok = std::str::from_utf8(&text[start..*pos])
                    .map_err(|_| parse_err(*line, "non-UTF-8 token"))?;
                let value = if ty.is_float() {
                    tok.parse::<f64>().ok()
                } else {
                    tok.parse::<i64>().ok().map(|v| v as f64)
                };
                let value =
                    value.ok_or_else(|| parse_err(*line, format!("cannot parse `{tok}`")))?;
                // Float properties are stored at their declared width.
                Ok(if ty == Scalar::F32 {
                    f64::from(value as f32)
                } else {
                    value
                })
            }
            Body::Binary { data, pos } => {
                let size = match ty {
                    Scalar::I8 | Scalar::U8 => 1,
                    Scalar::I16 | Scalar::U16 => 2,
                    Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
                    Scalar::F64 => 8,
                };
                let Some(b) = data.get(*pos..*pos + size) else {
                    return Err(Error::Format(format!(
                        "binary PLY body truncated at byte {pos}"
                    )));
                };
                *pos += size;
                Ok(match ty {
                    Scalar::I8 => f64::from(b[0] as i8),
                    Scalar::U8 => f64::from(b[0]),
                    Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
                    Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
                    Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                    Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                    Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                    Scalar::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                })
            }
        }
    }

    fn read_list_len(&mut self, ty: Scalar) -> Result<usize> {
        let n = self.read(ty)?;
        if n < 0.0 || n.fract() != 0.0 {
            return Err(Error::Format(format!(
                "invalid list length {n} at {}",
                self.location()
            )));
        }
        Ok(n as usize)
    }
}

#[derive(Default)]
struct VertexData {
    positions: Vec<Vec3>,
    colors: Option<Vec<Rgb>>,
    normals: Option<Vec<Vec3>>,
    sh_dc: Option<Vec<[f64; 3]>>,
}

fn read_vertices(el: &Element, body: &mut Body) -> Result<VertexData> {
    #[derive(Clone, Copy)]
    enum Slot {
        Pos(usize),
        Normal(usize),
        Color(usize, bool),
        Dc(usize),
        Skip,
    }
    let slots: Vec<Slot> = el
        .props
        .iter()
        .map(|p| {
            let float = matches!(p.kind, PropKind::Scalar(s) if s.is_float());
            match (p.name.as_str(), &p.kind) {
                (_, PropKind::List { .. }) => Slot::Skip,
                ("x", _) => Slot::Pos(0),
                ("y", _) => Slot::Pos(1),
                ("z", _) => Slot::Pos(2),
                ("nx", _) => Slot::Normal(0),
                ("ny", _) => Slot::Normal(1),
                ("nz", _) => Slot::Normal(2),
                ("red", _) => Slot::Color(0, float),
                ("green", _) => Slot::Color(1, float),
                ("blue", _) => Slot::Color(2, float),
                ("f_dc_0", _) => Slot::Dc(0),
                ("f_dc_1", _) => Slot::Dc(1),
                ("f_dc_2", _) => Slot::Dc(2),
                _ => Slot::Skip,
            }
        })
        .collect();
    let has = |pred: &dyn Fn(&Slot) -> bool| {
        (0..3).all(|axis| {
            slots.iter().any(|s| {
                pred(s)
                    && matches!(s, Slot::Pos(a) | Slot::Normal(a) | Slot::Color(a, _) | Slot::Dc(a) if *a == axis)
            })
        })
    };
    if !has(&|s| matches!(s, Slot::Pos(_))) {
        return Err(Error::Format("vertex element lacks x/y/z properties".into()));
    }
    let has_normals = has(&|s| matches!(s, Slot::Normal(_)));
    let has_colors = has(&|s| matches!(s, Slot::Color(..)));
    let has_dc = has(&|s| matches!(s, Slot::Dc(_)));

    let n = el.count;
    let mut out = VertexData {
        positions: Vec::with_capacity(n),
        colors: has_colors.then(|| Vec::with_capacity(n)),
        normals: has_normals.then(|| Vec::with_capacity(n)),
        sh_dc: has_dc.then(|| Vec::with_capacity(n)),
    };
    for _ in 0..n {
        let mut pos = [0.0; 3];
        let mut normal = [0.0; 3];
        let mut color = [0.0f32; 3];
        let mut dc = [0.0; 3];
        for (prop, slot) in el.props.iter().zip(&slots) {
            match &prop.kind {
                PropKind::List { count, item } => {
                    let len = body.read_list_len(*count)?;
                    for _ in 0..len {
                        body.read(*item)?;
                    }
                }
                PropKind::Scalar(ty) => {
                    let v = body.read(*ty)?;
                    match *slot {
                        Slot::Pos(a) => pos[a] = v,
                        Slot::Normal(a) => normal[a] = v,
                        Slot::Color(a, true) => color[a] = (v as f32).clamp(0.0, 1.0),
                        Slot::Color(a, false) => color[a] = (v / 255.0).clamp(0.0, 1.0) as f32,
                        Slot::Dc(a) => dc[a] = v,
                        Slot::Skip => {}
                    }
                }
            }
        }
        out.positions.push(Vec3::from(pos));
        if let Some(c) = out.colors.as_mut() {
            c.push(color);
        }
        if let Some(nv) = out.normals.as_mut() {
            nv.push(Vec3::from(normal));
        }
        if let Some(d) = out.sh_dc.as_mut() {
            d.push(dc);
        }
    }
    Ok(out)
}

/// Reads polygon faces, fan-triangulating polygons with more than 3 corners.
/// Returns the triangles and how many degenerate ones were dropped.
fn read_faces(el: &Element, body: &mut Body, vertex_count: usize) -> Result<(Vec<[u32; 3]>, usize)> {
    let index_prop = el
        .props
        .iter()
        .position(|p| {
            matches!(p.kind, PropKind::List { .. })
                && (p.name == "vertex_indices" || p.name == "vertex_index")
        })
        .ok_or_else(|| Error::Format("face element lacks a vertex_indices list".into()))?;
    let mut faces = Vec::with_capacity(el.count);
    let mut dropped = 0;
    let mut poly = Vec::new();
    for fi in 0..el.count {
        for (pi, prop) in el.props.iter().enumerate() {
            match &prop.kind {
                PropKind::List { count, item } => {
                    let len = body.read_list_len(*count)?;
                    if pi == index_prop {
                        poly.clear();
                        for _ in 0..len {
                            let v = body.read(*item)?;
                            if v < 0.0 || v >= vertex_count as f64 {
                                return Err(Error::Format(format!(
                                    "face {fi} references vertex {v}, but there are {vertex_count}"
                                )));
                            }
                            poly.push(v as u32);
                        }
                    } else {
                        for _ in 0..len {
                            body.read(*item)?;
                        }
                    }
                }
                PropKind::Scalar(ty) => {
                    body.read(*ty)?;
                }
            }
        }
        if poly.len() < 3 {
            dropped += 1;
            continue;
        }
        for k in 1..poly.len() - 1 {
            let f = [poly[0], poly[k], poly[k + 1]];
            if is_degenerate(&f) {
                dropped += 1;
            } else {
                faces.push(f);
            }
        }
    }
    Ok((faces, dropped))
}

fn skip_element(el: &Element, body: &mut Body) -> Result<()> {
    for _ in 0..el.count {
        for prop in &el.props {
            match &prop.kind {
                PropKind::Scalar(ty) => {
                    body.read(*ty)?;
                }
                PropKind::List { count, item } => {
                    let len = body.read_list_len(*count)?;
                    for _ in 0..len {
                        body.read(*item)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Loads a PLY model.
///
/// With [`ModelKind::Gaussians`], vertex centers become points and the DC
/// spherical-harmonic terms `f_dc_0..2` become colors via
/// `clamp(0.5 + SH_C0 * f_dc, 0, 1)`. Degenerate faces are dropped with a
/// warning.
pub fn load_model(path: &Path, kind: ModelKind) -> Result<Model> {
    let bytes = read_bytes(path)?;
    parse_model(&bytes, kind)
}

pub(crate) fn parse_model(bytes: &[u8], kind: ModelKind) -> Result<Model> {
    let header = parse_header(bytes)?;
    let data = &bytes[header.body_offset..];
    let mut body = match header.format {
        Format::Ascii => Body::Ascii {
            text: data,
            pos: 0,
            line: header.body_line,
        },
        Format::BinaryLe => Body::Binary { data, pos: 0 },
    };

    let mut vertices: Option<VertexData> = None;
    let mut faces: Option<Vec<[u32; 3]>> = None;
    for el in &header.elements {
        match el.name.as_str() {
            "vertex" if vertices.is_none() => vertices = Some(read_vertices(el, &mut body)?),
            "face" if faces.is_none() && kind != ModelKind::Gaussians => {
                let n = vertices.as_ref().map_or(0, |v| v.positions.len());
                let (f, dropped) = read_faces(el, &mut body, n)?;
                if dropped > 0 {
                    log::warn!("dropped {dropped} degenerate faces");
                }
                faces = Some(f);
            }
            _ => skip_element(el, &mut body)?,
        }
    }
    let vertices = vertices.ok_or_else(|| Error::Format("no vertex element".into()))?;

    let normals = vertices.normals.filter(|ns| {
        let ok = ns.iter().all(|n| (n.norm() - 1.0).abs() <= 1e-4);
        if !ok {
            log::warn!("ignoring vertex normals that are not unit length");
        }
        ok
    });

    match kind {
        ModelKind::Gaussians => {
            let dc = vertices.sh_dc.ok_or_else(|| {
                Error::Format("gaussian PLY lacks f_dc_0/f_dc_1/f_dc_2 properties".into())
            })?;
            let colors = dc
                .iter()
                .map(|d| d.map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0) as f32))
                .collect();
            Ok(Model::Points(
                PointSet::new(vertices.positions)?.with_colors(colors)?,
            ))
        }
        ModelKind::Points => parse_model_points(vertices.positions, vertices.colors, normals),
        ModelKind::Mesh | ModelKind::Auto => match faces {
            Some(f) => Ok(Model::Mesh(TriMesh::new(
                vertices.positions,
                f,
                vertices.colors,
            )?)),
            None if kind == ModelKind::Mesh => {
                Err(Error::Format("mesh requested but the file has no face element".into()))
            }
            None => parse_model_points(vertices.positions, vertices.colors, normals),
        },
    }
}

fn parse_model_points(
    positions: Vec<Vec3>,
    colors: Option<Vec<Rgb>>,
    normals: Option<Vec<Vec3>>,
) -> Result<Model> {
    let mut p = PointSet::new(positions)?;
    if let Some(c) = colors {
        p = p.with_colors(c)?;
    }
    if let Some(n) = normals {
        p = p.with_normals(n)?;
    }
    Ok(Model::Points(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

/// Width of the stored `x/y/z` properties. `F32` matches common tooling;
/// `F64` makes the round trip exact for arbitrary `f64` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionPrecision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PlyOptions {
    pub encoding: PlyEncoding,
    pub precision: PositionPrecision,
}

/// Writes `model` as PLY. With `labels`, vertex colors are replaced by
/// `palette[label]`; label `palette.len()` is the reserved "other" class and
/// is written gray.
pub fn save_model(
    model: &Model,
    path: &Path,
    labels: Option<&[u32]>,
    palette: Option<&[Rgb]>,
    options: &PlyOptions,
) -> Result<()> {
    let bytes = encode_model(model, labels, palette, options)?;
    write_bytes(path, &bytes)
}

pub(crate) fn encode_model(
    model: &Model,
    labels: Option<&[u32]>,
    palette: Option<&[Rgb]>,
    options: &PlyOptions,
) -> Result<Vec<u8>> {
    let (positions, colors, normals, faces): (&[Vec3], Option<&[Rgb]>, Option<&[Vec3]>, &[[u32; 3]]) =
        match model {
            Model::Mesh(m) => (m.vertices(), m.vertex_colors(), None, m.faces()),
            Model::Points(p) => (p.positions(), p.colors(), p.normals(), &[]),
        };
    let n = positions.len();

    let labeled: Option<Vec<[u8; 3]>> = match (labels, palette) {
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::InvalidArgument("labels given without a palette".into()))
        }
        (Some(labels), Some(palette)) => {
            if labels.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {n} points",
                    labels.len()
                )));
            }
            let k = palette.len();
            Some(
                labels
                    .iter()
                    .map(|&l| match (l as usize).cmp(&k) {
                        std::cmp::Ordering::Less => Ok(rgb_to_u8(palette[l as usize])),
                        std::cmp::Ordering::Equal => Ok(OTHER_GRAY),
                        std::cmp::Ordering::Greater => Err(Error::InvalidArgument(format!(
                            "label {l} exceeds palette of {k} classes"
                        ))),
                    })
                    .collect::<Result<_>>()?,
            )
        }
    };
    let colors_u8: Option<Vec<[u8; 3]>> =
        labeled.or_else(|| colors.map(|c| c.iter().map(|&c| rgb_to_u8(c)).collect()));

    let ascii = options.encoding == PlyEncoding::Ascii;
    let double = options.precision == PositionPrecision::F64;
    let mut out = Vec::new();
    let mut header = String::from("ply\n");
    header.push_str(if ascii {
        "format ascii 1.0\n"
    } else {
        "format binary_little_endian 1.0\n"
    });
    header.push_str(&format!("element vertex {n}\n"));
    let pos_ty = if double { "double" } else { "float" };
    for axis in ["x", "y", "z"] {
        header.push_str(&format!("property {pos_ty} {axis}\n"));
    }
    if normals.is_some() {
        for axis in ["nx", "ny", "nz"] {
            header.push_str(&format!("property float {axis}\n"));
        }
    }
    if colors_u8.is_some() {
        for c in ["red", "green", "blue"] {
            header.push_str(&format!("property uchar {c}\n"));
        }
    }
    if matches!(model, Model::Mesh(_)) {
        header.push_str(&format!("element face {}\n", faces.len()));
        header.push_str("property list uchar int vertex_indices\n");
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());

    for i in 0..n {
        let p = positions[i];
        if ascii {
            let mut fields: Vec<String> = if double {
                p.iter().map(|c| c.to_string()).collect()
            } else {
                p.iter().map(|&c| (c as f32).to_string()).collect()
            };
            if let Some(ns) = normals {
                fields.extend(ns[i].iter().map(|&c| (c as f32).to_string()));
            }
            if let Some(cs) = &colors_u8 {
                fields.extend(cs[i].iter().map(u8::to_string));
            }
            out.extend_from_slice(fields.join(" ").as_bytes());
            out.push(b'\n');
        } else {
            for &c in p.iter() {
                if double {
                    out.extend_from_slice(&c.to_le_bytes());
                } else {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
            if let Some(ns) = normals {
                for &c in ns[i].iter() {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
            if let Some(cs) = &colors_u8 {
                out.extend_from_slice(&cs[i]);
            }
        }
    }
    for f in faces {
        if ascii {
            out.extend_from_slice(format!("3 {} {} {}\n", f[0], f[1], f[2]).as_bytes());
        } else {
            out.push(3);
            for &v in f {
                out.extend_from_slice(&(v as i32).to_le_bytes());
            }
        }
    }
    Ok(out)
}
