//! Plain-text mesh reader/writer.  The format is diff-able and trivially
//! parseable: an optional `THICKNESS` line, a node table, an element table.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point2;

use crate::error::SimError;
use crate::fem_core::Mesh;

struct Lines<'a> {
    origin: &'a str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, origin: &'a str) -> Self {
        Lines {
            origin,
            iter: text.lines().enumerate(),
        }
    }

    /// Next line that carries content, with its 1-based number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (idx, raw) in self.iter.by_ref() {
            let line = match raw.split_once('#') {
                Some((head, _)) => head,
                None => raw,
            }
            .trim();
            if !line.is_empty() {
                return Some((idx + 1, line));
            }
        }
        None
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> SimError {
        SimError::parse(self.origin, line, msg)
    }
}

fn parse_num<T: std::str::FromStr>(
    lines: &Lines,
    line: usize,
    token: &str,
    what: &str,
) -> Result<T, SimError> {
    token
        .parse()
        .map_err(|_| lines.err(line, format!("invalid {what}: '{token}'")))
}

/// Parse mesh text.  `origin` labels parse errors (usually the file path).
/// The mesh is validated before it is returned.
pub fn parse_mesh(text: &str, origin: &str) -> Result<Mesh, SimError> {
    let mut lines = Lines::new(text, origin);
    let (mut line, mut content) = lines
        .next_content()
        .ok_or_else(|| SimError::parse(origin, 1, "empty mesh file"))?;

    let mut thickness = 1.0;
    if let Some(rest) = content.strip_prefix("THICKNESS") {
        thickness = parse_num(&lines, line, rest.trim(), "thickness")?;
        (line, content) = lines
            .next_content()
            .ok_or_else(|| SimError::parse(origin, line, "expected NODES header"))?;
    }

    let n_nodes: usize = match content.strip_prefix("NODES") {
        Some(rest) => parse_num(&lines, line, rest.trim(), "node count")?,
        None => return Err(lines.err(line, format!("expected NODES header, got '{content}'"))),
    };
    let mut nodes = vec![None::<Point2<f64>>; n_nodes];
    for _ in 0..n_nodes {
        let (ln, row) = lines
            .next_content()
            .ok_or_else(|| SimError::parse(origin, line, "node table ends early"))?;
        let mut tok = row.split_whitespace();
        let mut take = || tok.next().ok_or_else(|| lines.err(ln, "node line needs 'id x y'"));
        let id: usize = parse_num(&lines, ln, take()?, "node id")?;
        let x: f64 = parse_num(&lines, ln, take()?, "coordinate")?;
        let y: f64 = parse_num(&lines, ln, take()?, "coordinate")?;
        if tok.next().is_some() {
            return Err(lines.err(ln, "trailing tokens on node line"));
        }
        let slot = nodes
            .get_mut(id)
            .ok_or_else(|| lines.err(ln, format!("node id {id} out of range 0..{n_nodes}")))?;
        if slot.is_some() {
            return Err(lines.err(ln, format!("duplicate node id {id}")));
        }
        *slot = Some(Point2::new(x, y));
        line = ln;
    }

    let (ln, content) = lines
        .next_content()
        .ok_or_else(|| SimError::parse(origin, line, "expected ELEMENTS header"))?;
    let n_elems: usize = match content.strip_prefix("ELEMENTS") {
        Some(rest) => parse_num(&lines, ln, rest.trim(), "element count")?,
        None => return Err(lines.err(ln, format!("expected ELEMENTS header, got '{content}'"))),
    };
    let mut elements = vec![None::<[usize; 8]>; n_elems];
    let mut last = ln;
    for _ in 0..n_elems {
        let (ln, row) = lines
            .next_content()
            .ok_or_else(|| SimError::parse(origin, last, "element table ends early"))?;
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != 9 {
            return Err(lines.err(ln, "element line needs 'id n1..n8'"));
        }
        let id: usize = parse_num(&lines, ln, toks[0], "element id")?;
        let mut conn = [0usize; 8];
        for (c, tok) in conn.iter_mut().zip(&toks[1..]) {
            *c = parse_num(&lines, ln, tok, "node reference")?;
        }
        let slot = elements
            .get_mut(id)
            .ok_or_else(|| lines.err(ln, format!("element id {id} out of range 0..{n_elems}")))?;
        if slot.is_some() {
            return Err(lines.err(ln, format!("duplicate element id {id}")));
        }
        *slot = Some(conn);
        last = ln;
    }
    if let Some((ln, extra)) = lines.next_content() {
        return Err(lines.err(ln, format!("unexpected content after element table: '{extra}'")));
    }

    let nodes: Vec<Point2<f64>> = nodes
        .into_iter()
        .enumerate()
        .map(|(id, n)| n.ok_or_else(|| SimError::parse(origin, last, format!("node id {id} missing"))))
        .collect::<Result<_, _>>()?;
    let elements: Vec<[usize; 8]> = elements
        .into_iter()
        .enumerate()
        .map(|(id, e)| e.ok_or_else(|| SimError::parse(origin, last, format!("element id {id} missing"))))
        .collect::<Result<_, _>>()?;

    let mesh = Mesh {
        nodes,
        elements,
        thickness,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn read_mesh(path: &Path) -> Result<Mesh, SimError> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text, &path.display().to_string())
}

/// Render a mesh in the text format.  Floats print with the shortest
/// digits that parse back to the same value, so write/read round-trips
/// bit-exactly.
pub fn format_mesh(mesh: &Mesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "THICKNESS {}", mesh.thickness);
    let _ = writeln!(out, "NODES {}", mesh.nodes.len());
    for (id, p) in mesh.nodes.iter().enumerate() {
        let _ = writeln!(out, "{id} {} {}", p.x, p.y);
    }
    let _ = writeln!(out, "ELEMENTS {}", mesh.elements.len());
    for (id, conn) in mesh.elements.iter().enumerate() {
        let _ = write!(out, "{id}");
        for n in conn {
            let _ = write!(out, " {n}");
        }
        out.push('\n');
    }
    out
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, format_mesh(mesh))?;
    Ok(())
}
