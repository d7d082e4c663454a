//! Legacy-ASCII VTK output for meshes and vertex fields.
//!
//! Optimization runs archive their designs as VTK `DataFile Version 3.0`
//! unstructured grids: mesh vertices become `POINTS` (embedded at z = 0),
//! triangles become type-5 `CELLS`, and any number of vertex-attached fields
//! become `POINT_DATA` blocks — `SCALARS` for [`SpaceKind::P1Scalar`] fields
//! and `VECTORS` (padded with a zero third component) for interleaved
//! [`SpaceKind::P1Vector`] fields. Higher-order fields must be sampled down
//! to vertices before writing; the writer rejects them rather than guessing.
//!
//! Numbers are printed with Rust's shortest round-tripping float format, so
//! reading a file back recovers every coordinate and value bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::fem::NodalField;
use crate::mesh::space::SpaceKind;
use crate::mesh::Mesh;

/// Failures while rendering or writing a VTK file.
#[derive(Debug, Error)]
pub enum VtkError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("field `{name}` has kind {kind:?}; VTK output takes P1Scalar or P1Vector fields")]
    UnsupportedKind { name: String, kind: SpaceKind },
    #[error("field `{name}` has {found} values but the mesh requires {expected}")]
    LengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("field name `{name}` contains whitespace, which VTK data names cannot carry")]
    InvalidName { name: String },
}

/// Renders `mesh` and the named vertex fields as one legacy-ASCII VTK
/// unstructured grid.
///
/// Scalar fields need one value per vertex; vector fields need two
/// (interleaved `[x0, y0, x1, y1, …]`). Field names must be whitespace-free
/// since the format delimits attribute headers with spaces. Newlines in
/// `title` are replaced by spaces to keep the two-line header intact.
pub fn render_vtk(
    title: &str,
    mesh: &Mesh,
    fields: &[(&str, &NodalField)],
) -> Result<String, VtkError> {
    let n = mesh.node_count();
    for &(name, field) in fields {
        if name.chars().any(char::is_whitespace) {
            return Err(VtkError::InvalidName { name: name.into() });
        }
        let expected = match field.kind {
            SpaceKind::P1Scalar => n,
            SpaceKind::P1Vector => 2 * n,
            kind => return Err(VtkError::UnsupportedKind { name: name.into(), kind }),
        };
        if field.len() != expected {
            return Err(VtkError::LengthMismatch {
                name: name.into(),
                expected,
                found: field.len(),
            });
        }
    }

    let mut out = String::new();
    // Writing to a String cannot fail, so the fmt results below are infallible.
    let w = &mut out;
    writeln!(w, "# vtk DataFile Version 3.0").unwrap();
    writeln!(w, "{}", title.replace(['\n', '\r'], " ")).unwrap();
    writeln!(w, "ASCII").unwrap();
    writeln!(w, "DATASET UNSTRUCTURED_GRID").unwrap();

    writeln!(w, "POINTS {n} double").unwrap();
    for &[x, y] in &mesh.nodes {
        writeln!(w, "{x} {y} 0").unwrap();
    }

    let t = mesh.triangle_count();
    writeln!(w, "CELLS {t} {}", 4 * t).unwrap();
    for &[a, b, c] in &mesh.triangles {
        writeln!(w, "3 {a} {b} {c}").unwrap();
    }
    writeln!(w, "CELL_TYPES {t}").unwrap();
    for _ in 0..t {
        writeln!(w, "5").unwrap();
    }

    if !fields.is_empty() {
        writeln!(w, "POINT_DATA {n}").unwrap();
        for &(name, field) in fields {
            match field.kind {
                SpaceKind::P1Scalar => {
                    writeln!(w, "SCALARS {name} double 1").unwrap();
                    writeln!(w, "LOOKUP_TABLE default").unwrap();
                    for v in &field.values {
                        writeln!(w, "{v}").unwrap();
                    }
                }
                SpaceKind::P1Vector => {
                    writeln!(w, "VECTORS {name} double").unwrap();
                    for pair in field.values.chunks_exact(2) {
                        writeln!(w, "{} {} 0", pair[0], pair[1]).unwrap();
                    }
                }
                _ => unreachable!("kinds validated above"),
            }
        }
    }

    Ok(out)
}

/// Writes [`render_vtk`] output to `path`, creating or truncating the file.
pub fn write_vtk(
    path: &Path,
    title: &str,
    mesh: &Mesh,
    fields: &[(&str, &NodalField)],
) -> Result<(), VtkError> {
    let contents = render_vtk(title, mesh, fields)?;
    fs::write(path, contents)?;
    Ok(())
}
