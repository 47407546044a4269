//! Checkpoint serialization: named tensors in one self-describing file.
//!
//! Layout: an ASCII header, then a raw payload of little-endian `f64` words.
//!
//! ```text
//! CHANGECAP-CKPT v1
//! count <n>
//! tensor <name> <rank> <dim0> <dim1> ...
//! ...          (n tensor lines, payload order)
//! end
//! <payload>
//! ```
//!
//! The payload holds each tensor's values back to back in header order, so
//! offsets are implicit. Round-trips are bit-exact: values are moved with
//! `f64::to_le_bytes`/`from_le_bytes` and never reformatted. The parser
//! validates everything before allocating: limits on tensor count, rank, and
//! element counts, a name charset, duplicate-name rejection, and an exact
//! payload-length check.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::{numel_of, ShapeError, Tensor};

const MAGIC: &str = "CHANGECAP-CKPT v1";
const MAX_TENSORS: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 128;
/// Cap on total payload elements (256 MiB of f64).
const MAX_TOTAL_ELEMS: usize = 1 << 25;

/// Error raised while writing, reading, or applying a checkpoint.
#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// A header line is structurally wrong; `line` counts from 1.
    Malformed { line: usize, detail: String },
    /// Header and payload disagree about the payload length in bytes.
    PayloadSize { expected: usize, got: usize },
    /// A self-imposed size limit was exceeded.
    Limit { detail: String },
    Shape(ShapeError),
    /// Applying a checkpoint: a target tensor has no stored counterpart.
    MissingTensor { name: String },
    /// Applying a checkpoint: a stored tensor has no target.
    UnexpectedTensor { name: String },
    /// Applying a checkpoint: name matches, shape does not.
    WrongShape {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Malformed { line, detail } => {
                write!(f, "checkpoint header line {line}: {detail}")
            }
            CheckpointError::PayloadSize { expected, got } => {
                write!(f, "checkpoint payload: expected {expected} bytes, got {got}")
            }
            CheckpointError::Limit { detail } => write!(f, "checkpoint limit: {detail}"),
            CheckpointError::Shape(e) => write!(f, "checkpoint shape: {e}"),
            CheckpointError::MissingTensor { name } => {
                write!(f, "checkpoint has no tensor named {name:?}")
            }
            CheckpointError::UnexpectedTensor { name } => {
                write!(f, "checkpoint tensor {name:?} has no destination")
            }
            CheckpointError::WrongShape { name, want, got } => {
                write!(f, "checkpoint tensor {name:?}: expected shape {want:?}, got {got:?}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<ShapeError> for CheckpointError {
    fn from(e: ShapeError) -> Self {
        CheckpointError::Shape(e)
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_NAME
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '/'))
}

/// Serializes named tensors. Panics only if a name violates the charset,
/// which indicates a programming error in the caller.
pub fn to_bytes(items: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("count {}\n", items.len()).as_bytes());
    for (name, t) in items {
        assert!(valid_name(name), "invalid checkpoint tensor name {name:?}");
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(
            format!("tensor {} {} {}\n", name, t.shape.len(), dims.join(" ")).as_bytes(),
        );
    }
    out.extend_from_slice(b"end\n");
    for (_, t) in items {
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint produced by [`to_bytes`]. Loaded tensors are not
/// gradient-tracked; callers re-mark parameters as needed.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let next_line = |pos: &mut usize, line_no: &mut usize| -> Result<&str, CheckpointError> {
        *line_no += 1;
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CheckpointError::Malformed {
                line: *line_no,
                detail: "unterminated header line".into(),
            })?;
        let line = &rest[..nl];
        *pos += nl + 1;
        std::str::from_utf8(line).map_err(|_| CheckpointError::Malformed {
            line: *line_no,
            detail: "header line is not valid UTF-8".into(),
        })
    };

    let magic = next_line(&mut pos, &mut line_no)?;
    if magic != MAGIC {
        return Err(CheckpointError::Malformed {
            line: 1,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let count_line = next_line(&mut pos, &mut line_no)?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or(CheckpointError::Malformed {
            line: 2,
            detail: format!("expected \"count <n>\", got {count_line:?}"),
        })?;
    if count > MAX_TENSORS {
        return Err(CheckpointError::Limit {
            detail: format!("{count} tensors exceeds cap {MAX_TENSORS}"),
        });
    }

    let mut names = BTreeSet::new();
    let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::with_capacity(count);
    let mut total_elems = 0usize;
    for _ in 0..count {
        let line = next_line(&mut pos, &mut line_no)?;
        let mut fields = line.split(' ');
        let malformed = |detail: String| CheckpointError::Malformed {
            line: line_no,
            detail,
        };
        if fields.next() != Some("tensor") {
            return Err(malformed(format!("expected tensor line, got {line:?}")));
        }
        let name = fields
            .next()
            .ok_or_else(|| malformed("missing tensor name".into()))?;
        if !valid_name(name) {
            return Err(malformed(format!("invalid tensor name {name:?}")));
        }
        if !names.insert(name.to_string()) {
            return Err(malformed(format!("duplicate tensor name {name:?}")));
        }
        let rank: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("missing or invalid rank".into()))?;
        if rank == 0 || rank > MAX_RANK {
            return Err(malformed(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("missing or invalid dimension".into()))?;
            shape.push(d);
        }
        if fields.next().is_some() {
            return Err(malformed("trailing fields on tensor line".into()));
        }
        let numel = numel_of(&shape)?;
        total_elems = total_elems
            .checked_add(numel)
            .filter(|&t| t <= MAX_TOTAL_ELEMS)
            .ok_or(CheckpointError::Limit {
                detail: format!("total elements exceed cap {MAX_TOTAL_ELEMS}"),
            })?;
        specs.push((name.to_string(), shape, numel));
    }
    let end = next_line(&mut pos, &mut line_no)?;
    if end != "end" {
        return Err(CheckpointError::Malformed {
            line: line_no,
            detail: format!("expected \"end\", got {end:?}"),
        });
    }

    let payload = &bytes[pos..];
    let expected = total_elems
        .checked_mul(8)
        .ok_or(CheckpointError::Limit {
            detail: "payload byte length overflows".into(),
        })?;
    if payload.len() != expected {
        return Err(CheckpointError::PayloadSize {
            expected,
            got: payload.len(),
        });
    }

    let mut out = Vec::with_capacity(count);
    let mut offset = 0usize;
    for (name, shape, numel) in specs {
        let mut values = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = (offset + i) * 8;
            let word: [u8; 8] = payload[at..at + 8].try_into().expect("length checked");
            values.push(f64::from_le_bytes(word));
        }
        offset += numel;
        out.push((name.clone(), Tensor::new(shape, values)?));
    }
    Ok(out)
}

/// Writes a checkpoint file.
pub fn save(path: &Path, items: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(items))?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Moves loaded tensors into destination slots, strictly: the name sets must
/// match exactly and every shape must agree. Gradient-tracking flags on the
/// destinations are preserved.
pub fn assign(
    loaded: Vec<(String, Tensor)>,
    targets: &mut [(&str, &mut Tensor)],
) -> Result<(), CheckpointError> {
    let mut by_name: std::collections::BTreeMap<String, Tensor> = loaded.into_iter().collect();
    for (name, dst) in targets.iter_mut() {
        let src = by_name
            .remove(*name)
            .ok_or_else(|| CheckpointError::MissingTensor {
                name: (*name).to_string(),
            })?;
        if src.shape != dst.shape {
            return Err(CheckpointError::WrongShape {
                name: (*name).to_string(),
                want: dst.shape.clone(),
                got: src.shape,
            });
        }
        dst.values = src.values;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(CheckpointError::UnexpectedTensor { name });
    }
    Ok(())
}
