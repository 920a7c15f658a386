//! Attention matrices, per-sentence attention captures, their validation and
//! the JSON-lines dump format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{AttnType, HeadId, HeadLayout};

/// Maximum deviation of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Row-major |I| x |J| attention weights (query rows, key columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch(format!(
                "{rows}x{cols} matrix needs {} weights, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::LengthMismatch("ragged attention rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&w| w == 0.0)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }
}

/// One (layer, head) entry of a capture. Masked heads carry an all-zero matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlot {
    pub matrix: AttentionMatrix,
    pub masked: bool,
}

/// Attention weights of every head of one attention type for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub sid: usize,
    pub pair: String,
    pub attn: AttnType,
    /// Query positions: source length for EncSelf, target length for Cross.
    pub query_len: usize,
    /// Key positions: always the source length.
    pub key_len: usize,
    layers: usize,
    heads: usize,
    slots: Vec<Option<HeadSlot>>,
    stray: Vec<(usize, usize)>,
}

impl AttentionCapture {
    pub fn new(
        sid: usize,
        pair: impl Into<String>,
        attn: AttnType,
        layers: usize,
        heads: usize,
        query_len: usize,
        key_len: usize,
    ) -> Self {
        Self {
            sid,
            pair: pair.into(),
            attn,
            query_len,
            key_len,
            layers,
            heads,
            slots: vec![None; layers * heads],
            stray: Vec::new(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn set(&mut self, layer: usize, head: usize, matrix: AttentionMatrix, masked: bool) {
        if layer >= self.layers || head >= self.heads {
            self.stray.push((layer, head));
            return;
        }
        self.slots[layer * self.heads + head] = Some(HeadSlot { matrix, masked });
    }

    pub fn remove(&mut self, layer: usize, head: usize) -> Option<HeadSlot> {
        self.slots[layer * self.heads + head].take()
    }

    pub fn slot(&self, layer: usize, head: usize) -> Option<&HeadSlot> {
        self.slots.get(layer * self.heads + head)?.as_ref()
    }

    pub fn slot_mut(&mut self, layer: usize, head: usize) -> Option<&mut HeadSlot> {
        self.slots.get_mut(layer * self.heads + head)?.as_mut()
    }

    /// Present slots in (layer, head) order.
    pub fn iter(&self) -> impl Iterator<Item = (HeadId, &HeadSlot)> {
        let heads = self.heads;
        let attn = self.attn;
        self.slots.iter().enumerate().filter_map(move |(i, s)| {
            s.as_ref()
                .map(|slot| (HeadId::new(attn, i / heads, i % heads), slot))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    MissingSlot,
    UnexpectedSlot,
    GridMismatch { expected: (usize, usize), found: (usize, usize) },
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
    RowSum { row: usize, sum: f64 },
    OutOfRange { row: usize, col: usize, value: f64 },
    MaskedNonZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sid: usize,
    pub pair: String,
    pub attn: AttnType,
    pub layer: usize,
    pub head: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sentence {} [{}] {} layer {} head {}: ",
            self.sid, self.pair, self.attn, self.layer, self.head
        )?;
        match &self.kind {
            ViolationKind::MissingSlot => write!(f, "missing slot"),
            ViolationKind::UnexpectedSlot => write!(f, "slot outside the model's head grid"),
            ViolationKind::GridMismatch { expected, found } => write!(
                f,
                "capture grid {}x{} does not match model {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            ViolationKind::ShapeMismatch { expected, found } => write!(
                f,
                "shape {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            ViolationKind::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            ViolationKind::OutOfRange { row, col, value } => {
                write!(f, "weight ({row}, {col}) = {value} outside [0, 1]")
            }
            ViolationKind::MaskedNonZero => write!(f, "masked head has non-zero weights"),
        }
    }
}

/// Scans the whole capture and returns every violation found; empty means ok.
pub fn validate_capture(cap: &AttentionCapture, layout: &HeadLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: usize, head: usize, kind: ViolationKind| {
        out.push(Violation {
            sid: cap.sid,
            pair: cap.pair.clone(),
            attn: cap.attn,
            layer,
            head,
            kind,
        })
    };

    let expected_grid = (layout.layers(cap.attn), layout.heads);
    if (cap.layers, cap.heads) != expected_grid {
        push(
            0,
            0,
            ViolationKind::GridMismatch {
                expected: expected_grid,
                found: (cap.layers, cap.heads),
            },
        );
    }
    for &(layer, head) in &cap.stray {
        push(layer, head, ViolationKind::UnexpectedSlot);
    }

    let expected_shape = (cap.query_len, cap.key_len);
    for layer in 0..expected_grid.0 {
        for head in 0..expected_grid.1 {
            let slot = if layer < cap.layers && head < cap.heads {
                cap.slot(layer, head)
            } else {
                None
            };
            let Some(slot) = slot else {
                push(layer, head, ViolationKind::MissingSlot);
                continue;
            };
            let m = &slot.matrix;
            let found = (m.rows(), m.cols());
            let square_ok = cap.attn == AttnType::Cross || m.rows() == m.cols();
            if found != expected_shape || !square_ok || m.is_empty() {
                let expected = if cap.attn == AttnType::EncSelf {
                    (cap.key_len, cap.key_len)
                } else {
                    expected_shape
                };
                push(layer, head, ViolationKind::ShapeMismatch { expected, found });
                continue;
            }
            if slot.masked {
                if !m.is_zero() {
                    push(layer, head, ViolationKind::MaskedNonZero);
                }
                continue;
            }
            for (i, row) in m.row_iter().enumerate() {
                if let Some((j, &v)) = row
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| !(0.0..=1.0).contains(&v))
                {
                    push(layer, head, ViolationKind::OutOfRange { row: i, col: j, value: v });
                }
                let sum: f64 = row.iter().sum();
                if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                    push(layer, head, ViolationKind::RowSum { row: i, sum });
                }
            }
        }
    }
    out
}

/// One line of the attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub sid: usize,
    pub pair: String,
    pub attn: AttnType,
    pub layer: usize,
    pub head: usize,
    pub w: Vec<Vec<f64>>,
}

pub fn write_jsonl<W: Write>(mut out: W, captures: &[AttentionCapture]) -> Result<()> {
    for cap in captures {
        for (id, slot) in cap.iter() {
            let rec = CaptureRecord {
                sid: cap.sid,
                pair: cap.pair.clone(),
                attn: cap.attn,
                layer: id.layer,
                head: id.head,
                w: slot.matrix.to_rows(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<attention dump>", e))?;
        }
    }
    Ok(())
}

/// Reads a dump and regroups its records into captures sized by `layout`.
/// All-zero matrices are read back as masked heads. Captures come out
/// sorted by (attn, pair, sid).
pub fn read_jsonl<R: BufRead>(input: R, layout: &HeadLayout) -> Result<Vec<AttentionCapture>> {
    let mut groups: BTreeMap<(AttnType, String, usize), AttentionCapture> = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<attention dump>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptureRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format("attention dump", format!("line {}: {e}", idx + 1))
        })?;
        let matrix = AttentionMatrix::from_rows(&rec.w).map_err(|e| {
            Error::format("attention dump", format!("line {}: {e}", idx + 1))
        })?;
        let key = (rec.attn, rec.pair.clone(), rec.sid);
        let cap = groups.entry(key).or_insert_with(|| {
            AttentionCapture::new(
                rec.sid,
                rec.pair.clone(),
                rec.attn,
                layout.layers(rec.attn),
                layout.heads,
                matrix.rows(),
                matrix.cols(),
            )
        });
        let masked = matrix.is_zero();
        cap.set(rec.layer, rec.head, matrix, masked);
    }
    Ok(groups.into_values().collect())
}
