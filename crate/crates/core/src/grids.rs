//! Colored grids, their fixed-stride token layout, and ARC-format JSON I/O.
//!
//! A grid is flattened into a sequence of `2 + max_rows * max_cols` tokens:
//! the two shape tokens `(rows, cols)` followed by a raster scan of the
//! padded `max_rows x max_cols` canvas. Row stride is always `max_cols`,
//! independent of the grid's own width. Padded slots carry token `0` and are
//! flagged off in the pad mask; nothing downstream reads them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest side length of an ARC grid.
pub const MAX_SIDE: usize = 30;
/// Number of cell colors.
pub const NUM_COLORS: usize = 10;
/// Token written into padded pixel slots.
pub const PAD_TOKEN: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("invalid grid shape {rows}x{cols}: sides must lie in 1..={max}")]
    InvalidShape { rows: i64, cols: i64, max: usize },
    #[error("cell value {0} is not a color in 0..=9")]
    InvalidColor(i64),
    #[error("expected {expected} cells, got {got}")]
    CellCount { expected: usize, got: usize },
    #[error("ragged grid: row {row} has {len} cells, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("grid {rows}x{cols} does not fit a {max_rows}x{max_cols} layout")]
    TooLarge {
        rows: usize,
        cols: usize,
        max_rows: usize,
        max_cols: usize,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed task JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("task {task_id}: {source}")]
    Validation {
        task_id: String,
        #[source]
        source: GridError,
    },
    #[error("solutions file: {0}")]
    Solutions(String),
}

/// A rows x cols grid of colors in `0..=9`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    rows: usize,
    cols: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cells: Vec<u8>) -> Result<Self, GridError> {
        check_shape(rows as i64, cols as i64, MAX_SIDE, MAX_SIDE)?;
        if cells.len() != rows * cols {
            return Err(GridError::CellCount {
                expected: rows * cols,
                got: cells.len(),
            });
        }
        if let Some(&bad) = cells.iter().find(|&&c| c as usize >= NUM_COLORS) {
            return Err(GridError::InvalidColor(bad as i64));
        }
        Ok(Self { rows, cols, cells })
    }

    /// All cells set to `color`.
    pub fn filled(rows: usize, cols: usize, color: u8) -> Result<Self, GridError> {
        Self::new(rows, cols, vec![color; rows * cols])
    }

    /// Builds a grid from nested rows, as found in ARC JSON.
    pub fn from_rows<T: Copy + Into<i64>>(rows: &[Vec<T>]) -> Result<Self, GridError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        check_shape(n_rows as i64, n_cols as i64, MAX_SIDE, MAX_SIDE)?;
        let mut cells = Vec::with_capacity(n_rows * n_cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(GridError::Ragged {
                    row: r,
                    len: row.len(),
                    expected: n_cols,
                });
            }
            for &v in row {
                let v: i64 = v.into();
                if !(0..NUM_COLORS as i64).contains(&v) {
                    return Err(GridError::InvalidColor(v));
                }
                cells.push(v as u8);
            }
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.cols + c]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.cols).map(<[u8]>::to_vec).collect()
    }
}

/// Serialized as a list of rows, the ARC convention.
impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<i64>>::deserialize(d)?;
        Grid::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

fn check_shape(rows: i64, cols: i64, max_rows: usize, max_cols: usize) -> Result<(), GridError> {
    if rows < 1 || cols < 1 || rows > max_rows as i64 || cols > max_cols as i64 {
        return Err(GridError::InvalidShape {
            rows,
            cols,
            max: max_rows.max(max_cols),
        });
    }
    Ok(())
}

/// Padded canvas size used when flattening grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub max_rows: usize,
    pub max_cols: usize,
}

impl SequenceLayout {
    /// Full ARC canvas: 30x30 pixels, 902 tokens.
    pub const ARC: Self = Self {
        max_rows: MAX_SIDE,
        max_cols: MAX_SIDE,
    };

    pub fn new(max_rows: usize, max_cols: usize) -> Result<Self, GridError> {
        check_shape(max_rows as i64, max_cols as i64, MAX_SIDE, MAX_SIDE)?;
        Ok(Self { max_rows, max_cols })
    }

    pub fn pixels(&self) -> usize {
        self.max_rows * self.max_cols
    }

    /// Total tokens per grid: two shape tokens plus the pixel canvas.
    pub fn seq_len(&self) -> usize {
        2 + self.pixels()
    }

    pub fn fits(&self, g: &Grid) -> bool {
        g.rows <= self.max_rows && g.cols <= self.max_cols
    }

    pub fn check(&self, g: &Grid) -> Result<(), GridError> {
        if self.fits(g) {
            Ok(())
        } else {
            Err(GridError::TooLarge {
                rows: g.rows,
                cols: g.cols,
                max_rows: self.max_rows,
                max_cols: self.max_cols,
            })
        }
    }
}

impl Default for SequenceLayout {
    fn default() -> Self {
        Self::ARC
    }
}

/// Flattened grid: shape tokens, padded raster pixels and the pad mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSequence {
    pub layout: SequenceLayout,
    pub shape_tokens: [u8; 2],
    pub pixel_tokens: Vec<u8>,
    /// `true` marks a real cell.
    pub pad_mask: Vec<bool>,
}

impl GridSequence {
    pub fn len(&self) -> usize {
        2 + self.pixel_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Flattens `g` onto the 30x30 ARC canvas (902 tokens).
pub fn encode_sequence(g: &Grid) -> GridSequence {
    encode_sequence_with(g, SequenceLayout::ARC).expect("every valid grid fits the ARC canvas")
}

pub fn encode_sequence_with(g: &Grid, layout: SequenceLayout) -> Result<GridSequence, GridError> {
    layout.check(g)?;
    let mut pixel_tokens = vec![PAD_TOKEN; layout.pixels()];
    let mut pad_mask = vec![false; layout.pixels()];
    for r in 0..g.rows {
        let src = &g.cells[r * g.cols..(r + 1) * g.cols];
        let dst = r * layout.max_cols;
        pixel_tokens[dst..dst + g.cols].copy_from_slice(src);
        pad_mask[dst..dst + g.cols].fill(true);
    }
    Ok(GridSequence {
        layout,
        shape_tokens: [g.rows as u8, g.cols as u8],
        pixel_tokens,
        pad_mask,
    })
}

/// Inverse of [`encode_sequence_with`]; reads only in-bounds pixel slots.
pub fn decode_sequence(s: &GridSequence) -> Result<Grid, GridError> {
    let rows = s.shape_tokens[0] as usize;
    let cols = s.shape_tokens[1] as usize;
    check_shape(
        rows as i64,
        cols as i64,
        s.layout.max_rows,
        s.layout.max_cols,
    )?;
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let start = r * s.layout.max_cols;
        cells.extend_from_slice(&s.pixel_tokens[start..start + cols]);
    }
    Grid::new(rows, cols, cells)
}

/// One demonstration pair of a task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub input: Grid,
    pub output: Grid,
}

/// A held-out query; the output is only consulted by evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub input: Grid,
    pub output: Option<Grid>,
}

/// Demonstration pairs sharing one program plus optional queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task_id: String,
    pub pairs: Vec<Pair>,
    pub queries: Vec<Query>,
}

impl TaskInstance {
    pub fn largest_side(&self) -> (usize, usize) {
        let grids = self
            .pairs
            .iter()
            .flat_map(|p| [&p.input, &p.output])
            .chain(self.queries.iter().flat_map(|q| std::iter::once(&q.input).chain(&q.output)));
        grids.fold((0, 0), |(r, c), g| (r.max(g.rows), c.max(g.cols)))
    }
}

#[derive(Serialize, Deserialize)]
struct RawPair {
    input: Vec<Vec<i64>>,
    output: Vec<Vec<i64>>,
}

#[derive(Serialize, Deserialize)]
struct RawQuery {
    input: Vec<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<Vec<Vec<i64>>>,
}

#[derive(Serialize, Deserialize)]
struct RawTask {
    train: Vec<RawPair>,
    test: Vec<RawQuery>,
}

fn raw_grid(g: &Grid) -> Vec<Vec<i64>> {
    g.cells
        .chunks(g.cols)
        .map(|row| row.iter().map(|&v| v as i64).collect())
        .collect()
}

/// Parses an ARC challenges document: task id -> {"train": [...], "test": [...]}.
pub fn load_arc_json(bytes: &[u8]) -> Result<BTreeMap<String, TaskInstance>, DataError> {
    let raw: BTreeMap<String, RawTask> = serde_json::from_slice(bytes)?;
    let mut tasks = BTreeMap::new();
    for (task_id, task) in raw {
        let wrap = |source| DataError::Validation {
            task_id: task_id.clone(),
            source,
        };
        let pairs = task
            .train
            .iter()
            .map(|p| {
                Ok(Pair {
                    input: Grid::from_rows(&p.input)?,
                    output: Grid::from_rows(&p.output)?,
                })
            })
            .collect::<Result<Vec<_>, GridError>>()
            .map_err(wrap)?;
        let queries = task
            .test
            .iter()
            .map(|q| {
                Ok(Query {
                    input: Grid::from_rows(&q.input)?,
                    output: q.output.as_deref().map(Grid::from_rows).transpose()?,
                })
            })
            .collect::<Result<Vec<_>, GridError>>()
            .map_err(wrap)?;
        tasks.insert(
            task_id.clone(),
            TaskInstance {
                task_id,
                pairs,
                queries,
            },
        );
    }
    Ok(tasks)
}

/// Serializes tasks back to the ARC challenges schema. Output is compact and
/// ordered by task id, so equal inputs produce equal bytes.
pub fn save_arc_json<'a>(tasks: impl IntoIterator<Item = &'a TaskInstance>) -> Vec<u8> {
    let raw: BTreeMap<&str, RawTask> = tasks
        .into_iter()
        .map(|t| {
            let task = RawTask {
                train: t
                    .pairs
                    .iter()
                    .map(|p| RawPair {
                        input: raw_grid(&p.input),
                        output: raw_grid(&p.output),
                    })
                    .collect(),
                test: t
                    .queries
                    .iter()
                    .map(|q| RawQuery {
                        input: raw_grid(&q.input),
                        output: q.output.as_ref().map(raw_grid),
                    })
                    .collect(),
            };
            (t.task_id.as_str(), task)
        })
        .collect();
    serde_json::to_vec(&raw).expect("grid maps always serialize")
}

/// Parses a solutions document (task id -> one output grid per test entry).
pub fn load_arc_solutions(bytes: &[u8]) -> Result<BTreeMap<String, Vec<Grid>>, DataError> {
    let raw: BTreeMap<String, Vec<Vec<Vec<i64>>>> = serde_json::from_slice(bytes)?;
    raw.into_iter()
        .map(|(task_id, grids)| {
            let grids = grids
                .iter()
                .map(|g| Grid::from_rows(g))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| DataError::Validation {
                    task_id: task_id.clone(),
                    source,
                })?;
            Ok((task_id, grids))
        })
        .collect()
}

/// Serializes predictions or solutions in the solutions schema.
pub fn save_arc_solutions(solutions: &BTreeMap<String, Vec<Grid>>) -> Vec<u8> {
    let raw: BTreeMap<&str, Vec<Vec<Vec<i64>>>> = solutions
        .iter()
        .map(|(id, grids)| (id.as_str(), grids.iter().map(raw_grid).collect()))
        .collect();
    serde_json::to_vec(&raw).expect("grid maps always serialize")
}

/// Copies solution grids into the matching queries' outputs.
pub fn merge_solutions(
    tasks: &mut BTreeMap<String, TaskInstance>,
    solutions: BTreeMap<String, Vec<Grid>>,
) -> Result<(), DataError> {
    for (task_id, grids) in solutions {
        let task = tasks
            .get_mut(&task_id)
            .ok_or_else(|| DataError::Solutions(format!("unknown task id {task_id}")))?;
        if task.queries.len() != grids.len() {
            return Err(DataError::Solutions(format!(
                "task {task_id}: {} test inputs but {} solutions",
                task.queries.len(),
                grids.len()
            )));
        }
        for (q, g) in task.queries.iter_mut().zip(grids) {
            q.output = Some(g);
        }
    }
    Ok(())
}
