//! Structured grid, discrete function and data-buffer model.
//!
//! Functions carry a halo of `space_order` cells on every side of every space
//! dimension, so padded shapes are `shape + 2*space_order` elementwise. Time
//! functions additionally get a leading buffer axis of `time_order + 1` slots
//! that the execution layers rotate through.

use crate::error::{Error, Result};

pub const MAX_DIMS: usize = 3;
const DIM_NAMES: [&str; MAX_DIMS] = ["x", "y", "z"];

/// A structured mesh: points per dimension plus a physical extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub shape: Vec<usize>,
    pub extent: Vec<f64>,
    pub dims: Vec<String>,
}

impl Grid {
    pub fn new(shape: &[usize], extent: &[f64]) -> Result<Grid> {
        if shape.len() != extent.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape has {} entries, extent has {}",
                shape.len(),
                extent.len()
            )));
        }
        if shape.is_empty() || shape.len() > MAX_DIMS {
            return Err(Error::InvalidGrid(format!(
                "expected 1 to {} dimensions, got {}",
                MAX_DIMS,
                shape.len()
            )));
        }
        if let Some(bad) = shape.iter().find(|&&s| s < 2) {
            return Err(Error::InvalidGrid(format!("shape entry {bad} < 2")));
        }
        if let Some(bad) = extent.iter().find(|&&e| !(e > 0.0)) {
            return Err(Error::InvalidGrid(format!("extent entry {bad} not positive")));
        }
        Ok(Grid {
            shape: shape.to_vec(),
            extent: extent.to_vec(),
            dims: DIM_NAMES[..shape.len()].iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Node-centered spacing: h_d = extent_d / (shape_d - 1).
    pub fn spacing(&self) -> Vec<f64> {
        self.shape
            .iter()
            .zip(&self.extent)
            .map(|(&s, &e)| e / (s as f64 - 1.0))
            .collect()
    }

    /// Spacing symbol name for a dimension, e.g. "h_x".
    pub fn spacing_name(&self, dim: usize) -> String {
        format!("h_{}", self.dims[dim])
    }

    pub fn points(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn create_grid(shape: &[usize], extent: &[f64]) -> Result<Grid> {
    Grid::new(shape, extent)
}

/// A discrete field on a grid. `time_order: None` models a purely spatial
/// function; `Some(k)` a time-varying one with `k + 1` rotating buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFunction {
    pub name: String,
    pub grid: Grid,
    pub space_order: usize,
    pub time_order: Option<usize>,
}

fn valid_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl DiscreteFunction {
    pub fn space(name: &str, grid: Grid, space_order: usize) -> Result<DiscreteFunction> {
        if !valid_identifier(name) {
            return Err(Error::InvalidFunction(format!("`{name}` is not a C identifier")));
        }
        if space_order < 2 || space_order % 2 != 0 {
            return Err(Error::InvalidFunction(format!(
                "space_order {space_order} must be even and >= 2"
            )));
        }
        Ok(DiscreteFunction {
            name: name.to_string(),
            grid,
            space_order,
            time_order: None,
        })
    }

    pub fn time(name: &str, grid: Grid, space_order: usize, time_order: usize) -> Result<DiscreteFunction> {
        let mut f = DiscreteFunction::space(name, grid, space_order)?;
        if time_order < 1 {
            return Err(Error::InvalidFunction("time_order must be >= 1".into()));
        }
        f.time_order = Some(time_order);
        Ok(f)
    }

    pub fn is_time_function(&self) -> bool {
        self.time_order.is_some()
    }

    /// Buffer slots along the time axis (1 for space functions).
    pub fn num_buffers(&self) -> usize {
        self.time_order.map(|t| t + 1).unwrap_or(1)
    }

    /// Halo width per side, in cells. Forced to the full space order by the
    /// padded-dimension convention this pipeline follows.
    pub fn halo(&self) -> usize {
        self.space_order
    }

    pub fn padded_shape(&self) -> Vec<usize> {
        self.grid.shape.iter().map(|&s| s + 2 * self.halo()).collect()
    }
}

/// The role a scalar plays in a problem; spacing and timestep values must be
/// strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantRole {
    Spacing,
    Timestep,
    Coefficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantSymbol {
    pub name: String,
    pub value: f64,
    pub role: ConstantRole,
}

impl ConstantSymbol {
    pub fn new(name: &str, value: f64, role: ConstantRole) -> Result<ConstantSymbol> {
        if !valid_identifier(name) {
            return Err(Error::InvalidFunction(format!("`{name}` is not a C identifier")));
        }
        if !value.is_finite() {
            return Err(Error::InvalidFunction(format!("constant `{name}` is not finite")));
        }
        if matches!(role, ConstantRole::Spacing | ConstantRole::Timestep) && !(value > 0.0) {
            return Err(Error::InvalidFunction(format!(
                "constant `{name}` must be positive"
            )));
        }
        Ok(ConstantSymbol {
            name: name.to_string(),
            value,
            role,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    F32,
    F64,
}

impl ElementKind {
    pub fn c_name(&self) -> &'static str {
        match self {
            ElementKind::F32 => "float",
            ElementKind::F64 => "double",
        }
    }

    pub fn size_bytes(&self) -> usize {
        match self {
            ElementKind::F32 => 4,
            ElementKind::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense row-major storage for one discrete function, halo included, with the
/// time axis outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBuffer {
    pub owner: String,
    pub shape: Vec<usize>,
    pub padded_shape: Vec<usize>,
    pub halo: usize,
    pub num_buffers: usize,
    kind: ElementKind,
    storage: Storage,
}

impl DataBuffer {
    pub fn allocate(f: &DiscreteFunction, kind: ElementKind) -> Result<DataBuffer> {
        Self::allocate_slots(f, kind, f.num_buffers())
    }

    /// Allocation with an explicit slot count; the unrolled full-history
    /// reference runs use more slots than the function declares.
    pub fn allocate_slots(f: &DiscreteFunction, kind: ElementKind, slots: usize) -> Result<DataBuffer> {
        let padded = f.padded_shape();
        let space: usize = padded.iter().product();
        let elems = space * slots;
        let storage = match kind {
            ElementKind::F32 => {
                let mut v: Vec<f32> = Vec::new();
                v.try_reserve_exact(elems).map_err(|e| Error::Resource {
                    elems,
                    reason: e.to_string(),
                })?;
                v.resize(elems, 0.0);
                Storage::F32(v)
            }
            ElementKind::F64 => {
                let mut v: Vec<f64> = Vec::new();
                v.try_reserve_exact(elems).map_err(|e| Error::Resource {
                    elems,
                    reason: e.to_string(),
                })?;
                v.resize(elems, 0.0);
                Storage::F64(v)
            }
        };
        Ok(DataBuffer {
            owner: f.name.clone(),
            shape: f.grid.shape.clone(),
            padded_shape: padded,
            halo: f.halo(),
            num_buffers: slots,
            kind,
            storage,
        })
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot_len(&self) -> usize {
        self.padded_shape.iter().product()
    }

    /// Row-major strides over the padded space dimensions.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.padded_shape.len()];
        for d in (0..self.padded_shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.padded_shape[d + 1];
        }
        strides
    }

    /// Row-major offset of a domain point (halo offset applied). Point
    /// coordinates may reach into the halo: [-halo, shape_d + halo).
    pub fn linear_index(&self, time_slot: Option<usize>, point: &[i64]) -> Result<usize> {
        if point.len() != self.padded_shape.len() {
            return Err(Error::IndexOutOfRange(format!(
                "point has {} coordinates, buffer has {} dims",
                point.len(),
                self.padded_shape.len()
            )));
        }
        let slot = match (time_slot, self.num_buffers) {
            (None, 1) => 0,
            (Some(s), n) if n > 1 => {
                if s >= n {
                    return Err(Error::IndexOutOfRange(format!(
                        "time slot {s} outside [0, {n})"
                    )));
                }
                s
            }
            (Some(_), _) => {
                return Err(Error::IndexOutOfRange(
                    "time slot given for a buffer with no time axis".into(),
                ))
            }
            (None, _) => {
                return Err(Error::IndexOutOfRange(
                    "time slot required for a time-buffered function".into(),
                ))
            }
        };
        let strides = self.strides();
        let mut idx = slot * self.slot_len();
        for d in 0..point.len() {
            let p = point[d] + self.halo as i64;
            if p < 0 || p >= self.padded_shape[d] as i64 {
                return Err(Error::IndexOutOfRange(format!(
                    "coordinate {} outside [-{}, {}) in dim {}",
                    point[d], self.halo, self.shape[d] + self.halo, d
                )));
            }
            idx += p as usize * strides[d];
        }
        Ok(idx)
    }

    pub fn get(&self, idx: usize) -> f64 {
        match &self.storage {
            Storage::F32(v) => v[idx] as f64,
            Storage::F64(v) => v[idx],
        }
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        match &mut self.storage {
            Storage::F32(v) => v[idx] = value as f32,
            Storage::F64(v) => v[idx] = value,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }

    pub fn as_f64_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
}

pub fn allocate(f: &DiscreteFunction, kind: ElementKind) -> Result<DataBuffer> {
    DataBuffer::allocate(f, kind)
}

/// Iterate all domain points of a shape in row-major order.
pub fn domain_points(shape: &[usize]) -> Vec<Vec<i64>> {
    let mut out = Vec::with_capacity(shape.iter().product());
    let mut point = vec![0i64; shape.len()];
    loop {
        out.push(point.clone());
        let mut d = shape.len();
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            point[d] += 1;
            if (point[d] as usize) < shape[d] {
                break;
            }
            point[d] = 0;
        }
    }
}
