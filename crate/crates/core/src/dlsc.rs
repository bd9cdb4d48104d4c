//! Online dictionary learning and sparse coding.
//!
//! Every frame `s` is approximated as `Phi * c` with an under-complete
//! dictionary `Phi` (inputs x atoms) and a sparse code `c`. Codes are found by
//! iterated proximal gradient steps on the LASSO objective
//! `0.5 * ||Phi c - s||^2 + lambda1 * ||c||_1`; the dictionary follows with
//! plain SGD steps on the same residual. Codes are warm-started from the
//! previous frame and never reset, which is what makes a handful of coding
//! iterations per frame enough on a slowly-changing stream.

use crate::frame::Frame;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DlscError {
    #[error("dictionary must be under-complete: need n_atoms < n_inputs, got {n_atoms} atoms for {n_inputs} inputs")]
    NotUnderComplete { n_inputs: usize, n_atoms: usize },
    #[error("{context}: expected length {expected}, got {actual}")]
    DimensionMismatch { context: &'static str, expected: usize, actual: usize },
    #[error("invalid parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("non-finite code at coding iteration {iteration}")]
    NonFiniteCode { iteration: usize },
    #[error("non-finite dictionary entries after learning step")]
    NonFiniteDictionary,
    #[error("non-finite dictionary entries in input")]
    NonFiniteInput,
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// Learning hyperparameters. `eta_c`/`n_c` drive the coding iterations,
/// `eta_d`/`n_d` the dictionary SGD, `lambda1` the sparsity pressure.
/// `clip_atom_norm` optionally rescales any atom whose L2 norm exceeds the
/// bound after an update — an ungated safety rail, off by default.
#[derive(Debug, Clone, PartialEq)]
pub struct DlscParams {
    pub eta_c: f64,
    pub eta_d: f64,
    pub lambda1: f64,
    pub n_c: usize,
    pub n_d: usize,
    pub n_atoms: usize,
    pub sigma_w: f64,
    pub clip_atom_norm: Option<f64>,
}

impl Default for DlscParams {
    fn default() -> Self {
        DlscParams {
            eta_c: 5e-3,
            eta_d: 1.4e-3,
            lambda1: 0.2,
            n_c: 10,
            n_d: 1,
            n_atoms: 64,
            sigma_w: 0.01,
            clip_atom_norm: None,
        }
    }
}

impl DlscParams {
    pub fn validate(&self) -> Result<(), DlscError> {
        let positive = [
            ("eta_c", self.eta_c),
            ("eta_d", self.eta_d),
            ("sigma_w", self.sigma_w),
        ];
        for (name, value) in positive {
            if !value.is_finite() || value <= 0.0 {
                return Err(DlscError::InvalidParam { name, value });
            }
        }
        if !self.lambda1.is_finite() || self.lambda1 < 0.0 {
            return Err(DlscError::InvalidParam { name: "lambda1", value: self.lambda1 });
        }
        if self.n_c == 0 {
            return Err(DlscError::InvalidParam { name: "n_c", value: 0.0 });
        }
        if self.n_atoms == 0 {
            return Err(DlscError::InvalidParam { name: "n_atoms", value: 0.0 });
        }
        if let Some(r) = self.clip_atom_norm {
            if !r.is_finite() || r <= 0.0 {
                return Err(DlscError::InvalidParam { name: "clip_atom_norm", value: r });
            }
        }
        Ok(())
    }
}

/// Under-complete dictionary, stored dense as `n_inputs x n_atoms` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
}

impl Dictionary {
    pub fn from_atoms(atoms: Array2<f64>) -> Result<Self, DlscError> {
        let (n, m) = atoms.dim();
        if m == 0 || n <= m {
            return Err(DlscError::NotUnderComplete { n_inputs: n, n_atoms: m });
        }
        if !atoms.iter().all(|v| v.is_finite()) {
            return Err(DlscError::NonFiniteInput);
        }
        Ok(Dictionary { atoms })
    }

    pub fn n_inputs(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms
            .as_slice()
            .expect("dictionary is stored contiguously")
            .chunks_exact(self.n_atoms())
    }

    /// Writes a plain-text checkpoint: a `DLSC v1 N M` header line followed by
    /// N rows of M space-separated floats. Floats are printed with Rust's
    /// shortest-roundtrip formatting, so a load reproduces the matrix exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DlscError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "DLSC v1 {} {}", self.n_inputs(), self.n_atoms())?;
        let mut line = String::new();
        for row in self.rows() {
            line.clear();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                line.push_str(&format!("{v}"));
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, DlscError> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| DlscError::CheckpointFormat("empty file".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "DLSC" || fields[1] != "v1" {
            return Err(DlscError::CheckpointFormat(format!("bad header {header:?}")));
        }
        let n: usize = fields[2]
            .parse()
            .map_err(|_| DlscError::CheckpointFormat(format!("bad n_inputs {:?}", fields[2])))?;
        let m: usize = fields[3]
            .parse()
            .map_err(|_| DlscError::CheckpointFormat(format!("bad n_atoms {:?}", fields[3])))?;
        let mut data = Vec::with_capacity(n * m);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if i >= n {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(DlscError::CheckpointFormat(format!("more than {n} rows")));
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| DlscError::CheckpointFormat(format!("bad float {tok:?} in row {i}")))?;
                data.push(v);
            }
            if data.len() - before != m {
                return Err(DlscError::CheckpointFormat(format!(
                    "row {i} has {} values, expected {m}",
                    data.len() - before
                )));
            }
        }
        if data.len() != n * m {
            return Err(DlscError::CheckpointFormat(format!(
                "expected {n} rows of {m} values, got {} values",
                data.len()
            )));
        }
        let atoms = Array2::from_shape_vec((n, m), data)
            .map_err(|e| DlscError::CheckpointFormat(e.to_string()))?;
        Dictionary::from_atoms(atoms)
    }
}

/// Draws `Phi_ij ~ N(0, sigma_w^2)` in row-major order from a ChaCha stream,
/// so a given `(n_inputs, n_atoms, sigma_w, seed)` always yields the same
/// dictionary, bit for bit.
pub fn init_dictionary(
    n_inputs: usize,
    n_atoms: usize,
    sigma_w: f64,
    seed: u64,
) -> Result<Dictionary, DlscError> {
    if n_atoms == 0 || n_inputs <= n_atoms {
        return Err(DlscError::NotUnderComplete { n_inputs, n_atoms });
    }
    if !sigma_w.is_finite() || sigma_w <= 0.0 {
        return Err(DlscError::InvalidParam { name: "sigma_w", value: sigma_w });
    }
    let normal = Normal::new(0.0, sigma_w).expect("validated sigma_w");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n_inputs * n_atoms).map(|_| normal.sample(&mut rng)).collect();
    let atoms = Array2::from_shape_vec((n_inputs, n_atoms), data).expect("shape matches data");
    Ok(Dictionary { atoms })
}

/// Elementwise shrinkage `max(0, x - tau) + min(0, x + tau)`: the proximal
/// operator of `tau * ||.||_1`. `tau = 0` is the identity.
pub fn soft_threshold(x: &Array1<f64>, tau: f64) -> Array1<f64> {
    debug_assert!(tau >= 0.0, "threshold must be non-negative");
    x.mapv(|v| soft_threshold_scalar(v, tau))
}

#[inline]
fn soft_threshold_scalar(v: f64, tau: f64) -> f64 {
    (v - tau).max(0.0) + (v + tau).min(0.0)
}

/// Sparse code for one frame; entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    values: Array1<f64>,
}

impl SparseCode {
    pub fn zeros(len: usize) -> Self {
        SparseCode { values: Array1::zeros(len) }
    }

    pub fn from_values(values: Array1<f64>) -> Result<Self, DlscError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(DlscError::NonFiniteInput);
        }
        Ok(SparseCode { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Number of exactly-zero entries (the shrinkage produces literal zeros).
    pub fn count_zeros(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0.0).count()
    }
}

/// Everything the streaming encoder carries between frames: the evolving
/// dictionary, the warm-started code, and the last reprojection error.
#[derive(Debug, Clone)]
pub struct EncoderState {
    dictionary: Dictionary,
    code: SparseCode,
    prev_error: f64,
    params: DlscParams,
    seed: u64,
    objective_increases: u64,
}

impl EncoderState {
    pub fn new(n_inputs: usize, params: DlscParams, seed: u64) -> Result<Self, DlscError> {
        params.validate()?;
        let dictionary = init_dictionary(n_inputs, params.n_atoms, params.sigma_w, seed)?;
        Ok(EncoderState {
            code: SparseCode::zeros(dictionary.n_atoms()),
            dictionary,
            prev_error: 0.0,
            params,
            seed,
            objective_increases: 0,
        })
    }

    /// Wraps an existing dictionary (checkpoint replay); the code restarts
    /// from zero exactly like a fresh stream.
    pub fn from_dictionary(dictionary: Dictionary, mut params: DlscParams) -> Result<Self, DlscError> {
        params.n_atoms = dictionary.n_atoms();
        params.validate()?;
        Ok(EncoderState {
            code: SparseCode::zeros(dictionary.n_atoms()),
            dictionary,
            prev_error: 0.0,
            params,
            seed: 0,
            objective_increases: 0,
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn code(&self) -> &SparseCode {
        &self.code
    }

    /// Squared reprojection error of the most recent `encode`, measured with
    /// the dictionary that produced the code (before any learning step).
    pub fn prev_error(&self) -> f64 {
        self.prev_error
    }

    pub fn params(&self) -> &DlscParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// How many coding iterations increased the LASSO objective so far. With a
    /// step size below the stability limit this stays at zero; a climbing
    /// counter is the early symptom of run-away dictionary growth.
    pub fn objective_increases(&self) -> u64 {
        self.objective_increases
    }

    /// One in-place SGD step on `self`'s dictionary for (`code`, `frame`).
    pub fn dictionary_step_in_place(
        &mut self,
        code: &SparseCode,
        frame: &Frame,
    ) -> Result<(), DlscError> {
        check_dims(&self.dictionary, Some(code), Some(frame))?;
        apply_dictionary_step(
            &mut self.dictionary.atoms,
            code,
            frame,
            self.params.eta_d,
            self.params.clip_atom_norm,
        )
    }
}

fn check_dims(
    dict: &Dictionary,
    code: Option<&SparseCode>,
    frame: Option<&Frame>,
) -> Result<(), DlscError> {
    if let Some(c) = code {
        if c.len() != dict.n_atoms() {
            return Err(DlscError::DimensionMismatch {
                context: "code length vs dictionary atoms",
                expected: dict.n_atoms(),
                actual: c.len(),
            });
        }
    }
    if let Some(f) = frame {
        if f.len() != dict.n_inputs() {
            return Err(DlscError::DimensionMismatch {
                context: "frame length vs dictionary inputs",
                expected: dict.n_inputs(),
                actual: f.len(),
            });
        }
    }
    Ok(())
}

/// One row-major pass over the dictionary (given as its flat `n x m` slice)
/// computing the squared residual `||Phi c - s||^2` and, when `grad` is given,
/// the coding gradient `Phi^T (Phi c - s)`; when `residual` is given, the
/// residual vector itself.
fn residual_pass(
    phi: &[f64],
    m: usize,
    s: &[f64],
    c: &[f64],
    mut grad: Option<&mut [f64]>,
    mut residual: Option<&mut Vec<f64>>,
) -> f64 {
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    if let Some(r) = residual.as_deref_mut() {
        r.clear();
    }
    let mut sq = 0.0;
    for (row, &si) in phi.chunks_exact(m).zip(s) {
        let mut pred = 0.0;
        for (a, b) in row.iter().zip(c) {
            pred += a * b;
        }
        let ri = pred - si;
        sq += ri * ri;
        if let Some(g) = grad.as_deref_mut() {
            for (gj, a) in g.iter_mut().zip(row) {
                *gj += ri * a;
            }
        }
        if let Some(r) = residual.as_deref_mut() {
            r.push(ri);
        }
    }
    sq
}

fn flat(dict: &Dictionary) -> &[f64] {
    dict.atoms.as_slice().expect("dictionary is stored contiguously")
}

fn flat_pixels(frame: &Frame) -> &[f64] {
    frame.pixels().as_slice().expect("pixels are contiguous")
}

/// Squared reprojection error `e = ||Phi c - s||^2`.
pub fn reprojection_error(
    dict: &Dictionary,
    code: &SparseCode,
    frame: &Frame,
) -> Result<f64, DlscError> {
    check_dims(dict, Some(code), Some(frame))?;
    let c = code.values.as_slice().expect("code is contiguous");
    Ok(residual_pass(flat(dict), dict.n_atoms(), flat_pixels(frame), c, None, None))
}

/// Runs `n_c` proximal gradient iterations on the frame, warm-starting from
/// the code already in `state`, and leaves both the final code and its
/// reprojection error behind in `state`. The dictionary is not touched.
///
/// Divergence surfaces as `NonFiniteCode` naming the iteration that first
/// produced a non-finite value.
pub fn encode(state: &mut EncoderState, frame: &Frame) -> Result<SparseCode, DlscError> {
    check_dims(&state.dictionary, None, Some(frame))?;
    let p = &state.params;
    let tau = p.eta_c * p.lambda1;
    let m = state.dictionary.n_atoms();
    let mut c = state.code.values.clone();
    let mut g = vec![0.0; m];
    let mut prev_obj = f64::INFINITY;
    let mut increases = 0u64;
    let phi = flat(&state.dictionary);
    let s = flat_pixels(frame);
    for iteration in 0..p.n_c {
        let c_slice = c.as_slice().expect("code is contiguous");
        let sq = residual_pass(phi, m, s, c_slice, Some(&mut g), None);
        let obj = 0.5 * sq + p.lambda1 * c.iter().map(|v| v.abs()).sum::<f64>();
        if obj > prev_obj * (1.0 + 1e-12) + 1e-12 {
            increases += 1;
            log::trace!(
                "coding objective rose at frame {} iteration {iteration}: {prev_obj} -> {obj}",
                frame.id
            );
        }
        prev_obj = obj;
        for (cv, gv) in c.iter_mut().zip(&g) {
            *cv = soft_threshold_scalar(*cv - p.eta_c * gv, tau);
        }
        if !c.iter().all(|v| v.is_finite()) {
            state.objective_increases += increases;
            return Err(DlscError::NonFiniteCode { iteration });
        }
    }
    let c_slice = c.as_slice().expect("code is contiguous");
    let e = residual_pass(phi, m, s, c_slice, None, None);
    state.objective_increases += increases;
    if !e.is_finite() {
        return Err(DlscError::NonFiniteCode { iteration: state.params.n_c });
    }
    state.code = SparseCode { values: c };
    state.prev_error = e;
    Ok(state.code.clone())
}

fn apply_dictionary_step(
    atoms: &mut Array2<f64>,
    code: &SparseCode,
    frame: &Frame,
    eta_d: f64,
    clip_atom_norm: Option<f64>,
) -> Result<(), DlscError> {
    if !eta_d.is_finite() || eta_d <= 0.0 {
        return Err(DlscError::InvalidParam { name: "eta_d", value: eta_d });
    }
    let m = atoms.ncols();
    let active: Vec<(usize, f64)> = code
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(j, &v)| (j, v))
        .collect();
    if active.is_empty() {
        return Ok(());
    }
    let mut residual = Vec::with_capacity(atoms.nrows());
    {
        let phi = atoms.as_slice().expect("dictionary is stored contiguously");
        let c = code.values.as_slice().expect("code is contiguous");
        residual_pass(phi, m, flat_pixels(frame), c, None, Some(&mut residual));
    }
    let flat = atoms.as_slice_mut().expect("dictionary is stored contiguously");
    let mut ok = true;
    for (row, ri) in flat.chunks_exact_mut(m).zip(&residual) {
        let step = eta_d * ri;
        for &(j, cj) in &active {
            let v = row[j] - step * cj;
            ok &= v.is_finite();
            row[j] = v;
        }
    }
    if !ok {
        return Err(DlscError::NonFiniteDictionary);
    }
    if let Some(bound) = clip_atom_norm {
        for &(j, _) in &active {
            let norm = flat
                .chunks_exact(m)
                .map(|row| row[j] * row[j])
                .sum::<f64>()
                .sqrt();
            if norm > bound {
                let scale = bound / norm;
                for row in flat.chunks_exact_mut(m) {
                    row[j] *= scale;
                }
            }
        }
    }
    Ok(())
}

/// One SGD step `Phi <- Phi - eta_d (Phi c - s) c^T`, returned as a new
/// dictionary. A zero code (or an exact reconstruction) leaves the atoms
/// bit-identical because the gradient vanishes termwise.
pub fn dictionary_step(
    dict: &Dictionary,
    code: &SparseCode,
    frame: &Frame,
    eta_d: f64,
) -> Result<Dictionary, DlscError> {
    check_dims(dict, Some(code), Some(frame))?;
    let mut out = dict.clone();
    apply_dictionary_step(&mut out.atoms, code, frame, eta_d, None)?;
    Ok(out)
}
