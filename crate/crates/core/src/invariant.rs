//! Precursor sets and the maximal control-invariant set fixed point.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{GeometryError, Polytope, TOL_GEOM};
use crate::lp;
use crate::vehicle::DiscreteModel;

pub const DEFAULT_MAX_ITER: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("precursor of an empty set requested")]
    EmptyTarget,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, InvariantError>;

#[derive(Debug, Clone)]
pub struct InvariantResult {
    pub set: Polytope,
    pub iterations: usize,
    pub converged: bool,
    /// Largest facet slack of the last iterate outside its successor.
    pub residual: f64,
}

fn check_dims(s: &Polytope, model: &DiscreteModel, u: &Polytope) -> Result<()> {
    if s.dim() != model.nx() {
        return Err(InvariantError::Dimension("set and state dimension differ"));
    }
    if u.dim() != model.nu() {
        return Err(InvariantError::Dimension("input set and input dimension differ"));
    }
    Ok(())
}

/// `{x : ∃u ∈ U, A x + B u ∈ S}` by projecting the lifted `(x, u)` set.
pub fn pre_set(s: &Polytope, model: &DiscreteModel, u: &Polytope) -> Result<Polytope> {
    check_dims(s, model, u)?;
    if s.is_empty()? {
        return Err(InvariantError::EmptyTarget);
    }
    pre_set_raw(s, &model.a, &model.b, Some(u))
}

fn pre_set_raw(s: &Polytope, a: &DMatrix<f64>, b: &DMatrix<f64>, u: Option<&Polytope>) -> Result<Polytope> {
    let n = a.nrows();
    let Some(u) = u.filter(|_| b.ncols() > 0) else {
        return Ok(s.affine_preimage(a)?.remove_redundancy()?);
    };
    let m = b.ncols();
    let (ms, mu) = (s.n_facets(), u.n_facets());
    let mut normals = DMatrix::zeros(ms + mu, n + m);
    let mut offsets = DVector::zeros(ms + mu);
    normals.view_mut((0, 0), (ms, n)).copy_from(&(s.normals() * a));
    normals.view_mut((0, n), (ms, m)).copy_from(&(s.normals() * b));
    normals.view_mut((ms, n), (mu, m)).copy_from(u.normals());
    offsets.rows_mut(0, ms).copy_from(s.offsets());
    offsets.rows_mut(ms, mu).copy_from(u.offsets());
    let lifted = Polytope::new(normals, offsets)?;
    Ok(lifted.project(&(0..n).collect::<Vec<_>>())?)
}

/// The same precursor set through `(S ⊕ (−B)∘U) ∘ A`.
pub fn pre_set_minkowski(s: &Polytope, model: &DiscreteModel, u: &Polytope) -> Result<Polytope> {
    check_dims(s, model, u)?;
    if s.is_empty()? {
        return Err(InvariantError::EmptyTarget);
    }
    let shifted = u.linear_image(&(-&model.b))?;
    Ok(s.minkowski_sum(&shifted)?.affine_preimage(&model.a)?.remove_redundancy()?)
}

pub fn is_control_invariant(s: &Polytope, u: &Polytope, model: &DiscreteModel) -> Result<bool> {
    check_dims(s, model, u)?;
    if s.is_empty()? {
        return Ok(true);
    }
    Ok(pre_set(s, model, u)?.contains(s)?)
}

/// Some `u ∈ U` with `A x + B u ∈ S`, found by a margin-maximizing LP.
pub fn admissible_input(x: &DVector<f64>, s: &Polytope, u: &Polytope, model: &DiscreteModel) -> Option<DVector<f64>> {
    let drift = &model.a * x;
    let (ms, mu) = (s.n_facets(), u.n_facets());
    let m = model.nu();
    let mut h = DMatrix::zeros(ms + mu, m);
    let mut g = DVector::zeros(ms + mu);
    h.view_mut((0, 0), (ms, m)).copy_from(&(s.normals() * &model.b));
    g.rows_mut(0, ms).copy_from(&(s.offsets() - s.normals() * drift));
    h.view_mut((ms, 0), (mu, m)).copy_from(u.normals());
    g.rows_mut(ms, mu).copy_from(u.offsets());
    let (v, t) = lp::max_slack(&h, &g, 1.0)?;
    (t >= -TOL_GEOM).then_some(v)
}

/// Iterates `S ← Pre(S) ∩ S` from `S = X` until the set stops shrinking.
pub fn maximal_control_invariant(
    x: &Polytope,
    u: &Polytope,
    model: &DiscreteModel,
    max_iter: usize,
) -> Result<InvariantResult> {
    check_dims(x, model, u)?;
    fixed_point(x, &model.a, &model.b, Some(u), max_iter)
}

fn fixed_point(
    x: &Polytope,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: Option<&Polytope>,
    max_iter: usize,
) -> Result<InvariantResult> {
    let mut s = x.remove_redundancy()?;
    if s.is_empty()? {
        return Ok(InvariantResult { set: s, iterations: 0, converged: true, residual: 0.0 });
    }
    let mut residual = f64::INFINITY;
    for h in 1..=max_iter {
        let next = pre_set_raw(&s, a, b, u)?.intersect(&s)?.remove_redundancy()?;
        if next.is_empty()? {
            return Ok(InvariantResult { set: next, iterations: h, converged: true, residual: 0.0 });
        }
        residual = next.excess_over(&s)?;
        s = next;
        if residual <= TOL_GEOM {
            return Ok(InvariantResult { set: s, iterations: h, converged: true, residual });
        }
    }
    Ok(InvariantResult { set: s, iterations: max_iter, converged: false, residual })
}

/// Decoupled coordinate groups: state and input indices that interact
/// through the dynamics or through a shared constraint row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub states: Vec<usize>,
    pub inputs: Vec<usize>,
}

pub fn separable_blocks(x: &Polytope, u: &Polytope, model: &DiscreteModel) -> Vec<Block> {
    let (n, m) = (model.nx(), model.nu());
    let mut parent: Vec<usize> = (0..n + m).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut j = i;
        while p[j] != r {
            let next = p[j];
            p[j] = r;
            j = next;
        }
        r
    }
    let union = |p: &mut Vec<usize>, i: usize, j: usize| {
        let (ri, rj) = (find(p, i), find(p, j));
        if ri != rj {
            p[ri.max(rj)] = ri.min(rj);
        }
    };
    for i in 0..n {
        for j in 0..n {
            if model.a[(i, j)] != 0.0 && i != j {
                union(&mut parent, i, j);
            }
        }
        for k in 0..m {
            if model.b[(i, k)] != 0.0 {
                union(&mut parent, i, n + k);
            }
        }
    }
    let link_rows = |p: &mut Vec<usize>, normals: &DMatrix<f64>, base: usize| {
        for r in 0..normals.nrows() {
            let nz: Vec<usize> = (0..normals.ncols()).filter(|&c| normals[(r, c)] != 0.0).collect();
            for w in nz.windows(2) {
                union(p, base + w[0], base + w[1]);
            }
        }
    };
    link_rows(&mut parent, x.normals(), 0);
    link_rows(&mut parent, u.normals(), n);

    let mut blocks: Vec<(usize, Block)> = Vec::new();
    for i in 0..n + m {
        let root = find(&mut parent, i);
        let idx = match blocks.iter().position(|(r, _)| *r == root) {
            Some(k) => k,
            None => {
                blocks.push((root, Block { states: Vec::new(), inputs: Vec::new() }));
                blocks.len() - 1
            }
        };
        if i < n {
            blocks[idx].1.states.push(i);
        } else {
            blocks[idx].1.inputs.push(i - n);
        }
    }
    blocks.into_iter().map(|(_, b)| b).filter(|b| !b.states.is_empty()).collect()
}

fn restrict(p: &Polytope, coords: &[usize]) -> Result<Polytope> {
    let rows: Vec<usize> = (0..p.n_facets())
        .filter(|&r| {
            let row = p.normals().row(r);
            row.iter().enumerate().any(|(c, v)| *v != 0.0 && coords.contains(&c))
        })
        .collect();
    let mut normals = DMatrix::zeros(rows.len(), coords.len());
    let mut offsets = DVector::zeros(rows.len());
    for (k, &r) in rows.iter().enumerate() {
        for (j, &c) in coords.iter().enumerate() {
            normals[(k, j)] = p.normals()[(r, c)];
        }
        offsets[k] = p.offsets()[r];
    }
    Ok(Polytope::new(normals, offsets)?)
}

/// Same fixed point computed block by block when the dynamics and the
/// constraints decouple, then recombined as a product set.
pub fn maximal_control_invariant_decomposed(
    x: &Polytope,
    u: &Polytope,
    model: &DiscreteModel,
    max_iter: usize,
) -> Result<InvariantResult> {
    check_dims(x, model, u)?;
    let x = x.remove_redundancy()?;
    if x.is_empty()? {
        return Ok(InvariantResult { set: x, iterations: 0, converged: true, residual: 0.0 });
    }
    let blocks = separable_blocks(&x, u, model);
    if blocks.len() <= 1 {
        return maximal_control_invariant(&x, u, model, max_iter);
    }
    let n = model.nx();
    let mut combined = Polytope::universe(n);
    let (mut iterations, mut converged, mut residual) = (0, true, 0.0f64);
    for blk in &blocks {
        let r = solve_block(&x, u, model, blk, max_iter)?;
        if r.set.is_empty()? {
            return Ok(InvariantResult { set: Polytope::empty(n), iterations: r.iterations, converged: true, residual: 0.0 });
        }
        iterations = iterations.max(r.iterations);
        converged &= r.converged;
        residual = residual.max(r.residual);
        combined = combined.intersect(&r.set.embed(n, &blk.states)?)?;
    }
    Ok(InvariantResult { set: combined, iterations, converged, residual })
}

fn block_data(model: &DiscreteModel, blk: &Block) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(blk.states.len(), blk.states.len(), |i, j| model.a[(blk.states[i], blk.states[j])]);
    let b = DMatrix::from_fn(blk.states.len(), blk.inputs.len(), |i, k| model.b[(blk.states[i], blk.inputs[k])]);
    (a, b)
}

fn solve_block(x: &Polytope, u: &Polytope, model: &DiscreteModel, blk: &Block, max_iter: usize) -> Result<InvariantResult> {
    let (a, b) = block_data(model, blk);
    let xs = restrict(x, &blk.states)?;
    let us = if blk.inputs.is_empty() { None } else { Some(restrict(u, &blk.inputs)?) };
    let key = cache_key(&a, &b, &xs, us.as_ref(), max_iter);
    if let Some(hit) = BLOCK_CACHE.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let r = fixed_point(&xs, &a, &b, us.as_ref(), max_iter)?;
    let mut cache = BLOCK_CACHE.lock().expect("cache lock");
    if cache.len() > CACHE_LIMIT {
        cache.clear();
    }
    cache.insert(key, r.clone());
    Ok(r)
}

// Per-block results are memoized on the exact bit pattern of their inputs:
// many vehicles share identical lateral constraints, and a queued vehicle
// sees the same longitudinal data for many consecutive steps.
const CACHE_LIMIT: usize = 4096;
static BLOCK_CACHE: std::sync::LazyLock<Mutex<HashMap<Vec<u64>, InvariantResult>>> =
    std::sync::LazyLock::new(|| Mutex::new(HashMap::new()));

fn cache_key(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &Polytope, u: Option<&Polytope>, max_iter: usize) -> Vec<u64> {
    let mut k = vec![a.nrows() as u64, b.ncols() as u64, x.n_facets() as u64, max_iter as u64];
    let push = |k: &mut Vec<u64>, it: &mut dyn Iterator<Item = &f64>| k.extend(it.map(|v| v.to_bits()));
    push(&mut k, &mut a.iter());
    push(&mut k, &mut b.iter());
    push(&mut k, &mut x.normals().iter());
    push(&mut k, &mut x.offsets().iter());
    if let Some(u) = u {
        k.push(u.n_facets() as u64);
        push(&mut k, &mut u.normals().iter());
        push(&mut k, &mut u.offsets().iter());
    }
    k
}
