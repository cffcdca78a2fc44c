//! Workspace read path: priors are up-projected into attractors of a
//! continuous Hopfield network and each patch descends the energy
//!
//! ```text
//! E(ξ) = -lse(β, Xξ) + ½ξᵀξ + β⁻¹ log M + ½ζ²,   ζ = maxᵢ ‖Xᵢ‖
//! ```
//!
//! via the fixed-point update `ξ ← Xᵀ softmax(β X ξ)`. The result is added
//! back onto the input (broadcast).

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{matmul, Scalar, Tensor};

/// Up-projected priors and retrieval settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorBank {
    attractors: Tensor,
    pub beta: f64,
    zeta: f64,
    pub max_iters: usize,
    pub tol: f64,
}

fn max_row_norm(t: &Tensor) -> f64 {
    let n = t.shape()[1];
    t.data()
        .chunks(n)
        .map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("inverse temperature beta must be > 0, got {beta}")))
    }
}

impl AttractorBank {
    /// Use the rows of `attractors` (`M×E`) directly.
    pub fn from_attractors(attractors: Tensor, beta: f64, max_iters: usize, tol: f64) -> Result<Self> {
        check_beta(beta)?;
        if attractors.rank() != 2 || attractors.shape()[0] == 0 {
            return Err(Error::shape("attractor bank", attractors.shape(), &[]));
        }
        if max_iters == 0 {
            return Err(Error::Param("max_iters must be >= 1".into()));
        }
        let zeta = max_row_norm(&attractors);
        Ok(AttractorBank {
            attractors,
            beta,
            zeta,
            max_iters,
            tol,
        })
    }

    pub fn attractors(&self) -> &Tensor {
        &self.attractors
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn len(&self) -> usize {
        self.attractors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.attractors.shape()[1]
    }
}

/// `attractors = γ · up_projection`.
pub fn build_attractors(gamma: &Tensor, up_projection: &Tensor, beta: f64, max_iters: usize, tol: f64) -> Result<AttractorBank> {
    check_beta(beta)?;
    let attractors = matmul(gamma, up_projection)?;
    AttractorBank::from_attractors(attractors, beta, max_iters, tol)
}

fn energy64(xi: &[f64], bank: &AttractorBank) -> Result<f64> {
    let e = bank.dim();
    let beta = bank.beta;
    let dots: Vec<f64> = bank
        .attractors
        .data()
        .chunks(e)
        .map(|row| row.iter().zip(xi).map(|(&a, &x)| a as f64 * x).sum::<f64>())
        .collect();
    let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + dots.iter().map(|d| (beta * (d - max)).exp()).sum::<f64>().ln() / beta;
    let quad = 0.5 * xi.iter().map(|x| x * x).sum::<f64>();
    Ok(-lse + quad + (bank.len() as f64).ln() / beta + 0.5 * bank.zeta * bank.zeta)
}

/// Energy of state `xi` (length `E`) with respect to the bank, evaluated in
/// double precision.
pub fn energy(xi: &[Scalar], bank: &AttractorBank) -> Result<f64> {
    if xi.len() != bank.dim() {
        return Err(Error::shape("energy", &[xi.len()], bank.attractors.shape()));
    }
    energy64(&xi.iter().map(|&v| v as f64).collect::<Vec<_>>(), bank)
}

/// Energy bookkeeping for one retrieval call.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub energy_before: Vec<f64>,
    pub energy_after: Vec<f64>,
    /// Energy of every patch after each step; entry 0 is the initial state.
    pub trace: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

/// One fixed-point step in double precision: `Xᵀ softmax(β X ξ)`.
fn update64(xi: &[f64], bank: &AttractorBank) -> Vec<f64> {
    let e = bank.dim();
    let x = bank.attractors.data();
    let dots: Vec<f64> = x
        .chunks(e)
        .map(|row| bank.beta * row.iter().zip(xi).map(|(&a, &v)| a as f64 * v).sum::<f64>())
        .collect();
    let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = dots.iter().map(|d| (d - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; e];
    for (row, wi) in x.chunks(e).zip(&w) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += wi / z * a as f64;
        }
    }
    out
}

/// Retrieve every row of `states` (`P×E`). Iterates up to `max_iters`,
/// stopping early once every patch moved less than `tol`.
pub fn retrieve_batch(states: &Tensor, bank: &AttractorBank) -> Result<(Tensor, RetrievalReport)> {
    let e = bank.dim();
    if states.rank() != 2 || states.shape()[1] != e {
        return Err(Error::shape("retrieve", states.shape(), bank.attractors.shape()));
    }
    let mut current: Vec<Vec<f64>> = states.data().chunks(e).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let mut trace: Vec<Vec<f64>> = current.iter().map(|xi| energy64(xi, bank).map(|en| vec![en])).collect::<Result<_>>()?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < bank.max_iters {
        iterations += 1;
        let mut max_step: f64 = 0.0;
        for (p, xi) in current.iter_mut().enumerate() {
            let next = update64(xi, bank);
            if let Some(i) = next.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("hopfield retrieval of patch {p}"),
                    index: i,
                });
            }
            let step = xi.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            max_step = max_step.max(step);
            *xi = next;
            trace[p].push(energy64(xi, bank)?);
        }
        if max_step < bank.tol {
            converged = true;
            break;
        }
    }
    let data = current.iter().flatten().map(|&v| v as Scalar).collect();
    let out = Tensor::new(states.shape(), data)?;
    let report = RetrievalReport {
        energy_before: trace.iter().map(|t| t[0]).collect(),
        energy_after: trace.iter().map(|t| *t.last().unwrap()).collect(),
        trace,
        iterations,
        converged,
    };
    Ok((out, report))
}

/// Retrieve a single state of length `E`.
pub fn retrieve(xi: &[Scalar], bank: &AttractorBank) -> Result<(Vec<Scalar>, RetrievalReport)> {
    let (out, report) = retrieve_batch(&Tensor::new(&[1, xi.len()], xi.to_vec())?, bank)?;
    Ok((out.into_data(), report))
}

/// `Ξ^{t+1} = Ξ̂ + Ξ`.
pub fn broadcast(xi_hat: &Tensor, xi: &Tensor) -> Result<Tensor> {
    if xi_hat.shape() != xi.shape() {
        return Err(Error::shape("broadcast", xi_hat.shape(), xi.shape()));
    }
    let data = xi_hat.data().iter().zip(xi.data()).map(|(a, b)| a + b).collect();
    Tensor::new(xi.shape(), data)
}

/// Tape version of the fixed-point retrieval for `states [P×E]` against
/// `attractors [M×E]`. Runs exactly `iters` steps so the unrolled graph is
/// what gets differentiated.
pub fn retrieve_on_tape(tape: &mut GradTape, states: Var, attractors: Var, beta: f64, iters: usize) -> Result<Var> {
    check_beta(beta)?;
    let (ss, xs) = (tape.shape(states).to_vec(), tape.shape(attractors).to_vec());
    if ss.len() != 2 || xs.len() != 2 || ss[1] != xs[1] {
        return Err(Error::shape("retrieve", &ss, &xs));
    }
    let xt = tape.transpose(attractors)?;
    let mut xi = states;
    for _ in 0..iters {
        let dots = tape.matmul(xi, xt)?;
        let dots = tape.scale(dots, beta as Scalar);
        let w = tape.softmax(dots);
        xi = tape.matmul(w, attractors)?;
    }
    Ok(xi)
}

/// Mean energy reduction `E(ξ) − E(ξ̂)` over the rows of `before`/`after`.
pub fn mean_energy_drop(before: &Tensor, after: &Tensor, bank: &AttractorBank) -> Result<f64> {
    let e = bank.dim();
    if before.shape() != after.shape() || before.shape().last() != Some(&e) {
        return Err(Error::shape("energy drop", before.shape(), after.shape()));
    }
    let rows = before.len() / e;
    if rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in before.data().chunks(e).zip(after.data().chunks(e)) {
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        total += energy64(&a, bank)? - energy64(&b, bank)?;
    }
    Ok(total / rows as f64)
}
