//! Fixed-step ODE integration.
//!
//! The integrators are generic over a [`StateAlgebra`], so the same code
//! integrates plain tensors ([`Eager`]) and tape-recorded states ([`Tape`]).
//! On a tape the whole trajectory is differentiable with respect to the
//! initial state and anything the dynamics closure captured.
//!
//! Controls are piecewise constant: every evaluation inside step `k` sees
//! `Stage::step == k`, and the first evaluation of each step is always at the
//! step's starting state.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Euler,
    Rk4,
    /// Four-step Adams–Bashforth with RK4 for the first three steps.
    FixedAdams,
}

impl SolverKind {
    pub fn min_steps(self) -> usize {
        match self {
            SolverKind::FixedAdams => 4,
            _ => 1,
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            "fixed-adams" => Ok(Self::FixedAdams),
            other => Err(Error::Config(format!("unknown solver {other:?}"))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Euler => "euler",
            SolverKind::Rk4 => "rk4",
            SolverKind::FixedAdams => "fixed-adams",
        })
    }
}

/// Uniform grid `t_k = t_start + k·h`, `k = 0..=n_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationGrid {
    t_start: f64,
    h: f64,
    n_steps: usize,
    /// Steps taken by every batch row; rows stop advancing past their count.
    sample_steps: Option<Vec<usize>>,
}

impl IntegrationGrid {
    /// `n_steps` equal steps covering `[t_start, t_end]`.
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end >= t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::Contract(format!(
                "invalid integration interval [{t_start}, {t_end}]"
            )));
        }
        Self::with_step(t_start, (t_end - t_start) / n_steps.max(1) as f64, n_steps)
    }

    /// `n_steps` steps of exactly `h`.
    pub fn with_step(t_start: f64, h: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Contract(
                "integration grid needs at least one step".into(),
            ));
        }
        if !(h >= 0.0) || !h.is_finite() || !t_start.is_finite() {
            return Err(Error::Contract(format!("invalid step size {h}")));
        }
        Ok(Self {
            t_start,
            h,
            n_steps,
            sample_steps: None,
        })
    }

    /// Per-row end values, each converted to `round((end − t_start)/h)` steps.
    ///
    /// The largest end must land on the last grid point.
    pub fn with_per_sample_end(self, ends: Vec<f64>) -> Result<Self> {
        let t_end = self.t_end();
        for &e in &ends {
            if !(e >= self.t_start && e <= t_end) {
                return Err(Error::Contract(format!(
                    "sample end {e} outside [{}, {t_end}]",
                    self.t_start
                )));
            }
        }
        let max = ends.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !ends.is_empty() && max != t_end {
            return Err(Error::Contract(format!(
                "grid end {t_end} must equal the largest sample end {max}"
            )));
        }
        let steps = ends
            .iter()
            .map(|&e| {
                if self.h == 0.0 {
                    self.n_steps
                } else {
                    (((e - self.t_start) / self.h).round() as usize).min(self.n_steps)
                }
            })
            .collect();
        self.with_sample_steps(steps)
    }

    /// Per-row step counts, each at most `n_steps`.
    pub fn with_sample_steps(mut self, steps: Vec<usize>) -> Result<Self> {
        if let Some(&s) = steps.iter().find(|&&s| s > self.n_steps) {
            return Err(Error::Contract(format!(
                "sample needs {s} steps, grid has {}",
                self.n_steps
            )));
        }
        self.sample_steps = Some(steps);
        Ok(self)
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.h
    }

    pub fn sample_steps(&self) -> Option<&[usize]> {
        self.sample_steps.as_deref()
    }
}

/// Where the dynamics are being evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    /// Index of the step being taken (selects the piecewise-constant control).
    pub step: usize,
    pub t: f64,
}

/// Arithmetic the integrators need from a state representation.
pub trait StateAlgebra {
    type State: Clone;

    fn lincomb(&mut self, terms: &[(f64, &Self::State)]) -> Result<Self::State>;

    /// Row-wise choice between two batch states.
    fn select_rows(
        &mut self,
        take_new: &[bool],
        new: &Self::State,
        old: &Self::State,
    ) -> Result<Self::State>;

    fn is_finite(&self, x: &Self::State) -> bool;
}

/// Plain tensors, no recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl StateAlgebra for Eager {
    type State = Tensor;

    fn lincomb(&mut self, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Contract("lincomb of zero terms".into()))?
            .1;
        let mut out = Tensor::zeros(&[first.rows(), first.cols()]);
        for &(c, t) in terms {
            if !t.same_shape(first) {
                return Err(Error::Dimension(format!(
                    "state shapes {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    fn select_rows(&mut self, take_new: &[bool], new: &Tensor, old: &Tensor) -> Result<Tensor> {
        if !new.same_shape(old) || take_new.len() != new.rows() {
            return Err(Error::Dimension("select_rows shape mismatch".into()));
        }
        let mut out = old.clone();
        for (i, &t) in take_new.iter().enumerate() {
            if t {
                out.row_mut(i).copy_from_slice(new.row(i));
            }
        }
        Ok(out)
    }

    fn is_finite(&self, x: &Tensor) -> bool {
        x.is_finite()
    }
}

impl StateAlgebra for Tape {
    type State = Var;

    fn lincomb(&mut self, terms: &[(f64, &Var)]) -> Result<Var> {
        let terms: Vec<(f64, Var)> = terms.iter().map(|&(c, &v)| (c, v)).collect();
        Tape::lincomb(self, &terms)
    }

    fn select_rows(&mut self, take_new: &[bool], new: &Var, old: &Var) -> Result<Var> {
        Tape::select_rows(self, take_new, *new, *old)
    }

    fn is_finite(&self, x: &Var) -> bool {
        self.value(*x).is_finite()
    }
}

fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("integration step {}: {msg}", step + 1)),
        other => other,
    })
}

/// Integrates `x' = f(x, stage)` and returns all `n_steps + 1` states.
pub fn integrate<A, F>(
    alg: &mut A,
    f: F,
    x0: A::State,
    grid: &IntegrationGrid,
    kind: SolverKind,
) -> Result<Vec<A::State>>
where
    A: StateAlgebra,
    F: FnMut(&mut A, &A::State, Stage) -> Result<A::State>,
{
    run(alg, f, x0, grid, kind, None)
}

/// Batched integration where every row stops at its own end value.
///
/// Rows past their end keep their last valid state (the frozen rows take no
/// gradient from later steps). Row `i` advances `sample_steps()[i]` times,
/// so the result matches integrating that row alone with that many steps.
pub fn integrate_batch_masked<A, F>(
    alg: &mut A,
    f: F,
    x0: A::State,
    grid: &IntegrationGrid,
    kind: SolverKind,
) -> Result<Vec<A::State>>
where
    A: StateAlgebra,
    F: FnMut(&mut A, &A::State, Stage) -> Result<A::State>,
{
    let steps = grid
        .sample_steps()
        .ok_or_else(|| Error::Contract("masked integration needs per-sample ends".into()))?;
    run(alg, f, x0, grid, kind, Some(steps))
}

fn run<A, F>(
    alg: &mut A,
    mut f: F,
    x0: A::State,
    grid: &IntegrationGrid,
    kind: SolverKind,
    sample_steps: Option<&[usize]>,
) -> Result<Vec<A::State>>
where
    A: StateAlgebra,
    F: FnMut(&mut A, &A::State, Stage) -> Result<A::State>,
{
    let n = grid.n_steps();
    if n < kind.min_steps() {
        return Err(Error::Contract(format!(
            "{kind} needs at least {} steps, got {n}",
            kind.min_steps()
        )));
    }
    if !alg.is_finite(&x0) {
        return Err(Error::Numeric("initial state is not finite".into()));
    }
    let h = grid.step();
    let mut traj = Vec::with_capacity(n + 1);
    traj.push(x0);
    let mut history: VecDeque<A::State> = VecDeque::with_capacity(4);

    for k in 0..n {
        let t = grid.time(k);
        let x = traj[k].clone();
        let stage = |t| Stage { step: k, t };
        let candidate = at_step(
            k,
            (|| {
                let multistep = kind == SolverKind::FixedAdams && k >= 3;
                let k1 = f(alg, &x, stage(t))?;
                if kind == SolverKind::FixedAdams {
                    if history.len() == 4 {
                        history.pop_front();
                    }
                    history.push_back(k1.clone());
                }
                match kind {
                    SolverKind::Euler => alg.lincomb(&[(1.0, &x), (h, &k1)]),
                    _ if multistep => {
                        let [f3, f2, f1, f0] = [&history[0], &history[1], &history[2], &history[3]];
                        alg.lincomb(&[
                            (1.0, &x),
                            (h * 55.0 / 24.0, f0),
                            (-h * 59.0 / 24.0, f1),
                            (h * 37.0 / 24.0, f2),
                            (-h * 9.0 / 24.0, f3),
                        ])
                    }
                    _ => {
                        let x2 = alg.lincomb(&[(1.0, &x), (0.5 * h, &k1)])?;
                        let k2 = f(alg, &x2, stage(t + 0.5 * h))?;
                        let x3 = alg.lincomb(&[(1.0, &x), (0.5 * h, &k2)])?;
                        let k3 = f(alg, &x3, stage(t + 0.5 * h))?;
                        let x4 = alg.lincomb(&[(1.0, &x), (h, &k3)])?;
                        let k4 = f(alg, &x4, stage(t + h))?;
                        alg.lincomb(&[
                            (1.0, &x),
                            (h / 6.0, &k1),
                            (h / 3.0, &k2),
                            (h / 3.0, &k3),
                            (h / 6.0, &k4),
                        ])
                    }
                }
            })(),
        )?;
        let next = match sample_steps {
            Some(steps) if steps.iter().any(|&s| s < k + 1) => {
                let take_new: Vec<bool> = steps.iter().map(|&s| k < s).collect();
                alg.select_rows(&take_new, &candidate, &x)?
            }
            _ => candidate,
        };
        if !alg.is_finite(&next) {
            return Err(Error::Numeric(format!(
                "integration step {} produced a non-finite state",
                k + 1
            )));
        }
        traj.push(next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_error(kind: SolverKind, n: usize) -> f64 {
        let grid = IntegrationGrid::new(0.0, 1.0, n).unwrap();
        let traj = integrate(
            &mut Eager,
            |_, x: &Tensor, _| Ok(x.clone()),
            Tensor::scalar(1.0),
            &grid,
            kind,
        )
        .unwrap();
        (traj[n].data()[0] - std::f64::consts::E).abs()
    }

    /// Least-squares slope of log(error) against log(h).
    fn order(kind: SolverKind, ns: &[usize]) -> f64 {
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| ((1.0 / n as f64).ln(), exp_error(kind, n).ln()))
            .collect();
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
        let (mx, my) = (sx / m, sy / m);
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn zero_dynamics_keep_state() {
        let grid = IntegrationGrid::new(0.0, 2.0, 8).unwrap();
        let x0 = Tensor::row_vector(&[1.5, -2.0]);
        for kind in [SolverKind::Euler, SolverKind::Rk4, SolverKind::FixedAdams] {
            let traj = integrate(
                &mut Eager,
                |_, x: &Tensor, _| Ok(Tensor::zeros(&[x.rows(), x.cols()])),
                x0.clone(),
                &grid,
                kind,
            )
            .unwrap();
            assert_eq!(traj.len(), 9);
            assert!(traj.iter().all(|x| *x == x0));
        }
    }

    #[test]
    fn rk4_exponential() {
        assert!(exp_error(SolverKind::Rk4, 100) < 1e-8);
    }

    #[test]
    fn convergence_orders() {
        let ratio = exp_error(SolverKind::Euler, 100) / exp_error(SolverKind::Euler, 1000);
        assert!((ratio - 10.0).abs() < 1.0, "euler ratio {ratio}");
        assert!(order(SolverKind::Euler, &[100, 200, 400, 800]) >= 0.9);
        assert!(order(SolverKind::Rk4, &[5, 10, 20, 40]) >= 3.8);
        assert!(order(SolverKind::FixedAdams, &[10, 20, 40, 80]) >= 3.5);
    }

    #[test]
    fn fixed_adams_needs_four_steps() {
        let grid = IntegrationGrid::new(0.0, 1.0, 3).unwrap();
        let r = integrate(
            &mut Eager,
            |_, x: &Tensor, _| Ok(x.clone()),
            Tensor::scalar(1.0),
            &grid,
            SolverKind::FixedAdams,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn blow_up_names_the_step() {
        let grid = IntegrationGrid::new(0.0, 1.0, 10).unwrap();
        let r = integrate(
            &mut Eager,
            |_, x: &Tensor, s: Stage| {
                Ok(if s.step == 6 {
                    x.map(|_| f64::INFINITY)
                } else {
                    x.clone()
                })
            },
            Tensor::scalar(1.0),
            &grid,
            SolverKind::Euler,
        );
        match r {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step 7"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn controls_are_left_endpoint_piecewise_constant() {
        // x' = u_k with u_k = k: Euler and RK4 agree exactly.
        let grid = IntegrationGrid::new(0.0, 1.0, 4).unwrap();
        for kind in [SolverKind::Euler, SolverKind::Rk4] {
            let traj = integrate(
                &mut Eager,
                |_, _: &Tensor, s: Stage| Ok(Tensor::scalar(s.step as f64)),
                Tensor::scalar(0.0),
                &grid,
                kind,
            )
            .unwrap();
            assert_eq!(traj[4].data()[0], 0.25 * (0.0 + 1.0 + 2.0 + 3.0));
        }
    }

    #[test]
    fn masked_constant_derivative() {
        let len = 0.5;
        let grid = IntegrationGrid::new(0.0, len, 16)
            .unwrap()
            .with_per_sample_end(vec![len, len / 2.0])
            .unwrap();
        let x0 = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = 3.0;
        let traj = integrate_batch_masked(
            &mut Eager,
            |_, x: &Tensor, _| Ok(Tensor::full(&[x.rows(), 1], c)),
            x0,
            &grid,
            SolverKind::Rk4,
        )
        .unwrap();
        let last = &traj[16];
        assert!((last.get(0, 0) - (1.0 + c * len)).abs() < 1e-12);
        assert!((last.get(1, 0) - (1.0 + c * len / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn masked_rejects_end_outside_grid() {
        let grid = IntegrationGrid::new(0.0, 1.0, 4).unwrap();
        assert!(matches!(
            grid.clone().with_per_sample_end(vec![0.5, 1.5]),
            Err(Error::Contract(_))
        ));
        let r = integrate_batch_masked(
            &mut Eager,
            |_, x: &Tensor, _| Ok(x.clone()),
            Tensor::scalar(1.0),
            &grid,
            SolverKind::Euler,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn masked_with_full_ends_equals_unmasked() {
        let grid = IntegrationGrid::new(0.0, 1.0, 6).unwrap();
        let masked = grid.clone().with_per_sample_end(vec![1.0, 1.0]).unwrap();
        let x0 = Tensor::from_rows(&[[0.3, 1.0], [-0.2, 0.5]]).unwrap();
        let f = |_: &mut Eager, x: &Tensor, _: Stage| Ok(x.map(|v| v.sin()));
        let a = integrate(&mut Eager, f, x0.clone(), &grid, SolverKind::FixedAdams).unwrap();
        let b = integrate_batch_masked(&mut Eager, f, x0, &masked, SolverKind::FixedAdams).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_through_rk4_matches_exponential() {
        let a = 0.7;
        let t_end = 1.3;
        let mut tape = Tape::new();
        let x0 = tape.param(Tensor::scalar(0.4));
        let grid = IntegrationGrid::new(0.0, t_end, 10).unwrap();
        let traj = integrate(
            &mut tape,
            |t: &mut Tape, x: &Var, _| t.scale(*x, a),
            x0,
            &grid,
            SolverKind::Rk4,
        )
        .unwrap();
        let g = tape.backward(traj[10]).unwrap();
        let d = g.get(x0).unwrap().data()[0];
        let exact = (a * t_end).exp();
        assert!((d - exact).abs() / exact < 1e-6, "{d} vs {exact}");
    }

    #[test]
    fn frozen_rows_take_no_gradient_from_later_steps() {
        let mut tape = Tape::new();
        let x0 = tape.param(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
        let grid = IntegrationGrid::new(0.0, 1.0, 4)
            .unwrap()
            .with_per_sample_end(vec![1.0, 0.5])
            .unwrap();
        let traj = integrate_batch_masked(
            &mut tape,
            |_t: &mut Tape, x: &Var, _| Ok(*x),
            x0,
            &grid,
            SolverKind::Euler,
        )
        .unwrap();
        let s = tape.sum_all(traj[4]).unwrap();
        let g = tape.backward(s).unwrap();
        let g = g.get(x0).unwrap();
        assert!((g.get(0, 0) - 1.25f64.powi(4)).abs() < 1e-12);
        assert!((g.get(1, 0) - 1.25f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn prefix_of_longer_run_equals_shorter_run() {
        let h = 0.125;
        let f = |_: &mut Eager, x: &Tensor, _: Stage| Ok(x.map(|v| v.cos() - 0.3 * v));
        let x0 = Tensor::row_vector(&[0.2, -1.0]);
        for kind in [SolverKind::Euler, SolverKind::Rk4, SolverKind::FixedAdams] {
            let long = integrate(
                &mut Eager,
                f,
                x0.clone(),
                &IntegrationGrid::new(0.0, 12.0 * h, 12).unwrap(),
                kind,
            )
            .unwrap();
            for k in kind.min_steps()..=12 {
                let short = integrate(
                    &mut Eager,
                    f,
                    x0.clone(),
                    &IntegrationGrid::new(0.0, k as f64 * h, k).unwrap(),
                    kind,
                )
                .unwrap();
                assert_eq!(short[k], long[k], "{kind} k={k}");
            }
        }
    }
}
