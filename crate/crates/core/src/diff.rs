//! Tape-based reverse-mode differentiation over `f64` scalars.
//!
//! A [`Tape`] records every primitive as a node holding its forward value and
//! the local partial derivatives with respect to its operands. [`Tape::backward`]
//! sweeps the nodes in reverse insertion order and returns the adjoint of every
//! node. Tapes are cheap to build and are meant to be rebuilt for every
//! training step; nothing persists between steps.
//!
//! ```
//! use etc_core::diff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = tape.square(x);
//! let grads = tape.backward(y);
//! assert_eq!(tape.value(y), 9.0);
//! assert_eq!(grads.wrt(x), 6.0);
//! ```
//!
//! Hinge primitives (`max_const`) use a subgradient of zero at the kink.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("domain error in `{op}`: operand {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("length mismatch in `{op}`: {left} vs {right}")]
    Length {
        op: &'static str,
        left: usize,
        right: usize,
    },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    values: Vec<f64>,
    // Node i owns edges[spans[i].0..spans[i].1].
    spans: Vec<(u32, u32)>,
    edges: Vec<(u32, f64)>,
}

/// Adjoints produced by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.index()]
    }

    pub fn wrt_all(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            values: Vec::with_capacity(nodes),
            spans: Vec::with_capacity(nodes),
            edges: Vec::with_capacity(nodes * 2),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records a node with a known value and local partials. Used by composite
    /// operations whose derivative is cheaper to state in closed form.
    pub fn record(&mut self, value: f64, parents: impl IntoIterator<Item = (Var, f64)>) -> Var {
        self.push(value, parents)
    }

    fn push(&mut self, value: f64, parents: impl IntoIterator<Item = (Var, f64)>) -> Var {
        let start = self.edges.len() as u32;
        self.edges
            .extend(parents.into_iter().map(|(v, d)| (v.0, d)));
        let end = self.edges.len() as u32;
        let idx = self.values.len() as u32;
        self.values.push(value);
        self.spans.push((start, end));
        Var(idx)
    }

    /// New leaf node (a parameter or an input).
    pub fn var(&mut self, value: f64) -> Var {
        self.push(value, [])
    }

    /// Leaf nodes for every element of `values`.
    pub fn vars(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.var(x)).collect()
    }

    /// A leaf that is not meant to be differentiated. Identical to [`Tape::var`]
    /// on the tape; the distinction is for readers.
    pub fn constant(&mut self, value: f64) -> Var {
        self.var(value)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, [(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, [(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, [(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y == 0.0 {
            return Err(DiffError::Domain { op: "div", value: y });
        }
        Ok(self.push(x / y, [(a, 1.0 / y), (b, -x / (y * y))]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, [(a, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, [(a, c)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, [(a, v)])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x <= 0.0 {
            return Err(DiffError::Domain { op: "log", value: x });
        }
        Ok(self.push(x.ln(), [(a, 1.0 / x)]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.push(s, [(a, s * (1.0 - s))])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, [(a, 1.0 - t * t)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, [(a, 2.0 * x)])
    }

    /// `max(a, k)` for a constant `k`; the derivative at `a == k` is 0.
    pub fn max_const(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        if x > k {
            self.push(x, [(a, 1.0)])
        } else {
            self.push(k, [(a, 0.0)])
        }
    }

    /// Value passes through, adjoint flow to `a` is cut.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x, [])
    }

    /// `Σ w_i · x_i` with constant weights.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[f64]) -> Result<Var> {
        if xs.len() != weights.len() {
            return Err(DiffError::Length {
                op: "weighted_sum",
                left: xs.len(),
                right: weights.len(),
            });
        }
        let v = xs
            .iter()
            .zip(weights)
            .map(|(&x, &w)| self.value(x) * w)
            .sum();
        Ok(self.push(v, xs.iter().copied().zip(weights.iter().copied())))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        self.push(v, xs.iter().map(|&x| (x, 1.0)))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DiffError::Domain { op: "mean", value: 0.0 });
        }
        let n = xs.len() as f64;
        let v = xs.iter().map(|&x| self.value(x)).sum::<f64>() / n;
        Ok(self.push(v, xs.iter().map(|&x| (x, 1.0 / n))))
    }

    /// `Σ a_i · b_i` where both sides are tape nodes.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Result<Var> {
        if a.len() != b.len() {
            return Err(DiffError::Length {
                op: "dot",
                left: a.len(),
                right: b.len(),
            });
        }
        let mut v = 0.0;
        let mut parents = Vec::with_capacity(2 * a.len());
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.value(x), self.value(y));
            v += xv * yv;
            parents.push((x, yv));
            parents.push((y, xv));
        }
        Ok(self.push(v, parents))
    }

    /// Cosine similarity of two node vectors, recorded as a single node.
    ///
    /// A zero-norm operand is a domain error.
    pub fn cosine(&mut self, a: &[Var], b: &[Var]) -> Result<Var> {
        if a.len() != b.len() {
            return Err(DiffError::Length {
                op: "cosine",
                left: a.len(),
                right: b.len(),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let na = norm(&av);
        let nb = norm(&bv);
        if na == 0.0 || nb == 0.0 {
            return Err(DiffError::Domain {
                op: "cosine",
                value: na.min(nb),
            });
        }
        let c = dot(&av, &bv) / (na * nb);
        let mut parents = Vec::with_capacity(2 * a.len());
        for i in 0..a.len() {
            parents.push((a[i], bv[i] / (na * nb) - c * av[i] / (na * na)));
            parents.push((b[i], av[i] / (na * nb) - c * bv[i] / (nb * nb)));
        }
        Ok(self.push(c, parents))
    }

    /// Reverse sweep from `root`; the root adjoint is seeded with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut adjoints = vec![0.0; root.index() + 1];
        adjoints[root.index()] = 1.0;
        for i in (0..=root.index()).rev() {
            let g = adjoints[i];
            if g == 0.0 {
                continue;
            }
            let (s, e) = self.spans[i];
            for &(p, d) in &self.edges[s as usize..e as usize] {
                adjoints[p as usize] += g * d;
            }
        }
        adjoints.resize(self.values.len(), 0.0);
        Gradients { adjoints }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Components whose relative error exceeded the tolerance.
    pub failing: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Compares the reverse-mode gradient of `f` at `x` against the central
/// difference `(f(x+h) - f(x-h)) / 2h`, component by component.
///
/// The relative error of a component is `|a - n| / max(1, |a|, |n|)`, so tiny
/// gradients are judged on absolute error. `f` receives a fresh tape and the
/// parameter nodes and returns the scalar output node. Evaluation errors are
/// reported as failing components rather than propagated.
pub fn grad_check<F>(f: F, x: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |point: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let params = tape.vars(point);
        let out = f(&mut tape, &params).ok()?;
        let grads = tape.backward(out);
        Some((tape.value(out), grads.wrt_all(&params)))
    };

    let analytic = eval(x).map(|(_, g)| g).unwrap_or_else(|| vec![f64::NAN; x.len()]);
    let mut numeric = Vec::with_capacity(x.len());
    let mut failing = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = eval(&probe).map(|(v, _)| v);
        probe[i] = x[i] - h;
        let minus = eval(&probe).map(|(v, _)| v);
        probe[i] = x[i];
        let n = match (plus, minus) {
            (Some(p), Some(m)) => (p - m) / (2.0 * h),
            _ => f64::NAN,
        };
        numeric.push(n);
        let a = analytic[i];
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if !err.is_finite() || err > tol {
            failing.push(i);
        }
        if err.is_finite() {
            max_rel_error = max_rel_error.max(err);
        } else {
            max_rel_error = f64::INFINITY;
        }
    }
    GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        failing,
    }
}
