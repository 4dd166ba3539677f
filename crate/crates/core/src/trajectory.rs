//! Natural cubic spline reference trajectory through route waypoints.
//!
//! Each coordinate is a natural cubic spline of the cumulative chord length
//! `s`. Vertical thruster transitions are not splined: a route is cut into
//! sections at every coincident-(x, y) depth change and each horizontal
//! section gets its own spline.

use std::io::Write;

use thiserror::Error;

use crate::route_gen::{Route, Waypoint};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("a spline needs at least 2 points (got {0})")]
    TooFewPoints(usize),
    #[error("points {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
    #[error("parameter {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
    #[error("zero tangent at s = {0}")]
    ZeroTangent(f64),
}

/// Cubic piece `a + b t + c t^2 + d t^3` with `t = s - knot`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cubic {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Cubic {
    fn value(&self, t: f64) -> f64 {
        self.a + t * (self.b + t * (self.c + t * self.d))
    }

    fn first(&self, t: f64) -> f64 {
        self.b + t * (2.0 * self.c + 3.0 * t * self.d)
    }

    fn second(&self, t: f64) -> f64 {
        2.0 * self.c + 6.0 * self.d * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineTrajectory {
    knots: Vec<f64>,
    pieces: [Vec<Cubic>; 3],
    points: Vec<Vec3>,
}

impl SplineTrajectory {
    pub fn fit(points: &[Vec3]) -> Result<Self, TrajectoryError> {
        if points.len() < 2 {
            return Err(TrajectoryError::TooFewPoints(points.len()));
        }
        let mut knots = Vec::with_capacity(points.len());
        knots.push(0.0);
        for i in 1..points.len() {
            let d = dist(points[i - 1], points[i]);
            if d <= 1e-12 {
                return Err(TrajectoryError::CoincidentPoints(i - 1, i));
            }
            knots.push(knots[i - 1] + d);
        }
        let pieces = [0, 1, 2].map(|dim| {
            let ys: Vec<f64> = points.iter().map(|p| p[dim]).collect();
            natural_pieces(&knots, &ys)
        });
        Ok(Self {
            knots,
            pieces,
            points: points.to_vec(),
        })
    }

    pub fn total_length(&self) -> f64 {
        *self.knots.last().expect("at least two knots")
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn piece_index(&self, s: f64) -> usize {
        let i = self.knots.partition_point(|k| *k <= s);
        i.saturating_sub(1).min(self.knots.len() - 2)
    }

    fn check(&self, s: f64) -> Result<(), TrajectoryError> {
        if s.is_nan() || s < 0.0 || s > self.total_length() {
            Err(TrajectoryError::OutOfRange {
                s,
                length: self.total_length(),
            })
        } else {
            Ok(())
        }
    }

    fn eval_with(&self, s: f64, f: impl Fn(&Cubic, f64) -> f64) -> Vec3 {
        let i = self.piece_index(s);
        let t = s - self.knots[i];
        [0, 1, 2].map(|dim| f(&self.pieces[dim][i], t))
    }

    pub fn eval(&self, s: f64) -> Result<Vec3, TrajectoryError> {
        self.check(s)?;
        Ok(self.eval_clamped(s))
    }

    pub fn eval_clamped(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.total_length());
        if s == self.total_length() {
            return *self.points.last().expect("non-empty");
        }
        self.eval_with(s, Cubic::value)
    }

    pub fn derivative(&self, s: f64) -> Result<Vec3, TrajectoryError> {
        self.check(s)?;
        Ok(self.eval_with(s, Cubic::first))
    }

    pub fn second_derivative(&self, s: f64) -> Result<Vec3, TrajectoryError> {
        self.check(s)?;
        Ok(self.eval_with(s, Cubic::second))
    }

    /// Second derivative at the end of piece `i` (left limit at knot `i + 1`).
    pub fn second_derivative_left(&self, knot: usize) -> Vec3 {
        let i = knot - 1;
        let t = self.knots[knot] - self.knots[i];
        [0, 1, 2].map(|dim| self.pieces[dim][i].second(t))
    }

    /// Second derivative at the start of piece `knot` (right limit).
    pub fn second_derivative_right(&self, knot: usize) -> Vec3 {
        [0, 1, 2].map(|dim| self.pieces[dim][knot].second(0.0))
    }

    pub fn first_derivative_left(&self, knot: usize) -> Vec3 {
        let i = knot - 1;
        let t = self.knots[knot] - self.knots[i];
        [0, 1, 2].map(|dim| self.pieces[dim][i].first(t))
    }

    pub fn first_derivative_right(&self, knot: usize) -> Vec3 {
        [0, 1, 2].map(|dim| self.pieces[dim][knot].first(0.0))
    }

    pub fn eval_tangent(&self, s: f64) -> Result<Vec3, TrajectoryError> {
        let d = self.derivative(s)?;
        let n = norm(d);
        if n < 1e-12 {
            return Err(TrajectoryError::ZeroTangent(s));
        }
        Ok(d.map(|v| v / n))
    }

    /// Local minimizer of `|eval(s) - p|` within `window` meters of `s_hint`.
    pub fn project_within(&self, p: Vec3, s_hint: f64, window: f64) -> f64 {
        let len = self.total_length();
        let hint = s_hint.clamp(0.0, len);
        let lo = (hint - window).max(0.0);
        let hi = (hint + window).min(len);
        if hi <= lo {
            return hint;
        }
        let dist2 = |s: f64| {
            let q = self.eval_clamped(s);
            (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)
        };
        let n = ((hi - lo) / 0.25).ceil().clamp(8.0, 4000.0) as usize;
        let step = (hi - lo) / n as f64;
        let mut best = (lo, dist2(lo));
        for k in 1..=n {
            let s = if k == n { hi } else { lo + step * k as f64 };
            let d = dist2(s);
            if d < best.1 {
                best = (s, d);
            }
        }
        // Golden-section refinement inside the bracketing cell pair.
        let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let (mut fc, mut fd) = (dist2(c), dist2(d));
        while b - a > 1e-8 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = dist2(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = dist2(d);
            }
        }
        let mid = 0.5 * (a + b);
        [mid, best.0]
            .into_iter()
            .min_by(|x, y| dist2(*x).total_cmp(&dist2(*y)))
            .expect("two candidates")
    }

    /// [`SplineTrajectory::project_within`] with a 25 m search window.
    pub fn project(&self, p: Vec3, s_hint: f64) -> f64 {
        self.project_within(p, s_hint, 25.0)
    }

    /// Samples at spacing `ds` (last sample exactly at the end).
    pub fn sample(&self, ds: f64) -> Vec<(f64, Vec3)> {
        let len = self.total_length();
        let n = (len / ds.max(1e-6)).ceil().max(1.0) as usize;
        (0..=n)
            .map(|k| {
                let s = (len * k as f64 / n as f64).min(len);
                (s, self.eval_clamped(s))
            })
            .collect()
    }

    pub fn write_samples_csv<W: Write>(&self, ds: f64, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["s", "x", "y", "z"])?;
        for (s, p) in self.sample(ds) {
            wr.write_record([
                format!("{s:.4}"),
                format!("{:.4}", p[0]),
                format!("{:.4}", p[1]),
                format!("{:.4}", p[2]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn fit_spline(points: &[Vec3]) -> Result<SplineTrajectory, TrajectoryError> {
    SplineTrajectory::fit(points)
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Natural cubic spline pieces via the tridiagonal system for the knot
/// second derivatives (Thomas algorithm).
fn natural_pieces(knots: &[f64], ys: &[f64]) -> Vec<Cubic> {
    let n = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for j in 0..k {
            let i = j + 1;
            diag[j] = 2.0 * (h[i - 1] + h[i]);
            upper[j] = h[i];
            rhs[j] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        // Forward sweep; sub-diagonal entry for row j is h[j].
        for j in 1..k {
            let w = h[j] / diag[j - 1];
            diag[j] -= w * upper[j - 1];
            rhs[j] -= w * rhs[j - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for j in (0..k - 1).rev() {
            m[j + 1] = (rhs[j] - upper[j] * m[j + 2]) / diag[j];
        }
    }
    (0..n - 1)
        .map(|i| Cubic {
            a: ys[i],
            b: (ys[i + 1] - ys[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
            c: m[i] / 2.0,
            d: (m[i + 1] - m[i]) / (6.0 * h[i]),
        })
        .collect()
}

/// A contiguous part of a route between vertical transitions.
#[derive(Debug, Clone, PartialEq)]
pub enum SectionKind {
    /// Horizontal motion along a spline (`None` when the section is a single
    /// waypoint). `surface` is true when every waypoint is at depth 0.
    Track {
        surface: bool,
        spline: Option<SplineTrajectory>,
    },
    /// Thruster-only depth change at fixed (x, y).
    Vertical { from_depth: f64, to_depth: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSection {
    /// Inclusive waypoint index range.
    pub first: usize,
    pub last: usize,
    pub kind: SectionKind,
}

fn as_vec3(w: &Waypoint) -> Vec3 {
    [w.x, w.y, w.z]
}

/// Cuts a route into track and vertical sections and fits one spline per
/// track section.
pub fn route_sections(route: &Route) -> Result<Vec<RouteSection>, TrajectoryError> {
    let w = &route.waypoints;
    let mut out = Vec::new();
    if w.is_empty() {
        return Ok(out);
    }
    let mut start = 0;
    for i in 0..w.len() {
        let vertical_next = i + 1 < w.len() && w[i].is_vertical_to(&w[i + 1]);
        if vertical_next || i + 1 == w.len() {
            let pts: Vec<Vec3> = w[start..=i].iter().map(as_vec3).collect();
            let spline = if pts.len() >= 2 {
                Some(SplineTrajectory::fit(&pts)?)
            } else {
                None
            };
            out.push(RouteSection {
                first: start,
                last: i,
                kind: SectionKind::Track {
                    surface: pts.iter().all(|p| p[2] == 0.0),
                    spline,
                },
            });
            if vertical_next {
                out.push(RouteSection {
                    first: i,
                    last: i + 1,
                    kind: SectionKind::Vertical {
                        from_depth: w[i].z,
                        to_depth: w[i + 1].z,
                    },
                });
                start = i + 1;
            }
        }
    }
    Ok(out)
}
