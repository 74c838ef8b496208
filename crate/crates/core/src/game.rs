//! Stochastic games over box-constrained scalar action spaces.
//!
//! Every player `i` picks a scalar action `x_i` inside `[lower_i, upper_i]`.
//! A game exposes its pseudo-gradient `F(x)` (the stacked partial gradients of
//! each player's expected cost) and a per-sample oracle that perturbs one
//! component with a raw noise draw.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Default equilibrium tolerance.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;
/// Iteration cap of the projected fixed-point fallback.
pub const EQUILIBRIUM_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxConstraint {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::Empty);
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(invalid("box", format!("bound {i} is not finite")));
            }
            if lo > hi {
                return Err(invalid(
                    "box",
                    format!("lower[{i}] = {lo} > upper[{i}] = {hi}"),
                ));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lower, upper]` for each of `n` players.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    #[inline]
    pub fn clamp_component(&self, i: usize, v: f64) -> f64 {
        v.clamp(self.lower[i], self.upper[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Euclidean projection onto the box, in place.
    pub fn project_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check_dim(x.len())?;
        for (i, v) in x.iter_mut().enumerate() {
            *v = self.clamp_component(i, *v);
        }
        Ok(())
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.project_in_place(&mut out)?;
        Ok(out)
    }

    /// `sup ‖x − y‖²` over the box.
    pub fn diameter_sq(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum()
    }

    pub(crate) fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

/// Componentwise clamp of `x` into the box.
pub fn project(x: &[f64], constraint: &BoxConstraint) -> Result<Vec<f64>> {
    constraint.project(x)
}

/// A stochastic game seen through its gradient oracles.
pub trait Game: Send + Sync {
    fn n_players(&self) -> usize;

    fn constraint(&self) -> &BoxConstraint;

    /// Pseudo-gradient `F(x)`.
    fn mean_gradient(&self, x: &[f64]) -> Vec<f64>;

    /// `∇_{x_i} f_i(x, ξ)` for one raw noise draw `ξ`.
    fn sample_gradient(&self, player: usize, x: &[f64], xi: f64) -> f64;

    /// Factor mapping a raw noise draw to per-sample gradient noise.
    ///
    /// Moment bounds certified for `ξ` scale by this factor when applied to
    /// gradient samples.
    fn noise_gain(&self) -> f64 {
        1.0
    }

    /// Per-sample gradients of one player for a batch of noise draws.
    fn sample_gradients(&self, player: usize, x: &[f64], noise: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(noise.iter().map(|&xi| self.sample_gradient(player, x, xi)));
    }
}

/// A game with affine pseudo-gradient `F(x) = A·x + r`.
#[derive(Debug, Clone)]
pub struct AffineGame {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
    constraint: BoxConstraint,
    noise_gain: f64,
}

impl AffineGame {
    /// Builds the game; rejects matrices whose symmetric part is not positive definite.
    pub fn new(
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
        constraint: BoxConstraint,
    ) -> Result<Self> {
        let n = constraint.dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: matrix.nrows().max(matrix.ncols()),
            });
        }
        if offset.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: offset.len(),
            });
        }
        let game = Self {
            matrix,
            offset,
            constraint,
            noise_gain: 1.0,
        };
        let mu = game.strong_monotonicity()?;
        if mu <= 0.0 {
            return Err(Error::NotStronglyMonotone(mu));
        }
        Ok(game)
    }

    pub fn with_noise_gain(mut self, gain: f64) -> Self {
        self.noise_gain = gain;
        self
    }

    /// `A = a·I`, `r = r·1`, box `[0, 5]ⁿ`.
    pub fn diagonal(n: usize, a: f64, r: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        Self::new(
            DMatrix::from_diagonal_element(n, n, a),
            DVector::from_element(n, r),
            BoxConstraint::uniform(n, 0.0, 5.0)?,
        )
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    fn symmetric_part(&self) -> DMatrix<f64> {
        (&self.matrix + self.matrix.transpose()) * 0.5
    }

    fn strong_monotonicity(&self) -> Result<f64> {
        let eig = SymmetricEigen::try_new(self.symmetric_part(), f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Decomposition("symmetric eigensolve did not converge".into()))?;
        Ok(eig.eigenvalues.min())
    }

    #[inline]
    fn gradient_component(&self, player: usize, x: &[f64]) -> f64 {
        let row = self.matrix.row(player);
        row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.offset[player]
    }
}

/// The benchmark game with `n` players.
///
/// Player `i` (1-based) has cost
/// `f_i(x, ξ) = (x_i − 0.5 i)² + (0.05 i (Σ_j x_j + 2) + 2 ξ_i) x_i`
/// on `[0, 5]`, so `A_ii = 2 + 0.1 i`, `A_ij = 0.05 i` and `r_i = −0.9 i`.
/// Gradient noise is `2 ξ_i`.
pub fn benchmark_game(n_players: usize) -> Result<AffineGame> {
    if n_players == 0 {
        return Err(invalid("n_players", "must be positive"));
    }
    let matrix = DMatrix::from_fn(n_players, n_players, |row, col| {
        let i = (row + 1) as f64;
        if row == col {
            2.0 + 0.1 * i
        } else {
            0.05 * i
        }
    });
    let offset = DVector::from_fn(n_players, |row, _| {
        let i = (row + 1) as f64;
        -i + 0.1 * i
    });
    Ok(
        AffineGame::new(matrix, offset, BoxConstraint::uniform(n_players, 0.0, 5.0)?)?
            .with_noise_gain(2.0),
    )
}

impl Game for AffineGame {
    fn n_players(&self) -> usize {
        self.constraint.dim()
    }

    fn constraint(&self) -> &BoxConstraint {
        &self.constraint
    }

    fn mean_gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_players())
            .map(|i| self.gradient_component(i, x))
            .collect()
    }

    fn sample_gradient(&self, player: usize, x: &[f64], xi: f64) -> f64 {
        self.gradient_component(player, x) + self.noise_gain * xi
    }

    fn noise_gain(&self) -> f64 {
        self.noise_gain
    }

    fn sample_gradients(&self, player: usize, x: &[f64], noise: &[f64], out: &mut Vec<f64>) {
        let base = self.gradient_component(player, x);
        out.clear();
        out.extend(noise.iter().map(|&xi| base + self.noise_gain * xi));
    }
}

/// Constants of an affine game over its box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameAnalysis {
    /// Strong-monotonicity modulus.
    pub mu: f64,
    /// Lipschitz constant of `F`.
    pub lipschitz: f64,
    /// `sup ‖F(x)‖` over the box.
    pub grad_bound: f64,
    /// `sup ‖x − y‖²` over the box.
    pub diameter_sq: f64,
}

pub fn analyze(game: &AffineGame) -> Result<GameAnalysis> {
    let mu = game.strong_monotonicity()?;
    let lipschitz = game
        .matrix
        .clone()
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Decomposition("SVD did not converge".into()))?
        .singular_values
        .max();

    // ‖A x + r‖ is convex in x, so its maximum over the box sits at a corner.
    let n = game.n_players();
    let grad_bound = if n <= 24 {
        let lower = game.constraint.lower();
        let upper = game.constraint.upper();
        let mut corner = vec![0.0; n];
        let mut best = 0.0f64;
        for mask in 0u64..(1u64 << n) {
            for (i, c) in corner.iter_mut().enumerate() {
                *c = if mask >> i & 1 == 1 {
                    upper[i]
                } else {
                    lower[i]
                };
            }
            let norm = game
                .mean_gradient(&corner)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            best = best.max(norm);
        }
        best
    } else {
        // Too many corners; fall back to the triangle-inequality bound.
        let center: Vec<f64> = game
            .constraint
            .lower()
            .iter()
            .zip(game.constraint.upper())
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect();
        let at_center = game
            .mean_gradient(&center)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        at_center + lipschitz * 0.5 * game.constraint.diameter_sq().sqrt()
    };

    Ok(GameAnalysis {
        mu,
        lipschitz,
        grad_bound,
        diameter_sq: game.constraint.diameter_sq(),
    })
}

/// Unique Nash equilibrium of a strongly monotone affine game.
///
/// Solves `A x = −r` directly; when that point leaves the box, runs the
/// projected fixed-point map `x ← P(x − θ F(x))` with `θ = μ / L²` until
/// successive iterates differ by less than `tol`.
pub fn solve_equilibrium(game: &AffineGame, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let analysis = analyze(game)?;
    if analysis.mu <= 0.0 {
        return Err(Error::NotStronglyMonotone(analysis.mu));
    }

    if let Some(sol) = game.matrix.clone().lu().solve(&(-&game.offset)) {
        let x: Vec<f64> = sol.iter().copied().collect();
        if x.iter().all(|v| v.is_finite()) && game.constraint.contains(&x) {
            return Ok(x);
        }
    }

    let theta = analysis.mu / (analysis.lipschitz * analysis.lipschitz);
    let mut x = game.constraint.project(&vec![0.0; game.n_players()])?;
    let mut last_step = f64::INFINITY;
    for _ in 0..EQUILIBRIUM_MAX_ITER {
        let grad = game.mean_gradient(&x);
        let mut step = 0.0f64;
        for (i, (xi, gi)) in x.iter_mut().zip(&grad).enumerate() {
            let next = game.constraint.clamp_component(i, *xi - theta * gi);
            step = step.max((next - *xi).abs());
            *xi = next;
        }
        last_step = step;
        if step < tol {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        iterations: EQUILIBRIUM_MAX_ITER,
        last_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PUBLISHED_EQ: [f64; 15] = [
        0.1292, 0.2523, 0.3697, 0.4817, 0.5887, 0.6911, 0.7891, 0.8831, 0.9732, 1.0597, 1.1428,
        1.2227, 1.2996, 1.3737, 1.4450,
    ];

    fn unit_box() -> BoxConstraint {
        BoxConstraint::uniform(1, 0.0, 5.0).unwrap()
    }

    #[test]
    fn project_clamps() {
        let b = unit_box();
        assert_eq!(project(&[6.0], &b).unwrap(), vec![5.0]);
        assert_eq!(project(&[-1.0], &b).unwrap(), vec![0.0]);
        assert_eq!(project(&[3.0], &b).unwrap(), vec![3.0]);
    }

    #[test]
    fn project_rejects_dimension_mismatch() {
        assert!(matches!(
            project(&[1.0, 2.0], &unit_box()),
            Err(Error::DimensionMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(BoxConstraint::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxConstraint::new(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn benchmark_gradient_at_origin() {
        let game = benchmark_game(15).unwrap();
        let f0 = game.mean_gradient(&[0.0; 15]);
        for (i, v) in f0.iter().enumerate() {
            assert!(
                (v + 0.9 * (i + 1) as f64).abs() < 1e-12,
                "F_{}(0) = {v}",
                i + 1
            );
        }
        assert!((game.matrix()[(0, 0)] - 2.1).abs() < 1e-12);
        assert!((game.matrix()[(0, 1)] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn benchmark_matches_cost_derivative() {
        // Central finite differences of the expected cost at ξ = 0.
        let game = benchmark_game(15).unwrap();
        let cost = |i: usize, x: &[f64]| {
            let fi = (i + 1) as f64;
            let total: f64 = x.iter().sum();
            (x[i] - 0.5 * fi).powi(2) + 0.05 * fi * (total + 2.0) * x[i]
        };
        let x: Vec<f64> = (0..15).map(|i| 0.3 * i as f64 % 5.0).collect();
        let grad = game.mean_gradient(&x);
        for i in 0..15 {
            let h = 1e-5;
            let mut up = x.clone();
            let mut dn = x.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (cost(i, &up) - cost(i, &dn)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6,
                "player {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn benchmark_equilibrium_matches_published() {
        let game = benchmark_game(15).unwrap();
        let x = solve_equilibrium(&game, EQUILIBRIUM_TOL).unwrap();
        for (got, want) in x.iter().zip(PUBLISHED_EQ) {
            assert!((got - want).abs() <= 5e-5, "{got} vs {want}");
        }
        let residual: f64 = game
            .mean_gradient(&x)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(residual < 1e-10);
    }

    #[test]
    fn decoupled_equilibrium() {
        let game = AffineGame::diagonal(4, 2.0, -2.0).unwrap();
        let x = solve_equilibrium(&game, EQUILIBRIUM_TOL).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binding_lower_bound() {
        let game = AffineGame::diagonal(1, 1.0, 1.0).unwrap();
        let x = solve_equilibrium(&game, EQUILIBRIUM_TOL).unwrap();
        assert_eq!(x, vec![0.0]);
    }

    #[test]
    fn kkt_at_boundary_solution() {
        // Mixed case: coupled game whose unconstrained solution leaves the box.
        let a = DMatrix::from_row_slice(3, 3, &[3.0, 0.5, 0.0, -0.5, 2.0, 0.3, 0.2, 0.1, 1.5]);
        let r = DVector::from_row_slice(&[2.0, -20.0, -1.0]);
        let game = AffineGame::new(a, r, BoxConstraint::uniform(3, 0.0, 5.0).unwrap()).unwrap();
        let tol = 1e-10;
        let x = solve_equilibrium(&game, tol).unwrap();
        let f = game.mean_gradient(&x);
        let (lo, hi) = (0.0, 5.0);
        let mut hit_bound = false;
        for i in 0..3 {
            if x[i] <= lo {
                assert!(f[i] >= -1e-8, "F_{i} = {} should push below", f[i]);
                hit_bound = true;
            } else if x[i] >= hi {
                assert!(f[i] <= 1e-8, "F_{i} = {} should push above", f[i]);
                hit_bound = true;
            } else {
                assert!(f[i].abs() < 1e-8, "interior F_{i} = {}", f[i]);
            }
        }
        assert!(hit_bound);
    }

    #[test]
    fn rejects_non_monotone() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = DVector::zeros(2);
        assert!(matches!(
            AffineGame::new(a, r, BoxConstraint::uniform(2, 0.0, 1.0).unwrap()),
            Err(Error::NotStronglyMonotone(_))
        ));
    }

    #[test]
    fn analyze_scalar_matrix() {
        let game = AffineGame::diagonal(3, 2.0, 0.0).unwrap();
        let a = analyze(&game).unwrap();
        assert!((a.mu - 2.0).abs() < 1e-12);
        assert!((a.lipschitz - 2.0).abs() < 1e-12);
        assert!((a.diameter_sq - 75.0).abs() < 1e-12);
        // ‖2x‖ is largest at the all-upper corner.
        assert!((a.grad_bound - (3.0f64 * 100.0).sqrt()).abs() < 1e-12);
    }

    fn power_iteration_norm(a: &DMatrix<f64>) -> f64 {
        let ata = a.transpose() * a;
        let mut v = DVector::from_element(a.ncols(), 1.0);
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let w = &ata * &v;
            let norm = w.norm();
            let next = norm / v.norm();
            v = w / norm;
            if (next - lambda).abs() < 1e-15 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda.sqrt()
    }

    #[test]
    fn analyze_benchmark() {
        let game = benchmark_game(15).unwrap();
        let a = analyze(&game).unwrap();
        assert!((a.mu - 1.8166).abs() < 1e-3, "mu = {}", a.mu);
        let oracle = power_iteration_norm(game.matrix());
        assert!(
            (a.lipschitz - oracle).abs() < 1e-9 * oracle,
            "{} vs {oracle}",
            a.lipschitz
        );
        assert!(a.mu <= a.lipschitz);
        assert!((a.diameter_sq - 15.0 * 25.0).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_and_lipschitz_on_random_pairs() {
        use rand::{RngExt, SeedableRng};
        let game = benchmark_game(15).unwrap();
        let an = analyze(&game).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..5.0)).collect();
            let y: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..5.0)).collect();
            let (fx, fy) = (game.mean_gradient(&x), game.mean_gradient(&y));
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let df: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
            let inner: f64 = d.iter().zip(&df).map(|(a, b)| a * b).sum();
            let d2: f64 = d.iter().map(|v| v * v).sum();
            let df2: f64 = df.iter().map(|v| v * v).sum();
            assert!(inner >= an.mu * d2 - 1e-9);
            assert!(df2.sqrt() <= an.lipschitz * d2.sqrt() + 1e-9);
        }
    }

    #[test]
    fn sample_gradient_is_unbiased() {
        use crate::noise::{NoiseKind, NoiseModel, RngStream};
        let game = benchmark_game(15).unwrap();
        let noise = NoiseModel::certified(NoiseKind::Gaussian { sigma: 1.0 }, 2.0).unwrap();
        let mut rng = RngStream::new(11, 0);
        let x = vec![1.0; 15];
        let mean = game.mean_gradient(&x);
        let n = 1_000_000;
        for player in [0usize, 14] {
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let g = game.sample_gradient(player, &x, noise.draw(&mut rng));
                s += g;
                s2 += g * g;
            }
            let m = s / n as f64;
            let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
            assert!(
                (m - mean[player]).abs() < 5.0 * se,
                "player {player}: {m} vs {}",
                mean[player]
            );
        }
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_nonexpansive(
            x in proptest::collection::vec(-10.0f64..10.0, 5),
            y in proptest::collection::vec(-10.0f64..10.0, 5),
        ) {
            let b = BoxConstraint::uniform(5, 0.0, 5.0).unwrap();
            let px = b.project(&x).unwrap();
            let py = b.project(&y).unwrap();
            prop_assert_eq!(&b.project(&px).unwrap(), &px);
            let dp: f64 = px.iter().zip(&py).map(|(a, c)| (a - c).powi(2)).sum();
            let d: f64 = x.iter().zip(&y).map(|(a, c)| (a - c).powi(2)).sum();
            prop_assert!(dp <= d + 1e-12);
        }
    }
}
