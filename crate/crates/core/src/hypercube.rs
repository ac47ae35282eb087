//! States of `{0,1}^d`, the independent-flip forward process, and exact
//! distribution arithmetic.
//!
//! A distribution over the hypercube is stored densely: entry `i` of the mass
//! vector is the probability of the state whose bit word equals `i` (bit `j`
//! of the word is coordinate `j`). Every module in this crate shares that
//! indexing.
//!
//! The forward process flips every coordinate independently at rate 1, so its
//! transition kernel is the `d`-fold tensor power of the 2x2 kernel
//!
//! ```text
//! [ (1 + e^{-2t})/2   (1 - e^{-2t})/2 ]
//! [ (1 - e^{-2t})/2   (1 + e^{-2t})/2 ]
//! ```
//!
//! and [`evolve_exact`] applies it one coordinate at a time in `O(d 2^d)`.

use std::fmt;
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension for which a state fits in a sampling path.
pub const MAX_STATE_DIM: u32 = 63;
/// Largest dimension for which anything allocates `2^d` entries.
pub const MAX_DENSE_DIM: u32 = 24;
/// Accepted deviation of a distribution's total mass from one.
pub const MASS_TOLERANCE: f64 = 1e-10;

const BINARY_MAGIC: &[u8; 4] = b"HCDD";
/// Version tag written into serialized distributions.
pub const DISTRIBUTION_FORMAT_VERSION: u32 = 1;

/// A vertex of `{0,1}^d`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HypercubeState {
    bits: u64,
    dim: u32,
}

impl HypercubeState {
    pub fn new(bits: u64, dim: u32) -> Result<Self> {
        check_state_dim(dim)?;
        if bits >> dim != 0 {
            return Err(Error::StateOutOfRange { bits, dim });
        }
        Ok(Self { bits, dim })
    }

    pub fn zero(dim: u32) -> Result<Self> {
        Self::new(0, dim)
    }

    /// Uniformly random vertex.
    pub fn random<R: Rng + ?Sized>(dim: u32, rng: &mut R) -> Result<Self> {
        check_state_dim(dim)?;
        let bits = rng.random::<u64>() & low_mask(dim);
        Ok(Self { bits, dim })
    }

    #[inline]
    pub fn bits(self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn dim(self) -> u32 {
        self.dim
    }

    #[inline]
    pub fn index(self) -> usize {
        self.bits as usize
    }

    #[inline]
    pub fn bit(self, i: u32) -> bool {
        debug_assert!(i < self.dim);
        (self.bits >> i) & 1 == 1
    }

    /// The neighbour `x + e_i` (addition mod 2).
    #[inline]
    pub fn flip(self, i: u32) -> Self {
        debug_assert!(i < self.dim);
        Self {
            bits: self.bits ^ (1 << i),
            dim: self.dim,
        }
    }

    /// Coordinatewise difference mod 2, i.e. XOR.
    #[inline]
    pub fn xor(self, other: Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        Self {
            bits: self.bits ^ other.bits,
            dim: self.dim,
        }
    }

    #[inline]
    pub fn weight(self) -> u32 {
        self.bits.count_ones()
    }

    pub fn hamming(self, other: Self) -> u32 {
        self.xor(other).weight()
    }
}

impl fmt::Debug for HypercubeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.bits, width = self.dim as usize)
    }
}

impl fmt::Display for HypercubeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn check_state_dim(dim: u32) -> Result<()> {
    if dim == 0 || dim > MAX_STATE_DIM {
        return Err(Error::Dimension {
            dim,
            reason: "state dimension must lie in 1..=63",
        });
    }
    Ok(())
}

pub(crate) fn check_dense_dim(dim: u32) -> Result<()> {
    if dim == 0 || dim > MAX_DENSE_DIM {
        return Err(Error::Dimension {
            dim,
            reason: "dense storage requires 1 <= d <= 24",
        });
    }
    Ok(())
}

#[inline]
fn low_mask(dim: u32) -> u64 {
    (1u64 << dim) - 1
}

/// Neighbour probability ratios `[p(x+e_1)/p(x), ..., p(x+e_d)/p(x)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if let Some(bad) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "score ratios must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(Self(ratios))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A probability vector over all `2^d` states.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDistribution {
    dim: u32,
    mass: Vec<f64>,
}

impl DenseDistribution {
    /// Wraps a probability vector that already sums to one (within
    /// [`MASS_TOLERANCE`]). The residual drift is divided out once here.
    pub fn new(dim: u32, mass: Vec<f64>) -> Result<Self> {
        let mut out = Self::checked(dim, mass)?;
        let total: f64 = out.mass.iter().sum();
        out.renormalize(total);
        Ok(out)
    }

    /// Validates without touching the stored values, so files round-trip
    /// bit for bit.
    fn checked(dim: u32, mass: Vec<f64>) -> Result<Self> {
        check_dense_dim(dim)?;
        if mass.len() != 1usize << dim {
            return Err(Error::DimensionMismatch {
                expected: 1 << dim,
                got: mass.len(),
            });
        }
        if let Some((i, m)) = mass.iter().enumerate().find(|(_, m)| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {m}; masses must be finite and nonnegative"
            )));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("total mass {total} differs from 1")));
        }
        Ok(Self { dim, mass })
    }

    /// Normalizes arbitrary nonnegative weights into a distribution.
    pub fn from_weights(dim: u32, weights: Vec<f64>) -> Result<Self> {
        check_dense_dim(dim)?;
        if weights.len() != 1usize << dim {
            return Err(Error::DimensionMismatch {
                expected: 1 << dim,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        let mut out = Self { dim, mass: weights };
        out.renormalize(total);
        Ok(out)
    }

    fn renormalize(&mut self, total: f64) {
        if total != 1.0 {
            self.mass.iter_mut().for_each(|m| *m /= total);
        }
    }

    /// The stationary law `γ`.
    pub fn uniform(dim: u32) -> Result<Self> {
        check_dense_dim(dim)?;
        let n = 1usize << dim;
        Ok(Self {
            dim,
            mass: vec![1.0 / n as f64; n],
        })
    }

    pub fn point_mass(state: HypercubeState) -> Result<Self> {
        check_dense_dim(state.dim())?;
        let mut mass = vec![0.0; 1 << state.dim()];
        mass[state.index()] = 1.0;
        Ok(Self { dim: state.dim(), mass })
    }

    /// Plug-in estimate from observed states.
    pub fn empirical<I>(dim: u32, states: I) -> Result<Self>
    where
        I: IntoIterator<Item = HypercubeState>,
    {
        check_dense_dim(dim)?;
        let mut counts = vec![0.0; 1 << dim];
        for s in states {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim as usize,
                    got: s.dim() as usize,
                });
            }
            counts[s.index()] += 1.0;
        }
        Self::from_weights(dim, counts)
    }

    #[inline]
    pub fn dim(&self) -> u32 {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    #[inline]
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    #[inline]
    pub fn prob(&self, x: HypercubeState) -> f64 {
        self.mass[x.index()]
    }

    pub fn state(&self, index: usize) -> HypercubeState {
        HypercubeState {
            bits: index as u64,
            dim: self.dim,
        }
    }

    pub fn states(&self) -> impl Iterator<Item = HypercubeState> + '_ {
        (0..self.mass.len()).map(|i| self.state(i))
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    /// Largest neighbour ratio `p(x+e_i)/p(x)` over all states and
    /// coordinates; infinite if some state is null while a neighbour is not.
    pub fn max_neighbor_ratio(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, &px) in self.mass.iter().enumerate() {
            for i in 0..self.dim {
                let py = self.mass[x ^ (1 << i)];
                if py == 0.0 {
                    continue;
                }
                if px == 0.0 {
                    return f64::INFINITY;
                }
                worst = worst.max(py / px);
            }
        }
        worst
    }

    /// A reusable categorical sampler for this distribution.
    pub fn sampler(&self) -> Result<StateSampler> {
        let index = WeightedIndex::new(&self.mass).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        Ok(StateSampler { dim: self.dim, index })
    }

    /// Binary form: magic `HCDD`, then `format_version: u32`, `d: u32`, and
    /// `2^d` masses as `f64`, all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&DISTRIBUTION_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.dim.to_le_bytes())?;
        for m in &self.mass {
            w.write_all(&m.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("bad distribution magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != DISTRIBUTION_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported distribution format version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word);
        check_dense_dim(dim)?;
        let mut mass = vec![0.0; 1 << dim];
        let mut buf = [0u8; 8];
        for m in mass.iter_mut() {
            r.read_exact(&mut buf)?;
            *m = f64::from_le_bytes(buf);
        }
        Self::checked(dim, mass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DistributionFile {
            d: self.dim,
            format_version: DISTRIBUTION_FORMAT_VERSION,
            mass: self.mass.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: DistributionFile = serde_json::from_str(s)?;
        if file.format_version != DISTRIBUTION_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported distribution format version {}",
                file.format_version
            )));
        }
        Self::checked(file.d, file.mass)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    d: u32,
    format_version: u32,
    mass: Vec<f64>,
}

/// Draws states from a [`DenseDistribution`].
#[derive(Debug, Clone)]
pub struct StateSampler {
    dim: u32,
    index: WeightedIndex<f64>,
}

impl StateSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HypercubeState {
        HypercubeState {
            bits: self.index.sample(rng) as u64,
            dim: self.dim,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    Ok(())
}

/// Probability that one coordinate differs between times `s` and `s + dt`:
/// `(1 - e^{-2 dt}) / 2`.
pub fn flip_probability(dt: f64) -> Result<f64> {
    check_time(dt)?;
    Ok(-0.5 * (-2.0 * dt).exp_m1())
}

/// The discrete heat kernel `g_w(t) = 2^{-d} prod_i (1 + (-1)^{w_i} e^{-2t})`,
/// i.e. the probability of moving by `w` in time `t`.
pub fn heat_kernel(w: HypercubeState, t: f64) -> Result<f64> {
    let flip = flip_probability(t)?;
    let stay = 1.0 - flip;
    let k = w.weight() as i32;
    Ok(flip.powi(k) * stay.powi(w.dim() as i32 - k))
}

/// `p0 · e^{tQ}` for the independent-flip generator.
pub fn evolve_exact(p0: &DenseDistribution, t: f64) -> Result<DenseDistribution> {
    check_time(t)?;
    check_dense_dim(p0.dim)?;
    let flip = flip_probability(t)?;
    let stay = 1.0 - flip;
    let mut mass = p0.mass.clone();
    for i in 0..p0.dim {
        let bit = 1usize << i;
        for x in 0..mass.len() {
            if x & bit != 0 {
                continue;
            }
            let a = mass[x];
            let b = mass[x | bit];
            mass[x] = stay * a + flip * b;
            mass[x | bit] = flip * a + stay * b;
        }
    }
    Ok(DenseDistribution { dim: p0.dim, mass })
}

/// Neighbour ratios `p(x+e_i)/p(x)` read off a dense distribution.
pub fn exact_score(p: &DenseDistribution, x: HypercubeState) -> Result<ScoreVector> {
    if x.dim() != p.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim as usize,
            got: x.dim() as usize,
        });
    }
    let px = p.prob(x);
    if px <= 0.0 {
        return Err(Error::ZeroMass { bits: x.bits() });
    }
    Ok(ScoreVector((0..p.dim).map(|i| p.prob(x.flip(i)) / px).collect()))
}

/// Which a priori bound on neighbour ratios applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// No assumption on the data; ratios at forward time `s` are bounded by
    /// `coth(s)`.
    General,
    /// Data ratios are bounded by `L`, and the forward process preserves that.
    Bounded(f64),
}

impl RatioMode {
    pub fn validate(self) -> Result<()> {
        match self {
            RatioMode::General => Ok(()),
            RatioMode::Bounded(l) if l.is_finite() && l >= 1.0 => Ok(()),
            RatioMode::Bounded(l) => Err(Error::InvalidParameter(format!(
                "ratio bound L must be finite and at least 1, got {l}"
            ))),
        }
    }
}

/// Upper bound on every neighbour ratio `p(x+e_i)/p(x)` at forward time `s`.
///
/// `(1 + e^{-2s}) / (1 - e^{-2s}) = coth(s)` in general, clamped to `L` when
/// the data ratio bound holds.
pub fn score_envelope(s_forward: f64, mode: RatioMode) -> Result<f64> {
    check_time(s_forward)?;
    mode.validate()?;
    match mode {
        RatioMode::General if s_forward == 0.0 => Err(Error::InfiniteRate),
        RatioMode::General => Ok(1.0 / s_forward.tanh()),
        RatioMode::Bounded(l) if s_forward == 0.0 => Ok(l),
        RatioMode::Bounded(l) => Ok((1.0 / s_forward.tanh()).min(l)),
    }
}

fn check_same_dim(p: &DenseDistribution, q: &DenseDistribution) -> Result<()> {
    if p.dim != q.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim as usize,
            got: q.dim as usize,
        });
    }
    Ok(())
}

/// `KL(p || q)` in nats. Returns `+inf` when `p` is not absolutely continuous
/// with respect to `q`.
pub fn kl(p: &DenseDistribution, q: &DenseDistribution) -> Result<f64> {
    check_same_dim(p, q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.mass.iter().zip(&q.mass) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += a * (a / b).ln();
    }
    Ok(acc.max(0.0))
}

pub fn tv(p: &DenseDistribution, q: &DenseDistribution) -> Result<f64> {
    check_same_dim(p, q)?;
    let l1: f64 = p.mass.iter().zip(&q.mass).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).min(1.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &DenseDistribution) -> f64 {
    -p.mass.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(bits: u64, dim: u32) -> HypercubeState {
        HypercubeState::new(bits, dim).unwrap()
    }

    fn random_dist(dim: u32, rng: &mut ChaCha8Rng) -> DenseDistribution {
        let w = (0..1 << dim).map(|_| rng.random::<f64>()).collect();
        DenseDistribution::from_weights(dim, w).unwrap()
    }

    #[test]
    fn state_rejects_out_of_range_bits() {
        assert!(HypercubeState::new(0b100, 2).is_err());
        assert!(HypercubeState::new(0, 0).is_err());
        assert!(HypercubeState::new(0, 64).is_err());
        assert!(HypercubeState::new(u64::MAX >> 1, 63).is_ok());
        assert_eq!(st(0b101, 3).flip(1), st(0b111, 3));
    }

    #[test]
    fn heat_kernel_limits() {
        assert_eq!(heat_kernel(st(0, 1), 0.0).unwrap(), 1.0);
        assert_eq!(heat_kernel(st(1, 1), 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(heat_kernel(st(1, 1), 50.0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(heat_kernel(st(1, 1), -1.0).is_err());
    }

    #[test]
    fn heat_kernel_sums_to_one() {
        for t in [0.0, 0.01, 0.3, 2.0] {
            let total: f64 = (0..32).map(|w| heat_kernel(st(w, 5), t).unwrap()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn flip_probability_matches_single_coordinate_kernel() {
        assert_eq!(flip_probability(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(flip_probability(40.0).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            flip_probability(0.3).unwrap(),
            heat_kernel(st(1, 1), 0.3).unwrap(),
            epsilon = 1e-16
        );
        assert!(flip_probability(-1e-9).is_err());
    }

    #[test]
    fn evolve_point_mass_in_one_dimension() {
        // Power series of e^{tQ} with Q = [[-1, 1], [1, -1]], truncated at 40 terms.
        let t: f64 = 0.8;
        let mut row = [1.0, 0.0];
        let mut term = [1.0, 0.0];
        for k in 1..40 {
            let next = [(-term[0] + term[1]) * t / k as f64, (term[0] - term[1]) * t / k as f64];
            term = next;
            row[0] += term[0];
            row[1] += term[1];
        }
        let p = evolve_exact(&DenseDistribution::point_mass(st(0, 1)).unwrap(), t).unwrap();
        assert_abs_diff_eq!(p.mass()[0], row[0], epsilon = 1e-14);
        assert_abs_diff_eq!(p.mass()[1], row[1], epsilon = 1e-14);
        assert_abs_diff_eq!(p.mass()[0], (1.0 + (-2.0 * t).exp()) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn uniform_is_stationary() {
        let g = DenseDistribution::uniform(7).unwrap();
        for t in [0.0, 0.1, 1.0, 10.0] {
            let p = evolve_exact(&g, t).unwrap();
            for (a, b) in p.mass().iter().zip(g.mass()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evolve_matches_heat_kernel_from_point_mass() {
        let a = st(0b0110, 4);
        let t = 0.37;
        let p = evolve_exact(&DenseDistribution::point_mass(a).unwrap(), t).unwrap();
        for b in p.states() {
            assert_abs_diff_eq!(p.prob(b), heat_kernel(a.xor(b), t).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn evolve_rejects_negative_time() {
        let g = DenseDistribution::uniform(2).unwrap();
        assert!(matches!(evolve_exact(&g, -0.1), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn exact_score_examples() {
        let g = DenseDistribution::uniform(3).unwrap();
        assert_eq!(exact_score(&g, st(0b010, 3)).unwrap().as_slice(), &[1.0; 3]);

        let p = DenseDistribution::new(2, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let s = exact_score(&p, st(0, 2)).unwrap();
        assert_abs_diff_eq!(s.as_slice()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(s.as_slice()[1], 0.5, epsilon = 1e-15);

        let delta = DenseDistribution::point_mass(st(0, 2)).unwrap();
        assert!(matches!(
            exact_score(&delta, st(0b11, 2)),
            Err(Error::ZeroMass { bits: 3 })
        ));
    }

    #[test]
    fn score_of_evolved_point_mass_within_envelope() {
        for t in [0.05, 0.5, 3.0] {
            let p = evolve_exact(&DenseDistribution::point_mass(st(0, 5)).unwrap(), t).unwrap();
            let bound = score_envelope(t, RatioMode::General).unwrap();
            for x in p.states() {
                let s = exact_score(&p, x).unwrap();
                assert!(s.max() <= bound * (1.0 + 1e-12), "t={t} x={x:?}");
            }
        }
    }

    #[test]
    fn envelope_values() {
        let e = score_envelope(0.5, RatioMode::General).unwrap();
        let direct = (1.0 + (-1.0f64).exp()) / (1.0 - (-1.0f64).exp());
        assert_abs_diff_eq!(e, direct, epsilon = 1e-14);
        assert_abs_diff_eq!(e, 2.1639534137386525, epsilon = 1e-12);
        assert_abs_diff_eq!(score_envelope(30.0, RatioMode::General).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(score_envelope(0.01, RatioMode::Bounded(3.0)).unwrap(), 3.0);
        assert_eq!(score_envelope(0.0, RatioMode::Bounded(3.0)).unwrap(), 3.0);
        assert!(matches!(
            score_envelope(0.0, RatioMode::General),
            Err(Error::InfiniteRate)
        ));
        assert!(score_envelope(1.0, RatioMode::Bounded(0.5)).is_err());
    }

    #[test]
    fn envelope_dominates_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = 0.5;
        let bound = score_envelope(s, RatioMode::General).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let p = evolve_exact(&random_dist(6, &mut rng), s).unwrap();
            for x in p.states() {
                worst = worst.max(exact_score(&p, x).unwrap().max());
            }
        }
        assert!(worst <= bound);
        assert!(worst > 1.0);
    }

    #[test]
    fn divergences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_dist(4, &mut rng);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert_eq!(tv(&p, &p).unwrap(), 0.0);

        let d = 5;
        let delta = DenseDistribution::point_mass(st(0b10101, d)).unwrap();
        let g = DenseDistribution::uniform(d).unwrap();
        assert_abs_diff_eq!(kl(&delta, &g).unwrap(), d as f64 * 2f64.ln(), epsilon = 1e-12);
        assert_eq!(kl(&g, &delta).unwrap(), f64::INFINITY);
        assert_abs_diff_eq!(tv(&delta, &g).unwrap(), 1.0 - 1.0 / 32.0, epsilon = 1e-15);
        assert_abs_diff_eq!(entropy(&g), d as f64 * 2f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy(&delta), 0.0);

        let other = DenseDistribution::uniform(3).unwrap();
        assert!(kl(&p, &other).is_err());
    }

    #[test]
    fn forward_kl_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = DenseDistribution::uniform(8).unwrap();
        for _ in 0..20 {
            let p0 = random_dist(8, &mut rng);
            let k0 = kl(&p0, &g).unwrap();
            for t in [0.5, 1.0, 2.0, 4.0] {
                let kt = kl(&evolve_exact(&p0, t).unwrap(), &g).unwrap();
                assert!(kt <= (-t).exp() * k0);
            }
        }
    }

    #[test]
    fn construction_validates() {
        assert!(DenseDistribution::new(1, vec![0.5, 0.6]).is_err());
        assert!(DenseDistribution::new(1, vec![1.5, -0.5]).is_err());
        assert!(DenseDistribution::new(2, vec![0.5, 0.5]).is_err());
        assert!(DenseDistribution::uniform(25).is_err());
        assert!(DenseDistribution::from_weights(1, vec![0.0, 0.0]).is_err());
        let p = DenseDistribution::from_weights(1, vec![1.0, 3.0]).unwrap();
        assert_eq!(p.mass(), &[0.25, 0.75]);
    }

    #[test]
    fn binary_and_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_dist(5, &mut rng);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HCDD");
        assert_eq!(buf.len(), 12 + 8 * 32);
        assert_eq!(DenseDistribution::read_binary(&buf[..]).unwrap(), p);
        assert_eq!(DenseDistribution::from_json(&p.to_json().unwrap()).unwrap(), p);

        buf[4] = 9;
        assert!(DenseDistribution::read_binary(&buf[..]).is_err());
        assert!(DenseDistribution::from_json(r#"{"d":1,"format_version":1,"mass":[1.0,0.0],"x":1}"#).is_err());
    }

    #[test]
    fn max_neighbor_ratio_detects_null_states() {
        let p = DenseDistribution::new(1, vec![1.0, 0.0]).unwrap();
        assert_eq!(p.max_neighbor_ratio(), f64::INFINITY);
        let q = DenseDistribution::new(1, vec![0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(q.max_neighbor_ratio(), 3.0, epsilon = 1e-15);
    }
}
