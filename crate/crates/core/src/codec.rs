//! Parameter codec: decimal decomposition, unary encoding, stochastic
//! quantization and communication accounting.
//!
//! A model parameter `p ∈ [-1, 1]` is split into a head `p_a` carrying its
//! first `k` decimal places and a residual `p_b ∈ [0, 10^-k)`. The head is
//! sent as a length-`r` unary code whose expected ones-count is
//! `r·(1 + p_a)/2`; the residuals of one client are stochastically rounded to
//! that client's minimum or maximum residual. Both channels are unbiased, so
//! the server recovers the cohort mean from ones-counts and residual sums
//! alone.
//!
//! All functions are pure given the random stream passed in.

use bitvec::prelude::*;
use rand::Rng;
use thiserror::Error;

/// Largest supported split depth.
pub const MAX_SPLIT_DEPTH: u32 = 9;

/// Distance below which a scaled value is treated as lying on the integer grid.
pub const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("parameter {value} is outside [-1, 1]")]
    OutOfRange { value: f64 },
    #[error("split depth k = {k} is outside 1..={MAX_SPLIT_DEPTH}")]
    SplitDepth { k: u32 },
    #[error("code length r must be positive")]
    ZeroCodeLength,
    #[error("code count must be positive")]
    ZeroCodeCount,
    #[error("ones count {ones} exceeds capacity {capacity}")]
    OnesExceedCapacity { ones: u64, capacity: u64 },
    #[error("cannot quantize an empty vector")]
    EmptyVector,
    #[error("quantizer needs between 1 and 16 bits, got {bits}")]
    QuantizerBits { bits: u32 },
    #[error("bit budget argument `{0}` must be positive")]
    ZeroBudgetArgument(&'static str),
}

/// Whether the encoder keeps the `x = 0 → all zeros` shortcut.
///
/// The shortcut predates the shift of the input domain to `[-1, 1]`; with it,
/// zero decodes to `-1`. `General` omits it and is unbiased everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncodingMode {
    #[default]
    General,
    PaperFaithful,
}

/// Head/residual split of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// The parameter truncated towards `-inf` at `k` decimal places.
    pub head: f64,
    /// `p - head`, always in `[0, 10^-k)`.
    pub residual: f64,
    pub k: u32,
}

/// Split `p` into its first `k` decimal places and the remainder.
///
/// The head is `⌊p·10^k⌋ / 10^k`, so the residual is non-negative for negative
/// inputs too.
pub fn decompose(p: f64, k: u32) -> Result<Decomposition, CodecError> {
    check_param(p)?;
    if !(1..=MAX_SPLIT_DEPTH).contains(&k) {
        return Err(CodecError::SplitDepth { k });
    }
    let scale = 10f64.powi(k as i32);
    let step = 1.0 / scale;
    let mut m = (p * scale).floor();
    let mut head = m / scale;
    // p * scale can round across an integer; nudge m so that the residual
    // lands in [0, step).
    if p - head < 0.0 {
        m -= 1.0;
        head = m / scale;
    }
    let mut residual = p - head;
    if residual >= step {
        let up = (m + 1.0) / scale;
        if p - up >= 0.0 {
            head = up;
            residual = p - up;
        } else {
            // p sits within rounding error below a grid point; neither head
            // gives an exact residual in range.
            residual = step.next_down();
        }
    }
    Ok(Decomposition { head, residual, k })
}

/// A unary code for one parameter, as produced by [`unary_encode`].
///
/// Before shuffling the ones always form a prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnaryCode {
    param_id: usize,
    bits: BitVec<u64, Lsb0>,
}

impl UnaryCode {
    fn prefix(param_id: usize, r: usize, ones: usize) -> Self {
        let mut bits = bitvec![u64, Lsb0; 0; r];
        bits[..ones].fill(true);
        UnaryCode { param_id, bits }
    }

    pub fn param_id(&self) -> usize {
        self.param_id
    }

    pub fn with_param_id(mut self, param_id: usize) -> Self {
        self.param_id = param_id;
        self
    }

    /// Code length `r`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn bits(&self) -> &BitSlice<u64, Lsb0> {
        &self.bits
    }
}

/// Encode `x ∈ [-1, 1]` into `r` bits whose expected ones-count is `r·(1+x)/2`.
///
/// With `x' = (1+x)/2`, `μ = ⌈x'·r⌉` and `q = x'·r − μ + 1`, bit `j`
/// (1-based) is 1 for `j < μ`, Bernoulli(`q`) for `j = μ` and 0 after. When
/// `x'·r` is within [`GRID_TOLERANCE`] of an integer it is snapped onto it and
/// the code is deterministic.
pub fn unary_encode<R: Rng + ?Sized>(
    x: f64,
    r: usize,
    mode: EncodingMode,
    rng: &mut R,
) -> Result<UnaryCode, CodecError> {
    check_param(x)?;
    if r == 0 {
        return Err(CodecError::ZeroCodeLength);
    }
    if mode == EncodingMode::PaperFaithful && x == 0.0 {
        return Ok(UnaryCode::prefix(0, r, 0));
    }
    let ones = sample_ones(x, r, rng);
    Ok(UnaryCode::prefix(0, r, ones))
}

fn sample_ones<R: Rng + ?Sized>(x: f64, r: usize, rng: &mut R) -> usize {
    let shifted = (1.0 + x) / 2.0;
    let mut level = shifted * r as f64;
    let nearest = level.round();
    if (level - nearest).abs() <= GRID_TOLERANCE {
        level = nearest;
    }
    let level = level.clamp(0.0, r as f64);
    let mu = level.ceil();
    if mu == 0.0 {
        return 0;
    }
    let q = level - mu + 1.0;
    let certain = mu as usize - 1;
    if q >= 1.0 || rng.random::<f64>() < q {
        certain + 1
    } else {
        certain
    }
}

/// Unbiased estimate of the mean encoded value over `n_codes` codes of length
/// `r` that together contain `ones_count` ones.
pub fn unary_decode(ones_count: u64, n_codes: u64, r: u64) -> Result<f64, CodecError> {
    if r == 0 {
        return Err(CodecError::ZeroCodeLength);
    }
    if n_codes == 0 {
        return Err(CodecError::ZeroCodeCount);
    }
    let capacity = n_codes * r;
    if ones_count > capacity {
        return Err(CodecError::OnesExceedCapacity {
            ones: ones_count,
            capacity,
        });
    }
    // Exact integer numerator, so the result is the correctly rounded
    // value of (2·ones − capacity)/capacity.
    let numerator = 2 * i128::from(ones_count) - i128::from(capacity);
    Ok(numerator as f64 / capacity as f64)
}

/// Stochastically rounded vector together with the range it was rounded to.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub values: Vec<f64>,
    pub h_min: f64,
    pub h_max: f64,
}

impl QuantizedVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn range_of(h: &[f64]) -> (f64, f64) {
    h.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// One-bit stochastic quantization: each `h_j` becomes `h_max` with
/// probability `(h_j − h_min)/(h_max − h_min)` and `h_min` otherwise.
///
/// A constant vector is returned unchanged.
pub fn quantize<R: Rng + ?Sized>(h: &[f64], rng: &mut R) -> Result<QuantizedVector, CodecError> {
    quantize_levels(h, 1, rng)
}

/// `bits`-bit stochastic quantization onto `2^bits` evenly spaced levels
/// spanning `[h_min, h_max]`. One bit reduces to [`quantize`].
pub fn quantize_levels<R: Rng + ?Sized>(
    h: &[f64],
    bits: u32,
    rng: &mut R,
) -> Result<QuantizedVector, CodecError> {
    if h.is_empty() {
        return Err(CodecError::EmptyVector);
    }
    if !(1..=16).contains(&bits) {
        return Err(CodecError::QuantizerBits { bits });
    }
    let (h_min, h_max) = range_of(h);
    if h_min == h_max {
        return Ok(QuantizedVector {
            values: h.to_vec(),
            h_min,
            h_max,
        });
    }
    let top = (1usize << bits) - 1;
    let width = h_max - h_min;
    let level = |i: usize| -> f64 {
        if i == 0 {
            h_min
        } else if i == top {
            h_max
        } else {
            h_min + width * i as f64 / top as f64
        }
    };
    let values = h
        .iter()
        .map(|&v| {
            let pos = (v - h_min) / width * top as f64;
            let lower = (pos.floor() as usize).min(top - 1);
            let p_up = pos - lower as f64;
            if rng.random::<f64>() < p_up {
                level(lower + 1)
            } else {
                level(lower)
            }
        })
        .collect();
    Ok(QuantizedVector {
        values,
        h_min,
        h_max,
    })
}

/// Output of [`unary_quant`] for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryQuantOutput {
    /// One code per parameter, tagged with its flat index.
    pub codes: Vec<UnaryCode>,
    /// Quantized residuals, indexed like `codes`.
    pub residuals: QuantizedVector,
}

/// Encode a client's parameter vector: unary codes for the `k`-decimal heads
/// and one-bit quantization of the residuals over the client's own range.
pub fn unary_quant<R: Rng + ?Sized>(
    update: &[f64],
    r: usize,
    k: u32,
    mode: EncodingMode,
    rng: &mut R,
) -> Result<UnaryQuantOutput, CodecError> {
    if update.is_empty() {
        return Err(CodecError::EmptyVector);
    }
    let mut codes = Vec::with_capacity(update.len());
    let mut residuals = Vec::with_capacity(update.len());
    for (i, &p) in update.iter().enumerate() {
        let split = decompose(p, k)?;
        codes.push(unary_encode(split.head, r, mode, rng)?.with_param_id(i));
        residuals.push(split.residual);
    }
    let residuals = quantize(&residuals, rng)?;
    Ok(UnaryQuantOutput { codes, residuals })
}

/// Bits one client transmits per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitBudget {
    /// `r·λ` unary payload bits.
    pub unary_bits: u64,
    /// `λ·value_bits` for the quantized residuals.
    pub quant_payload_bits: u64,
    /// One parameter id per message on either channel.
    pub metadata_bits: u64,
}

impl BitBudget {
    pub fn total(&self) -> u64 {
        self.unary_bits + self.quant_payload_bits + self.metadata_bits
    }
}

pub fn bit_budget(
    params: u64,
    r: u64,
    param_id_bits: u64,
    value_bits: u64,
) -> Result<BitBudget, CodecError> {
    for (name, v) in [
        ("params", params),
        ("r", r),
        ("param_id_bits", param_id_bits),
        ("value_bits", value_bits),
    ] {
        if v == 0 {
            return Err(CodecError::ZeroBudgetArgument(name));
        }
    }
    let unary_bits = r * params;
    Ok(BitBudget {
        unary_bits,
        quant_payload_bits: params * value_bits,
        metadata_bits: (unary_bits + params) * param_id_bits,
    })
}

fn check_param(p: f64) -> Result<(), CodecError> {
    if (-1.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(CodecError::OutOfRange { value: p })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn stream(seed: u64) -> crate::rng::Stream {
        rng::derive(seed, &[0xC0DEC])
    }

    #[test]
    fn decompose_examples() {
        let d = decompose(0.12345, 2).unwrap();
        assert_eq!(d.head, 0.12);
        assert!((d.residual - 0.00345).abs() < 1e-12);

        let d = decompose(-0.678, 2).unwrap();
        assert_eq!(d.head, -0.68);
        assert!((d.residual - 0.002).abs() < 1e-12);

        let d = decompose(1.0, 3).unwrap();
        assert_eq!((d.head, d.residual), (1.0, 0.0));
        let d = decompose(0.0, 2).unwrap();
        assert_eq!((d.head, d.residual), (0.0, 0.0));
    }

    #[test]
    fn decompose_matches_int_frac_formula_for_positive_inputs() {
        // int(p) + floor(10^k frac(p)) / 10^k with truncating int.
        for &p in &[0.12345_f64, 0.5, 0.999_999, 0.000_123, 0.731] {
            for k in 1..=6 {
                let scale = 10f64.powi(k as i32);
                let int = p.trunc();
                let frac = p - int;
                let reference = int + (scale * frac).floor() / scale;
                let head = decompose(p, k).unwrap().head;
                assert!((head - reference).abs() < 1e-12, "p={p} k={k}");
            }
        }
    }

    #[test]
    fn decompose_rejects_bad_inputs() {
        assert_eq!(
            decompose(1.5, 2),
            Err(CodecError::OutOfRange { value: 1.5 })
        );
        assert!(matches!(
            decompose(f64::NAN, 2),
            Err(CodecError::OutOfRange { .. })
        ));
        assert_eq!(decompose(0.5, 0), Err(CodecError::SplitDepth { k: 0 }));
        assert_eq!(decompose(0.5, 10), Err(CodecError::SplitDepth { k: 10 }));
    }

    proptest! {
        #[test]
        fn decomposition_invariants(p in -1.0f64..=1.0, k in 1u32..=9) {
            let d = decompose(p, k).unwrap();
            let step = 10f64.powi(-(k as i32));
            prop_assert!(d.residual >= 0.0);
            prop_assert!(d.residual < step);
            prop_assert!((d.head + d.residual - p).abs() <= 2f64.powi(-45));
            let scaled = d.head * 10f64.powi(k as i32);
            prop_assert!((scaled - scaled.round()).abs() <= 1e-9 * scaled.abs().max(1.0));
            prop_assert!((-1.0..=1.0).contains(&d.head));
        }

        #[test]
        fn codes_are_prefix_structured(x in -1.0f64..=1.0, r in 1usize..200, seed in any::<u64>()) {
            let code = unary_encode(x, r, EncodingMode::General, &mut stream(seed)).unwrap();
            prop_assert_eq!(code.len(), r);
            let ones = code.ones();
            prop_assert!(code.bits()[..ones].all());
            prop_assert!(code.bits()[ones..].not_any());
            let level = (1.0 + x) / 2.0 * r as f64;
            prop_assert!(ones as f64 >= level.floor() - 1e-9 && ones as f64 <= level.ceil() + 1e-9);
        }
    }

    #[test]
    fn residual_stays_in_range_next_to_grid_points() {
        for k in 1..=4u32 {
            let scale = 10f64.powi(k as i32);
            let step = 1.0 / scale;
            for j in -(scale as i64)..=(scale as i64) {
                let mut p = j as f64 / scale;
                for _ in 0..4 {
                    p = p.next_down();
                }
                for _ in 0..9 {
                    if (-1.0..=1.0).contains(&p) {
                        let d = decompose(p, k).unwrap();
                        assert!((0.0..step).contains(&d.residual), "p={p:e} k={k}: {d:?}");
                        assert!(
                            (d.head + d.residual - p).abs() <= 1e-15,
                            "p={p:e} k={k}: {d:?}"
                        );
                    }
                    p = p.next_up();
                }
            }
        }
    }

    #[test]
    fn encode_endpoints_and_zero() {
        let mut s = stream(1);
        let one = unary_encode(1.0, 4, EncodingMode::General, &mut s).unwrap();
        assert_eq!(
            one.bits().iter().by_vals().collect::<Vec<_>>(),
            vec![true; 4]
        );
        let neg = unary_encode(-1.0, 4, EncodingMode::General, &mut s).unwrap();
        assert_eq!(neg.ones(), 0);

        let zero = unary_encode(0.0, 10, EncodingMode::General, &mut s).unwrap();
        let expected: Vec<bool> = (0..10).map(|j| j < 5).collect();
        assert_eq!(zero.bits().iter().by_vals().collect::<Vec<_>>(), expected);

        let faithful = unary_encode(0.0, 10, EncodingMode::PaperFaithful, &mut s).unwrap();
        assert_eq!(faithful.ones(), 0);
        assert_eq!(faithful.len(), 10);
        // Away from zero both modes agree.
        let a = unary_encode(0.6, 10, EncodingMode::PaperFaithful, &mut stream(3)).unwrap();
        let b = unary_encode(0.6, 10, EncodingMode::General, &mut stream(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_quarter_is_a_fair_coin_between_two_and_three() {
        let mut s = stream(2);
        let draws = 100_000;
        let mut threes = 0usize;
        for _ in 0..draws {
            match unary_encode(0.25, 4, EncodingMode::General, &mut s)
                .unwrap()
                .ones()
            {
                2 => {}
                3 => threes += 1,
                other => panic!("unexpected ones count {other}"),
            }
        }
        let sigma = (draws as f64 * 0.25).sqrt();
        assert!((threes as f64 - draws as f64 / 2.0).abs() <= 3.0 * sigma);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let mut s = stream(0);
        assert_eq!(
            unary_encode(-1.01, 4, EncodingMode::General, &mut s),
            Err(CodecError::OutOfRange { value: -1.01 })
        );
        assert_eq!(
            unary_encode(0.0, 0, EncodingMode::General, &mut s),
            Err(CodecError::ZeroCodeLength)
        );
    }

    #[test]
    fn decode_examples() {
        assert_eq!(unary_decode(4, 1, 4).unwrap(), 1.0);
        assert_eq!(unary_decode(0, 1, 4).unwrap(), -1.0);
        assert_eq!(unary_decode(5, 2, 10).unwrap(), -0.5);
        assert_eq!(
            unary_decode(5, 1, 4),
            Err(CodecError::OnesExceedCapacity {
                ones: 5,
                capacity: 4
            })
        );
        assert_eq!(unary_decode(0, 0, 4), Err(CodecError::ZeroCodeCount));
    }

    #[test]
    fn two_codes_of_minus_half_decode_to_minus_half_on_average() {
        let mut s = stream(4);
        let trials = 20_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let ones: usize = (0..2)
                .map(|_| {
                    unary_encode(-0.5, 10, EncodingMode::General, &mut s)
                        .unwrap()
                        .ones()
                })
                .sum();
            total += unary_decode(ones as u64, 2, 10).unwrap();
        }
        // Each code has 2 or 3 ones with equal odds; per-trial sd of the
        // decoded value is 2·sqrt(2·0.25)/20.
        let sd = 2.0 * (0.5f64).sqrt() / 20.0 / (trials as f64).sqrt();
        assert!((total / trials as f64 + 0.5).abs() <= 4.0 * sd);
    }

    #[test]
    fn paper_faithful_zero_is_biased() {
        let code = unary_encode(0.0, 10, EncodingMode::PaperFaithful, &mut stream(0)).unwrap();
        assert_eq!(unary_decode(code.ones() as u64, 1, 10).unwrap(), -1.0);
    }

    #[test]
    fn quantize_examples() {
        let mut s = stream(5);
        let trials = 20_000;
        let mut highs = 0;
        for _ in 0..trials {
            let q = quantize(&[0.2, 0.5, 0.8], &mut s).unwrap();
            assert_eq!(q.values[0], 0.2);
            assert_eq!(q.values[2], 0.8);
            assert!(q.values[1] == 0.2 || q.values[1] == 0.8);
            highs += (q.values[1] == 0.8) as usize;
            assert_eq!((q.h_min, q.h_max), (0.2, 0.8));
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((highs as f64 - trials as f64 / 2.0).abs() <= 4.0 * sigma);

        let flat = quantize(&[0.3, 0.3, 0.3], &mut s).unwrap();
        assert_eq!(flat.values, vec![0.3, 0.3, 0.3]);
        assert_eq!(quantize(&[], &mut s), Err(CodecError::EmptyVector));
    }

    #[test]
    fn quantize_small_range_is_unbiased() {
        use rand::Rng;
        let mut s = stream(6);
        let h: Vec<f64> = (0..1000).map(|_| s.random_range(0.0..0.001)).collect();
        let reps = 10_000;
        let mut sums = vec![0.0; h.len()];
        let mut range = (0.0, 0.0);
        for _ in 0..reps {
            let q = quantize(&h, &mut s).unwrap();
            range = (q.h_min, q.h_max);
            for (acc, v) in sums.iter_mut().zip(&q.values) {
                *acc += v;
            }
        }
        let (lo, hi) = range;
        for (j, &hj) in h.iter().enumerate() {
            let p = (hj - lo) / (hi - lo);
            let sd = (hi - lo) * (p * (1.0 - p)).sqrt() / (reps as f64).sqrt();
            let mean = sums[j] / reps as f64;
            assert!((mean - hj).abs() <= 4.0 * sd + 1e-15, "element {j}");
        }
    }

    #[test]
    fn multi_bit_quantizer_is_unbiased_and_on_grid() {
        let h = [0.0, 0.1, 0.37, 0.5, 0.92, 1.0];
        let mut s = stream(8);
        let reps = 20_000;
        let mut sums = [0.0; 6];
        for _ in 0..reps {
            let q = quantize_levels(&h, 2, &mut s).unwrap();
            for (j, v) in q.values.iter().enumerate() {
                let idx = v * 3.0;
                assert!((idx - idx.round()).abs() < 1e-12);
                sums[j] += v;
            }
        }
        for (j, hj) in h.iter().enumerate() {
            // Worst-case per-draw sd is half a level width.
            let sd = (1.0 / 3.0) * 0.5 / (reps as f64).sqrt();
            assert!((sums[j] / reps as f64 - hj).abs() <= 4.0 * sd);
        }
        assert_eq!(
            quantize_levels(&h, 0, &mut s),
            Err(CodecError::QuantizerBits { bits: 0 })
        );
    }

    #[test]
    fn unary_quant_single_parameter() {
        let mut s = stream(9);
        let mut sevens = 0;
        let trials = 4000;
        for _ in 0..trials {
            let out = unary_quant(&[0.5], 10, 1, EncodingMode::General, &mut s).unwrap();
            assert_eq!(out.codes.len(), 1);
            assert_eq!(out.residuals.values, vec![0.0]);
            match out.codes[0].ones() {
                7 => sevens += 1,
                8 => {}
                n => panic!("ones = {n}"),
            }
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((sevens as f64 - trials as f64 / 2.0).abs() <= 4.0 * sigma);
    }

    #[test]
    fn unary_quant_tags_codes_and_sizes_match() {
        let update = [0.1234, -0.5, 0.999, -0.0001];
        let out = unary_quant(&update, 100, 2, EncodingMode::General, &mut stream(10)).unwrap();
        assert_eq!(out.codes.len(), 4);
        assert_eq!(out.residuals.len(), 4);
        for (i, c) in out.codes.iter().enumerate() {
            assert_eq!(c.param_id(), i);
            assert_eq!(c.len(), 100);
        }
        assert!(out.residuals.h_min >= 0.0 && out.residuals.h_max < 0.01);
        assert!(matches!(
            unary_quant(&[0.1, 2.0], 10, 2, EncodingMode::General, &mut stream(0)),
            Err(CodecError::OutOfRange { value }) if value == 2.0
        ));
    }

    #[test]
    fn zero_update_decodes_to_zero_on_average() {
        let mut s = stream(11);
        let update = vec![0.0; 50];
        let trials = 200;
        let mut acc = 0.0;
        for _ in 0..trials {
            let out = unary_quant(&update, 10, 2, EncodingMode::General, &mut s).unwrap();
            let ones: usize = out.codes.iter().map(UnaryCode::ones).sum();
            let head = unary_decode(ones as u64, 50, 10).unwrap();
            let tail: f64 = out.residuals.values.iter().sum::<f64>() / 50.0;
            acc += head + tail;
        }
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn reconstruction_of_random_means() {
        use rand::Rng;
        let mut s = stream(12);
        let lambda = 1000;
        let (r, k) = (1000usize, 3u32);
        let trials = 100;
        let mut mae = 0.0;
        for _ in 0..trials {
            let update: Vec<f64> = (0..lambda).map(|_| s.random_range(-1.0..=1.0)).collect();
            let truth = update.iter().sum::<f64>() / lambda as f64;
            let out = unary_quant(&update, r, k, EncodingMode::General, &mut s).unwrap();
            let ones: usize = out.codes.iter().map(UnaryCode::ones).sum();
            let head = unary_decode(ones as u64, lambda as u64, r as u64).unwrap();
            let tail = out.residuals.values.iter().sum::<f64>() / lambda as f64;
            mae += (head + tail - truth).abs();
        }
        assert!(mae / trials as f64 <= 5e-4);
    }

    #[test]
    fn budget_examples() {
        let b = bit_budget(421_642, 1000, 32, 64).unwrap();
        assert_eq!(b.unary_bits, 421_642_000);
        assert_eq!(b.quant_payload_bits, 421_642 * 64);
        assert_eq!(b.metadata_bits, (421_642_000 + 421_642) * 32);

        let unit = bit_budget(1, 1, 1, 1).unwrap();
        assert_eq!(
            unit,
            BitBudget {
                unary_bits: 1,
                quant_payload_bits: 1,
                metadata_bits: 2
            }
        );
        assert_eq!(unit.total(), 4);

        assert_eq!(
            bit_budget(25_450, 1000, 32, 64).unwrap().unary_bits,
            25_450_000
        );
        assert_eq!(
            bit_budget(0, 1, 1, 1),
            Err(CodecError::ZeroBudgetArgument("params"))
        );
    }
}
