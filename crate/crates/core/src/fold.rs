//! Width folding of NHWC convolutions.
//!
//! Folding by a factor `F` splits the width axis into `F` interleaved
//! slices and stacks them along channels:
//!
//! ```text
//! X_f[b, h, w', f * Cin + c] = X[b, h, F * w' + f, c]
//! ```
//!
//! The filter is expanded block-diagonally, one copy of the original kernel
//! per slice, and the bias is tiled `F` times. When the kernel does not span
//! the width axis (`KW == 1`, unit width stride) the folded convolution
//! computes the same values as the original one, up to the same re-indexing
//! of its output.
//!
//! In row-major NHWC every one of these index maps is a plain reshape:
//! `(F * w' + f) * Cin + c == w' * (F * Cin) + (f * Cin + c)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refconv::ConvSpec;
use crate::tensor::Tensor;

/// Default channel alignment target.
pub const DEFAULT_ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldAxis {
    Width,
}

/// Why a fold was not applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldReason {
    WidthNotDivisible,
    KernelSpansFoldAxis,
    StrideOnFoldAxis,
    AlreadyAligned,
    FactorTooLarge,
    /// Input has more than one channel and the caller asked for the single-channel fold.
    UnsupportedChannels,
}

impl std::fmt::Display for FoldReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FoldReason::WidthNotDivisible => "width is not divisible by the folding factor",
            FoldReason::KernelSpansFoldAxis => "kernel spans the width axis",
            FoldReason::StrideOnFoldAxis => "width stride is not 1",
            FoldReason::AlreadyAligned => "channels are already aligned",
            FoldReason::FactorTooLarge => "folding factor exceeds the width",
            FoldReason::UnsupportedChannels => "input channel count other than 1",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason")]
pub enum FoldStatus {
    Apply,
    Fallback(FoldReason),
}

/// How the folding factor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FoldFactor {
    Fixed(usize),
    /// Smallest legal `F` making `Cin * F` a multiple of the alignment.
    Auto,
}

impl std::str::FromStr for FoldFactor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(FoldFactor::Auto);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("folding factor must be at least 1".into()),
            Ok(f) => Ok(FoldFactor::Fixed(f)),
            Err(_) => Err(format!("expected a positive integer or 'auto', got '{s}'")),
        }
    }
}

/// Result of legality analysis for one convolution.
///
/// For a fallback plan the predicted shapes are the unchanged original ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub axis: FoldAxis,
    pub factor: usize,
    pub original: ConvSpec,
    /// `[B, H, W / F, Cin * F]`
    pub folded_input_shape: [usize; 4],
    /// `[KH, KW, Cin * F, F * Cout]`
    pub expanded_filter_shape: [usize; 4],
    pub status: FoldStatus,
}

impl FoldPlan {
    fn fallback(spec: &ConvSpec, factor: usize, reason: FoldReason) -> Self {
        Self {
            axis: FoldAxis::Width,
            factor,
            original: *spec,
            folded_input_shape: spec.input,
            expanded_filter_shape: spec.filter,
            status: FoldStatus::Fallback(reason),
        }
    }

    fn apply(spec: &ConvSpec, factor: usize) -> Self {
        let [b, h, w, cin] = spec.input;
        let [kh, kw, _, cout] = spec.filter;
        Self {
            axis: FoldAxis::Width,
            factor,
            original: *spec,
            folded_input_shape: [b, h, w / factor, cin * factor],
            expanded_filter_shape: [kh, kw, cin * factor, factor * cout],
            status: FoldStatus::Apply,
        }
    }

    pub fn is_apply(&self) -> bool {
        self.status == FoldStatus::Apply
    }

    pub fn reason(&self) -> Option<FoldReason> {
        match self.status {
            FoldStatus::Apply => None,
            FoldStatus::Fallback(r) => Some(r),
        }
    }

    /// The convolution executed on folded operands. Equals the original spec on fallback.
    pub fn folded_spec(&self) -> ConvSpec {
        ConvSpec {
            input: self.folded_input_shape,
            filter: self.expanded_filter_shape,
            stride: self.original.stride,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest `F >= 1` with `channels * F` divisible by `align`.
pub fn aligning_factor(channels: usize, align: usize) -> usize {
    align / gcd(channels, align)
}

/// Decides whether `spec` can be width-folded.
///
/// A fixed factor is legal iff `KW == 1`, the width stride is 1 and `F`
/// divides `W`. In auto mode an already aligned `Cin` falls back with
/// [`FoldReason::AlreadyAligned`]; otherwise the smallest legal multiple of
/// [`aligning_factor`] is chosen, or [`FoldReason::FactorTooLarge`] is
/// reported when even the smallest aligning factor exceeds `W`.
///
/// Panics if a fixed factor or `align` is 0.
pub fn check_legality(spec: &ConvSpec, factor: FoldFactor, align: usize) -> FoldPlan {
    assert!(align >= 1, "alignment must be at least 1");
    let [_, _, width, cin] = spec.input;
    let [_, kw, _, _] = spec.filter;

    let candidate = match factor {
        FoldFactor::Fixed(f) => {
            assert!(f >= 1, "folding factor must be at least 1");
            f
        }
        FoldFactor::Auto => {
            if cin % align == 0 {
                return FoldPlan::fallback(spec, 1, FoldReason::AlreadyAligned);
            }
            aligning_factor(cin, align)
        }
    };

    if kw != 1 {
        return FoldPlan::fallback(spec, candidate, FoldReason::KernelSpansFoldAxis);
    }
    if spec.stride[1] != 1 {
        return FoldPlan::fallback(spec, candidate, FoldReason::StrideOnFoldAxis);
    }

    match factor {
        FoldFactor::Fixed(f) => {
            if width % f != 0 {
                FoldPlan::fallback(spec, f, FoldReason::WidthNotDivisible)
            } else {
                FoldPlan::apply(spec, f)
            }
        }
        FoldFactor::Auto => {
            if candidate > width {
                return FoldPlan::fallback(spec, candidate, FoldReason::FactorTooLarge);
            }
            (1..=width / candidate)
                .map(|m| m * candidate)
                .find(|f| width % f == 0)
                .map(|f| FoldPlan::apply(spec, f))
                .unwrap_or_else(|| {
                    FoldPlan::fallback(spec, candidate, FoldReason::WidthNotDivisible)
                })
        }
    }
}

fn require_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::IllegalFold("folding factor must be at least 1".into()));
    }
    Ok(())
}

/// Folds a single-channel NHWC input: `(B, H, W, 1) -> (B, H, W / F, F)`.
pub fn fold_input(x: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    let [b, h, w, cin] = x.dims4()?;
    if cin != 1 {
        return Err(Error::IllegalFold(format!(
            "single-channel fold needs Cin == 1, got {cin}"
        )));
    }
    if w % factor != 0 {
        return Err(Error::IllegalFold(format!(
            "width {w} is not divisible by {factor}"
        )));
    }
    x.reshape(&[b, h, w / factor, factor])
}

/// Folds any NHWC input: `(B, H, W, Cin) -> (B, H, W / F, Cin * F)` with
/// channel `f * Cin + c` of position `w'` taken from position `F * w' + f`.
pub fn fold_input_general(x: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    let [b, h, w, cin] = x.dims4()?;
    if w % factor != 0 {
        return Err(Error::IllegalFold(format!(
            "width {w} is not divisible by {factor}"
        )));
    }
    let folded_w = w / factor;
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for hi in 0..h {
            for wf in 0..folded_w {
                for f in 0..factor {
                    let base = ((bi * h + hi) * w + factor * wf + f) * cin;
                    out.extend_from_slice(&src[base..base + cin]);
                }
            }
        }
    }
    Tensor::new(vec![b, h, folded_w, cin * factor], out)
}

/// Inverse of [`fold_input_general`].
pub fn unfold_input_general(x_f: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    let [b, h, folded_w, channels] = x_f.dims4()?;
    if channels % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "channel extent {channels} is not divisible by {factor}"
        )));
    }
    let cin = channels / factor;
    let w = folded_w * factor;
    let mut out = Vec::with_capacity(x_f.len());
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                for c in 0..cin {
                    let (wf, f) = (wi / factor, wi % factor);
                    out.push(x_f.at(&[bi, hi, wf, f * cin + c]));
                }
            }
        }
    }
    Tensor::new(vec![b, h, w, cin], out)
}

/// Expands a `(KH, 1, 1, Cout)` filter to `(KH, 1, F, F * Cout)`, copying it
/// into column block `f * Cout..(f + 1) * Cout` of input channel `f`.
pub fn expand_filter(w: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    let [kh, kw, cin, cout] = w.dims4()?;
    if kw != 1 || cin != 1 {
        return Err(Error::IllegalFold(format!(
            "single-channel expansion needs a (KH, 1, 1, Cout) filter, got {:?}",
            w.shape()
        )));
    }
    let cols = factor * cout;
    let mut out = vec![0.0f32; kh * factor * cols];
    for f in 0..factor {
        for k in 0..kh {
            let dst = (k * factor + f) * cols + f * cout;
            out[dst..dst + cout].copy_from_slice(&w.data()[k * cout..(k + 1) * cout]);
        }
    }
    Tensor::new(vec![kh, 1, factor, cols], out)
}

/// Block-diagonal expansion of a `(KH, KW, Cin, Cout)` filter to
/// `(KH, KW, F * Cin, F * Cout)`: block `f` occupies input channels
/// `f * Cin..` and output channels `f * Cout..`, everything else is `+0.0`.
pub fn expand_filter_general(w: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    let [kh, kw, cin, cout] = w.dims4()?;
    let (rows, cols) = (factor * cin, factor * cout);
    let mut out = vec![0.0f32; kh * kw * rows * cols];
    for tap in 0..kh * kw {
        for f in 0..factor {
            for c in 0..cin {
                let src = (tap * cin + c) * cout;
                let dst = (tap * rows + f * cin + c) * cols + f * cout;
                out[dst..dst + cout].copy_from_slice(&w.data()[src..src + cout]);
            }
        }
    }
    Tensor::new(vec![kh, kw, rows, cols], out)
}

/// Concatenates `F` copies of a rank-1 bias.
pub fn replicate_bias(b: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    if b.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "bias must be rank 1, got {:?}",
            b.shape()
        )));
    }
    let data: Vec<f32> = std::iter::repeat_n(b.data(), factor)
        .flatten()
        .copied()
        .collect();
    Tensor::new(vec![b.len() * factor], data)
}

/// Restores `(B, H', W / F, F * Cout)` to `(B, H', W, Cout)`: output channel
/// `c'` of folded position `w'` lands at width `F * w' + c' / Cout`, channel
/// `c' % Cout`.
pub fn reconstruct_output(y_folded: &Tensor, factor: usize) -> Result<Tensor> {
    require_factor(factor)?;
    let [b, h, folded_w, channels] = y_folded.dims4()?;
    if channels % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "channel extent {channels} is not divisible by {factor}"
        )));
    }
    let cout = channels / factor;
    let w = folded_w * factor;
    let mut out = vec![0.0f32; y_folded.len()];
    for bi in 0..b {
        for hi in 0..h {
            for wf in 0..folded_w {
                for cf in 0..channels {
                    let (f, c) = (cf / cout, cf % cout);
                    let dst = ((bi * h + hi) * w + factor * wf + f) * cout + c;
                    out[dst] = y_folded.at(&[bi, hi, wf, cf]);
                }
            }
        }
    }
    Tensor::new(vec![b, h, w, cout], out)
}

/// Outcome of [`apply_width_fold`].
#[derive(Debug, Clone)]
pub enum WidthFold {
    Applied {
        plan: FoldPlan,
        input: Tensor,
        filter: Tensor,
        bias: Tensor,
    },
    /// The untouched operands.
    Fallback {
        reason: FoldReason,
        input: Tensor,
        filter: Tensor,
        bias: Tensor,
    },
}

impl WidthFold {
    pub fn reason(&self) -> Option<FoldReason> {
        match self {
            WidthFold::Applied { .. } => None,
            WidthFold::Fallback { reason, .. } => Some(*reason),
        }
    }

    pub fn operands(&self) -> (&Tensor, &Tensor, &Tensor) {
        match self {
            WidthFold::Applied {
                input,
                filter,
                bias,
                ..
            }
            | WidthFold::Fallback {
                input,
                filter,
                bias,
                ..
            } => (input, filter, bias),
        }
    }
}

fn check_bias(bias: &Tensor, spec: &ConvSpec) -> Result<()> {
    if bias.shape() != [spec.out_channels()] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            spec.out_channels()
        )));
    }
    Ok(())
}

/// Single-channel width fold of `(x, w, b)` by a fixed factor.
///
/// Falls back (returning the operands unchanged) when `Cin != 1` or the fold
/// is illegal. Errors only if the operands do not describe a valid
/// convolution to begin with.
pub fn apply_width_fold(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: [usize; 2],
    factor: usize,
) -> Result<WidthFold> {
    let spec = ConvSpec::for_tensors(&x, &w, stride)?;
    check_bias(&b, &spec)?;
    if spec.in_channels() != 1 {
        return Ok(WidthFold::Fallback {
            reason: FoldReason::UnsupportedChannels,
            input: x,
            filter: w,
            bias: b,
        });
    }
    let plan = check_legality(&spec, FoldFactor::Fixed(factor), 1);
    match plan.status {
        FoldStatus::Fallback(reason) => Ok(WidthFold::Fallback {
            reason,
            input: x,
            filter: w,
            bias: b,
        }),
        FoldStatus::Apply => Ok(WidthFold::Applied {
            input: fold_input(&x, factor)?,
            filter: expand_filter(&w, factor)?,
            bias: replicate_bias(&b, factor)?,
            plan,
        }),
    }
}

/// Width fold for any input channel count, using the channel-interleaved
/// input map and a block-diagonal filter with `Cin x Cout` blocks.
pub fn apply_width_fold_general(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: [usize; 2],
    factor: FoldFactor,
    align: usize,
) -> Result<WidthFold> {
    let spec = ConvSpec::for_tensors(&x, &w, stride)?;
    check_bias(&b, &spec)?;
    let plan = check_legality(&spec, factor, align);
    match plan.status {
        FoldStatus::Fallback(reason) => Ok(WidthFold::Fallback {
            reason,
            input: x,
            filter: w,
            bias: b,
        }),
        FoldStatus::Apply => Ok(WidthFold::Applied {
            input: fold_input_general(&x, plan.factor)?,
            filter: expand_filter_general(&w, plan.factor)?,
            bias: replicate_bias(&b, plan.factor)?,
            plan,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refconv::{bias_add, conv2d};
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(input: [usize; 4], filter: [usize; 4]) -> ConvSpec {
        ConvSpec::new(input, filter, [1, 1]).unwrap()
    }

    fn ints(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-4i32..=4) as f32).unwrap()
    }

    fn floats(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0)).unwrap()
    }

    /// Explicit quadruple loop for the single-channel input fold.
    fn loop_fold(x: &Tensor, factor: usize) -> Tensor {
        let [b, h, w, _] = x.dims4().unwrap();
        let mut out = vec![0.0; x.len()];
        let wf = w / factor;
        for bi in 0..b {
            for hi in 0..h {
                for wp in 0..wf {
                    for f in 0..factor {
                        out[((bi * h + hi) * wf + wp) * factor + f] = x.at(&[bi, hi, factor * wp + f, 0]);
                    }
                }
            }
        }
        Tensor::new(vec![b, h, wf, factor], out).unwrap()
    }

    fn original_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: [usize; 2]) -> Tensor {
        let s = ConvSpec::for_tensors(x, w, stride).unwrap();
        bias_add(&conv2d(x, w, &s).unwrap(), b).unwrap()
    }

    fn folded_forward(fold: &WidthFold, stride: [usize; 2], factor: usize) -> Tensor {
        let (x, w, b) = fold.operands();
        let y = original_forward(x, w, b, stride);
        reconstruct_output(&y, factor).unwrap()
    }

    #[test]
    fn legality_golden_config() {
        let plan = check_legality(&spec([1, 32, 64, 1], [5, 1, 1, 1]), FoldFactor::Fixed(8), 8);
        assert_eq!(plan.status, FoldStatus::Apply);
        assert_eq!(plan.folded_input_shape, [1, 32, 8, 8]);
        assert_eq!(plan.expanded_filter_shape, [5, 1, 8, 8]);
    }

    #[test]
    fn legality_fallbacks() {
        let p = check_legality(&spec([1, 4, 7, 1], [2, 1, 1, 1]), FoldFactor::Fixed(8), 8);
        assert_eq!(p.reason(), Some(FoldReason::WidthNotDivisible));
        assert_eq!(p.folded_input_shape, [1, 4, 7, 1]);

        let p = check_legality(&spec([1, 4, 8, 1], [2, 3, 1, 1]), FoldFactor::Fixed(2), 8);
        assert_eq!(p.reason(), Some(FoldReason::KernelSpansFoldAxis));

        let strided = ConvSpec::new([1, 4, 8, 1], [2, 1, 1, 1], [1, 2]).unwrap();
        let p = check_legality(&strided, FoldFactor::Fixed(2), 8);
        assert_eq!(p.reason(), Some(FoldReason::StrideOnFoldAxis));

        // height stride is fine
        let strided = ConvSpec::new([1, 6, 8, 1], [2, 1, 1, 1], [2, 1]).unwrap();
        assert!(check_legality(&strided, FoldFactor::Fixed(2), 8).is_apply());
    }

    #[test]
    fn legality_auto_mode() {
        // RGB: smallest F with 3F % 8 == 0 is 8
        let p = check_legality(&spec([1, 8, 16, 3], [3, 1, 3, 4]), FoldFactor::Auto, 8);
        assert_eq!((p.status, p.factor), (FoldStatus::Apply, 8));
        assert_eq!(p.folded_input_shape, [1, 8, 2, 24]);

        // Cin = 2 needs F = 4; W = 12 allows it
        let p = check_legality(&spec([1, 4, 12, 2], [1, 1, 2, 1]), FoldFactor::Auto, 8);
        assert_eq!(p.factor, 4);

        // Cin = 4, W = 6: F = 2 divides 6
        let p = check_legality(&spec([1, 4, 6, 4], [1, 1, 4, 1]), FoldFactor::Auto, 8);
        assert_eq!((p.status, p.factor), (FoldStatus::Apply, 2));

        // Cin = 1, W = 12: F = 8 does not divide, no multiple of 8 <= 12 either
        let p = check_legality(&spec([1, 4, 12, 1], [1, 1, 1, 1]), FoldFactor::Auto, 8);
        assert_eq!(p.reason(), Some(FoldReason::WidthNotDivisible));

        // Cin = 1, W = 16 with align 4: F = 4
        let p = check_legality(&spec([1, 4, 16, 1], [1, 1, 1, 1]), FoldFactor::Auto, 4);
        assert_eq!(p.factor, 4);

        // Cin = 2, align 16: F0 = 8, W = 24 -> 8 divides 24
        let p = check_legality(&spec([1, 2, 24, 2], [1, 1, 2, 1]), FoldFactor::Auto, 16);
        assert_eq!(p.factor, 8);

        // Cin = 1, align 4, W = 12: 4 divides 12
        let p = check_legality(&spec([1, 2, 12, 1], [1, 1, 1, 1]), FoldFactor::Auto, 4);
        assert_eq!(p.factor, 4);

        let p = check_legality(&spec([1, 4, 4, 1], [1, 1, 1, 1]), FoldFactor::Auto, 8);
        assert_eq!(p.reason(), Some(FoldReason::FactorTooLarge));

        let p = check_legality(&spec([1, 4, 4, 16], [1, 1, 16, 1]), FoldFactor::Auto, 8);
        assert_eq!(p.reason(), Some(FoldReason::AlreadyAligned));

        // fixed mode never reports AlreadyAligned
        let p = check_legality(&spec([1, 4, 4, 16], [1, 1, 16, 1]), FoldFactor::Fixed(2), 8);
        assert!(p.is_apply());
    }

    #[test]
    fn auto_factor_is_smallest_legal_aligning_choice() {
        for cin in 1..=12 {
            for w in 1..=40 {
                let s = spec([1, 1, w, cin], [1, 1, cin, 1]);
                let plan = check_legality(&s, FoldFactor::Auto, 8);
                let brute = (1..=w).find(|f| w % f == 0 && (cin * f) % 8 == 0);
                if cin % 8 == 0 {
                    assert_eq!(plan.reason(), Some(FoldReason::AlreadyAligned));
                } else {
                    assert_eq!(plan.is_apply().then_some(plan.factor), brute, "cin={cin} w={w}");
                }
            }
        }
    }

    #[test]
    fn factor_parsing() {
        assert_eq!("auto".parse::<FoldFactor>().unwrap(), FoldFactor::Auto);
        assert_eq!("8".parse::<FoldFactor>().unwrap(), FoldFactor::Fixed(8));
        assert!("0".parse::<FoldFactor>().is_err());
        assert!("x".parse::<FoldFactor>().is_err());
    }

    #[test]
    fn fold_input_small_case() {
        let x = Tensor::new(vec![1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = fold_input(&x, 2).unwrap();
        assert_eq!(f.shape(), &[1, 1, 2, 2]);
        assert_eq!([f.at(&[0, 0, 0, 0]), f.at(&[0, 0, 0, 1])], [1.0, 2.0]);
        assert_eq!([f.at(&[0, 0, 1, 0]), f.at(&[0, 0, 1, 1])], [3.0, 4.0]);
        assert!(f.bitwise_eq(&loop_fold(&x, 2)));
    }

    #[test]
    fn fold_input_identity_and_golden() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = floats(&[2, 3, 5, 1], &mut rng);
        assert!(fold_input(&x, 1).unwrap().bitwise_eq(&x));

        let x = floats(&[1, 32, 64, 1], &mut rng);
        let f = fold_input(&x, 8).unwrap();
        assert_eq!(f.shape(), &[1, 32, 8, 8]);
        assert!(f.bitwise_eq(&x.reshape(&[1, 32, 8, 8]).unwrap()));
        assert!(f.bitwise_eq(&loop_fold(&x, 8)));
    }

    #[test]
    fn fold_input_preconditions() {
        let x = Tensor::zeros(vec![1, 2, 6, 1]).unwrap();
        assert!(matches!(fold_input(&x, 4), Err(Error::IllegalFold(_))));
        let x = Tensor::zeros(vec![1, 2, 4, 2]).unwrap();
        assert!(matches!(fold_input(&x, 2), Err(Error::IllegalFold(_))));
        assert!(matches!(fold_input_general(&x, 3), Err(Error::IllegalFold(_))));
        assert!(matches!(fold_input_general(&x, 0), Err(Error::IllegalFold(_))));
    }

    #[test]
    fn fold_input_general_channel_order() {
        // (w=0) = [p, q], (w=1) = [r, s]
        let x = Tensor::new(vec![1, 1, 2, 2], vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let f = fold_input_general(&x, 2).unwrap();
        assert_eq!(f.shape(), &[1, 1, 1, 4]);
        assert_eq!(f.data(), &[10.0, 11.0, 20.0, 21.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = floats(&[2, 3, 8, 1], &mut rng);
        assert!(fold_input_general(&x, 4).unwrap().bitwise_eq(&fold_input(&x, 4).unwrap()));
    }

    #[test]
    fn expand_filter_golden_shape_and_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = floats(&[5, 1, 1, 1], &mut rng);
        let e = expand_filter(&w, 8).unwrap();
        assert_eq!(e.shape(), &[5, 1, 8, 8]);
        for k in 0..5 {
            for f in 0..8 {
                for g in 0..8 {
                    let v = e.at(&[k, 0, f, g]);
                    if f == g {
                        assert_eq!(v.to_bits(), w.at(&[k, 0, 0, 0]).to_bits());
                    } else {
                        assert_eq!(v.to_bits(), 0.0f32.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn expand_filter_two_outputs() {
        let w = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let e = expand_filter(&w, 2).unwrap();
        assert_eq!(e.shape(), &[1, 1, 2, 4]);
        assert_eq!(e.data(), &[3.0, 5.0, 0.0, 0.0, 0.0, 0.0, 3.0, 5.0]);
        assert!(expand_filter(&w, 1).unwrap().bitwise_eq(&w));
    }

    #[test]
    fn expand_filter_rejects_wide_kernels() {
        let w = Tensor::zeros(vec![2, 2, 1, 1]).unwrap();
        assert!(matches!(expand_filter(&w, 2), Err(Error::IllegalFold(_))));
        let w = Tensor::zeros(vec![2, 1, 2, 1]).unwrap();
        assert!(matches!(expand_filter(&w, 2), Err(Error::IllegalFold(_))));
    }

    #[test]
    fn expand_general_matches_single_channel_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in [1, 2, 3, 8] {
            let w = floats(&[3, 1, 1, 2], &mut rng);
            assert!(expand_filter_general(&w, f).unwrap().bitwise_eq(&expand_filter(&w, f).unwrap()));
        }
    }

    #[test]
    fn bias_replication() {
        let b = Tensor::new(vec![1], vec![3.5]).unwrap();
        assert_eq!(replicate_bias(&b, 8).unwrap().data(), &[3.5; 8]);
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(replicate_bias(&b, 1).unwrap().bitwise_eq(&b));
        assert_eq!(replicate_bias(&b, 3).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(replicate_bias(&Tensor::zeros(vec![1, 2]).unwrap(), 2).is_err());
    }

    #[test]
    fn reconstruct_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = floats(&[1, 28, 8, 8], &mut rng);
        let r = reconstruct_output(&y, 8).unwrap();
        assert_eq!(r.shape(), &[1, 28, 64, 1]);
        assert!(r.bitwise_eq(&y.reshape(&[1, 28, 64, 1]).unwrap()));
        assert!(reconstruct_output(&y, 1).unwrap().bitwise_eq(&y));
        assert!(reconstruct_output(&floats(&[1, 2, 2, 3], &mut rng), 2).is_err());
    }

    #[test]
    fn golden_pipeline_float_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = floats(&[1, 32, 64, 1], &mut rng);
        let w = floats(&[5, 1, 1, 1], &mut rng);
        let b = floats(&[1], &mut rng);
        let expect = original_forward(&x, &w, &b, [1, 1]);
        let fold = apply_width_fold(x, w, b, [1, 1], 8).unwrap();
        assert!(matches!(fold, WidthFold::Applied { .. }));
        let got = folded_forward(&fold, [1, 1], 8);
        assert!(max_abs_diff(&got, &expect).unwrap() <= 1e-5);
        assert!(got.bitwise_eq(&expect));
    }

    #[test]
    fn zero_input_gives_bias_everywhere() {
        let x = Tensor::zeros(vec![1, 6, 8, 1]).unwrap();
        let w = Tensor::new(vec![3, 1, 1, 2], vec![1.0, -2.0, 3.0, 0.5, -1.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, -7.0]).unwrap();
        let expect = original_forward(&x, &w, &b, [1, 1]);
        let fold = apply_width_fold(x, w, b, [1, 1], 4).unwrap();
        let got = folded_forward(&fold, [1, 1], 4);
        assert!(got.bitwise_eq(&expect));
        assert!(got.data().chunks(2).all(|c| c == [0.25, -7.0]));
    }

    #[test]
    fn fallbacks_return_inputs_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        #[allow(clippy::type_complexity)]
        let cases: [([usize; 4], [usize; 4], [usize; 2], usize, FoldReason); 4] = [
            ([1, 4, 7, 1], [2, 1, 1, 1], [1, 1], 8, FoldReason::WidthNotDivisible),
            ([1, 4, 8, 1], [2, 3, 1, 1], [1, 1], 2, FoldReason::KernelSpansFoldAxis),
            ([1, 4, 8, 1], [2, 1, 1, 1], [1, 2], 2, FoldReason::StrideOnFoldAxis),
            ([1, 4, 8, 3], [2, 1, 3, 1], [1, 1], 2, FoldReason::UnsupportedChannels),
        ];
        for (xs, ws, stride, factor, reason) in cases {
            let x = floats(&xs, &mut rng);
            let w = floats(&ws, &mut rng);
            let b = floats(&[ws[3]], &mut rng);
            let fold = apply_width_fold(x.clone(), w.clone(), b.clone(), stride, factor).unwrap();
            assert_eq!(fold.reason(), Some(reason));
            let (xo, wo, bo) = fold.operands();
            assert!(xo.bitwise_eq(&x) && wo.bitwise_eq(&w) && bo.bitwise_eq(&b));
        }
    }

    #[test]
    fn malformed_operands_are_errors() {
        let x = Tensor::zeros(vec![1, 4, 8, 1]).unwrap();
        let w = Tensor::zeros(vec![2, 1, 1, 2]).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        assert!(apply_width_fold(x, w, b, [1, 1], 2).is_err());
    }

    #[test]
    fn sweep_integer_data_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for factor in [2, 4, 8] {
            for k in 1..=3 {
                for h in k..=8 {
                    for width in [factor, 2 * factor] {
                        let x = ints(&[1, h, width, 1], &mut rng);
                        let w = ints(&[k, 1, 1, 1], &mut rng);
                        let b = ints(&[1], &mut rng);
                        let expect = original_forward(&x, &w, &b, [1, 1]);
                        let fold = apply_width_fold(x, w, b, [1, 1], factor).unwrap();
                        let WidthFold::Applied { plan, .. } = &fold else {
                            panic!("expected apply")
                        };
                        let folded_out = plan.folded_spec().output_shape();
                        assert_eq!(folded_out[2], width / factor);
                        assert_eq!(folded_out[3], factor);
                        assert!(folded_forward(&fold, [1, 1], factor).bitwise_eq(&expect));
                    }
                }
            }
        }
    }

    #[test]
    fn general_fold_multi_channel_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (cin, cout, factor) in [(3, 4, 8), (2, 1, 4), (5, 3, 2), (3, 2, 1)] {
            let width = 2 * factor;
            let x = floats(&[2, 7, width, cin], &mut rng);
            let w = floats(&[3, 1, cin, cout], &mut rng);
            let b = floats(&[cout], &mut rng);
            let expect = original_forward(&x, &w, &b, [2, 1]);
            let fold = apply_width_fold_general(x, w, b, [2, 1], FoldFactor::Fixed(factor), 8).unwrap();
            assert!(fold.reason().is_none());
            let got = folded_forward(&fold, [2, 1], factor);
            assert!(max_abs_diff(&got, &expect).unwrap() <= 1e-5);
            assert!(got.bitwise_eq(&expect));
        }
    }

    proptest! {
        #[test]
        fn unfold_inverts_general_fold(
            b in 1usize..3, h in 1usize..5, wf in 1usize..5, f in 1usize..5, cin in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(vec![b, h, wf * f, cin], |_| f32::from_bits(rng.gen())).unwrap();
            let folded = fold_input_general(&x, f).unwrap();
            prop_assert!(folded.bitwise_eq(&x.reshape(folded.shape()).unwrap()));
            prop_assert!(unfold_input_general(&folded, f).unwrap().bitwise_eq(&x));
        }

        #[test]
        fn reconstruct_inverts_output_fold(
            h in 1usize..5, wf in 1usize..5, f in 1usize..5, cout in 1usize..4, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Tensor::from_fn(vec![1, h, wf * f, cout], |_| f32::from_bits(rng.gen())).unwrap();
            let folded = fold_input_general(&y, f).unwrap();
            prop_assert!(reconstruct_output(&folded, f).unwrap().bitwise_eq(&y));
        }

        #[test]
        fn expanded_filter_is_block_diagonal(
            kh in 1usize..4, kw in 1usize..3, cin in 1usize..4, cout in 1usize..4, f in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // nonzero entries only so nnz is predictable
            let w = Tensor::from_fn(vec![kh, kw, cin, cout], |_| rng.gen_range(0.5f32..2.0)).unwrap();
            let e = expand_filter_general(&w, f).unwrap();
            prop_assert_eq!(e.count_nonzero(), f * w.len());
            for i in 0..kh { for j in 0..kw { for r in 0..f * cin { for c in 0..f * cout {
                let v = e.at(&[i, j, r, c]);
                if r / cin == c / cout {
                    prop_assert_eq!(v, w.at(&[i, j, r % cin, c % cout]));
                } else {
                    prop_assert_eq!(v.to_bits(), 0);
                }
            }}}}
        }
    }
}
