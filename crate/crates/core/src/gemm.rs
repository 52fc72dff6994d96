//! Matrix multiplication expressed as a 1x1 convolution, and width folding
//! of tall-skinny products through a synthetic width axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fold::{aligning_factor, expand_filter_general, reconstruct_output};
use crate::refconv::{conv2d, ConvSpec};
use crate::tensor::Tensor;

/// `C (M x N) = A (M x K) * B (K x N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmSpec {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmSpec {
    pub fn for_tensors(a: &Tensor, b: &Tensor) -> Result<Self> {
        let [m, k] = a.dims2()?;
        let [kb, n] = b.dims2()?;
        if k != kb {
            return Err(Error::ShapeMismatch(format!(
                "inner extents differ: A is {m}x{k}, B is {kb}x{n}"
            )));
        }
        Ok(Self { m, k, n })
    }

    pub fn output_shape(&self) -> [usize; 2] {
        [self.m, self.n]
    }

    /// The 1x1 convolution computing this product: `H = M`, `W = 1`, `Cin = K`, `Cout = N`.
    pub fn as_conv(&self) -> ConvSpec {
        ConvSpec {
            input: [1, self.m, 1, self.k],
            filter: [1, 1, self.k, self.n],
            stride: [1, 1],
        }
    }
}

/// Triple loop, `k` innermost and ascending, accumulating from `+0.0`.
pub fn gemm_ref(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let GemmSpec { m, k, n } = GemmSpec::for_tensors(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * n + j];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `A * B` computed by [`conv2d`] on `A` viewed as `(1, M, 1, K)` and `B` as `(1, 1, K, N)`.
pub fn gemm_as_conv1x1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let spec = GemmSpec::for_tensors(a, b)?;
    let conv = spec.as_conv();
    let y = conv2d(&a.reshape(&conv.input)?, &b.reshape(&conv.filter)?, &conv)?;
    y.into_reshape(&spec.output_shape())
}

/// Shapes of a folded tall-skinny product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallSkinnyFold {
    pub factor: usize,
    /// `(1, M / F, 1, K * F)`
    pub folded_input_shape: [usize; 4],
    /// `(1, 1, K * F, F * N)`
    pub expanded_filter_shape: [usize; 4],
    pub folded_channels: usize,
    /// `K * F` is a multiple of the alignment.
    pub aligned: bool,
}

/// Plans folding the synthetic width of `spec` by `factor`.
///
/// `A` is reinterpreted as `H = M / F` rows of `W = F` positions with `K`
/// channels each; folding that width gives `K * F` channels.
pub fn plan_tall_skinny(spec: &GemmSpec, factor: usize, align: usize) -> Result<TallSkinnyFold> {
    if factor == 0 {
        return Err(Error::IllegalFold("folding factor must be at least 1".into()));
    }
    if !spec.m.is_multiple_of(factor) {
        return Err(Error::IllegalFold(format!(
            "M = {} is not divisible by {factor}",
            spec.m
        )));
    }
    let folded_channels = spec.k * factor;
    Ok(TallSkinnyFold {
        factor,
        folded_input_shape: [1, spec.m / factor, 1, folded_channels],
        expanded_filter_shape: [1, 1, folded_channels, factor * spec.n],
        folded_channels,
        aligned: folded_channels.is_multiple_of(align.max(1)),
    })
}

/// Smallest factor aligning `K`, if it divides `M`.
pub fn auto_tall_skinny_factor(spec: &GemmSpec, align: usize) -> Option<usize> {
    let f = aligning_factor(spec.k, align.max(1));
    spec.m.is_multiple_of(f).then_some(f)
}

/// `A * B` through a width-folded 1x1 convolution.
///
/// `A` is viewed as `(1, M / F, F, K)` and folded to `(1, M / F, 1, K * F)`;
/// `B` becomes a block-diagonal `(1, 1, K * F, F * N)` kernel. The folded
/// output `(1, M / F, 1, F * N)` is reconstructed to `(1, M / F, F, N)`,
/// i.e. `M x N`.
pub fn fold_tall_skinny(a: &Tensor, b: &Tensor, factor: usize) -> Result<Tensor> {
    let spec = GemmSpec::for_tensors(a, b)?;
    let plan = plan_tall_skinny(&spec, factor, 1)?;
    let rows = spec.m / factor;

    let x = a.reshape(&[1, rows, factor, spec.k])?;
    let x_f = crate::fold::fold_input_general(&x, factor)?;
    debug_assert_eq!(x_f.shape(), plan.folded_input_shape);
    let w_f = expand_filter_general(&b.reshape(&[1, 1, spec.k, spec.n])?, factor)?;
    let conv = ConvSpec::new(plan.folded_input_shape, plan.expanded_filter_shape, [1, 1])?;
    let y = conv2d(&x_f, &w_f, &conv)?;
    reconstruct_output(&y, factor)?.into_reshape(&spec.output_shape())
}
