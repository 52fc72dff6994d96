//! Block-diagonal filter storage and grouped execution of folded convolutions.
//!
//! An expanded filter of logical shape `(KH, KW, F * Cin_b, F * Cout_b)` is
//! zero outside its `F` diagonal blocks. [`BlockDiagFilter`] keeps only the
//! blocks, and [`grouped_conv`] runs each block as an independent group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fold::FoldPlan;
use crate::refconv::{count_macs, ConvSpec, MacCount};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Blocks {
    /// Every diagonal block is bitwise identical.
    Shared(Tensor),
    PerBlock(Vec<Tensor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagFilter {
    num_blocks: usize,
    blocks: Blocks,
    /// `[KH, KW, Cin_b, Cout_b]`
    block_shape: [usize; 4],
}

impl BlockDiagFilter {
    /// `F` copies of `block` along the diagonal.
    pub fn shared(block: Tensor, num_blocks: usize) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::ShapeMismatch("block count must be at least 1".into()));
        }
        let block_shape = block.dims4()?;
        Ok(Self {
            num_blocks,
            blocks: Blocks::Shared(block),
            block_shape,
        })
    }

    /// Distinct diagonal blocks of a common shape.
    pub fn per_block(blocks: Vec<Tensor>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::ShapeMismatch("block count must be at least 1".into()));
        };
        let block_shape = first.dims4()?;
        if blocks.iter().any(|b| b.shape() != block_shape) {
            return Err(Error::ShapeMismatch("diagonal blocks differ in shape".into()));
        }
        Ok(Self {
            num_blocks: blocks.len(),
            blocks: Blocks::PerBlock(blocks),
            block_shape,
        })
    }

    /// Extracts the diagonal blocks of `w_f`, rejecting any off-diagonal
    /// entry that is not exactly `0.0` or `-0.0`.
    pub fn from_expanded(w_f: &Tensor, num_blocks: usize) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::ShapeMismatch("block count must be at least 1".into()));
        }
        let [kh, kw, rows, cols] = w_f.dims4()?;
        if rows % num_blocks != 0 || cols % num_blocks != 0 {
            return Err(Error::ShapeMismatch(format!(
                "filter {:?} does not split into {num_blocks} diagonal blocks",
                w_f.shape()
            )));
        }
        let (cin, cout) = (rows / num_blocks, cols / num_blocks);
        let data = w_f.data();
        let mut blocks = vec![Vec::with_capacity(kh * kw * cin * cout); num_blocks];
        for tap in 0..kh * kw {
            for r in 0..rows {
                for c in 0..cols {
                    let v = data[(tap * rows + r) * cols + c];
                    let (g_in, g_out) = (r / cin, c / cout);
                    if g_in == g_out {
                        blocks[g_in].push(v);
                    } else if v != 0.0 {
                        return Err(Error::NotBlockDiagonal {
                            index: [tap / kw, tap % kw, r, c],
                            value: v,
                        });
                    }
                }
            }
        }
        let block_shape = [kh, kw, cin, cout];
        let blocks: Vec<Tensor> = blocks
            .into_iter()
            .map(|d| Tensor::new(block_shape.to_vec(), d))
            .collect::<Result<_>>()?;
        let all_same = blocks.windows(2).all(|p| p[0].bitwise_eq(&p[1]));
        let blocks = if all_same {
            Blocks::Shared(blocks.into_iter().next().expect("at least one block"))
        } else {
            Blocks::PerBlock(blocks)
        };
        Ok(Self {
            num_blocks,
            blocks,
            block_shape,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_shape(&self) -> [usize; 4] {
        self.block_shape
    }

    pub fn blocks(&self) -> &Blocks {
        &self.blocks
    }

    pub fn block(&self, g: usize) -> &Tensor {
        match &self.blocks {
            Blocks::Shared(b) => b,
            Blocks::PerBlock(bs) => &bs[g],
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.blocks, Blocks::Shared(_))
    }

    /// `[KH, KW, F * Cin_b, F * Cout_b]`
    pub fn logical_shape(&self) -> [usize; 4] {
        let [kh, kw, cin, cout] = self.block_shape;
        [kh, kw, self.num_blocks * cin, self.num_blocks * cout]
    }

    /// Floats held in memory.
    pub fn stored_floats(&self) -> usize {
        let block: usize = self.block_shape.iter().product();
        match &self.blocks {
            Blocks::Shared(_) => block,
            Blocks::PerBlock(bs) => block * bs.len(),
        }
    }

    /// Floats needed by a representation keeping each diagonal block once,
    /// i.e. `F * block size` (versus `F^2 * block size` for the dense form).
    pub fn block_floats(&self) -> usize {
        self.num_blocks * self.block_shape.iter().product::<usize>()
    }

    pub fn densify(&self) -> Tensor {
        let [kh, kw, cin, cout] = self.block_shape;
        let [_, _, rows, cols] = self.logical_shape();
        let mut out = vec![0.0f32; kh * kw * rows * cols];
        for g in 0..self.num_blocks {
            let block = self.block(g).data();
            for tap in 0..kh * kw {
                for c in 0..cin {
                    let src = (tap * cin + c) * cout;
                    let dst = (tap * rows + g * cin + c) * cols + g * cout;
                    out[dst..dst + cout].copy_from_slice(&block[src..src + cout]);
                }
            }
        }
        Tensor::new(self.logical_shape().to_vec(), out).expect("logical shape is consistent")
    }
}

/// Folded convolution executed as `F` independent groups.
///
/// Group `g` reads input channels `g * Cin_b..(g + 1) * Cin_b` and writes
/// output channels `g * Cout_b..(g + 1) * Cout_b`. With finite inputs the
/// result is bitwise equal to `conv2d(x_f, bd.densify())`: the skipped terms
/// are products with `0.0`, and an accumulator that starts at `+0.0` is
/// never `-0.0`, so adding them changes nothing.
pub fn grouped_conv(x_f: &Tensor, bd: &BlockDiagFilter, stride: [usize; 2]) -> Result<Tensor> {
    let spec = grouped_spec(x_f, bd, stride)?;
    Ok(grouped_kernel::<false>(x_f, bd, &spec).0)
}

/// [`grouped_conv`] together with the number of multiply-accumulates executed.
pub fn grouped_conv_instrumented(
    x_f: &Tensor,
    bd: &BlockDiagFilter,
    stride: [usize; 2],
) -> Result<(Tensor, MacCount)> {
    let spec = grouped_spec(x_f, bd, stride)?;
    let (y, macs) = grouped_kernel::<true>(x_f, bd, &spec);
    Ok((y, MacCount(macs)))
}

fn grouped_spec(x_f: &Tensor, bd: &BlockDiagFilter, stride: [usize; 2]) -> Result<ConvSpec> {
    let input = x_f.dims4()?;
    let logical = bd.logical_shape();
    if input[3] != logical[2] {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, block-diagonal filter expects {}",
            input[3], logical[2]
        )));
    }
    ConvSpec::new(input, logical, stride)
}

fn grouped_kernel<const COUNT: bool>(
    x: &Tensor,
    bd: &BlockDiagFilter,
    spec: &ConvSpec,
) -> (Tensor, u64) {
    let [_, h, wd, channels] = spec.input;
    let [kh, kw, cin, cout] = bd.block_shape();
    let [sh, sw] = spec.stride;
    let out_shape = spec.output_shape();
    let [b, ho, wo, cols] = out_shape;
    let xd = x.data();

    let mut out = vec![0.0f32; out_shape.iter().product()];
    let mut macs = 0u64;
    for g in 0..bd.num_blocks() {
        let wdata = bd.block(g).data();
        for bi in 0..b {
            for oh in 0..ho {
                for ow in 0..wo {
                    let obase = ((bi * ho + oh) * wo + ow) * cols + g * cout;
                    for co in 0..cout {
                        let mut acc = 0.0f32;
                        for i in 0..kh {
                            let row = (bi * h + oh * sh + i) * wd;
                            for j in 0..kw {
                                let xbase = (row + ow * sw + j) * channels + g * cin;
                                let wbase = (i * kw + j) * cin * cout + co;
                                for c in 0..cin {
                                    acc += xd[xbase + c] * wdata[wbase + c * cout];
                                    if COUNT {
                                        macs += 1;
                                    }
                                }
                            }
                        }
                        out[obase + co] = acc;
                    }
                }
            }
        }
    }
    let y = Tensor::new(out_shape.to_vec(), out).expect("output shape is consistent");
    (y, macs)
}

/// MAC totals for one convolution under each execution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub original: MacCount,
    pub dense_folded: MacCount,
    pub grouped_folded: MacCount,
    /// Original convolution with `Cin` zero-padded up to the alignment.
    pub zero_padded: MacCount,
}

/// MAC accounting for `plan`. A fallback plan is treated as `F = 1`.
pub fn mac_report(plan: &FoldPlan, align: usize) -> MacReport {
    let spec = &plan.original;
    let original = count_macs(spec);
    let factor = if plan.is_apply() { plan.factor } else { 1 };
    let dense_folded = if plan.is_apply() {
        count_macs(&plan.folded_spec())
    } else {
        original
    };
    let cin = spec.in_channels();
    let padded_cin = cin.div_ceil(align.max(1)) * align.max(1);
    let mut padded = *spec;
    padded.input[3] = padded_cin;
    padded.filter[2] = padded_cin;
    debug_assert_eq!(dense_folded.0, factor as u64 * original.0);
    MacReport {
        original,
        dense_folded,
        grouped_folded: original,
        zero_padded: count_macs(&padded),
    }
}
