//! Direct NHWC convolution, bias add and MAC accounting.
//!
//! Every output element is accumulated from `+0.0` in the fixed order
//! `kh` (outer), `kw` (middle), `cin` (inner), then written once. Later
//! modules rely on this order for their bitwise-equality guarantees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A VALID-padded 2-D convolution over NHWC activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    /// `[B, H, W, Cin]`
    pub input: [usize; 4],
    /// `[KH, KW, Cin, Cout]`
    pub filter: [usize; 4],
    /// `[sH, sW]`
    pub stride: [usize; 2],
}

impl ConvSpec {
    pub fn new(input: [usize; 4], filter: [usize; 4], stride: [usize; 2]) -> Result<Self> {
        let spec = Self {
            input,
            filter,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn for_tensors(x: &Tensor, w: &Tensor, stride: [usize; 2]) -> Result<Self> {
        Self::new(x.dims4()?, w.dims4()?, stride)
    }

    fn validate(&self) -> Result<()> {
        let [b, h, w, cin] = self.input;
        let [kh, kw, fcin, cout] = self.filter;
        if [b, h, w, cin, kh, kw, fcin, cout].contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in input {:?} or filter {:?}",
                self.input, self.filter
            )));
        }
        if self.stride.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "stride {:?} must be positive",
                self.stride
            )));
        }
        if fcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "filter expects {fcin} input channels, input has {cin}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::DegenerateOutput {
                input: self.input,
                filter: self.filter,
                stride: self.stride,
            });
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.input[0]
    }

    pub fn in_channels(&self) -> usize {
        self.input[3]
    }

    pub fn out_channels(&self) -> usize {
        self.filter[3]
    }

    pub fn out_height(&self) -> usize {
        (self.input[1] - self.filter[0]) / self.stride[0] + 1
    }

    pub fn out_width(&self) -> usize {
        (self.input[2] - self.filter[1]) / self.stride[1] + 1
    }

    /// `[B, H_out, W_out, Cout]`
    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch(),
            self.out_height(),
            self.out_width(),
            self.out_channels(),
        ]
    }
}

/// Number of multiply-accumulates performed by a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MacCount(pub u64);

impl std::ops::Add for MacCount {
    type Output = MacCount;
    fn add(self, rhs: MacCount) -> MacCount {
        MacCount(self.0 + rhs.0)
    }
}

impl std::iter::Sum for MacCount {
    fn sum<I: Iterator<Item = MacCount>>(iter: I) -> MacCount {
        iter.fold(MacCount(0), |a, b| a + b)
    }
}

/// `B * H_out * W_out * Cout * KH * KW * Cin` for a dense convolution.
pub fn count_macs(spec: &ConvSpec) -> MacCount {
    let [kh, kw, cin, _] = spec.filter;
    let [b, ho, wo, cout] = spec.output_shape();
    MacCount([b, ho, wo, cout, kh, kw, cin].iter().map(|&v| v as u64).product())
}

fn check_operands(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<()> {
    if x.shape() != spec.input {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?} does not match spec {:?}",
            x.shape(),
            spec.input
        )));
    }
    if w.shape() != spec.filter {
        return Err(Error::ShapeMismatch(format!(
            "filter shape {:?} does not match spec {:?}",
            w.shape(),
            spec.filter
        )));
    }
    spec.validate()
}

/// Direct VALID convolution `x (NHWC) * w (KH,KW,Cin,Cout)`.
pub fn conv2d(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    check_operands(x, w, spec)?;
    Ok(conv2d_kernel::<false>(x, w, spec).0)
}

/// [`conv2d`] that also counts the inner-loop multiply-accumulates it executes.
pub fn conv2d_instrumented(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<(Tensor, MacCount)> {
    check_operands(x, w, spec)?;
    let (y, macs) = conv2d_kernel::<true>(x, w, spec);
    Ok((y, MacCount(macs)))
}

fn conv2d_kernel<const COUNT: bool>(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> (Tensor, u64) {
    let [_, h, wd, cin] = spec.input;
    let [kh, kw, _, cout] = spec.filter;
    let [sh, sw] = spec.stride;
    let out_shape = spec.output_shape();
    let [b, ho, wo, _] = out_shape;
    let (xd, wdata) = (x.data(), w.data());

    let mut out = Vec::with_capacity(out_shape.iter().product());
    let mut macs = 0u64;
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0f32;
                    for i in 0..kh {
                        let row = (bi * h + oh * sh + i) * wd;
                        for j in 0..kw {
                            let xbase = (row + ow * sw + j) * cin;
                            let wbase = (i * kw + j) * cin * cout + co;
                            for c in 0..cin {
                                acc += xd[xbase + c] * wdata[wbase + c * cout];
                                if COUNT {
                                    macs += 1;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    let y = Tensor::new(out_shape.to_vec(), out).expect("output shape is consistent");
    (y, macs)
}

/// Adds `b[c]` to every element whose last coordinate is `c`.
pub fn bias_add(y: &Tensor, b: &Tensor) -> Result<Tensor> {
    let channels = *y.shape().last().unwrap_or(&1);
    if b.rank() != 1 || b.len() != channels {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {channels} output channels",
            b.shape()
        )));
    }
    let bias = b.data();
    let data = y
        .data()
        .chunks_exact(channels)
        .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Height-only 1-D convolution of an `H x W x 1` tensor with a length-`K`
/// kernel plus scalar bias: `Y(h, w) = sum_k w(k) X(h + k, w) + b`.
///
/// Returns an `H' x W x 1` tensor, `H' = H - K + 1`.
pub fn conv1d_h(x: &Tensor, w: &Tensor, bias: f32) -> Result<Tensor> {
    let (h, wd) = match *x.shape() {
        [h, wd, 1] => (h, wd),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "expected an H x W x 1 input, got {:?}",
                x.shape()
            )))
        }
    };
    if w.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 1-D kernel, got {:?}",
            w.shape()
        )));
    }
    let k = w.len();
    if k > h {
        return Err(Error::ShapeMismatch(format!(
            "kernel length {k} exceeds height {h}"
        )));
    }
    let spec = ConvSpec::new([1, h, wd, 1], [k, 1, 1, 1], [1, 1])?;
    let y = conv2d(&x.reshape(&spec.input)?, &w.reshape(&spec.filter)?, &spec)?;
    let y = bias_add(&y, &Tensor::new(vec![1], vec![bias])?)?;
    y.into_reshape(&[spec.out_height(), wd, 1])
}
