use std::collections::{BTreeMap, HashMap};

use super::{infer_shapes, FoldAttr, Graph, Lowering, Op};
use crate::blockdiag::{grouped_conv, BlockDiagFilter};
use crate::error::{Error, Result};
use crate::gemm::gemm_ref;
use crate::refconv::{bias_add, conv2d, ConvSpec};
use crate::tensor::Tensor;

/// Interpreter settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Execution {
    /// Run every folded convolution with this lowering instead of its own.
    pub lowering: Option<Lowering>,
    /// Run folded convolutions both ways and fail unless they agree bitwise.
    pub cross_check: bool,
}

/// Evaluates `g` with its recorded lowerings.
pub fn interpret(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    interpret_with(g, inputs, Execution::default())
}

/// Evaluates `g` and returns the value of every `output` node.
pub fn interpret_with(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    exec: Execution,
) -> Result<BTreeMap<String, Tensor>> {
    infer_shapes(g)?;
    let mut values: HashMap<&str, Tensor> = HashMap::new();
    let mut outputs = BTreeMap::new();
    for node in g.nodes() {
        let arg = |i: usize| -> &Tensor { &values[node.inputs[i].as_str()] };
        let value = match &node.op {
            Op::Input { shape } => {
                let t = inputs
                    .get(&node.id)
                    .ok_or_else(|| Error::MissingInput(node.id.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape_inference(
                        &node.id,
                        format!("bound tensor has shape {:?}, expected {shape:?}", t.shape()),
                    ));
                }
                t.clone()
            }
            Op::Constant { weight } => g.weights()[weight].clone(),
            Op::Conv2d { stride, fold } => {
                let (x, w) = (arg(0), arg(1));
                match fold {
                    None => conv2d(x, w, &ConvSpec::for_tensors(x, w, *stride)?)?,
                    Some(attr) => folded_conv(&node.id, x, w, *stride, *attr, exec)?,
                }
            }
            Op::Matmul => gemm_ref(arg(0), arg(1))?,
            Op::BiasAdd => bias_add(arg(0), arg(1))?,
            Op::Reshape { shape } => arg(0).reshape(shape)?,
            Op::Output => {
                outputs.insert(node.id.clone(), arg(0).clone());
                continue;
            }
        };
        values.insert(node.id.as_str(), value);
    }
    Ok(outputs)
}

fn folded_conv(
    id: &str,
    x: &Tensor,
    w: &Tensor,
    stride: [usize; 2],
    attr: FoldAttr,
    exec: Execution,
) -> Result<Tensor> {
    let dense = || conv2d(x, w, &ConvSpec::for_tensors(x, w, stride)?);
    let grouped = || grouped_conv(x, &BlockDiagFilter::from_expanded(w, attr.factor)?, stride);
    if exec.cross_check {
        let (d, g) = (dense()?, grouped()?);
        if !d.bitwise_eq(&g) {
            return Err(Error::LoweringMismatch(id.to_string()));
        }
        return Ok(d);
    }
    match exec.lowering.unwrap_or(attr.lowering) {
        Lowering::Dense => dense(),
        Lowering::Grouped => grouped(),
    }
}
