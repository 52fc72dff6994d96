//! Seeded model and input generators for tests, demos and `widthfold verify`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ir::{Graph, GraphBuilder};
use crate::tensor::Tensor;

/// How generated values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Values {
    /// Integers in `-4..=4`. Sums of their products are exact in `f32`.
    SmallIntegers,
    /// Uniform in `[-1, 1)`.
    Uniform,
}

pub fn random_tensor(shape: &[usize], values: Values, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| match values {
        Values::SmallIntegers => rng.gen_range(-4i32..=4) as f32,
        Values::Uniform => rng.gen_range(-1.0f32..1.0),
    })
    .expect("generator shapes are valid")
}

/// One tensor for every graph input.
pub fn random_inputs(g: &Graph, values: Values, rng: &mut impl Rng) -> BTreeMap<String, Tensor> {
    g.inputs()
        .into_iter()
        .map(|(id, shape)| (id.to_string(), random_tensor(shape, values, rng)))
        .collect()
}

/// `input -> conv2d -> bias_add -> output` with random weights.
pub fn conv_model(
    input: [usize; 4],
    filter: [usize; 4],
    stride: [usize; 2],
    values: Values,
    seed: u64,
) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    b.input("x", &input);
    b.constant("conv.filter", random_tensor(&filter, values, &mut rng));
    b.constant("conv.bias", random_tensor(&[filter[3]], values, &mut rng));
    b.conv2d("conv", "x", "conv.filter", stride);
    b.bias_add("conv.add", "conv", "conv.bias");
    b.output("y", "conv.add");
    b.build()
}

/// Single-channel height-only convolution: B=1, H=32, W=64, K=5, Cout=1.
pub fn golden_model(values: Values, seed: u64) -> Graph {
    conv_model([1, 32, 64, 1], [5, 1, 1, 1], [1, 1], values, seed).expect("valid model")
}

/// Same as [`golden_model`] but with width 7, which no factor of 8 divides.
pub fn indivisible_width_model(values: Values, seed: u64) -> Graph {
    conv_model([1, 32, 7, 1], [5, 1, 1, 1], [1, 1], values, seed).expect("valid model")
}

/// An RGB first layer with a height-only 7x1 kernel.
pub fn rgb_model(values: Values, seed: u64) -> Graph {
    conv_model([1, 32, 64, 3], [7, 1, 3, 16], [1, 1], values, seed).expect("valid model")
}

/// A layer whose input channels are already a multiple of 8.
pub fn aligned_model(values: Values, seed: u64) -> Graph {
    conv_model([1, 16, 16, 8], [3, 1, 8, 8], [1, 1], values, seed).expect("valid model")
}

/// Two independent convolutions of one input, each with its own output.
pub fn two_branch_model(values: Values, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    b.input("x", &[1, 16, 32, 1]);
    for (name, k) in [("left", 3), ("right", 5)] {
        let (f, bias) = (format!("{name}.filter"), format!("{name}.bias"));
        b.constant(&f, random_tensor(&[k, 1, 1, 2], values, &mut rng));
        b.constant(&bias, random_tensor(&[2], values, &mut rng));
        b.conv2d(name, "x", &f, [1, 1]);
        b.bias_add(&format!("{name}.add"), name, &bias);
        b.output(&format!("{name}.out"), &format!("{name}.add"));
    }
    b.build().expect("valid model")
}

/// A projection `(M x K) * (K x N)` followed by a bias.
pub fn matmul_model(m: usize, k: usize, n: usize, values: Values, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    b.input("a", &[m, k]);
    b.constant("proj.weight", random_tensor(&[k, n], values, &mut rng));
    b.constant("proj.bias", random_tensor(&[n], values, &mut rng));
    b.matmul("proj", "a", "proj.weight");
    b.bias_add("proj.add", "proj", "proj.bias");
    b.output("c", "proj.add");
    b.build().expect("valid model")
}

/// A random multi-node graph: a chain of 2 to 4 stages over an NHWC input,
/// mixing foldable and non-foldable convolutions, bias adds, reshapes and
/// matmul projections, with one or two outputs.
pub fn random_graph(values: Values, rng: &mut impl Rng) -> Graph {
    let mut b = GraphBuilder::new();
    let batch = rng.gen_range(1..=2);
    let mut shape = [
        batch,
        rng.gen_range(4..=9),
        *[4usize, 6, 7, 8, 12, 16].get(rng.gen_range(0..6)).unwrap(),
        *[1usize, 1, 2, 3, 4, 8].get(rng.gen_range(0..6)).unwrap(),
    ];
    let mut cur = b.input("x", &shape);
    let stages = rng.gen_range(2..=4);
    let mut extra_output = None;

    for s in 0..stages {
        let [bn, h, w, c] = shape;
        match rng.gen_range(0..10) {
            // convolution, usually height-only
            0..=5 if h >= 1 => {
                let kh = rng.gen_range(1..=h.min(3));
                let kw = if rng.gen_bool(0.25) { rng.gen_range(1..=w.min(2)) } else { 1 };
                let sh = if rng.gen_bool(0.2) { 2 } else { 1 };
                let sw = if kw == 1 && rng.gen_bool(0.1) { 2 } else { 1 };
                let cout = rng.gen_range(1..=4);
                let filter = b.constant(&format!("s{s}.filter"), random_tensor(&[kh, kw, c, cout], values, rng));
                cur = b.conv2d(&format!("s{s}.conv"), &cur, &filter, [sh, sw]);
                if rng.gen_bool(0.7) {
                    let bias = b.constant(&format!("s{s}.bias"), random_tensor(&[cout], values, rng));
                    cur = b.bias_add(&format!("s{s}.add"), &cur, &bias);
                }
                shape = [bn, (h - kh) / sh + 1, (w - kw) / sw + 1, cout];
            }
            // matmul over the channel axis
            6..=7 => {
                let n = rng.gen_range(1..=4);
                let rows = bn * h * w;
                let flat = b.reshape(&format!("s{s}.flatten"), &cur, &[rows, c]);
                let weight = b.constant(&format!("s{s}.weight"), random_tensor(&[c, n], values, rng));
                let mm = b.matmul(&format!("s{s}.matmul"), &flat, &weight);
                cur = b.reshape(&format!("s{s}.unflatten"), &mm, &[bn, h, w, n]);
                shape = [bn, h, w, n];
            }
            // move channels into width
            _ => {
                cur = b.reshape(&format!("s{s}.reshape"), &cur, &[bn, h, w * c, 1]);
                shape = [bn, h, w * c, 1];
            }
        }
        if s == 0 && rng.gen_bool(0.3) {
            extra_output = Some(cur.clone());
        }
    }
    b.output("y", &cur);
    if let Some(t) = extra_output {
        b.output("y_aux", &t);
    }
    b.build().expect("generated graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{infer_shapes, interpret};

    #[test]
    fn generated_graphs_shape_check_and_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let g = random_graph(Values::SmallIntegers, &mut rng);
            infer_shapes(&g).unwrap();
            let inputs = random_inputs(&g, Values::SmallIntegers, &mut rng);
            assert!(!interpret(&g, &inputs).unwrap().is_empty());
        }
    }

    #[test]
    fn fixed_models_are_valid() {
        for g in [
            golden_model(Values::Uniform, 1),
            indivisible_width_model(Values::Uniform, 1),
            rgb_model(Values::Uniform, 1),
            aligned_model(Values::Uniform, 1),
            two_branch_model(Values::Uniform, 1),
            matmul_model(64, 3, 4, Values::Uniform, 1),
        ] {
            infer_shapes(&g).unwrap();
        }
    }

    #[test]
    fn integer_values_are_small_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&[100], Values::SmallIntegers, &mut rng);
        assert!(t.data().iter().all(|v| v.fract() == 0.0 && v.abs() <= 4.0));
    }
}
