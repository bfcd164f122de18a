//! Value-level entry points to the tape primitives, for callers that do not
//! need gradients.

use crate::autodiff::Tape;
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

fn run<T: Scalar>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Tape<T>, &[crate::autodiff::Var]) -> Result<crate::autodiff::Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// `x.y / (|x||y|)`, or zero when either norm is below `1e-12`.
pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() || x.is_empty() {
        return invalid(format!("cosine_similarity: lengths {} and {}", x.len(), y.len()));
    }
    Ok(crate::autodiff::cosine_slices(x, y))
}

pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    let t = Tensor::vector(v.to_vec());
    Ok(run(&[&t], |tp, x| tp.softmax(x[0]))?.into_data())
}

pub fn avg_pool<T: Scalar>(map: &Tensor<T>, n: usize, stride: usize) -> Result<Tensor<T>> {
    run(&[map], |tp, x| tp.avg_pool(x[0], n, stride))
}

pub fn cross_correlate<T: Scalar>(search: &Tensor<T>, template: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[search, template], |tp, x| tp.xcorr(x[0], x[1]))
}

pub fn layer_norm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if v.is_empty() {
        return invalid("layer_norm of an empty vector");
    }
    let (tv, tg, tb) = (
        Tensor::vector(v.to_vec()),
        Tensor::vector(gain.to_vec()),
        Tensor::vector(bias.to_vec()),
    );
    Ok(run(&[&tv, &tg, &tb], |tp, x| tp.layer_norm(x[0], x[1], x[2], eps))?.into_data())
}

/// `W x + b` with `W: [out, in]`.
pub fn dense_affine<T: Scalar>(x: &[T], w: &Tensor<T>, b: &[T]) -> Result<Vec<T>> {
    if x.is_empty() || b.is_empty() {
        return invalid("dense_affine: empty operand");
    }
    let (tx, tb) = (Tensor::vector(x.to_vec()), Tensor::vector(b.to_vec()));
    Ok(run(&[&tx, w, &tb], |tp, v| tp.affine(v[1], v[0], v[2]))?.into_data())
}

/// Valid strided convolution without bias. `kernels: KH x KW x Ci x Co`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let co = match kernels.shape() {
        [_, _, _, co] => *co,
        other => return invalid(format!("conv2d: kernel shape {other:?}")),
    };
    let bias = Tensor::zeros(&[co]);
    run(&[input, kernels, &bias], |tp, x| tp.conv2d(x[0], x[1], x[2], stride))
}
