//! Constant edge front-end placed ahead of the discriminator: a pointwise
//! RGB→gray layer, a 3×3 Sobel pair, and concatenation with the original
//! image. Nothing here is trainable, but every step is differentiable so the
//! generator can learn through it.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::tensor::{Scalar, Tensor};

/// Fixed Sobel and luminance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelKernels {
    pub kx: [[f64; 3]; 3],
    pub ky: [[f64; 3]; 3],
    pub gray_weights: [f64; 3],
}

impl Default for SobelKernels {
    fn default() -> Self {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let mut ky = [[0.0; 3]; 3];
        for (r, row) in kx.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                ky[c][r] = v;
            }
        }
        SobelKernels {
            kx,
            ky,
            // ITU-R BT.601 luma
            gray_weights: [0.299, 0.587, 0.114],
        }
    }
}

impl SobelKernels {
    fn gray_kernel<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![1, 3, 1, 1], &self.gray_weights).expect("gray kernel")
    }

    fn edge_kernel<T: Scalar>(&self) -> Tensor<T> {
        let mut v = Vec::with_capacity(18);
        v.extend(self.kx.iter().flatten());
        v.extend(self.ky.iter().flatten());
        Tensor::from_f64(vec![2, 1, 3, 3], &v).expect("edge kernel")
    }
}

fn channels<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected an N×C×H×W batch, got {s:?}"
        )));
    }
    Ok(s[1])
}

/// Weighted channel sum `N×3×H×W → N×1×H×W`.
pub fn rgb_to_gray<T: Scalar>(tape: &mut Tape<T>, k: &SobelKernels, x: Var) -> Result<Var> {
    let c = channels(tape, x)?;
    if c != 3 {
        return Err(Error::InvalidArgument(format!(
            "gray conversion needs 3 channels, got {c}"
        )));
    }
    let w = tape.constant(k.gray_kernel());
    tape.conv2d(x, w, 1, Padding::Same)
}

/// `N×1×H×W → N×2×H×W`: channel 0 correlates with `kx`, channel 1 with `ky`;
/// stride 1, zero padding, extents preserved.
pub fn sobel_edges<T: Scalar>(tape: &mut Tape<T>, k: &SobelKernels, gray: Var) -> Result<Var> {
    let c = channels(tape, gray)?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!(
            "sobel needs 1 channel, got {c}"
        )));
    }
    let w = tape.constant(k.edge_kernel());
    tape.conv2d(gray, w, 1, Padding::Same)
}

/// `N×c×H×W → N×(c+2)×H×W` for `c ∈ {1, 3}`: the image followed by its dx
/// and dy edge maps. Single-channel input skips the gray conversion.
pub fn augment_input<T: Scalar>(tape: &mut Tape<T>, k: &SobelKernels, x: Var) -> Result<Var> {
    let gray = match channels(tape, x)? {
        3 => rgb_to_gray(tape, k, x)?,
        1 => x,
        c => {
            return Err(Error::InvalidArgument(format!(
                "edge front-end supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let edges = sobel_edges(tape, k, gray)?;
    tape.concat(&[x, edges], 1)
}

/// [`augment_input`] on a plain tensor.
pub fn augment<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let y = augment_input(&mut tape, &SobelKernels::default(), x)?;
    Ok(tape.value(y).clone())
}

/// [`sobel_edges`] on a plain single-channel batch.
pub fn edges<T: Scalar>(gray: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(gray.clone());
    let y = sobel_edges(&mut tape, &SobelKernels::default(), x)?;
    Ok(tape.value(y).clone())
}

/// [`rgb_to_gray`] on a plain batch.
pub fn gray<T: Scalar>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(rgb.clone());
    let y = rgb_to_gray(&mut tape, &SobelKernels::default(), x)?;
    Ok(tape.value(y).clone())
}
