//! Same-padded stride-1 convolution as a sum of shifted sgemm products.
//!
//! Each image is staged once into a zero-padded buffer. Output pixels are
//! computed in "wide" coordinates `y * padded_width + x`, where every kernel
//! tap becomes a constant offset into the staged buffer, so a `k×k`
//! convolution is `k²` matrix products over strided views with no im2col
//! copy. The `2·pad` wrap-around columns per row are scratch and discarded.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Layout {
    rows: isize,
    cols: isize,
}

impl Layout {
    fn row_major(ncols: usize) -> Self {
        Self {
            rows: ncols as isize,
            cols: 1,
        }
    }

    fn strided(rows: usize, cols: usize) -> Self {
        Self {
            rows: rows as isize,
            cols: cols as isize,
        }
    }

    /// Largest element offset reachable in an `m×n` view, plus one.
    fn extent(self, m: usize, n: usize) -> usize {
        if m == 0 || n == 0 {
            return 0;
        }
        (m - 1) * self.rows as usize + (n - 1) * self.cols as usize + 1
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product; every operand is a
/// strided view starting at the front of its slice.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    assert!(a.len() >= la.extent(m, k) && b.len() >= lb.extent(k, n) && c.len() >= lc.extent(m, n));
    // SAFETY: every index reachable through the strides lies inside the
    // corresponding slice (checked above), `c` is a unique borrow so it cannot
    // alias `a` or `b`, and distinct (row, col) pairs of `c` map to distinct
    // offsets for every layout used in this module.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            lc.rows,
            lc.cols,
        );
    }
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
}

impl ConvGeometry {
    pub fn check(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let [batch, cin, height, width] = input.dims4()?;
        let [cout, kcin, kh, kw] = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                bias.shape()
            )));
        }
        Ok(Self {
            batch,
            cin,
            cout,
            height,
            width,
            ksize: kh,
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn pad(&self) -> usize {
        self.ksize / 2
    }

    fn taps(&self) -> usize {
        self.ksize * self.ksize
    }

    fn padded_width(&self) -> usize {
        self.width + 2 * self.pad()
    }

    fn padded_plane(&self) -> usize {
        (self.height + 2 * self.pad()) * self.padded_width()
    }

    /// Output positions per channel in wide coordinates.
    fn span(&self) -> usize {
        self.height * self.padded_width()
    }

    /// Staging buffer length: every tap's shifted view must stay in bounds,
    /// including the scratch columns of the last channel.
    fn staged_len(&self) -> usize {
        self.cin * self.padded_plane() + self.ksize - 1
    }

    /// Offset of kernel tap `tap` (row-major over `ky, kx`) in wide coordinates.
    fn tap_offset(&self, tap: usize) -> usize {
        (tap / self.ksize) * self.padded_width() + tap % self.ksize
    }

    /// Kernel slice for one tap viewed as a `cout×cin` matrix.
    fn tap_layout(&self) -> Layout {
        Layout::strided(self.cin * self.taps(), self.taps())
    }
}

/// Copy one `[C,H,W]` image into the interior of a zero-bordered buffer laid
/// out as `[C, H+2p, W+2p]`. The border is never written, so a buffer zeroed
/// once can be reused across images.
fn stage(g: &ConvGeometry, channels: usize, image: &[f32], staged: &mut [f32]) {
    let (pad, wp, pp, w) = (g.pad(), g.padded_width(), g.padded_plane(), g.width);
    for c in 0..channels {
        for y in 0..g.height {
            let src = c * g.plane() + y * w;
            let dst = c * pp + (y + pad) * wp + pad;
            staged[dst..dst + w].copy_from_slice(&image[src..src + w]);
        }
    }
}

/// Inverse of [`stage`]: read the interior of a padded buffer into `[C,H,W]`.
fn unstage(g: &ConvGeometry, channels: usize, staged: &[f32], image: &mut [f32]) {
    let (pad, wp, pp, w) = (g.pad(), g.padded_width(), g.padded_plane(), g.width);
    for c in 0..channels {
        for y in 0..g.height {
            let dst = c * g.plane() + y * w;
            let src = c * pp + (y + pad) * wp + pad;
            image[dst..dst + w].copy_from_slice(&staged[src..src + w]);
        }
    }
}

/// Copy `[C,H,W]` rows into wide coordinates (row stride `W+2p`, channel
/// stride `H·(W+2p)`). Scratch columns are never written.
fn widen(g: &ConvGeometry, channels: usize, image: &[f32], wide: &mut [f32]) {
    let (wp, span, w) = (g.padded_width(), g.span(), g.width);
    for c in 0..channels {
        for y in 0..g.height {
            let src = c * g.plane() + y * w;
            let dst = c * span + y * wp;
            wide[dst..dst + w].copy_from_slice(&image[src..src + w]);
        }
    }
}

/// Inverse of [`widen`], dropping the scratch columns.
fn narrow(g: &ConvGeometry, channels: usize, wide: &[f32], image: &mut [f32]) {
    let (wp, span, w) = (g.padded_width(), g.span(), g.width);
    for c in 0..channels {
        for y in 0..g.height {
            let dst = c * g.plane() + y * w;
            let src = c * span + y * wp;
            image[dst..dst + w].copy_from_slice(&wide[src..src + w]);
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::check(input, kernel, bias)?;
    let (plane, span, pp) = (g.plane(), g.span(), g.padded_plane());
    let in_stride = g.cin * plane;
    let out_stride = g.cout * plane;
    let mut out = vec![0.0f32; g.batch * out_stride];
    let mut staged = vec![0.0f32; g.staged_len()];
    let mut wide = vec![0.0f32; g.cout * span];
    for b in 0..g.batch {
        stage(&g, g.cin, &input.data()[b * in_stride..(b + 1) * in_stride], &mut staged);
        for (o, chunk) in wide.chunks_exact_mut(span).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        for tap in 0..g.taps() {
            gemm(
                (g.cout, g.cin, span),
                &kernel.data()[tap..],
                g.tap_layout(),
                &staged[g.tap_offset(tap)..],
                Layout::strided(pp, 1),
                1.0,
                &mut wide,
                Layout::row_major(span),
            );
        }
        narrow(&g, g.cout, &wide, &mut out[b * out_stride..(b + 1) * out_stride]);
    }
    Tensor::new(vec![g.batch, g.cout, g.height, g.width], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    out_grad: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::check(input, kernel, bias)?;
    let (plane, span, pp) = (g.plane(), g.span(), g.padded_plane());
    let in_stride = g.cin * plane;
    let out_stride = g.cout * plane;
    let mut dkernel = vec![0.0f32; kernel.len()];
    let mut dbias = vec![0.0f64; g.cout];
    let mut dinput = want_input.then(|| vec![0.0f32; input.len()]);
    let mut staged = vec![0.0f32; g.staged_len()];
    let mut dstaged = vec![0.0f32; g.staged_len()];
    // Scratch columns stay zero, so they contribute nothing to either product.
    let mut dwide = vec![0.0f32; g.cout * span];
    for b in 0..g.batch {
        let dout = &out_grad.data()[b * out_stride..(b + 1) * out_stride];
        for (o, chunk) in dout.chunks_exact(plane).enumerate() {
            dbias[o] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        stage(&g, g.cin, &input.data()[b * in_stride..(b + 1) * in_stride], &mut staged);
        widen(&g, g.cout, dout, &mut dwide);
        for tap in 0..g.taps() {
            let off = g.tap_offset(tap);
            // dK[:, :, tap] += dOut · shifted(input)ᵀ
            gemm(
                (g.cout, span, g.cin),
                &dwide,
                Layout::row_major(span),
                &staged[off..],
                Layout::strided(1, pp),
                1.0,
                &mut dkernel[tap..],
                g.tap_layout(),
            );
        }
        if let Some(dinput) = dinput.as_mut() {
            dstaged.fill(0.0);
            for tap in 0..g.taps() {
                let off = g.tap_offset(tap);
                // shifted(dInput) += K[:, :, tap]ᵀ · dOut
                gemm(
                    (g.cin, g.cout, span),
                    &kernel.data()[tap..],
                    Layout::strided(g.taps(), g.cin * g.taps()),
                    &dwide,
                    Layout::row_major(span),
                    1.0,
                    &mut dstaged[off..],
                    Layout::strided(pp, 1),
                );
            }
            unstage(&g, g.cin, &dstaged, &mut dinput[b * in_stride..(b + 1) * in_stride]);
        }
    }
    Ok(ConvGrads {
        input: dinput
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new(vec![g.cout], dbias.into_iter().map(|v| v as f32).collect())?,
    })
}
