//! Task-spectral pyramidal decoder.
//!
//! Per task and per stage, a channel-wise spectral filter reweights the 2-D
//! spectrum of the task features, then a cross-task consensus step nudges
//! the task spectrum toward the mean spectrum of the other tasks, separately
//! on high- and low-magnitude bins. Stages are fused at the finest resolution
//! and each task gets a 1x1 prediction head.
//!
//! Feature maps are channel-first: `[B, C, H, W]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fft::mirror_bin, Complex64, Tape, Tensor, Var};

/// Tolerated `|Im|` after an inverse FFT whose input should be Hermitian.
pub const IMAG_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFilterState {
    /// Real multiplicative filter per channel, `[C, H, W]`.
    pub filter: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

impl SpectralFilterState {
    /// Identity: all-ones filter, unit scale, zero shift.
    pub fn identity(channels: usize, h: usize, w: usize) -> Self {
        Self {
            filter: Tensor::full(&[channels, h, w], 1.0),
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.filter.numel() + self.scale.numel() + self.shift.numel()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XtConsState {
    pub alpha_low: Tensor,
    pub alpha_high: Tensor,
    pub tau: f64,
}

impl XtConsState {
    /// Both branch scales start at zero so the module is a no-op at step 0.
    pub fn new(tau: f64) -> Self {
        Self {
            alpha_low: Tensor::scalar(0.0),
            alpha_high: Tensor::scalar(0.0),
            tau,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FilterVars {
    pub filter: Var,
    pub scale: Var,
    pub shift: Var,
}

impl FilterVars {
    pub fn bind(tape: &mut Tape, f: &SpectralFilterState) -> Self {
        Self {
            filter: tape.param(&f.filter),
            scale: tape.param(&f.scale),
            shift: tape.param(&f.shift),
        }
    }
}

fn real_of_inverse(tape: &mut Tape, spectrum: Var, imag_tol: Option<f64>) -> Result<Var> {
    let z = tape.ifft2(spectrum)?;
    if let Some(tol) = imag_tol {
        let resid = tape.max_imag(z);
        if resid > tol {
            return Err(crate::tensor::TensorError::ImaginaryResidue(resid).into());
        }
    }
    Ok(tape.real_part(z)?)
}

/// `out_c = α_c Re(ifft2(W_c ⊙ fft2(x_c))) + β_c` for `x[..., C, H, W]`.
pub fn cwsp_forward(tape: &mut Tape, x: Var, f: &FilterVars, imag_tol: Option<f64>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 3 || tape.shape(f.filter) != &shape[shape.len() - 3..] {
        return Err(Error::config(format!(
            "spectral filter {:?} does not fit features {:?}",
            tape.shape(f.filter),
            shape
        )));
    }
    let axis = shape.len() - 3;
    let spec = tape.fft2(x)?;
    let filtered = tape.cmul_real(spec, f.filter, axis)?;
    let z = real_of_inverse(tape, filtered, imag_tol)?;
    let scaled = tape.mul_bcast(z, f.scale, axis)?;
    Ok(tape.add_bcast(scaled, f.shift, axis)?)
}

/// High-magnitude mask per `[H, W]` plane: bins whose magnitude, normalized
/// by the plane maximum, exceeds `tau`. The magnitude is symmetrized over
/// `k` and `-k` so the mask keeps real signals real. An all-zero plane gets
/// an empty high mask.
pub fn high_magnitude_mask(spec: &[Complex64], h: usize, w: usize, tau: f64) -> Vec<bool> {
    let plane = h * w;
    let mut out = vec![false; spec.len()];
    for (p, chunk) in spec.chunks_exact(plane).enumerate() {
        let mag: Vec<f64> = (0..plane)
            .map(|k| {
                let (u, v) = (k / w, k % w);
                chunk[k].norm().max(chunk[mirror_bin(u, v, h, w)].norm())
            })
            .collect();
        let peak = mag.iter().copied().fold(0.0, f64::max);
        if peak == 0.0 {
            continue;
        }
        for k in 0..plane {
            out[p * plane + k] = mag[k] / peak > tau;
        }
    }
    out
}

/// Cross-task consensus on `main[..., H, W]` given same-shaped `aux` maps.
///
/// `Δ_band = M_band ⊙ (mean_j fft2(aux_j) − fft2(main))` and
/// `out = main + α_low Re(ifft2(Δ_low)) + α_high Re(ifft2(Δ_high))`.
pub fn spectral_consensus(
    tape: &mut Tape,
    main: Var,
    aux: &[Var],
    alpha_low: Var,
    alpha_high: Var,
    tau: f64,
    imag_tol: Option<f64>,
) -> Result<Var> {
    if aux.is_empty() {
        return Err(Error::config("spectral consensus needs at least one auxiliary task"));
    }
    let shape = tape.shape(main).to_vec();
    if shape.len() < 2 {
        return Err(Error::config("consensus input needs two spatial axes"));
    }
    for &a in aux {
        if tape.shape(a) != shape.as_slice() {
            return Err(Error::config("auxiliary features differ in shape from main"));
        }
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let f_main = tape.fft2(main)?;
    let mut f_sum = tape.fft2(aux[0])?;
    for &a in &aux[1..] {
        let fa = tape.fft2(a)?;
        f_sum = tape.cadd(f_sum, fa)?;
    }
    let f_avg = tape.cscale(f_sum, 1.0 / aux.len() as f64)?;
    let diff = tape.csub(f_avg, f_main)?;

    let high = high_magnitude_mask(tape.cvalue(f_main), h, w, tau);
    let m_high: Vec<f64> = high.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m_low: Vec<f64> = m_high.iter().map(|m| 1.0 - m).collect();
    let m_high = tape.constant_vec(&shape, m_high)?;
    let m_low = tape.constant_vec(&shape, m_low)?;

    let d_low = tape.cmul_real(diff, m_low, 0)?;
    let d_high = tape.cmul_real(diff, m_high, 0)?;
    let low = real_of_inverse(tape, d_low, imag_tol)?;
    let high = real_of_inverse(tape, d_high, imag_tol)?;
    let nd = shape.len();
    let low = tape.mul_bcast(low, alpha_low, nd)?;
    let high = tape.mul_bcast(high, alpha_high, nd)?;
    let out = tape.add(main, low)?;
    Ok(tape.add(out, high)?)
}

/// Index map for nearest-neighbor upsampling of `[B, C, h, w]` to `[B, C, H, W]`.
pub fn upsample_index(b: usize, c: usize, h: usize, w: usize, hh: usize, ww: usize) -> Vec<Option<usize>> {
    let (fy, fx) = (hh / h, ww / w);
    let mut idx = Vec::with_capacity(b * c * hh * ww);
    for plane in 0..b * c {
        for y in 0..hh {
            for x in 0..ww {
                idx.push(Some(plane * h * w + (y / fy) * w + x / fx));
            }
        }
    }
    idx
}

/// im2col for a zero-padded 3x3 convolution: `[B, C, H, W] -> [B, 9C, H*W]`.
pub fn im2col3_index(b: usize, c: usize, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(b * 9 * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..3 {
                for dx in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = (y as isize + dy - 1, x as isize + dx - 1);
                            idx.push(if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                None
                            } else {
                                Some(((bi * c + ci) * h + sy as usize) * w + sx as usize)
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

fn upsample(tape: &mut Tape, x: Var, hh: usize, ww: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (hh, ww) {
        return Ok(x);
    }
    if hh % h != 0 || ww % w != 0 {
        return Err(Error::config(format!("cannot upsample {h}x{w} to {hh}x{ww}")));
    }
    let idx = upsample_index(b, c, h, w, hh, ww);
    Ok(tape.gather(x, &idx, &[b, c, hh, ww])?)
}

/// Fusion weights shared across stages of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseState {
    /// One `[D, C_s]` projection per stage (no bias).
    pub proj: Vec<Tensor>,
    /// `[D, 9D]` 3x3 convolution.
    pub conv_w: Tensor,
    pub conv_b: Tensor,
}

impl FuseState {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], width: usize, rng: &mut R) -> Self {
        let proj = channels
            .iter()
            .map(|&c| {
                let s = 1.0 / (c as f64).sqrt();
                Tensor::uniform(&[width, c], -s, s, rng)
            })
            .collect();
        let s = 1.0 / ((9 * width) as f64).sqrt();
        Self {
            proj,
            conv_w: Tensor::uniform(&[width, 9 * width], -s, s, rng),
            conv_b: Tensor::zeros(&[width]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.iter().map(Tensor::numel).sum::<usize>() + self.conv_w.numel() + self.conv_b.numel()
    }
}

#[derive(Debug, Clone)]
pub struct FuseVars {
    pub proj: Vec<Var>,
    pub conv_w: Var,
    pub conv_b: Var,
}

impl FuseVars {
    pub fn bind(tape: &mut Tape, f: &FuseState) -> Self {
        Self {
            proj: f.proj.iter().map(|p| tape.param(p)).collect(),
            conv_w: tape.param(&f.conv_w),
            conv_b: tape.param(&f.conv_b),
        }
    }
}

/// Upsample every stage to the first (finest) one, project to a common
/// width, sum, then one 3x3 convolution and `tanh`.
pub fn pyramid_fuse(tape: &mut Tape, feats: &[Var], f: &FuseVars) -> Result<Var> {
    if feats.is_empty() || feats.len() != f.proj.len() {
        return Err(Error::config(format!(
            "pyramid has {} stages, fusion expects {}",
            feats.len(),
            f.proj.len()
        )));
    }
    let s0 = tape.shape(feats[0]).to_vec();
    let (b, hh, ww) = (s0[0], s0[2], s0[3]);
    let width = tape.shape(f.conv_b)[0];
    let mut acc: Option<Var> = None;
    for (&x, &p) in feats.iter().zip(&f.proj) {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let y = tape.matmul(p, flat)?;
        let y = tape.reshape(y, &[b, width, s[2], s[3]])?;
        let y = upsample(tape, y, hh, ww)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let sum = acc.expect("non-empty pyramid");
    let cols = tape.gather(sum, &im2col3_index(b, width, hh, ww), &[b, 9 * width, hh * ww])?;
    let conv = tape.matmul(f.conv_w, cols)?;
    let conv = tape.add_bcast(conv, f.conv_b, 1)?;
    let act = tape.tanh(conv)?;
    Ok(tape.reshape(act, &[b, width, hh, ww])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadState {
    pub fn new<R: Rng + ?Sized>(width: usize, out: usize, rng: &mut R) -> Self {
        let s = 1.0 / (width as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[out, width], -s, s, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// 1x1 map to task channels, upsampled to `(out_h, out_w)`.
pub fn task_head(
    tape: &mut Tape,
    fused: Var,
    weight: Var,
    bias: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let s = tape.shape(fused).to_vec();
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    let out = tape.shape(weight)[0];
    let flat = tape.reshape(fused, &[b, d, h * w])?;
    let y = tape.matmul(weight, flat)?;
    let y = tape.add_bcast(y, bias, 1)?;
    let y = tape.reshape(y, &[b, out, h, w])?;
    upsample(tape, y, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_feats(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::normal(shape, 1.0, &mut rng)
    }

    #[test]
    fn identity_filter_reproduces_input() {
        let x = rand_feats(&[2, 3, 8, 8], 1);
        let mut t = Tape::new();
        let xv = t.constant(&x);
        let f = FilterVars::bind(&mut t, &SpectralFilterState::identity(3, 8, 8));
        let y = cwsp_forward(&mut t, xv, &f, Some(IMAG_TOL)).unwrap();
        assert!(x.max_abs_diff(&t.to_tensor(y)) < 1e-9);
    }

    #[test]
    fn zero_filter_gives_shift() {
        let x = rand_feats(&[3, 4, 4], 2);
        let mut st = SpectralFilterState::identity(3, 4, 4);
        st.filter = Tensor::zeros(&[3, 4, 4]);
        st.shift = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let mut t = Tape::new();
        let xv = t.constant(&x);
        let f = FilterVars::bind(&mut t, &st);
        let y = cwsp_forward(&mut t, xv, &f, None).unwrap();
        for (c, chunk) in t.value(y).chunks(16).enumerate() {
            assert!(chunk.iter().all(|v| (v - st.shift.data()[c]).abs() < 1e-12));
        }
    }

    #[test]
    fn filter_shape_mismatch_is_rejected() {
        let mut t = Tape::new();
        let xv = t.constant(&Tensor::zeros(&[3, 4, 4]));
        let f = FilterVars::bind(&mut t, &SpectralFilterState::identity(3, 4, 2));
        assert!(cwsp_forward(&mut t, xv, &f, None).is_err());
    }

    #[test]
    fn consensus_requires_aux() {
        let mut t = Tape::new();
        let m = t.constant(&Tensor::zeros(&[2, 4, 4]));
        let a = t.param(&Tensor::scalar(1.0));
        assert!(spectral_consensus(&mut t, m, &[], a, a, 0.5, None).is_err());
    }

    #[test]
    fn consensus_single_aux_unit_alphas_yields_aux() {
        let main = rand_feats(&[2, 3, 8, 8], 3);
        let aux = rand_feats(&[2, 3, 8, 8], 4);
        let mut t = Tape::new();
        let (mv, av) = (t.constant(&main), t.constant(&aux));
        let one = t.param(&Tensor::scalar(1.0));
        let y = spectral_consensus(&mut t, mv, &[av], one, one, 0.5, Some(IMAG_TOL)).unwrap();
        assert!(aux.max_abs_diff(&t.to_tensor(y)) < 1e-9);
    }

    #[test]
    fn zero_plane_is_all_low() {
        let spec = vec![Complex64::new(0.0, 0.0); 16];
        assert!(high_magnitude_mask(&spec, 4, 4, 0.5).iter().all(|&b| !b));
    }

    #[test]
    fn pyramid_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs = FuseState::new(&[4, 8], 6, &mut rng);
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(&[2, 4, 8, 8]));
        let b = t.constant(&Tensor::zeros(&[2, 8, 4, 4]));
        let fv = FuseVars::bind(&mut t, &fs);
        let y = pyramid_fuse(&mut t, &[a, b], &fv).unwrap();
        assert_eq!(t.shape(y), &[2, 6, 8, 8]);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        assert!(pyramid_fuse(&mut t, &[a], &fv).is_err());
    }

    #[test]
    fn head_shapes_and_softmax_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seg = HeadState::new(6, 3, &mut rng);
        let depth = HeadState::new(6, 1, &mut rng);
        let mut t = Tape::new();
        let fused = t.constant(&rand_feats(&[2, 6, 4, 4], 7));
        let (w, b) = (t.param(&seg.weight), t.param(&seg.bias));
        let logits = task_head(&mut t, fused, w, b, 16, 16).unwrap();
        assert_eq!(t.shape(logits), &[2, 3, 16, 16]);
        let (w, b) = (t.param(&depth.weight), t.param(&depth.bias));
        let d = task_head(&mut t, fused, w, b, 16, 16).unwrap();
        assert_eq!(t.shape(d), &[2, 1, 16, 16]);
        let p = t.softmax(logits, 1).unwrap();
        let v = t.value(p);
        for bi in 0..2 {
            for px in 0..256 {
                let s: f64 = (0..3).map(|c| v[(bi * 3 + c) * 256 + px]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
