//! Object conditioning: the visual modulator turns a first-frame object crop
//! into per-channel scale vectors, the spatial modulator turns a gaussian
//! location prior into per-pixel shifts, and the blob fit/render math links
//! predicted masks to that prior.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Parameter, Shape, Tape, Tensor, VarId};

const SIGMA_MIN: f64 = 1.0;

/// Axis-aligned 2-D gaussian summarizing a mask: centroid plus per-axis
/// spread, in source-mask pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBlob {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

/// First and second moments of the foreground, sigma floored at 1 px.
pub fn fit_blob(mask: &Mask) -> Result<GaussianBlob> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / n as f64;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (y, x) in mask.coords() {
        sx += x as f64;
        sy += y as f64;
    }
    let mu_x = sx * inv;
    let mu_y = sy * inv;
    let (mut vx, mut vy) = (0.0f64, 0.0f64);
    for (y, x) in mask.coords() {
        vx += (x as f64 - mu_x) * (x as f64 - mu_x);
        vy += (y as f64 - mu_y) * (y as f64 - mu_y);
    }
    Ok(GaussianBlob {
        mu_x,
        mu_y,
        sigma_x: (vx * inv).sqrt().max(SIGMA_MIN),
        sigma_y: (vy * inv).sqrt().max(SIGMA_MIN),
    })
}

impl GaussianBlob {
    /// Rescale into another resolution's pixel space.
    pub fn scaled(&self, sx: f64, sy: f64) -> GaussianBlob {
        GaussianBlob {
            mu_x: self.mu_x * sx,
            mu_y: self.mu_y * sy,
            sigma_x: (self.sigma_x * sx).max(SIGMA_MIN),
            sigma_y: (self.sigma_y * sy).max(SIGMA_MIN),
        }
    }
}

/// Render the blob as a heatmap in [0, 1] with peak 1 at the centroid:
/// value(x, y) = exp(-0.5 ((x-mu_x)^2/sx^2 + (y-mu_y)^2/sy^2)).
/// Blob coordinates are taken in the target (h, w) pixel space.
pub fn render_blob<E: Scalar>(blob: &GaussianBlob, h: usize, w: usize) -> Tensor<E> {
    let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
    for y in 0..h {
        let dy = (y as f64 - blob.mu_y) / blob.sigma_y;
        for x in 0..w {
            let dx = (x as f64 - blob.mu_x) / blob.sigma_x;
            t.data[y * w + x] = E::from_f64((-0.5 * (dx * dx + dy * dy)).exp());
        }
    }
    t
}

/// Exact block mean over the pre-image; output dims must divide the input.
pub fn area_downsample<E: Scalar>(t: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let s = t.shape;
    if oh == 0 || ow == 0 || s.h % oh != 0 || s.w % ow != 0 {
        return Err(Error::Config(format!(
            "area_downsample {}x{} -> {oh}x{ow} is not an integer reduction",
            s.h, s.w
        )));
    }
    let (fh, fw) = (s.h / oh, s.w / ow);
    let inv = E::from_f64(1.0 / (fh * fw) as f64);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &t.data[(n * s.c + c) * s.h * s.w..(n * s.c + c + 1) * s.h * s.w];
            let dst = &mut out.data[(n * s.c + c) * oh * ow..(n * s.c + c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::ZERO;
                    for yy in oy * fh..(oy + 1) * fh {
                        for xx in ox * fw..(ox + 1) * fw {
                            acc += src[yy * s.w + xx];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Tight bounding box of the mask, grown by 50% of the box size on each
/// side, clamped to the frame, bilinearly resized to out x out.
pub fn crop_and_resize<E: Scalar>(frame: &Tensor<E>, mask: &Mask, out: usize) -> Result<Tensor<E>> {
    let s = frame.shape;
    if s.h != mask.h || s.w != mask.w {
        return Err(Error::dim("height", mask.h, s.h, "crop_and_resize frame vs mask"));
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for (y, x) in mask.coords() {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if y0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let box_h = y1 - y0 + 1;
    let box_w = x1 - x0 + 1;
    let my = (box_h as f64 * 0.5).round() as isize;
    let mx = (box_w as f64 * 0.5).round() as isize;
    let cy0 = (y0 as isize - my).max(0) as usize;
    let cy1 = ((y1 as isize + my) as usize).min(s.h - 1);
    let cx0 = (x0 as isize - mx).max(0) as usize;
    let cx1 = ((x1 as isize + mx) as usize).min(s.w - 1);
    let ch = cy1 - cy0 + 1;
    let cw = cx1 - cx0 + 1;

    let mut crop = Tensor::zeros(Shape::new(1, s.c, ch, cw));
    for c in 0..s.c {
        for y in 0..ch {
            for x in 0..cw {
                let src = frame.data[(c * s.h + cy0 + y) * s.w + cx0 + x];
                crop.data[(c * ch + y) * cw + x] = src;
            }
        }
    }
    Ok(bilinear_resize(&crop, out, out))
}

/// Channel scale then pixel shift: f = gamma (.) f + beta, both optional so
/// the identity path and the gamma-only convLSTM path fall out naturally.
pub fn modulate<E: Scalar>(
    tape: &mut Tape<E>,
    f: VarId,
    gamma: Option<VarId>,
    beta: Option<VarId>,
) -> Result<VarId> {
    let mut out = f;
    if let Some(g) = gamma {
        out = tape.mul(out, g)?;
    }
    if let Some(b) = beta {
        out = tape.add(out, b)?;
    }
    Ok(out)
}

/// Value-level modulate for single tensors.
pub fn modulate_value<E: Scalar>(
    f: &Tensor<E>,
    gamma: Option<&[E]>,
    beta: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let g = match gamma {
        Some(g) => {
            if g.len() != f.shape.c {
                return Err(Error::dim("channels", f.shape.c, g.len(), "modulate gamma"));
            }
            Some(tape.leaf(Tensor::new(Shape::new(1, f.shape.c, 1, 1), g.to_vec())))
        }
        None => None,
    };
    let b = beta.map(|b| tape.leaf(b.clone()));
    let out = modulate(&mut tape, fv, g, b)?;
    Ok(tape.detach(out))
}

/// Channel scales produced per modulated stage: one vector for the stage's
/// conv features, one for its convLSTM output.
#[derive(Debug, Clone, Copy)]
pub struct StageGammaVars {
    pub conv: VarId,
    pub lstm: VarId,
}

/// Per-object modulation parameters as plain values: six scale vectors
/// (three conv stages, then three convLSTM outputs) and three shift maps.
#[derive(Debug, Clone)]
pub struct ModulationParams<E> {
    pub gammas: Vec<Vec<E>>,
    pub betas: Vec<Tensor<E>>,
}

/// Trunk stage of the visual modulator.
#[derive(Debug, Clone)]
struct VmStage<E: Scalar> {
    conv1: Conv2dLayer<E>,
    conv2: Conv2dLayer<E>,
}

/// Classifier-shaped network from an object crop to the gamma vectors.
/// Heads are zero-initialized and emit 1 + raw, so a fresh modulator scales
/// everything by exactly 1.
#[derive(Debug, Clone)]
pub struct VisualModulatorNet<E: Scalar> {
    stages: Vec<VmStage<E>>,
    conv_heads: Vec<Conv2dLayer<E>>,
    lstm_heads: Vec<Conv2dLayer<E>>,
    pub crop_size: usize,
}

impl<E: Scalar> VisualModulatorNet<E> {
    /// `trunk_channels` mirrors the encoder at reduced width; `head_channels`
    /// gives the channel count of each modulated stage (conv and lstm heads
    /// share it).
    pub fn new(
        crop_size: usize,
        trunk_channels: &[usize],
        head_channels: &[usize],
        rng: &mut impl Rng,
    ) -> VisualModulatorNet<E> {
        let mut stages = Vec::with_capacity(trunk_channels.len());
        let mut c_in = 3;
        for (i, &c_out) in trunk_channels.iter().enumerate() {
            let conv1 = Conv2dLayer::new(&format!("vm.stage{}.conv1", i + 1), c_in, c_out, 3, 1, 1, rng);
            let conv2 = Conv2dLayer::new(&format!("vm.stage{}.conv2", i + 1), c_out, c_out, 3, 1, 1, rng);
            stages.push(VmStage { conv1, conv2 });
            c_in = c_out;
        }
        let trunk_out = *trunk_channels.last().expect("vm trunk needs stages");
        let conv_heads = head_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2dLayer::new_zero(&format!("vm.head{}.conv", i + 1), trunk_out, c, 1, 1, 0))
            .collect();
        let lstm_heads = head_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2dLayer::new_zero(&format!("vm.head{}.lstm", i + 1), trunk_out, c, 1, 1, 0))
            .collect();
        VisualModulatorNet {
            stages,
            conv_heads,
            lstm_heads,
            crop_size,
        }
    }

    pub fn head_count(&self) -> usize {
        self.conv_heads.len() + self.lstm_heads.len()
    }

    /// Forward on the tape; returns one gamma pair per modulated stage.
    pub fn forward(&self, tape: &mut Tape<E>, crop: VarId) -> Result<Vec<StageGammaVars>> {
        let s = tape.shape(crop);
        if s.n != 1 || s.c != 3 || s.h != self.crop_size || s.w != self.crop_size {
            return Err(Error::dim(
                "crop",
                self.crop_size,
                s.h,
                format!("visual modulator expects [1,3,{0},{0}]", self.crop_size),
            ));
        }
        let mut x = crop;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            let a = stage.conv1.forward(tape, x)?;
            let a = tape.relu(a)?;
            let b = stage.conv2.forward(tape, a)?;
            x = tape.relu(b)?;
            if i != last {
                x = tape.maxpool2(x)?;
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let mut out = Vec::with_capacity(self.conv_heads.len());
        for (ch, lh) in self.conv_heads.iter().zip(&self.lstm_heads) {
            let raw_c = ch.forward(tape, pooled)?;
            let raw_l = lh.forward(tape, pooled)?;
            out.push(StageGammaVars {
                conv: tape.offset(raw_c, E::ONE)?,
                lstm: tape.offset(raw_l, E::ONE)?,
            });
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        let mut ps = Vec::new();
        for s in &self.stages {
            ps.extend(s.conv1.params());
            ps.extend(s.conv2.params());
        }
        for h in self.conv_heads.iter().chain(&self.lstm_heads) {
            ps.extend(h.params());
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut ps = Vec::new();
        for s in self.stages.iter_mut() {
            ps.extend(s.conv1.params_mut());
            ps.extend(s.conv2.params_mut());
        }
        for h in self.conv_heads.iter_mut().chain(self.lstm_heads.iter_mut()) {
            ps.extend(h.params_mut());
        }
        ps
    }
}

/// Compute gamma vectors from a crop as plain values (single forward pass).
pub fn visual_modulate_params<E: Scalar>(
    vm: &VisualModulatorNet<E>,
    crop: &Tensor<E>,
) -> Result<Vec<Vec<E>>> {
    let mut tape = Tape::new();
    let c = tape.leaf(crop.clone());
    let gammas = vm.forward(&mut tape, c)?;
    let mut out = Vec::with_capacity(2 * gammas.len());
    for g in &gammas {
        out.push(tape.detach(g.conv).data);
    }
    for g in &gammas {
        out.push(tape.detach(g.lstm).data);
    }
    Ok(out)
}

/// Per-stage 1x1 convolutions over the downsampled location heatmap.
/// Zero-initialized: a fresh spatial modulator shifts nothing.
#[derive(Debug, Clone)]
pub struct SpatialModulatorNet<E: Scalar> {
    heads: Vec<Conv2dLayer<E>>,
}

impl<E: Scalar> SpatialModulatorNet<E> {
    pub fn new(stage_count: usize) -> SpatialModulatorNet<E> {
        SpatialModulatorNet {
            heads: (0..stage_count)
                .map(|i| Conv2dLayer::new_zero(&format!("sm.stage{}", i + 1), 1, 1, 1, 1, 0))
                .collect(),
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Downsample the heatmap to each stage's resolution (area averaging)
    /// and apply that stage's 1x1 conv. The heatmap enters as a constant.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        heatmap: &Tensor<E>,
        stage_dims: &[(usize, usize)],
    ) -> Result<Vec<VarId>> {
        if stage_dims.len() != self.heads.len() {
            return Err(Error::dim("stages", self.heads.len(), stage_dims.len(), "spatial modulator"));
        }
        let mut out = Vec::with_capacity(self.heads.len());
        for (head, &(h, w)) in self.heads.iter().zip(stage_dims) {
            let small = area_downsample(heatmap, h, w)?;
            let leaf = tape.leaf(small);
            out.push(head.forward(tape, leaf)?);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        self.heads.iter().flat_map(|h| h.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        self.heads.iter_mut().flat_map(|h| h.params_mut()).collect()
    }
}

/// Compute beta maps from a heatmap as plain values.
pub fn spatial_modulate_params<E: Scalar>(
    sm: &SpatialModulatorNet<E>,
    heatmap: &Tensor<E>,
    stage_dims: &[(usize, usize)],
) -> Result<Vec<Tensor<E>>> {
    let mut tape = Tape::new();
    let betas = sm.forward(&mut tape, heatmap, stage_dims)?;
    Ok(betas.into_iter().map(|b| tape.detach(b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{fill_uniform, grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_point_mass() {
        let mut m = Mask::new(5, 5);
        m.set(2, 3, true);
        let b = fit_blob(&m).unwrap();
        assert_eq!((b.mu_x, b.mu_y), (3.0, 2.0));
        assert_eq!((b.sigma_x, b.sigma_y), (1.0, 1.0)); // floored
    }

    #[test]
    fn fit_two_pixels() {
        let mut m = Mask::new(5, 5);
        m.set(2, 0, true);
        m.set(2, 4, true);
        let b = fit_blob(&m).unwrap();
        assert_eq!(b.mu_x, 2.0);
        assert_eq!(b.mu_y, 2.0);
        assert_eq!(b.sigma_x, 2.0); // var = ((-2)^2 + 2^2)/2 = 4
        assert_eq!(b.sigma_y, 1.0); // floored
    }

    #[test]
    fn fit_full_mask_matches_bruteforce_moments() {
        for n in [4usize, 7, 12] {
            let m = Mask::from_fn(n, n, |_, _| true);
            let b = fit_blob(&m).unwrap();
            // oracle: direct summation
            let coords: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let mu = coords.iter().sum::<f64>() / n as f64;
            let var = coords.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / n as f64;
            assert!((b.mu_x - mu).abs() < 1e-12);
            assert!((b.mu_y - mu).abs() < 1e-12);
            assert!((b.sigma_x - var.sqrt().max(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_empty_mask_signals() {
        assert!(matches!(fit_blob(&Mask::new(4, 4)), Err(Error::EmptyMask)));
    }

    #[test]
    fn fit_translation_equivariance() {
        let base = Mask::from_fn(16, 16, |y, x| (3..6).contains(&y) && (2..7).contains(&x));
        let shifted = Mask::from_fn(16, 16, |y, x| {
            y >= 5 && x >= 4 && (3..6).contains(&(y - 2)) && (2..7).contains(&(x - 2))
        });
        let a = fit_blob(&base).unwrap();
        let b = fit_blob(&shifted).unwrap();
        assert_eq!(b.mu_x, a.mu_x + 2.0);
        assert_eq!(b.mu_y, a.mu_y + 2.0);
        assert_eq!(b.sigma_x, a.sigma_x);
        assert_eq!(b.sigma_y, a.sigma_y);
    }

    #[test]
    fn render_peak_and_sigma_point() {
        let blob = GaussianBlob {
            mu_x: 4.0,
            mu_y: 3.0,
            sigma_x: 2.0,
            sigma_y: 1.5,
        };
        let t: Tensor<f64> = render_blob(&blob, 8, 10);
        assert_eq!(t.at(0, 0, 3, 4), 1.0); // centroid on a pixel center
        let at_sigma = t.at(0, 0, 3, 6); // x = mu + sigma_x
        assert!((at_sigma - (-0.5f64).exp()).abs() < 1e-12);
        assert!(t.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn render_mass_grows_with_sigma() {
        let mut prev = 0.0;
        for s in [1.0, 1.5, 2.5, 4.0] {
            let blob = GaussianBlob {
                mu_x: 8.0,
                mu_y: 8.0,
                sigma_x: s,
                sigma_y: s,
            };
            let t: Tensor<f64> = render_blob(&blob, 17, 17);
            let mass: f64 = t.data.iter().sum();
            assert!(mass > prev, "sigma {s}: {mass} <= {prev}");
            prev = mass;
        }
    }

    #[test]
    fn render_fit_argmax_at_centroid_pixel() {
        let m = Mask::from_fn(12, 12, |y, x| (2..7).contains(&y) && (4..9).contains(&x));
        let blob = fit_blob(&m).unwrap();
        let t: Tensor<f64> = render_blob(&blob, 12, 12);
        let (mut best, mut best_i) = (f64::MIN, 0);
        for (i, &v) in t.data.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        let by = best_i / 12;
        let bx = best_i % 12;
        assert_eq!(by, blob.mu_y.round() as usize);
        assert_eq!(bx, blob.mu_x.round() as usize);
    }

    #[test]
    fn area_downsample_preserves_constants() {
        let t = Tensor::<f64>::full(Shape::new(1, 1, 12, 12), 0.7);
        for (oh, ow) in [(6, 6), (3, 3), (4, 12), (1, 1)] {
            let d = area_downsample(&t, oh, ow).unwrap();
            assert!(d.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
        assert!(area_downsample(&t, 5, 5).is_err());
    }

    #[test]
    fn crop_full_frame_mask() {
        let mut frame = Tensor::<f64>::zeros(Shape::new(1, 3, 8, 8));
        fill_uniform(&mut frame, 0.0, 1.0, 3);
        let full = Mask::from_fn(8, 8, |_, _| true);
        let crop = crop_and_resize(&frame, &full, 8).unwrap();
        // margin clamps to the frame: crop == resized full frame == frame
        assert_eq!(crop.shape, Shape::new(1, 3, 8, 8));
        for (a, b) in crop.data.iter().zip(&frame.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_margin_arithmetic() {
        // 2x2 object centered in 8x8: box (3..=4)^2, margin 1 -> window (2..=5)^2
        let mut frame = Tensor::<f64>::zeros(Shape::new(1, 3, 8, 8));
        for i in 0..frame.data.len() {
            frame.data[i] = i as f64;
        }
        let m = Mask::from_fn(8, 8, |y, x| (3..5).contains(&y) && (3..5).contains(&x));
        let crop = crop_and_resize(&frame, &m, 4).unwrap();
        // the 4x4 window resized to 4x4 is the window itself
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = frame.at(0, c, 2 + y, 2 + x);
                    assert!((crop.at(0, c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn crop_output_square_regardless_of_aspect() {
        let frame = Tensor::<f64>::zeros(Shape::new(1, 3, 12, 20));
        let m = Mask::from_fn(12, 20, |y, x| (2..4).contains(&y) && (3..15).contains(&x));
        for out in [4usize, 8, 16] {
            let crop = crop_and_resize(&frame, &m, out).unwrap();
            assert_eq!(crop.shape, Shape::new(1, 3, out, out));
        }
        assert!(matches!(
            crop_and_resize(&frame, &Mask::new(12, 20), 8),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn modulate_identity() {
        let mut f = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        fill_uniform(&mut f, -1.0, 1.0, 9);
        let out = modulate_value(&f, Some(&[1.0, 1.0]), Some(&Tensor::zeros(Shape::new(1, 1, 3, 3)))).unwrap();
        assert_eq!(out.data, f.data);
        let off = modulate_value(&f, None, None).unwrap();
        assert_eq!(off.data, f.data);
    }

    #[test]
    fn modulate_by_hand() {
        let f = Tensor::<f64>::full(Shape::new(1, 2, 2, 2), 1.0);
        let beta = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 0.5);
        let out = modulate_value(&f, Some(&[2.0, 3.0]), Some(&beta)).unwrap();
        assert!(out.data[..4].iter().all(|&v| v == 2.5));
        assert!(out.data[4..].iter().all(|&v| v == 3.5));
    }

    #[test]
    fn modulate_grads_match_finite_differences() {
        let mut f = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        fill_uniform(&mut f, -1.0, 1.0, 11);
        let mut g = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        fill_uniform(&mut g, 0.5, 2.0, 12);
        let mut b = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        fill_uniform(&mut b, -0.5, 0.5, 13);
        let report = grad_check(
            |tape, ids| {
                let m = modulate(tape, ids[0], Some(ids[1]), Some(ids[2]))?;
                let sq = tape.mul(m, m)?;
                tape.sum(sq)
            },
            &[f, g, b],
            DEFAULT_EPS,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fresh_vm_emits_identity_gammas() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vm: VisualModulatorNet<f64> = VisualModulatorNet::new(16, &[2, 2, 4], &[4, 4, 8], &mut rng);
        assert_eq!(vm.head_count(), 6);
        let mut crop = Tensor::<f64>::zeros(Shape::new(1, 3, 16, 16));
        fill_uniform(&mut crop, 0.0, 1.0, 14);
        let gammas = visual_modulate_params(&vm, &crop).unwrap();
        assert_eq!(gammas.len(), 6);
        assert_eq!(gammas[0].len(), 4);
        assert_eq!(gammas[2].len(), 8);
        assert_eq!(gammas[3].len(), 4);
        assert_eq!(gammas[5].len(), 8);
        for g in &gammas {
            assert!(g.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn vm_rejects_wrong_crop_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vm: VisualModulatorNet<f64> = VisualModulatorNet::new(16, &[2, 2], &[4], &mut rng);
        let crop = Tensor::<f64>::zeros(Shape::new(1, 3, 8, 8));
        let mut tape = Tape::new();
        let c = tape.leaf(crop);
        assert!(matches!(vm.forward(&mut tape, c), Err(Error::Dim { .. })));
    }

    #[test]
    fn fresh_sm_emits_zero_betas() {
        let sm: SpatialModulatorNet<f64> = SpatialModulatorNet::new(3);
        let blob = GaussianBlob {
            mu_x: 8.0,
            mu_y: 8.0,
            sigma_x: 3.0,
            sigma_y: 2.0,
        };
        let heat: Tensor<f64> = render_blob(&blob, 16, 16);
        let betas = spatial_modulate_params(&sm, &heat, &[(16, 16), (8, 8), (4, 4)]).unwrap();
        assert_eq!(betas.len(), 3);
        for b in &betas {
            assert!(b.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sm_constant_heatmap_affine() {
        let mut sm: SpatialModulatorNet<f64> = SpatialModulatorNet::new(1);
        sm.heads[0].weight.value.data[0] = 2.0;
        sm.heads[0].bias.value.data[0] = 0.25;
        let heat = Tensor::<f64>::full(Shape::new(1, 1, 8, 8), 0.5);
        let betas = spatial_modulate_params(&sm, &heat, &[(4, 4)]).unwrap();
        // area downsampling preserves the constant; 1x1 conv maps it to w*c + b
        assert!(betas[0].data.iter().all(|&v| (v - (2.0 * 0.5 + 0.25)).abs() < 1e-12));
    }

    #[test]
    fn vm_gradients_reach_trunk_and_heads() {
        // randomized heads so the trunk receives nonzero gradient
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vm: VisualModulatorNet<f64> = VisualModulatorNet::new(8, &[2, 2], &[3], &mut rng);
        for p in vm.params_mut() {
            fill_uniform(&mut p.value, -0.3, 0.3, 77);
        }
        let mut crop = Tensor::<f64>::zeros(Shape::new(1, 3, 8, 8));
        fill_uniform(&mut crop, 0.0, 1.0, 15);
        let mut feat = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        fill_uniform(&mut feat, -1.0, 1.0, 16);

        // FD over every vm parameter, loss = sum((gamma (.) feat)^2)
        struct Target<'a> {
            vm: &'a mut VisualModulatorNet<f64>,
            crop: Tensor<f64>,
            feat: Tensor<f64>,
        }
        impl crate::tensor::gradcheck::FdTarget for Target<'_> {
            fn param_count(&self) -> usize {
                self.vm.params().len()
            }
            fn param_len(&self, p: usize) -> usize {
                self.vm.params()[p].numel()
            }
            fn param_name(&self, p: usize) -> String {
                self.vm.params()[p].name.clone()
            }
            fn get(&self, p: usize, i: usize) -> f64 {
                self.vm.params()[p].value.data[i]
            }
            fn set(&mut self, p: usize, i: usize, v: f64) {
                self.vm.params_mut()[p].value.data[i] = v;
            }
            fn eval(&self) -> crate::error::Result<f64> {
                let (loss, _) = self.run()?;
                Ok(loss)
            }
            fn analytic(&self) -> crate::error::Result<Vec<Vec<f64>>> {
                let (_, grads) = self.run()?;
                Ok(grads)
            }
        }
        impl Target<'_> {
            fn run(&self) -> crate::error::Result<(f64, Vec<Vec<f64>>)> {
                let mut tape = Tape::new();
                let c = tape.leaf(self.crop.clone());
                let gammas = self.vm.forward(&mut tape, c)?;
                let f = tape.leaf(self.feat.clone());
                let m = modulate(&mut tape, f, Some(gammas[0].conv), None)?;
                let sq = tape.mul(m, m)?;
                let loss = tape.sum(sq)?;
                tape.backward(loss)?;
                let grads = self
                    .vm
                    .params()
                    .iter()
                    .map(|p| tape.param_grad(p).unwrap().to_vec())
                    .collect();
                Ok((tape.value(loss).item(), grads))
            }
        }
        let mut target = Target {
            vm: &mut vm,
            crop,
            feat,
        };
        let report = crate::tensor::gradcheck::grad_check_params(&mut target, DEFAULT_EPS, 1e-4).unwrap();
        assert!(
            report.pass,
            "max rel err {} at {}[{}]",
            report.max_rel_err, report.worst_param, report.worst_coord
        );
    }
}
