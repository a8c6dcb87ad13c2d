//! The full segmentation network: a VGG-style encoder whose last three
//! stages carry convLSTM blocks and per-object modulation, fused by a
//! hypercolumn decoder into per-pixel object logits at input resolution.
//!
//! Data path per frame, for each recurrent stage s:
//!   f = convs(x); f = gamma_conv_s (.) f + beta_s;
//!   h, state_s = convlstm_s(f); h = gamma_lstm_s (.) h;
//! h feeds both the next stage (after pooling) and the decoder tap.
//! Early stages pass through unmodulated. Bypass mode (phase-1 training,
//! recurrence ablation) replaces the cell with the identity and skips the
//! lstm-side gamma, so the modulated features flow through unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{init_state, ConvLstmCell, ConvLstmState, StateVars};
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::mask::Mask;
use crate::modulators::{
    modulate, ModulationParams, SpatialModulatorNet, StageGammaVars, VisualModulatorNet,
};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Shape, Tape, Tensor, VarId};

pub const MODULATED_STAGE_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stage_channels: Vec<usize>,
    pub hypercolumn_width: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 64,
            stage_channels: vec![16, 32, 64, 64, 64],
            hypercolumn_width: 16,
            crop_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n < MODULATED_STAGE_COUNT {
            return Err(Error::Config(format!(
                "need at least {MODULATED_STAGE_COUNT} stages, got {n}"
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        let div = 1usize << (n - 1);
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^(stages-1) = {div}",
                self.input_h, self.input_w
            )));
        }
        if self.crop_size % div != 0 {
            return Err(Error::Config(format!(
                "crop size {} not divisible by 2^(stages-1) = {div}",
                self.crop_size
            )));
        }
        if self.hypercolumn_width == 0 {
            return Err(Error::Config("hypercolumn width must be positive".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Indices of the modulated (= recurrent) stages: always the last three.
    pub fn modulated_stages(&self) -> std::ops::Range<usize> {
        self.num_stages() - MODULATED_STAGE_COUNT..self.num_stages()
    }

    /// Spatial resolution at which each stage's convs run (pooling sits
    /// between stages).
    pub fn stage_dims(&self) -> Vec<(usize, usize)> {
        (0..self.num_stages())
            .map(|i| (self.input_h >> i, self.input_w >> i))
            .collect()
    }

    pub fn modulated_stage_dims(&self) -> Vec<(usize, usize)> {
        let dims = self.stage_dims();
        self.modulated_stages().map(|i| dims[i]).collect()
    }

    pub fn modulated_stage_channels(&self) -> Vec<usize> {
        self.modulated_stages().map(|i| self.stage_channels[i]).collect()
    }

    fn vm_trunk_channels(&self) -> Vec<usize> {
        self.stage_channels.iter().map(|&c| (c / 2).max(2)).collect()
    }
}

#[derive(Debug, Clone)]
struct EncoderStage<E: Scalar> {
    conv1: Conv2dLayer<E>,
    conv2: Conv2dLayer<E>,
}

/// Value-level recurrent state: one hidden/cell pair per recurrent stage.
#[derive(Debug, Clone)]
pub struct RecurrentState<E> {
    pub states: Vec<ConvLstmState<E>>,
}

/// Per-frame modulation inputs on a tape. `None` selects the corresponding
/// disabled path (identity scaling / no shift), which is also what the
/// ablation arms force.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameMods<'a> {
    pub gammas: Option<&'a [StageGammaVars]>,
    pub betas: Option<&'a [VarId]>,
}

/// Recurrence mode of a frame pass.
pub enum Recurrence<'a> {
    /// ConvLSTM cells replaced by the identity (phase-1 architecture).
    Bypass,
    /// Active cells reading the given per-stage states.
    Active(&'a [StateVars]),
}

#[derive(Debug, Clone)]
pub struct SegNet<E: Scalar> {
    pub config: ModelConfig,
    encoder: Vec<EncoderStage<E>>,
    cells: Vec<ConvLstmCell<E>>,
    pub vm: VisualModulatorNet<E>,
    pub sm: SpatialModulatorNet<E>,
    dec_taps: Vec<Conv2dLayer<E>>,
    dec_fuse: Conv2dLayer<E>,
    dec_head: Conv2dLayer<E>,
}

/// Deterministic model construction from the config seed.
pub fn build<E: Scalar>(config: &ModelConfig) -> Result<SegNet<E>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = Vec::with_capacity(config.num_stages());
    let mut c_in = 3;
    for (i, &c_out) in config.stage_channels.iter().enumerate() {
        let conv1 = Conv2dLayer::new(&format!("encoder.stage{}.conv1", i + 1), c_in, c_out, 3, 1, 1, &mut rng);
        let conv2 = Conv2dLayer::new(&format!("encoder.stage{}.conv2", i + 1), c_out, c_out, 3, 1, 1, &mut rng);
        encoder.push(EncoderStage { conv1, conv2 });
        c_in = c_out;
    }
    let cells = config
        .modulated_stages()
        .map(|i| {
            let c = config.stage_channels[i];
            ConvLstmCell::new(&format!("convlstm.{}", i + 1), c, c, &mut rng)
        })
        .collect();
    let vm = VisualModulatorNet::new(
        config.crop_size,
        &config.vm_trunk_channels(),
        &config.modulated_stage_channels(),
        &mut rng,
    );
    let sm = SpatialModulatorNet::new(MODULATED_STAGE_COUNT);
    let dec_taps = config
        .modulated_stages()
        .map(|i| {
            Conv2dLayer::new(
                &format!("decoder.tap{}", i + 1),
                config.stage_channels[i],
                config.hypercolumn_width,
                1,
                1,
                0,
                &mut rng,
            )
        })
        .collect();
    let dec_fuse = Conv2dLayer::new(
        "decoder.fuse",
        config.hypercolumn_width,
        config.hypercolumn_width,
        3,
        1,
        1,
        &mut rng,
    );
    let dec_head = Conv2dLayer::new("decoder.head", config.hypercolumn_width, 1, 1, 1, 0, &mut rng);
    Ok(SegNet {
        config: config.clone(),
        encoder,
        cells,
        vm,
        sm,
        dec_taps,
        dec_fuse,
        dec_head,
    })
}

impl<E: Scalar> SegNet<E> {
    pub fn init_state(&self) -> RecurrentState<E> {
        let dims = self.config.modulated_stage_dims();
        let chans = self.config.modulated_stage_channels();
        RecurrentState {
            states: dims
                .iter()
                .zip(&chans)
                .map(|(&(h, w), &c)| init_state(1, c, h, w))
                .collect(),
        }
    }

    pub fn cells(&self) -> &[ConvLstmCell<E>] {
        &self.cells
    }

    /// All trainable parameters in a fixed order (checkpoint order).
    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut ps = Vec::new();
        for s in &self.encoder {
            ps.extend(s.conv1.params());
            ps.extend(s.conv2.params());
        }
        for c in &self.cells {
            ps.extend(c.params());
        }
        ps.extend(self.vm.params());
        ps.extend(self.sm.params());
        for t in &self.dec_taps {
            ps.extend(t.params());
        }
        ps.extend(self.dec_fuse.params());
        ps.extend(self.dec_head.params());
        ps
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut ps = Vec::new();
        for s in self.encoder.iter_mut() {
            ps.extend(s.conv1.params_mut());
            ps.extend(s.conv2.params_mut());
        }
        for c in self.cells.iter_mut() {
            ps.extend(c.params_mut());
        }
        ps.extend(self.vm.params_mut());
        ps.extend(self.sm.params_mut());
        for t in self.dec_taps.iter_mut() {
            ps.extend(t.params_mut());
        }
        ps.extend(self.dec_fuse.params_mut());
        ps.extend(self.dec_head.params_mut());
        ps
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// One frame on an existing tape. Returns the logits slot and, when
    /// recurrence is active, the new per-stage states.
    pub fn forward_frame_tape(
        &self,
        tape: &mut Tape<E>,
        frame: VarId,
        mods: FrameMods<'_>,
        recurrence: Recurrence<'_>,
    ) -> Result<(VarId, Option<Vec<StateVars>>)> {
        let s = tape.shape(frame);
        if s.n != 1 || s.c != 3 || s.h != self.config.input_h || s.w != self.config.input_w {
            return Err(Error::dim(
                "frame",
                self.config.input_h,
                s.h,
                format!("expected [1,3,{},{}]", self.config.input_h, self.config.input_w),
            ));
        }
        if let Some(g) = mods.gammas {
            if g.len() != MODULATED_STAGE_COUNT {
                return Err(Error::dim("gammas", MODULATED_STAGE_COUNT, g.len(), "forward_frame"));
            }
        }
        if let Some(b) = mods.betas {
            if b.len() != MODULATED_STAGE_COUNT {
                return Err(Error::dim("betas", MODULATED_STAGE_COUNT, b.len(), "forward_frame"));
            }
        }
        let first_mod = self.config.modulated_stages().start;
        let mut new_states = match recurrence {
            Recurrence::Active(states) => {
                if states.len() != MODULATED_STAGE_COUNT {
                    return Err(Error::dim("states", MODULATED_STAGE_COUNT, states.len(), "forward_frame"));
                }
                Some(Vec::with_capacity(MODULATED_STAGE_COUNT))
            }
            Recurrence::Bypass => None,
        };

        let mut x = frame;
        let mut taps = Vec::with_capacity(MODULATED_STAGE_COUNT);
        let last = self.encoder.len() - 1;
        for (i, stage) in self.encoder.iter().enumerate() {
            let a = stage.conv1.forward(tape, x)?;
            let a = tape.relu(a)?;
            let b = stage.conv2.forward(tape, a)?;
            let mut f = tape.relu(b)?;
            if i >= first_mod {
                let m = i - first_mod;
                let gamma_conv = mods.gammas.map(|g| g[m].conv);
                let beta = mods.betas.map(|b| b[m]);
                f = modulate(tape, f, gamma_conv, beta)?;
                let h = match recurrence {
                    Recurrence::Active(states) => {
                        let (h, s_new) = self.cells[m].step(tape, f, states[m])?;
                        new_states.as_mut().unwrap().push(s_new);
                        modulate(tape, h, mods.gammas.map(|g| g[m].lstm), None)?
                    }
                    Recurrence::Bypass => f,
                };
                taps.push(h);
                x = h;
            } else {
                x = f;
            }
            if i != last {
                x = tape.maxpool2(x)?;
            }
        }

        let mut fused: Option<VarId> = None;
        for (tap_layer, &tap) in self.dec_taps.iter().zip(&taps) {
            let t = tap_layer.forward(tape, tap)?;
            let t = tape.upsample_bilinear(t, self.config.input_h, self.config.input_w)?;
            fused = Some(match fused {
                None => t,
                Some(acc) => tape.add(acc, t)?,
            });
        }
        let fused = fused.expect("at least one decoder tap");
        let d = self.dec_fuse.forward(tape, fused)?;
        let d = tape.relu(d)?;
        let logits = self.dec_head.forward(tape, d)?;
        Ok((logits, new_states))
    }

    /// Bind value-level modulation params into a tape as constants.
    pub fn bind_mods(
        &self,
        tape: &mut Tape<E>,
        mods: &ModulationParams<E>,
    ) -> Result<(Vec<StageGammaVars>, Vec<VarId>)> {
        let chans = self.config.modulated_stage_channels();
        if mods.gammas.len() != 2 * MODULATED_STAGE_COUNT {
            return Err(Error::dim("gammas", 2 * MODULATED_STAGE_COUNT, mods.gammas.len(), "bind_mods"));
        }
        if mods.betas.len() != MODULATED_STAGE_COUNT {
            return Err(Error::dim("betas", MODULATED_STAGE_COUNT, mods.betas.len(), "bind_mods"));
        }
        let mut gammas = Vec::with_capacity(MODULATED_STAGE_COUNT);
        for m in 0..MODULATED_STAGE_COUNT {
            let c = chans[m];
            if mods.gammas[m].len() != c || mods.gammas[m + MODULATED_STAGE_COUNT].len() != c {
                return Err(Error::dim("gamma_len", c, mods.gammas[m].len(), "bind_mods"));
            }
            let conv = tape.leaf(Tensor::new(Shape::new(1, c, 1, 1), mods.gammas[m].clone()));
            let lstm = tape.leaf(Tensor::new(
                Shape::new(1, c, 1, 1),
                mods.gammas[m + MODULATED_STAGE_COUNT].clone(),
            ));
            gammas.push(StageGammaVars { conv, lstm });
        }
        let betas = mods.betas.iter().map(|b| tape.leaf(b.clone())).collect();
        Ok((gammas, betas))
    }

    /// One frame on plain values. `mods: None` runs the modulation-disabled
    /// path; recurrence is active with the given state.
    pub fn forward_frame(
        &self,
        frame: &Tensor<E>,
        mods: Option<&ModulationParams<E>>,
        state: &RecurrentState<E>,
    ) -> Result<(Tensor<E>, RecurrentState<E>)> {
        let mut tape = Tape::new();
        let f = tape.leaf(frame.clone());
        let (gammas, betas) = match mods {
            Some(m) => {
                let (g, b) = self.bind_mods(&mut tape, m)?;
                (Some(g), Some(b))
            }
            None => (None, None),
        };
        let states: Vec<StateVars> = state.states.iter().map(|s| StateVars::bind(&mut tape, s)).collect();
        let fm = FrameMods {
            gammas: gammas.as_deref(),
            betas: betas.as_deref(),
        };
        let (logits, new_states) = self.forward_frame_tape(&mut tape, f, fm, Recurrence::Active(&states))?;
        let new_states = new_states.unwrap();
        Ok((
            tape.detach(logits),
            RecurrentState {
                states: new_states
                    .iter()
                    .map(|s| ConvLstmState {
                        h: tape.detach(s.h),
                        c: tape.detach(s.c),
                    })
                    .collect(),
            },
        ))
    }

    /// Frames through a zero-initialized state with gammas fixed for the
    /// whole sequence and betas recomputed per frame from the given location
    /// heatmaps. Returns one logits map per frame.
    pub fn forward_sequence(
        &self,
        frames: &[Tensor<E>],
        gammas: Option<&[Vec<E>]>,
        heatmaps: Option<&[Tensor<E>]>,
        use_recurrence: bool,
    ) -> Result<Vec<Tensor<E>>> {
        if frames.is_empty() {
            return Err(Error::Data("forward_sequence on empty frame list".into()));
        }
        if let Some(h) = heatmaps {
            if h.len() != frames.len() {
                return Err(Error::dim("heatmaps", frames.len(), h.len(), "forward_sequence"));
            }
        }
        let mut state = self.init_state();
        let mut out = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let mut tape = Tape::new();
            let f = tape.leaf(frame.clone());
            let gamma_vars = match gammas {
                Some(gs) => Some(self.bind_gammas(&mut tape, gs)?),
                None => None,
            };
            let beta_vars = match heatmaps {
                Some(hs) => Some(self.sm.forward(&mut tape, &hs[t], &self.config.modulated_stage_dims())?),
                None => None,
            };
            let fm = FrameMods {
                gammas: gamma_vars.as_deref(),
                betas: beta_vars.as_deref(),
            };
            if use_recurrence {
                let states: Vec<StateVars> =
                    state.states.iter().map(|s| StateVars::bind(&mut tape, s)).collect();
                let (logits, new_states) = self.forward_frame_tape(&mut tape, f, fm, Recurrence::Active(&states))?;
                state = RecurrentState {
                    states: new_states
                        .unwrap()
                        .iter()
                        .map(|s| ConvLstmState {
                            h: tape.detach(s.h),
                            c: tape.detach(s.c),
                        })
                        .collect(),
                };
                out.push(tape.detach(logits));
            } else {
                let (logits, _) = self.forward_frame_tape(&mut tape, f, fm, Recurrence::Bypass)?;
                out.push(tape.detach(logits));
            }
        }
        Ok(out)
    }

    /// Bind per-sequence gamma vectors (conv stages then lstm stages).
    pub fn bind_gammas(&self, tape: &mut Tape<E>, gammas: &[Vec<E>]) -> Result<Vec<StageGammaVars>> {
        let chans = self.config.modulated_stage_channels();
        if gammas.len() != 2 * MODULATED_STAGE_COUNT {
            return Err(Error::dim("gammas", 2 * MODULATED_STAGE_COUNT, gammas.len(), "bind_gammas"));
        }
        let mut out = Vec::with_capacity(MODULATED_STAGE_COUNT);
        for m in 0..MODULATED_STAGE_COUNT {
            let c = chans[m];
            if gammas[m].len() != c {
                return Err(Error::dim("gamma_len", c, gammas[m].len(), "bind_gammas"));
            }
            let conv = tape.leaf(Tensor::new(Shape::new(1, c, 1, 1), gammas[m].clone()));
            let lstm = tape.leaf(Tensor::new(
                Shape::new(1, c, 1, 1),
                gammas[m + MODULATED_STAGE_COUNT].clone(),
            ));
            out.push(StageGammaVars { conv, lstm });
        }
        Ok(out)
    }

    /// Identity modulation parameters (gamma = 1, beta = 0).
    pub fn identity_mods(&self) -> ModulationParams<E> {
        let chans = self.config.modulated_stage_channels();
        let dims = self.config.modulated_stage_dims();
        let mut gammas = Vec::with_capacity(2 * MODULATED_STAGE_COUNT);
        for pass in 0..2 {
            let _ = pass;
            for &c in &chans {
                gammas.push(vec![E::ONE; c]);
            }
        }
        ModulationParams {
            gammas,
            betas: dims.iter().map(|&(h, w)| Tensor::zeros(Shape::new(1, 1, h, w))).collect(),
        }
    }
}

/// Threshold the sigmoid of single-channel logits; strictly greater, so an
/// exactly-0 logit map at threshold 0.5 yields an empty mask.
pub fn predict_mask<E: Scalar>(logits: &Tensor<E>, threshold: f64) -> Result<Mask> {
    if logits.shape.n != 1 || logits.shape.c != 1 {
        return Err(Error::dim("channels", 1, logits.shape.c, "predict_mask"));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must be in (0,1), got {threshold}")));
    }
    let (h, w) = (logits.shape.h, logits.shape.w);
    let mut m = Mask::new(h, w);
    for (i, &l) in logits.data.iter().enumerate() {
        let p = 1.0 / (1.0 + (-l.to_f64()).exp());
        m.data[i] = p > threshold;
    }
    Ok(m)
}

/// Sigmoid probabilities of single-channel logits as f64.
pub fn probabilities<E: Scalar>(logits: &Tensor<E>) -> Vec<f64> {
    logits
        .data
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l.to_f64()).exp()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::tensor::checkpoint;
    use crate::tensor::gradcheck::{fill_uniform, grad_check_params, FdTarget};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_h: 16,
            input_w: 16,
            stage_channels: vec![4, 4, 8],
            hypercolumn_width: 4,
            crop_size: 16,
            seed: 7,
        }
    }

    fn rand_frame(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
        fill_uniform(&mut t, 0.0, 1.0, seed);
        t
    }

    #[test]
    fn config_validation() {
        assert!(toy_config().validate().is_ok());
        let mut bad = toy_config();
        bad.input_h = 18; // not divisible by 4
        assert!(bad.validate().is_err());
        let mut bad = toy_config();
        bad.stage_channels = vec![4, 4];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn build_is_deterministic_bitwise() {
        let cfg = toy_config();
        let a: SegNet<f64> = build(&cfg).unwrap();
        let b: SegNet<f64> = build(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        checkpoint::save(&pa, &a.parameters()).unwrap();
        checkpoint::save(&pb, &b.parameters()).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

        let mut other_cfg = cfg.clone();
        other_cfg.seed = 8;
        let c: SegNet<f64> = build(&other_cfg).unwrap();
        let pc = dir.path().join("c.ckpt");
        checkpoint::save(&pc, &c.parameters()).unwrap();
        assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pc).unwrap());
    }

    #[test]
    fn parameter_count_matches_config_arithmetic() {
        // independent count from the architecture definition
        fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
            c_out * c_in * k * k + c_out
        }
        let cfg = toy_config();
        let model: SegNet<f64> = build(&cfg).unwrap();
        let mut want = 0usize;
        let mut c_in = 3;
        for &c in &cfg.stage_channels {
            want += conv_params(c_in, c, 3) + conv_params(c, c, 3);
            c_in = c;
        }
        for &c in &cfg.modulated_stage_channels() {
            // 4 input kernels + 4 hidden kernels + 4 biases
            want += 4 * (c * c * 9) + 4 * (c * c * 9) + 4 * c;
        }
        let trunk: Vec<usize> = cfg.stage_channels.iter().map(|&c| (c / 2).max(2)).collect();
        let mut t_in = 3;
        for &c in &trunk {
            want += conv_params(t_in, c, 3) + conv_params(c, c, 3);
            t_in = c;
        }
        let t_last = *trunk.last().unwrap();
        for &c in &cfg.modulated_stage_channels() {
            want += 2 * conv_params(t_last, c, 1); // conv + lstm head
        }
        want += 3 * conv_params(1, 1, 1); // spatial modulator
        for &c in &cfg.modulated_stage_channels() {
            want += conv_params(c, cfg.hypercolumn_width, 1);
        }
        want += conv_params(cfg.hypercolumn_width, cfg.hypercolumn_width, 3);
        want += conv_params(cfg.hypercolumn_width, 1, 1);
        assert_eq!(model.param_count(), want);

        // frozen value for the default config, derived from the same arithmetic
        let default_model: SegNet<f32> = build(&ModelConfig::default()).unwrap();
        assert_eq!(default_model.param_count(), 1_178_607);
    }

    #[test]
    fn logits_shape_contract() {
        for cfg in [
            toy_config(),
            ModelConfig {
                input_h: 32,
                input_w: 16,
                stage_channels: vec![4, 6, 6, 8],
                hypercolumn_width: 4,
                crop_size: 16,
                seed: 1,
            },
        ] {
            let model: SegNet<f64> = build(&cfg).unwrap();
            let frame = rand_frame(cfg.input_h, cfg.input_w, 3);
            let (logits, _) = model.forward_frame(&frame, None, &model.init_state()).unwrap();
            assert_eq!(logits.shape, Shape::new(1, 1, cfg.input_h, cfg.input_w));
        }
    }

    #[test]
    fn identity_mods_equal_disabled_path() {
        // fresh model and randomized model, several random inputs
        let cfg = toy_config();
        for model_seed in [0u64, 1] {
            let mut model: SegNet<f64> = build(&cfg).unwrap();
            if model_seed == 1 {
                for (i, p) in model.parameters_mut().into_iter().enumerate() {
                    fill_uniform(&mut p.value, -0.3, 0.3, 1000 + i as u64);
                }
            }
            let ident = model.identity_mods();
            for seed in 0..5 {
                let frame = rand_frame(16, 16, seed);
                let (a, sa) = model.forward_frame(&frame, Some(&ident), &model.init_state()).unwrap();
                let (b, sb) = model.forward_frame(&frame, None, &model.init_state()).unwrap();
                for (x, y) in a.data.iter().zip(&b.data) {
                    assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
                }
                for (x, y) in sa.states.iter().zip(&sb.states) {
                    for (hx, hy) in x.h.data.iter().zip(&y.h.data) {
                        assert!((hx - hy).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn modulation_changes_output() {
        let cfg = toy_config();
        let model: SegNet<f64> = build(&cfg).unwrap();
        let frame = rand_frame(16, 16, 9);
        let mut mods = model.identity_mods();
        mods.gammas[0] = vec![2.0, 0.5, 1.5, 0.1];
        for b in mods.betas.iter_mut() {
            fill_uniform(b, -0.5, 0.5, 31);
        }
        let (a, _) = model.forward_frame(&frame, Some(&mods), &model.init_state()).unwrap();
        let (b, _) = model.forward_frame(&frame, None, &model.init_state()).unwrap();
        let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "modulation had no effect");
    }

    #[test]
    fn state_isolation_between_sequences() {
        let cfg = toy_config();
        let model: SegNet<f64> = build(&cfg).unwrap();
        let fa: Vec<Tensor<f64>> = (0..3).map(|t| rand_frame(16, 16, 100 + t)).collect();
        let fb: Vec<Tensor<f64>> = (0..3).map(|t| rand_frame(16, 16, 200 + t)).collect();

        // sequential runs
        let la = model.forward_sequence(&fa, None, None, true).unwrap();
        let lb = model.forward_sequence(&fb, None, None, true).unwrap();

        // interleaved with private states
        let mut sa = model.init_state();
        let mut sb = model.init_state();
        for t in 0..3 {
            let (out_a, na) = model.forward_frame(&fa[t], None, &sa).unwrap();
            let (out_b, nb) = model.forward_frame(&fb[t], None, &sb).unwrap();
            sa = na;
            sb = nb;
            for (x, y) in out_a.data.iter().zip(&la[t].data) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in out_b.data.iter().zip(&lb[t].data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_sequence_reduces_to_forward_frame() {
        let cfg = toy_config();
        let model: SegNet<f64> = build(&cfg).unwrap();
        let frame = rand_frame(16, 16, 55);
        let seq = model.forward_sequence(std::slice::from_ref(&frame), None, None, true).unwrap();
        let (single, _) = model.forward_frame(&frame, None, &model.init_state()).unwrap();
        assert_eq!(seq.len(), 1);
        for (x, y) in seq[0].data.iter().zip(&single.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_frame_outputs_stay_bounded() {
        let cfg = toy_config();
        let model: SegNet<f64> = build(&cfg).unwrap();
        let frame = rand_frame(16, 16, 77);
        let frames: Vec<Tensor<f64>> = (0..6).map(|_| frame.clone()).collect();
        let logits = model.forward_sequence(&frames, None, None, true).unwrap();
        for l in &logits {
            assert!(l.all_finite());
            assert!(l.data.iter().all(|v| v.abs() < 1e4));
        }
    }

    #[test]
    fn bypass_ignores_state_and_matches_itself() {
        let cfg = toy_config();
        let model: SegNet<f64> = build(&cfg).unwrap();
        let frame = rand_frame(16, 16, 88);
        let a = model.forward_sequence(std::slice::from_ref(&frame), None, None, false).unwrap();
        let b = model.forward_sequence(std::slice::from_ref(&frame), None, None, false).unwrap();
        assert_eq!(a[0].data, b[0].data);
    }

    #[test]
    fn predict_mask_tie_and_monotone() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let m = predict_mask(&logits, 0.5).unwrap();
        assert!(m.is_empty_mask()); // strict inequality at exactly 0.5

        let big = Tensor::<f64>::full(Shape::new(1, 1, 4, 4), 50.0);
        assert_eq!(predict_mask(&big, 0.5).unwrap().count(), 16);

        let mut l = Tensor::<f64>::zeros(Shape::new(1, 1, 6, 6));
        fill_uniform(&mut l, -2.0, 2.0, 5);
        let mut prev = usize::MAX;
        for th in [0.2, 0.4, 0.6, 0.8] {
            let count = predict_mask(&l, th).unwrap().count();
            assert!(count <= prev);
            prev = count;
        }
        assert!(predict_mask(&l, 0.0).is_err());
    }

    struct ModelFd {
        model: SegNet<f64>,
        frames: Vec<Tensor<f64>>,
        crop: Tensor<f64>,
        heatmaps: Vec<Tensor<f64>>,
        gts: Vec<Mask>,
    }

    impl ModelFd {
        /// Full pipeline loss: gamma from the crop through the VM, beta per
        /// frame through the SM, recurrent forward, mean Lovasz over frames.
        fn run(&self) -> Result<(f64, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let crop = tape.leaf(self.crop.clone());
            let gammas = self.model.vm.forward(&mut tape, crop)?;
            let mut states: Vec<StateVars> = self
                .model
                .init_state()
                .states
                .iter()
                .map(|s| StateVars::bind(&mut tape, s))
                .collect();
            let mut losses_v = Vec::new();
            for (t, frame) in self.frames.iter().enumerate() {
                let betas = self.model.sm.forward(
                    &mut tape,
                    &self.heatmaps[t],
                    &self.model.config.modulated_stage_dims(),
                )?;
                let f = tape.leaf(frame.clone());
                let fm = FrameMods {
                    gammas: Some(&gammas),
                    betas: Some(&betas),
                };
                let (logits, new_states) = self
                    .model
                    .forward_frame_tape(&mut tape, f, fm, Recurrence::Active(&states))?;
                states = new_states.unwrap();
                losses_v.push(losses::lovasz_hinge(&mut tape, logits, &self.gts[t])?);
            }
            let mut acc = losses_v[0];
            for &l in &losses_v[1..] {
                acc = tape.add(acc, l)?;
            }
            let loss = tape.scale(acc, 1.0 / losses_v.len() as f64)?;
            tape.backward(loss)?;
            let grads = self
                .model
                .parameters()
                .iter()
                .map(|p| tape.param_grad(p).unwrap().to_vec())
                .collect();
            Ok((tape.value(loss).item(), grads))
        }
    }

    impl FdTarget for ModelFd {
        fn param_count(&self) -> usize {
            self.model.parameters().len()
        }
        fn param_len(&self, p: usize) -> usize {
            self.model.parameters()[p].numel()
        }
        fn param_name(&self, p: usize) -> String {
            self.model.parameters()[p].name.clone()
        }
        fn get(&self, p: usize, i: usize) -> f64 {
            self.model.parameters()[p].value.data[i]
        }
        fn set(&mut self, p: usize, i: usize, v: f64) {
            self.model.parameters_mut()[p].value.data[i] = v;
        }
        fn eval(&self) -> Result<f64> {
            Ok(self.run()?.0)
        }
        fn analytic(&self) -> Result<Vec<Vec<f64>>> {
            Ok(self.run()?.1)
        }
    }

    /// A smaller cousin of the acceptance gradcheck: tiny stages, two frames,
    /// randomized heads so every component sees gradient.
    #[test]
    fn tiny_model_full_pipeline_gradcheck() {
        let cfg = ModelConfig {
            input_h: 8,
            input_w: 8,
            stage_channels: vec![2, 2, 3],
            hypercolumn_width: 2,
            crop_size: 8,
            seed: 3,
        };
        let mut model: SegNet<f64> = build(&cfg).unwrap();
        for (i, p) in model.parameters_mut().into_iter().enumerate() {
            if p.value.data.iter().all(|&v| v == 0.0) {
                fill_uniform(&mut p.value, -0.2, 0.2, 5000 + i as u64);
            }
        }
        let frames: Vec<Tensor<f64>> = (0..2).map(|t| rand_frame(8, 8, 300 + t)).collect();
        let crop = rand_frame(8, 8, 400);
        let blob = crate::modulators::GaussianBlob {
            mu_x: 4.2,
            mu_y: 3.7,
            sigma_x: 2.0,
            sigma_y: 1.5,
        };
        let heatmaps: Vec<Tensor<f64>> = (0..2).map(|_| crate::modulators::render_blob(&blob, 8, 8)).collect();
        let gts: Vec<Mask> = (0..2)
            .map(|t| Mask::from_fn(8, 8, |y, x| (2 + t..5 + t).contains(&y) && (3..6).contains(&x)))
            .collect();
        let mut target = ModelFd {
            model,
            frames,
            crop,
            heatmaps,
            gts,
        };
        let report = grad_check_params(&mut target, 1e-5, 1e-3).unwrap();
        assert!(
            report.pass,
            "max rel err {} at {}[{}] over {} coords",
            report.max_rel_err, report.worst_param, report.worst_coord, report.checked
        );
    }
}
