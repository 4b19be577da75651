//! The two-stream forecaster: F2D-Net over frames, D2D-Net over density
//! maps, attention fusion and the flow-warped global residual.

mod dataset;
mod io;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::layers::mse;
use crate::autodiff::{ssim, Cbam, Conv, ConvLstmCell, ConvTranspose, Graph, Interp, LstmState, ParamId, ParamStore, Padding, Tensor4, Var};
use crate::error::{Error, Result};
use crate::grid::{DensityMap, Frame, Grid2D};

pub use dataset::{simulated_series, simulated_windows, window_starts, DatasetConfig, Series};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{loss_curve_csv, train, StepRecord, TrainConfig};

/// Which streams feed the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    F2dOnly,
    D2dOnly,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct F2dConfig {
    pub inception_blocks: usize,
    pub branch_kernels: Vec<usize>,
    pub branch_width: usize,
    /// Channels of the conv / transposed-conv stage after the inception blocks.
    pub feature_channels: usize,
    pub lstm_widths: Vec<usize>,
    pub lstm_kernels: Vec<usize>,
}

impl Default for F2dConfig {
    fn default() -> Self {
        Self {
            inception_blocks: 2,
            branch_kernels: vec![1, 3, 5, 7],
            branch_width: 4,
            feature_channels: 8,
            lstm_widths: vec![16, 16, 1],
            lstm_kernels: vec![3, 1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct D2dConfig {
    pub pool_stages: usize,
    pub base_channels: usize,
    pub bridge_widths: Vec<usize>,
    pub bridge_kernel: usize,
    pub upsample: Interp,
}

impl Default for D2dConfig {
    fn default() -> Self {
        Self {
            pool_stages: 3,
            base_channels: 8,
            bridge_widths: vec![5, 5, 5],
            bridge_kernel: 3,
            upsample: Interp::Bicubic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mse_weight: f64,
    pub ssim_weight: f64,
    /// Dynamic range `L` of density values inside SSIM.
    pub ssim_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mse_weight: 1.0,
            ssim_weight: 0.001,
            ssim_range: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Observed frames per window (N).
    pub frames: usize,
    pub resolution: usize,
    pub structure: Structure,
    pub use_flow_residual: bool,
    pub f2d: F2dConfig,
    pub d2d: D2dConfig,
    pub fusion_channels: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    /// Densities are multiplied by this before entering D2D-Net and the
    /// learned residual is divided by it.
    pub density_scale: f64,
    pub loss: LossConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            resolution: 64,
            structure: Structure::Joint,
            use_flow_residual: true,
            f2d: F2dConfig::default(),
            d2d: D2dConfig::default(),
            fusion_channels: 8,
            cbam_reduction: 2,
            cbam_kernel: 7,
            density_scale: 1.0,
            loss: LossConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow widths for single-core training runs.
    pub fn compact() -> Self {
        Self {
            f2d: F2dConfig {
                branch_width: 2,
                feature_channels: 4,
                lstm_widths: vec![2, 2, 1],
                ..F2dConfig::default()
            },
            d2d: D2dConfig {
                base_channels: 4,
                ..D2dConfig::default()
            },
            fusion_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.resolution < 8 {
            return bad(format!("resolution must be at least 8, got {}", self.resolution));
        }
        let f = &self.f2d;
        if f.inception_blocks == 0 || f.branch_kernels.is_empty() || f.branch_width == 0 || f.feature_channels == 0 {
            return bad("f2d widths and block count must be positive".into());
        }
        if f.branch_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("f2d branch kernels must be odd, got {:?}", f.branch_kernels));
        }
        if f.lstm_widths.is_empty() || f.lstm_widths.contains(&0) || f.lstm_widths.len() != f.lstm_kernels.len() {
            return bad("f2d ConvLSTM widths and kernels must be non-empty, positive and of equal length".into());
        }
        if f.lstm_kernels.iter().any(|k| k % 2 == 0) || self.d2d.bridge_kernel % 2 == 0 {
            return bad("ConvLSTM kernels must be odd".into());
        }
        let f2d_factor = 1usize << (f.inception_blocks - 1);
        if self.resolution % f2d_factor != 0 {
            return bad(format!("resolution {} not divisible by 2^{}", self.resolution, f.inception_blocks - 1));
        }
        let d = &self.d2d;
        if d.pool_stages == 0 || d.base_channels == 0 || d.bridge_widths.is_empty() || d.bridge_widths.contains(&0) {
            return bad("d2d stages, channels and bridge widths must be positive".into());
        }
        if d.pool_stages > 16 || self.resolution % (1usize << d.pool_stages) != 0 {
            return bad(format!("resolution {} not divisible by 2^{}", self.resolution, d.pool_stages));
        }
        if self.fusion_channels == 0 || self.cbam_reduction == 0 || self.cbam_kernel % 2 == 0 {
            return bad("fusion channels and CBAM reduction must be positive, CBAM kernel odd".into());
        }
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return bad(format!("density_scale must be positive, got {}", self.density_scale));
        }
        let l = &self.loss;
        if !(l.mse_weight >= 0.0 && l.ssim_weight >= 0.0 && l.ssim_range > 0.0) {
            return bad(format!("invalid loss weights {l:?}"));
        }
        Ok(())
    }

    fn has_f2d(&self) -> bool {
        self.structure != Structure::D2dOnly
    }

    fn has_d2d(&self) -> bool {
        self.structure != Structure::F2dOnly
    }

    fn d2d_channels(&self) -> usize {
        self.d2d.base_channels
    }
}

/// N observed frames and density maps, the target at `t + N dt`, and the
/// flow-warped last density.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub frames: Vec<Frame>,
    pub densities: Vec<DensityMap>,
    pub target: Option<DensityMap>,
    pub flow_warped: Option<DensityMap>,
}

impl SampleWindow {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = cfg.frames;
        if self.frames.len() != n || self.densities.len() != n {
            return Err(Error::InvalidValue(format!(
                "window has {} frames and {} density maps, model expects {n} of each",
                self.frames.len(),
                self.densities.len()
            )));
        }
        let r = (cfg.resolution, cfg.resolution);
        let dims = self
            .frames
            .iter()
            .map(Frame::dims)
            .chain(self.densities.iter().map(DensityMap::dims))
            .chain(self.target.iter().map(DensityMap::dims))
            .chain(self.flow_warped.iter().map(DensityMap::dims));
        for d in dims {
            if d != r {
                return Err(Error::DimensionMismatch(format!(
                    "window grid is {}x{}, model resolution is {}x{}",
                    d.0, d.1, r.0, r.1
                )));
            }
        }
        if cfg.use_flow_residual && self.flow_warped.is_none() {
            return Err(Error::InvalidValue("model uses the flow residual but the window has no warped density".into()));
        }
        Ok(())
    }
}

pub(crate) fn grid_tensor(grid: &Grid2D, scale: f64) -> Tensor4 {
    let (h, w) = grid.dims();
    let data = grid.values().iter().map(|v| v * scale).collect();
    Tensor4::from_vec([1, 1, h, w], data).expect("grid size")
}

#[derive(Debug, Clone)]
struct F2dNet {
    inceptions: Vec<Vec<Conv>>,
    conv: Conv,
    ups: Vec<ConvTranspose>,
    cells: Vec<ConvLstmCell>,
}

#[derive(Debug, Clone)]
struct D2dNet {
    encoder: Vec<Conv>,
    bridge: Vec<ConvLstmCell>,
    decoder: Vec<Conv>,
}

#[derive(Debug, Clone)]
struct Fusion {
    conv: Conv,
    cbam: Cbam,
}

/// Network parameters plus the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    f2d: Option<F2dNet>,
    d2d: Option<D2dNet>,
    fusion: Option<Fusion>,
    head: Conv,
    /// Output head used while pretraining D2D-Net on its own.
    d2d_aux: Option<Conv>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub prediction: Var,
    pub f2d: Option<Var>,
    pub d2d: Option<Var>,
}

impl Model {
    /// Builds a freshly initialised model. The output head starts at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;

        let f2d = if config.has_f2d() {
            let c = &config.f2d;
            let mut inceptions = Vec::new();
            let mut ch = 1;
            for b in 0..c.inception_blocks {
                let block = c
                    .branch_kernels
                    .iter()
                    .map(|&k| Conv::new(&mut store, &format!("f2d.inc{b}.k{k}"), ch, c.branch_width, k, 1, Padding::Same, rng))
                    .collect::<Result<Vec<_>>>()?;
                inceptions.push(block);
                ch = c.branch_width * c.branch_kernels.len();
            }
            let conv = Conv::new(&mut store, "f2d.conv", ch, c.feature_channels, 3, 1, Padding::Same, rng)?;
            let ups = (0..c.inception_blocks - 1)
                .map(|i| ConvTranspose::new(&mut store, &format!("f2d.up{i}"), c.feature_channels, c.feature_channels, 2, 2, 0, rng))
                .collect::<Result<Vec<_>>>()?;
            let mut cells = Vec::new();
            let mut cin = c.feature_channels;
            for (i, (&w, &k)) in c.lstm_widths.iter().zip(&c.lstm_kernels).enumerate() {
                cells.push(ConvLstmCell::new(&mut store, &format!("f2d.lstm{i}"), cin, w, k, rng)?);
                cin = w;
            }
            Some(F2dNet { inceptions, conv, ups, cells })
        } else {
            None
        };

        let d2d = if config.has_d2d() {
            let c = &config.d2d;
            let width = |l: usize| c.base_channels << l;
            let mut encoder = Vec::new();
            for l in 0..c.pool_stages {
                let cin = if l == 0 { 1 } else { width(l - 1) };
                encoder.push(Conv::new(&mut store, &format!("d2d.enc{l}"), cin, width(l), 3, 1, Padding::Same, rng)?);
            }
            let mut bridge = Vec::new();
            let mut cin = width(c.pool_stages - 1);
            for (i, &w) in c.bridge_widths.iter().enumerate() {
                bridge.push(ConvLstmCell::new(&mut store, &format!("d2d.bridge{i}"), cin, w, c.bridge_kernel, rng)?);
                cin = w;
            }
            let mut decoder = Vec::new();
            for l in (0..c.pool_stages).rev() {
                decoder.push(Conv::new(&mut store, &format!("d2d.dec{l}"), cin + width(l), width(l), 3, 1, Padding::Same, rng)?);
                cin = width(l);
            }
            Some(D2dNet { encoder, bridge, decoder })
        } else {
            None
        };

        let f2d_out = config.f2d.lstm_widths.last().copied().unwrap_or(1);
        let (fusion, head_in) = match config.structure {
            Structure::Joint => {
                let conv = Conv::new(&mut store, "fusion.conv", f2d_out + config.d2d_channels(), config.fusion_channels, 3, 1, Padding::Same, rng)?;
                let cbam = Cbam::new(&mut store, "fusion.cbam", config.fusion_channels, config.cbam_reduction, config.cbam_kernel, rng)?;
                (Some(Fusion { conv, cbam }), config.fusion_channels)
            }
            Structure::F2dOnly => (None, f2d_out),
            Structure::D2dOnly => (None, config.d2d_channels()),
        };
        let head = Conv::zeros(&mut store, "head", head_in, 1, 1)?;
        let d2d_aux = if config.structure == Structure::Joint {
            Some(Conv::zeros(&mut store, "d2d.aux", config.d2d_channels(), 1, 1)?)
        } else {
            None
        };

        Ok(Self {
            config,
            params: store,
            f2d,
            d2d,
            fusion,
            head,
            d2d_aux,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters of D2D-Net and its auxiliary head.
    pub fn d2d_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("d2d."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.bias.into_iter().chain([self.head.weight]).collect()
    }

    /// Final hidden state of the F2D ConvLSTM block, `(1, C, R, R)`.
    pub fn f2d_forward(&self, g: &mut Graph, frames: &[Var]) -> Result<Var> {
        self.f2d_forward_with(g, &self.params, frames)
    }

    fn f2d_forward_with(&self, g: &mut Graph, store: &ParamStore, frames: &[Var]) -> Result<Var> {
        let net = self
            .f2d
            .as_ref()
            .ok_or_else(|| Error::Config("model has no F2D stream".into()))?;
        self.check_count(frames.len(), "frames")?;
        let mut states: Vec<Option<LstmState>> = vec![None; net.cells.len()];
        let mut out = None;
        for &frame in frames {
            let mut f = frame;
            for (b, block) in net.inceptions.iter().enumerate() {
                if b > 0 {
                    f = g.maxpool2(f)?;
                }
                let mut branches = Vec::with_capacity(block.len());
                for conv in block {
                    let y = conv.forward(g, store, f)?;
                    branches.push(g.relu(y));
                }
                f = g.concat(&branches)?;
            }
            let y = net.conv.forward(g, store, f)?;
            f = g.relu(y);
            for up in &net.ups {
                let y = up.forward(g, store, f)?;
                f = g.relu(y);
            }
            for (cell, state) in net.cells.iter().zip(states.iter_mut()) {
                let s = cell.step(g, store, f, *state)?;
                *state = Some(s);
                f = s.h;
            }
            out = Some(f);
        }
        Ok(out.expect("at least two frames"))
    }

    /// U-Net style recurrent encoder-decoder over density maps, `(1, C, R, R)`.
    pub fn d2d_forward(&self, g: &mut Graph, densities: &[Var]) -> Result<Var> {
        self.d2d_forward_with(g, &self.params, densities)
    }

    fn d2d_forward_with(&self, g: &mut Graph, store: &ParamStore, densities: &[Var]) -> Result<Var> {
        let net = self
            .d2d
            .as_ref()
            .ok_or_else(|| Error::Config("model has no D2D stream".into()))?;
        self.check_count(densities.len(), "density maps")?;
        let mut states: Vec<Option<LstmState>> = vec![None; net.bridge.len()];
        let mut skips = Vec::new();
        let mut bottleneck = None;
        for &d in densities {
            skips.clear();
            let mut f = d;
            for (l, conv) in net.encoder.iter().enumerate() {
                if l > 0 {
                    f = g.maxpool2(f)?;
                }
                let y = conv.forward(g, store, f)?;
                f = g.relu(y);
                skips.push(f);
            }
            f = g.maxpool2(f)?;
            for (cell, state) in net.bridge.iter().zip(states.iter_mut()) {
                let s = cell.step(g, store, f, *state)?;
                *state = Some(s);
                f = s.h;
            }
            bottleneck = Some(f);
        }
        let mut x = bottleneck.expect("at least two density maps");
        for (conv, skip) in net.decoder.iter().zip(skips.iter().rev()) {
            let [_, _, h, w] = g.shape(*skip);
            x = g.resize(x, h, w, self.config.d2d.upsample)?;
            x = g.concat(&[x, *skip])?;
            let y = conv.forward(g, store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    fn check_count(&self, n: usize, what: &str) -> Result<()> {
        if n != self.config.frames {
            return Err(Error::InvalidValue(format!("got {n} {what}, model expects {}", self.config.frames)));
        }
        Ok(())
    }

    fn window_inputs(&self, g: &mut Graph, window: &SampleWindow) -> Result<(Vec<Var>, Vec<Var>, Option<Var>)> {
        window.validate(&self.config)?;
        let frames = window.frames.iter().map(|f| g.constant(grid_tensor(f.grid(), 1.0))).collect();
        let scale = self.config.density_scale;
        let densities = window.densities.iter().map(|d| g.constant(grid_tensor(d.grid(), scale))).collect();
        let warped = if self.config.use_flow_residual {
            window.flow_warped.as_ref().map(|d| g.constant(grid_tensor(d.grid(), 1.0)))
        } else {
            None
        };
        Ok((frames, densities, warped))
    }

    fn output(&self, g: &mut Graph, store: &ParamStore, head: &Conv, features: Var, warped: Option<Var>) -> Result<Var> {
        let r = head.forward(g, store, features)?;
        let r = if self.config.density_scale != 1.0 {
            g.affine(r, 1.0 / self.config.density_scale, 0.0)
        } else {
            r
        };
        let out = match warped {
            Some(w) => g.add(w, r)?,
            None => r,
        };
        Ok(g.relu(out))
    }

    /// Full forward pass on one window.
    pub fn forward(&self, g: &mut Graph, window: &SampleWindow) -> Result<ForwardVars> {
        self.forward_with(g, &self.params, window)
    }

    /// Forward pass reading weights from `store`, which must have this
    /// model's parameter layout.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, window: &SampleWindow) -> Result<ForwardVars> {
        let (frames, densities, warped) = self.window_inputs(g, window)?;
        let f2d = if self.config.has_f2d() { Some(self.f2d_forward_with(g, store, &frames)?) } else { None };
        let d2d = if self.config.has_d2d() { Some(self.d2d_forward_with(g, store, &densities)?) } else { None };
        let features = match (&self.fusion, f2d, d2d) {
            (Some(fusion), Some(a), Some(b)) => {
                let cat = g.concat(&[a, b])?;
                let y = fusion.conv.forward(g, store, cat)?;
                let y = g.relu(y);
                fusion.cbam.forward(g, store, y)?
            }
            (None, Some(a), None) => a,
            (None, None, Some(b)) => b,
            _ => unreachable!("structure determines the streams"),
        };
        let prediction = self.output(g, store, &self.head, features, warped)?;
        Ok(ForwardVars { prediction, f2d, d2d })
    }

    /// D2D-Net alone through its auxiliary head (pretraining path). No
    /// flow residual is added.
    pub fn d2d_pretrain_forward(&self, g: &mut Graph, window: &SampleWindow) -> Result<Var> {
        let aux = match (&self.d2d_aux, self.config.structure) {
            (Some(aux), _) => aux,
            (None, Structure::D2dOnly) => &self.head,
            _ => return Err(Error::Config("D2D pretraining needs a D2D stream".into())),
        };
        let (_, densities, _) = self.window_inputs(g, window)?;
        let d2d = self.d2d_forward(g, &densities)?;
        self.output(g, &self.params, aux, d2d, None)
    }

    pub fn predict(&self, window: &SampleWindow) -> Result<DensityMap> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, window)?;
        tensor_density(g.value(out.prediction))
    }
}

pub(crate) fn tensor_density(t: &Tensor4) -> Result<DensityMap> {
    let [_, _, h, w] = t.shape();
    DensityMap::new(Grid2D::new(h, w, t.data().to_vec())?)
}

/// `mse_weight * MSE + ssim_weight * (1 - SSIM)`.
pub fn loss(g: &mut Graph, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let m = mse(g, pred, target)?;
    let s = ssim(g, pred, target, cfg.ssim_range)?;
    let dissim = g.affine(s, -cfg.ssim_weight, cfg.ssim_weight);
    let m = g.affine(m, cfg.mse_weight, 0.0);
    g.add(m, dissim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::smooth_texture;

    fn tiny_config(structure: Structure) -> ModelConfig {
        ModelConfig {
            frames: 2,
            resolution: 16,
            structure,
            d2d: D2dConfig {
                pool_stages: 2,
                ..D2dConfig::default()
            },
            ..ModelConfig::compact()
        }
    }

    pub(crate) fn random_window(cfg: &ModelConfig, seed: u64) -> SampleWindow {
        let r = cfg.resolution;
        let frame = |s| Frame::new(smooth_texture(r, r, 2.0, s, 0.1, 0.9)).unwrap();
        let density = |s| DensityMap::new(smooth_texture(r, r, 2.0, s, 0.0, 0.02)).unwrap();
        SampleWindow {
            frames: (0..cfg.frames as u64).map(|i| frame(seed * 100 + i)).collect(),
            densities: (0..cfg.frames as u64).map(|i| density(seed * 100 + 50 + i)).collect(),
            target: Some(density(seed * 100 + 99)),
            flow_warped: Some(density(seed * 100 + 98)),
        }
    }

    #[test]
    fn default_config_validates() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::compact().validate().unwrap();
        let bad = ModelConfig {
            resolution: 60,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            frames: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shapes() {
        for s in [Structure::Joint, Structure::F2dOnly, Structure::D2dOnly] {
            let cfg = tiny_config(s);
            let model = Model::new(cfg.clone()).unwrap();
            let w = random_window(&cfg, 1);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &w).unwrap();
            assert_eq!(g.shape(out.prediction), [1, 1, 16, 16]);
            if let Some(f) = out.f2d {
                assert_eq!(g.shape(f), [1, 1, 16, 16]);
            }
            if let Some(d) = out.d2d {
                assert_eq!(&g.shape(d)[2..], &[16, 16]);
            }
        }
    }

    #[test]
    fn zero_head_reproduces_warped_density() {
        let cfg = tiny_config(Structure::Joint);
        let model = Model::new(cfg.clone()).unwrap();
        let w = random_window(&cfg, 2);
        let pred = model.predict(&w).unwrap();
        let warped = w.flow_warped.as_ref().unwrap();
        assert_eq!(pred.grid().values(), warped.grid().values());
    }

    #[test]
    fn frame_order_matters() {
        let cfg = tiny_config(Structure::F2dOnly);
        let model = Model::new(cfg.clone()).unwrap();
        let w = random_window(&cfg, 3);
        let run = |frames: &[Frame]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = frames.iter().map(|f| g.constant(grid_tensor(f.grid(), 1.0))).collect();
            let out = model.f2d_forward(&mut g, &vars).unwrap();
            g.value(out).clone()
        };
        let mut reversed = w.frames.clone();
        reversed.reverse();
        assert_ne!(run(&w.frames), run(&reversed));
    }

    #[test]
    fn wrong_counts_rejected() {
        let cfg = tiny_config(Structure::Joint);
        let model = Model::new(cfg.clone()).unwrap();
        let mut w = random_window(&cfg, 4);
        w.frames.pop();
        assert!(model.predict(&w).is_err());
        let mut w = random_window(&cfg, 4);
        w.flow_warped = None;
        assert!(model.predict(&w).is_err());
    }

    #[test]
    fn loss_zero_at_target() {
        let mut g = Graph::new();
        let t = g.constant(Tensor4::uniform([1, 1, 8, 8], 0.05, &mut ChaCha8Rng::seed_from_u64(1)).map(f64::abs));
        let l = loss(&mut g, t, t, &LossConfig::default()).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-15);
    }
}
