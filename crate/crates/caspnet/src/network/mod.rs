//! The prediction network: pyramid encoders for agent history and map, a
//! convolutional LSTM over the observed steps at every pyramid level,
//! multi-dilation attention, a residual upsampling decoder, and an output
//! LSTM that unrolls the future one step per iteration.

mod layers;

pub use layers::{
    AttentionBlock, BatchNorm2dLayer, BnUse, Conv2dLayer, ConvLstmLayer, ForwardCtx, GaborConv2d,
    InceptionResidual, Parameter, ParamId, Registry, ResidualUpsample,
};

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Record};
use crate::error::{Error, Result};
use crate::raster::{InputGridSeq, PredictionMode, INPUT_CHANNELS, OFFSET_CHANNELS};
use crate::tensor::{Dtype, Element, GridTensor, NodeId, NormMode, Tape};

#[derive(Debug, Clone)]
pub struct CaspNetConfig {
    /// pyramid depth
    pub levels: usize,
    /// feature channels per level, len == levels
    pub channels: Vec<usize>,
    /// dilation rates of the attention branches
    pub dilations: Vec<usize>,
    /// modulate the first map-encoder convolutions with oriented envelopes
    pub gabor_enabled: bool,
    /// orientation count of the envelope bank
    pub gabor_orientations: usize,
    /// which agents are supervised / predicted
    pub mode: PredictionMode,
    /// observed input steps M
    pub input_steps: usize,
    /// predicted future steps N
    pub output_steps: usize,
    /// grid rows
    pub u_extent: usize,
    /// grid columns
    pub v_extent: usize,
    /// weight-initialization seed
    pub seed: u64,
}

impl Default for CaspNetConfig {
    fn default() -> Self {
        CaspNetConfig {
            levels: 3,
            channels: vec![16, 32, 64],
            dilations: vec![1, 2],
            gabor_enabled: true,
            gabor_orientations: 4,
            mode: PredictionMode::SingleTarget,
            input_steps: 3,
            output_steps: 12,
            u_extent: 152,
            v_extent: 80,
            seed: 7,
        }
    }
}

impl CaspNetConfig {
    pub fn n_classes(&self) -> usize {
        self.mode.classes().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("network needs at least one level"));
        }
        if self.channels.len() != self.levels {
            return Err(Error::config(format!(
                "{} channel widths for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.dilations.is_empty() {
            return Err(Error::config("attention needs at least one dilation"));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::config("dilation rates must be positive"));
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "dilation rates must be strictly increasing",
            ));
        }
        if self.gabor_enabled && self.gabor_orientations == 0 {
            return Err(Error::config("orientation bank must not be empty"));
        }
        if self.input_steps == 0 || self.output_steps == 0 {
            return Err(Error::config("step counts must be positive"));
        }
        let down = 1usize << (self.levels - 1);
        if self.u_extent % down != 0 || self.v_extent % down != 0 {
            return Err(Error::config(format!(
                "grid {}x{} not divisible by the pyramid factor {down}",
                self.u_extent, self.v_extent
            )));
        }
        if self.u_extent == 0 || self.v_extent == 0 {
            return Err(Error::config("grid extents must be positive"));
        }
        Ok(())
    }
}

/// Encoder stage: convolution (optionally orientation-modulated), batch
/// norm, ReLU, and an optional 2x pooling at the end.
#[derive(Debug, Clone)]
struct EncBlock<T: Element> {
    conv: GaborConv2d<T>,
    bn: BatchNorm2dLayer,
    pool: bool,
}

impl<T: Element> EncBlock<T> {
    fn forward(&self, ctx: &mut ForwardCtx<T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        if self.pool {
            ctx.tape.max_pool2d(y, 2, 2)
        } else {
            Ok(y)
        }
    }
}

/// Network outputs for one future step, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// per-class occupancy probabilities, `(n_classes, U, V)`, in (0, 1)
    pub class_probs: NodeId,
    /// sub-pixel offsets, `(2, U, V)`, in (-0.5, 0.5)
    pub offsets: NodeId,
}

/// Everything one forward pass leaves on the tape.
#[derive(Debug)]
pub struct ForwardTrace {
    pub steps: Vec<StepOutput>,
    /// softmax-normalized attention weights per pyramid level
    pub attention_weights: Vec<NodeId>,
    /// batch-norm applications to fold into running statistics (train mode)
    pub bn_uses: Vec<BnUse>,
}

pub struct CaspNet<T: Element> {
    pub cfg: CaspNetConfig,
    pub registry: Registry<T>,
    traj_blocks: Vec<EncBlock<T>>,
    map_blocks: Vec<EncBlock<T>>,
    lstms: Vec<ConvLstmLayer>,
    attns: Vec<AttentionBlock>,
    ups: Vec<ResidualUpsample>,
    incs: Vec<InceptionResidual>,
    out_lstm: ConvLstmLayer,
    head: Conv2dLayer,
}

impl<T: Element> CaspNet<T> {
    pub fn new(cfg: CaspNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ch = &cfg.channels;
        let levels = cfg.levels;

        let mut traj_blocks = Vec::with_capacity(levels);
        for l in 0..levels {
            let c_in = if l == 0 { INPUT_CHANNELS } else { ch[l - 1] };
            traj_blocks.push(EncBlock {
                conv: GaborConv2d::plain(
                    &mut reg,
                    &mut rng,
                    &format!("traj.{l}.conv"),
                    c_in,
                    ch[l],
                    (3, 3),
                    (1, 1),
                ),
                bn: BatchNorm2dLayer::new(&mut reg, &format!("traj.{l}.bn"), ch[l]),
                pool: l > 0,
            });
        }

        let mut map_blocks = Vec::with_capacity(levels);
        let gabor_stages = levels.min(2);
        for l in 0..levels {
            let c_in = if l == 0 { 3 } else { ch[l - 1] };
            let name = format!("map.{l}.conv");
            let conv = if cfg.gabor_enabled && l < gabor_stages {
                GaborConv2d::new(
                    &mut reg,
                    &mut rng,
                    &name,
                    c_in,
                    ch[l],
                    (3, 3),
                    (1, 1),
                    cfg.gabor_orientations,
                )
            } else {
                GaborConv2d::plain(&mut reg, &mut rng, &name, c_in, ch[l], (3, 3), (1, 1))
            };
            map_blocks.push(EncBlock {
                conv,
                bn: BatchNorm2dLayer::new(&mut reg, &format!("map.{l}.bn"), ch[l]),
                pool: l > 0,
            });
        }

        let lstms = (0..levels)
            .map(|l| ConvLstmLayer::new(&mut reg, &mut rng, &format!("lstm.{l}"), ch[l], ch[l]))
            .collect();

        let attns = (0..levels)
            .map(|l| {
                AttentionBlock::new(&mut reg, &mut rng, &format!("attn.{l}"), ch[l], &cfg.dilations)
            })
            .collect();

        // Decoder: start from the deepest fused features (2 * ch[L-1]); per
        // level below, upsample to ch[l], concatenate the fused skip
        // (2 * ch[l]) and mix with an inception-residual block at 3 * ch[l].
        let mut ups = Vec::new();
        let mut incs = Vec::new();
        if levels == 1 {
            incs.push(InceptionResidual::new(&mut reg, &mut rng, "dec.0.inc", 2 * ch[0]));
        } else {
            let mut cur = 2 * ch[levels - 1];
            for l in (0..levels - 1).rev() {
                ups.push(ResidualUpsample::new(
                    &mut reg,
                    &mut rng,
                    &format!("dec.{l}.up"),
                    cur,
                    ch[l],
                ));
                incs.push(InceptionResidual::new(
                    &mut reg,
                    &mut rng,
                    &format!("dec.{l}.inc"),
                    3 * ch[l],
                ));
                cur = 3 * ch[l];
            }
        }
        let dec_out = if levels == 1 { 2 * ch[0] } else { 3 * ch[0] };

        let out_lstm = ConvLstmLayer::new(&mut reg, &mut rng, "out_lstm", dec_out, ch[0]);
        let head = Conv2dLayer::new(
            &mut reg,
            &mut rng,
            "head",
            ch[0],
            cfg.n_classes() + OFFSET_CHANNELS,
            (1, 1),
            1,
            (0, 0),
            1,
            true,
        );

        Ok(CaspNet {
            cfg,
            registry: reg,
            traj_blocks,
            map_blocks,
            lstms,
            attns,
            ups,
            incs,
            out_lstm,
            head,
        })
    }

    /// Run the network on one sample, recording onto `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &InputGridSeq<T>,
        map: &GridTensor<T>,
        mode: NormMode,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        if inputs.steps.len() != cfg.input_steps {
            return Err(Error::shape(format!(
                "{} input steps, expected {}",
                inputs.steps.len(),
                cfg.input_steps
            )));
        }
        let want = [INPUT_CHANNELS, cfg.u_extent, cfg.v_extent];
        for (i, s) in inputs.steps.iter().enumerate() {
            if s.shape() != want {
                return Err(Error::shape(format!(
                    "input step {i} has shape {:?}, expected {want:?}",
                    s.shape()
                )));
            }
        }
        if map.shape() != [3, cfg.u_extent, cfg.v_extent] {
            return Err(Error::shape(format!(
                "map has shape {:?}, expected (3, {}, {})",
                map.shape(),
                cfg.u_extent,
                cfg.v_extent
            )));
        }

        let mut ctx = ForwardCtx::new(tape, &self.registry, mode);

        // trajectory pyramid per observed step, then an LSTM over the steps
        // at every level
        let mut level_hidden: Vec<NodeId> = Vec::with_capacity(cfg.levels);
        let mut step_feats: Vec<NodeId> = inputs
            .steps
            .iter()
            .map(|s| ctx.tape.leaf(s.clone()))
            .collect();
        for l in 0..cfg.levels {
            for f in step_feats.iter_mut() {
                *f = self.traj_blocks[l].forward(&mut ctx, *f)?;
            }
            let mut state = None;
            for &f in &step_feats {
                state = Some(self.lstms[l].step(&mut ctx, f, state)?);
            }
            level_hidden.push(state.unwrap().0);
        }

        // map pyramid
        let mut map_feats: Vec<NodeId> = Vec::with_capacity(cfg.levels);
        let mut mx = ctx.tape.leaf(map.clone());
        for l in 0..cfg.levels {
            mx = self.map_blocks[l].forward(&mut ctx, mx)?;
            map_feats.push(mx);
        }

        // attention over the LSTM hidden state, fused with the map features
        let mut fused: Vec<NodeId> = Vec::with_capacity(cfg.levels);
        let mut attention_weights = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let (a, w) = self.attns[l].forward(&mut ctx, level_hidden[l])?;
            attention_weights.push(w);
            fused.push(ctx.tape.concat_channels(&[a, map_feats[l]])?);
        }

        // decoder
        let mut x = fused[cfg.levels - 1];
        if cfg.levels == 1 {
            x = self.incs[0].forward(&mut ctx, x)?;
        } else {
            for (i, l) in (0..cfg.levels - 1).rev().enumerate() {
                x = self.ups[i].forward(&mut ctx, x)?;
                x = ctx.tape.concat_channels(&[x, fused[l]])?;
                x = self.incs[i].forward(&mut ctx, x)?;
            }
        }

        // output LSTM: same decoded features in, one future step out per
        // iteration
        let n_classes = cfg.n_classes();
        let mut steps = Vec::with_capacity(cfg.output_steps);
        let mut state = None;
        for _ in 0..cfg.output_steps {
            let s = self.out_lstm.step(&mut ctx, x, state)?;
            let y = self.head.forward(&mut ctx, s.0)?;
            state = Some(s);
            let cls_pre = ctx.tape.slice_channels(y, 0, n_classes)?;
            let off_pre = ctx.tape.slice_channels(y, n_classes, n_classes + OFFSET_CHANNELS)?;
            let class_probs = ctx.tape.sigmoid(cls_pre);
            let off_t = ctx.tape.tanh(off_pre);
            let offsets = ctx.tape.scale(off_t, T::from_f64(0.5));
            steps.push(StepOutput {
                class_probs,
                offsets,
            });
        }

        Ok(ForwardTrace {
            steps,
            attention_weights,
            bn_uses: ctx.bn_uses,
        })
    }

    // -- persistence ---------------------------------------------------------

    /// All parameters plus the configuration, as named checkpoint records.
    /// `extra` records (optimizer state, step counters) are appended.
    pub fn to_records(&self, extra: Vec<(String, Record)>) -> Vec<(String, Record)>
    where
        Record: From<GridTensor<T>>,
    {
        let mut records = config_records(&self.cfg);
        for (_, p) in self.registry.iter() {
            records.push((p.name.clone(), Record::from(p.value.clone())));
        }
        records.extend(extra);
        records
    }

    pub fn save(&self, path: &Path, extra: Vec<(String, Record)>) -> Result<()>
    where
        Record: From<GridTensor<T>>,
    {
        save_checkpoint(path, &self.to_records(extra))
    }

    /// Rebuild a network from a checkpoint. Returns the network and the
    /// records that were not consumed (optimizer state and counters).
    pub fn load(path: &Path) -> Result<(Self, HashMap<String, Record>)> {
        let records = load_checkpoint(path)?;
        let mut map: HashMap<String, Record> = records.into_iter().collect();
        let cfg = config_from_records(&map)?;
        let mut net = CaspNet::<T>::new(cfg)?;
        for i in 0..net.registry.len() {
            let id = ParamId(i);
            let name = net.registry.name(id).to_string();
            let rec = map
                .remove(&name)
                .ok_or_else(|| Error::input(format!("checkpoint is missing parameter {name:?}")))?;
            let value = record_tensor::<T>(&rec);
            if value.shape() != net.registry.get(id).shape() {
                return Err(Error::shape(format!(
                    "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                    value.shape(),
                    net.registry.get(id).shape()
                )));
            }
            *net.registry.get_mut(id) = value;
        }
        map.retain(|k, _| !k.starts_with("cfg."));
        Ok((net, map))
    }
}

/// Decode a record into the element type of the network being built.
pub fn record_tensor<T: Element>(rec: &Record) -> GridTensor<T> {
    match rec {
        Record::F32(t) => t.cast::<T>(),
        Record::F64(t) => t.cast::<T>(),
    }
}

fn scalar_record(v: f64) -> Record {
    Record::F64(GridTensor::scalar(v))
}

fn vec_record(vs: impl Iterator<Item = f64>) -> Record {
    let data: Vec<f64> = vs.collect();
    Record::F64(GridTensor::from_fn(&[data.len()], |i| data[i]))
}

/// Configuration as self-describing `cfg.*` records. The seed is split into
/// two 32-bit halves so it survives the f64 payload exactly.
pub fn config_records(cfg: &CaspNetConfig) -> Vec<(String, Record)> {
    vec![
        ("cfg.levels".into(), scalar_record(cfg.levels as f64)),
        (
            "cfg.channels".into(),
            vec_record(cfg.channels.iter().map(|&c| c as f64)),
        ),
        (
            "cfg.dilations".into(),
            vec_record(cfg.dilations.iter().map(|&d| d as f64)),
        ),
        (
            "cfg.gabor_enabled".into(),
            scalar_record(if cfg.gabor_enabled { 1.0 } else { 0.0 }),
        ),
        (
            "cfg.gabor_orientations".into(),
            scalar_record(cfg.gabor_orientations as f64),
        ),
        (
            "cfg.mode".into(),
            scalar_record(match cfg.mode {
                PredictionMode::SingleTarget => 0.0,
                PredictionMode::Scene => 1.0,
            }),
        ),
        ("cfg.input_steps".into(), scalar_record(cfg.input_steps as f64)),
        ("cfg.output_steps".into(), scalar_record(cfg.output_steps as f64)),
        ("cfg.u_extent".into(), scalar_record(cfg.u_extent as f64)),
        ("cfg.v_extent".into(), scalar_record(cfg.v_extent as f64)),
        (
            "cfg.seed_hi".into(),
            scalar_record((cfg.seed >> 32) as f64),
        ),
        (
            "cfg.seed_lo".into(),
            scalar_record((cfg.seed & 0xffff_ffff) as f64),
        ),
    ]
}

fn cfg_scalar(map: &HashMap<String, Record>, key: &str) -> Result<f64> {
    map.get(key)
        .ok_or_else(|| Error::input(format!("checkpoint is missing {key:?}")))?
        .scalar_value()
}

fn cfg_vec(map: &HashMap<String, Record>, key: &str) -> Result<Vec<usize>> {
    let rec = map
        .get(key)
        .ok_or_else(|| Error::input(format!("checkpoint is missing {key:?}")))?;
    Ok(record_tensor::<f64>(rec)
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect())
}

pub fn config_from_records(map: &HashMap<String, Record>) -> Result<CaspNetConfig> {
    let mode = match cfg_scalar(map, "cfg.mode")? as i64 {
        0 => PredictionMode::SingleTarget,
        1 => PredictionMode::Scene,
        other => {
            return Err(Error::input(format!(
                "checkpoint has unknown prediction mode code {other}"
            )))
        }
    };
    let seed =
        ((cfg_scalar(map, "cfg.seed_hi")? as u64) << 32) | (cfg_scalar(map, "cfg.seed_lo")? as u64);
    Ok(CaspNetConfig {
        levels: cfg_scalar(map, "cfg.levels")? as usize,
        channels: cfg_vec(map, "cfg.channels")?,
        dilations: cfg_vec(map, "cfg.dilations")?,
        gabor_enabled: cfg_scalar(map, "cfg.gabor_enabled")? != 0.0,
        gabor_orientations: cfg_scalar(map, "cfg.gabor_orientations")? as usize,
        mode,
        input_steps: cfg_scalar(map, "cfg.input_steps")? as usize,
        output_steps: cfg_scalar(map, "cfg.output_steps")? as usize,
        u_extent: cfg_scalar(map, "cfg.u_extent")? as usize,
        v_extent: cfg_scalar(map, "cfg.v_extent")? as usize,
        seed,
    })
}

/// Checkpoint dtype of the stored parameters (first non-`cfg.` record).
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    let records = load_checkpoint(path)?;
    records
        .iter()
        .find(|(name, _)| !name.starts_with("cfg.") && !name.starts_with("opt.") && !name.starts_with("train."))
        .map(|(_, rec)| rec.dtype())
        .ok_or_else(|| Error::input("checkpoint holds no parameters"))
}
