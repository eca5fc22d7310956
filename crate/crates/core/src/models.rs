//! Cost-map estimators built on a recurrent occupancy predictor, and the
//! imitation network that reads their cost maps.
//!
//! All grids are `(N, C, H, W)`. The map encoder and the predictor run at
//! `H/4`; the multi-step estimator bottoms out at `H/8`, so `H` and `W` must be
//! divisible by 8.

use diffnet::{Conv2dSpec, Deconv2dSpec, GruConvParams, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::grid::{CostMapStack, GridConfig, OccupancyGrid, SemanticMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Per-step cost estimator applied after each predicted frame.
    Rcme,
    /// One encoder/decoder emitting all T cost maps.
    Mscme,
    /// MSCME fed the observed frames directly, without the occupancy predictor.
    #[serde(rename = "mscme-nopred")]
    MscmeNoPred,
}

impl ModelKind {
    pub fn has_predictor(self) -> bool {
        !matches!(self, ModelKind::MscmeNoPred)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Rcme => "rcme",
            ModelKind::Mscme => "mscme",
            ModelKind::MscmeNoPred => "mscme-nopred",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Taken from the run's grid section rather than serialized here.
    #[serde(skip)]
    pub grid: GridConfig,
    /// Multiplier applied to every filter count except the final T outputs.
    pub filter_scale: f64,
    pub map_channels: usize,
    /// Number of intention clusters K; 0 builds no imitation network.
    pub intentions: usize,
    pub map_encoder_filters: Vec<usize>,
    pub ogm_encoder_filters: Vec<usize>,
    pub hidden_channels: usize,
    pub diff_channels: usize,
    pub classifier_filters: usize,
    pub cost_encoder_filters: Vec<usize>,
    pub cost_decoder_filters: Vec<usize>,
    pub mscme_encoder_filters: Vec<usize>,
    /// Last entry is the number of output maps and must equal the horizon.
    pub mscme_decoder_filters: Vec<usize>,
    pub imitation_filters: Vec<usize>,
    pub imitation_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let grid = GridConfig::default();
        ModelConfig {
            filter_scale: 0.5,
            map_channels: 3,
            intentions: 0,
            map_encoder_filters: vec![16, 32],
            ogm_encoder_filters: vec![16, 32],
            hidden_channels: 32,
            diff_channels: 8,
            classifier_filters: 16,
            cost_encoder_filters: vec![32, 64],
            cost_decoder_filters: vec![64, 32],
            mscme_encoder_filters: vec![32, 64, 128],
            mscme_decoder_filters: vec![128, 64, 32, grid.horizon],
            imitation_filters: vec![32, 64, 64],
            imitation_hidden: 128,
            grid,
        }
    }
}

impl ModelConfig {
    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.filter_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        g.validate()?;
        if !(self.filter_scale > 0.0) {
            return input_err("filter_scale must be positive");
        }
        if g.height % 8 != 0 || g.width % 8 != 0 {
            return input_err(format!("grid {}×{} must be divisible by 8", g.height, g.width));
        }
        if self.map_channels == 0 {
            return input_err("map_channels must be positive");
        }
        let lists = [
            &self.map_encoder_filters,
            &self.ogm_encoder_filters,
            &self.cost_encoder_filters,
            &self.cost_decoder_filters,
            &self.mscme_encoder_filters,
            &self.mscme_decoder_filters,
            &self.imitation_filters,
        ];
        let singles = [
            self.hidden_channels,
            self.diff_channels,
            self.classifier_filters,
            self.imitation_hidden,
        ];
        if lists.iter().any(|l| l.contains(&0)) || singles.contains(&0) {
            return input_err("filter counts must be positive");
        }
        if self.map_encoder_filters.len() != 2 || self.ogm_encoder_filters.len() != 2 {
            return input_err("map and occupancy encoders have exactly two stride-2 layers");
        }
        if self.cost_encoder_filters.len() != 2 || self.cost_decoder_filters.len() != 2 {
            return input_err("the per-step cost estimator has two encoder and two decoder layers");
        }
        if self.mscme_encoder_filters.len() != 3 || self.mscme_decoder_filters.len() != 4 {
            return input_err("the multi-step estimator has three encoder and four decoder layers");
        }
        if self.mscme_decoder_filters[3] != g.horizon {
            return input_err(format!(
                "final decoder filter count {} must equal T = {}",
                self.mscme_decoder_filters[3], g.horizon
            ));
        }
        if self.imitation_filters.len() > 3 {
            return input_err("at most three imitation encoder layers");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, cout * k * k, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, stride, pad: k / 2 }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.conv2d(x, w, Some(b), Conv2dSpec::new(self.stride, self.pad))?)
    }

    fn relu<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = self.apply(tape, store, x)?;
        Ok(tape.relu(y))
    }
}

/// 3×3 transposed convolution doubling the spatial size.
#[derive(Clone, Debug)]
struct UpLayer {
    w: ParamId,
    b: ParamId,
}

impl UpLayer {
    fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = store.add_glorot(format!("{name}.w"), &[cin, cout, 3, 3], cin * 9, cout * 9, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        UpLayer { w, b }
    }

    fn relu<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.deconv2d(x, w, Some(b), Deconv2dSpec::new(2, 1, 1))?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Predictor {
    encoder: Vec<ConvLayer>,
    cell: GruConvParams,
    decoder: Vec<UpLayer>,
    classifier: ConvLayer,
    head: ConvLayer,
}

#[derive(Clone, Debug)]
enum CostHead {
    PerStep {
        encoder: Vec<ConvLayer>,
        decoder: Vec<(UpLayer, ConvLayer)>,
        head: ConvLayer,
    },
    MultiStep {
        encoder: Vec<ConvLayer>,
        decoder: Vec<UpLayer>,
        head: ConvLayer,
    },
}

#[derive(Clone, Debug)]
struct Imitation {
    encoder: Vec<ConvLayer>,
    hidden: (ParamId, ParamId),
    logits: (ParamId, ParamId),
    offsets: (ParamId, ParamId),
}

/// A cost estimator (and optional imitation network) with its parameters.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    map_encoder: Vec<ConvLayer>,
    predictor: Option<Predictor>,
    cost: CostHead,
    imitation: Option<Imitation>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(N, T, H, W)` occupancy probabilities; absent without a predictor.
    pub ogms: Option<Var>,
    /// `(N, T, H, W)` cost maps.
    pub cost: Var,
    /// `(N, K)` intention logits.
    pub logits: Option<Var>,
    /// `(N, K·T·2)` offsets laid out `[k][t][xy]`.
    pub offsets: Option<Var>,
}

/// Predicted occupancy and cost maps for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<S> {
    pub predicted_ogms: Vec<OccupancyGrid<S>>,
    pub cost_maps: CostMapStack<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImitationOutput {
    pub intention_logits: Vec<f64>,
    /// K offset trajectories of T points, meters.
    pub offsets: Vec<Vec<(f64, f64)>>,
}

fn linear_params<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    name: &str,
    fin: usize,
    fout: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = store.add_glorot(format!("{name}.w"), &[fout, fin], fin, fout, rng);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fout]));
    (w, b)
}

fn apply_linear<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, p: (ParamId, ParamId), x: Var) -> Result<Var> {
    let w = tape.param(store, p.0);
    let b = tape.param(store, p.1);
    Ok(tape.linear(x, w, Some(b))?)
}

impl<S: Scalar> Model<S> {
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = |n: usize| cfg.scaled(n);
        let (t, tau) = (cfg.grid.horizon, cfg.grid.tau);

        let m = [s(cfg.map_encoder_filters[0]), s(cfg.map_encoder_filters[1])];
        let map_encoder = vec![
            ConvLayer::new(&mut store, "map.0", cfg.map_channels, m[0], 3, 2, rng),
            ConvLayer::new(&mut store, "map.1", m[0], m[1], 3, 2, rng),
        ];

        let cls = s(cfg.classifier_filters);
        let predictor = kind.has_predictor().then(|| {
            let e = [s(cfg.ogm_encoder_filters[0]), s(cfg.ogm_encoder_filters[1])];
            let (hid, d) = (s(cfg.hidden_channels), s(cfg.diff_channels));
            Predictor {
                encoder: vec![
                    ConvLayer::new(&mut store, "pred.enc.0", 1, e[0], 3, 2, rng),
                    ConvLayer::new(&mut store, "pred.enc.1", e[0], e[1], 3, 2, rng),
                ],
                cell: GruConvParams::new(&mut store, "pred.gru", e[1] + m[1], hid, 3, rng),
                decoder: vec![
                    UpLayer::new(&mut store, "pred.dec.0", hid, hid, rng),
                    UpLayer::new(&mut store, "pred.dec.1", hid, d, rng),
                ],
                classifier: ConvLayer::new(&mut store, "pred.cls", d + m[1], cls, 3, 1, rng),
                head: ConvLayer::new(&mut store, "pred.head", cls, 1, 1, 1, rng),
            }
        });

        let cost = match kind {
            ModelKind::Rcme => {
                let enc = [s(cfg.cost_encoder_filters[0]), s(cfg.cost_encoder_filters[1])];
                let dec = [s(cfg.cost_decoder_filters[0]), s(cfg.cost_decoder_filters[1])];
                let cin = 1 + cls + m[1];
                CostHead::PerStep {
                    encoder: vec![
                        ConvLayer::new(&mut store, "cost.enc.0", cin, enc[0], 3, 2, rng),
                        ConvLayer::new(&mut store, "cost.enc.1", enc[0], enc[1], 3, 2, rng),
                    ],
                    decoder: vec![
                        (
                            UpLayer::new(&mut store, "cost.dec.0", enc[1], dec[0], rng),
                            ConvLayer::new(&mut store, "cost.dec.0.conv", dec[0], dec[0], 3, 1, rng),
                        ),
                        (
                            UpLayer::new(&mut store, "cost.dec.1", dec[0], dec[1], rng),
                            ConvLayer::new(&mut store, "cost.dec.1.conv", dec[1], dec[1], 3, 1, rng),
                        ),
                    ],
                    head: ConvLayer::new(&mut store, "cost.head", dec[1], 1, 1, 1, rng),
                }
            }
            ModelKind::Mscme | ModelKind::MscmeNoPred => {
                let cin = if kind.has_predictor() { t + tau + m[1] } else { tau + m[1] };
                let enc: Vec<usize> = cfg.mscme_encoder_filters.iter().map(|&n| s(n)).collect();
                let dec: Vec<usize> = cfg.mscme_decoder_filters[..3].iter().map(|&n| s(n)).collect();
                let mut encoder = Vec::new();
                let mut prev = cin;
                for (i, &f) in enc.iter().enumerate() {
                    encoder.push(ConvLayer::new(&mut store, &format!("cost.enc.{i}"), prev, f, 3, 2, rng));
                    prev = f;
                }
                let mut decoder = Vec::new();
                for (i, &f) in dec.iter().enumerate() {
                    decoder.push(UpLayer::new(&mut store, &format!("cost.dec.{i}"), prev, f, rng));
                    prev = f;
                }
                CostHead::MultiStep {
                    encoder,
                    decoder,
                    head: ConvLayer::new(&mut store, "cost.head", prev, t, 3, 1, rng),
                }
            }
        };

        let imitation = (cfg.intentions > 0).then(|| {
            let mut encoder = Vec::new();
            let mut prev = t;
            for (i, &f) in cfg.imitation_filters.iter().enumerate() {
                let f = s(f);
                encoder.push(ConvLayer::new(&mut store, &format!("imit.enc.{i}"), prev, f, 3, 2, rng));
                prev = f;
            }
            let down = 1usize << cfg.imitation_filters.len();
            let flat = prev * (cfg.grid.height / down) * (cfg.grid.width / down);
            let hid = s(cfg.imitation_hidden);
            Imitation {
                encoder,
                hidden: linear_params(&mut store, "imit.hidden", flat, hid, rng),
                logits: linear_params(&mut store, "imit.logits", hid, cfg.intentions, rng),
                offsets: linear_params(&mut store, "imit.offsets", hid, cfg.intentions * t * 2, rng),
            }
        });

        Ok(Model {
            kind,
            cfg,
            store,
            map_encoder,
            predictor,
            cost,
            imitation,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(kind: ModelKind, cfg: ModelConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = Self::new(kind, cfg, &mut rng)?;
        for p in m.store.iter_mut() {
            p.value.fill(S::zero());
        }
        Ok(m)
    }

    pub fn has_imitation(&self) -> bool {
        self.imitation.is_some()
    }

    fn check_inputs(&self, tape: &Tape<S>, observed: Var, semantic: Var) -> Result<usize> {
        let g = &self.cfg.grid;
        let (n, tau, h, w) = tape.value(observed).dims4("observed")?;
        let (n2, c, h2, w2) = tape.value(semantic).dims4("semantic")?;
        if tau != g.tau || h != g.height || w != g.width {
            return input_err(format!(
                "observed {:?} does not match τ={} and {}×{}",
                tape.shape(observed),
                g.tau,
                g.height,
                g.width
            ));
        }
        if n2 != n || c != self.cfg.map_channels || h2 != h || w2 != w {
            return input_err(format!("semantic {:?} does not match observed {:?}", tape.shape(semantic), tape.shape(observed)));
        }
        Ok(n)
    }

    fn encode_map(&self, tape: &mut Tape<S>, semantic: Var) -> Result<Var> {
        let mut x = semantic;
        for l in &self.map_encoder {
            x = l.relu(tape, &self.store, x)?;
        }
        Ok(x)
    }

    /// Unrolls the predictor: observed frames during warm-up, its own output
    /// afterwards. Returns T probability frames and the classifier features.
    fn predict(&self, tape: &mut Tape<S>, observed: Var, map: Var, map_up: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let p = self.predictor.as_ref().expect("predictor present");
        let (tau, t) = (self.cfg.grid.tau, self.cfg.grid.horizon);
        let (n, _, h, w) = tape.value(map).dims4("map")?;
        let cell = p.cell.bind(tape, &self.store);
        let mut hidden = tape.constant(Tensor::zeros(&[n, p.cell.hidden_channels, h, w]));
        let mut frames = Vec::with_capacity(t);
        let mut feats = Vec::with_capacity(t);
        let mut prev = tape.slice_channels(observed, 0, 1)?;
        for j in 0..tau + t - 1 {
            let mut x = prev;
            for l in &p.encoder {
                x = l.relu(tape, &self.store, x)?;
            }
            let x = tape.concat_channels(&[x, map])?;
            hidden = diffnet::gated_recurrent_conv(tape, hidden, x, &cell)?;
            if j + 1 < tau {
                prev = tape.slice_channels(observed, j + 1, 1)?;
                continue;
            }
            let mut d = hidden;
            for l in &p.decoder {
                d = l.relu(tape, &self.store, d)?;
            }
            let stacked = tape.add_broadcast_channels(prev, d)?;
            let z = tape.concat_channels(&[stacked, map_up])?;
            let f = p.classifier.relu(tape, &self.store, z)?;
            let logit = p.head.apply(tape, &self.store, f)?;
            let frame = tape.sigmoid(logit);
            frames.push(frame);
            feats.push(f);
            prev = frame;
        }
        Ok((frames, feats))
    }

    /// Full forward pass; `with_imitation` also runs the imitation network on the cost maps.
    pub fn forward(&self, tape: &mut Tape<S>, observed: Var, semantic: Var, with_imitation: bool) -> Result<ForwardVars> {
        match self.kind {
            ModelKind::Rcme => rcme_forward(self, tape, observed, semantic, with_imitation),
            ModelKind::Mscme | ModelKind::MscmeNoPred => mscme_forward(self, tape, observed, semantic, with_imitation),
        }
    }

    fn finish(&self, tape: &mut Tape<S>, ogms: Option<Var>, cost: Var, with_imitation: bool) -> Result<ForwardVars> {
        let (logits, offsets) = if with_imitation {
            let (l, o) = imitation_forward(self, tape, cost)?;
            (Some(l), Some(o))
        } else {
            (None, None)
        };
        Ok(ForwardVars {
            ogms,
            cost,
            logits,
            offsets,
        })
    }

    /// Inference on one example.
    pub fn infer(&self, observed: &[OccupancyGrid<S>], semantic: &SemanticMap) -> Result<ModelOutput<S>> {
        let mut tape = Tape::new();
        let obs = tape.constant(stack_observed(&[observed])?);
        let sem = tape.constant(stack_semantic::<S>(&[semantic])?);
        let out = self.forward(&mut tape, obs, sem, false)?;
        let (_, t, h, w) = tape.value(out.cost).dims4("cost")?;
        let cost_maps = CostMapStack::from_vec(t, h, w, tape.value(out.cost).data().to_vec())?;
        let predicted_ogms = match out.ogms {
            Some(v) => tape
                .value(v)
                .data()
                .chunks(h * w)
                .map(|c| OccupancyGrid::from_vec(h, w, c.to_vec()))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(ModelOutput {
            predicted_ogms,
            cost_maps,
        })
    }

    /// Imitation outputs for one cost stack.
    pub fn infer_imitation(&self, cost: &CostMapStack<S>) -> Result<ImitationOutput> {
        let mut tape = Tape::new();
        let data = Tensor::from_vec(&[1, cost.steps(), cost.height(), cost.width()], cost.values().to_vec())?;
        let c = tape.constant(data);
        let (l, o) = imitation_forward(self, &mut tape, c)?;
        let t = cost.steps();
        let od = tape.value(o).data();
        Ok(ImitationOutput {
            intention_logits: tape.value(l).data().iter().map(|v| v.as_f64()).collect(),
            offsets: od
                .chunks(t * 2)
                .map(|k| k.chunks(2).map(|p| (p[0].as_f64(), p[1].as_f64())).collect())
                .collect(),
        })
    }
}

/// Per-step estimator: after each predicted frame, the frame, its classifier
/// features and the encoded map go through the cost encoder/decoder.
pub fn rcme_forward<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    observed: Var,
    semantic: Var,
    with_imitation: bool,
) -> Result<ForwardVars> {
    let CostHead::PerStep { encoder, decoder, head } = &model.cost else {
        return input_err("rcme_forward needs a per-step model");
    };
    model.check_inputs(tape, observed, semantic)?;
    let map = model.encode_map(tape, semantic)?;
    let map_up = tape.upsample_nearest(map, 4)?;
    let (frames, feats) = model.predict(tape, observed, map, map_up)?;
    let mut maps = Vec::with_capacity(frames.len());
    for (&frame, &f) in frames.iter().zip(&feats) {
        let mut x = tape.concat_channels(&[frame, f, map_up])?;
        for l in encoder {
            x = l.relu(tape, &model.store, x)?;
        }
        for (up, conv) in decoder {
            x = up.relu(tape, &model.store, x)?;
            x = conv.relu(tape, &model.store, x)?;
        }
        let logit = head.apply(tape, &model.store, x)?;
        maps.push(tape.sigmoid(logit));
    }
    let ogms = tape.concat_channels(&frames)?;
    let cost = tape.concat_channels(&maps)?;
    model.finish(tape, Some(ogms), cost, with_imitation)
}

/// Multi-step estimator: predicted and observed frames stacked with the encoded
/// map along channels, one encoder/decoder emitting T maps.
pub fn mscme_forward<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    observed: Var,
    semantic: Var,
    with_imitation: bool,
) -> Result<ForwardVars> {
    let CostHead::MultiStep { encoder, decoder, head } = &model.cost else {
        return input_err("mscme_forward needs a multi-step model");
    };
    model.check_inputs(tape, observed, semantic)?;
    let map = model.encode_map(tape, semantic)?;
    let map_up = tape.upsample_nearest(map, 4)?;
    let (ogms, mut x) = if model.predictor.is_some() {
        let (frames, _) = model.predict(tape, observed, map, map_up)?;
        let ogms = tape.concat_channels(&frames)?;
        (Some(ogms), tape.concat_channels(&[ogms, observed, map_up])?)
    } else {
        (None, tape.concat_channels(&[observed, map_up])?)
    };
    for l in encoder {
        x = l.relu(tape, &model.store, x)?;
    }
    for l in decoder {
        x = l.relu(tape, &model.store, x)?;
    }
    let logit = head.apply(tape, &model.store, x)?;
    let cost = tape.sigmoid(logit);
    model.finish(tape, ogms, cost, with_imitation)
}

/// Intention logits `(N, K)` and offsets `(N, K·T·2)` from a `(N, T, H, W)` cost stack.
pub fn imitation_forward<S: Scalar>(model: &Model<S>, tape: &mut Tape<S>, cost: Var) -> Result<(Var, Var)> {
    let Some(im) = &model.imitation else {
        return input_err("model has no imitation network (K = 0)");
    };
    let g = &model.cfg.grid;
    let (n, t, h, w) = tape.value(cost).dims4("imitation")?;
    if t != g.horizon || h != g.height || w != g.width {
        return input_err(format!("cost stack {:?} does not match the model grid", tape.shape(cost)));
    }
    let mut x = cost;
    for l in &im.encoder {
        x = l.relu(tape, &model.store, x)?;
    }
    let flat: usize = tape.shape(x)[1..].iter().product();
    let x = tape.reshape(x, &[n, flat])?;
    let hid = apply_linear(tape, &model.store, im.hidden, x)?;
    let hid = tape.relu(hid);
    let logits = apply_linear(tape, &model.store, im.logits, hid)?;
    let offsets = apply_linear(tape, &model.store, im.offsets, hid)?;
    Ok((logits, offsets))
}

/// `(N, τ, H, W)` tensor from per-example observed frames.
pub fn stack_observed<S: Scalar>(batch: &[&[OccupancyGrid<S>]]) -> Result<Tensor<S>> {
    let Some(first) = batch.first().and_then(|b| b.first()) else {
        return input_err("empty observation batch");
    };
    let (tau, h, w) = (batch[0].len(), first.height(), first.width());
    let mut data = Vec::with_capacity(batch.len() * tau * h * w);
    for frames in batch {
        if frames.len() != tau || frames.iter().any(|g| g.height() != h || g.width() != w) {
            return input_err("observation batch has inconsistent shapes");
        }
        for g in *frames {
            data.extend_from_slice(g.values());
        }
    }
    Ok(Tensor::from_vec(&[batch.len(), tau, h, w], data)?)
}

/// `(N, C, H, W)` tensor of 0/1 semantic channels.
pub fn stack_semantic<S: Scalar>(batch: &[&SemanticMap]) -> Result<Tensor<S>> {
    let Some(first) = batch.first() else {
        return input_err("empty semantic batch");
    };
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(batch.len() * c * h * w);
    for m in batch {
        if (m.channels, m.height, m.width) != (c, h, w) {
            return input_err("semantic batch has inconsistent shapes");
        }
        data.extend(m.data.iter().map(|&v| if v != 0 { S::one() } else { S::zero() }));
    }
    Ok(Tensor::from_vec(&[batch.len(), c, h, w], data)?)
}
