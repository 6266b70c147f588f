//! Toy-scale end-to-end detector: small strided conv backbone, hybrid
//! query initialization, a two-layer cross-attention decoder with class
//! and box heads, plus the training loop, inference, and the ablation
//! sweep used to compare the query-initialization and loss-refinement
//! mechanisms against the plain baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{
    save_checkpoint, AdamW, Checkpoint, OptimizerMeta, ParamId, ParamSet, Tape, Tensor, Var,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::imgproc::RgbImage;
use crate::ldlr::{total_loss, BBox, FocalConfig, LossBreakdown, SensitivityConfig};
use crate::matcher::{hungarian, match_cost};
use crate::nn::{ConvLayer, LayerNorm, Linear, Mlp3, MultiHeadAttention};
use crate::par::par_map;
use crate::spb::{pretrain, PretrainConfig, PretrainCorpus, SpbNet};
use crate::tsqi::{
    build_queries, compute_saliency, hybrid_scores, select_topk, semantic_scores, AnchorSet,
};

/// Architecture hyperparameters. `feat_channels` must equal `d_model`
/// because feature cells feed the decoder directly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub feat_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub box_init: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            num_classes,
            image_size: 64,
            feat_channels: 64,
            d_model: 64,
            heads: 4,
            decoder_layers: 2,
            ffn_hidden: 128,
            box_init: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 {
            return Err(Error::invalid("image size must be divisible by 8"));
        }
        if self.feat_channels != self.d_model {
            return Err(Error::invalid(
                "feat_channels must equal d_model (features feed the decoder directly)",
            ));
        }
        if self.d_model % 4 != 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(
                "d_model must be divisible by 4 and by the head count",
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / 8
    }
}

/// Ablation switches; both default off for the full model.
#[derive(Copy, Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Queries from the semantic map alone; the structural branch is unused.
    pub no_tsqi: bool,
    /// All hardness sensitivities forced to zero (unweighted loss).
    pub no_ldlr: bool,
    /// Keep the structural branch frozen during detector training.
    pub freeze_spb: bool,
}

struct Backbone {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
}

impl Backbone {
    fn new(params: &mut ParamSet, c_feat: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Backbone {
            conv1: ConvLayer::new(params, "backbone.conv1", 3, 16, 3, 2, 1, rng)?,
            conv2: ConvLayer::new(params, "backbone.conv2", 16, 32, 3, 2, 1, rng)?,
            conv3: ConvLayer::new(params, "backbone.conv3", 32, c_feat, 3, 2, 1, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var, trainable: bool) -> Result<Var> {
        let h1 = self.conv1.forward(tape, params, x, trainable)?;
        let h1 = tape.relu(h1);
        let h2 = self.conv2.forward(tape, params, h1, trainable)?;
        let h2 = tape.relu(h2);
        let h3 = self.conv3.forward(tape, params, h2, trainable)?;
        Ok(tape.relu(h3))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        [&self.conv1, &self.conv2, &self.conv3]
            .iter()
            .flat_map(|c| c.param_ids())
            .collect()
    }
}

struct DecoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
}

impl DecoderLayer {
    fn new(params: &mut ParamSet, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderLayer {
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng)?,
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), cfg.d_model)?,
            ffn1: Linear::new(params, &format!("{name}.ffn1"), cfg.d_model, cfg.ffn_hidden, rng)?,
            ffn2: Linear::new(params, &format!("{name}.ffn2"), cfg.ffn_hidden, cfg.d_model, rng)?,
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), cfg.d_model)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        tokens: Var,
        pos: Var,
        trainable: bool,
    ) -> Result<Var> {
        let attn = self.attn.forward(tape, params, x, tokens, pos, trainable)?;
        let sum1 = tape.add(x, attn)?;
        let x1 = self.ln1.forward(tape, params, sum1, trainable)?;
        let h = self.ffn1.forward(tape, params, x1, trainable)?;
        let h = tape.relu(h);
        let f = self.ffn2.forward(tape, params, h, trainable)?;
        let sum2 = tape.add(x1, f)?;
        self.ln2.forward(tape, params, sum2, trainable)
    }
}

/// The full detector; plain data, shareable across inference workers.
pub struct Model {
    pub params: ParamSet,
    pub cfg: ModelConfig,
    backbone: Backbone,
    pub spb: SpbNet,
    cls_head: ConvLayer,
    pub lambda: ParamId,
    psi: Linear,
    decoder: Vec<DecoderLayer>,
    class_head: Linear,
    box_head: Mlp3,
    feat_pos: Tensor,
}

/// Per-decoder-layer predictions on the tape.
pub struct LayerPred {
    pub logits: Var,
    pub boxes: Var,
}

/// Everything a forward pass produces for one image.
pub struct ForwardOutput {
    pub anchors: AnchorSet,
    pub ref_boxes: Vec<BBox>,
    pub layers: Vec<LayerPred>,
    /// Value copies of the score maps, for export and inspection.
    pub semantic_map: Tensor,
    pub saliency_map: Option<Tensor>,
    pub hybrid_map: Option<Tensor>,
}

impl ForwardOutput {
    pub fn final_pred(&self) -> &LayerPred {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// One detection of [`Model::infer`] / [`detections_from`].
#[derive(Clone, Debug, Serialize)]
pub struct Detection {
    pub query: usize,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, cfg.feat_channels, &mut rng)?;
        let spb = SpbNet::new(&mut params, "spb", cfg.feat_channels, &mut rng)?;
        let cls_head = ConvLayer::new(
            &mut params,
            "cls_head",
            cfg.feat_channels,
            cfg.num_classes,
            1,
            1,
            0,
            &mut rng,
        )?;
        let lambda = params.register("tsqi.lambda", Tensor::scalar(1.0))?;
        let psi = Linear::new(&mut params, "tsqi.psi", cfg.d_model + 1, cfg.d_model, &mut rng)?;
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            decoder.push(DecoderLayer::new(
                &mut params,
                &format!("decoder.layer{i}"),
                &cfg,
                &mut rng,
            )?);
        }
        let class_head = Linear::new(&mut params, "head.class", cfg.d_model, cfg.num_classes, &mut rng)?;
        let box_head = Mlp3::new(&mut params, "head.box", cfg.d_model, cfg.d_model, 4, &mut rng)?;

        let g = cfg.grid();
        let mut pos_data = Vec::with_capacity(g * g * cfg.d_model);
        for gy in 0..g {
            for gx in 0..g {
                let cx = (gx as f64 + 0.5) / g as f64;
                let cy = (gy as f64 + 0.5) / g as f64;
                pos_data.extend(crate::tsqi::positional_encoding(cx, cy, cfg.d_model)?);
            }
        }
        let feat_pos = Tensor::new(vec![g * g, cfg.d_model], pos_data)?;

        Ok(Model {
            params,
            cfg,
            backbone,
            spb,
            cls_head,
            lambda,
            psi,
            decoder,
            class_head,
            box_head,
            feat_pos,
        })
    }

    /// Normalized `[3, S, S]` tensor from an RGB image.
    pub fn image_to_tensor(&self, img: &RgbImage) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if img.height != s || img.width != s {
            return Err(Error::invalid(format!(
                "image {}x{} does not match configured size {s}x{s}",
                img.height, img.width
            )));
        }
        let mut data = vec![0.0; 3 * s * s];
        for c in 0..3 {
            for i in 0..s * s {
                data[c * s * s + i] = img.data()[3 * i + c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, s, s], data)
    }

    /// Frozen-feature extraction for pretraining (no gradients recorded).
    pub fn features_nograd(&self, img: &RgbImage) -> Result<Tensor> {
        let x = self.image_to_tensor(img)?;
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(x);
        let f = self.backbone.forward(&mut tape, &self.params, xv, false)?;
        Ok(tape.value(f).clone())
    }

    /// Full pipeline for one image tensor; `k` queries are selected.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        k: usize,
        flags: &AblationFlags,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        let g = self.cfg.grid();
        if k == 0 || k > g * g {
            return Err(Error::invalid(format!(
                "k = {k} out of range for a {g}x{g} score grid"
            )));
        }
        let img = tape.leaf(image.clone());
        let feat = self.backbone.forward(tape, &self.params, img, trainable)?;

        let sem = semantic_scores(tape, &self.params, &self.cls_head, feat, trainable)?;
        let (score_map, saliency_map, hybrid_map) = if flags.no_tsqi {
            (sem, None, None)
        } else {
            let spb_trainable = trainable && !flags.freeze_spb;
            let sal = compute_saliency(tape, &self.params, &self.spb, feat, spb_trainable)?;
            let lambda = self.params.var(tape, self.lambda, trainable);
            let hybrid = hybrid_scores(tape, sem, sal, lambda)?;
            (
                hybrid,
                Some(tape.value(sal).clone()),
                Some(tape.value(hybrid).clone()),
            )
        };

        let anchors = select_topk(tape.value(score_map), k)?;
        let flat = tape.reshape(score_map, &[g * g])?;
        let v = tape.gather0(flat, &anchors.flat_indices)?;
        let queries = build_queries(
            tape,
            &self.params,
            &anchors,
            v,
            &self.psi,
            self.cfg.d_model,
            self.cfg.box_init,
            trainable,
        )?;

        // feature cells as decoder tokens
        let c = self.cfg.feat_channels;
        let flat_feat = tape.reshape(feat, &[c, g * g])?;
        let tokens = tape.transpose2d(flat_feat)?;
        let pos = tape.leaf(self.feat_pos.clone());

        let ref_logits: Vec<f64> = queries
            .ref_boxes
            .iter()
            .flat_map(|b| [logit(b.cx), logit(b.cy), logit(b.w), logit(b.h)])
            .collect();
        let ref_leaf = tape.leaf(Tensor::new(vec![k, 4], ref_logits)?);

        let mut x = queries.queries;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            x = layer.forward(tape, &self.params, x, tokens, pos, trainable)?;
            let logits = self.class_head.forward(tape, &self.params, x, trainable)?;
            let offsets = self.box_head.forward(tape, &self.params, x, trainable)?;
            let shifted = tape.add(offsets, ref_leaf)?;
            let boxes = tape.sigmoid(shifted);
            layers.push(LayerPred { logits, boxes });
        }

        Ok(ForwardOutput {
            ref_boxes: queries.ref_boxes,
            anchors,
            layers,
            semantic_map: tape.value(sem).clone(),
            saliency_map,
            hybrid_map,
        })
    }

    /// Inference on one image: detections with confidence at or above the
    /// threshold, sorted by score descending (ties by query index).
    pub fn infer(
        &self,
        img: &RgbImage,
        k: usize,
        flags: &AblationFlags,
        score_thr: f64,
    ) -> Result<Vec<Detection>> {
        let x = self.image_to_tensor(img)?;
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, &x, k, flags, false)?;
        let mut dets = detections_from(&tape, &out);
        dets.retain(|d| d.score >= score_thr);
        Ok(dets)
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.params.ids()
    }

    /// Parameters updated by a training run under the given flags.
    pub fn trainable_ids(&self, flags: &AblationFlags) -> Vec<ParamId> {
        let mut excluded: Vec<ParamId> = Vec::new();
        if flags.no_tsqi {
            excluded.extend(self.spb.param_ids());
            excluded.push(self.lambda);
        } else if flags.freeze_spb {
            excluded.extend(self.spb.param_ids());
        }
        self.params
            .ids()
            .into_iter()
            .filter(|id| !excluded.contains(id))
            .collect()
    }
}

/// Decode per-query detections from the final decoder layer. Every query
/// yields one detection: its argmax class (ties to the lowest id), that
/// class's sigmoid score, and the decoded box.
pub fn detections_from(tape: &Tape, out: &ForwardOutput) -> Vec<Detection> {
    let pred = out.final_pred();
    let logits = tape.value(pred.logits);
    let boxes = tape.value(pred.boxes);
    let (k, c) = (logits.shape()[0], logits.shape()[1]);
    let mut dets = Vec::with_capacity(k);
    for q in 0..k {
        let row = &logits.data()[q * c..(q + 1) * c];
        let mut best = 0usize;
        for (ci, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = ci;
            }
        }
        let score = crate::autograd::sigmoid_scalar(row[best]);
        let b = &boxes.data()[q * 4..(q + 1) * 4];
        dets.push(Detection {
            query: q,
            class: best,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            score,
        });
    }
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.query.cmp(&b.query))
    });
    dets
}

// ---- training ----

/// Everything a training run needs beyond the architecture.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub topk: usize,
    pub lambda_init: f64,
    pub sens: SensitivityConfig,
    pub focal: FocalConfig,
    pub score_thr: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            topk: 12,
            lambda_init: 1.0,
            sens: SensitivityConfig::default(),
            focal: FocalConfig::default(),
            score_thr: 0.3,
            seed: 0,
            flags: AblationFlags::default(),
            flip: false,
        }
    }
}

impl TrainConfig {
    /// Sensitivities actually used: forced to zero under `no_ldlr`, which
    /// is by construction the same code path as passing zero etas.
    pub fn effective_sens(&self) -> SensitivityConfig {
        if self.flags.no_ldlr {
            SensitivityConfig::zero()
        } else {
            self.sens
        }
    }
}

/// One loss-CSV row.
#[derive(Clone, Debug)]
pub struct IterRecord {
    pub iter: usize,
    pub breakdown: LossBreakdown,
}

/// Stable CSV rendering of a training trace.
pub fn loss_csv(records: &[IterRecord]) -> String {
    let mut out = String::from("iter,total,cls,bbox,giou,mean_w_cls,mean_w_bbox,mean_w_iou\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.breakdown.total,
            r.breakdown.cls,
            r.breakdown.bbox,
            r.breakdown.giou,
            r.breakdown.mean_w_cls,
            r.breakdown.mean_w_bbox,
            r.breakdown.mean_w_iou
        ));
    }
    out
}

/// In-memory training sample.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub gts: Vec<(BBox, usize)>,
}

fn flip_sample(s: &TrainSample, size: usize) -> TrainSample {
    let mut data = s.image.data().to_vec();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size / 2 {
                let a = c * size * size + y * size + x;
                let b = c * size * size + y * size + (size - 1 - x);
                data.swap(a, b);
            }
        }
    }
    TrainSample {
        image: Tensor::new(vec![3, size, size], data).expect("same size"),
        gts: s
            .gts
            .iter()
            .map(|&(b, class)| (BBox::new(1.0 - b.cx, b.cy, b.w, b.h), class))
            .collect(),
    }
}

/// One optimizer step over a batch: forward, match, weighted loss,
/// backward, AdamW. Returns the batch-mean loss breakdown.
pub fn train_step(
    model: &mut Model,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    optim: &mut AdamW,
    trainable: &[ParamId],
    iter: usize,
) -> Result<LossBreakdown> {
    let sens = cfg.effective_sens();
    let mut tape = Tape::new();
    let mut batch_loss: Option<Var> = None;
    let mut agg = LossBreakdown::default();
    for sample in batch {
        let out = model.forward(&mut tape, &sample.image, cfg.topk, &cfg.flags, true)?;
        let pred = out.final_pred();
        let logits_val = tape.value(pred.logits).clone();
        let boxes_val = tape.value(pred.boxes).clone();
        let probs = logits_val.map(crate::autograd::sigmoid_scalar);
        let pred_boxes: Vec<BBox> = (0..cfg.topk)
            .map(|q| {
                let b = &boxes_val.data()[q * 4..(q + 1) * 4];
                BBox::new(b[0], b[1], b[2], b[3])
            })
            .collect();
        let cost = match_cost(&probs, &pred_boxes, &sample.gts)?;
        let matches = hungarian(&cost)?;
        let (loss, breakdown) = total_loss(
            &mut tape,
            pred.logits,
            pred.boxes,
            &matches,
            &sample.gts,
            &sens,
            &cfg.focal,
        )?;
        agg.merge(&breakdown);
        batch_loss = Some(match batch_loss {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let n = batch.len() as f64;
    let total = tape.mul_scalar(batch_loss.expect("non-empty batch"), 1.0 / n);
    let total_val = tape.value(total).item()?;
    let grads = tape.backward(total)?;
    model.params.accumulate(&tape, &grads)?;
    if !total_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at iteration {iter}: lr = {}, max |grad| = {}",
            optim.lr,
            model.params.max_abs_grad()
        )));
    }
    optim.step(&mut model.params, trainable)?;
    model.params.zero_grads();
    agg.total = total_val;
    Ok(agg)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<IterRecord>,
}

/// Full training loop over a loaded dataset.
pub fn train_detector(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training dataset".into()));
    }
    let max_gts = dataset.max_objects_per_image();
    if cfg.topk < max_gts {
        return Err(Error::invalid(format!(
            "topk = {} is below the maximum of {max_gts} objects per image",
            cfg.topk
        )));
    }
    *model.params.value_mut(model.lambda) = Tensor::scalar(cfg.lambda_init);
    model.params.zero_grads();

    let samples: Vec<TrainSample> = {
        let loaded: Vec<Result<TrainSample>> = par_map(
            &(0..dataset.len()).collect::<Vec<_>>(),
            |&i| {
                let img = dataset.load_rgb(i)?;
                Ok(TrainSample {
                    image: model.image_to_tensor(&img)?,
                    gts: dataset.gts[i].clone(),
                })
            },
        );
        loaded.into_iter().collect::<Result<_>>()?
    };

    let trainable = model.trainable_ids(&cfg.flags);
    let mut optim = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7b_u64.rotate_left(17));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::new();
    let mut iter = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip && rng.gen_bool(0.5) {
                        flip_sample(&samples[i], model.cfg.image_size)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&TrainSample> = batch.iter().collect();
            let breakdown = train_step(model, &refs, cfg, &mut optim, &trainable, iter)?;
            records.push(IterRecord { iter, breakdown });
            iter += 1;
        }
    }
    Ok(TrainOutcome { records })
}

// ---- dataset-level inference and evaluation ----

/// Run inference over a dataset in parallel and tag detections with ids.
pub fn predict_dataset(
    model: &Model,
    dataset: &Dataset,
    k: usize,
    flags: &AblationFlags,
    score_thr: f64,
) -> Result<Vec<crate::eval::Detection>> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let per_image: Vec<Result<Vec<crate::eval::Detection>>> = par_map(&indices, |&i| {
        let img = dataset.load_rgb(i)?;
        let dets = model.infer(&img, k, flags, score_thr)?;
        Ok(dets
            .into_iter()
            .map(|d| crate::eval::Detection {
                image_id: dataset.images[i].id,
                class: d.class,
                bbox: d.bbox,
                score: d.score,
            })
            .collect())
    });
    let mut out = Vec::new();
    for dets in per_image {
        out.extend(dets?);
    }
    Ok(out)
}

/// Evaluate a model on a dataset using every query as a detection.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    k: usize,
    flags: &AblationFlags,
) -> Result<EvalResult> {
    let dets = predict_dataset(model, dataset, k, flags, 0.0)?;
    evaluate(&dets, &dataset.ground_truths(), &dataset.class_names)
}

// ---- checkpointing ----

/// Sidecar metadata stored next to a model checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub class_names: Vec<String>,
}

fn sidecar_path(ckpt: &Path) -> std::path::PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    ckpt.with_file_name(name)
}

pub fn save_model(ckpt: &Path, model: &Model, meta: &ModelMeta, optim: &AdamW) -> Result<()> {
    save_checkpoint(
        ckpt,
        &model.params,
        OptimizerMeta {
            kind: "adamw".into(),
            lr: optim.lr,
            weight_decay: optim.weight_decay,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
        },
    )?;
    std::fs::write(sidecar_path(ckpt), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_model(ckpt: &Path) -> Result<(Model, ModelMeta)> {
    let meta_path = sidecar_path(ckpt);
    let meta_bytes = std::fs::read(&meta_path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    let meta: ModelMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    let mut model = Model::new(meta.model.clone())?;
    let ck = Checkpoint::read(ckpt)?;
    ck.apply(&mut model.params, true)?;
    Ok((model, meta))
}

// ---- pretraining orchestration and the ablation sweep ----

/// Pretrain the structural branch of `model` on an image corpus, using its
/// own frozen backbone as the feature extractor.
pub fn pretrain_spb(
    model: &mut Model,
    corpus: &PretrainCorpus,
    cfg: &PretrainConfig,
) -> Result<crate::spb::PretrainOutcome> {
    let backbone_bytes: Vec<Vec<f64>> = model
        .backbone
        .param_ids()
        .iter()
        .map(|&id| model.params.value(id).data().to_vec())
        .collect();
    // split borrows: features close over an immutable snapshot
    let snapshot = ModelSnapshot::of(model);
    let outcome = {
        let params = &mut model.params;
        pretrain(
            corpus,
            |img| snapshot.features(img),
            params,
            &snapshot.spb,
            cfg,
        )?
    };
    for (id, before) in model.backbone.param_ids().iter().zip(&backbone_bytes) {
        debug_assert_eq!(
            model.params.value(*id).data(),
            before.as_slice(),
            "backbone drifted during pretraining"
        );
    }
    Ok(outcome)
}

/// Immutable copies of what frozen-feature extraction needs, so pretraining
/// can mutate the live parameter set while reading features.
struct ModelSnapshot {
    cfg: ModelConfig,
    conv_weights: Vec<(Tensor, Tensor, usize, usize)>, // (w, b, stride, padding)
    spb: SpbNet,
}

impl ModelSnapshot {
    fn of(model: &Model) -> Self {
        let convs = [&model.backbone.conv1, &model.backbone.conv2, &model.backbone.conv3];
        ModelSnapshot {
            cfg: model.cfg.clone(),
            conv_weights: convs
                .iter()
                .map(|c| {
                    (
                        model.params.value(c.weight).clone(),
                        model.params.value(c.bias).clone(),
                        c.stride,
                        c.padding,
                    )
                })
                .collect(),
            spb: model.spb.clone(),
        }
    }

    fn features(&self, img: &RgbImage) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if img.height != s || img.width != s {
            return Err(Error::invalid(format!(
                "image {}x{} does not match configured size {s}x{s}",
                img.height, img.width
            )));
        }
        let mut data = vec![0.0; 3 * s * s];
        for c in 0..3 {
            for i in 0..s * s {
                data[c * s * s + i] = img.data()[3 * i + c] as f64 / 255.0;
            }
        }
        let mut tape = Tape::no_grad();
        let mut x = tape.leaf(Tensor::new(vec![3, s, s], data)?);
        for (w, b, stride, padding) in &self.conv_weights {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let y = tape.conv2d(x, wv, *stride, *padding, crate::autograd::PadMode::Zero)?;
            let y = tape.add(y, bv)?;
            x = tape.relu(y);
        }
        Ok(tape.value(x).clone())
    }
}

/// One row of the ablation grid.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub no_tsqi: bool,
    pub no_ldlr: bool,
    /// `(map, map50, map75)` per seed.
    pub per_seed: Vec<(f64, f64, f64)>,
    pub mean: (f64, f64, f64),
    pub std: (f64, f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The 2x2 factorial over the two mechanisms, repeated over seeds; rows in
/// the order baseline, query-init only, loss-refinement only, full.
pub fn run_ablation(
    data_root: &Path,
    base: &TrainConfig,
    pretrain_cfg: &PretrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let train_ds = crate::data::load_coco(&data_root.join("train"))?;
    let test_ds = crate::data::load_coco(&data_root.join("test"))?;
    let configs = [
        ("baseline", true, true),
        ("tsqi-only", false, true),
        ("ldlr-only", true, false),
        ("full", false, false),
    ];
    let mut per_config: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); configs.len()];
    for &seed in seeds {
        // pretrained structural branch, shared by the rows that use it
        let mut donor = Model::new(ModelConfig {
            seed,
            ..ModelConfig::toy(train_ds.class_names.len(), seed)
        })?;
        let corpus = PretrainCorpus::from_split_dir(&data_root.join("pretrain"), seed)?;
        progress(&format!("seed {seed}: pretraining structural branch"));
        pretrain_spb(&mut donor, &corpus, pretrain_cfg)?;
        let spb_values: Vec<(String, Tensor)> = donor
            .spb
            .param_ids()
            .iter()
            .map(|&id| {
                (
                    donor.params.name(id).to_string(),
                    donor.params.value(id).clone(),
                )
            })
            .collect();

        for (ci, &(name, no_tsqi, no_ldlr)) in configs.iter().enumerate() {
            progress(&format!("seed {seed}: training {name}"));
            let mut model = Model::new(ModelConfig {
                seed,
                ..ModelConfig::toy(train_ds.class_names.len(), seed)
            })?;
            if !no_tsqi {
                for (pname, value) in &spb_values {
                    let id = model.params.find(pname).expect("same architecture");
                    *model.params.value_mut(id) = value.clone();
                }
            }
            let cfg = TrainConfig {
                seed,
                flags: AblationFlags {
                    no_tsqi,
                    no_ldlr,
                    freeze_spb: base.flags.freeze_spb,
                },
                ..base.clone()
            };
            train_detector(&mut model, &train_ds, &cfg)?;
            let result = evaluate_model(&model, &test_ds, cfg.topk, &cfg.flags)?;
            per_config[ci].push((result.map, result.map50, result.map75));
        }
    }
    Ok(configs
        .iter()
        .enumerate()
        .map(|(ci, &(name, no_tsqi, no_ldlr))| {
            let per_seed = per_config[ci].clone();
            let maps: Vec<f64> = per_seed.iter().map(|t| t.0).collect();
            let map50s: Vec<f64> = per_seed.iter().map(|t| t.1).collect();
            let map75s: Vec<f64> = per_seed.iter().map(|t| t.2).collect();
            let (m0, s0) = mean_std(&maps);
            let (m1, s1) = mean_std(&map50s);
            let (m2, s2) = mean_std(&map75s);
            AblationRow {
                name: name.to_string(),
                no_tsqi,
                no_ldlr,
                per_seed,
                mean: (m0, m1, m2),
                std: (s0, s1, s2),
            }
        })
        .collect())
}

/// Terminal rendering of the ablation grid.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<6} {:<6} {:>16} {:>16} {:>16}\n",
        "config", "tsqi", "ldlr", "mAP", "mAP50", "mAP75"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<6} {:<6} {:>7.3} ± {:>5.3} {:>7.3} ± {:>5.3} {:>7.3} ± {:>5.3}\n",
            r.name,
            if r.no_tsqi { "off" } else { "on" },
            if r.no_ldlr { "off" } else { "on" },
            r.mean.0,
            r.std.0,
            r.mean.1,
            r.std.1,
            r.mean.2,
            r.std.2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_image, SyntheticSpec};

    fn test_image() -> RgbImage {
        let spec = SyntheticSpec {
            train: 1,
            val: 0,
            test: 0,
            pretrain: 0,
            seed: 9,
            ..SyntheticSpec::default()
        };
        render_image(&spec, 0).rgb
    }

    #[test]
    fn forward_emits_k_predictions_per_layer() {
        let model = Model::new(ModelConfig::toy(3, 1)).unwrap();
        let img = model.image_to_tensor(&test_image()).unwrap();
        let mut tape = Tape::no_grad();
        let out = model
            .forward(&mut tape, &img, 9, &AblationFlags::default(), false)
            .unwrap();
        assert_eq!(out.layers.len(), 2);
        for layer in &out.layers {
            assert_eq!(tape.value(layer.logits).shape(), &[9, 3]);
            assert_eq!(tape.value(layer.boxes).shape(), &[9, 4]);
        }
        assert_eq!(out.anchors.anchors.len(), 9);
        assert_eq!(detections_from(&tape, &out).len(), 9);
    }

    #[test]
    fn boxes_valid_at_every_layer() {
        let model = Model::new(ModelConfig::toy(3, 3)).unwrap();
        let img = model.image_to_tensor(&test_image()).unwrap();
        let mut tape = Tape::no_grad();
        let out = model
            .forward(&mut tape, &img, 16, &AblationFlags::default(), false)
            .unwrap();
        for layer in &out.layers {
            for &v in tape.value(layer.boxes).data() {
                assert!((0.0..=1.0).contains(&v), "box coordinate {v}");
            }
        }
    }

    #[test]
    fn same_seed_and_weights_give_identical_detections() {
        let a = Model::new(ModelConfig::toy(3, 5)).unwrap();
        let b = Model::new(ModelConfig::toy(3, 5)).unwrap();
        let img = test_image();
        let da = a.infer(&img, 8, &AblationFlags::default(), 0.0).unwrap();
        let db = b.infer(&img, 8, &AblationFlags::default(), 0.0).unwrap();
        assert_eq!(da.len(), db.len());
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.query, y.query);
            assert_eq!(x.class, y.class);
            assert_eq!(x.score, y.score);
            assert_eq!(x.bbox, y.bbox);
        }
    }

    #[test]
    fn lambda_zero_matches_no_tsqi_path_bitwise() {
        let mut with_tsqi = Model::new(ModelConfig::toy(3, 7)).unwrap();
        *with_tsqi.params.value_mut(with_tsqi.lambda) = Tensor::scalar(0.0);
        let without = Model::new(ModelConfig::toy(3, 7)).unwrap();
        let img = test_image();
        let da = with_tsqi
            .infer(&img, 10, &AblationFlags { no_tsqi: false, no_ldlr: false, freeze_spb: false }, 0.0)
            .unwrap();
        let db = without
            .infer(&img, 10, &AblationFlags { no_tsqi: true, no_ldlr: false, freeze_spb: false }, 0.0)
            .unwrap();
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.query, y.query);
            assert_eq!(x.class, y.class);
            assert_eq!(x.score, y.score, "scores must match bitwise");
            assert_eq!(x.bbox, y.bbox);
        }
    }

    #[test]
    fn score_threshold_boundaries() {
        let model = Model::new(ModelConfig::toy(3, 11)).unwrap();
        let img = test_image();
        assert!(model
            .infer(&img, 6, &AblationFlags::default(), 1.0)
            .unwrap()
            .is_empty());
        assert_eq!(
            model
                .infer(&img, 6, &AblationFlags::default(), 0.0)
                .unwrap()
                .len(),
            6
        );
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let model = Model::new(ModelConfig::toy(3, 2)).unwrap();
        let img = model.image_to_tensor(&test_image()).unwrap();
        let mut tape = Tape::no_grad();
        assert!(model
            .forward(&mut tape, &img, 65, &AblationFlags::default(), false)
            .is_err());
    }

    #[test]
    fn checkpoint_roundtrip_restores_inference() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::toy(3, 13)).unwrap();
        let meta = ModelMeta {
            model: model.cfg.clone(),
            train: TrainConfig::default(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let ckpt = dir.path().join("model.ckpt");
        save_model(&ckpt, &model, &meta, &AdamW::new(1e-3, 1e-4)).unwrap();
        let (restored, meta2) = load_model(&ckpt).unwrap();
        assert_eq!(meta2.class_names, meta.class_names);
        let img = test_image();
        let da = model.infer(&img, 5, &AblationFlags::default(), 0.0).unwrap();
        let db = restored.infer(&img, 5, &AblationFlags::default(), 0.0).unwrap();
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.score, y.score);
            assert_eq!(x.bbox, y.bbox);
        }
    }
}
