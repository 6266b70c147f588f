//! Structure perception branch: a small conv net mapping backbone features
//! to a single-channel structural map, pretrained with a pixel-wise L1 loss
//! against the log-compressed gradient target while the backbone stays
//! frozen.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamW, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imgproc::{downsample_avg, struct_target_of_image, GrayMap, RgbImage};
use crate::nn::ConvLayer;
use crate::par::par_map;

/// Three-layer conv net: 3x3 (pad 1) -> relu -> 3x3 (pad 1) -> relu -> 1x1.
/// Spatial size is preserved; the output is the raw (pre-sigmoid) map.
#[derive(Clone, Debug)]
pub struct SpbNet {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub in_channels: usize,
}

impl SpbNet {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(SpbNet {
            conv1: ConvLayer::new(params, &format!("{prefix}.conv1"), in_channels, 32, 3, 1, 1, rng)?,
            conv2: ConvLayer::new(params, &format!("{prefix}.conv2"), 32, 32, 3, 1, 1, rng)?,
            conv3: ConvLayer::new(params, &format!("{prefix}.conv3"), 32, 1, 1, 1, 0, rng)?,
            in_channels,
        })
    }

    /// Raw structural map `[1, h, w]` from features `[C, h, w]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feat: Var,
        trainable: bool,
    ) -> Result<Var> {
        let shape = tape.value(feat).shape();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "spb_forward",
                left: shape.to_vec(),
                right: vec![self.in_channels, 0, 0],
            });
        }
        let h1 = self.conv1.forward(tape, params, feat, trainable)?;
        let h1 = tape.relu(h1);
        let h2 = self.conv2.forward(tape, params, h1, trainable)?;
        let h2 = tape.relu(h2);
        self.conv3.forward(tape, params, h2, trainable)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.conv1, &self.conv2, &self.conv3]
            .iter()
            .flat_map(|c| c.param_ids())
            .collect()
    }
}

/// Unlabeled image corpus for pretraining.
#[derive(Clone, Debug)]
pub struct PretrainCorpus {
    pub paths: Vec<PathBuf>,
    pub seed: u64,
}

impl PretrainCorpus {
    /// All PNGs under `root/images`, sorted by filename.
    pub fn from_split_dir(root: &std::path::Path, seed: u64) -> Result<Self> {
        let img_dir = root.join("images");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&img_dir)
            .map_err(|e| Error::Dataset(format!("{}: {e}", img_dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |e| e == "png"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!(
                "no PNG images under {}",
                img_dir.display()
            )));
        }
        Ok(PretrainCorpus { paths, seed })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub flip: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            flip: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// `(epoch, corpus-mean L1)`; epoch 0 is the pre-training evaluation.
    pub loss_trace: Vec<(usize, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub skipped_images: usize,
}

fn flip_rgb(img: &RgbImage) -> RgbImage {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let src = 3 * (y * w + x);
            let dst = 3 * (y * w + (w - 1 - x));
            data[dst..dst + 3].copy_from_slice(&img.data()[src..src + 3]);
        }
    }
    RgbImage::new(h, w, data).expect("same size")
}

struct Sample {
    feat: Tensor,
    target: Tensor,
    feat_flipped: Tensor,
    target_flipped: Tensor,
}

fn target_tensor(t: &GrayMap) -> Tensor {
    Tensor::new(vec![1, t.height, t.width], t.data().to_vec()).expect("sized map")
}

/// Pretrain the branch on frozen backbone features.
///
/// `features` maps an image to its (constant) feature tensor `[C, h, w]`;
/// the caller guarantees it reads but never writes backbone parameters.
/// Targets are the per-image structural maps average-pooled to the feature
/// resolution. Returns the per-epoch corpus-mean L1 trace; epoch 0 is
/// evaluated before any update.
pub fn pretrain<F>(
    corpus: &PretrainCorpus,
    features: F,
    params: &mut ParamSet,
    net: &SpbNet,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome>
where
    F: Fn(&RgbImage) -> Result<Tensor> + Sync,
{
    let loaded: Vec<Option<RgbImage>> = par_map(&corpus.paths, |path| {
        match RgbImage::load_png(path) {
            Ok(img) => Some(img),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                None
            }
        }
    });
    let skipped_images = loaded.iter().filter(|i| i.is_none()).count();
    let images: Vec<RgbImage> = loaded.into_iter().flatten().collect();
    if images.is_empty() {
        return Err(Error::Dataset("pretrain corpus has no readable images".into()));
    }

    // frozen backbone: features and targets are computed once
    let samples: Vec<Result<Sample>> = par_map(&images, |img| {
        let feat = features(img)?;
        let fh = feat.shape()[1];
        if img.height % fh != 0 {
            return Err(Error::invalid(format!(
                "image height {} not divisible by feature height {fh}",
                img.height
            )));
        }
        let factor = img.height / fh;
        let target = downsample_avg(&struct_target_of_image(img)?, factor)?;
        let flipped = flip_rgb(img);
        let feat_flipped = features(&flipped)?;
        let target_flipped = downsample_avg(&struct_target_of_image(&flipped)?, factor)?;
        Ok(Sample {
            feat,
            target: target_tensor(&target),
            feat_flipped,
            target_flipped: target_tensor(&target_flipped),
        })
    });
    let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;

    let spb_ids = net.param_ids();
    let mut optim = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed);

    let eval_corpus = |params: &ParamSet| -> Result<f64> {
        let losses = par_map(&samples, |s| -> Result<f64> {
            let mut tape = Tape::no_grad();
            let feat = tape.leaf(s.feat.clone());
            let raw = net.forward(&mut tape, params, feat, false)?;
            let pred = tape.sigmoid(raw);
            let tgt = tape.leaf(s.target.clone());
            let diff = tape.sub(pred, tgt)?;
            let absd = tape.abs(diff);
            let loss = tape.mean(absd);
            tape.value(loss).item()
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / samples.len() as f64)
    };

    let initial_loss = eval_corpus(params)?;
    let mut loss_trace = vec![(0usize, initial_loss)];

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let mut batch_loss: Option<Var> = None;
            for &i in chunk {
                let s = &samples[i];
                let flip = cfg.flip && rng.gen_bool(0.5);
                let (f, t) = if flip {
                    (&s.feat_flipped, &s.target_flipped)
                } else {
                    (&s.feat, &s.target)
                };
                let feat = tape.leaf(f.clone());
                let raw = net.forward(&mut tape, params, feat, true)?;
                let pred = tape.sigmoid(raw);
                let tgt = tape.leaf(t.clone());
                let diff = tape.sub(pred, tgt)?;
                let absd = tape.abs(diff);
                let loss = tape.mean(absd);
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = tape.mul_scalar(batch_loss.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
            let grads = tape.backward(total)?;
            params.accumulate(&tape, &grads)?;
            optim.step(params, &spb_ids)?;
            params.zero_grads();
        }
        loss_trace.push((epoch, eval_corpus(params)?));
    }

    Ok(PretrainOutcome {
        initial_loss,
        final_loss: loss_trace.last().expect("non-empty").1,
        loss_trace,
        skipped_images,
    })
}

/// Pearson correlation between two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
