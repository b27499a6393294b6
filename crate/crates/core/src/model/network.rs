use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    backward_stack, forward_stack, join, ops, update_stack_running_stats, zero_grads, Adam, Checkpoint, LayerCache,
    LayerParams, Mode, Parameters, Tensor,
};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};
use crate::par;
use crate::riconv::{
    DeconvGeometry, Geometry, LayerOutput, RIConvCache, RIConvLayer, RIDeconvCache, RIDeconvLayer,
};

use super::config::{ClassifierMode, NetworkConfig, Task};

/// Clouds per inference batch.
pub const EVAL_BATCH: usize = 16;

/// Metadata key under which checkpoints store the network configuration.
pub const CONFIG_KEY: &str = "network_config";

/// Precomputed geometry of every operator of a network for one cloud.
#[derive(Debug, Clone)]
pub struct CloudGeometry {
    pub encoder: Vec<Geometry>,
    pub decoder: Vec<DeconvGeometry>,
}

impl CloudGeometry {
    pub fn compute(cfg: &NetworkConfig, points: &[Point3]) -> Result<Self> {
        if points.len() != cfg.n_points {
            return Err(Error::shape(
                "network",
                format!("cloud has {} points, network expects {}", points.len(), cfg.n_points),
            ));
        }
        let mut levels: Vec<Vec<Point3>> = vec![points.to_vec()];
        let mut encoder = Vec::with_capacity(cfg.layer_configs.len());
        for c in &cfg.layer_configs {
            let g = Geometry::compute(levels.last().expect("non-empty"), c)?;
            levels.push(g.rep_points().to_vec());
            encoder.push(g);
        }
        let top = cfg.layer_configs.len();
        let decoder = cfg
            .decoder_configs
            .iter()
            .enumerate()
            .map(|(s, d)| DeconvGeometry::compute(&levels[top - s], &levels[top - s - 1], d))
            .collect::<Result<_>>()?;
        Ok(Self { encoder, decoder })
    }
}

fn head_stack(in_width: usize, hidden: &[usize], out: usize, rng: &mut ChaCha8Rng) -> Vec<LayerParams> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut c = in_width;
    for &w in hidden {
        layers.push(LayerParams::new(c, w, true, true, rng));
        c = w;
    }
    layers.push(LayerParams::new(c, out, false, false, rng));
    layers
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn encoder_layers(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Vec<RIConvLayer>> {
    let mut prev = 0;
    cfg.layer_configs
        .iter()
        .map(|c| {
            let layer = RIConvLayer::new(c.clone(), prev, rng)?;
            prev = c.out_channels;
            Ok(layer)
        })
        .collect()
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Classification network: stacked operators and a fully connected head.
#[derive(Debug, Clone)]
pub struct ClassificationNet {
    cfg: NetworkConfig,
    layers: Vec<RIConvLayer>,
    head: Vec<LayerParams>,
}

pub(crate) struct ClassCache {
    layers: Vec<RIConvCache>,
    head: Vec<LayerCache>,
    /// Row of the final features that won each pooled element (single-vector).
    pool: Option<(Vec<usize>, usize)>,
}

/// Output of [`classify_forward`].
#[derive(Debug, Clone)]
pub struct ClassOutput {
    /// `[n_final_reps, n_classes]`, or `[1, n_classes]` in single-vector mode.
    pub per_vector_logits: Tensor,
    pub mean_logits: Vec<f64>,
    pub prediction: usize,
}

impl ClassificationNet {
    pub fn new(cfg: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.task != Task::Classification {
            return Err(Error::Config("classification network needs a classification config".into()));
        }
        let layers = encoder_layers(&cfg, rng)?;
        let width = layers.last().expect("validated").out_channels();
        let head = head_stack(width, &cfg.head_widths, cfg.n_classes, rng);
        Ok(Self { cfg, layers, head })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[RIConvLayer] {
        &self.layers
    }

    /// Logits for a batch: one row per final representative (multi-vector)
    /// or per cloud (single-vector), clouds in order.
    pub(crate) fn forward(&self, geoms: &[&CloudGeometry], mode: Mode) -> Result<(Tensor, ClassCache)> {
        let mut x: Option<Tensor> = None;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let gs: Vec<&Geometry> = geoms.iter().map(|g| &g.encoder[l]).collect();
            let (y, c) = layer.forward(&gs, x.as_ref(), mode)?;
            caches.push(c);
            x = Some(y);
        }
        let feats = x.expect("at least one layer");
        let (head_in, pool) = match self.cfg.classifier_mode {
            ClassifierMode::MultiVector => (feats, None),
            ClassifierMode::SingleVector => {
                let c = feats.cols();
                let mut pooled = Vec::with_capacity(geoms.len() * c);
                let mut winners = Vec::with_capacity(geoms.len() * c);
                let mut start = 0;
                for g in geoms {
                    let r = g.encoder.last().expect("non-empty").n_representatives();
                    for ch in 0..c {
                        let mut best = start;
                        for row in start..start + r {
                            if feats.data()[row * c + ch] > feats.data()[best * c + ch] {
                                best = row;
                            }
                        }
                        pooled.push(feats.data()[best * c + ch]);
                        winners.push(best);
                    }
                    start += r;
                }
                (Tensor::from_vec(&[geoms.len(), c], pooled)?, Some((winners, feats.rows())))
            }
        };
        let (logits, head) = forward_stack(&self.head, head_in, mode)?;
        Ok((
            logits,
            ClassCache {
                layers: caches,
                head,
                pool,
            },
        ))
    }

    pub(crate) fn update_running_stats(&mut self, cache: &ClassCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            layer.update_running_stats(c);
        }
        update_stack_running_stats(&mut self.head, &cache.head);
    }

    pub(crate) fn backward(&mut self, cache: ClassCache, d_logits: Tensor) -> Result<()> {
        let d = backward_stack(&mut self.head, cache.head, d_logits, true)?.expect("input gradient requested");
        let mut d = match cache.pool {
            None => d,
            Some((winners, rows)) => {
                let c = d.cols();
                let mut full = vec![0.0; rows * c];
                for (e, &row) in winners.iter().enumerate() {
                    full[row * c + e % c] += d.data()[e];
                }
                Tensor::from_vec(&[rows, c], full)?
            }
        };
        for (layer, c) in self.layers.iter_mut().zip(cache.layers).rev() {
            match layer.backward(c, d)? {
                Some(prev) => d = prev,
                None => break,
            }
        }
        Ok(())
    }

    /// Number of logit rows each cloud contributes.
    pub(crate) fn rows_per_cloud(&self, g: &CloudGeometry) -> usize {
        match self.cfg.classifier_mode {
            ClassifierMode::MultiVector => g.encoder.last().expect("non-empty").n_representatives(),
            ClassifierMode::SingleVector => 1,
        }
    }

    pub(crate) fn outputs(&self, geoms: &[&CloudGeometry], logits: &Tensor) -> Result<Vec<ClassOutput>> {
        let n = self.cfg.n_classes;
        let mut out = Vec::with_capacity(geoms.len());
        let mut start = 0;
        for g in geoms {
            let r = self.rows_per_cloud(g);
            let rows = logits.data()[start * n..(start + r) * n].to_vec();
            let mut mean = vec![0.0; n];
            for row in rows.chunks(n) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= r as f64;
            }
            out.push(ClassOutput {
                per_vector_logits: Tensor::from_vec(&[r, n], rows)?,
                prediction: argmax(&mean),
                mean_logits: mean,
            });
            start += r;
        }
        Ok(out)
    }
}

impl Parameters for ClassificationNet {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.layers.visit_tensors(&join(prefix, "layers"), f);
        self.head.visit_tensors(&join(prefix, "head"), f);
    }
}

/// Encoder-decoder part segmentation network with skip connections.
#[derive(Debug, Clone)]
pub struct SegmentationNet {
    cfg: NetworkConfig,
    encoder: Vec<RIConvLayer>,
    decoder: Vec<RIDeconvLayer>,
    head: LayerParams,
}

pub(crate) struct SegCache {
    encoder: Vec<RIConvCache>,
    decoder: Vec<RIDeconvCache>,
    head: LayerCache,
}

impl SegmentationNet {
    pub fn new(cfg: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.task != Task::Segmentation {
            return Err(Error::Config("segmentation network needs a segmentation config".into()));
        }
        let encoder = encoder_layers(&cfg, rng)?;
        let top = encoder.len();
        let mut coarse = encoder[top - 1].out_channels();
        let mut decoder = Vec::with_capacity(top);
        for (s, d) in cfg.decoder_configs.iter().enumerate() {
            let fine_level = top - s - 1;
            let skip = if fine_level >= 1 {
                encoder[fine_level - 1].out_channels()
            } else {
                0
            };
            let stage = RIDeconvLayer::new(d.clone(), coarse, skip, rng)?;
            coarse = stage.out_channels();
            decoder.push(stage);
        }
        let head = LayerParams::new(coarse, cfg.n_parts, false, false, rng);
        Ok(Self {
            cfg,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &[RIConvLayer] {
        &self.encoder
    }

    /// Per-point logits `[Σ n_points, n_parts]`, clouds in order.
    pub(crate) fn forward(&self, geoms: &[&CloudGeometry], mode: Mode) -> Result<(Tensor, SegCache)> {
        let top = self.encoder.len();
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(top);
        let mut enc_caches = Vec::with_capacity(top);
        for (l, layer) in self.encoder.iter().enumerate() {
            let gs: Vec<&Geometry> = geoms.iter().map(|g| &g.encoder[l]).collect();
            let (y, c) = layer.forward(&gs, enc_out.last(), mode)?;
            enc_caches.push(c);
            enc_out.push(y);
        }
        let mut dec_caches = Vec::with_capacity(top);
        let mut coarse: Option<Tensor> = None;
        for (s, stage) in self.decoder.iter().enumerate() {
            let fine_level = top - s - 1;
            let skip = (fine_level >= 1).then(|| &enc_out[fine_level - 1]);
            let gs: Vec<&DeconvGeometry> = geoms.iter().map(|g| &g.decoder[s]).collect();
            let input = coarse.as_ref().unwrap_or(&enc_out[top - 1]);
            let (y, c) = stage.forward(&gs, input, skip, mode)?;
            dec_caches.push(c);
            coarse = Some(y);
        }
        let (logits, head) = self.head.forward(coarse.expect("at least one stage"), mode)?;
        Ok((
            logits,
            SegCache {
                encoder: enc_caches,
                decoder: dec_caches,
                head,
            },
        ))
    }

    pub(crate) fn update_running_stats(&mut self, cache: &SegCache) {
        for (layer, c) in self.encoder.iter_mut().zip(&cache.encoder) {
            layer.update_running_stats(c);
        }
        for (stage, c) in self.decoder.iter_mut().zip(&cache.decoder) {
            stage.update_running_stats(c);
        }
        self.head.update_running_stats(&cache.head);
    }

    pub(crate) fn backward(&mut self, cache: SegCache, d_logits: Tensor) -> Result<()> {
        let top = self.encoder.len();
        let mut d = self
            .head
            .backward(cache.head, d_logits, true)?
            .expect("input gradient requested");
        let mut d_enc: Vec<Option<Tensor>> = (0..top).map(|_| None).collect();
        for (s, (stage, c)) in self.decoder.iter_mut().zip(cache.decoder).enumerate().rev() {
            let (d_coarse, d_skip) = stage.backward(c, d)?;
            let fine_level = top - s - 1;
            if let Some(ds) = d_skip {
                add_into(&mut d_enc[fine_level - 1], ds);
            }
            d = d_coarse;
        }
        add_into(&mut d_enc[top - 1], d);
        for (l, (layer, c)) in self.encoder.iter_mut().zip(cache.encoder).enumerate().rev() {
            let g = d_enc[l].take().expect("every encoder output feeds the decoder");
            if let Some(prev) = layer.backward(c, g)? {
                add_into(&mut d_enc[l - 1], prev);
            }
        }
        Ok(())
    }
}

impl Parameters for SegmentationNet {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.encoder.visit_tensors(&join(prefix, "encoder"), f);
        self.decoder.visit_tensors(&join(prefix, "decoder"), f);
        self.head.visit_tensors(&join(prefix, "head"), f);
    }
}

/// Inference-mode classification of one cloud.
pub fn classify_forward(cloud: &PointCloud, net: &ClassificationNet) -> Result<ClassOutput> {
    let g = CloudGeometry::compute(&net.cfg, cloud.points())?;
    let (logits, _) = net.forward(&[&g], Mode::Inference)?;
    Ok(net.outputs(&[&g], &logits)?.remove(0))
}

/// Inference-mode per-point part logits `[n_points, n_parts]` for one cloud.
pub fn segment_forward(cloud: &PointCloud, net: &SegmentationNet) -> Result<Tensor> {
    let g = CloudGeometry::compute(&net.cfg, cloud.points())?;
    Ok(net.forward(&[&g], Mode::Inference)?.0)
}

/// A network of either task.
#[derive(Debug, Clone)]
pub enum Model {
    Classification(ClassificationNet),
    Segmentation(SegmentationNet),
}

/// Inference result for one cloud.
#[derive(Debug, Clone)]
pub enum Prediction {
    Class(ClassOutput),
    Parts { logits: Tensor, labels: Vec<usize> },
}

/// Loss and accuracy counts of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match cfg.task {
            Task::Classification => Model::Classification(ClassificationNet::new(cfg, &mut rng)?),
            Task::Segmentation => Model::Segmentation(SegmentationNet::new(cfg, &mut rng)?),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        match self {
            Model::Classification(n) => &n.cfg,
            Model::Segmentation(n) => &n.cfg,
        }
    }

    /// Encoder operators in order.
    pub fn encoder(&self) -> &[RIConvLayer] {
        match self {
            Model::Classification(n) => n.layers(),
            Model::Segmentation(n) => n.encoder(),
        }
    }

    /// Inference-mode output of encoder operator `layer` (0-based) on a
    /// single cloud.
    pub fn encoder_features(&self, cloud: &PointCloud, layer: usize) -> Result<LayerOutput> {
        let layers = self.encoder();
        if layer >= layers.len() {
            return Err(Error::InvalidInput(format!(
                "layer {layer} requested from an encoder of {} operators",
                layers.len()
            )));
        }
        let mut out = layers[0].apply(cloud, None, Mode::Inference)?;
        for l in &layers[1..=layer] {
            out = l.apply(&out.representative_cloud, Some(&out.features), Mode::Inference)?;
        }
        Ok(out)
    }

    pub fn geometry(&self, cloud: &PointCloud) -> Result<CloudGeometry> {
        CloudGeometry::compute(self.config(), cloud.points())
    }

    fn geometries(&self, clouds: &[PointCloud]) -> Result<Vec<CloudGeometry>> {
        par::map_slice(clouds, |c| self.geometry(c)).into_iter().collect()
    }

    /// Row labels for the loss, validating the clouds' labels.
    fn targets(&self, clouds: &[PointCloud], geoms: &[CloudGeometry]) -> Result<Vec<usize>> {
        let mut labels = Vec::new();
        match self {
            Model::Classification(net) => {
                for (c, g) in clouds.iter().zip(geoms) {
                    let label = c
                        .class_label()
                        .filter(|&l| l < net.cfg.n_classes)
                        .ok_or_else(|| Error::InvalidInput("training cloud lacks a valid class label".into()))?;
                    labels.extend(std::iter::repeat_n(label, net.rows_per_cloud(g)));
                }
            }
            Model::Segmentation(net) => {
                for c in clouds {
                    let parts = c
                        .part_labels()
                        .filter(|p| p.iter().all(|&l| l < net.cfg.n_parts))
                        .ok_or_else(|| Error::InvalidInput("training cloud lacks valid part labels".into()))?;
                    labels.extend_from_slice(parts);
                }
            }
        }
        Ok(labels)
    }

    /// Forward, backward and one optimizer step on a batch.
    pub fn train_step(&mut self, clouds: &[PointCloud], optimizer: &mut Adam) -> Result<StepStats> {
        let geoms = self.geometries(clouds)?;
        let targets = self.targets(clouds, &geoms)?;
        let refs: Vec<&CloudGeometry> = geoms.iter().collect();
        zero_grads(self);
        let stats = match self {
            Model::Classification(net) => {
                let (logits, cache) = net.forward(&refs, Mode::Training)?;
                let (loss, d) = ops::softmax_cross_entropy(&logits, &targets)?;
                let correct = net
                    .outputs(&refs, &logits)?
                    .iter()
                    .zip(clouds)
                    .filter(|(o, c)| Some(o.prediction) == c.class_label())
                    .count();
                net.update_running_stats(&cache);
                net.backward(cache, d)?;
                StepStats {
                    loss,
                    correct,
                    total: clouds.len(),
                }
            }
            Model::Segmentation(net) => {
                let (logits, cache) = net.forward(&refs, Mode::Training)?;
                let (loss, d) = ops::softmax_cross_entropy(&logits, &targets)?;
                let correct = (0..logits.rows())
                    .filter(|&r| argmax(logits.row(r)) == targets[r])
                    .count();
                net.update_running_stats(&cache);
                net.backward(cache, d)?;
                StepStats {
                    loss,
                    correct,
                    total: targets.len(),
                }
            }
        };
        if stats.loss.is_finite() {
            optimizer.step(self)?;
        }
        Ok(stats)
    }

    /// Inference-mode predictions, processed in batches of [`EVAL_BATCH`].
    pub fn predict(&self, clouds: &[PointCloud]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(clouds.len());
        for batch in clouds.chunks(EVAL_BATCH) {
            let geoms = self.geometries(batch)?;
            let refs: Vec<&CloudGeometry> = geoms.iter().collect();
            match self {
                Model::Classification(net) => {
                    let (logits, _) = net.forward(&refs, Mode::Inference)?;
                    out.extend(net.outputs(&refs, &logits)?.into_iter().map(Prediction::Class));
                }
                Model::Segmentation(net) => {
                    let (logits, _) = net.forward(&refs, Mode::Inference)?;
                    let n = net.cfg.n_parts;
                    let mut start = 0;
                    for c in batch {
                        let rows = logits.data()[start * n..(start + c.len()) * n].to_vec();
                        let logits = Tensor::from_vec(&[c.len(), n], rows)?;
                        let labels = (0..c.len()).map(|r| argmax(logits.row(r))).collect();
                        out.push(Prediction::Parts { logits, labels });
                        start += c.len();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Snapshot of all tensors, with the configuration stored alongside.
    pub fn checkpoint(&mut self, mut metadata: BTreeMap<String, String>) -> Checkpoint {
        let cfg = serde_json::to_string(self.config()).expect("config serializes");
        metadata.insert(CONFIG_KEY.to_string(), cfg);
        Checkpoint::capture(self, metadata)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let text = ckpt
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("missing '{CONFIG_KEY}' metadata")))?;
        let cfg: NetworkConfig =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad network config: {e}")))?;
        let mut model = Model::new(cfg, 0)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }
}

impl Parameters for Model {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        match self {
            Model::Classification(n) => n.visit_tensors(prefix, f),
            Model::Segmentation(n) => n.visit_tensors(prefix, f),
        }
    }
}
