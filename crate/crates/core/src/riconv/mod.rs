//! The rotation-invariant convolution operator and its upsampling
//! counterpart.
//!
//! Per representative point the operator gathers `k` neighbors, describes
//! them with rotation-invariant features, lifts those with a shared MLP,
//! concatenates the neighbors' incoming features, max-pools into bins ordered
//! along the reference axis, and applies a 1D convolution spanning all bins
//! (followed by batch-norm and ReLU).
//!
//! Geometry (sampling, neighborhoods, features, bins) does not depend on
//! learned parameters, so it is computed once per cloud as a [`Geometry`] and
//! then shared by the forward and backward passes of a whole batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::reduce_rows;
use crate::autodiff::{
    backward_stack, forward_stack, join, update_stack_running_stats, LayerCache, LayerParams, Mode, Parameters,
    Tensor,
};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};
use crate::par;
use crate::rif::{bin_assign, rif_features, NeighborFrame};
use crate::sampling::{farthest_point_sampling, knn_into};

mod lift;

use lift::FoldedLift;

const NO_SOURCE: u32 = u32::MAX;

/// Which per-neighbor descriptors enter the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `[d0, d1, alpha0, alpha1]`
    Full,
    /// `[d0, d1]`
    DistancesOnly,
    /// `[alpha0, alpha1]`
    AnglesOnly,
    /// Local coordinates `x - p`. Not rotation invariant.
    RawXyz,
}

impl FeatureMode {
    pub fn channels(self) -> usize {
        match self {
            FeatureMode::Full => 4,
            FeatureMode::DistancesOnly | FeatureMode::AnglesOnly => 2,
            FeatureMode::RawXyz => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RIConvConfig {
    /// Points sampled as reference points. Equal to the input size means
    /// "no sampling": every point is a representative, in input order.
    pub n_representatives: usize,
    pub k_neighbors: usize,
    pub n_bins: usize,
    pub lift_mlp_widths: Vec<usize>,
    pub out_channels: usize,
    pub feature_mode: FeatureMode,
    pub use_lift_mlp: bool,
}

impl RIConvConfig {
    pub fn new(n_representatives: usize, k_neighbors: usize, n_bins: usize, out_channels: usize) -> Self {
        Self {
            n_representatives,
            k_neighbors,
            n_bins,
            lift_mlp_widths: vec![64],
            out_channels,
            feature_mode: FeatureMode::Full,
            use_lift_mlp: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_bins == 0 {
            return bad("n_bins must be at least 1".into());
        }
        if self.k_neighbors < self.n_bins {
            return bad(format!(
                "k_neighbors ({}) must be at least n_bins ({})",
                self.k_neighbors, self.n_bins
            ));
        }
        if self.n_representatives == 0 || self.out_channels == 0 {
            return bad("n_representatives and out_channels must be positive".into());
        }
        if self.use_lift_mlp && (self.lift_mlp_widths.is_empty() || self.lift_mlp_widths.contains(&0)) {
            return bad("lift MLP widths must be a non-empty list of positive widths".into());
        }
        if self.k_neighbors > NO_SOURCE as usize {
            return bad("k_neighbors too large".into());
        }
        Ok(())
    }

    /// Width of the per-neighbor features after the (optional) lift MLP.
    pub fn lifted_channels(&self) -> usize {
        if self.use_lift_mlp {
            *self.lift_mlp_widths.last().expect("validated")
        } else {
            self.feature_mode.channels()
        }
    }
}

/// Parameter-independent structure of one operator applied to one cloud.
#[derive(Debug, Clone)]
pub struct Geometry {
    n_points: usize,
    k: usize,
    n_bins: usize,
    feature_channels: usize,
    rep_indices: Vec<usize>,
    rep_points: Vec<Point3>,
    /// `[n_reps * k]` neighbor indices into the input cloud.
    neighbors: Vec<usize>,
    /// `[n_reps * k]` bin of each neighbor.
    bins: Vec<usize>,
    /// `[n_reps * k, feature_channels]`
    features: Vec<f64>,
    fallback_frames: usize,
    null_frames: usize,
    empty_bins: usize,
}

struct Patch {
    neighbors: Vec<usize>,
    bins: Vec<usize>,
    features: Vec<f64>,
    fallback: bool,
    null: bool,
}

fn local_patch(points: &[Point3], p_index: usize, cfg: &RIConvConfig) -> Result<Patch> {
    let p = points[p_index];
    let mut scratch = Vec::new();
    let mut neighbors = Vec::new();
    knn_into(points, p, cfg.k_neighbors, &mut scratch, &mut neighbors)?;
    let nbr_pts: Vec<Point3> = neighbors.iter().map(|&i| points[i]).collect();
    let dim = cfg.feature_mode.channels();
    let k = neighbors.len();

    if nbr_pts.iter().all(|&x| x == p) {
        // Every neighbor coincides with p: no reference direction exists.
        // Distances and angles are all zero by convention, one bin.
        return Ok(Patch {
            neighbors,
            bins: vec![0; k],
            features: vec![0.0; k * dim],
            fallback: false,
            null: true,
        });
    }
    let frame = NeighborFrame::from_neighbors(p_index, p, neighbors, nbr_pts)?;
    let mut features = Vec::with_capacity(k * dim);
    match cfg.feature_mode {
        FeatureMode::RawXyz => {
            for &x in &frame.neighbor_points {
                features.extend_from_slice(&(x - p).to_array());
            }
        }
        mode => {
            for f in rif_features(&frame) {
                match mode {
                    FeatureMode::Full => features.extend_from_slice(&f.to_array()),
                    FeatureMode::DistancesOnly => features.extend_from_slice(&[f.d0, f.d1]),
                    FeatureMode::AnglesOnly => features.extend_from_slice(&[f.alpha0, f.alpha1]),
                    FeatureMode::RawXyz => unreachable!(),
                }
            }
        }
    }
    let bins = bin_assign(&frame, cfg.n_bins)?.bin_of;
    Ok(Patch {
        neighbors: frame.neighbor_indices,
        bins,
        features,
        fallback: frame.degenerate_fallback_used,
        null: false,
    })
}

impl Geometry {
    pub fn compute(points: &[Point3], cfg: &RIConvConfig) -> Result<Self> {
        cfg.validate()?;
        let n = points.len();
        if cfg.n_representatives > n || cfg.k_neighbors > n {
            return Err(Error::Config(format!(
                "layer needs {} representatives with {} neighbors but the input has {n} points",
                cfg.n_representatives, cfg.k_neighbors
            )));
        }
        let rep_indices = if cfg.n_representatives == n {
            (0..n).collect()
        } else {
            farthest_point_sampling(points, cfg.n_representatives)?.into_indices()
        };
        let patches = par::map_slice(&rep_indices, |&i| local_patch(points, i, cfg));
        let k = cfg.k_neighbors;
        let dim = cfg.feature_mode.channels();
        let r = rep_indices.len();
        let mut g = Geometry {
            n_points: n,
            k,
            n_bins: cfg.n_bins,
            feature_channels: dim,
            rep_points: rep_indices.iter().map(|&i| points[i]).collect(),
            rep_indices,
            neighbors: Vec::with_capacity(r * k),
            bins: Vec::with_capacity(r * k),
            features: Vec::with_capacity(r * k * dim),
            fallback_frames: 0,
            null_frames: 0,
            empty_bins: 0,
        };
        for patch in patches {
            let patch = patch?;
            let mut filled = vec![false; cfg.n_bins];
            for &b in &patch.bins {
                filled[b] = true;
            }
            g.empty_bins += filled.iter().filter(|f| !**f).count();
            g.neighbors.extend(patch.neighbors);
            g.bins.extend(patch.bins);
            g.features.extend(patch.features);
            g.fallback_frames += patch.fallback as usize;
            g.null_frames += patch.null as usize;
        }
        if g.empty_bins > 0 {
            log::debug!("{} empty bins over {} representatives", g.empty_bins, r);
        }
        Ok(g)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_representatives(&self) -> usize {
        self.rep_indices.len()
    }

    pub fn rep_indices(&self) -> &[usize] {
        &self.rep_indices
    }

    pub fn rep_points(&self) -> &[Point3] {
        &self.rep_points
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    /// Row-major `[n_reps * k, channels]` local descriptors.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn fallback_frames(&self) -> usize {
        self.fallback_frames
    }

    pub fn null_frames(&self) -> usize {
        self.null_frames
    }

    pub fn empty_bins(&self) -> usize {
        self.empty_bins
    }
}

/// Learnable state of one operator.
#[derive(Debug, Clone)]
pub struct RIConvLayer {
    cfg: RIConvConfig,
    prev_channels: usize,
    lift: Vec<LayerParams>,
    conv: LayerParams,
}

/// How the per-slot descriptors became lifted features.
enum LiftCache {
    /// No lift MLP: descriptors are pooled directly.
    Raw,
    Stack(Vec<LayerCache>),
    Folded { raw: Vec<f64>, lift: FoldedLift },
}

pub struct RIConvCache {
    lift: LiftCache,
    conv: LayerCache,
    /// Winning neighbor slot per pooled element, `NO_SOURCE` for empty bins.
    argmax: Vec<u32>,
    /// Batch-wide row of the incoming features for each neighbor slot.
    slot_prev_row: Vec<u32>,
    prev_rows: usize,
}

/// Features on the representative points of one cloud.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub representative_cloud: PointCloud,
    /// `[n_representatives, out_channels]`
    pub features: Tensor,
}

impl RIConvLayer {
    pub fn new<R: Rng + ?Sized>(cfg: RIConvConfig, prev_channels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut lift = Vec::new();
        if cfg.use_lift_mlp {
            let mut c = cfg.feature_mode.channels();
            for &w in &cfg.lift_mlp_widths {
                lift.push(LayerParams::new(c, w, true, true, rng));
                c = w;
            }
        }
        let c_in = prev_channels + cfg.lifted_channels();
        let conv = LayerParams::new(cfg.n_bins * c_in, cfg.out_channels, true, true, rng);
        Ok(Self {
            cfg,
            prev_channels,
            lift,
            conv,
        })
    }

    pub fn config(&self) -> &RIConvConfig {
        &self.cfg
    }

    pub fn prev_channels(&self) -> usize {
        self.prev_channels
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    pub fn geometry(&self, points: &[Point3]) -> Result<Geometry> {
        Geometry::compute(points, &self.cfg)
    }

    /// Batched forward over clouds described by `geoms`. `prev` stacks the
    /// incoming per-point features of all clouds in order, and must be
    /// `None` exactly when the layer has no incoming channels. Returns the
    /// stacked `[Σ n_reps, out_channels]` output.
    pub fn forward(&self, geoms: &[&Geometry], prev: Option<&Tensor>, mode: Mode) -> Result<(Tensor, RIConvCache)> {
        self.forward_impl(geoms, prev, mode, true)
    }

    fn forward_impl(
        &self,
        geoms: &[&Geometry],
        prev: Option<&Tensor>,
        mode: Mode,
        allow_fold: bool,
    ) -> Result<(Tensor, RIConvCache)> {
        let cp = self.prev_channels;
        let total_points: usize = geoms.iter().map(|g| g.n_points).sum();
        match prev {
            Some(t) if cp > 0 && t.shape() == [total_points, cp] => {}
            None if cp == 0 => {}
            _ => {
                return Err(Error::shape(
                    "riconv",
                    format!(
                        "expected incoming features [{total_points}, {cp}], got {:?}",
                        prev.map(|t| t.shape().to_vec())
                    ),
                ))
            }
        }
        for g in geoms {
            if g.k != self.cfg.k_neighbors || g.n_bins != self.cfg.n_bins || g.feature_channels != self.cfg.feature_mode.channels() {
                return Err(Error::shape("riconv", "geometry was computed for a different configuration"));
            }
        }
        let k = self.cfg.k_neighbors;
        let nb = self.cfg.n_bins;
        let dim = self.cfg.feature_mode.channels();
        let m: usize = geoms.iter().map(|g| g.neighbors.len()).sum();
        let reps: usize = geoms.iter().map(|g| g.n_representatives()).sum();
        if total_points > NO_SOURCE as usize || m > NO_SOURCE as usize {
            return Err(Error::InvalidInput("batch too large".into()));
        }

        let mut raw = Vec::with_capacity(m * dim);
        let mut slot_bin = Vec::with_capacity(m);
        let mut slot_prev_row = Vec::with_capacity(m);
        let mut offset = 0;
        for g in geoms {
            raw.extend_from_slice(&g.features);
            slot_bin.extend(g.bins.iter().map(|&b| b as u32));
            slot_prev_row.extend(g.neighbors.iter().map(|&i| (offset + i) as u32));
            offset += g.n_points;
        }
        // lifted rows are either stored (`stored`) or computed per slot
        let (stored, lift_cache, cl) = if !self.cfg.use_lift_mlp {
            (Some(raw), LiftCache::Raw, dim)
        } else if let Some(layer) = self.foldable_lift().filter(|_| allow_fold) {
            let lift = FoldedLift::new(layer, &raw, dim, mode);
            let cl = lift.channels();
            (None, LiftCache::Folded { raw, lift }, cl)
        } else {
            let (t, caches) = forward_stack(&self.lift, Tensor::from_vec(&[m, dim], raw)?, mode)?;
            let cl = t.cols();
            (Some(t.into_data()), LiftCache::Stack(caches), cl)
        };
        let c_in = cp + cl;
        let width = nb * c_in;

        let mut pooled = vec![0.0; reps * width];
        let mut argmax = vec![NO_SOURCE; reps * width];
        let prev_data = prev.map(|t| t.data());
        let folded = match &lift_cache {
            LiftCache::Folded { raw, lift } => Some((raw, lift)),
            _ => None,
        };
        par::for_each_chunk_pair_mut(&mut pooled, width, &mut argmax, width, |r, out, arg| {
            let mut buf = vec![0.0; cl];
            for slot in r * k..(r + 1) * k {
                let base = slot_bin[slot] as usize * c_in;
                if let Some(pd) = prev_data {
                    let row = slot_prev_row[slot] as usize;
                    let src = &pd[row * cp..(row + 1) * cp];
                    pool_into(&mut out[base..base + cp], &mut arg[base..base + cp], src, slot as u32);
                }
                let src = match (&stored, folded) {
                    (Some(data), _) => &data[slot * cl..(slot + 1) * cl],
                    (None, Some((raw, lift))) => {
                        lift.row(&raw[slot * dim..(slot + 1) * dim], &mut buf);
                        &buf[..]
                    }
                    (None, None) => unreachable!("lifted rows are stored or folded"),
                };
                pool_into(&mut out[base + cp..base + c_in], &mut arg[base + cp..base + c_in], src, slot as u32);
            }
        });
        drop(stored);
        let pooled = Tensor::from_vec(&[reps, width], pooled)?;
        let (out, conv_cache) = self.conv.forward(pooled, mode)?;
        if !out.all_finite() {
            return Err(Error::NonFinite {
                location: format!(
                    "riconv output ({} reps, k = {k}, {nb} bins, {} -> {} channels)",
                    reps, c_in, self.cfg.out_channels
                ),
            });
        }
        Ok((
            out,
            RIConvCache {
                lift: lift_cache,
                conv: conv_cache,
                argmax,
                slot_prev_row,
                prev_rows: total_points,
            },
        ))
    }

    /// The lift layer when it can run folded: a single dense layer with
    /// batch-norm and ReLU.
    fn foldable_lift(&self) -> Option<&LayerParams> {
        match &self.lift[..] {
            [l] if l.bn.is_some() && l.relu => Some(l),
            _ => None,
        }
    }

    pub fn update_running_stats(&mut self, cache: &RIConvCache) {
        match &cache.lift {
            LiftCache::Raw => {}
            LiftCache::Stack(caches) => update_stack_running_stats(&mut self.lift, caches),
            LiftCache::Folded { lift, .. } => {
                if let (Some((mean, var)), Some(bn)) = (lift.batch_stats(), self.lift[0].bn.as_mut()) {
                    bn.fold_batch_stats(mean, var);
                }
            }
        }
        self.conv.update_running_stats(&cache.conv);
    }

    /// Accumulates parameter gradients; returns the gradient of the stacked
    /// incoming features when the layer has any.
    pub fn backward(&mut self, cache: RIConvCache, d_out: Tensor) -> Result<Option<Tensor>> {
        let RIConvCache {
            lift,
            conv,
            argmax,
            slot_prev_row,
            prev_rows,
        } = cache;
        let d_pooled = self
            .conv
            .backward(conv, d_out, true)?
            .expect("input gradient requested");
        let cp = self.prev_channels;
        let c_in = d_pooled.cols() / self.cfg.n_bins;
        let cl = c_in - cp;
        let g = d_pooled.data();

        let mut d_prev = (cp > 0).then(|| vec![0.0; prev_rows * cp]);
        if let Some(dp) = d_prev.as_mut() {
            for (e, &a) in argmax.iter().enumerate() {
                let c = e % c_in;
                if a != NO_SOURCE && c < cp {
                    dp[slot_prev_row[a as usize] as usize * cp + c] += g[e];
                }
            }
        }
        match lift {
            LiftCache::Raw => {}
            LiftCache::Stack(caches) => {
                let m = slot_prev_row.len();
                let mut d_lifted = vec![0.0; m * cl];
                for (e, &a) in argmax.iter().enumerate() {
                    let c = e % c_in;
                    if a != NO_SOURCE && c >= cp {
                        // each (slot, channel) wins at most one pooled element
                        d_lifted[a as usize * cl + (c - cp)] = g[e];
                    }
                }
                backward_stack(&mut self.lift, caches, Tensor::from_vec(&[m, cl], d_lifted)?, false)?;
            }
            LiftCache::Folded { raw, lift } => {
                let dim = self.cfg.feature_mode.channels();
                let width = d_pooled.cols();
                let reps = d_pooled.rows();
                let acc = reduce_rows(reps, lift.acc_width(), |s, e, acc| {
                    for i in s * width..e * width {
                        let c = i % c_in;
                        let a = argmax[i];
                        if a != NO_SOURCE && c >= cp && g[i] != 0.0 {
                            let a = a as usize;
                            lift.accumulate(&raw[a * dim..(a + 1) * dim], c - cp, g[i], acc);
                        }
                    }
                });
                lift.apply_grads(&mut self.lift[0], &acc);
            }
        }
        d_prev.map(|d| Tensor::from_vec(&[prev_rows, cp], d)).transpose()
    }

    /// Single-cloud convenience wrapper: computes the geometry and runs the
    /// layer.
    pub fn apply(&self, cloud: &PointCloud, prev: Option<&Tensor>, mode: Mode) -> Result<LayerOutput> {
        let g = self.geometry(cloud.points())?;
        let (features, _) = self.forward(&[&g], prev, mode)?;
        Ok(LayerOutput {
            representative_cloud: sub_cloud(cloud, g.rep_indices())?,
            features,
        })
    }
}

/// Max-pools `src` into `out`, recording `slot` where it wins. The first
/// slot wins ties.
fn pool_into(out: &mut [f64], arg: &mut [u32], src: &[f64], slot: u32) {
    for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(src) {
        if *a == NO_SOURCE || v > *o {
            *o = v;
            *a = slot;
        }
    }
}

impl Parameters for RIConvLayer {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.lift.visit_tensors(&join(prefix, "lift"), f);
        self.conv.visit_tensors(&join(prefix, "conv"), f);
    }
}

/// Inference-mode application of one operator to a single cloud.
pub fn riconv_forward(cloud: &PointCloud, prev_features: Option<&Tensor>, layer: &RIConvLayer) -> Result<LayerOutput> {
    layer.apply(cloud, prev_features, Mode::Inference)
}

pub(crate) fn sub_cloud(cloud: &PointCloud, indices: &[usize]) -> Result<PointCloud> {
    let pts = indices.iter().map(|&i| cloud.points()[i]).collect();
    let mut out = PointCloud::new(pts)?;
    if let Some(l) = cloud.part_labels() {
        out = out.with_part_labels(indices.iter().map(|&i| l[i]).collect())?;
    }
    if let Some(c) = cloud.class_label() {
        out = out.with_class_label(c);
    }
    Ok(out)
}

/// Number of coarse points each fine point interpolates from.
pub const DEFAULT_INTERP_NEIGHBORS: usize = 3;

/// Inverse-distance weights from coarse points onto fine points.
#[derive(Debug, Clone)]
pub struct Interpolation {
    n_coarse: usize,
    n_fine: usize,
    neighbors: usize,
    /// `[n_fine * neighbors]`
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl Interpolation {
    pub fn compute(coarse: &[Point3], fine: &[Point3], neighbors: usize) -> Result<Self> {
        if coarse.is_empty() || fine.is_empty() || neighbors == 0 {
            return Err(Error::InvalidInput("interpolation needs points on both sides".into()));
        }
        let j = neighbors.min(coarse.len());
        let rows = par::map_slice(fine, |&q| -> Result<(Vec<usize>, Vec<f64>)> {
            let mut scratch = Vec::new();
            let mut idx = Vec::new();
            knn_into(coarse, q, j, &mut scratch, &mut idx)?;
            let d: Vec<f64> = idx.iter().map(|&i| coarse[i].distance(q)).collect();
            let w = if d[0] == 0.0 {
                // coincident with a coarse point: copy it
                let mut w = vec![0.0; j];
                w[0] = 1.0;
                w
            } else {
                let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
                let s: f64 = inv.iter().sum();
                inv.iter().map(|v| v / s).collect()
            };
            Ok((idx, w))
        });
        let mut sources = Vec::with_capacity(fine.len() * j);
        let mut weights = Vec::with_capacity(fine.len() * j);
        for r in rows {
            let (i, w) = r?;
            sources.extend(i);
            weights.extend(w);
        }
        Ok(Self {
            n_coarse: coarse.len(),
            n_fine: fine.len(),
            neighbors: j,
            sources,
            weights,
        })
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn n_coarse(&self) -> usize {
        self.n_coarse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    pub interp_neighbors: usize,
    /// Width of the MLP applied to `[interpolated, skip]` features.
    pub mlp_out: usize,
    /// Operator on the fine cloud; `n_representatives` equals the fine size.
    pub conv: RIConvConfig,
}

/// Geometry of one decoder stage for one cloud.
#[derive(Debug, Clone)]
pub struct DeconvGeometry {
    pub interpolation: Interpolation,
    pub conv: Geometry,
}

impl DeconvGeometry {
    pub fn compute(coarse: &[Point3], fine: &[Point3], cfg: &DeconvConfig) -> Result<Self> {
        if cfg.conv.n_representatives != fine.len() {
            return Err(Error::Config(format!(
                "decoder operator expects {} fine points, got {}",
                cfg.conv.n_representatives,
                fine.len()
            )));
        }
        Ok(Self {
            interpolation: Interpolation::compute(coarse, fine, cfg.interp_neighbors)?,
            conv: Geometry::compute(fine, &cfg.conv)?,
        })
    }
}

/// Upsampling stage: interpolate coarse features onto the fine cloud,
/// concatenate skip features, apply an MLP, then an operator whose
/// representatives are all fine points.
#[derive(Debug, Clone)]
pub struct RIDeconvLayer {
    cfg: DeconvConfig,
    coarse_channels: usize,
    skip_channels: usize,
    mlp: LayerParams,
    conv: RIConvLayer,
}

pub struct RIDeconvCache {
    mlp: LayerCache,
    conv: RIConvCache,
    sources: Vec<u32>,
    weights: Vec<f64>,
    row_start: Vec<usize>,
    coarse_rows: usize,
}

impl RIDeconvLayer {
    pub fn new<R: Rng + ?Sized>(
        cfg: DeconvConfig,
        coarse_channels: usize,
        skip_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.interp_neighbors == 0 || cfg.mlp_out == 0 {
            return Err(Error::Config("decoder needs positive interpolation neighbors and MLP width".into()));
        }
        let mlp = LayerParams::new(coarse_channels + skip_channels, cfg.mlp_out, true, true, rng);
        let conv = RIConvLayer::new(cfg.conv.clone(), cfg.mlp_out, rng)?;
        Ok(Self {
            cfg,
            coarse_channels,
            skip_channels,
            mlp,
            conv,
        })
    }

    pub fn config(&self) -> &DeconvConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn geometry(&self, coarse: &[Point3], fine: &[Point3]) -> Result<DeconvGeometry> {
        DeconvGeometry::compute(coarse, fine, &self.cfg)
    }

    /// `coarse` stacks `[Σ n_coarse, coarse_channels]`; `skip` stacks
    /// `[Σ n_fine, skip_channels]` (absent when there are no skip channels).
    pub fn forward(
        &self,
        geoms: &[&DeconvGeometry],
        coarse: &Tensor,
        skip: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(Tensor, RIDeconvCache)> {
        let cc = self.coarse_channels;
        let cs = self.skip_channels;
        let coarse_rows: usize = geoms.iter().map(|g| g.interpolation.n_coarse).sum();
        let fine_rows: usize = geoms.iter().map(|g| g.interpolation.n_fine).sum();
        if coarse.shape() != [coarse_rows, cc] {
            return Err(Error::shape(
                "rideconv",
                format!("coarse features {:?}, expected [{coarse_rows}, {cc}]", coarse.shape()),
            ));
        }
        match skip {
            Some(s) if cs > 0 && s.shape() == [fine_rows, cs] => {}
            None if cs == 0 => {}
            _ => {
                return Err(Error::shape(
                    "rideconv",
                    format!("skip features should be [{fine_rows}, {cs}]"),
                ))
            }
        }
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        let mut off = 0;
        for g in geoms {
            let it = &g.interpolation;
            sources.extend(it.sources.iter().map(|&s| (off + s) as u32));
            weights.extend_from_slice(&it.weights);
            off += it.n_coarse;
        }
        let mut row_start = Vec::with_capacity(fine_rows + 1);
        row_start.push(0);
        for g in geoms {
            for _ in 0..g.interpolation.n_fine {
                let last = *row_start.last().expect("non-empty");
                row_start.push(last + g.interpolation.neighbors);
            }
        }
        let width = cc + cs;
        let mut joined = vec![0.0; fine_rows * width];
        let cd = coarse.data();
        par::for_each_chunk_mut(&mut joined, width, |r, row| {
            for s in row_start[r]..row_start[r + 1] {
                let w = weights[s];
                let src = sources[s] as usize;
                for (o, v) in row[..cc].iter_mut().zip(&cd[src * cc..(src + 1) * cc]) {
                    *o += w * v;
                }
            }
            if let Some(sk) = skip {
                row[cc..].copy_from_slice(sk.row(r));
            }
        });
        let joined = Tensor::from_vec(&[fine_rows, width], joined)?;
        let (h, mlp_cache) = self.mlp.forward(joined, mode)?;
        let conv_geoms: Vec<&Geometry> = geoms.iter().map(|g| &g.conv).collect();
        let (out, conv_cache) = self.conv.forward(&conv_geoms, Some(&h), mode)?;
        Ok((
            out,
            RIDeconvCache {
                mlp: mlp_cache,
                conv: conv_cache,
                sources,
                weights,
                row_start,
                coarse_rows,
            },
        ))
    }

    pub fn update_running_stats(&mut self, cache: &RIDeconvCache) {
        self.mlp.update_running_stats(&cache.mlp);
        self.conv.update_running_stats(&cache.conv);
    }

    /// Returns gradients of the coarse and (if any) skip features.
    pub fn backward(&mut self, cache: RIDeconvCache, d_out: Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let d_h = self.conv.backward(cache.conv, d_out)?.expect("decoder operator has inputs");
        let d_joined = self.mlp.backward(cache.mlp, d_h, true)?.expect("input gradient requested");
        let cc = self.coarse_channels;
        let cs = self.skip_channels;
        let width = cc + cs;
        let fine_rows = d_joined.rows();
        let gj = d_joined.data();
        let mut d_coarse = vec![0.0; cache.coarse_rows * cc];
        for row in 0..fine_rows {
            let g = &gj[row * width..row * width + cc];
            for e in cache.row_start[row]..cache.row_start[row + 1] {
                let w = cache.weights[e];
                let src = cache.sources[e] as usize;
                for (d, v) in d_coarse[src * cc..(src + 1) * cc].iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
        let d_skip = (cs > 0).then(|| {
            let mut v = Vec::with_capacity(fine_rows * cs);
            for row in 0..fine_rows {
                v.extend_from_slice(&gj[row * width + cc..(row + 1) * width]);
            }
            Tensor::matrix(fine_rows, cs, v)
        });
        Ok((Tensor::matrix(cache.coarse_rows, cc, d_coarse), d_skip))
    }

    /// Single-cloud inference wrapper.
    pub fn apply(&self, coarse: &LayerOutput, fine_cloud: &PointCloud, skip: Option<&Tensor>, mode: Mode) -> Result<LayerOutput> {
        let g = self.geometry(coarse.representative_cloud.points(), fine_cloud.points())?;
        let (features, _) = self.forward(&[&g], &coarse.features, skip, mode)?;
        Ok(LayerOutput {
            representative_cloud: fine_cloud.clone(),
            features,
        })
    }
}

impl Parameters for RIDeconvLayer {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.mlp.visit_tensors(&join(prefix, "mlp"), f);
        self.conv.visit_tensors(&join(prefix, "conv"), f);
    }
}

/// Inference-mode decoder stage on a single cloud.
pub fn rideconv_forward(
    coarse: &LayerOutput,
    fine_cloud: &PointCloud,
    skip_features: Option<&Tensor>,
    layer: &RIDeconvLayer,
) -> Result<LayerOutput> {
    layer.apply(coarse, fine_cloud, skip_features, Mode::Inference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::zero_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)))
            .collect()
    }

    fn grads(layer: &mut RIConvLayer) -> Vec<f64> {
        let mut out = Vec::new();
        layer.visit_tensors("", &mut |_, t, trainable| {
            if trainable {
                out.extend_from_slice(t.grad().unwrap_or(&[]));
            }
        });
        out
    }

    fn params(layer: &mut RIConvLayer) -> Vec<f64> {
        let mut out = Vec::new();
        layer.visit_tensors("", &mut |_, t, _| out.extend_from_slice(t.data()));
        out
    }

    #[test]
    fn folded_lift_matches_stacked_lift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RIConvConfig::new(16, 12, 3, 7);
        let layer = RIConvLayer::new(cfg, 5, &mut rng).unwrap();
        let geoms: Vec<Geometry> = (0..3).map(|_| layer.geometry(&cloud(&mut rng, 40)).unwrap()).collect();
        let refs: Vec<&Geometry> = geoms.iter().collect();
        let prev = Tensor::from_vec(&[120, 5], (0..600).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let dy = Tensor::from_vec(&[48, 7], (0..48 * 7).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        for mode in [Mode::Training, Mode::Inference] {
            let mut results = Vec::new();
            for fold in [true, false] {
                let mut l = layer.clone();
                zero_grads(&mut l);
                let (y, cache) = l.forward_impl(&refs, Some(&prev), mode, fold).unwrap();
                l.update_running_stats(&cache);
                let dp = l.backward(cache, dy.clone()).unwrap().unwrap();
                results.push((y.into_data(), dp.into_data(), grads(&mut l), params(&mut l)));
            }
            let close = |a: &[f64], b: &[f64]| {
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
                }
            };
            close(&results[0].0, &results[1].0);
            close(&results[0].1, &results[1].1);
            close(&results[0].2, &results[1].2);
            close(&results[0].3, &results[1].3);
        }
    }
}
