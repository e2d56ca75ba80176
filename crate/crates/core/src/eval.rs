//! Pose-error metrics, cross-modal retrieval, decode-from-embedding pose
//! estimation and latent interpolation.
//!
//! Pose errors are in meters, the units of the synthetic data.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::embedding::{interpolate, mean_positive_cosine, Embedding, Modality};
use crate::error::{Error, Result};
use crate::linalg3::{norm3, procrustes_align, sub3, Vec3};
use crate::nn::PoseKind;
use crate::synth::{flatten3, unflatten3, Dataset, Skeleton, Split};
use crate::trainer::{Models, Stage};
use crate::util::write_atomic;

const UNIT_TOL: f64 = 1e-6;

/// Mean Euclidean distance over joints.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "pose sizes differ: {} vs {} joints",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty pose"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| norm3(&sub3(p, g))).sum::<f64>() / pred.len() as f64)
}

/// MPJPE after the best similarity transform of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let t = procrustes_align(pred, gt)?;
    mpjpe(&t.apply_all(pred), gt)
}

/// Subtracts joint 0 from every joint.
pub fn root_relative(pose: &[Vec3]) -> Vec<Vec3> {
    match pose.first() {
        Some(root) => {
            let r = *root;
            pose.iter().map(|p| sub3(p, &r)).collect()
        }
        None => Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// "m" for pose errors, "fraction" for accuracies.
    pub units: String,
    pub n: usize,
    /// Reference value of a random (or trivial) predictor on the same data.
    pub baseline: Option<f64>,
}

impl MetricReport {
    fn new(metric: impl Into<String>, value: f64, units: &str, n: usize, baseline: Option<f64>) -> Self {
        MetricReport {
            metric: metric.into(),
            value,
            units: units.into(),
            n,
            baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: Vec<MetricReport>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "metric", "value", "units", "n", "baseline"])
            .map_err(|e| Error::invalid(e.to_string()))?;
        for m in &self.metrics {
            w.write_record([
                self.task.clone(),
                m.metric.clone(),
                m.value.to_string(),
                m.units.clone(),
                m.n.to_string(),
                m.baseline.map(|b| b.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes JSON to `path` and CSV next to it (same stem, `.csv`). Both
    /// files are rendered before either is written.
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = self.to_json();
        let csv = self.to_csv()?;
        write_atomic(path, json.as_bytes())?;
        write_atomic(&path.with_extension("csv"), &csv)
    }
}

/// Unit-norm embeddings with aligned sample ids and optional 3D poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    embeddings: Array2<f64>,
    modality: Modality,
    ids: Vec<u64>,
    poses: Option<Vec<Vec<Vec3>>>,
}

impl Gallery {
    pub fn new(
        embeddings: Array2<f64>,
        modality: Modality,
        ids: Vec<u64>,
        poses: Option<Vec<Vec<Vec3>>>,
    ) -> Result<Gallery> {
        if embeddings.nrows() == 0 {
            return Err(Error::invalid("gallery is empty"));
        }
        if ids.len() != embeddings.nrows() || poses.as_ref().is_some_and(|p| p.len() != ids.len()) {
            return Err(Error::invalid("gallery payloads do not match its embeddings"));
        }
        for (i, r) in embeddings.rows().into_iter().enumerate() {
            if (r.dot(&r).sqrt() - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("gallery row {i} is not unit norm")));
            }
        }
        Ok(Gallery {
            embeddings,
            modality,
            ids,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn pose(&self, i: usize) -> Option<&[Vec3]> {
        self.poses.as_ref().map(|p| p[i].as_slice())
    }
}

/// Indices of the `k` highest scores, ties to the lower index.
pub fn top_k_indices(scores: ArrayView1<'_, f64>, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("k = {k} must be in 1..={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Gallery positions of the `k` entries most cosine-similar to `query`.
pub fn retrieve_pose(query: &Embedding, gallery: &Gallery, k: usize) -> Result<Vec<usize>> {
    if query.dim() != gallery.embeddings.ncols() {
        return Err(Error::invalid("query and gallery dimensions differ"));
    }
    let scores = gallery.embeddings.dot(&ArrayView1::from(query.values()));
    top_k_indices(scores.view(), k)
}

/// Expected MPJPE (and PA-MPJPE) when each query retrieves a uniformly random
/// gallery entry: the exact mean over all query/gallery pairs.
pub fn random_retrieval_baseline(gt: &[Vec<Vec3>], gallery: &[Vec<Vec3>]) -> Result<(f64, f64)> {
    if gt.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("baseline needs non-empty pose sets"));
    }
    let (mut m, mut pa) = (0.0, 0.0);
    for q in gt {
        for g in gallery {
            m += mpjpe(g, q)?;
            pa += pa_mpjpe(g, q)?;
        }
    }
    let n = (gt.len() * gallery.len()) as f64;
    Ok((m / n, pa / n))
}

/// Top-1 pose retrieval error of queries against a pose-carrying gallery.
pub fn pose_retrieval_metrics(
    queries: ArrayView2<'_, f64>,
    gt: &[Vec<Vec3>],
    gallery: &Gallery,
    prefix: &str,
) -> Result<Vec<MetricReport>> {
    let poses = gallery
        .poses
        .as_ref()
        .ok_or_else(|| Error::invalid("gallery carries no poses"))?;
    if queries.nrows() != gt.len() || gt.is_empty() {
        return Err(Error::invalid("need one ground-truth pose per query"));
    }
    let scores = queries.dot(&gallery.embeddings.t());
    let (mut m, mut pa) = (0.0, 0.0);
    for (row, truth) in scores.rows().into_iter().zip(gt) {
        let best = top_k_indices(row, 1)?[0];
        m += mpjpe(&poses[best], truth)?;
        pa += pa_mpjpe(&poses[best], truth)?;
    }
    let n = gt.len();
    let (bm, bpa) = random_retrieval_baseline(gt, poses)?;
    Ok(vec![
        MetricReport::new(format!("{prefix}mpjpe"), m / n as f64, "m", n, Some(bm)),
        MetricReport::new(format!("{prefix}pa_mpjpe"), pa / n as f64, "m", n, Some(bpa)),
    ])
}

/// Top-k accuracy where a hit retrieves the query's own id.
pub fn image_retrieval_metrics(
    queries: ArrayView2<'_, f64>,
    query_ids: &[u64],
    gallery: &Gallery,
    ks: &[usize],
    prefix: &str,
) -> Result<Vec<MetricReport>> {
    if queries.nrows() != query_ids.len() || query_ids.is_empty() {
        return Err(Error::invalid("need one id per query"));
    }
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::invalid("no k values given"))?;
    let scores = queries.dot(&gallery.embeddings.t());
    let mut hits = vec![0usize; ks.len()];
    for (row, id) in scores.rows().into_iter().zip(query_ids) {
        let top = top_k_indices(row, kmax)?;
        let rank = top.iter().position(|&i| gallery.ids[i] == *id);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    let n = query_ids.len();
    let g = gallery.len() as f64;
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| {
            MetricReport::new(
                format!("{prefix}top{k}"),
                h as f64 / n as f64,
                "fraction",
                n,
                Some((k as f64 / g).min(1.0)),
            )
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    PoseRetrieval,
    ImageRetrieval,
    Hpe,
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalTask::PoseRetrieval => "pose-retrieval",
            EvalTask::ImageRetrieval => "image-retrieval",
            EvalTask::Hpe => "hpe",
        })
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<EvalTask> {
        match s {
            "pose-retrieval" => Ok(EvalTask::PoseRetrieval),
            "image-retrieval" => Ok(EvalTask::ImageRetrieval),
            "hpe" => Ok(EvalTask::Hpe),
            other => Err(Error::invalid(format!(
                "unknown task `{other}` (pose-retrieval, image-retrieval, hpe)"
            ))),
        }
    }
}

fn test_split(dataset: &Dataset) -> Result<Vec<usize>> {
    let idx = dataset.split_indices(Split::Test);
    if idx.is_empty() {
        return Err(Error::invalid("the test split is empty"));
    }
    Ok(idx)
}

fn stage_for(query: Modality) -> Stage {
    match query {
        Modality::Image => Stage::Step2,
        _ => Stage::Step1,
    }
}

fn embed_split(models: &Models, dataset: &Dataset, m: Modality, idx: &[usize]) -> Result<Array2<f64>> {
    models.embed(m, dataset.inputs(m, idx)?.view())
}

fn poses3d(dataset: &Dataset, idx: &[usize]) -> Result<Vec<Vec<Vec3>>> {
    idx.iter().map(|&i| Ok(dataset.sample(i)?.pose3d.clone())).collect()
}

/// Nearest 3D pose for each test-split query of modality `query` (2D or
/// image), with the whole test split as gallery.
pub fn eval_pose_retrieval(models: &Models, dataset: &Dataset, query: Modality) -> Result<Vec<MetricReport>> {
    if query == Modality::Pose3D {
        return Err(Error::invalid("pose retrieval queries are 2D poses or images"));
    }
    models.require_stage(stage_for(query))?;
    let idx = test_split(dataset)?;
    let poses = poses3d(dataset, &idx)?;
    let ids: Vec<u64> = idx.iter().map(|&i| dataset.samples()[i].frame_id).collect();
    let gallery = Gallery::new(
        embed_split(models, dataset, Modality::Pose3D, &idx)?,
        Modality::Pose3D,
        ids,
        Some(poses.clone()),
    )?;
    let q = embed_split(models, dataset, query, &idx)?;
    let prefix = match query {
        Modality::Image => "image_to_3d_",
        _ => "2d_to_3d_",
    };
    pose_retrieval_metrics(q.view(), &poses, &gallery, prefix)
}

/// Own-frame image retrieval from 2D or 3D pose queries over the first
/// `gallery_size` test frames (all of them if `None`).
pub fn eval_image_retrieval(
    models: &Models,
    dataset: &Dataset,
    query: Modality,
    ks: &[usize],
    gallery_size: Option<usize>,
) -> Result<Vec<MetricReport>> {
    if query == Modality::Image {
        return Err(Error::invalid("image retrieval queries are 2D or 3D poses"));
    }
    models.require_stage(Stage::Step2)?;
    let mut idx = test_split(dataset)?;
    if let Some(n) = gallery_size {
        if n == 0 || n > idx.len() {
            return Err(Error::invalid(format!("gallery size {n} must be in 1..={}", idx.len())));
        }
        idx.truncate(n);
    }
    let ids: Vec<u64> = idx.iter().map(|&i| dataset.samples()[i].frame_id).collect();
    let gallery = Gallery::new(
        embed_split(models, dataset, Modality::Image, &idx)?,
        Modality::Image,
        ids.clone(),
        None,
    )?;
    let q = embed_split(models, dataset, query, &idx)?;
    let prefix = match query {
        Modality::Pose3D => "3d_to_image_",
        _ => "2d_to_image_",
    };
    image_retrieval_metrics(q.view(), &ids, &gallery, ks, prefix)
}

/// Decoded 3D poses for `source` inputs, root-relative, one per row of `idx`.
pub fn decode_3d(models: &Models, dataset: &Dataset, source: Modality, idx: &[usize]) -> Result<Vec<Vec<Vec3>>> {
    let emb = embed_split(models, dataset, source, idx)?;
    let flat = models.decode(emb.view(), source, PoseKind::ThreeD)?;
    Ok(flat
        .rows()
        .into_iter()
        .map(|r| root_relative(&unflatten3(&r.to_vec())))
        .collect())
}

/// Decode-from-embedding 3D pose estimation on the test split, for the 2D and
/// image branches. The baseline predicts the mean training pose.
pub fn eval_hpe(models: &Models, dataset: &Dataset) -> Result<Vec<MetricReport>> {
    models.require_stage(Stage::Finetune)?;
    let idx = test_split(dataset)?;
    let gt = poses3d(dataset, &idx)?;
    let train = dataset.split_indices(Split::Train);
    let mean_pose = if train.is_empty() {
        None
    } else {
        let mut acc = vec![0.0; 3 * dataset.joints()];
        for &i in &train {
            for (a, v) in acc.iter_mut().zip(flatten3(&dataset.samples()[i].pose3d)) {
                *a += v / train.len() as f64;
            }
        }
        Some(unflatten3(&acc))
    };
    let baseline = match &mean_pose {
        Some(mp) => {
            let mut s = 0.0;
            for g in &gt {
                s += mpjpe(mp, g)?;
            }
            Some(s / gt.len() as f64)
        }
        None => None,
    };
    let mut out = Vec::new();
    for (source, name) in [(Modality::Pose2D, "2d"), (Modality::Image, "image")] {
        let pred = decode_3d(models, dataset, source, &idx)?;
        let (mut m, mut pa) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(&gt) {
            m += mpjpe(p, g)?;
            pa += pa_mpjpe(p, g)?;
        }
        let n = gt.len();
        out.push(MetricReport::new(format!("hpe_{name}_mpjpe"), m / n as f64, "m", n, baseline));
        out.push(MetricReport::new(format!("hpe_{name}_pa_mpjpe"), pa / n as f64, "m", n, None));
    }
    Ok(out)
}

pub fn evaluate(models: &Models, dataset: &Dataset, task: EvalTask) -> Result<EvalReport> {
    let metrics = match task {
        EvalTask::PoseRetrieval => {
            let mut m = eval_pose_retrieval(models, dataset, Modality::Pose2D)?;
            m.extend(eval_pose_retrieval(models, dataset, Modality::Image)?);
            m
        }
        EvalTask::ImageRetrieval => {
            let mut m = eval_image_retrieval(models, dataset, Modality::Pose2D, &[1, 3], None)?;
            m.extend(eval_image_retrieval(models, dataset, Modality::Pose3D, &[1, 3], None)?);
            m
        }
        EvalTask::Hpe => eval_hpe(models, dataset)?,
    };
    Ok(EvalReport {
        task: task.to_string(),
        metrics,
    })
}

/// Mean positive cosine on `split` for the 2D-3D, image-2D and image-3D pairs.
pub fn alignment_cosines(models: &Models, dataset: &Dataset, split: Split) -> Result<[f64; 3]> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::invalid(format!("the {split:?} split is empty")));
    }
    let e = |m| embed_split(models, dataset, m, &idx);
    let (img, p2, p3) = (e(Modality::Image)?, e(Modality::Pose2D)?, e(Modality::Pose3D)?);
    Ok([
        mean_positive_cosine(p2.view(), p3.view()),
        mean_positive_cosine(img.view(), p2.view()),
        mean_positive_cosine(img.view(), p3.view()),
    ])
}

/// Average of [`alignment_cosines`].
pub fn tri_modal_cosine(models: &Models, dataset: &Dataset, split: Split) -> Result<f64> {
    Ok(alignment_cosines(models, dataset, split)?.iter().sum::<f64>() / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Interpolation {
    pub ts: Vec<f64>,
    /// Decoded root-relative poses, one per `t`.
    pub poses: Vec<Vec<Vec3>>,
    /// Mean joint displacement between consecutive poses.
    pub step_displacement: Vec<f64>,
    /// `max / mean` of the step displacements (`None` for a constant path).
    pub smoothness_ratio: Option<f64>,
    /// Largest mean absolute bone-length error along the path.
    pub max_bone_deviation: f64,
}

impl Interpolation {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "t", "joint", "x", "y", "z"])
            .map_err(|e| Error::invalid(e.to_string()))?;
        for (s, (t, pose)) in self.ts.iter().zip(&self.poses).enumerate() {
            for (j, p) in pose.iter().enumerate() {
                w.write_record([
                    s.to_string(),
                    t.to_string(),
                    j.to_string(),
                    p[0].to_string(),
                    p[1].to_string(),
                    p[2].to_string(),
                ])
                .map_err(|e| Error::invalid(e.to_string()))?;
            }
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

/// Decodes `decode(encode(pose))` with the 3D encoder and decoder.
pub fn reconstruct_3d(models: &Models, pose: &[Vec3]) -> Result<Vec<Vec3>> {
    let emb = embed_pose3d(models, pose)?;
    decode_embedding(models, &emb)
}

fn embed_pose3d(models: &Models, pose: &[Vec3]) -> Result<Embedding> {
    if pose.len() != models.joints() {
        return Err(Error::invalid(format!(
            "pose has {} joints, models expect {}",
            pose.len(),
            models.joints()
        )));
    }
    let x = Array2::from_shape_vec((1, 3 * pose.len()), flatten3(pose)).expect("shape");
    let e = models.embed(Modality::Pose3D, x.view())?;
    Embedding::from_unit(e.row(0).to_vec(), Modality::Pose3D)
}

fn decode_embedding(models: &Models, emb: &Embedding) -> Result<Vec<Vec3>> {
    let x = Array2::from_shape_vec((1, emb.dim()), emb.values().to_vec()).expect("shape");
    let out = models.decode(x.view(), Modality::Pose3D, PoseKind::ThreeD)?;
    Ok(root_relative(&unflatten3(&out.row(0).to_vec())))
}

/// Spherical interpolation between the embeddings of two 3D poses at `steps`
/// uniform `t` values in [0, 1], each decoded back to a 3D pose.
pub fn eval_interpolation(
    models: &Models,
    skeleton: &Skeleton,
    pose_a: &[Vec3],
    pose_b: &[Vec3],
    steps: usize,
) -> Result<Interpolation> {
    models.require_stage(Stage::Finetune)?;
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least 2 steps"));
    }
    if skeleton.len() != models.joints() {
        return Err(Error::invalid("skeleton does not match the models"));
    }
    let ea = embed_pose3d(models, pose_a)?;
    let eb = embed_pose3d(models, pose_b)?;
    let ts: Vec<f64> = (0..steps).map(|s| s as f64 / (steps - 1) as f64).collect();
    let poses = ts
        .iter()
        .map(|&t| decode_embedding(models, &interpolate(&ea, &eb, t)?))
        .collect::<Result<Vec<_>>>()?;
    let step_displacement = poses
        .windows(2)
        .map(|w| mpjpe(&w[1], &w[0]))
        .collect::<Result<Vec<_>>>()?;
    let mean = step_displacement.iter().sum::<f64>() / step_displacement.len() as f64;
    let max = step_displacement.iter().copied().fold(0.0, f64::max);
    let smoothness_ratio = (mean > 0.0).then(|| max / mean);
    let bones = skeleton.bones();
    let max_bone_deviation = poses
        .iter()
        .map(|p| {
            bones
                .iter()
                .map(|&(c, par, len)| (norm3(&sub3(&p[c], &p[par])) - len).abs())
                .sum::<f64>()
                / bones.len().max(1) as f64
        })
        .fold(0.0, f64::max);
    Ok(Interpolation {
        ts,
        poses,
        step_displacement,
        smoothness_ratio,
        max_bone_deviation,
    })
}
