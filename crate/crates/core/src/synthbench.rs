//! Seeded generator of paired cross-view feature distributions with known
//! ground truth. Scenes are latent unit vectors; references observe them
//! directly, queries observe them through a view transform plus a shared
//! style offset and isotropic noise. Because the view transform is
//! invertible and linear, a linear adapter solution always exists.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{l2_normalize, FeatureSet, ViewTag};
use crate::math;
use crate::retrieval::GroundTruth;

/// The query-side view transform.
///
/// `Rotation` rotates `rotated_planes` random orthogonal 2D planes by
/// `angle` radians and leaves the remaining planes untouched, so part of the
/// latent signal survives the view change; `angle = pi` on all planes would
/// destroy it entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewGap {
    None,
    Rotation { rotated_planes: usize, angle: f64 },
    GeneralLinear { kappa_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scenes: usize,
    /// Training queries per scene.
    pub queries_per_scene: usize,
    /// Held-out queries per scene (0 disables the eval split).
    #[serde(default)]
    pub eval_queries_per_scene: usize,
    pub d0: usize,
    pub noise_sigma: f64,
    pub view_gap: ViewGap,
    pub style_offset: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 || self.queries_per_scene == 0 {
            return Err(Error::invalid("need at least one scene and one query per scene"));
        }
        if self.d0 < 2 {
            return Err(Error::invalid("latent dimension must be at least 2"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be finite and nonnegative"));
        }
        if !self.style_offset.is_finite() {
            return Err(Error::invalid("style offset must be finite"));
        }
        match self.view_gap {
            ViewGap::Rotation { rotated_planes, angle } => {
                if rotated_planes > self.d0 / 2 {
                    return Err(Error::invalid(format!(
                        "rotated_planes {} exceeds available planes {}",
                        rotated_planes,
                        self.d0 / 2
                    )));
                }
                if !angle.is_finite() {
                    return Err(Error::invalid("rotation angle must be finite"));
                }
            }
            ViewGap::GeneralLinear { kappa_max } => {
                if !(kappa_max >= 1.0) {
                    return Err(Error::invalid("kappa_max must be at least 1"));
                }
            }
            ViewGap::None => {}
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The benchmark preset used by the acceptance suite: 500 scenes, 64-dim
/// latents, a rotation gap that wipes 9 of 32 planes, sigma 0.05, style
/// offset 0.3, with a 4-query train and 2-query eval split per scene.
pub fn g1() -> SynthConfig {
    SynthConfig {
        num_scenes: 500,
        queries_per_scene: 4,
        eval_queries_per_scene: 2,
        d0: 64,
        noise_sigma: 0.05,
        view_gap: ViewGap::Rotation {
            rotated_planes: 9,
            angle: std::f64::consts::PI,
        },
        style_offset: 0.3,
        seed: G1_SEED,
    }
}

/// Generation seed of the G1 preset, fixed so the benchmark instance (and
/// its baseline metrics) is reproducible byte-for-byte.
pub const G1_SEED: u64 = 17;

#[derive(Debug)]
pub struct SynthData {
    pub queries: FeatureSet,
    pub references: FeatureSet,
    pub gt: GroundTruth,
    pub gt_pairs: Vec<(String, String)>,
    pub eval_queries: Option<FeatureSet>,
    pub eval_gt: Option<GroundTruth>,
    pub eval_gt_pairs: Vec<(String, String)>,
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormalize the columns of a Gaussian matrix (two-pass modified
/// Gram-Schmidt; d is small here, stability is ample).
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let raw: Vec<Vec<f64>> = (0..d).map(|_| standard_normal_vec(rng, d)).collect();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for mut col in raw {
        for _ in 0..2 {
            for q in &cols {
                let proj = math::dot(&col, q);
                for (c, qv) in col.iter_mut().zip(q) {
                    *c -= proj * qv;
                }
            }
        }
        let norm = math::l2_norm(&col);
        assert!(norm > 1e-10, "gaussian matrix numerically singular");
        for c in col.iter_mut() {
            *c /= norm;
        }
        cols.push(col);
    }
    let mut m = Array2::zeros((d, d));
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Build the query-side transform for a config, consuming draws from `rng`
/// in a fixed order.
fn build_view_matrix(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    match cfg.view_gap {
        ViewGap::None => Array2::eye(cfg.d0),
        ViewGap::Rotation { rotated_planes, angle } => {
            let q = random_orthonormal(rng, cfg.d0);
            let mut block = Array2::eye(cfg.d0);
            let (c, s) = (angle.cos(), angle.sin());
            for k in 0..rotated_planes {
                let (i, j) = (2 * k, 2 * k + 1);
                block[[i, i]] = c;
                block[[j, j]] = c;
                block[[i, j]] = -s;
                block[[j, i]] = s;
            }
            q.dot(&block).dot(&q.t())
        }
        ViewGap::GeneralLinear { kappa_max } => {
            let q1 = random_orthonormal(rng, cfg.d0);
            let q2 = random_orthonormal(rng, cfg.d0);
            let mut diag = Array2::zeros((cfg.d0, cfg.d0));
            for i in 0..cfg.d0 {
                diag[[i, i]] = rng.gen_range(1.0..=kappa_max);
            }
            q1.dot(&diag).dot(&q2.t())
        }
    }
}

/// Recompute the query-side transform of a config (same draws as
/// [`generate`] consumes), for oracle checks like applying the inverse
/// rotation.
pub fn query_view_matrix(cfg: &SynthConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let _latents = draw_latents(cfg, &mut rng);
    Ok(build_view_matrix(cfg, &mut rng))
}

fn draw_latents(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut latents = Array2::zeros((cfg.num_scenes, cfg.d0));
    for s in 0..cfg.num_scenes {
        let raw = standard_normal_vec(rng, cfg.d0);
        let unit = l2_normalize(&raw).expect("gaussian vector is nonzero");
        for (j, &v) in unit.iter().enumerate() {
            latents[[s, j]] = v;
        }
    }
    latents
}

fn emit_queries(
    cfg: &SynthConfig,
    latents: &Array2<f64>,
    view: &Array2<f64>,
    offset: &[f64],
    per_scene: usize,
    id_fmt: impl Fn(usize, usize) -> String,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureSet, GroundTruth, Vec<(String, String)>)> {
    let mut records = Vec::with_capacity(cfg.num_scenes * per_scene);
    let mut gt_rows = Vec::with_capacity(cfg.num_scenes * per_scene);
    let mut pairs = Vec::with_capacity(cfg.num_scenes * per_scene);
    for s in 0..cfg.num_scenes {
        let latent = latents.row(s);
        let latent = latent.to_slice().expect("contiguous row");
        let mut projected = vec![0.0f64; cfg.d0];
        for (i, p) in projected.iter_mut().enumerate() {
            *p = math::dot(view.row(i).to_slice().expect("contiguous row"), latent);
        }
        for k in 0..per_scene {
            let noise = standard_normal_vec(rng, cfg.d0);
            let raw: Vec<f64> = projected
                .iter()
                .zip(offset)
                .zip(&noise)
                .map(|((&p, &b), &e)| p + b + cfg.noise_sigma * e)
                .collect();
            let unit = l2_normalize(&raw)?;
            let id = id_fmt(s, k);
            pairs.push((id.clone(), ref_id(s)));
            records.push((id, unit.iter().map(|&v| v as f32).collect::<Vec<f32>>()));
            gt_rows.push(vec![s as u32]);
        }
    }
    let set = FeatureSet::from_records(ViewTag::Query, cfg.d0, true, records)?;
    let gt = GroundTruth::new(gt_rows, cfg.num_scenes)?;
    Ok((set, gt, pairs))
}

fn ref_id(scene: usize) -> String {
    format!("scene{scene:05}")
}

/// Deterministically generate the full benchmark instance. Draw order is
/// fixed (latents, view transform, style direction, reference noise, train
/// query noise, eval query noise) so the train split does not depend on
/// whether an eval split is requested.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents = draw_latents(cfg, &mut rng);
    let view = build_view_matrix(cfg, &mut rng);
    let offset_dir = standard_normal_vec(&mut rng, cfg.d0);
    let offset: Vec<f64> = if cfg.style_offset == 0.0 {
        vec![0.0; cfg.d0]
    } else {
        l2_normalize(&offset_dir)?
            .into_iter()
            .map(|v| v * cfg.style_offset)
            .collect()
    };

    // references: identity view, no style offset
    let mut ref_records = Vec::with_capacity(cfg.num_scenes);
    for s in 0..cfg.num_scenes {
        let noise = standard_normal_vec(&mut rng, cfg.d0);
        let raw: Vec<f64> = latents
            .row(s)
            .iter()
            .zip(&noise)
            .map(|(&l, &e)| l + cfg.noise_sigma * e)
            .collect();
        let unit = l2_normalize(&raw)?;
        ref_records.push((
            ref_id(s),
            unit.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
        ));
    }
    let references = FeatureSet::from_records(ViewTag::Reference, cfg.d0, true, ref_records)?;

    let (queries, gt, gt_pairs) = emit_queries(
        cfg,
        &latents,
        &view,
        &offset,
        cfg.queries_per_scene,
        |s, k| format!("{}_q{k:02}", ref_id(s)),
        &mut rng,
    )?;

    let (eval_queries, eval_gt, eval_gt_pairs) = if cfg.eval_queries_per_scene > 0 {
        let (set, gt, pairs) = emit_queries(
            cfg,
            &latents,
            &view,
            &offset,
            cfg.eval_queries_per_scene,
            |s, k| format!("{}_e{k:02}", ref_id(s)),
            &mut rng,
        )?;
        (Some(set), Some(gt), pairs)
    } else {
        (None, None, Vec::new())
    };

    Ok(SynthData {
        queries,
        references,
        gt,
        gt_pairs,
        eval_queries,
        eval_gt,
        eval_gt_pairs,
    })
}

/// Write the ground-truth map as CSV `query_id,ref_id`.
pub fn write_gt_csv<W: std::io::Write>(pairs: &[(String, String)], w: &mut W) -> Result<()> {
    writeln!(w, "query_id,ref_id")?;
    for (q, r) in pairs {
        writeln!(w, "{q},{r}")?;
    }
    Ok(())
}

pub fn read_gt_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<(String, String)>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "query_id" || &headers[1] != "ref_id" {
        return Err(Error::invalid("ground truth csv must have header query_id,ref_id"));
    }
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record?;
        pairs.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(pairs)
}
