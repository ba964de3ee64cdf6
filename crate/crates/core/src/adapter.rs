//! The adapter f: R^d0 -> R^d and reverter g: R^d -> R^d0, both plain linear
//! maps without bias. Adapted features are re-normalized after the map and
//! gradients flow through the normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::FeatureSet;
use crate::math;

pub const CVAD_MAGIC: [u8; 4] = *b"CVAD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default standard deviation of the identity-preserving init noise.
pub const INIT_NOISE_STD: f64 = 0.01;

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterArch {
    /// z = normalize(W x)
    Plain,
    /// z = normalize(x + W x); requires d = d0
    Residual,
}

/// Learnable adapter weights: a d x d0 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    arch: AdapterArch,
    w: Array2<f64>,
}

impl AdapterParams {
    pub fn new(arch: AdapterArch, w: Array2<f64>) -> Result<Self> {
        if arch == AdapterArch::Residual && w.nrows() != w.ncols() {
            return Err(Error::ResidualDimMismatch {
                d0: w.ncols(),
                d: w.nrows(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature);
        }
        Ok(Self { arch, w })
    }

    pub fn arch(&self) -> AdapterArch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }
}

/// Learnable reverter weights: a d0 x d matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverterParams {
    v: Array2<f64>,
}

impl ReverterParams {
    pub fn new(v: Array2<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteFeature);
        }
        Ok(Self { v })
    }

    pub fn input_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.v
    }
}

fn identity_padded(rows: usize, cols: usize, noise: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows.min(cols) {
        m[[i, i]] = 1.0;
    }
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("valid std");
        for v in m.iter_mut() {
            *v += dist.sample(rng);
        }
    }
    m
}

/// Identity-preserving initialization: W is the identity padded with zeros
/// plus N(0, noise^2), V likewise with fresh noise. Deterministic given seed.
pub fn init_params_with_noise(
    d0: usize,
    d: usize,
    arch: AdapterArch,
    seed: u64,
    noise: f64,
) -> Result<(AdapterParams, ReverterParams)> {
    if d0 == 0 || d == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    if arch == AdapterArch::Residual && d != d0 {
        return Err(Error::ResidualDimMismatch { d0, d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = identity_padded(d, d0, noise, &mut rng);
    let v = identity_padded(d0, d, noise, &mut rng);
    Ok((AdapterParams::new(arch, w)?, ReverterParams::new(v)?))
}

pub fn init_params(
    d0: usize,
    d: usize,
    arch: AdapterArch,
    seed: u64,
) -> Result<(AdapterParams, ReverterParams)> {
    init_params_with_noise(d0, d, arch, seed, INIT_NOISE_STD)
}

/// Forward pass retained for backpropagation: the normalized rows and the
/// pre-normalization row norms.
#[derive(Debug, Clone)]
pub struct AdaptForward {
    pub z: Array2<f64>,
    pub norms: Vec<f64>,
}

/// Adapt a feature matrix: per row, y = W x (plus x for residual), then
/// z = y / |y|.
pub fn adapt_forward(params: &AdapterParams, x: &Array2<f64>) -> Result<AdaptForward> {
    if x.ncols() != params.input_dim() {
        return Err(Error::AdapterDimMismatch {
            expected: params.input_dim(),
            actual: x.ncols(),
        });
    }
    let mut y = x.dot(&params.w.t());
    if params.arch == AdapterArch::Residual {
        y += x;
    }
    let mut norms = vec![0.0f64; y.nrows()];
    {
        let norm_results = {
            let y_ref = &y;
            math::map_indexed(y.nrows(), move |i| {
                math::l2_norm(y_ref.row(i).to_slice().expect("contiguous row"))
            })
        };
        norms.copy_from_slice(&norm_results);
    }
    for (i, &n) in norms.iter().enumerate() {
        if !n.is_finite() || n <= DEGENERATE_NORM {
            return Err(Error::DegenerateAdaptedVector(i));
        }
    }
    {
        let norms_ref = &norms;
        math::for_each_row(&mut y, |i, row| {
            let inv = 1.0 / norms_ref[i];
            for v in row.iter_mut() {
                *v *= inv;
            }
        });
    }
    Ok(AdaptForward { z: y, norms })
}

/// Gradient of a scalar loss w.r.t. W given the gradient w.r.t. the
/// normalized output rows. The residual path adds no W-dependence beyond
/// the linear term, so the same projection applies to both architectures.
pub fn adapt_backward(
    params: &AdapterParams,
    x: &Array2<f64>,
    fwd: &AdaptForward,
    grad_z: &Array2<f64>,
) -> Array2<f64> {
    debug_assert_eq!(grad_z.dim(), fwd.z.dim());
    debug_assert_eq!(x.nrows(), fwd.z.nrows());
    debug_assert_eq!(x.ncols(), params.input_dim());
    // dy_i = (g_i - (g_i . z_i) z_i) / |y_i|
    let mut dy = Array2::zeros(fwd.z.dim());
    {
        let z = &fwd.z;
        let norms = &fwd.norms;
        math::for_each_row(&mut dy, |i, row| {
            let zi = z.row(i);
            let zi = zi.to_slice().expect("contiguous row");
            let gi = grad_z.row(i);
            let gi = gi.to_slice().expect("contiguous row");
            let gz = math::dot(gi, zi);
            let inv = 1.0 / norms[i];
            for (o, (&g, &zv)) in row.iter_mut().zip(gi.iter().zip(zi)) {
                *o = (g - gz * zv) * inv;
            }
        });
    }
    dy.t().dot(x)
}

/// Adapt a whole feature set, producing a normalized set with the same ids.
pub fn adapt(params: &AdapterParams, set: &FeatureSet) -> Result<FeatureSet> {
    if set.dim() != params.input_dim() {
        return Err(Error::AdapterDimMismatch {
            expected: params.input_dim(),
            actual: set.dim(),
        });
    }
    if !set.is_normalized() {
        return Err(Error::invalid("adapter input must be a normalized set"));
    }
    let fwd = adapt_forward(params, &set.to_matrix())?;
    let d = params.output_dim();
    FeatureSet::from_records(
        set.view_tag(),
        d,
        true,
        set.ids().iter().enumerate().map(|(i, id)| {
            let row = fwd.z.row(i);
            let row = row.to_slice().expect("contiguous row");
            (id.clone(), row.iter().map(|&v| v as f32).collect::<Vec<f32>>())
        }),
    )
}

/// Reconstruct initial-space features: x_hat = V z. Output is not normalized.
pub fn revert_forward(rev: &ReverterParams, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != rev.input_dim() {
        return Err(Error::ReverterDimMismatch {
            expected: rev.input_dim(),
            actual: z.ncols(),
        });
    }
    Ok(z.dot(&rev.v.t()))
}

pub fn revert(rev: &ReverterParams, set: &FeatureSet) -> Result<FeatureSet> {
    if set.dim() != rev.input_dim() {
        return Err(Error::ReverterDimMismatch {
            expected: rev.input_dim(),
            actual: set.dim(),
        });
    }
    let xhat = revert_forward(rev, &set.to_matrix())?;
    FeatureSet::from_records(
        set.view_tag(),
        rev.output_dim(),
        false,
        set.ids().iter().enumerate().map(|(i, id)| {
            let row = xhat.row(i);
            let row = row.to_slice().expect("contiguous row");
            (id.clone(), row.iter().map(|&v| v as f32).collect::<Vec<f32>>())
        }),
    )
}

// ---------------------------------------------------------------------------
// CVAD v1: adapter checkpoint (inference weights, f32)
// ---------------------------------------------------------------------------

fn arch_to_u32(a: AdapterArch) -> u32 {
    match a {
        AdapterArch::Plain => 0,
        AdapterArch::Residual => 1,
    }
}

fn arch_from_u32(v: u32) -> Result<AdapterArch> {
    match v {
        0 => Ok(AdapterArch::Plain),
        1 => Ok(AdapterArch::Residual),
        _ => Err(Error::CorruptCheckpoint),
    }
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &AdapterParams,
    rev: &ReverterParams,
    iteration: u64,
) -> Result<()> {
    w.write_all(&CVAD_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(arch_to_u32(params.arch))?;
    w.write_u32::<LittleEndian>(params.input_dim() as u32)?;
    w.write_u32::<LittleEndian>(params.output_dim() as u32)?;
    for &v in params.w.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    for &v in rev.v.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.write_u64::<LittleEndian>(iteration)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(AdapterParams, ReverterParams, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ck_truncated)?;
    if magic != CVAD_MAGIC {
        return Err(Error::UnrecognizedFormat);
    }
    let version = r.read_u32::<LittleEndian>().map_err(ck_truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let arch = arch_from_u32(r.read_u32::<LittleEndian>().map_err(ck_truncated)?)?;
    let d0 = r.read_u32::<LittleEndian>().map_err(ck_truncated)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(ck_truncated)? as usize;
    if d0 == 0 || d == 0 {
        return Err(Error::CorruptCheckpoint);
    }
    let mut wbuf = vec![0f32; d * d0];
    r.read_f32_into::<LittleEndian>(&mut wbuf).map_err(ck_truncated)?;
    let mut vbuf = vec![0f32; d0 * d];
    r.read_f32_into::<LittleEndian>(&mut vbuf).map_err(ck_truncated)?;
    let iteration = r.read_u64::<LittleEndian>().map_err(ck_truncated)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CorruptCheckpoint);
    }
    let w = Array2::from_shape_vec((d, d0), wbuf.into_iter().map(f64::from).collect())
        .map_err(|_| Error::CorruptCheckpoint)?;
    let v = Array2::from_shape_vec((d0, d), vbuf.into_iter().map(f64::from).collect())
        .map_err(|_| Error::CorruptCheckpoint)?;
    Ok((AdapterParams::new(arch, w)?, ReverterParams::new(v)?, iteration))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &AdapterParams,
    rev: &ReverterParams,
    iteration: u64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params, rev, iteration)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AdapterParams, ReverterParams, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn ck_truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::CorruptCheckpoint
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featstore::ViewTag;
    use ndarray::array;
    use rand::Rng;

    fn unit_set(vectors: Vec<Vec<f32>>) -> FeatureSet {
        let dim = vectors[0].len();
        FeatureSet::from_records(
            ViewTag::Query,
            dim,
            true,
            vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("q{i}"), v)),
        )
        .unwrap()
    }

    #[test]
    fn identity_adapter_is_identity_on_unit_vectors() {
        let (params, _) = init_params_with_noise(3, 3, AdapterArch::Plain, 1, 0.0).unwrap();
        assert_eq!(params.weights(), &Array2::<f64>::eye(3));
        let set = unit_set(vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = adapt(&params, &set).unwrap();
        for i in 0..set.len() {
            for (a, b) in out.vector(i).iter().zip(set.vector(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scaling_w_does_not_change_output() {
        let (mut params, _) = init_params_with_noise(4, 4, AdapterArch::Plain, 9, 0.01).unwrap();
        let set = unit_set(vec![vec![0.5, 0.5, 0.5, 0.5], vec![1.0, 0.0, 0.0, 0.0]]);
        let base = adapt(&params, &set).unwrap();
        *params.weights_mut() *= 2.0;
        let scaled = adapt(&params, &set).unwrap();
        for i in 0..set.len() {
            for (a, b) in base.vector(i).iter().zip(scaled.vector(i)) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn adapt_matches_direct_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let params = AdapterParams::new(AdapterArch::Plain, w.clone()).unwrap();
        let x_raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = crate::featstore::l2_normalize(&x_raw).unwrap();
        let xm = Array2::from_shape_vec((1, 6), x.clone()).unwrap();
        let fwd = adapt_forward(&params, &xm).unwrap();
        // direct oracle in f64
        let mut y = vec![0.0f64; 4];
        for (r, yr) in y.iter_mut().enumerate() {
            for c in 0..6 {
                *yr += w[[r, c]] * x[c];
            }
        }
        let norm = (y.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for (c, &expect) in y.iter().enumerate() {
            assert!((fwd.z[[0, c]] - expect / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_requires_square() {
        assert!(matches!(
            init_params(4, 2, AdapterArch::Residual, 0),
            Err(Error::ResidualDimMismatch { .. })
        ));
        let (params, _) = init_params_with_noise(3, 3, AdapterArch::Residual, 0, 0.0).unwrap();
        // with W = I, residual gives normalize(2x) = x
        let set = unit_set(vec![vec![0.0, 1.0, 0.0]]);
        let out = adapt(&params, &set).unwrap();
        for (a, b) in out.vector(0).iter().zip(set.vector(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dim_mismatch_errors() {
        let (params, rev) = init_params(4, 2, AdapterArch::Plain, 0).unwrap();
        let set = unit_set(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            adapt(&params, &set),
            Err(Error::AdapterDimMismatch { .. })
        ));
        assert!(matches!(
            revert(&rev, &set),
            Err(Error::ReverterDimMismatch { .. })
        ));
    }

    #[test]
    fn revert_identity_and_zero() {
        let rev = ReverterParams::new(Array2::eye(3)).unwrap();
        let z = array![[0.1, -0.5, 2.0]];
        let out = revert_forward(&rev, &z).unwrap();
        assert_eq!(out, z);
        let rev0 = ReverterParams::new(Array2::zeros((3, 3))).unwrap();
        let out = revert_forward(&rev0, &z).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((1, 3)));
    }

    #[test]
    fn revert_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let rev = ReverterParams::new(v.clone()).unwrap();
        let z = Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0));
        let out = revert_forward(&rev, &z).unwrap();
        for r in 0..6 {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += v[[r, c]] * z[[0, c]];
            }
            assert!((out[[0, r]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_identity_dominant() {
        let (p1, r1) = init_params(4, 2, AdapterArch::Plain, 42).unwrap();
        let (p2, r2) = init_params(4, 2, AdapterArch::Plain, 42).unwrap();
        assert_eq!(p1.weights(), p2.weights());
        assert_eq!(r1.weights(), r2.weights());
        let (p3, _) = init_params(4, 2, AdapterArch::Plain, 43).unwrap();
        assert_ne!(p1.weights(), p3.weights());
        // 2x4: diagonal near 1, off-diagonal near 0
        for i in 0..2 {
            for j in 0..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((p1.weights()[[i, j]] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let (params, rev) = init_params(6, 4, AdapterArch::Plain, 5).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params, &rev, 17).unwrap();
        let (p2, r2, it) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(it, 17);
        assert_eq!(p2.input_dim(), 6);
        assert_eq!(p2.output_dim(), 4);
        // f32 storage: compare after the same rounding
        for (a, b) in params.weights().iter().zip(p2.weights().iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        for (a, b) in rev.weights().iter().zip(r2.weights().iter()) {
            assert_eq!(*a as f32, *b as f32);
        }

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(Error::CheckpointVersionMismatch { found: 9, .. })
        ));
        let short = &bytes[..bytes.len() - 2];
        assert!(matches!(
            read_checkpoint(&mut &short[..]),
            Err(Error::CorruptCheckpoint)
        ));
    }

    #[test]
    fn unnormalized_input_rejected() {
        let (params, _) = init_params(3, 3, AdapterArch::Plain, 0).unwrap();
        let set = FeatureSet::from_records(
            ViewTag::Query,
            3,
            false,
            vec![("a".to_string(), vec![3.0f32, 4.0, 0.0])],
        )
        .unwrap();
        assert!(adapt(&params, &set).is_err());
    }
}
