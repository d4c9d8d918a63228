//! The patch-based baseline: the video is cut into overlapping
//! `px x py x pt` blocks, each block is coded independently against a learned
//! overcomplete dictionary and the block estimates are averaged back.

mod ksvd;
mod lasso;
mod select;

pub use ksvd::{train_ksvd, KsvdResult};
pub use lasso::{lasso_kkt_violation, lasso_solve};
pub use select::{block_variance, select_training_blocks, BlockSelectionConfig, SelectionStrategy};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::shutter::{CodedImage, ShutterFunction};
use crate::tensor_io::{Tensor, TensorData};
use crate::volume::{norm_sq, FrameSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub px: usize,
    pub py: usize,
    pub pt: usize,
    /// Spatial step between reconstructed blocks.
    pub stride: usize,
    /// Dictionary size `q`.
    pub atoms: usize,
    /// Nonzeros per block in the K-SVD coding step.
    pub train_sparsity: usize,
    pub ksvd_iters: usize,
    pub lambda: f64,
    /// Subtract each training block's mean before K-SVD.
    pub remove_mean: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            px: 7,
            py: 7,
            pt: 20,
            stride: 2,
            atoms: 2 * 7 * 7 * 20,
            train_sparsity: 10,
            ksvd_iters: 30,
            lambda: 0.1,
            remove_mean: false,
        }
    }
}

impl PatchConfig {
    /// Length `m_b` of a vectorized block.
    pub fn block_len(&self) -> usize {
        self.px * self.py * self.pt
    }

    pub fn validate(&self) -> Result<()> {
        if self.px == 0 || self.py == 0 || self.pt == 0 {
            return Err(Error::param("patch dimensions must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::param("stride must be at least 1"));
        }
        if self.atoms < self.block_len() {
            return Err(Error::param(format!(
                "dictionary with {} atoms is not overcomplete for blocks of length {}",
                self.atoms,
                self.block_len()
            )));
        }
        if self.train_sparsity == 0 || self.ksvd_iters == 0 {
            return Err(Error::param("K-SVD sparsity and iterations must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("lasso penalty must be nonnegative"));
        }
        Ok(())
    }
}

/// Overcomplete dictionary with unit-norm atoms, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDictionary {
    pub atom_len: usize,
    pub atoms: usize,
    pub data: Vec<f64>,
}

pub const ATOM_NORM_TOL: f64 = 1e-9;

impl PatchDictionary {
    pub fn new(atom_len: usize, atoms: usize, data: Vec<f64>) -> Result<Self> {
        if atom_len == 0 || atoms == 0 || data.len() != atom_len * atoms {
            return Err(Error::param(format!(
                "dictionary data of length {} does not hold {} atoms of length {}",
                data.len(),
                atoms,
                atom_len
            )));
        }
        let dict = PatchDictionary {
            atom_len,
            atoms,
            data,
        };
        for j in 0..atoms {
            let n = norm_sq(dict.atom(j)).sqrt();
            if (n - 1.0).abs() > ATOM_NORM_TOL {
                return Err(Error::param(format!("atom {j} has norm {n}, expected 1")));
            }
        }
        Ok(dict)
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.data[j * self.atom_len..(j + 1) * self.atom_len]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.atom_len, self.atoms, &self.data)
    }

    /// `sum_j alpha_j psi_j`.
    pub fn synthesize(&self, code: &BlockSparseCode) -> Vec<f64> {
        let mut out = vec![0.0; self.atom_len];
        for (j, &a) in code.coeffs.iter().enumerate() {
            if a != 0.0 {
                for (o, d) in out.iter_mut().zip(self.atom(j)) {
                    *o += a * d;
                }
            }
        }
        out
    }

    /// Stored as a `(q, m_b)` f64 tensor, one atom per row.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.atoms, self.atom_len],
            data: TensorData::F64(self.data.clone()),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[q, m] => PatchDictionary::new(m, q, t.to_f64()),
            other => Err(Error::param(format!(
                "patch dictionary must be a (q, m_b) tensor, got dims {other:?}"
            ))),
        }
    }
}

/// Coefficients of one block over the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseCode {
    pub coeffs: Vec<f64>,
}

impl BlockSparseCode {
    pub fn support(&self) -> usize {
        self.coeffs.iter().filter(|&&a| a != 0.0).count()
    }
}

/// Vectorized blocks, `len` values each, sample `(x, y, t)` of a block at
/// `(t * py + y) * px + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    pub len: usize,
    pub data: Vec<f64>,
    /// Corner `(x, y, t)` of each block in the source video.
    pub positions: Vec<(usize, usize, usize)>,
}

impl BlockSet {
    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn subset(&self, indices: &[usize]) -> BlockSet {
        let mut data = Vec::with_capacity(indices.len() * self.len);
        for &i in indices {
            data.extend_from_slice(self.block(i));
        }
        BlockSet {
            len: self.len,
            data,
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    /// Concatenates block sets of equal block length.
    pub fn concat(sets: Vec<BlockSet>) -> Result<BlockSet> {
        let len = sets.first().map(|s| s.len).unwrap_or(0);
        let mut out = BlockSet {
            len,
            data: Vec::new(),
            positions: Vec::new(),
        };
        for s in sets {
            if s.len != len {
                return Err(Error::param("cannot concatenate blocks of different lengths"));
            }
            out.data.extend(s.data);
            out.positions.extend(s.positions);
        }
        Ok(out)
    }
}

/// Block corners along one axis: every `stride`, plus a final corner flush
/// with the far edge so that every sample is covered.
pub fn axis_positions(n: usize, p: usize, stride: usize) -> Vec<usize> {
    if n < p {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..=n - p).step_by(stride).collect();
    if *out.last().expect("n >= p") != n - p {
        out.push(n - p);
    }
    out
}

fn block_grid(seq_dims: (usize, usize, usize), cfg: &PatchConfig, stride: usize) -> Vec<(usize, usize, usize)> {
    let (w, h, t) = seq_dims;
    let xs = axis_positions(w, cfg.px, stride);
    let ys = axis_positions(h, cfg.py, stride);
    // time is tiled without overlap
    let ts = axis_positions(t, cfg.pt, cfg.pt);
    let mut out = Vec::with_capacity(xs.len() * ys.len() * ts.len());
    for &t0 in &ts {
        for &y0 in &ys {
            for &x0 in &xs {
                out.push((x0, y0, t0));
            }
        }
    }
    out
}

/// Cuts `seq` into blocks at spatial step `stride`, corners ordered with `x`
/// fastest, then `y`, then `t`.
pub fn extract_blocks(seq: &FrameSequence, cfg: &PatchConfig, stride: usize) -> Result<BlockSet> {
    if stride == 0 {
        return Err(Error::param("stride must be at least 1"));
    }
    if seq.width < cfg.px || seq.height < cfg.py || seq.frames < cfg.pt {
        return Err(Error::param(format!(
            "{}x{}x{} video is smaller than one {}x{}x{} block",
            seq.width, seq.height, seq.frames, cfg.px, cfg.py, cfg.pt
        )));
    }
    let positions = block_grid((seq.width, seq.height, seq.frames), cfg, stride);
    let len = cfg.block_len();
    let mut data = Vec::with_capacity(positions.len() * len);
    for &(x0, y0, t0) in &positions {
        for t in 0..cfg.pt {
            for y in 0..cfg.py {
                let start = seq.index(x0, y0 + y, t0 + t);
                data.extend_from_slice(&seq.data[start..start + cfg.px]);
            }
        }
    }
    Ok(BlockSet {
        len,
        data,
        positions,
    })
}

/// Averages block estimates into a `width x height x frames` volume; every
/// voxel gets the mean of the blocks covering it (zero if none does).
pub fn merge_blocks(
    blocks: &BlockSet,
    cfg: &PatchConfig,
    width: usize,
    height: usize,
    frames: usize,
) -> Result<FrameSequence> {
    if blocks.len != cfg.block_len() {
        return Err(Error::param("block length does not match the patch size"));
    }
    let mut sum = FrameSequence::zeros(width, height, frames);
    let mut weight = vec![0u32; sum.data.len()];
    for (i, &(x0, y0, t0)) in blocks.positions.iter().enumerate() {
        if x0 + cfg.px > width || y0 + cfg.py > height || t0 + cfg.pt > frames {
            return Err(Error::param(format!("block at ({x0}, {y0}, {t0}) falls outside the volume")));
        }
        let b = blocks.block(i);
        for t in 0..cfg.pt {
            for y in 0..cfg.py {
                let start = sum.index(x0, y0 + y, t0 + t);
                let row = &b[(t * cfg.py + y) * cfg.px..][..cfg.px];
                for (k, v) in row.iter().enumerate() {
                    sum.data[start + k] += v;
                    weight[start + k] += 1;
                }
            }
        }
    }
    for (v, &w) in sum.data.iter_mut().zip(&weight) {
        if w > 0 {
            *v /= w as f64;
        }
    }
    Ok(sum)
}

/// Effective dictionary `Phi_blk Psi` of the block with corner `(x0, y0)`:
/// row `y * px + x` sums the atom entries over that pixel's open frames.
fn block_operator(
    dict: &PatchDictionary,
    shutter: &ShutterFunction,
    cfg: &PatchConfig,
    x0: usize,
    y0: usize,
) -> DMatrix<f64> {
    let rows = cfg.px * cfg.py;
    let plane = rows;
    let starts: Vec<usize> = (0..rows)
        .map(|p| shutter.start((y0 + p / cfg.px) * shutter.width + x0 + p % cfg.px))
        .collect();
    let mut a = DMatrix::zeros(rows, dict.atoms);
    for j in 0..dict.atoms {
        let atom = dict.atom(j);
        let mut col = a.column_mut(j);
        for (p, &s) in starts.iter().enumerate() {
            col[p] = (s..s + shutter.bump).map(|t| atom[t * plane + p]).sum();
        }
    }
    a
}

/// Recovers the video block by block: lasso against `Phi_blk Psi` for every
/// block at the configured stride, then averaging of the overlapping
/// estimates.
pub fn reconstruct_patch(
    coded: &CodedImage,
    shutter: &ShutterFunction,
    dict: &PatchDictionary,
    cfg: &PatchConfig,
) -> Result<FrameSequence> {
    if cfg.px == 0 || cfg.py == 0 || cfg.pt == 0 || cfg.stride == 0 {
        return Err(Error::param("patch dimensions and stride must be at least 1"));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::param("lasso penalty must be nonnegative"));
    }
    if shutter.frames != cfg.pt {
        return Err(Error::param(format!(
            "temporal block size {} does not match the {} coded frames",
            cfg.pt, shutter.frames
        )));
    }
    if dict.atom_len != cfg.block_len() {
        return Err(Error::param(format!(
            "dictionary atoms have length {}, blocks have {}",
            dict.atom_len,
            cfg.block_len()
        )));
    }
    let (w, h) = (shutter.width, shutter.height);
    if coded.image.width != w || coded.image.height != h {
        return Err(Error::param("coded image and shutter dimensions differ"));
    }
    if coded.bump != shutter.bump {
        return Err(Error::param("coded image and shutter bump lengths differ"));
    }
    if w < cfg.px || h < cfg.py {
        return Err(Error::param("coded image is smaller than one block"));
    }
    let positions = block_grid((w, h, cfg.pt), cfg, cfg.stride);
    let estimates: Vec<Vec<f64>> = positions
        .par_iter()
        .map(|&(x0, y0, _)| {
            let a = block_operator(dict, shutter, cfg, x0, y0);
            let mut b = Vec::with_capacity(cfg.px * cfg.py);
            for y in 0..cfg.py {
                for x in 0..cfg.px {
                    b.push(coded.image.get(x0 + x, y0 + y));
                }
            }
            let code = lasso_solve(&a, &b, cfg.lambda)?;
            Ok(dict.synthesize(&code))
        })
        .collect::<Result<_>>()?;
    let blocks = BlockSet {
        len: cfg.block_len(),
        data: estimates.concat(),
        positions,
    };
    merge_blocks(&blocks, cfg, w, h, cfg.pt)
}

/// Gathers training blocks from `videos` (spatial step `cfg.stride`), picks a
/// subset with `selection` and learns a dictionary from it.
pub fn train_patch_dictionary(
    videos: &[FrameSequence],
    cfg: &PatchConfig,
    selection: &BlockSelectionConfig,
) -> Result<KsvdResult> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::param("no training videos"));
    }
    let sets = videos
        .iter()
        .map(|v| extract_blocks(v, cfg, cfg.stride))
        .collect::<Result<Vec<_>>>()?;
    let all = BlockSet::concat(sets)?;
    let picked = select_training_blocks(&all, selection)?;
    let mut chosen = all.subset(&picked);
    if cfg.remove_mean {
        for b in chosen.data.chunks_mut(chosen.len) {
            let m = b.iter().sum::<f64>() / b.len() as f64;
            b.iter_mut().for_each(|v| *v -= m);
        }
    }
    train_ksvd(&chosen.data, chosen.len, cfg.atoms, cfg.train_sparsity, cfg.ksvd_iters, selection.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shutter::{code_exposure, generate_shutter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_seq(w: usize, h: usize, t: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameSequence::from_vec(w, h, t, (0..w * h * t).map(|_| rng.random()).collect()).unwrap()
    }

    fn small_cfg(px: usize, pt: usize) -> PatchConfig {
        PatchConfig {
            px,
            py: px,
            pt,
            atoms: 2 * px * px * pt,
            ..PatchConfig::default()
        }
    }

    fn random_dictionary(len: usize, q: usize, seed: u64) -> PatchDictionary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..len * q).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in data.chunks_mut(len) {
            let n = norm_sq(c).sqrt();
            c.iter_mut().for_each(|v| *v /= n);
        }
        PatchDictionary::new(len, q, data).unwrap()
    }

    #[test]
    fn single_block_is_the_video() {
        let cfg = PatchConfig::default();
        let seq = random_seq(7, 7, 20, 1);
        let blocks = extract_blocks(&seq, &cfg, 1).unwrap();
        assert_eq!(blocks.count(), 1);
        assert_eq!(blocks.block(0), seq.data.as_slice());
    }

    #[test]
    fn block_counts() {
        let cfg = PatchConfig::default();
        assert_eq!(extract_blocks(&random_seq(8, 8, 20, 2), &cfg, 1).unwrap().count(), 4);
        // 128 wide at stride 2: corners 0, 2, ..., 120 and the flush corner 121
        assert_eq!(axis_positions(128, 7, 2).len(), 62);
        assert_eq!(axis_positions(14, 7, 7), vec![0, 7]);
        let err = extract_blocks(&random_seq(6, 8, 20, 2), &cfg, 1);
        assert!(matches!(err, Err(Error::Param(_))));
        let err = extract_blocks(&random_seq(8, 8, 19, 2), &cfg, 1);
        assert!(matches!(err, Err(Error::Param(_))));
    }

    #[test]
    fn block_layout_is_x_fastest() {
        let cfg = small_cfg(3, 2);
        let mut seq = FrameSequence::zeros(5, 4, 2);
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    seq.set(x, y, t, (100 * t + 10 * y + x) as f64);
                }
            }
        }
        let blocks = extract_blocks(&seq, &cfg, 1).unwrap();
        assert_eq!(blocks.positions[..4], [(0, 0, 0), (1, 0, 0), (2, 0, 0), (0, 1, 0)]);
        let b = blocks.block(4); // corner (1, 1)
        for t in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(b[(t * 3 + y) * 3 + x], (100 * t + 10 * (y + 1) + x + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn merge_is_partition_of_unity() {
        let cfg = small_cfg(7, 20);
        let seq = random_seq(19, 16, 20, 3);
        for stride in [1, 2, 3, 7] {
            let blocks = extract_blocks(&seq, &cfg, stride).unwrap();
            let merged = merge_blocks(&blocks, &cfg, 19, 16, 20).unwrap();
            for (a, b) in merged.data.iter().zip(&seq.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiling_covers_each_voxel_once() {
        let cfg = small_cfg(4, 3);
        let seq = random_seq(12, 8, 3, 4);
        let mut blocks = extract_blocks(&seq, &cfg, 4).unwrap();
        assert_eq!(blocks.count(), 6);
        // distinct estimates per block survive the merge untouched
        for (i, v) in blocks.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let merged = merge_blocks(&blocks, &cfg, 12, 8, 3).unwrap();
        let mut seen: Vec<f64> = merged.data.clone();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..blocks.data.len()).map(|i| i as f64).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn block_operator_matches_measurement() {
        let cfg = small_cfg(3, 5);
        let dict = random_dictionary(45, 90, 5);
        let shutter = generate_shutter(6, 5, 5, 2, 9).unwrap();
        let a = block_operator(&dict, &shutter, &cfg, 2, 1);
        // column j is the coded image of atom j placed at the block
        for j in [0, 17, 89] {
            let mut vol = FrameSequence::zeros(6, 5, 5);
            let atom = dict.atom(j);
            for t in 0..5 {
                for y in 0..3 {
                    for x in 0..3 {
                        vol.set(2 + x, 1 + y, t, atom[(t * 3 + y) * 3 + x]);
                    }
                }
            }
            let coded = code_exposure(&vol, &shutter).unwrap();
            for y in 0..3 {
                for x in 0..3 {
                    assert!((a[(y * 3 + x, j)] - coded.image.get(2 + x, 1 + y)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn planted_sparse_block_is_recovered() {
        let cfg = PatchConfig {
            stride: 7,
            lambda: 1e-3,
            ..PatchConfig::default()
        };
        let dict = random_dictionary(cfg.block_len(), cfg.atoms, 6);
        let mut alpha = vec![0.0; cfg.atoms];
        alpha[10] = 1.0;
        alpha[500] = -0.8;
        alpha[1400] = 0.6;
        let x = dict.synthesize(&BlockSparseCode { coeffs: alpha });
        let seq = FrameSequence::from_vec(7, 7, 20, x).unwrap();
        let shutter = generate_shutter(7, 7, 20, 3, 11).unwrap();
        let coded = code_exposure(&seq, &shutter).unwrap();
        let rec = reconstruct_patch(&coded, &shutter, &dict, &cfg).unwrap();
        let err: f64 = rec.data.iter().zip(&seq.data).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((err / norm_sq(&seq.data)).sqrt() < 0.05);
    }

    #[test]
    fn reconstruction_scales_with_lambda() {
        let cfg = PatchConfig {
            px: 4,
            py: 4,
            pt: 6,
            stride: 2,
            atoms: 192,
            lambda: 0.05,
            ..PatchConfig::default()
        };
        let dict = random_dictionary(96, 192, 7);
        let seq = random_seq(9, 8, 6, 8);
        let shutter = generate_shutter(9, 8, 6, 2, 3).unwrap();
        let coded = code_exposure(&seq, &shutter).unwrap();
        let rec = reconstruct_patch(&coded, &shutter, &dict, &cfg).unwrap();
        let mut coded2 = coded.clone();
        coded2.image.data.iter_mut().for_each(|v| *v *= 2.0);
        let cfg2 = PatchConfig {
            lambda: 0.1,
            ..cfg.clone()
        };
        let rec2 = reconstruct_patch(&coded2, &shutter, &dict, &cfg2).unwrap();
        for (a, b) in rec.data.iter().zip(&rec2.data) {
            assert!((2.0 * a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn dimension_mismatches_rejected() {
        let cfg = small_cfg(3, 4);
        let dict = random_dictionary(36, 72, 1);
        let seq = random_seq(6, 6, 4, 1);
        let shutter = generate_shutter(6, 6, 4, 2, 1).unwrap();
        let coded = code_exposure(&seq, &shutter).unwrap();
        let wrong_t = PatchConfig { pt: 5, ..cfg.clone() };
        assert!(matches!(
            reconstruct_patch(&coded, &shutter, &dict, &wrong_t),
            Err(Error::Param(_))
        ));
        let wrong_dict = random_dictionary(35, 72, 1);
        assert!(matches!(
            reconstruct_patch(&coded, &shutter, &wrong_dict, &cfg),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn dictionary_tensor_round_trip() {
        let dict = random_dictionary(12, 30, 2);
        let back = PatchDictionary::from_tensor(&Tensor::decode(&dict.to_tensor().encode()).unwrap()).unwrap();
        assert_eq!(back, dict);
    }
}
