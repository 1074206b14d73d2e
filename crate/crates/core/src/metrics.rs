//! Alignment-shift metrics over precomputed embeddings, plus SSIM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Visual,
    Text,
}

/// Report scale: raw cosine similarities or similarities times 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Unit,
    #[default]
    Percent,
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Unit => 1.0,
            Scale::Percent => 100.0,
        }
    }
}

/// Per-frame embedding vectors (a text embedding is a single frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSet {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub frames: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(kind: EmbeddingKind, frames: Vec<Vec<f64>>) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        let set = Self { kind, dim, frames };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::param("embedding set has no frames"));
        }
        if self.dim == 0 {
            return Err(Error::param("embedding dimension must be >= 1"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != self.dim {
                return Err(Error::param(format!(
                    "embedding frame {i} has dimension {}, expected {}",
                    f.len(),
                    self.dim
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding frame {i}")));
            }
            if f.iter().all(|&v| v == 0.0) {
                return Err(Error::param(format!("embedding frame {i} is the zero vector")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let set: EmbeddingSet = serde_json::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    /// The single vector of a one-frame set (text prompts, reference images).
    pub fn single(&self) -> Result<&[f64]> {
        match self.frames.as_slice() {
            [only] => Ok(only),
            _ => Err(Error::param(format!(
                "expected a single embedding, got {} frames",
                self.frames.len()
            ))),
        }
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::param(format!("dimension mismatch: {} vs {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::param("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean over frames of `cos(frame, reference)`, in `scale`.
pub fn clip_alignment(video: &EmbeddingSet, reference: &[f64], scale: Scale) -> Result<f64> {
    if video.frames.is_empty() {
        return Err(Error::param("cannot align an empty embedding set"));
    }
    let mut sum = 0.0;
    for f in &video.frames {
        sum += cosine_sim(f, reference)?;
    }
    Ok(scale.factor() * sum / video.frames.len() as f64)
}

/// `(I_fused - I_orig) - (T_fused - T_orig)`.
pub fn cass(clip_i_orig: f64, clip_i_fused: f64, clip_t_orig: f64, clip_t_fused: f64) -> f64 {
    (clip_i_fused - clip_i_orig) - (clip_t_fused - clip_t_orig)
}

/// `dI / I_orig - dT / T_orig`.
pub fn rel_cass(clip_i_orig: f64, clip_i_fused: f64, clip_t_orig: f64, clip_t_fused: f64) -> Result<f64> {
    if clip_i_orig == 0.0 {
        return Err(Error::DivisionByZero { channel: "CLIP-I" });
    }
    if clip_t_orig == 0.0 {
        return Err(Error::DivisionByZero { channel: "CLIP-T" });
    }
    Ok((clip_i_fused - clip_i_orig) / clip_i_orig - (clip_t_fused - clip_t_orig) / clip_t_orig)
}

/// `|(sim(fused, A) + sim(fused, B)) - (sim(V_A, A) + sim(V_B, B))|`.
pub fn clip_bs(sim_fused_a: f64, sim_fused_b: f64, sim_a_a: f64, sim_b_b: f64) -> f64 {
    ((sim_fused_a + sim_fused_b) - (sim_a_a + sim_b_b)).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpipsMode {
    Image,
    Temporal,
}

/// Mean of externally computed LPIPS distances (per frame, or per adjacent
/// frame pair in temporal mode).
pub fn lpips_aggregate(distances: &[f64], _mode: LpipsMode) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::param("no LPIPS distances to aggregate"));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("LPIPS distances".into()));
    }
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Single-channel row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::param(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range `L`.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            range: 1.0,
        }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

// Separable "valid" correlation.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|j| k[j] * img[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every position where the Gaussian window fits inside the
/// image, with `C1 = (0.01 L)^2` and `C2 = (0.03 L)^2`.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, params: &SsimParams) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::param(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let SsimParams { window, sigma, range } = *params;
    if window < 3 || window % 2 == 0 {
        return Err(Error::param(format!("SSIM window must be odd and >= 3, got {window}")));
    }
    if window > a.height || window > a.width {
        return Err(Error::param(format!(
            "SSIM window {window} larger than the {}x{} image",
            a.height, a.width
        )));
    }
    if !(sigma > 0.0 && range > 0.0) {
        return Err(Error::param("SSIM sigma and range must be positive"));
    }
    let (h, w) = (a.height, a.width);
    let k = gaussian_kernel(window, sigma);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&a.data, h, w, &k);
    let mu_b = filter_valid(&b.data, h, w, &k);
    let e_aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let e_bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let e_ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Component values behind the headline scores, for recomputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formulas {
    pub cass: String,
    pub rel_cass: String,
    pub delta_i: f64,
    pub delta_t: f64,
    pub rel_i: Option<f64>,
    pub rel_t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scale: Scale,
    pub clip_t_orig: f64,
    pub clip_i_orig: f64,
    pub clip_t_fused: f64,
    pub clip_i_fused: f64,
    pub cass: f64,
    /// Absent when a baseline alignment is exactly zero.
    pub rel_cass: Option<f64>,
    pub clip_bs: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub lpips_i: Option<f64>,
    pub lpips_t: Option<f64>,
    pub formulas: Formulas,
}

impl MetricReport {
    /// Alignments of the original and fused videos against the reference
    /// image embedding and the source prompt embedding.
    pub fn compute(
        orig: &EmbeddingSet,
        fused: &EmbeddingSet,
        cond_image: &[f64],
        text: &[f64],
        scale: Scale,
    ) -> Result<Self> {
        let clip_t_orig = clip_alignment(orig, text, scale)?;
        let clip_i_orig = clip_alignment(orig, cond_image, scale)?;
        let clip_t_fused = clip_alignment(fused, text, scale)?;
        let clip_i_fused = clip_alignment(fused, cond_image, scale)?;
        let rel = rel_cass(clip_i_orig, clip_i_fused, clip_t_orig, clip_t_fused).ok();
        let nonzero = |v: f64| (v != 0.0).then_some(v);
        Ok(Self {
            scale,
            clip_t_orig,
            clip_i_orig,
            clip_t_fused,
            clip_i_fused,
            cass: cass(clip_i_orig, clip_i_fused, clip_t_orig, clip_t_fused),
            rel_cass: rel,
            clip_bs: None,
            ssim_mean: None,
            lpips_i: None,
            lpips_t: None,
            formulas: Formulas {
                cass: "(clip_i_fused - clip_i_orig) - (clip_t_fused - clip_t_orig)".into(),
                rel_cass: "delta_i / clip_i_orig - delta_t / clip_t_orig".into(),
                delta_i: clip_i_fused - clip_i_orig,
                delta_t: clip_t_fused - clip_t_orig,
                rel_i: nonzero(clip_i_orig).map(|b| (clip_i_fused - clip_i_orig) / b),
                rel_t: nonzero(clip_t_orig).map(|b| (clip_t_fused - clip_t_orig) / b),
            },
        })
    }

    /// Recompute CASS and relCASS from the stored alignments and report the
    /// largest deviation from the stored values.
    pub fn consistency_error(&self) -> f64 {
        let c = cass(self.clip_i_orig, self.clip_i_fused, self.clip_t_orig, self.clip_t_fused);
        let mut err = (c - self.cass).abs();
        if let (Some(stored), Ok(r)) = (
            self.rel_cass,
            rel_cass(self.clip_i_orig, self.clip_i_fused, self.clip_t_orig, self.clip_t_fused),
        ) {
            err = err.max((stored - r).abs());
        }
        err
    }
}

/// CASS next to the absolute-difference blending score for the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub scale: Scale,
    pub cass: f64,
    pub rel_cass: Option<f64>,
    pub clip_bs: f64,
    pub mix_score: f64,
    pub original_score: f64,
}

/// Inputs for [`compare`]. Concept A is the source video and its prompt;
/// concept B is the reference image and its prompt.
pub struct CompareInputs<'a> {
    pub orig: &'a EmbeddingSet,
    pub fused: &'a EmbeddingSet,
    pub cond_image: &'a [f64],
    pub text_a: &'a [f64],
    pub text_b: &'a [f64],
    pub video_a: &'a EmbeddingSet,
    pub video_b: &'a EmbeddingSet,
}

pub fn compare(inputs: &CompareInputs<'_>, scale: Scale) -> Result<CompareReport> {
    let m = MetricReport::compute(inputs.orig, inputs.fused, inputs.cond_image, inputs.text_a, scale)?;
    let s_fa = clip_alignment(inputs.fused, inputs.text_a, scale)?;
    let s_fb = clip_alignment(inputs.fused, inputs.text_b, scale)?;
    let s_aa = clip_alignment(inputs.video_a, inputs.text_a, scale)?;
    let s_bb = clip_alignment(inputs.video_b, inputs.text_b, scale)?;
    Ok(CompareReport {
        scale,
        cass: m.cass,
        rel_cass: m.rel_cass,
        clip_bs: clip_bs(s_fa, s_fb, s_aa, s_bb),
        mix_score: s_fa + s_fb,
        original_score: s_aa + s_bb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_sim(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn alignment_cases() {
        let r = vec![1.0, 0.0];
        let same = EmbeddingSet::new(EmbeddingKind::Visual, vec![r.clone(), r.clone()]).unwrap();
        assert!((clip_alignment(&same, &r, Scale::Unit).unwrap() - 1.0).abs() < 1e-15);
        assert!((clip_alignment(&same, &r, Scale::Percent).unwrap() - 100.0).abs() < 1e-12);
        let orth = EmbeddingSet::new(EmbeddingKind::Visual, vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(clip_alignment(&orth, &r, Scale::Unit).unwrap(), 0.0);
        // Frames with cosines 0.2 and 0.6 against e1.
        let f = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let two = EmbeddingSet::new(EmbeddingKind::Visual, vec![f(0.2), f(0.6)]).unwrap();
        assert!((clip_alignment(&two, &r, Scale::Unit).unwrap() - 0.4).abs() < 1e-12);
        let empty = EmbeddingSet {
            kind: EmbeddingKind::Visual,
            dim: 2,
            frames: vec![],
        };
        assert!(clip_alignment(&empty, &r, Scale::Unit).is_err());
    }

    #[test]
    fn cass_and_rel_cass_hand_values() {
        assert!((cass(0.20, 0.50, 0.80, 0.60) - 0.50).abs() < 1e-12);
        assert!((rel_cass(0.20, 0.50, 0.80, 0.60).unwrap() - 1.75).abs() < 1e-12);
        assert_eq!(cass(0.3, 0.3, 0.7, 0.7), 0.0);
        assert_eq!(rel_cass(0.3, 0.3, 0.7, 0.7).unwrap(), 0.0);
        assert!(matches!(
            rel_cass(0.0, 0.5, 0.8, 0.6),
            Err(Error::DivisionByZero { channel: "CLIP-I" })
        ));
        assert!(matches!(
            rel_cass(0.2, 0.5, 0.0, 0.6),
            Err(Error::DivisionByZero { channel: "CLIP-T" })
        ));
    }

    #[test]
    fn clip_bs_cases() {
        assert_eq!(clip_bs(0.5, 0.5, 0.5, 0.5), 0.0);
        assert!((clip_bs(0.1, 0.1, 0.9, 0.9) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn lpips_means() {
        assert!((lpips_aggregate(&[0.1, 0.1, 0.1], LpipsMode::Image).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(lpips_aggregate(&[0.0], LpipsMode::Temporal).unwrap(), 0.0);
        assert!((lpips_aggregate(&[0.1, 0.3], LpipsMode::Image).unwrap() - 0.2).abs() < 1e-15);
        assert!(lpips_aggregate(&[], LpipsMode::Image).is_err());
    }

    #[test]
    fn embedding_json_validation() {
        let p = Path::new("e.json");
        let ok = r#"{"kind":"text","dim":2,"frames":[[0.5,0.5]]}"#;
        let set = EmbeddingSet::from_json(ok, p).unwrap();
        assert_eq!(set.kind, EmbeddingKind::Text);
        assert_eq!(set.single().unwrap(), &[0.5, 0.5]);
        for bad in [
            r#"{"kind":"text","dim":3,"frames":[[0.5,0.5]]}"#,
            r#"{"kind":"visual","dim":2,"frames":[[0.0,0.0]]}"#,
            r#"{"kind":"visual","dim":2,"frames":[]}"#,
            r#"{"kind":"audio","dim":2,"frames":[[1,1]]}"#,
            r#"{"kind":"text","dim":2,"frames":[[1,1]],"extra":1}"#,
        ] {
            assert!(EmbeddingSet::from_json(bad, p).is_err(), "{bad}");
        }
    }

    #[test]
    fn ssim_identity_and_errors() {
        let img = ImageGrid::new(16, 16, (0..256).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let p = SsimParams::default();
        assert!((ssim(&img, &img, &p).unwrap() - 1.0).abs() < 1e-9);
        let other = ImageGrid::new(16, 15, vec![0.0; 240]).unwrap();
        assert!(ssim(&img, &other, &p).is_err());
        let even = SsimParams { window: 4, ..p };
        assert!(ssim(&img, &img, &even).is_err());
    }

    #[test]
    fn report_is_self_consistent() {
        let orig = EmbeddingSet::new(EmbeddingKind::Visual, vec![vec![1.0, 0.2, 0.0], vec![0.9, 0.1, 0.1]]).unwrap();
        let fused = EmbeddingSet::new(EmbeddingKind::Visual, vec![vec![0.4, 0.8, 0.0], vec![0.3, 0.9, 0.1]]).unwrap();
        let r = MetricReport::compute(&orig, &fused, &[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], Scale::Percent).unwrap();
        assert!(r.consistency_error() < 1e-9);
        assert!(r.cass > 0.0);
        assert!((r.formulas.delta_i - (r.clip_i_fused - r.clip_i_orig)).abs() < 1e-12);
    }

    fn tuple() -> impl Strategy<Value = (f64, f64, f64, f64)> {
        let nz = prop_oneof![-1.0f64..-0.05, 0.05f64..1.0];
        (nz.clone(), -1.0f64..1.0, nz, -1.0f64..1.0)
    }

    proptest! {
        #[test]
        fn cass_antisymmetric_and_shift_invariant((io, i_f, to, tf) in tuple(), k in -1.0f64..1.0) {
            prop_assert!((cass(io, i_f, to, tf) + cass(i_f, io, tf, to)).abs() < 1e-12);
            prop_assert!((cass(io + k, i_f + k, to + k, tf + k) - cass(io, i_f, to, tf)).abs() < 1e-12);
        }

        #[test]
        fn rel_cass_scale_invariant((io, i_f, to, tf) in tuple(), a in 0.1f64..10.0, b in 0.1f64..10.0) {
            let base = rel_cass(io, i_f, to, tf).unwrap();
            let scaled = rel_cass(a * io, a * i_f, b * to, b * tf).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9 * (1.0 + base.abs()));
        }

        #[test]
        fn clip_bs_sign_symmetric(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
            prop_assert!((clip_bs(a, b, c, d) - clip_bs(c, d, a, b)).abs() < 1e-15);
        }

        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u64>()) {
            let mut r = crate::tensorcore::RandomSource::new(seed);
            let a = ImageGrid::new(16, 16, (0..256).map(|_| r.uniform()).collect()).unwrap();
            let b = ImageGrid::new(16, 16, (0..256).map(|_| r.uniform()).collect()).unwrap();
            let p = SsimParams::default();
            let ab = ssim(&a, &b, &p).unwrap();
            prop_assert!((ab - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
            prop_assert!(ab > -1.0 && ab <= 1.0);
        }
    }
}
