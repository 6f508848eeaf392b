//! Empirical measures: point clouds, samplers, and CSV/PPM interchange.
//!
//! CSV files are headerless, comma separated, LF terminated, one point per
//! line. Values are written with 17 significant digits so a write/load
//! round trip is exact. Images are binary PPM (`P6`, maxval 255); each pixel
//! becomes one point in `[0, 1]³`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// `n × d` samples of an empirical measure, `n ≥ 1`, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud(Array2<f64>);

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::Argument(format!(
                "point cloud must be non-empty, got {}x{}",
                points.nrows(),
                points.ncols()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "point cloud entry ({}, {}) is not finite",
                i / points.ncols(),
                i % points.ncols()
            )));
        }
        Ok(PointCloud(points))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("rows have different lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        PointCloud::new(arr)
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).to_vec()
    }

    pub fn mean(&self) -> Array1<f64> {
        self.0.mean_axis(Axis(0)).expect("non-empty cloud")
    }

    /// Unbiased sample covariance (`n - 1` denominator; `n = 1` gives zeros).
    pub fn covariance(&self) -> Array2<f64> {
        let n = self.len();
        let centered = &self.0 - &self.mean();
        let denom = (n.max(2) - 1) as f64;
        centered.t().dot(&centered) / denom
    }
}

/// A distribution that can be sampled.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureSpec {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Mixture {
        weights: Vec<f64>,
        components: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    },
    /// Uniform resampling, with replacement, of the rows of a CSV file.
    Empirical { path: PathBuf },
    /// Uniform resampling of the pixels of a PPM image in `[0, 1]³`.
    ImagePalette { path: PathBuf },
}

impl MeasureSpec {
    /// Validates the spec and loads any backing file.
    pub fn sampler(&self) -> Result<Sampler> {
        match self {
            MeasureSpec::Gaussian { mean, cov } => Ok(Sampler::Mixture {
                cumulative: vec![1.0],
                components: vec![GaussianSampler::new(mean, cov)?],
            }),
            MeasureSpec::Mixture {
                weights,
                components,
            } => {
                if weights.len() != components.len() || weights.is_empty() {
                    return Err(Error::Argument(format!(
                        "mixture has {} weights for {} components",
                        weights.len(),
                        components.len()
                    )));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::Argument("mixture weights must be non-negative".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Argument(format!("mixture weights sum to {total}, not 1")));
                }
                let comps = components
                    .iter()
                    .map(|(m, c)| GaussianSampler::new(m, c))
                    .collect::<Result<Vec<_>>>()?;
                let d = comps[0].dim();
                if comps.iter().any(|c| c.dim() != d) {
                    return Err(Error::Shape("mixture components differ in dimension".into()));
                }
                let cumulative = weights
                    .iter()
                    .scan(0.0, |acc, w| {
                        *acc += w;
                        Some(*acc)
                    })
                    .collect();
                Ok(Sampler::Mixture {
                    cumulative,
                    components: comps,
                })
            }
            MeasureSpec::Empirical { path } => Ok(Sampler::Resample(load_csv(path)?)),
            MeasureSpec::ImagePalette { path } => Ok(Sampler::Resample(load_ppm_palette(path)?.0)),
        }
    }
}

/// Draws `n` i.i.d. points from `spec`.
pub fn sample(spec: &MeasureSpec, n: usize, rng: &mut dyn RngCore) -> Result<PointCloud> {
    spec.sampler()?.sample(n, rng)
}

#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Array1<f64>,
    chol: Array2<f64>,
}

impl GaussianSampler {
    pub fn new(mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("gaussian mean has length {d}, covariance is not {d}x{d}")));
        }
        let cov = Array2::from_shape_fn((d, d), |(i, j)| cov[i][j]);
        Ok(GaussianSampler {
            mean: Array1::from(mean.to_vec()),
            chol: psd_cholesky(&cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn draw_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            out[i] = self.mean[i] + (0..=i).map(|j| self.chol[[i, j]] * z[j]).sum::<f64>();
        }
    }
}

/// Lower-triangular `L` with `L Lᵀ = cov`, tolerating zero eigenvalues.
fn psd_cholesky(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-12 * scale;
    for i in 0..d {
        for j in 0..i {
            if (cov[[i, j]] - cov[[j, i]]).abs() > tol {
                return Err(Error::Argument("covariance is not symmetric".into()));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let diag = cov[[j, j]] - (0..j).map(|k| l[[j, k]] * l[[j, k]]).sum::<f64>();
        if diag < -tol * d as f64 {
            return Err(Error::Argument("covariance is not positive semi-definite".into()));
        }
        if diag <= tol {
            // Zero pivot: the remaining column must vanish too.
            for i in j + 1..d {
                let off = cov[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
                if off.abs() > 1e-9 * scale {
                    return Err(Error::Argument("covariance is not positive semi-definite".into()));
                }
            }
            continue;
        }
        let root = diag.sqrt();
        l[[j, j]] = root;
        for i in j + 1..d {
            let off = cov[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
            l[[i, j]] = off / root;
        }
    }
    Ok(l)
}

/// A ready-to-draw measure.
#[derive(Debug, Clone)]
pub enum Sampler {
    Mixture {
        cumulative: Vec<f64>,
        components: Vec<GaussianSampler>,
    },
    Resample(PointCloud),
}

impl Sampler {
    pub fn dim(&self) -> usize {
        match self {
            Sampler::Mixture { components, .. } => components[0].dim(),
            Sampler::Resample(c) => c.dim(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::Argument("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        match self {
            Sampler::Mixture {
                cumulative,
                components,
            } => {
                for mut row in out.rows_mut() {
                    let k = if components.len() == 1 {
                        0
                    } else {
                        let u: f64 = rng.random();
                        cumulative
                            .iter()
                            .position(|&c| u < c)
                            .unwrap_or(components.len() - 1)
                    };
                    components[k].draw_into(rng, row.as_slice_mut().expect("row-major"));
                }
            }
            Sampler::Resample(cloud) => {
                let src = cloud.points();
                for mut row in out.rows_mut() {
                    let i = rng.random_range(0..cloud.len());
                    row.assign(&src.row(i));
                }
            }
        }
        PointCloud::new(out)
    }
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Parses CSV text; `path` is used for error messages only.
pub fn parse_csv(text: &str, path: &Path) -> Result<PointCloud> {
    let mut flat = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let before = flat.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("not a number: {:?}", field.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {v}")));
            }
            flat.push(v);
        }
        let n = flat.len() - before;
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => return Err(parse_err(format!("expected {d} fields, found {n}"))),
            _ => {}
        }
        rows += 1;
    }
    let d = dim.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "no data rows".into(),
    })?;
    PointCloud::new(Array2::from_shape_vec((rows, d), flat).expect("row lengths checked"))
}

/// Loads a headerless CSV; the dimension is taken from the first row.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

pub fn format_csv(cloud: ArrayView2<f64>) -> String {
    let mut out = String::with_capacity(cloud.len() * 24);
    for row in cloud.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, cloud: ArrayView2<f64>) -> Result<()> {
    atomic_write(path.as_ref(), format_csv(cloud).as_bytes())
}

fn ppm_header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a binary `P6` image with maxval 255 into `(palette, width, height)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(PointCloud, usize, usize)> {
    let mut pos = 0;
    let magic = ppm_header_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::Format(format!("expected PPM magic P6, found {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for (slot, name) in dims.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = ppm_header_token(bytes, &mut pos)?;
        *slot = tok
            .parse()
            .map_err(|_| Error::Format(format!("bad PPM {name}: {tok:?}")))?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM image has no pixels".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("PPM raster truncated: need {need} bytes")))?;
    let arr = Array2::from_shape_fn((width * height, 3), |(i, c)| raster[3 * i + c] as f64 / 255.0);
    Ok((PointCloud::new(arr)?, width, height))
}

pub fn load_ppm_palette(path: impl AsRef<Path>) -> Result<(PointCloud, usize, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn encode_ppm(cloud: ArrayView2<f64>, width: usize, height: usize) -> Result<Vec<u8>> {
    if cloud.ncols() != 3 || cloud.nrows() != width * height {
        return Err(Error::Shape(format!(
            "{}x{} cloud cannot fill a {width}x{height} RGB image",
            cloud.nrows(),
            cloud.ncols()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(cloud.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, cloud: ArrayView2<f64>, width: usize, height: usize) -> Result<()> {
    atomic_write(path.as_ref(), &encode_ppm(cloud, width, height)?)
}
