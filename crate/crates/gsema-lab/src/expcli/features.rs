//! Latent-feature export, the domain-overlap score, and the 2-D projection
//! used by the embedding plot.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetHandle;
use crate::error::{Error, Result};
use crate::model::{Network, NetworkKind, ParamVector};
use crate::volume::Variant;

/// Provenance of one feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub domain_id: usize,
    pub variant: Variant,
    pub network: NetworkKind,
}

/// A matrix of flattened latent features with per-row labels.
#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub matrix: Array2<f64>,
    pub labels: Vec<RowLabel>,
}

#[derive(Serialize, Deserialize)]
struct DumpSidecar {
    rows: usize,
    dim: usize,
    labels: Vec<RowLabel>,
}

fn matrix_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".features.f32");
    PathBuf::from(p)
}

fn sidecar_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".features.json");
    PathBuf::from(p)
}

impl FeatureDump {
    pub fn validate(&self) -> Result<()> {
        if self.matrix.nrows() != self.labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                self.matrix.nrows(),
                self.labels.len()
            )));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(())
    }

    /// Write the matrix as little-endian f32 with a JSON label sidecar.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = prefix.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut blob = fs::File::create(matrix_path(prefix))?;
        let mut bytes = Vec::with_capacity(self.matrix.len() * 4);
        for &v in self.matrix.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        blob.write_all(&bytes)?;
        let sidecar = DumpSidecar {
            rows: self.matrix.nrows(),
            dim: self.matrix.ncols(),
            labels: self.labels.clone(),
        };
        fs::write(sidecar_path(prefix), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(prefix: &Path) -> Result<Self> {
        let sidecar: DumpSidecar = serde_json::from_slice(&fs::read(sidecar_path(prefix))?)?;
        let mut bytes = Vec::new();
        fs::File::open(matrix_path(prefix))?.read_to_end(&mut bytes)?;
        let expect = sidecar.rows * sidecar.dim * 4;
        if bytes.len() != expect {
            return Err(Error::config(format!(
                "feature blob holds {} bytes, sidecar implies {expect}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let matrix = Array2::from_shape_vec((sidecar.rows, sidecar.dim), values)
            .map_err(|e| Error::Internal(e.to_string()))?;
        let dump = FeatureDump { matrix, labels: sidecar.labels };
        dump.validate()?;
        Ok(dump)
    }
}

/// Run the listed parameter sets over the chosen dataset domains and stack
/// the flattened bottleneck latents. Row order: domain ascending, sample
/// index ascending, then networks in the order given.
pub fn export_features(
    net: &Network,
    branches: &[(NetworkKind, &ParamVector)],
    dataset: &DatasetHandle,
    domains: &[usize],
) -> Result<FeatureDump> {
    if branches.is_empty() || domains.is_empty() {
        return Err(Error::config("feature export needs >= 1 network and domain"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for &d in domains {
        for i in 0..dataset.samples_per_domain() {
            let sample = dataset.load_sample(d, i)?;
            for &(kind, params) in branches {
                let (_, feat) = net.forward(params, &sample.image, kind, sample.variant)?;
                rows.push(feat.flatten());
                labels.push(RowLabel {
                    domain_id: d,
                    variant: sample.variant,
                    network: kind,
                });
            }
        }
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let matrix = Array2::from_shape_vec((labels.len(), dim), flat)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let dump = FeatureDump { matrix, labels };
    dump.validate()?;
    Ok(dump)
}

/// How indistinguishable the domains are in feature space, in [0, 1].
///
/// A nearest-centroid classifier predicts each row's domain from the raw
/// features (ties share credit evenly). Its balanced accuracy is rescaled so
/// that chance level maps to 1 (full overlap) and perfect separation to 0.
pub fn domain_overlap_score(dump: &FeatureDump) -> Result<f64> {
    dump.validate()?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, label) in dump.labels.iter().enumerate() {
        groups.entry(label.domain_id).or_default().push(r);
    }
    if groups.len() < 2 {
        return Err(Error::Degenerate(
            "overlap score needs at least two domains".into(),
        ));
    }
    for (d, rows) in &groups {
        if rows.len() < 3 {
            return Err(Error::Degenerate(format!(
                "domain {d} has {} feature rows, need at least 3",
                rows.len()
            )));
        }
    }

    let dim = dump.matrix.ncols();
    let order: Vec<usize> = groups.keys().copied().collect();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for d in &order {
        let rows = &groups[d];
        let mut c = vec![0.0; dim];
        for &r in rows {
            for (acc, &v) in c.iter_mut().zip(dump.matrix.row(r)) {
                *acc += v;
            }
        }
        for v in &mut c {
            *v /= rows.len() as f64;
        }
        centroids.push(c);
    }

    let mut balanced = 0.0;
    for (gi, d) in order.iter().enumerate() {
        let rows = &groups[d];
        let mut credit = 0.0;
        for &r in rows {
            let row = dump.matrix.row(r);
            let d2: Vec<f64> = centroids
                .iter()
                .map(|c| row.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum())
                .collect();
            let best = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let tied: Vec<usize> = (0..d2.len()).filter(|&k| d2[k] == best).collect();
            if tied.contains(&gi) {
                credit += 1.0 / tied.len() as f64;
            }
        }
        balanced += credit / rows.len() as f64;
    }
    balanced /= order.len() as f64;

    let chance = 1.0 / order.len() as f64;
    let excess = ((balanced - chance) / (1.0 - chance)).max(0.0);
    Ok((1.0 - excess).clamp(0.0, 1.0))
}

/// Project rows onto their top two principal components.
///
/// Works through the n x n Gram matrix (rows are few, the feature dimension
/// is large) with deterministic power iteration plus deflation, so plots are
/// reproducible bit for bit.
pub fn pca2(x: &ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut coords = Array2::zeros((n, 2));
    if n < 2 {
        return coords;
    }
    let dim = x.ncols();
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut gram = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in 0..dim {
                s += (x[[i, k]] - mean[k]) * (x[[j, k]] - mean[k]);
            }
            gram[[i, j]] = s;
            gram[[j, i]] = s;
        }
    }

    let mut g = gram;
    for comp in 0..2 {
        // Fixed, slightly tilted start vector: deterministic and unlikely to
        // be orthogonal to the leading eigenvector.
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += g[[i, j]] * v[j];
                }
                w[i] = s;
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                lambda = 0.0;
                break;
            }
            for a in &mut w {
                *a /= norm;
            }
            lambda = norm;
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        if lambda <= 0.0 {
            break;
        }
        let scale = lambda.sqrt();
        for i in 0..n {
            coords[[i, comp]] = v[i] * scale;
        }
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] -= lambda * v[i] * v[j];
            }
        }
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use tempfile::tempdir;

    fn label(domain_id: usize) -> RowLabel {
        RowLabel {
            domain_id,
            variant: Variant::Source,
            network: NetworkKind::Teacher,
        }
    }

    fn cloud_dump(offsets: &[f64], per: usize, sigma: f64, seed: u64) -> FeatureDump {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dim = 5;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (d, &off) in offsets.iter().enumerate() {
            for _ in 0..per {
                let mut row = vec![0.0; dim];
                for v in &mut row {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    *v = off + sigma * (-2.0 * u1.ln()).sqrt() * u2.cos();
                }
                rows.push(row);
                labels.push(label(d));
            }
        }
        let matrix =
            Array2::from_shape_vec((labels.len(), dim), rows.into_iter().flatten().collect())
                .unwrap();
        FeatureDump { matrix, labels }
    }

    #[test]
    fn one_sigma_clouds_match_a_brute_force_classifier() {
        // Two Gaussian clouds whose centroids sit one standard deviation
        // apart along the first axis. The expected score comes from an
        // independently coded nearest-centroid evaluation.
        let mut dump = cloud_dump(&[0.0, 0.0], 40, 1.0, 9);
        for r in 40..80 {
            dump.matrix[[r, 0]] += 1.0;
        }

        let mut cents = [vec![0.0; 5], vec![0.0; 5]];
        for r in 0..80 {
            let c = &mut cents[(r >= 40) as usize];
            for (k, &v) in dump.matrix.row(r).iter().enumerate() {
                c[k] += v / 40.0;
            }
        }
        let mut hits = [0usize; 2];
        for r in 0..80 {
            let own = (r >= 40) as usize;
            let dist = |c: &[f64]| -> f64 {
                dump.matrix
                    .row(r)
                    .iter()
                    .zip(c)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum()
            };
            if dist(&cents[own]) < dist(&cents[1 - own]) {
                hits[own] += 1;
            }
        }
        let balanced = (hits[0] as f64 / 40.0 + hits[1] as f64 / 40.0) / 2.0;
        let expected = (1.0 - (balanced - 0.5) / 0.5).clamp(0.0, 1.0);

        let score = domain_overlap_score(&dump).unwrap();
        assert!(
            (score - expected).abs() < 1e-12,
            "score {score} vs oracle {expected}"
        );
        // At this centroid distance the clouds overlap heavily but are not
        // indistinguishable.
        assert!(score > 0.3 && score < 1.0, "score {score}");
    }

    #[test]
    fn identical_clouds_score_full_overlap() {
        // Same nine points under two domain labels: the two centroids
        // coincide, every distance ties, credit splits evenly.
        let base = cloud_dump(&[0.0], 9, 1.0, 3);
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for r in 0..base.matrix.nrows() {
            rows.extend(base.matrix.row(r).iter().copied());
            labels.push(label(0));
        }
        for r in 0..base.matrix.nrows() {
            rows.extend(base.matrix.row(r).iter().copied());
            labels.push(label(1));
        }
        let matrix = Array2::from_shape_vec((labels.len(), 5), rows).unwrap();
        let dump = FeatureDump { matrix, labels };
        let score = domain_overlap_score(&dump).unwrap();
        assert!((score - 1.0).abs() < 1e-12, "score {score}");
    }

    #[test]
    fn well_separated_clouds_score_zero() {
        let dump = cloud_dump(&[0.0, 50.0], 8, 1.0, 4);
        let score = domain_overlap_score(&dump).unwrap();
        assert!(score < 1e-9, "score {score}");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let one_domain = cloud_dump(&[0.0], 6, 1.0, 5);
        assert!(domain_overlap_score(&one_domain).is_err());
        let tiny = cloud_dump(&[0.0, 1.0], 2, 1.0, 6);
        assert!(domain_overlap_score(&tiny).is_err());
    }

    #[test]
    fn dump_round_trips_through_files() {
        let dump = cloud_dump(&[0.0, 2.0], 4, 0.5, 7);
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("feat");
        dump.write(&prefix).unwrap();
        let back = FeatureDump::read(&prefix).unwrap();
        assert_eq!(back.labels, dump.labels);
        assert_eq!(back.matrix.dim(), dump.matrix.dim());
        // Values pass through an f32 quantization.
        for (a, b) in back.matrix.iter().zip(dump.matrix.iter()) {
            assert!((a - b).abs() <= (*b as f32).abs() as f64 * 1e-6 + 1e-7);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dump = cloud_dump(&[0.0, 2.0], 4, 0.5, 8);
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("feat");
        dump.write(&prefix).unwrap();
        let blob = matrix_path(&prefix);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(FeatureDump::read(&prefix).is_err());
    }

    #[test]
    fn pca_recovers_a_dominant_axis() {
        // Points spread along (1, 1, 0...) with tiny orthogonal noise: the
        // first component must capture nearly all variance.
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let n = 12;
        let mut rows = Vec::new();
        for i in 0..n {
            let t = i as f64 - (n as f64 - 1.0) / 2.0;
            let eps: f64 = rng.gen_range(-0.01..0.01);
            rows.extend_from_slice(&[t + eps, t - eps, eps, -eps]);
        }
        let x = Array2::from_shape_vec((n, 4), rows).unwrap();
        let coords = pca2(&x.view());
        let var1: f64 = coords.column(0).iter().map(|v| v * v).sum();
        let var2: f64 = coords.column(1).iter().map(|v| v * v).sum();
        assert!(var1 > 100.0 * var2, "var1 {var1} var2 {var2}");
        // Component order flips are legal; magnitude correlation with t is not.
        let c: f64 = coords
            .column(0)
            .iter()
            .enumerate()
            .map(|(i, v)| v * (i as f64 - (n as f64 - 1.0) / 2.0))
            .sum();
        assert!(c.abs() > 1.0);
    }

    #[test]
    fn pca_of_identical_rows_is_zero() {
        let x = array![[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]];
        let coords = pca2(&x.view());
        assert!(coords.iter().all(|v| v.abs() < 1e-9));
    }
}
