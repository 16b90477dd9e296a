//! Synthetic multi-domain data with controllable style shift, CSV I/O and
//! leave-one-domain-out splitting.
//!
//! Every domain sees the same class prototypes through its own "style": a
//! global contrast factor with per-feature jitter, a rotation in a random
//! feature plane, and an additive shift, plus isotropic noise amplified by the
//! same contrast factor (so contrast changes style, not separability). Source
//! domains take style magnitudes spread over `(0, kappa]`; the held-out
//! target domain is generated at `target_factor * kappa`, outside that range.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::kv::KvMap;
use crate::rng;
use crate::scalar::Scalar;

/// Labeled samples tagged with a domain id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    features: Tensor<S>,
    labels: Vec<usize>,
    domains: Vec<usize>,
    classes: usize,
    n_domains: usize,
}

impl<S: Scalar> Dataset<S> {
    /// Validates shapes and that labels / domain ids are in range. Cell
    /// coverage is not required here (subsets of a dataset may lack cells).
    pub fn new(
        features: Tensor<S>,
        labels: Vec<usize>,
        domains: Vec<usize>,
        classes: usize,
        n_domains: usize,
    ) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() || labels.len() != domains.len()
        {
            return Err(Error::Shape {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len(), domains.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        if let Some(&d) = domains.iter().find(|&&d| d >= n_domains) {
            return invalid(format!("domain id {d} out of range for {n_domains} domains"));
        }
        Ok(Self {
            features,
            labels,
            domains,
            classes,
            n_domains,
        })
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_ids(&self) -> &[usize] {
        &self.domains
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Domain ids that actually occur, ascending.
    pub fn present_domains(&self) -> Vec<usize> {
        self.domains.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn rows_of_domain(&self, domain: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == domain).collect()
    }

    /// Rows `rows`, keeping class and domain counts.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
            classes: self.classes,
            n_domains: self.n_domains,
        })
    }

    /// Checks that every (domain, class) cell has at least one sample.
    pub fn check_cells(&self) -> Result<()> {
        let mut seen = vec![false; self.n_domains * self.classes];
        for (&d, &l) in self.domains.iter().zip(&self.labels) {
            seen[d * self.classes + l] = true;
        }
        match seen.iter().position(|&s| !s) {
            Some(i) => invalid(format!(
                "empty cell: domain {} class {}",
                i / self.classes,
                i % self.classes
            )),
            None => Ok(()),
        }
    }

    /// Splits into the source set (all other domains, ids renumbered
    /// `0..n_domains-1` in ascending order) and the target set (original id).
    pub fn split_lodo(&self, target: usize) -> Result<(Self, Self)> {
        if !self.domains.contains(&target) {
            return invalid(format!("target domain {target} not present"));
        }
        let (src_rows, tgt_rows): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| self.domains[i] != target);
        let mut src = self.select(&src_rows)?;
        for d in &mut src.domains {
            if *d > target {
                *d -= 1;
            }
        }
        src.n_domains = self.n_domains - 1;
        let tgt = self.select(&tgt_rows)?;
        Ok((src, tgt))
    }

    /// Holds out `fraction` of every (domain, class) cell, chosen with `seed`.
    /// Returns `(train, validation)`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return invalid(format!("validation fraction {fraction} not in [0, 1)"));
        }
        let mut r = rng::stream(seed, rng::VALIDATION_STREAM);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for d in 0..self.n_domains {
            for c in 0..self.classes {
                let mut cell: Vec<usize> = (0..self.len())
                    .filter(|&i| self.domains[i] == d && self.labels[i] == c)
                    .collect();
                cell.shuffle(&mut r);
                let k = (cell.len() as f64 * fraction).round() as usize;
                val.extend_from_slice(&cell[..k]);
                train.extend_from_slice(&cell[k..]);
            }
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.select(&train)?, self.select(&val)?))
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            features: self.features.cast(),
            labels: self.labels.clone(),
            domains: self.domains.clone(),
            classes: self.classes,
            n_domains: self.n_domains,
        }
    }

    fn header(dim: usize) -> String {
        let mut h = String::from("domain,label");
        for j in 0..dim {
            h.push_str(&format!(",f{j}"));
        }
        h
    }

    /// CSV with header `domain,label,f0..f{D-1}`; values carry 17 significant
    /// digits so f64 data round-trips exactly.
    pub fn write_csv(&self, w: &mut (impl Write + ?Sized)) -> Result<()> {
        writeln!(w, "{}", Self::header(self.dim()))?;
        for i in 0..self.len() {
            write!(w, "{},{}", self.domains[i], self.labels[i])?;
            for v in self.features.row(i) {
                write!(w, ",{:.16e}", v.as_f64())?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_csv(w))
    }

    /// Parses CSV text. Class and domain counts are inferred as one past the
    /// largest label / id, and every (domain, class) cell must be nonempty.
    pub fn parse_csv(text: &str, context: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            context: context.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        let head = lines
            .next()
            .filter(|h| !h.trim().is_empty())
            .ok_or_else(|| perr(1, "empty file".into()))?;
        let cols: Vec<&str> = head.trim().split(',').collect();
        let dim = cols.len().saturating_sub(2);
        let expected = Self::header(dim);
        if dim == 0 || head.trim() != expected {
            return Err(perr(1, format!("bad header, expected \"{expected}\"")));
        }
        let (mut feats, mut labels, mut domains) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 2 {
                return Err(perr(
                    lineno,
                    format!("expected {} fields, got {}", dim + 2, fields.len()),
                ));
            }
            let int = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| perr(lineno, format!("bad {what} {s:?}")))
            };
            domains.push(int(fields[0], "domain")?);
            labels.push(int(fields[1], "label")?);
            for s in &fields[2..] {
                let v: f64 = s
                    .parse()
                    .map_err(|_| perr(lineno, format!("bad value {s:?}")))?;
                if !v.is_finite() {
                    return Err(perr(lineno, format!("non-finite value {s:?}")));
                }
                feats.push(S::lit(v));
            }
        }
        if labels.is_empty() {
            return Err(perr(2, "no data rows".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let n_domains = domains.iter().max().map_or(0, |m| m + 1);
        let ds = Self::new(
            Tensor::new(vec![labels.len(), dim], feats)?,
            labels,
            domains,
            classes,
            n_domains,
        )?;
        ds.check_cells()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }
}

/// Style transform of one domain: `x = R (scale ⊙ p) + shift + noise · n`
/// with `n` standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Rotation `(i, j, angle)` in the plane of features `i` and `j`.
    pub rotation: Option<(usize, usize, f64)>,
    pub noise: f64,
}

impl DomainSpec {
    pub fn apply(&self, p: &[f64], noise: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = p.iter().zip(&self.scale).map(|(a, s)| a * s).collect();
        if let Some((i, j, theta)) = self.rotation {
            let (s, c) = theta.sin_cos();
            let (a, b) = (x[i], x[j]);
            x[i] = c * a - s * b;
            x[j] = s * a + c * b;
        }
        for ((v, sh), n) in x.iter_mut().zip(&self.shift).zip(noise) {
            *v += sh + self.noise * n;
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    /// Source domains; one extra target domain is generated with id
    /// `source_domains`.
    pub source_domains: usize,
    /// Samples per (domain, class) cell.
    pub per_cell: usize,
    pub dim: usize,
    /// Prototype sphere radius.
    pub separation: f64,
    /// Style magnitude of the most shifted source domain.
    pub kappa: f64,
    pub noise: f64,
    /// Target style magnitude relative to `kappa`.
    pub target_factor: f64,
    /// Additive shift per unit of style magnitude.
    pub shift_scale: f64,
    /// Log-contrast per unit of style magnitude.
    pub contrast: f64,
    /// Rotation angle (radians) per unit of style magnitude.
    pub rotation: f64,
    /// Weight of the all-ones ("brightness") direction in the common shift
    /// direction, in `[0, 1]`; the rest is a random direction.
    pub brightness: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            source_domains: 3,
            per_cell: 200,
            dim: 16,
            separation: 3.0,
            kappa: 2.0,
            noise: 1.0,
            target_factor: 1.5,
            shift_scale: 1.0,
            contrast: 0.7,
            rotation: 0.3,
            brightness: 0.0,
            seed: 0,
        }
    }
}

pub const GEN_KEYS: &[&str] = &[
    "classes",
    "source_domains",
    "per_cell",
    "dim",
    "separation",
    "kappa",
    "noise",
    "target_factor",
    "shift_scale",
    "contrast",
    "rotation",
    "brightness",
    "seed",
];

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_cell < 4 || self.dim < 4 {
            return invalid(format!(
                "need per_cell >= 4 and dim >= 4, got {} and {}",
                self.per_cell, self.dim
            ));
        }
        if self.classes < 2 || self.source_domains < 2 {
            return invalid("need at least 2 classes and 2 source domains");
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return invalid(format!("brightness must be in [0, 1], got {}", self.brightness));
        }
        if self.source_domains + 1 > crate::normbank::MAX_DOMAINS {
            return invalid("too many domains");
        }
        let reals = [
            ("separation", self.separation),
            ("kappa", self.kappa),
            ("noise", self.noise),
            ("target_factor", self.target_factor),
            ("shift_scale", self.shift_scale),
            ("contrast", self.contrast),
            ("rotation", self.rotation),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return invalid(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("classes", self.classes);
        kv.set("source_domains", self.source_domains);
        kv.set("per_cell", self.per_cell);
        kv.set("dim", self.dim);
        kv.set("separation", self.separation);
        kv.set("kappa", self.kappa);
        kv.set("noise", self.noise);
        kv.set("target_factor", self.target_factor);
        kv.set("shift_scale", self.shift_scale);
        kv.set("contrast", self.contrast);
        kv.set("rotation", self.rotation);
        kv.set("brightness", self.brightness);
        kv.set("seed", self.seed);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.parsed(stringify!($f))? {
                    self.$f = v;
                }
            )*};
        }
        take!(
            classes,
            source_domains,
            per_cell,
            dim,
            separation,
            kappa,
            noise,
            target_factor,
            shift_scale,
            contrast,
            rotation,
            brightness,
            seed
        );
        Ok(())
    }

    /// Style magnitude of domain `d` (the target is `source_domains`).
    pub fn magnitude(&self, d: usize) -> f64 {
        if d == self.source_domains {
            self.target_factor * self.kappa
        } else {
            self.kappa * (d + 1) as f64 / self.source_domains as f64
        }
    }
}

fn gaussian(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|a| *a /= norm);
    }
    v
}

/// Class prototypes on the sphere of radius `separation`, then centered so
/// their mean is zero (per-domain means then equal the domain shift).
pub fn prototypes(cfg: &GenConfig) -> Vec<Vec<f64>> {
    let mut r = rng::stream(cfg.seed, rng::PROTOTYPE_STREAM);
    let mut protos: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            unit(gaussian(&mut r, cfg.dim))
                .into_iter()
                .map(|v| v * cfg.separation)
                .collect()
        })
        .collect();
    for j in 0..cfg.dim {
        let m = protos.iter().map(|p| p[j]).sum::<f64>() / cfg.classes as f64;
        protos.iter_mut().for_each(|p| p[j] -= m);
    }
    protos
}

/// Style specs for all `source_domains + 1` domains.
///
/// Styles share one direction in style space (a common shift direction,
/// contrast sign and rotation plane) with small domain-specific
/// perturbations, so that the target extrapolates the sources.
pub fn domain_specs(cfg: &GenConfig) -> Vec<DomainSpec> {
    let mut r = rng::stream(cfg.seed, rng::STYLE_STREAM);
    let ones = 1.0 / (cfg.dim as f64).sqrt();
    let common = unit(
        unit(gaussian(&mut r, cfg.dim))
            .into_iter()
            .map(|v| cfg.brightness * ones + (1.0 - cfg.brightness) * v)
            .collect(),
    );
    let common_scale = gaussian(&mut r, cfg.dim);
    let i = r.random_range(0..cfg.dim);
    let j = (i + 1 + r.random_range(0..cfg.dim - 1)) % cfg.dim;
    (0..=cfg.source_domains)
        .map(|d| {
            let m = cfg.magnitude(d);
            let own = unit(gaussian(&mut r, cfg.dim));
            let jitter = gaussian(&mut r, cfg.dim);
            let shift = common
                .iter()
                .zip(&own)
                .map(|(c, o)| m * cfg.shift_scale * (c + 0.5 * o))
                .collect();
            let scale = common_scale
                .iter()
                .zip(&jitter)
                .map(|(c, z)| (m * cfg.contrast * (1.0 + 0.2 * c + 0.1 * z)).exp())
                .collect();
            DomainSpec {
                id: d,
                scale,
                shift,
                rotation: (m > 0.0).then_some((i, j, m * cfg.rotation)),
                noise: cfg.noise * (m * cfg.contrast).exp(),
            }
        })
        .collect()
}

/// Generates `per_cell` samples for every (domain, class) cell, rows ordered
/// by domain then class. Domain `source_domains` is the target.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset<f64>, Vec<DomainSpec>)> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let specs = domain_specs(cfg);
    let n_domains = cfg.source_domains + 1;
    let total = n_domains * cfg.classes * cfg.per_cell;
    let mut data = Vec::with_capacity(total * cfg.dim);
    let mut labels = Vec::with_capacity(total);
    let mut domains = Vec::with_capacity(total);
    for spec in &specs {
        let mut r = rng::stream(cfg.seed, rng::SAMPLE_STREAM + spec.id as u64);
        for (c, p) in protos.iter().enumerate() {
            for _ in 0..cfg.per_cell {
                let noise = gaussian(&mut r, cfg.dim);
                data.extend(spec.apply(p, &noise));
                labels.push(c);
                domains.push(spec.id);
            }
        }
    }
    let ds = Dataset::new(
        Tensor::new(vec![total, cfg.dim], data)?,
        labels,
        domains,
        cfg.classes,
        n_domains,
    )?;
    Ok((ds, specs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            per_cell: 6,
            dim: 5,
            classes: 3,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small()).unwrap().0;
        let b = generate(&small()).unwrap().0;
        let c = generate(&GenConfig { seed: 1, ..small() }).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a.features(), c.features());
        assert_eq!(a.len(), 4 * 3 * 6);
        a.check_cells().unwrap();
    }

    #[test]
    fn no_shift_means_identical_domains() {
        let cfg = GenConfig {
            kappa: 0.0,
            noise: 0.0,
            ..small()
        };
        let (ds, _) = generate(&cfg).unwrap();
        let means: Vec<Vec<f64>> = (0..4)
            .map(|d| {
                let rows = ds.rows_of_domain(d);
                (0..cfg.dim)
                    .map(|j| rows.iter().map(|&r| ds.features().row(r)[j]).sum::<f64>() / rows.len() as f64)
                    .collect()
            })
            .collect();
        for m in &means[1..] {
            for (a, b) in m.iter().zip(&means[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let (ds, _) = generate(&small()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("domain,label,f0,f1,f2,f3,f4\n"));
        assert_eq!(Dataset::<f64>::parse_csv(&text, "t").unwrap(), ds);
    }

    #[test]
    fn csv_errors() {
        let err = Dataset::<f64>::parse_csv("", "t").unwrap_err().to_string();
        assert!(err.contains("empty file"), "{err}");
        let err = Dataset::<f64>::parse_csv("domain,class,f0\n0,0,1\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("domain,label,f0"), "{err}");
        let err = Dataset::<f64>::parse_csv("domain,label,f0\n0,0,1\n0,1,x\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn lodo_split() {
        let (ds, _) = generate(&small()).unwrap();
        let (src, tgt) = ds.split_lodo(1).unwrap();
        assert_eq!(src.len() + tgt.len(), ds.len());
        assert_eq!(tgt.present_domains(), vec![1]);
        assert_eq!(src.present_domains(), vec![0, 1, 2]);
        assert_eq!(src.n_domains(), 3);
        assert!(ds.split_lodo(7).is_err());
    }

    #[test]
    fn validation_split_is_stratified() {
        let (ds, _) = generate(&small()).unwrap();
        let (src, _) = ds.split_lodo(3).unwrap();
        let (train, val) = src.split_validation(0.5, 0).unwrap();
        assert_eq!(train.len() + val.len(), src.len());
        train.check_cells().unwrap();
        val.check_cells().unwrap();
    }

    #[test]
    fn invalid_sizes() {
        assert!(generate(&GenConfig { per_cell: 3, ..small() }).is_err());
        assert!(generate(&GenConfig { dim: 3, ..small() }).is_err());
    }
}
