//! Multi-domain datasets: synthetic rotated-cluster generation, stratified
//! splits, epoch-based minibatching, trajectory sampling and the binary
//! dataset file format.
//!
//! File layout (all integers in ASCII header lines are decimal):
//!
//! ```text
//! SEQDG1 <N> <d> <K>\n
//! DOM <id> <n>\n  followed by n records of d little-endian f64 + one little-endian u32 label
//! ... repeated for each of the N domains
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Batch;

const MAGIC: &str = "SEQDG1";

/// Radius of the circle the class-cluster centres sit on.
pub const CLUSTER_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub id: usize,
    /// `n x d`
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn new(id: usize, features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "domain {id}: {} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFiniteInput(format!("domain {id} features")));
        }
        Ok(Self {
            id,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order, as a new domain with the same id.
    pub fn subset(&self, indices: &[usize]) -> Domain {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row_slice(i));
        }
        Domain {
            id: self.id,
            features: Tensor::new(indices.len(), d, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Whole domain as one batch tagged with this domain's id.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())?.with_domain_ids(vec![self.id; self.len()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    pub domains: Vec<Domain>,
    pub dim: usize,
    pub classes: usize,
}

impl DomainSet {
    /// Checks homogeneity: shared feature width, labels in range, every class present.
    pub fn new(domains: Vec<Domain>, dim: usize, classes: usize) -> Result<Self> {
        if domains.len() < 2 {
            return Err(Error::InvalidArgument("a domain set needs at least two domains".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        for dom in &domains {
            if dom.dim() != dim {
                return Err(Error::Shape(format!(
                    "domain {} has width {}, expected {dim}",
                    dom.id,
                    dom.dim()
                )));
            }
            if let Some(bad) = dom.labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Shape(format!("domain {}: label {bad} >= {classes}", dom.id)));
            }
            if let Some(missing) = dom.class_counts(classes).iter().position(|&c| c == 0) {
                return Err(Error::InvalidArgument(format!(
                    "domain {}: class {missing} has no samples",
                    dom.id
                )));
            }
        }
        Ok(Self {
            domains,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(Domain::len).sum()
    }

    /// The on-disk encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_domainset(self, &mut out).expect("writing to a Vec");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_domainset(&bytes)
    }
}

/// Rotated Gaussian clusters on the unit circle.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedClusters {
    pub num_domains: usize,
    pub classes: usize,
    pub n_per_domain: usize,
    pub angle_step_deg: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Generates `num_domains` 2-D domains. Class `c` of domain `i` is an
/// isotropic Gaussian centred at angle `360 c / K + i * angle_step` on the
/// unit circle. Each domain draws its samples from its own stream derived
/// from `(seed, i)`, so `angle_step = 0` gives identically distributed
/// domains.
pub fn synth_rotated(cfg: &RotatedClusters) -> Result<DomainSet> {
    if cfg.num_domains < 2 || cfg.classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 domains and 2 classes".into()));
    }
    if cfg.noise_sd.is_nan() || cfg.noise_sd <= 0.0 {
        return Err(Error::InvalidArgument("noise_sd must be positive".into()));
    }
    if cfg.n_per_domain < cfg.classes {
        return Err(Error::InvalidArgument("fewer samples than classes per domain".into()));
    }
    let separation = 360.0 / cfg.classes as f64;
    if cfg.angle_step_deg.abs() * cfg.num_domains as f64 >= separation {
        return Err(Error::InvalidArgument(format!(
            "angle_step * num_domains = {} must stay below 360/K = {separation}",
            cfg.angle_step_deg.abs() * cfg.num_domains as f64
        )));
    }
    let normal = Normal::new(0.0, cfg.noise_sd)
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut domains = Vec::with_capacity(cfg.num_domains);
    for i in 0..cfg.num_domains {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let base = cfg.n_per_domain / cfg.classes;
        let extra = cfg.n_per_domain % cfg.classes;
        let mut labels: Vec<usize> = (0..cfg.classes)
            .flat_map(|c| std::iter::repeat_n(c, base + usize::from(c < extra)))
            .collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(2 * labels.len());
        for &c in &labels {
            let angle = (separation * c as f64 + cfg.angle_step_deg * i as f64).to_radians();
            data.push(CLUSTER_RADIUS * angle.cos() + normal.sample(&mut rng));
            data.push(CLUSTER_RADIUS * angle.sin() + normal.sample(&mut rng));
        }
        domains.push(Domain::new(i, Tensor::new(labels.len(), 2, data), labels)?);
    }
    DomainSet::new(domains, 2, cfg.classes)
}

/// Class-stratified split: within each class, `round(frac * count)` samples
/// (clamped so both sides keep at least one) go to the first part. Index lists
/// come back sorted.
pub fn split_indices(dom: &Domain, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument("train_frac must lie in (0, 1)".into()));
    }
    let classes = dom.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(dom.id as u64);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..dom.len()).filter(|&i| dom.labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "domain {}: class {c} has fewer than 2 samples",
                dom.id
            )));
        }
        members.shuffle(&mut rng);
        let k = ((train_frac * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(dom: &Domain, train_frac: f64, seed: u64) -> Result<(Domain, Domain)> {
    let (a, b) = split_indices(dom, train_frac, seed)?;
    Ok((dom.subset(&a), dom.subset(&b)))
}

/// Draws minibatches from one domain without replacement within an epoch,
/// reshuffling when the epoch is exhausted. A batch may straddle two epochs.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            // forces a shuffle on first use
            cursor: n,
        }
    }

    /// Next `size` sample indices.
    pub fn next_indices<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, dom: &Domain, size: usize, rng: &mut R) -> Result<Batch> {
        if size == 0 || size > dom.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {size} invalid for domain {} with {} samples",
                dom.id,
                dom.len()
            )));
        }
        let idx = self.next_indices(size, rng);
        dom.subset(&idx).as_batch()
    }
}

/// One sampled ordering of domain positions (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    pub order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        self.order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    }
}

/// Uniform random ordering of `0..n` (Fisher-Yates).
pub fn sample_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Permutation> {
    if n < 2 {
        return Err(Error::InvalidArgument("permutation needs n >= 2".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(Permutation { order })
}

fn write_domainset(set: &DomainSet, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{MAGIC} {} {} {}", set.len(), set.dim, set.classes)?;
    for dom in &set.domains {
        writeln!(out, "DOM {} {}", dom.id, dom.len())?;
        for r in 0..dom.len() {
            for v in dom.features.row_slice(r) {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&(dom.labels[r] as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse(format!("unterminated header line at byte {}", self.pos)))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Parse(format!("non-ASCII header at byte {}", self.pos)))?;
        self.pos += end + 1;
        Ok(line)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut src = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::Parse(format!("truncated record at byte {}", self.pos)))?;
        src.read_exact(&mut buf).expect("length checked");
        self.pos += N;
        Ok(buf)
    }
}

fn parse_fields<const N: usize>(line: &str, tag: &str) -> Result<[usize; N]> {
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(tag) {
        return Err(Error::Parse(format!("expected `{tag}` line, found `{line}`")));
    }
    let mut out = [0usize; N];
    for slot in out.iter_mut() {
        *slot = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("too few fields in `{line}`")))?
            .parse()
            .map_err(|_| Error::Parse(format!("bad integer in `{line}`")))?;
    }
    if parts.next().is_some() {
        return Err(Error::Parse(format!("trailing fields in `{line}`")));
    }
    Ok(out)
}

pub fn parse_domainset(bytes: &[u8]) -> Result<DomainSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let [n_domains, dim, classes] = parse_fields::<3>(cur.line()?, MAGIC)?;
    let mut domains = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        let [id, n] = parse_fields::<2>(cur.line()?, "DOM")?;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..dim {
                data.push(f64::from_le_bytes(cur.take::<8>()?));
            }
            let label = u32::from_le_bytes(cur.take::<4>()?) as usize;
            if label >= classes {
                return Err(Error::Parse(format!("domain {id}: label {label} >= {classes}")));
            }
            labels.push(label);
        }
        domains.push(Domain::new(id, Tensor::new(n, dim, data), labels)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    DomainSet::new(domains, dim, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(angle: f64) -> RotatedClusters {
        RotatedClusters {
            num_domains: 4,
            classes: 3,
            n_per_domain: 300,
            angle_step_deg: angle,
            noise_sd: 0.3,
            seed: 42,
        }
    }

    #[test]
    fn balanced_classes() {
        let set = synth_rotated(&cfg(25.0)).unwrap();
        for dom in &set.domains {
            assert_eq!(dom.class_counts(3), vec![100, 100, 100]);
        }
    }

    #[test]
    fn rotation_that_aliases_classes_is_rejected() {
        let mut c = cfg(30.0);
        assert!(synth_rotated(&c).is_err());
        c.angle_step_deg = 29.9;
        assert!(synth_rotated(&c).is_ok());
    }

    #[test]
    fn zero_rotation_gives_matching_class_means() {
        let set = synth_rotated(&RotatedClusters {
            n_per_domain: 3000,
            ..cfg(0.0)
        })
        .unwrap();
        let mean = |dom: &Domain, c: usize, axis: usize| {
            let rows: Vec<usize> = (0..dom.len()).filter(|&i| dom.labels[i] == c).collect();
            rows.iter().map(|&i| dom.features.get(i, axis)).sum::<f64>() / rows.len() as f64
        };
        // standard error of each mean is 0.3 / sqrt(1000) ~ 0.0095
        for c in 0..3 {
            for axis in 0..2 {
                let m0 = mean(&set.domains[0], c, axis);
                for dom in &set.domains[1..] {
                    assert!((mean(dom, c, axis) - m0).abs() < 0.06);
                }
            }
        }
    }

    #[test]
    fn split_sizes_follow_fraction() {
        let set = synth_rotated(&RotatedClusters {
            n_per_domain: 100,
            classes: 2,
            ..cfg(10.0)
        })
        .unwrap();
        let (a, b) = split(&set.domains[0], 0.7, 1).unwrap();
        assert_eq!((a.len(), b.len()), (70, 30));
    }

    #[test]
    fn split_is_stratified_per_class() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let dom = Domain::new(0, Tensor::zeros(30, 2), labels).unwrap();
        let (a, b) = split(&dom, 0.7, 3).unwrap();
        assert_eq!(a.class_counts(3), vec![7, 7, 7]);
        assert_eq!(b.class_counts(3), vec![3, 3, 3]);
    }

    #[test]
    fn split_partitions_indices() {
        let set = synth_rotated(&cfg(5.0)).unwrap();
        let (a, b) = split_indices(&set.domains[1], 0.7, 9).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!(split_indices(&set.domains[1], 0.7, 9).unwrap(), (a, b));
    }

    #[test]
    fn split_rejects_singleton_class_and_bad_fraction() {
        let dom = Domain::new(0, Tensor::zeros(3, 1), vec![0, 0, 1]).unwrap();
        assert!(split(&dom, 0.5, 0).is_err());
        let dom = Domain::new(0, Tensor::zeros(4, 1), vec![0, 0, 1, 1]).unwrap();
        assert!(split(&dom, 1.0, 0).is_err());
        assert!(split(&dom, 0.0, 0).is_err());
    }

    #[test]
    fn full_size_batch_is_a_permutation() {
        let set = synth_rotated(&cfg(5.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = MinibatchSampler::new(300);
        let mut idx = s.next_indices(300, &mut rng);
        idx.sort_unstable();
        assert_eq!(idx, (0..300).collect::<Vec<_>>());
        assert_eq!(s.next_batch(&set.domains[0], 300, &mut rng).unwrap().len(), 300);
    }

    #[test]
    fn two_epochs_cover_each_index_twice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = MinibatchSampler::new(50);
        let mut counts = vec![0; 50];
        for _ in 0..10 {
            for i in s.next_indices(10, &mut rng) {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 2));
    }

    #[test]
    fn oversized_batch_is_an_error() {
        let set = synth_rotated(&cfg(5.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MinibatchSampler::new(300).next_batch(&set.domains[0], 301, &mut rng).is_err());
    }

    #[test]
    fn permutation_is_reproducible_bijection() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = sample_permutation(5, &mut a).unwrap();
            assert!(p.is_bijection());
            assert_eq!(p, sample_permutation(5, &mut b).unwrap());
        }
        assert!(sample_permutation(1, &mut a).is_err());
    }

    #[test]
    fn two_domain_orders_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let swapped = (0..1000)
            .filter(|_| sample_permutation(2, &mut rng).unwrap().order == vec![1, 0])
            .count();
        assert!((450..=550).contains(&swapped), "{swapped}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let set = synth_rotated(&cfg(20.0)).unwrap();
        let mut buf = Vec::new();
        write_domainset(&set, &mut buf).unwrap();
        assert_eq!(parse_domainset(&buf).unwrap(), set);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let set = synth_rotated(&cfg(20.0)).unwrap();
        let mut buf = Vec::new();
        write_domainset(&set, &mut buf).unwrap();
        for cut in [3, 20, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(parse_domainset(&buf[..cut]), Err(Error::Parse(_))), "cut {cut}");
        }
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(matches!(parse_domainset(b"SEQDG2 2 2 2\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_domainset(b"SEQDG1 2 x 2\n"), Err(Error::Parse(_))));
    }
}
