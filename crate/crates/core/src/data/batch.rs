use super::split::Split;
use crate::numerics::{Matrix, SeededRng};
use crate::{DfaError, Result};

/// Domain-balanced batch: `n` samples from each of `k` source domains,
/// ordered by domain and then by draw order. `B = n × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub per_domain: usize,
    pub num_domains: usize,
    /// `(source domain, index within that domain)` of every row.
    pub origin: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds a batch from explicit rows; checks that ids are consistent.
    pub fn from_parts(
        x: Matrix,
        labels: Vec<usize>,
        domains: Vec<usize>,
        num_domains: usize,
    ) -> Result<Self> {
        if x.rows() != labels.len() || labels.len() != domains.len() {
            return Err(DfaError::shape(
                "Batch::from_parts",
                format!("{} rows, {} labels, {} domains", x.rows(), labels.len(), domains.len()),
            ));
        }
        if let Some(&d) = domains.iter().find(|&&d| d >= num_domains) {
            return Err(DfaError::UnknownDomain {
                domain: d,
                available: num_domains,
            });
        }
        let per_domain = labels.len().checked_div(num_domains).unwrap_or(0);
        let origin = domains.iter().map(|&d| (d, 0)).collect();
        Ok(Batch {
            x,
            labels,
            domains,
            per_domain,
            num_domains,
            origin,
        })
    }

    /// Row indices belonging to domain `d`, in batch order.
    pub fn domain_rows(&self, d: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == d).collect()
    }
}

/// Draws `n` samples without replacement from every source domain.
pub fn sample_batch(split: &Split, n: usize, rng: &mut SeededRng) -> Result<Batch> {
    let mut sampler = EpochSampler::new(split, n, rng.clone())?;
    let batch = sampler.next_batch()?;
    *rng = sampler.rng;
    Ok(batch)
}

/// Epoch-wise sampler: each epoch draws a fresh permutation of every source
/// domain and hands out consecutive `n`-sized chunks of it.
#[derive(Clone, Debug)]
pub struct EpochSampler<'a> {
    split: &'a Split,
    n: usize,
    rng: SeededRng,
    pools: Vec<Vec<usize>>,
    cursor: usize,
}

impl<'a> EpochSampler<'a> {
    pub fn new(split: &'a Split, n: usize, rng: SeededRng) -> Result<Self> {
        if n == 0 {
            return Err(DfaError::InvalidArgument("batch needs n >= 1 per domain".into()));
        }
        if split.sources.is_empty() {
            return Err(DfaError::InvalidArgument("split has no source domains".into()));
        }
        let mut s = EpochSampler {
            split,
            n,
            rng,
            pools: Vec::new(),
            cursor: 0,
        };
        s.start_epoch();
        Ok(s)
    }

    /// Reshuffles every domain's pool.
    pub fn start_epoch(&mut self) {
        self.pools = self
            .split
            .sources
            .iter()
            .map(|d| {
                let mut idx: Vec<usize> = (0..d.len()).collect();
                self.rng.shuffle(&mut idx);
                idx
            })
            .collect();
        self.cursor = 0;
    }

    /// Full batches available per epoch (limited by the smallest domain).
    pub fn batches_per_epoch(&self) -> usize {
        self.split.sources.iter().map(|d| d.len()).min().unwrap_or(0) / self.n
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let n = self.n;
        for (d, pool) in self.pools.iter().enumerate() {
            let remaining = pool.len() - self.cursor.min(pool.len());
            if remaining < n {
                return Err(DfaError::PoolExhausted {
                    domain: d,
                    remaining,
                    requested: n,
                });
            }
        }
        let k = self.split.sources.len();
        let width = self.split.input_dim();
        let mut values = Vec::with_capacity(n * k * width);
        let mut labels = Vec::with_capacity(n * k);
        let mut domains = Vec::with_capacity(n * k);
        let mut origin = Vec::with_capacity(n * k);
        for (d, pool) in self.pools.iter().enumerate() {
            for &i in &pool[self.cursor..self.cursor + n] {
                let s = &self.split.sources[d].samples[i];
                values.extend_from_slice(&s.x);
                labels.push(s.y);
                domains.push(d);
                origin.push((d, i));
            }
        }
        self.cursor += n;
        Ok(Batch {
            x: Matrix::from_vec(n * k, width, values)?,
            labels,
            domains,
            per_domain: n,
            num_domains: k,
            origin,
        })
    }

    /// All full batches of one epoch, starting a fresh permutation.
    pub fn epoch(&mut self) -> Result<Vec<Batch>> {
        self.start_epoch();
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate, DatasetSpec};
    use crate::data::split::leave_one_out;

    fn split(samples: usize) -> Split {
        let domains = generate(&DatasetSpec {
            samples_per_domain: samples,
            ..DatasetSpec::default()
        })
        .unwrap();
        leave_one_out(&domains, 3).unwrap()
    }

    #[test]
    fn batch_has_n_per_domain() {
        let s = split(20);
        let b = sample_batch(&s, 2, &mut SeededRng::new(0)).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.domains, vec![0, 0, 1, 1, 2, 2]);
        for (row, &(d, i)) in b.origin.iter().enumerate() {
            assert_eq!(b.x.row(row), s.sources[d].samples[i].x.as_slice());
            assert_eq!(b.labels[row], s.sources[d].samples[i].y);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let s = split(20);
        let mut a = EpochSampler::new(&s, 4, SeededRng::new(9)).unwrap();
        let mut b = EpochSampler::new(&s, 4, SeededRng::new(9)).unwrap();
        for _ in 0..2 {
            assert_eq!(a.epoch().unwrap(), b.epoch().unwrap());
        }
    }

    #[test]
    fn epoch_union_is_each_domain_once() {
        let s = split(20);
        let mut sampler = EpochSampler::new(&s, 5, SeededRng::new(1)).unwrap();
        let batches = sampler.epoch().unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<(usize, usize)> = batches.iter().flat_map(|b| b.origin.clone()).collect();
        seen.sort_unstable();
        let expect: Vec<(usize, usize)> = (0..3).flat_map(|d| (0..20).map(move |i| (d, i))).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn exhausted_pool_is_rejected() {
        let s = split(10);
        let mut sampler = EpochSampler::new(&s, 4, SeededRng::new(1)).unwrap();
        sampler.next_batch().unwrap();
        sampler.next_batch().unwrap();
        assert!(matches!(
            sampler.next_batch(),
            Err(DfaError::PoolExhausted { remaining: 2, requested: 4, .. })
        ));
        assert!(sample_batch(&s, 11, &mut SeededRng::new(0)).is_err());
    }
}
