use super::generate::DomainDataset;
use crate::{DfaError, Result};

/// Leave-one-domain-out partition. Source samples carry contiguous domain
/// labels `0..k` in the original order; the target keeps its own labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
}

impl Split {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn target_origin(&self) -> usize {
        self.target.origin
    }

    pub fn input_dim(&self) -> usize {
        self.target
            .samples
            .first()
            .or_else(|| self.sources.iter().find_map(|d| d.samples.first()))
            .map_or(0, |s| s.x.len())
    }
}

pub fn leave_one_out(domains: &[DomainDataset], target_index: usize) -> Result<Split> {
    if target_index >= domains.len() {
        return Err(DfaError::InvalidArgument(format!(
            "target domain {target_index} out of range for {} domains",
            domains.len()
        )));
    }
    let sources = domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .enumerate()
        .map(|(new_id, (_, dom))| {
            let mut dom = dom.clone();
            for s in &mut dom.samples {
                s.d = new_id;
            }
            dom
        })
        .collect();
    Ok(Split {
        sources,
        target: domains[target_index].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate, DatasetSpec};

    fn four_domains() -> Vec<DomainDataset> {
        generate(&DatasetSpec {
            samples_per_domain: 10,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn relabels_remaining_domains_in_order() {
        let domains = four_domains();
        let split = leave_one_out(&domains, 2).unwrap();
        let origins: Vec<usize> = split.sources.iter().map(|d| d.origin).collect();
        assert_eq!(origins, vec![0, 1, 3]);
        for (new_id, dom) in split.sources.iter().enumerate() {
            assert!(dom.samples.iter().all(|s| s.d == new_id));
        }
        assert_eq!(split.target.origin, 2);
        assert_eq!(split.target, domains[2]);
    }

    #[test]
    fn every_split_covers_all_other_samples_once() {
        let domains = four_domains();
        for t in 0..domains.len() {
            let split = leave_one_out(&domains, t).unwrap();
            let mut seen: Vec<(usize, usize)> = Vec::new();
            for dom in &split.sources {
                for (i, s) in dom.samples.iter().enumerate() {
                    assert_eq!(s.x, domains[dom.origin].samples[i].x);
                    seen.push((dom.origin, i));
                }
            }
            let expect: Vec<(usize, usize)> = (0..domains.len())
                .filter(|&d| d != t)
                .flat_map(|d| (0..domains[d].len()).map(move |i| (d, i)))
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, expect);
        }
    }

    #[test]
    fn rejects_out_of_range_target() {
        assert!(leave_one_out(&four_domains(), 4).is_err());
    }
}
