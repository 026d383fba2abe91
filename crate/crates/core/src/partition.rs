//! Random domain partitions for mix-normalization.
//!
//! A draw picks a group size `C`, then peels groups of `C` domains off a
//! shuffled domain list until it is exhausted; the last group takes whatever
//! remains when fewer than `C` domains are left.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Ordered disjoint groups of domain ids covering `0..D`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    groups: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates disjointness, coverage of `0..domains` and non-emptiness.
    pub fn new(groups: Vec<Vec<usize>>, domains: usize) -> Result<Self> {
        if domains == 0 {
            return Err(Error::NoDomains);
        }
        let mut seen = vec![false; domains];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::InvalidArgument("empty partition group".into()));
            }
            for &d in g {
                if d >= domains {
                    return Err(Error::DomainOutOfRange { domain: d, domains });
                }
                if std::mem::replace(&mut seen[d], true) {
                    return Err(Error::InvalidArgument(format!(
                        "domain {d} appears in two groups"
                    )));
                }
            }
        }
        if let Some(d) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("domain {d} not covered")));
        }
        Ok(Self { groups })
    }

    /// One group holding every domain (plain batch normalization).
    pub fn single_group(domains: usize) -> Self {
        Self {
            groups: vec![(0..domains).collect()],
        }
    }

    /// Every domain on its own.
    pub fn singletons(domains: usize) -> Self {
        Self {
            groups: (0..domains).map(|d| vec![d]).collect(),
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn domains(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// `lookup[d]` is the index of the group containing domain `d`.
    pub fn group_lookup(&self) -> Vec<usize> {
        let mut lookup = vec![0; self.domains()];
        for (gi, g) in self.groups.iter().enumerate() {
            for &d in g {
                lookup[d] = gi;
            }
        }
        lookup
    }

    /// Group sizes sorted descending; the multiset key used by histograms.
    pub fn size_multiset(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.groups.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        f.write_str(&parts.join("|"))
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let groups = s
            .split('|')
            .map(|g| {
                g.split(',')
                    .map(|d| {
                        d.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Format(format!("bad domain id {d:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let domains = groups.iter().map(Vec::len).sum();
        Partition::new(groups, domains)
    }
}

/// Controls the group size `C` drawn per partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPolicy {
    domains: usize,
    max_group: usize,
    fixed_c: Option<usize>,
}

impl PartitionPolicy {
    pub fn new(domains: usize, max_group: usize, fixed_c: Option<usize>) -> Result<Self> {
        if domains == 0 {
            return Err(Error::NoDomains);
        }
        if max_group == 0 || max_group > domains {
            return Err(Error::InvalidPolicy(format!(
                "max_group {max_group} outside [1, {domains}]"
            )));
        }
        if let Some(c) = fixed_c {
            if c == 0 || c > max_group {
                return Err(Error::InvalidPolicy(format!(
                    "fixed_c {c} outside [1, {max_group}]"
                )));
            }
        }
        Ok(Self {
            domains,
            max_group,
            fixed_c,
        })
    }

    /// Group sizes drawn from `[1, D−1]`; `D = 1` degenerates to `C = 1`.
    pub fn d_minus_one(domains: usize) -> Result<Self> {
        Self::new(domains, domains.saturating_sub(1).max(1), None)
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn max_group(&self) -> usize {
        self.max_group
    }

    pub fn fixed_c(&self) -> Option<usize> {
        self.fixed_c
    }

    fn draw_c(&self, rng: &mut RngStream) -> usize {
        self.fixed_c
            .unwrap_or_else(|| rng.uniform_int(1, self.max_group))
    }
}

/// Draws one partition of `0..D` under `policy`.
pub fn sample_partition(policy: &PartitionPolicy, rng: &mut RngStream) -> Partition {
    let c = policy.draw_c(rng);
    let mut remaining: Vec<usize> = (0..policy.domains).collect();
    rng.shuffle(&mut remaining);
    let groups = remaining
        .chunks(c)
        .map(|chunk| {
            let mut g = chunk.to_vec();
            g.sort_unstable();
            g
        })
        .collect();
    Partition { groups }
}

/// Empirical frequencies of group-size multisets.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeHistogram {
    pub trials: usize,
    pub counts: BTreeMap<Vec<usize>, usize>,
}

impl SizeHistogram {
    pub fn frequency(&self, sizes: &[usize]) -> f64 {
        self.counts.get(sizes).copied().unwrap_or(0) as f64 / self.trials as f64
    }

    /// `multiset,count,frequency` rows, multiset written as `3+1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("multiset,count,frequency\n");
        for (sizes, &count) in &self.counts {
            let key: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!(
                "{},{},{:.6}\n",
                key.join("+"),
                count,
                count as f64 / self.trials as f64
            ));
        }
        out
    }
}

pub fn partition_distribution(
    policy: &PartitionPolicy,
    rng: &mut RngStream,
    trials: usize,
) -> Result<SizeHistogram> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut counts = BTreeMap::new();
    for _ in 0..trials {
        *counts
            .entry(sample_partition(policy, rng).size_multiset())
            .or_insert(0) += 1;
    }
    Ok(SizeHistogram { trials, counts })
}
