//! Few-shot selection and federated partitioning of labeled pools.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Sample;
use crate::seed;

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

impl Shard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    #[default]
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub mode: PartitionMode,
}

fn by_class(pool: &[Sample]) -> BTreeMap<usize, Vec<&Sample>> {
    let mut classes: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in pool {
        classes.entry(s.label).or_default().push(s);
    }
    classes
}

/// Exactly `per_class` samples of every class `0..=max_label`, drawn without
/// replacement. Output is grouped by class.
pub fn few_shot_select(pool: &[Sample], per_class: usize, seed: u64) -> Result<Vec<Sample>> {
    if per_class == 0 {
        return Err(Error::invalid("per_class must be positive"));
    }
    let classes = by_class(pool);
    let num_classes = classes.keys().next_back().map_or(0, |c| c + 1);
    let mut rng = seed::derived_stream(seed, "few-shot", 0, 0);
    let mut out = Vec::with_capacity(per_class * num_classes);
    for c in 0..num_classes {
        let members = classes.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < per_class {
            return Err(Error::invalid(format!("class {c} has {} samples, need {per_class}", members.len())));
        }
        out.extend(members.choose_multiple(&mut rng, per_class).map(|s| (*s).clone()));
    }
    Ok(out)
}

/// Splits `samples` across `spec.num_clients` shards.
///
/// IID shuffles and deals round-robin. DIRICHLET draws, per class, client
/// proportions from `Dir(alpha * 1_K)` and converts them to counts with
/// largest-remainder rounding. Any shard left empty takes one sample from the
/// current largest shard.
pub fn dirichlet_partition(samples: &[Sample], spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let k = spec.num_clients;
    if k == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if samples.len() < k {
        return Err(Error::invalid(format!("{} samples cannot fill {k} shards", samples.len())));
    }
    let mut rng = seed::derived_stream(spec.seed, "partition", 0, 0);
    let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); k];

    match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<&Sample> = samples.iter().collect();
            order.shuffle(&mut rng);
            for (i, s) in order.into_iter().enumerate() {
                buckets[i % k].push(s.clone());
            }
        }
        PartitionMode::Dirichlet => {
            if !spec.alpha.is_finite() || spec.alpha <= 0.0 {
                return Err(Error::invalid(format!("alpha must be positive, got {}", spec.alpha)));
            }
            let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
            for (_, mut members) in by_class(samples) {
                members.shuffle(&mut rng);
                let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 && total.is_finite() {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    // every gamma draw underflowed; all mass to one client
                    let pick = rand::Rng::gen_range(&mut rng, 0..k);
                    props = (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
                }
                let counts = largest_remainder(&props, members.len());
                let mut rest = members.as_slice();
                for (bucket, n) in buckets.iter_mut().zip(counts) {
                    let (head, tail) = rest.split_at(n);
                    bucket.extend(head.iter().map(|s| (*s).clone()));
                    rest = tail;
                }
            }
        }
    }

    while let Some(empty) = buckets.iter().position(Vec::is_empty) {
        let largest = (0..k).fold(0, |best, i| if buckets[i].len() > buckets[best].len() { i } else { best });
        let moved = buckets[largest].pop().expect("largest shard is non-empty");
        buckets[empty].push(moved);
    }

    Ok(buckets.into_iter().enumerate().map(|(client_id, samples)| Shard { client_id, samples }).collect())
}

/// Integer counts summing to `total`, proportional to `props`. Leftover units
/// go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Maps whitespace-separated words to ids in `[0, vocab_size)` with FNV-1a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    pub vocab_size: usize,
}

impl HashTokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| (seed::fnv1a(w.as_bytes()) % self.vocab_size as u64) as u32).collect()
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    token_ids: Option<Vec<u32>>,
    text: Option<String>,
    label: Option<usize>,
}

/// Reads one JSON object per line. Blank lines are skipped. Lines with `text`
/// instead of `token_ids` need a tokenizer.
pub fn load_jsonl(path: impl AsRef<Path>, tokenizer: Option<HashTokenizer>) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format { line: line_no, message };
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let label = rec.label.ok_or_else(|| fail("missing \"label\"".into()))?;
        let token_ids = match (rec.token_ids, rec.text) {
            (Some(ids), _) => ids,
            (None, Some(text)) => match tokenizer {
                Some(t) if t.vocab_size > 0 => t.tokenize(&text),
                _ => return Err(fail("\"text\" sample but no tokenizer configured".into())),
            },
            (None, None) => return Err(fail("missing \"token_ids\" or \"text\"".into())),
        };
        if token_ids.is_empty() {
            return Err(fail("empty token sequence".into()));
        }
        out.push(Sample { token_ids, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn pool(per_class: &[usize]) -> Vec<Sample> {
        let mut out = Vec::new();
        let mut id = 0u32;
        for (c, n) in per_class.iter().enumerate() {
            for _ in 0..*n {
                out.push(Sample::new(vec![id, id + 1], c));
                id += 1;
            }
        }
        out
    }

    fn sorted(mut v: Vec<Sample>) -> Vec<Sample> {
        v.sort_by(|a, b| (a.label, &a.token_ids).cmp(&(b.label, &b.token_ids)));
        v
    }

    #[test]
    fn few_shot_counts() {
        let p = pool(&[100, 70]);
        let out = few_shot_select(&p, 40, 1).unwrap();
        assert_eq!(out.len(), 80);
        assert_eq!(out.iter().filter(|s| s.label == 0).count(), 40);
        assert_eq!(out.iter().filter(|s| s.label == 1).count(), 40);
        assert_eq!(out, few_shot_select(&p, 40, 1).unwrap());
    }

    #[test]
    fn few_shot_takes_whole_class() {
        let p = pool(&[5, 9]);
        let out = few_shot_select(&p, 5, 2).unwrap();
        let class0: Vec<_> = out.iter().filter(|s| s.label == 0).cloned().collect();
        assert_eq!(sorted(class0), sorted(p[..5].to_vec()));
    }

    #[test]
    fn few_shot_names_missing_class() {
        let mut p = pool(&[10, 10, 10]);
        p.push(Sample::new(vec![1], 4));
        let err = few_shot_select(&p, 5, 0).unwrap_err().to_string();
        assert!(err.contains("class 3"), "{err}");
    }

    #[test]
    fn iid_even_split() {
        let p = pool(&[40, 40]);
        let spec = PartitionSpec { num_clients: 10, alpha: 1.0, seed: 3, mode: PartitionMode::Iid };
        let shards = dirichlet_partition(&p, &spec).unwrap();
        assert!(shards.iter().all(|s| s.size() == 8));
    }

    #[test]
    fn too_many_clients() {
        let p = pool(&[2, 2]);
        let spec = PartitionSpec { num_clients: 5, alpha: 1.0, seed: 3, mode: PartitionMode::Dirichlet };
        assert!(matches!(dirichlet_partition(&p, &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tiny_alpha_never_leaves_empty_shards() {
        let p = pool(&[10, 10]);
        for seed in 0..20 {
            let spec = PartitionSpec { num_clients: 10, alpha: 1e-3, seed, mode: PartitionMode::Dirichlet };
            let shards = dirichlet_partition(&p, &spec).unwrap();
            assert!(shards.iter().all(|s| s.size() > 0));
            assert_eq!(shards.iter().map(Shard::size).sum::<usize>(), 20);
        }
    }

    #[test]
    fn huge_alpha_is_nearly_even() {
        let p = pool(&[100; 4]);
        for seed in 0..20 {
            let spec = PartitionSpec { num_clients: 10, alpha: 1e6, seed, mode: PartitionMode::Dirichlet };
            for shard in dirichlet_partition(&p, &spec).unwrap() {
                for c in 0..4 {
                    let n = shard.samples.iter().filter(|s| s.label == c).count() as i64;
                    assert!((n - 10).abs() <= 3, "seed {seed} client {} class {c}: {n}", shard.client_id);
                }
            }
        }
    }

    fn mean_max_class_fraction(alpha: f64) -> f64 {
        let p = pool(&[100; 4]);
        let mut total = 0.0;
        let mut n = 0.0;
        for seed in 0..20 {
            let spec = PartitionSpec { num_clients: 10, alpha, seed, mode: PartitionMode::Dirichlet };
            for shard in dirichlet_partition(&p, &spec).unwrap() {
                let max = (0..4).map(|c| shard.samples.iter().filter(|s| s.label == c).count()).max().unwrap();
                total += max as f64 / shard.size() as f64;
                n += 1.0;
            }
        }
        total / n
    }

    #[test]
    fn smaller_alpha_skews_labels_more() {
        assert!(mean_max_class_fraction(0.1) > mean_max_class_fraction(100.0));
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10), vec![1, 2, 7]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn jsonl_parsing() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"token_ids":[1,2,3],"label":0}}"#).unwrap();
        writeln!(f, r#"{{"text":"a b a","label":1}}"#).unwrap();
        let tok = HashTokenizer { vocab_size: 50 };
        let out = load_jsonl(f.path(), Some(tok)).unwrap();
        assert_eq!(out[0], Sample::new(vec![1, 2, 3], 0));
        assert_eq!(out[1].token_ids.len(), 3);
        assert_eq!(out[1].token_ids[0], out[1].token_ids[2]);
        assert!(out[1].token_ids.iter().all(|t| *t < 50));
        assert!(matches!(load_jsonl(f.path(), None), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn jsonl_empty_and_missing_label() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_jsonl(f.path(), None).unwrap().is_empty());

        let mut f = tempfile::NamedTempFile::new().unwrap();
        for _ in 0..6 {
            writeln!(f, r#"{{"token_ids":[4],"label":1}}"#).unwrap();
        }
        writeln!(f, r#"{{"token_ids":[4]}}"#).unwrap();
        match load_jsonl(f.path(), None) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn partition_is_complete_and_disjoint(
            counts in prop::collection::vec(0usize..30, 1..6),
            k in 1usize..12,
            alpha in 0.05f64..50.0,
            seed in any::<u64>(),
            iid in any::<bool>(),
        ) {
            let p = pool(&counts);
            prop_assume!(p.len() >= k);
            let mode = if iid { PartitionMode::Iid } else { PartitionMode::Dirichlet };
            let spec = PartitionSpec { num_clients: k, alpha, seed, mode };
            let shards = dirichlet_partition(&p, &spec).unwrap();
            prop_assert_eq!(shards.len(), k);
            prop_assert!(shards.iter().all(|s| s.size() > 0));
            let union: Vec<Sample> = shards.iter().flat_map(|s| s.samples.clone()).collect();
            prop_assert_eq!(sorted(union), sorted(p.clone()));
            prop_assert_eq!(&shards, &dirichlet_partition(&p, &spec).unwrap());
        }
    }
}
