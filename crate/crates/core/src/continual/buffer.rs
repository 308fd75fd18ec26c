//! Fixed-capacity replay memory.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{decode_features, encode_features, FeatureMap, Label};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferStrategy {
    /// Equal quota per finished task, filled with a uniform random subset.
    #[default]
    FixedRandom,
    /// Classic reservoir sampling over every sample seen.
    Reservoir,
    /// Per-class FIFO queues kept at equal size.
    RingBuffer,
    /// Per task and class, the samples nearest the class mean embedding.
    MeanOfFeature,
}

impl BufferStrategy {
    pub fn needs_embedder(self) -> bool {
        self == BufferStrategy::MeanOfFeature
    }
}

/// Maps a batch of samples to one feature vector each.
pub type Embedder<'a> = dyn Fn(&[&FeatureMap]) -> Result<Vec<Vec<f64>>> + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BufferState {
    capacity: usize,
    strategy: BufferStrategy,
    seen: u64,
    tasks: Vec<u32>,
    #[serde(default)]
    fifo: [Vec<usize>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    strategy: BufferStrategy,
    items: Vec<FeatureMap>,
    /// Samples offered so far (reservoir bookkeeping).
    seen: u64,
    /// Ring-buffer insertion order per class, as indices into `items`.
    fifo: [VecDeque<usize>; 2],
    /// Finished tasks in arrival order.
    tasks: Vec<u32>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, strategy: BufferStrategy) -> Self {
        Self {
            capacity,
            strategy,
            items: Vec::new(),
            seen: 0,
            fifo: [VecDeque::new(), VecDeque::new()],
            tasks: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> BufferStrategy {
        self.strategy
    }

    pub fn items(&self) -> &[FeatureMap] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// `[spoof, bona fide]` item counts.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for m in &self.items {
            c[m.label.index()] += 1;
        }
        c
    }

    /// Offers one sample to a streaming strategy (reservoir or ring buffer).
    pub fn observe<R: Rng + ?Sized>(&mut self, item: FeatureMap, rng: &mut R) -> Result<()> {
        self.seen += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        match self.strategy {
            BufferStrategy::Reservoir => {
                if self.items.len() < self.capacity {
                    self.items.push(item);
                } else {
                    let j = rng.random_range(0..self.seen);
                    if (j as usize) < self.capacity {
                        self.items[j as usize] = item;
                    }
                }
            }
            BufferStrategy::RingBuffer => self.ring_push(item),
            other => {
                return Err(Error::Invalid(format!(
                    "{other:?} fills at task boundaries; use insert_task"
                )));
            }
        }
        Ok(())
    }

    fn ring_push(&mut self, item: FeatureMap) {
        let c = item.label.index();
        let counts = [self.fifo[0].len(), self.fifo[1].len()];
        if self.items.len() < self.capacity && counts[c] <= counts[1 - c] {
            self.fifo[c].push_back(self.items.len());
            self.items.push(item);
            return;
        }
        // overwrite the oldest item of this class, or of the other class
        // when this class holds nothing (capacity 1)
        let victim_class = if counts[c] > 0 { c } else { 1 - c };
        let slot = self.fifo[victim_class].pop_front().expect("buffer is full");
        self.items[slot] = item;
        self.fifo[c].push_back(slot);
    }

    /// Adds a finished task's training data.
    pub fn insert_task<R: Rng + ?Sized>(
        &mut self,
        task_id: u32,
        samples: &[FeatureMap],
        rng: &mut R,
        embedder: Option<&Embedder<'_>>,
    ) -> Result<()> {
        if self.tasks.contains(&task_id) {
            return Err(Error::Invalid(format!(
                "task {task_id} already inserted into the buffer"
            )));
        }
        if let Some(m) = samples.iter().find(|m| m.task_id != task_id) {
            return Err(Error::Invalid(format!(
                "sample from task {} offered as part of task {task_id}",
                m.task_id
            )));
        }
        match self.strategy {
            BufferStrategy::Reservoir => {
                self.tasks.push(task_id);
                for s in samples {
                    self.observe(s.clone(), rng)?;
                }
            }
            BufferStrategy::RingBuffer => {
                self.tasks.push(task_id);
                for i in index::sample(rng, samples.len(), samples.len()) {
                    self.observe(samples[i].clone(), rng)?;
                }
            }
            BufferStrategy::FixedRandom => {
                self.seen += samples.len() as u64;
                self.tasks.push(task_id);
                let quotas = self.quotas();
                let new_quota = *quotas.last().expect("one task");
                let mut kept = Vec::with_capacity(self.capacity);
                for (t, &q) in self.tasks[..self.tasks.len() - 1].iter().zip(&quotas) {
                    let own: Vec<FeatureMap> = self.items.iter().filter(|m| m.task_id == *t).cloned().collect();
                    // a uniform subset of a uniform subset is uniform
                    let n = q.min(own.len());
                    let mut idx = index::sample(rng, own.len(), n).into_vec();
                    idx.sort_unstable();
                    kept.extend(idx.into_iter().map(|i| own[i].clone()));
                }
                let n = new_quota.min(samples.len());
                let mut idx = index::sample(rng, samples.len(), n).into_vec();
                idx.sort_unstable();
                kept.extend(idx.into_iter().map(|i| samples[i].clone()));
                self.items = kept;
            }
            BufferStrategy::MeanOfFeature => {
                let embed = embedder
                    .ok_or_else(|| Error::Invalid("mean-of-feature buffer needs an embedding function".into()))?;
                self.seen += samples.len() as u64;
                self.tasks.push(task_id);
                let quotas = self.quotas();
                // items are stored per task, per class, closest first, so
                // shrinking an old task's share keeps its closest samples
                let mut kept = Vec::with_capacity(self.capacity);
                for (t, &q) in self.tasks[..self.tasks.len() - 1].iter().zip(&quotas) {
                    let own: Vec<&FeatureMap> = self.items.iter().filter(|m| m.task_id == *t).collect();
                    kept.extend(take_per_class(&own, q).into_iter().cloned());
                }
                let ranked = rank_by_class_mean(samples, embed)?;
                let refs: Vec<&FeatureMap> = ranked.iter().collect();
                kept.extend(
                    take_per_class(&refs, *quotas.last().expect("one task"))
                        .into_iter()
                        .cloned(),
                );
                self.items = kept;
            }
        }
        debug_assert!(self.items.len() <= self.capacity);
        Ok(())
    }

    /// Equal share per finished task; the remainder goes to the earliest tasks.
    fn quotas(&self) -> Vec<usize> {
        let t = self.tasks.len();
        let base = self.capacity / t;
        let extra = self.capacity % t;
        (0..t).map(|i| base + usize::from(i < extra)).collect()
    }

    /// `n` uniform draws: without replacement when `n <= len`, with
    /// replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&FeatureMap>> {
        if self.items.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty buffer".into()));
        }
        if n <= self.items.len() {
            Ok(index::sample(rng, self.items.len(), n)
                .into_iter()
                .map(|i| &self.items[i])
                .collect())
        } else {
            Ok((0..n)
                .map(|_| &self.items[rng.random_range(0..self.items.len())])
                .collect())
        }
    }

    /// Writes the items as a feature file plus a JSON state sidecar
    /// (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_features(&self.items))?;
        let state = BufferState {
            capacity: self.capacity,
            strategy: self.strategy,
            seen: self.seen,
            tasks: self.tasks.clone(),
            fifo: self.fifo.clone().map(Vec::from),
        };
        fs::write(sidecar(path), serde_json::to_vec_pretty(&state)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: BufferState = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let items = decode_features(&fs::read(path)?)?;
        if items.len() > state.capacity {
            return Err(Error::Format(format!(
                "buffer file holds {} items, capacity is {}",
                items.len(),
                state.capacity
            )));
        }
        let fifo = state.fifo.map(VecDeque::from);
        let listed = fifo[0].len() + fifo[1].len();
        if state.strategy == BufferStrategy::RingBuffer
            && (listed != items.len() || fifo.iter().flatten().any(|&i| i >= items.len()))
        {
            return Err(Error::Format(
                "ring-buffer order does not match the stored items".into(),
            ));
        }
        Ok(Self {
            capacity: state.capacity,
            strategy: state.strategy,
            items,
            seen: state.seen,
            fifo,
            tasks: state.tasks,
        })
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Up to `quota` items split evenly across classes (spoof takes the odd one),
/// unused share passing to the other class; input order is preserved within
/// each class.
fn take_per_class<'a>(items: &[&'a FeatureMap], quota: usize) -> Vec<&'a FeatureMap> {
    let by_class: [Vec<&FeatureMap>; 2] =
        [Label::Spoof, Label::Bonafide].map(|l| items.iter().copied().filter(|m| m.label == l).collect());
    let half = [quota.div_ceil(2), quota / 2];
    let mut take = [half[0].min(by_class[0].len()), half[1].min(by_class[1].len())];
    let mut spare = quota - take[0] - take[1];
    for c in 0..2 {
        let more = (by_class[c].len() - take[c]).min(spare);
        take[c] += more;
        spare -= more;
    }
    by_class
        .iter()
        .zip(take)
        .flat_map(|(v, n)| v[..n].iter().copied())
        .collect()
}

/// Samples reordered per class by L2 distance of their embedding to the class
/// mean embedding, nearest first (ties keep input order).
fn rank_by_class_mean(samples: &[FeatureMap], embed: &Embedder<'_>) -> Result<Vec<FeatureMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for label in [Label::Spoof, Label::Bonafide] {
        let members: Vec<&FeatureMap> = samples.iter().filter(|m| m.label == label).collect();
        if members.is_empty() {
            continue;
        }
        let emb = embed(&members)?;
        if emb.len() != members.len() {
            return Err(Error::Invalid(format!(
                "embedder returned {} vectors for {} samples",
                emb.len(),
                members.len()
            )));
        }
        let d = emb[0].len();
        let mut mean = vec![0.0; d];
        for e in &emb {
            for (a, v) in mean.iter_mut().zip(e) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= emb.len() as f64);
        let mut order: Vec<(f64, usize)> = emb
            .iter()
            .enumerate()
            .map(|(i, e)| (e.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(order.into_iter().map(|(_, i)| members[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(task: u32, label: Label, v: f64) -> FeatureMap {
        FeatureMap {
            frames: 1,
            n_coeffs: 1,
            values: vec![v],
            label,
            task_id: task,
        }
    }

    fn task(task: u32, n: usize) -> Vec<FeatureMap> {
        (0..n)
            .map(|i| item(task, if i % 2 == 0 { Label::Spoof } else { Label::Bonafide }, i as f64))
            .collect()
    }

    fn embed_values(ms: &[&FeatureMap]) -> Result<Vec<Vec<f64>>> {
        Ok(ms.iter().map(|m| m.values.clone()).collect())
    }

    #[test]
    fn every_strategy_caps_at_capacity() {
        for s in [
            BufferStrategy::FixedRandom,
            BufferStrategy::Reservoir,
            BufferStrategy::RingBuffer,
            BufferStrategy::MeanOfFeature,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut b = MemoryBuffer::new(500, s);
            for t in 1..=3 {
                b.insert_task(t, &task(t, 500), &mut rng, Some(&embed_values)).unwrap();
            }
            assert_eq!(b.len(), 500, "{s:?}");
        }
    }

    #[test]
    fn fixed_random_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = MemoryBuffer::new(10, BufferStrategy::FixedRandom);
        b.insert_task(1, &task(1, 50), &mut rng, None).unwrap();
        assert_eq!(b.len(), 10);
        b.insert_task(2, &task(2, 50), &mut rng, None).unwrap();
        b.insert_task(3, &task(3, 50), &mut rng, None).unwrap();
        let per: Vec<usize> = (1..=3)
            .map(|t| b.items().iter().filter(|m| m.task_id == t).count())
            .collect();
        assert_eq!(per, vec![4, 3, 3]);
    }

    #[test]
    fn reservoir_keeps_short_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = MemoryBuffer::new(100, BufferStrategy::Reservoir);
        let data = task(1, 40);
        b.insert_task(1, &data, &mut rng, None).unwrap();
        assert_eq!(b.items(), &data[..]);
    }

    #[test]
    fn ring_buffer_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = MemoryBuffer::new(7, BufferStrategy::RingBuffer);
        for i in 0..200 {
            let label = if rng.random_bool(0.8) {
                Label::Spoof
            } else {
                Label::Bonafide
            };
            b.observe(item(1, label, i as f64), &mut rng).unwrap();
            let [s, bf] = b.class_counts();
            assert!(s.abs_diff(bf) <= 1);
            assert!(b.len() <= 7);
        }
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = MemoryBuffer::new(2, BufferStrategy::RingBuffer);
        for v in 0..4 {
            b.observe(item(1, Label::Spoof, v as f64), &mut rng).unwrap();
        }
        b.observe(item(1, Label::Bonafide, 10.0), &mut rng).unwrap();
        let mut vals: Vec<f64> = b.items().iter().map(|m| m.values[0]).collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![3.0, 10.0]);
    }

    #[test]
    fn mean_of_feature_picks_central_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = MemoryBuffer::new(2, BufferStrategy::MeanOfFeature);
        let data = vec![
            item(1, Label::Spoof, 0.0),
            item(1, Label::Spoof, 4.0),
            item(1, Label::Spoof, 5.0),
            item(1, Label::Bonafide, -3.0),
            item(1, Label::Bonafide, 3.0),
            item(1, Label::Bonafide, 0.5),
        ];
        b.insert_task(1, &data, &mut rng, Some(&embed_values)).unwrap();
        let vals: Vec<f64> = b.items().iter().map(|m| m.values[0]).collect();
        // spoof mean 3 → 4.0; bona fide mean 1/6 → 0.5
        assert_eq!(vals, vec![4.0, 0.5]);
        assert!(MemoryBuffer::new(2, BufferStrategy::MeanOfFeature)
            .insert_task(1, &data, &mut rng, None)
            .is_err());
    }

    #[test]
    fn take_per_class_redistributes() {
        let spoof: Vec<FeatureMap> = (0..5).map(|i| item(1, Label::Spoof, i as f64)).collect();
        let bona = [item(1, Label::Bonafide, 9.0)];
        let refs: Vec<&FeatureMap> = spoof.iter().chain(&bona).collect();
        let got = take_per_class(&refs, 4);
        assert_eq!(got.len(), 4);
        assert_eq!(got.iter().filter(|m| m.label == Label::Bonafide).count(), 1);
        assert_eq!(take_per_class(&refs, 10).len(), 6);
    }

    #[test]
    fn sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = MemoryBuffer::new(10, BufferStrategy::Reservoir);
        assert!(b.sample(1, &mut rng).is_err());
        b.insert_task(1, &task(1, 10), &mut rng, None).unwrap();
        let mut all: Vec<f64> = b.sample(10, &mut rng).unwrap().iter().map(|m| m.values[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(b.sample(25, &mut rng).unwrap().len(), 25);
        let a: Vec<f64> = b
            .sample(5, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .iter()
            .map(|m| m.values[0])
            .collect();
        let c: Vec<f64> = b
            .sample(5, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .iter()
            .map(|m| m.values[0])
            .collect();
        assert_eq!(a, c);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = MemoryBuffer::new(6, BufferStrategy::RingBuffer);
        b.insert_task(1, &task(1, 9), &mut rng, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.feat");
        b.save(&path).unwrap();
        let back = MemoryBuffer::load(&path).unwrap();
        assert_eq!(back.items(), b.items());
        assert_eq!(back.seen(), b.seen());
        assert_eq!(back, b);
    }
}
