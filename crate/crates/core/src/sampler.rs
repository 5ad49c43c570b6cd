//! Query strategies: adversarial uncertainty sampling (AUSDS), full-scan
//! uncertainty sampling (US) and random sampling (RM), plus the entropy
//! measures used to rank candidates.

use std::collections::HashSet;
use std::time::Instant;

use log::warn;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackConfig, AttackItem};
use crate::data::{Label, PoolState};
use crate::decoder::{margin_of, DecoderModel, Scratch};
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::knn::LatentMapper;
use crate::rng::{stream, Stream};

/// Tolerance on `Σp = 1` accepted by the entropy functions.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ausds,
    Us,
    Rm,
}

/// Which candidates are entropy-ranked in AUSDS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankScope {
    /// The union of adversarial and random candidates.
    Mixed,
    /// Only the nearest neighbors of adversarial points; no random draw.
    AdversarialOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub attack: AttackConfig,
    /// Share `p` of adversarial candidates in the mixture.
    pub mix_ratio: f64,
    /// `|Q|`.
    pub selection_size: usize,
    /// US rescans once this fraction of the pool has been labeled since the
    /// previous scan; 0 rescans every step.
    pub us_scan_interval: f64,
    pub rank_scope: RankScope,
    /// Neighbors retrieved per successful adversarial point.
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::Ausds,
            attack: AttackConfig::default(),
            mix_ratio: 0.5,
            selection_size: 32,
            us_scan_interval: 0.02,
            rank_scope: RankScope::Mixed,
            knn_k: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix ratio {} outside [0, 1]", self.mix_ratio)));
        }
        if self.selection_size == 0 {
            return Err(Error::Config("selection size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.us_scan_interval) {
            return Err(Error::Config(format!(
                "US scan interval {} outside [0, 1]",
                self.us_scan_interval
            )));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        self.attack.validate()
    }
}

/// Max entropy `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy_me(probs: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    let mut h = 0.0;
    for &p in probs {
        if !(p >= 0.0) {
            return Err(Error::Numeric(format!("invalid probability {p}")));
        }
        sum += p;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::Numeric(format!("probabilities sum to {sum}")));
    }
    Ok(h.max(0.0))
}

/// Total token entropy: the sum of per-token max entropies.
pub fn entropy_tte<P: AsRef<[f64]>>(token_probs: &[P]) -> Result<f64> {
    if token_probs.is_empty() {
        warn!("total token entropy of an empty sequence");
        return Ok(0.0);
    }
    let mut h = 0.0;
    for p in token_probs {
        h += entropy_me(p.as_ref())?;
    }
    Ok(h)
}

/// A scored candidate. `margin` is absent for sequence labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u32,
    pub entropy: f64,
    pub margin: Option<f64>,
    pub adversarial: bool,
}

/// Wall-clock per selection stage, in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub attack: u64,
    pub knn: u64,
    pub mix: u64,
    pub rank: u64,
    /// US only: the full pool scan.
    pub scan: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// `S_add` in ranking order.
    pub chosen: Vec<u32>,
    /// Ranked AUSDS candidates. US and RM leave this empty.
    pub candidates: Vec<Candidate>,
    pub adversarial_count: usize,
    pub random_count: usize,
    pub attack_successes: usize,
    /// Candidates whose entropy was evaluated.
    pub scored: usize,
    /// AUSDS fell back to pure random candidates.
    pub degraded: bool,
    /// US served this step from a previous scan.
    pub from_cache: bool,
    pub decoder_evals: u64,
    pub timings: StageTimings,
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

/// Entropy and margin of samples under the current decoder and encoder.
pub struct Scorer<'m, 's> {
    decoder: &'m DecoderModel,
    stack: &'m EncoderStack<'s>,
    mapper: Option<&'m LatentMapper>,
    scratch: Scratch,
    buf: Vec<f64>,
}

impl<'m, 's> Scorer<'m, 's> {
    /// With a fresh `mapper`, classification latents are read from it
    /// instead of being re-encoded.
    pub fn new(
        decoder: &'m DecoderModel,
        stack: &'m EncoderStack<'s>,
        mapper: Option<&'m LatentMapper>,
    ) -> Self {
        let mapper = mapper.filter(|m| m.is_fresh(stack.version()));
        Scorer {
            decoder,
            stack,
            mapper,
            scratch: decoder.scratch(),
            buf: vec![0.0; stack.dim()],
        }
    }

    pub fn score(&mut self, id: u32) -> Result<(f64, Option<f64>)> {
        if self.stack.store().is_tokens() {
            let sample = self.stack.encode_rows(id)?;
            let probs = self.decoder.predict_proba_rows(&sample.rows)?;
            return Ok((entropy_tte(&probs)?, None));
        }
        let probs = match self.mapper.and_then(|m| m.vector(id)) {
            Some(v) => self.decoder.probs_into(v, &mut self.scratch)?,
            None => {
                self.stack.encode_single_into(id, &mut self.buf)?;
                self.decoder.probs_into(&self.buf, &mut self.scratch)?
            }
        };
        let margin = (probs.len() >= 2).then(|| margin_of(probs));
        Ok((entropy_me(probs)?, margin))
    }

    pub fn candidate(&mut self, id: u32, adversarial: bool) -> Result<Candidate> {
        let (entropy, margin) = self.score(id)?;
        Ok(Candidate {
            id,
            entropy,
            margin,
            adversarial,
        })
    }
}

/// Entropy descending, then id ascending.
pub fn rank(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| b.entropy.total_cmp(&a.entropy).then(a.id.cmp(&b.id)));
}

/// Uniform draw of up to `m` unlabeled ids outside `exclude`, without
/// replacement. Cost scales with `m`, not with the pool, unless `m` is a
/// large share of what is available.
fn draw_random(
    pool: &PoolState,
    exclude: &HashSet<u32>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let t = pool.unlabeled();
    let available = t.len().saturating_sub(exclude.len());
    let m = m.min(available);
    if m == 0 {
        return Vec::new();
    }
    if exclude.is_empty() {
        return index::sample(rng, t.len(), m).iter().map(|i| t[i]).collect();
    }
    if 2 * m <= available {
        let mut taken = HashSet::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let id = t[rng.random_range(0..t.len())];
            if !exclude.contains(&id) && taken.insert(id) {
                out.push(id);
            }
        }
        return out;
    }
    let rest: Vec<u32> = t.iter().copied().filter(|id| !exclude.contains(id)).collect();
    index::sample(rng, rest.len(), m).iter().map(|i| rest[i]).collect()
}

/// Random sampling: `|Q|` ids drawn uniformly without replacement.
pub fn rm_select(pool: &PoolState, selection_size: usize, rng: &mut ChaCha8Rng) -> SelectionReport {
    let started = Instant::now();
    let chosen = draw_random(pool, &HashSet::new(), selection_size, rng);
    SelectionReport {
        random_count: chosen.len(),
        chosen,
        timings: StageTimings {
            total: micros(started),
            ..StageTimings::default()
        },
        ..SelectionReport::default()
    }
}

/// Scores every unlabeled id at the current encoder version and returns the
/// whole pool ranked.
pub fn us_scan(decoder: &DecoderModel, stack: &EncoderStack<'_>, pool: &PoolState) -> Result<Vec<Candidate>> {
    let mut scorer = Scorer::new(decoder, stack, None);
    let mut ranked = pool
        .unlabeled()
        .iter()
        .map(|&id| scorer.candidate(id, false))
        .collect::<Result<Vec<_>>>()?;
    rank(&mut ranked);
    Ok(ranked)
}

/// Full-scan uncertainty sampling: the `|Q|` most uncertain unlabeled ids.
pub fn us_select(
    decoder: &DecoderModel,
    stack: &EncoderStack<'_>,
    pool: &PoolState,
    selection_size: usize,
) -> Result<SelectionReport> {
    let started = Instant::now();
    let evals = decoder.eval_count();
    let ranked = us_scan(decoder, stack, pool)?;
    let scan = micros(started);
    Ok(SelectionReport {
        chosen: ranked.iter().take(selection_size).map(|c| c.id).collect(),
        scored: ranked.len(),
        decoder_evals: decoder.eval_count() - evals,
        timings: StageTimings {
            scan,
            total: micros(started),
            ..StageTimings::default()
        },
        ..SelectionReport::default()
    })
}

/// Adversarial uncertainty sampling over the labeled batch `batch`.
pub fn ausds_select(
    decoder: &DecoderModel,
    stack: &EncoderStack<'_>,
    mapper: &LatentMapper,
    batch: &[(u32, Label)],
    pool: &PoolState,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionReport> {
    let started = Instant::now();
    let evals = decoder.eval_count();
    let version = stack.version();
    if !mapper.is_fresh(version) {
        return Err(Error::Stale {
            built: mapper.version(),
            current: version,
        });
    }
    let p = config.mix_ratio;
    let mut report = SelectionReport::default();

    let mut adversarial: Vec<u32> = Vec::new();
    if p > 0.0 {
        let t = Instant::now();
        let samples = batch
            .iter()
            .map(|(id, _)| stack.encode_rows(*id))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<AttackItem<'_>> = batch
            .iter()
            .zip(&samples)
            .map(|((id, label), sample)| AttackItem {
                id: *id,
                sample,
                label,
            })
            .collect();
        let points = attack_batch(decoder, &items, version, &config.attack)?;
        report.timings.attack = micros(t);

        let t = Instant::now();
        let queries: Vec<&[f64]> = points
            .iter()
            .filter(|a| a.success)
            .map(|a| a.x_prime.as_slice())
            .collect();
        report.attack_successes = queries.len();
        let hits = mapper.query_knn(version, &queries, config.knn_k)?;
        let mut seen = HashSet::new();
        for id in hits.into_iter().flatten() {
            if seen.insert(id) {
                adversarial.push(id);
            }
        }
        report.timings.knn = micros(t);
    }

    let t = Instant::now();
    let exclude: HashSet<u32> = adversarial.iter().copied().collect();
    let random = if p == 0.0 || (adversarial.is_empty() && !pool.unlabeled().is_empty()) {
        if p > 0.0 {
            warn!("no adversarial candidates; falling back to random candidates");
            report.degraded = true;
        }
        adversarial.clear();
        draw_random(pool, &HashSet::new(), config.selection_size, rng)
    } else if config.rank_scope == RankScope::AdversarialOnly || p == 1.0 {
        Vec::new()
    } else {
        let m = (adversarial.len() as f64 * (1.0 - p) / p).round() as usize;
        draw_random(pool, &exclude, m, rng)
    };
    report.adversarial_count = adversarial.len();
    report.random_count = random.len();
    report.timings.mix = micros(t);

    let t = Instant::now();
    let mut scorer = Scorer::new(decoder, stack, Some(mapper));
    let mut candidates = Vec::with_capacity(adversarial.len() + random.len());
    for &id in &adversarial {
        candidates.push(scorer.candidate(id, true)?);
    }
    for &id in &random {
        candidates.push(scorer.candidate(id, false)?);
    }
    rank(&mut candidates);
    report.scored = candidates.len();
    report.chosen = candidates
        .iter()
        .take(config.selection_size)
        .map(|c| c.id)
        .collect();
    report.candidates = candidates;
    report.timings.rank = micros(t);
    report.decoder_evals = decoder.eval_count() - evals;
    report.timings.total = micros(started);
    Ok(report)
}

/// Everything a strategy may look at when selecting.
pub struct SelectInput<'a, 's> {
    pub decoder: &'a DecoderModel,
    pub stack: &'a EncoderStack<'s>,
    pub mapper: &'a LatentMapper,
    pub pool: &'a PoolState,
    /// The labeled batch `B_i` the decoder was just trained on.
    pub batch: &'a [(u32, Label)],
}

#[derive(Clone, Debug)]
struct UsCache {
    ranked: Vec<Candidate>,
    cursor: usize,
    labeled_at_scan: usize,
}

/// A configured strategy with its random stream and, for US, the ranked
/// list served between scans.
#[derive(Clone, Debug)]
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    us_cache: Option<UsCache>,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sampler {
            rng: stream(config.seed, Stream::Sampler),
            config,
            us_cache: None,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn select(&mut self, input: &SelectInput<'_, '_>) -> Result<SelectionReport> {
        match self.config.strategy {
            Strategy::Rm => Ok(rm_select(input.pool, self.config.selection_size, &mut self.rng)),
            Strategy::Ausds => ausds_select(
                input.decoder,
                input.stack,
                input.mapper,
                input.batch,
                input.pool,
                &self.config,
                &mut self.rng,
            ),
            Strategy::Us => self.us_step(input),
        }
    }

    fn us_step(&mut self, input: &SelectInput<'_, '_>) -> Result<SelectionReport> {
        let started = Instant::now();
        let evals = input.decoder.eval_count();
        let pool = input.pool;
        let labeled = pool.labeled().len();
        let interval = (self.config.us_scan_interval * pool.total() as f64).ceil() as usize;
        let q = self.config.selection_size;
        let rescan = match &self.us_cache {
            None => true,
            Some(c) => labeled - c.labeled_at_scan >= interval || c.cursor >= c.ranked.len(),
        };
        let mut report = SelectionReport::default();
        if rescan {
            let t = Instant::now();
            let ranked = us_scan(input.decoder, input.stack, pool)?;
            report.timings.scan = micros(t);
            report.scored = ranked.len();
            self.us_cache = Some(UsCache {
                ranked,
                cursor: 0,
                labeled_at_scan: labeled,
            });
        } else {
            report.from_cache = true;
        }
        let cache = self.us_cache.as_mut().expect("cache populated above");
        while report.chosen.len() < q && cache.cursor < cache.ranked.len() {
            let id = cache.ranked[cache.cursor].id;
            cache.cursor += 1;
            if pool.is_unlabeled(id) {
                report.chosen.push(id);
            }
        }
        report.decoder_evals = input.decoder.eval_count() - evals;
        report.timings.total = micros(started);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Oracle;
    use crate::decoder::Architecture;
    use crate::knn::MapperConfig;
    use crate::store::EmbeddingStore;
    use rand::SeedableRng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn me_examples() {
        assert!((entropy_me(&[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
        assert_eq!(entropy_me(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_me(&[0.2; 5]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(entropy_me(&[0.5, 0.4]).is_err());
        assert!(entropy_me(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn tte_examples() {
        let u3 = vec![vec![1.0 / 3.0; 3]];
        assert!((entropy_tte(&u3).unwrap() - 3f64.ln()).abs() < 1e-12);
        let certain = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(entropy_tte(&certain).unwrap(), 0.0);
        assert_eq!(entropy_tte::<Vec<f64>>(&[]).unwrap(), 0.0);
    }

    #[test]
    fn ranking_orders_by_entropy_then_id() {
        let mut c: Vec<Candidate> = [(5, 0.1), (2, 0.9), (9, 0.5), (1, 0.5)]
            .iter()
            .map(|&(id, entropy)| Candidate {
                id,
                entropy,
                margin: None,
                adversarial: false,
            })
            .collect();
        rank(&mut c);
        assert_eq!(c.iter().map(|c| c.id).collect::<Vec<_>>(), vec![2, 1, 9, 5]);
    }

    fn pool_with_seed(n: usize, seed_ids: &[u32], gold: &[Label]) -> PoolState {
        let seed = seed_ids.iter().map(|&i| (i, gold[i as usize].clone())).collect();
        PoolState::from_seed(n, seed).unwrap()
    }

    #[test]
    fn rm_is_deterministic_and_truncates() {
        let gold = vec![Label::Class(0); 50];
        let pool = pool_with_seed(50, &[0, 1], &gold);
        let a = rm_select(&pool, 10, &mut stream(3, Stream::Sampler));
        let b = rm_select(&pool, 10, &mut stream(3, Stream::Sampler));
        assert_eq!(a.chosen, b.chosen);
        assert_eq!(a.chosen.len(), 10);
        let all = rm_select(&pool, 100, &mut stream(3, Stream::Sampler));
        let mut ids = all.chosen.clone();
        ids.sort_unstable();
        assert_eq!(ids, (2..50).collect::<Vec<u32>>());
    }

    /// 1-D line of points; decoder boundary at x = 0.
    fn line_setup() -> (EmbeddingStore, Vec<Label>, DecoderModel) {
        let xs: Vec<f32> = (0..201).map(|i| (i as f32 - 100.0) * 0.05).collect();
        let gold = xs
            .iter()
            .map(|&x| Label::Class(u32::from(x > 0.0)))
            .collect();
        let store = EmbeddingStore::dense(1, xs).unwrap();
        // z1 - z0 = 4x.
        let dec = DecoderModel::from_params(Architecture::Linear, 1, 2, vec![-2.0, 2.0, 0.0, 0.0]).unwrap();
        (store, gold, dec)
    }

    #[test]
    fn us_picks_points_nearest_the_boundary() {
        let (store, gold, dec) = line_setup();
        let stack = EncoderStack::new(&store);
        let pool = pool_with_seed(201, &[0, 200], &gold);
        let r = us_select(&dec, &stack, &pool, 3).unwrap();
        assert_eq!(r.chosen, vec![100, 99, 101]);
        assert_eq!(r.scored, 199);
        assert_eq!(r.decoder_evals, 199);
    }

    #[test]
    fn ausds_finds_boundary_samples_with_few_evaluations() {
        let (store, gold, dec) = line_setup();
        let stack = EncoderStack::new(&store);
        let seed = [90u32, 95, 105, 110];
        let pool = pool_with_seed(201, &seed, &gold);
        let mapper = LatentMapper::build(&stack, pool.unlabeled(), &MapperConfig::default()).unwrap();
        let batch: Vec<(u32, Label)> = seed.iter().map(|&i| (i, gold[i as usize].clone())).collect();
        let config = SamplerConfig {
            mix_ratio: 1.0,
            selection_size: 2,
            attack: AttackConfig {
                fgv_line_search: true,
                ..AttackConfig::default()
            },
            ..SamplerConfig::default()
        };
        let r = ausds_select(&dec, &stack, &mapper, &batch, &pool, &config, &mut stream(0, Stream::Sampler))
            .unwrap();
        assert_eq!(r.random_count, 0);
        assert!(r.attack_successes > 0);
        assert!(r.chosen.len() <= 2);
        for c in &r.candidates {
            assert!(pool.is_unlabeled(c.id));
        }
        // Boundary neighbors rank highest among what KNN returned.
        let best = &r.candidates[0];
        assert!(r.candidates.iter().all(|c| c.entropy <= best.entropy));
        assert!(r.decoder_evals < 100, "{}", r.decoder_evals);
    }

    #[test]
    fn ausds_mix_ratio_and_degradation() {
        let (store, gold, dec) = line_setup();
        let stack = EncoderStack::new(&store);
        let seed = [90u32, 110];
        let pool = pool_with_seed(201, &seed, &gold);
        let mapper = LatentMapper::build(&stack, pool.unlabeled(), &MapperConfig::default()).unwrap();
        let batch: Vec<(u32, Label)> = seed.iter().map(|&i| (i, gold[i as usize].clone())).collect();
        let mut rng = stream(1, Stream::Sampler);
        let mut config = SamplerConfig {
            attack: AttackConfig {
                fgv_line_search: true,
                ..AttackConfig::default()
            },
            ..SamplerConfig::default()
        };
        let r = ausds_select(&dec, &stack, &mapper, &batch, &pool, &config, &mut rng).unwrap();
        assert_eq!(r.adversarial_count, r.random_count);
        // p = 0: only random candidates, |Q| of them.
        config.mix_ratio = 0.0;
        let r = ausds_select(&dec, &stack, &mapper, &batch, &pool, &config, &mut rng).unwrap();
        assert_eq!((r.adversarial_count, r.random_count), (0, 32));
        assert!(!r.degraded);
        // Attacks that cannot move fail everywhere and degrade to random.
        config.mix_ratio = 0.5;
        config.attack.fgv_lambda = 0.0;
        config.attack.fgv_line_search = false;
        let r = ausds_select(&dec, &stack, &mapper, &batch, &pool, &config, &mut rng).unwrap();
        assert!(r.degraded);
        assert_eq!(r.random_count, 32);
    }

    #[test]
    fn ausds_refuses_stale_mapper() {
        let (store, gold, dec) = line_setup();
        let mut stack = EncoderStack::new(&store);
        let pool = pool_with_seed(201, &[0], &gold);
        let mapper = LatentMapper::build(&stack, pool.unlabeled(), &MapperConfig::default()).unwrap();
        stack.set_adapter(stack.adapter().to_vec()).unwrap();
        let batch = vec![(0, gold[0].clone())];
        let err = ausds_select(
            &dec,
            &stack,
            &mapper,
            &batch,
            &pool,
            &SamplerConfig::default(),
            &mut stream(0, Stream::Sampler),
        );
        assert!(matches!(err, Err(Error::Stale { .. })));
    }

    #[test]
    fn us_serves_cached_ranking_between_scans() {
        let (store, gold, dec) = line_setup();
        let stack = EncoderStack::new(&store);
        let mut pool = pool_with_seed(201, &[0], &gold);
        let mapper = LatentMapper::build(&stack, pool.unlabeled(), &MapperConfig::default()).unwrap();
        let mut sampler = Sampler::new(SamplerConfig {
            strategy: Strategy::Us,
            selection_size: 2,
            us_scan_interval: 0.05,
            ..SamplerConfig::default()
        })
        .unwrap();
        let mut oracle = Oracle::new(&gold);
        let mut scans = 0;
        let mut picked = Vec::new();
        for _ in 0..8 {
            let input = SelectInput {
                decoder: &dec,
                stack: &stack,
                mapper: &mapper,
                pool: &pool,
                batch: &[],
            };
            let r = sampler.select(&input).unwrap();
            scans += usize::from(!r.from_cache);
            picked.extend(r.chosen.iter().copied());
            pool.commit_selection(&r.chosen, &mut oracle).unwrap();
        }
        // ceil(0.05 * 201) = 11 labels between scans, 2 per step.
        assert_eq!(scans, 2);
        assert_eq!(&picked[..4], &[100, 99, 101, 98]);
    }

    #[test]
    fn random_draw_excludes_and_is_uniform_sized() {
        let gold = vec![Label::Class(0); 40];
        let pool = pool_with_seed(40, &[], &gold);
        let exclude: HashSet<u32> = (0..30).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = draw_random(&pool, &exclude, 20, &mut rng);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (30..40).collect::<Vec<u32>>());
        let got = draw_random(&pool, &(0..5).collect(), 3, &mut rng);
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|&i| i >= 5));
    }
}
