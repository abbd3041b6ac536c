//! Synthetic seller universes with planted seasonality, supplier-leads-retailer
//! lag, shared-owner trends and truncated histories.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_truth, TruthRecord, GRAPH_FILE, TRUTH_FILE};
use crate::error::{GaiaError, Result};
use crate::graph::{ESellerGraph, Edge, Relation, SellerNode};

/// Histories shorter than this many months count as new shops.
pub const NEW_SHOP_MONTHS: usize = 10;

/// Calendar months per year; the temporal features carry a one-hot month.
const MONTHS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_sellers: usize,
    /// Chance that a new node is created as the supplier of an existing retailer.
    pub supply_edge_prob: f64,
    /// Chance that a retailer shares an owner (and its trend) with an earlier one.
    pub owner_edge_prob: f64,
    pub lead_lag_months: usize,
    pub season_period: usize,
    pub season_amplitude: f64,
    /// Monthly trend as a fraction of the base level.
    pub trend_slope_range: [f64; 2],
    /// Noise standard deviation as a fraction of the base level.
    pub noise_sigma: f64,
    /// Weights over observed lengths `min_observed..=t_max`. When absent,
    /// `new_shop_fraction` of the mass is spread evenly below 10 months.
    pub deficiency_dist: Option<Vec<f64>>,
    pub new_shop_fraction: f64,
    pub min_observed: usize,
    pub base_gmv_range: [f64; 2],
    pub t_max: usize,
    pub horizon: usize,
    pub n_industries: usize,
    pub n_regions: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_sellers: 2000,
            supply_edge_prob: 0.5,
            owner_edge_prob: 0.2,
            lead_lag_months: 2,
            season_period: 12,
            season_amplitude: 0.3,
            trend_slope_range: [-0.01, 0.03],
            noise_sigma: 0.05,
            deficiency_dist: None,
            new_shop_fraction: 0.4,
            min_observed: 3,
            base_gmv_range: [2e3, 5e4],
            t_max: 24,
            horizon: 3,
            n_industries: 4,
            n_regions: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn d_t(&self) -> usize {
        MONTHS + 2
    }

    pub fn d_s(&self) -> usize {
        self.n_industries + self.n_regions
    }

    /// Probability of each observed length `min_observed..=t_max`.
    pub fn length_weights(&self) -> Result<Vec<f64>> {
        let span = self.t_max + 1 - self.min_observed;
        let w = match &self.deficiency_dist {
            Some(w) => {
                if w.len() != span {
                    return Err(GaiaError::Config(format!(
                        "deficiency_dist needs {span} weights (lengths {}..={})",
                        self.min_observed, self.t_max
                    )));
                }
                w.clone()
            }
            None => {
                let n_new = NEW_SHOP_MONTHS.saturating_sub(self.min_observed).min(span);
                let n_old = span - n_new;
                (0..span)
                    .map(|i| {
                        if i < n_new {
                            self.new_shop_fraction / n_new as f64
                        } else {
                            (1.0 - self.new_shop_fraction) / n_old as f64
                        }
                    })
                    .collect()
            }
        };
        let total: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(GaiaError::Config(format!(
                "deficiency weights must be nonnegative and sum to 1 (sum {total})"
            )));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GaiaError::Config(m));
        if self.n_sellers == 0 {
            return bad("n_sellers must be positive".into());
        }
        for (name, p) in [
            ("supply_edge_prob", self.supply_edge_prob),
            ("owner_edge_prob", self.owner_edge_prob),
            ("new_shop_fraction", self.new_shop_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.t_max == 0 || self.horizon == 0 {
            return bad("t_max and horizon must be positive".into());
        }
        if self.lead_lag_months >= self.t_max {
            return bad(format!(
                "lead_lag_months ({}) must be below t_max ({})",
                self.lead_lag_months, self.t_max
            ));
        }
        if self.min_observed == 0 || self.min_observed > self.t_max {
            return bad("min_observed must be in 1..=t_max".into());
        }
        if self.season_period == 0 {
            return bad("season_period must be positive".into());
        }
        let [lo, hi] = self.base_gmv_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("base_gmv_range must satisfy 0 < lo <= hi, got {lo}..{hi}"));
        }
        if self.trend_slope_range[0] > self.trend_slope_range[1] || self.noise_sigma < 0.0 {
            return bad("trend_slope_range must be ordered and noise_sigma nonnegative".into());
        }
        if self.n_industries == 0 || self.n_regions == 0 {
            return bad("n_industries and n_regions must be positive".into());
        }
        self.length_weights().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Role {
    Retailer { trend_root: usize },
    Supplier { of: usize },
}

/// Everything a node draws from its own random stream.
struct Draws {
    base: f64,
    slope: f64,
    industry: usize,
    region: usize,
    phase_jitter: f64,
    observed_len: usize,
    avg_ticket: f64,
    orders_per_customer: f64,
    gmv_noise: Vec<f64>,
    customer_noise: Vec<f64>,
    order_noise: Vec<f64>,
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn node_draws(spec: &SynthSpec, lengths: &WeightedIndex<f64>, index: usize) -> Draws {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let calendar = spec.t_max + spec.horizon;
    let [lo, hi] = spec.base_gmv_range;
    let base = (lo.ln() + (hi.ln() - lo.ln()) * rng.gen::<f64>()).exp();
    let [s_lo, s_hi] = spec.trend_slope_range;
    let slope = s_lo + (s_hi - s_lo) * rng.gen::<f64>();
    let industry = rng.gen_range(0..spec.n_industries);
    let region = rng.gen_range(0..spec.n_regions);
    let phase_jitter = rng.gen::<f64>() - 0.5;
    let observed_len = spec.min_observed + lengths.sample(&mut rng);
    let avg_ticket = rng.gen_range(50.0..200.0);
    let orders_per_customer = rng.gen_range(1.1..1.5);
    let gmv_noise = (0..calendar).map(|_| standard_normal(&mut rng)).collect();
    let customer_noise = (0..calendar).map(|_| standard_normal(&mut rng)).collect();
    let order_noise = (0..calendar).map(|_| standard_normal(&mut rng)).collect();
    Draws {
        base,
        slope,
        industry,
        region,
        phase_jitter,
        observed_len,
        avg_ticket,
        orders_per_customer,
        gmv_noise,
        customer_noise,
        order_noise,
    }
}

/// Result of [`generate`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub graph: ESellerGraph,
    pub truth: Vec<TruthRecord>,
    /// Realized GMV over the whole calendar (history then targets), per node.
    pub full_series: Vec<Vec<f64>>,
    /// Noise-free GMV over the whole calendar, per node.
    pub latent_series: Vec<Vec<f64>>,
    /// Number of values clamped to zero.
    pub clamp_events: usize,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    generate_inner(spec, false)
}

fn generate_inner(spec: &SynthSpec, zero_future: bool) -> Result<SynthOutput> {
    spec.validate()?;
    let n = spec.n_sellers;
    let lag = spec.lead_lag_months;
    let calendar = spec.t_max + spec.horizon;
    let weights = spec.length_weights()?;
    let lengths =
        WeightedIndex::new(&weights).map_err(|e| GaiaError::Config(format!("deficiency weights: {e}")))?;

    // Structure: who supplies whom and who shares an owner.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut roles = Vec::with_capacity(n);
    let mut retailers: Vec<usize> = Vec::new();
    let mut edges_ix: Vec<(usize, usize, Relation)> = Vec::new();
    for i in 0..n {
        let as_supplier = rng.gen::<f64>() < spec.supply_edge_prob;
        let owner = rng.gen::<f64>() < spec.owner_edge_prob;
        let pick = rng.gen::<f64>();
        if as_supplier && !retailers.is_empty() {
            let of = retailers[(pick * retailers.len() as f64) as usize];
            roles.push(Role::Supplier { of });
            edges_ix.push((i, of, Relation::SupplyChain));
        } else if owner && !retailers.is_empty() {
            let partner = retailers[(pick * retailers.len() as f64) as usize];
            let Role::Retailer { trend_root } = roles[partner] else { unreachable!() };
            roles.push(Role::Retailer { trend_root });
            edges_ix.push((i, partner, Relation::SameOwner));
            retailers.push(i);
        } else {
            roles.push(Role::Retailer { trend_root: i });
            retailers.push(i);
        }
    }

    let draws: Vec<Draws> = (0..n).map(|i| node_draws(spec, &lengths, i)).collect();
    let period = spec.season_period as f64;
    let industry_phase = |k: usize| k as f64 * period / spec.n_industries as f64;
    // Season/trend multiplier of a retailer at (possibly fractional) month t.
    let shape = |r: usize, t: f64| -> f64 {
        let Role::Retailer { trend_root } = roles[r] else { unreachable!() };
        let phase = industry_phase(draws[r].industry) + draws[r].phase_jitter;
        1.0 + spec.season_amplitude * (2.0 * PI * (t + phase) / period).sin() + draws[trend_root].slope * t
    };

    let mut latent_series = Vec::with_capacity(n);
    let mut full_series = Vec::with_capacity(n);
    let mut clamp_events = 0;
    let mut nodes = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let d = &draws[i];
        let (industry, latent, phase, role_name, supplies) = match roles[i] {
            Role::Retailer { .. } => {
                let latent: Vec<f64> = (0..calendar).map(|t| d.base * shape(i, t as f64)).collect();
                let phase = industry_phase(d.industry) + d.phase_jitter;
                (d.industry, latent, phase, "retailer", None)
            }
            Role::Supplier { of } => {
                let latent: Vec<f64> = (0..calendar).map(|t| d.base * shape(of, (t + lag) as f64)).collect();
                let phase = industry_phase(draws[of].industry) + draws[of].phase_jitter + lag as f64;
                (draws[of].industry, latent, phase, "supplier", Some(format!("s{of:05}")))
            }
        };
        let mut series: Vec<f64> = latent
            .iter()
            .zip(&d.gmv_noise)
            .map(|(&v, &e)| {
                let x = v + spec.noise_sigma * d.base * e;
                if x < 0.0 {
                    clamp_events += 1;
                    0.0
                } else {
                    x
                }
            })
            .collect();
        if zero_future {
            series[spec.t_max..].fill(0.0);
        }

        let start = spec.t_max - d.observed_len;
        let gmv = series[start..spec.t_max].to_vec();
        let temporal_feats = (start..spec.t_max)
            .map(|t| {
                let mut row = vec![0.0; MONTHS + 2];
                row[t % MONTHS] = 1.0;
                let customers =
                    (series[t] / d.avg_ticket * (1.0 + spec.noise_sigma * d.customer_noise[t])).max(0.0);
                let orders =
                    (customers * d.orders_per_customer * (1.0 + spec.noise_sigma * d.order_noise[t]))
                        .max(0.0);
                row[MONTHS] = customers;
                row[MONTHS + 1] = orders;
                row
            })
            .collect();
        let mut static_feats = vec![0.0; spec.d_s()];
        static_feats[industry] = 1.0;
        static_feats[spec.n_industries + d.region] = 1.0;

        let id = format!("s{i:05}");
        truth.push(TruthRecord {
            id: id.clone(),
            targets: series[spec.t_max..].to_vec(),
            role: role_name.to_string(),
            lag: if supplies.is_some() { lag } else { 0 },
            season_phase: phase,
            observed_len: d.observed_len,
            supplies,
        });
        nodes.push(SellerNode { id, gmv, temporal_feats, static_feats });
        latent_series.push(latent);
        full_series.push(series);
    }

    let edges = edges_ix
        .into_iter()
        .map(|(s, t, relation)| Edge { src: format!("s{s:05}"), dst: format!("s{t:05}"), relation })
        .collect();
    let graph = ESellerGraph::new(nodes, edges, Some(spec.t_max))?;
    Ok(SynthOutput { graph, truth, full_series, latent_series, clamp_events })
}

/// Largest residual of the best scalar fit `supplier(t) ≈ c · retailer(t + lag)`
/// over the months both series are observed. Zero noise gives ~0.
pub fn lag_fit_residual(out: &SynthOutput) -> f64 {
    let g = &out.graph;
    let t_max = g.t_max();
    let mut worst: f64 = 0.0;
    for (i, rec) in out.truth.iter().enumerate() {
        let Some(retailer) = rec.supplies.as_deref() else { continue };
        let j = g.index_of(retailer).expect("retailer exists");
        let (s_node, r_node) = (g.node(i), g.node(j));
        let s_start = t_max - s_node.observed_len();
        let r_start = t_max - r_node.observed_len();
        let pairs: Vec<(f64, f64)> = (s_start..t_max)
            .filter(|&t| t + rec.lag >= r_start && t + rec.lag < t_max)
            .map(|t| (s_node.gmv[t - s_start], r_node.gmv[t + rec.lag - r_start]))
            .collect();
        let rr: f64 = pairs.iter().map(|(_, r)| r * r).sum();
        if pairs.is_empty() || rr == 0.0 {
            continue;
        }
        let c = pairs.iter().map(|(s, r)| s * r).sum::<f64>() / rr;
        for (s, r) in pairs {
            worst = worst.max((s - c * r).abs());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub nodes: usize,
    pub supply_edges: usize,
    pub owner_edges: usize,
    pub new_shops: usize,
    pub clamp_events: usize,
    /// Observed length -> node count.
    pub history_histogram: BTreeMap<usize, usize>,
}

pub fn summarize(out: &SynthOutput) -> Summary {
    let g = &out.graph;
    let count = |rel| g.edges().iter().filter(|e| e.relation == rel).count();
    let mut history_histogram = BTreeMap::new();
    for n in g.nodes() {
        *history_histogram.entry(n.observed_len()).or_insert(0) += 1;
    }
    Summary {
        nodes: g.len(),
        supply_edges: count(Relation::SupplyChain),
        owner_edges: count(Relation::SameOwner),
        new_shops: g.nodes().iter().filter(|n| n.observed_len() < NEW_SHOP_MONTHS).count(),
        clamp_events: out.clamp_events,
        history_histogram,
    }
}

/// Writes `graph.jsonl`, `truth.jsonl` and `summary.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, out: &SynthOutput) -> Result<Summary> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| GaiaError::io(dir, e))?;
    out.graph.save(dir.join(GRAPH_FILE))?;
    write_truth(dir.join(TRUTH_FILE), &out.truth)?;
    let summary = summarize(out);
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| GaiaError::io(&path, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded split stratified by new (< 10 months) vs old shops.
///
/// Overall sizes follow the ratios with largest-remainder rounding; each
/// stratum receives its floored share plus at most one extra node per split.
pub fn split(g: &ESellerGraph, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(GaiaError::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let (new, old): (Vec<usize>, Vec<usize>) =
        (0..g.len()).partition(|&i| g.node(i).observed_len() < NEW_SHOP_MONTHS);
    let mut strata = [new, old];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }
    let sizes = [strata[0].len(), strata[1].len()];
    let counts = stratified_counts(&sizes, &ratios);

    let mut out = Splits::default();
    for (members, c) in strata.iter().zip(&counts) {
        let (a, rest) = members.split_at(c[0]);
        let (b, rest) = rest.split_at(c[1]);
        out.train.extend_from_slice(a);
        out.val.extend_from_slice(b);
        out.test.extend_from_slice(rest);
    }
    for (name, ratio, set) in
        [("train", ratios[0], &out.train), ("val", ratios[1], &out.val), ("test", ratios[2], &out.test)]
    {
        if ratio > 0.0 && set.is_empty() {
            return Err(GaiaError::EmptySplit(name));
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Per-stratum split counts whose column sums match the overall
/// largest-remainder sizes.
fn stratified_counts(sizes: &[usize], ratios: &[f64; 3]) -> Vec<[usize; 3]> {
    let n: usize = sizes.iter().sum();
    let target = largest_remainder(n, ratios);
    let mut counts: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&m| {
            let mut c = [0; 3];
            for k in 0..3 {
                c[k] = (ratios[k] * m as f64).floor() as usize;
            }
            c
        })
        .collect();
    let mut deficit: [usize; 3] =
        std::array::from_fn(|k| target[k] - counts.iter().map(|c| c[k]).sum::<usize>().min(target[k]));
    for (s, &m) in sizes.iter().enumerate() {
        let frac = |k: usize| ratios[k] * m as f64 - (ratios[k] * m as f64).floor();
        let mut order: Vec<usize> = (0..3).filter(|&k| ratios[k] > 0.0).collect();
        order.sort_by(|&a, &b| {
            (deficit[b] > 0)
                .cmp(&(deficit[a] > 0))
                .then(frac(b).partial_cmp(&frac(a)).unwrap())
                .then(a.cmp(&b))
        });
        let mut left = m - counts[s].iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[s][k] += 1;
            deficit[k] = deficit[k].saturating_sub(1);
            left -= 1;
        }
    }
    counts
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&k| ratios[k] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}
