//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (outside the test harness capture) and then asserts.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use craft_core::clustering::{assign_nearest, KMeansModel};
use craft_core::corpus_io::save_selection;
use craft_core::pipeline::{self, ClusterState, Method, PipelineConfig, PipelineInputs, PoolAssignment};
use craft_core::selector::{
    allocate_budget, brute_force_oracle, select_craft, select_joint_ablation, select_random,
};
use craft_core::stats::{
    bucket_loss, centroid_distances, discrete_loss, discretized_kl, estimate_distribution,
    CentroidDistanceMatrix, DEFAULT_KL_SMOOTHING,
};
use craft_core::synthgen::{
    conditional_concentration, emit_scatter, generate, Generator, Side, Split, SyntheticConfig,
    SyntheticData,
};
use craft_core::vectorizer::{fit_tfidf, transform_tfidf, DEFAULT_MAX_VOCAB};
use craft_core::CraftError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Heavy criteria run one at a time so their timings do not interfere.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance criterion {criterion}: {verdict} ({detail})");
}

fn random_simplex(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn line_distances(coords: &[(f64, f64)]) -> CentroidDistanceMatrix {
    let m = coords.len();
    let mut v = vec![0.0; m * m];
    for j in 0..m {
        for l in 0..m {
            v[j * m + l] = ((coords[j].0 - coords[l].0).powi(2) + (coords[j].1 - coords[l].1).powi(2)).sqrt();
        }
    }
    CentroidDistanceMatrix::from_values(m, v).unwrap()
}

// 1. Oracle optimality on tiny instances.
#[test]
fn criterion_1_oracle_optimality() {
    const INSTANCES: usize = 200;
    const TIME_LIMIT: Duration = Duration::from_secs(10);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut matched = 0;
    let mut done = 0;
    let mut mismatches = Vec::new();
    while done < INSTANCES {
        let m_s = rng.random_range(1..=3);
        let m_t = rng.random_range(1..=3);
        let n_val = rng.random_range(1..=12);
        let n_pool = rng.random_range(1..=20);
        let k = rng.random_range(1..=6usize.min(n_pool));
        let vs: Vec<usize> = (0..n_val).map(|_| rng.random_range(0..m_s)).collect();
        let vt: Vec<usize> = (0..n_val).map(|_| rng.random_range(0..m_t)).collect();
        let ps: Vec<usize> = (0..n_pool).map(|_| rng.random_range(0..m_s)).collect();
        let pt: Vec<usize> = (0..n_pool).map(|_| rng.random_range(0..m_t)).collect();
        let coords: Vec<(f64, f64)> = (0..m_t)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let d = line_distances(&coords);
        let dist = estimate_distribution(&vs, &vt, m_s, m_t).unwrap();
        let r = match select_craft(&ps, &pt, &dist, &d, k) {
            Ok(r) => r,
            // Not enough candidates behind the clusters the validation set uses.
            Err(CraftError::PoolTooSmall { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        done += 1;
        let oracle = brute_force_oracle(&ps, &pt, &dist, &d, r.budgets().unwrap()).unwrap();
        let buckets: Vec<Vec<usize>> = (0..m_s)
            .map(|a| r.indices.iter().filter(|&&l| ps[l] == a).map(|&l| pt[l]).collect())
            .collect();
        let craft = discrete_loss(&dist, &d, &buckets).unwrap();
        if craft.weighted == oracle.best_loss.weighted {
            matched += 1;
        } else {
            mismatches.push((done, craft.weighted, oracle.best_loss.weighted));
        }
    }
    let elapsed = start.elapsed();
    let pass = matched == INSTANCES && elapsed < TIME_LIMIT;
    report(
        1,
        pass,
        &format!("{matched}/{INSTANCES} exact matches in {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(mismatches.is_empty(), "{mismatches:?}");
    assert!(elapsed < TIME_LIMIT);
}

// 2. Allocation stays within one unit of the proportional quota.
#[test]
fn criterion_2_allocation_bound() {
    const MARGINALS: usize = 1_000;
    const KS: [usize; 4] = [7, 10, 97, 1_000];
    const TIME_LIMIT: Duration = Duration::from_secs(1);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut sums_ok = true;
    for _ in 0..MARGINALS {
        let m = rng.random_range(1..=60);
        let p = random_simplex(&mut rng, m);
        for k in KS {
            let a = allocate_budget(&p, &vec![usize::MAX / 128; m], k).unwrap();
            sums_ok &= a.budgets.iter().sum::<usize>() == k && a.underflow_moved == 0;
            for (b, pa) in a.budgets.iter().zip(&p) {
                worst = worst.max((*b as f64 - k as f64 * pa).abs());
            }
            // With capacities the total is still exact whenever it is feasible.
            let caps: Vec<usize> = (0..m).map(|_| rng.random_range(0..=k)).collect();
            match allocate_budget(&p, &caps, k) {
                Ok(a) => {
                    sums_ok &= a.budgets.iter().sum::<usize>() == k;
                    sums_ok &= a.budgets.iter().zip(&caps).all(|(b, c)| b <= c);
                }
                Err(CraftError::PoolTooSmall { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1.0 && sums_ok && elapsed < TIME_LIMIT;
    report(
        2,
        pass,
        &format!(
            "max |k_a - k p_a| = {worst:.4}, sums exact: {sums_ok}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(worst < 1.0);
    assert!(sums_ok);
    assert!(elapsed < TIME_LIMIT);
}

// 3. Rounding KL shrinks as the budget grows.
#[test]
fn criterion_3_rounding_kl_decay() {
    const CLUSTERS: usize = 50;
    const FINAL_LIMIT: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let p = random_simplex(&mut rng, CLUSTERS);
    let kls: Vec<f64> = [100usize, 1_000, 10_000, 100_000]
        .iter()
        .map(|&k| {
            let a = allocate_budget(&p, &vec![usize::MAX / 128; CLUSTERS], k).unwrap();
            let q: Vec<f64> = a.budgets.iter().map(|&b| b as f64 / k as f64).collect();
            discretized_kl(&p, &q, DEFAULT_KL_SMOOTHING)
        })
        .collect();
    let monotone = kls.windows(2).all(|w| w[1] <= w[0]);
    let pass = monotone && kls[3] < FINAL_LIMIT;
    let shown: Vec<String> = kls.iter().map(|v| format!("{v:.3e}")).collect();
    report(3, pass, &format!("KL at k = 1e2..1e5: [{}]", shown.join(", ")));
    assert!(monotone, "{kls:?}");
    assert!(kls[3] < FINAL_LIMIT);
}

fn instance_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_components: 8,
        dim_s: 2,
        dim_t: 2,
        coupling: 0.8,
        noise_sigma: 1.0,
        n_validation: 10_000,
        n_pool: 100_000,
        seed,
    }
}

fn inputs(d: &SyntheticData) -> PipelineInputs<'_> {
    PipelineInputs {
        val_src: &d.validation.vectors.source,
        val_tgt: &d.validation.vectors.target,
        pool_src: &d.pool.vectors.source,
        pool_tgt: &d.pool.vectors.target,
    }
}

struct Comparison {
    craft_loss: f64,
    random_loss: f64,
    joint_loss: f64,
    craft_kl: f64,
    random_kl: f64,
    craft: Vec<usize>,
    joint: Vec<usize>,
}

const M: usize = 8;
const K: usize = 2_000;

fn compare(data: &SyntheticData, seed: u64) -> Comparison {
    let cfg = PipelineConfig::new(M, M, K, seed);
    let craft = pipeline::run(inputs(data), &cfg).unwrap();
    let state = &craft.state;
    let random = pipeline::select_assigned(state, &craft.pool, &cfg.clone().with_method(Method::Random)).unwrap();
    let joint = pipeline::run(inputs(data), &cfg.clone().with_method(Method::JointAblation)).unwrap();
    let c = craft.result.diagnostics.unwrap();
    let r = random.diagnostics.unwrap();
    let j = joint.result.diagnostics.unwrap();
    Comparison {
        craft_loss: c.discrete_loss_weighted,
        random_loss: r.discrete_loss_weighted,
        joint_loss: j.discrete_loss_weighted,
        craft_kl: c.source_kl,
        random_kl: r.source_kl,
        craft: craft.result.indices,
        joint: joint.result.indices,
    }
}

// 4. Conditional advantage over random and joint-clustering baselines.
#[test]
fn criterion_4_synthetic_conditional_advantage() {
    const INSTANCES: u64 = 10;
    const REQUIRED: usize = 9;
    const TIME_LIMIT: Duration = Duration::from_secs(300);
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut beats_both = 0;
    let mut kl_ok = 0;
    for seed in 0..INSTANCES {
        let data = generate(&instance_config(100 + seed)).unwrap();
        let c = compare(&data, seed);
        if c.craft_loss < c.random_loss && c.craft_loss < c.joint_loss {
            beats_both += 1;
        }
        if c.craft_kl <= c.random_kl {
            kl_ok += 1;
        }
        let _ = writeln!(
            std::io::stderr(),
            "  instance {seed}: loss craft {:.4} random {:.4} joint {:.4}; kl craft {:.2e} random {:.2e}",
            c.craft_loss,
            c.random_loss,
            c.joint_loss,
            c.craft_kl,
            c.random_kl
        );
    }
    let elapsed = start.elapsed();
    let pass = beats_both >= REQUIRED && kl_ok >= REQUIRED && elapsed < TIME_LIMIT;
    report(
        4,
        pass,
        &format!(
            "lower loss than both baselines {beats_both}/{INSTANCES}, KL <= random {kl_ok}/{INSTANCES}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(beats_both >= REQUIRED);
    assert!(kl_ok >= REQUIRED);
    assert!(elapsed < TIME_LIMIT);
}

// 5. Selected targets concentrate around the conditional mean.
#[test]
fn criterion_5_conditional_concentration() {
    const RATIO_LIMIT: f64 = 0.7;
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = SyntheticConfig {
        dim_s: 1,
        dim_t: 1,
        coupling: 0.9,
        ..instance_config(5)
    };
    let data = generate(&cfg).unwrap();
    let c = compare(&data, 5);
    let craft = conditional_concentration(&data.validation, &data.pool, &c.craft).unwrap();
    let joint = conditional_concentration(&data.validation, &data.pool, &c.joint).unwrap();
    let ratio = craft / joint;

    let dir = std::env::temp_dir().join(format!("craft-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("scatter.csv");
    emit_scatter(&data.validation.vectors, &data.pool.vectors.select(&c.craft), &csv).unwrap();
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    let csv_ok = rows == 1 + cfg.n_validation + K;

    let pass = ratio < RATIO_LIMIT && csv_ok;
    report(
        5,
        pass,
        &format!(
            "concentration craft {craft:.4} vs joint {joint:.4}, ratio {ratio:.3}; scatter at {}",
            csv.display()
        ),
    );
    assert!(ratio < RATIO_LIMIT);
    assert!(csv_ok);
}

// 6a. Dense selection throughput at one million candidates.
#[test]
fn criterion_6_dense_throughput() {
    const TIME_LIMIT: Duration = Duration::from_secs(120);
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = SyntheticConfig {
        n_components: 100,
        dim_s: 384,
        dim_t: 384,
        coupling: 0.8,
        noise_sigma: 1.0,
        n_validation: 10_000,
        n_pool: 1_000_000,
        seed: 384,
    };
    let g = Generator::new(&cfg).unwrap();
    let validation = g.split(Split::Validation);
    let (src_labels, tgt_labels) = g.labels(Split::Pool);

    let mut selecting = Duration::ZERO;
    let t = Instant::now();
    let pcfg = PipelineConfig::new(100, 100, 100_000, 1);
    let state = ClusterState::fit(&validation.vectors.source, &validation.vectors.target, &pcfg).unwrap();
    selecting += t.elapsed();

    // One pool side in memory at a time; generation is not timed.
    let mut assign_side = |side: Side, labels: &[usize], model: &KMeansModel| {
        let vs = g.side(Split::Pool, side, labels);
        let t = Instant::now();
        let a = assign_nearest(model, &vs).unwrap();
        selecting += t.elapsed();
        a
    };
    let source = assign_side(Side::Source, &src_labels, &state.source_model);
    let target = assign_side(Side::Target, &tgt_labels, &state.target_model);
    let pool = PoolAssignment { source, target };

    let t = Instant::now();
    let result = pipeline::select_assigned(&state, &pool, &pcfg).unwrap();
    selecting += t.elapsed();

    let pass = selecting <= TIME_LIMIT && result.indices.len() == 100_000;
    report(
        6,
        pass,
        &format!(
            "dense 1M x 384, m = 100: selection stage {:.1}s (limit {}s)",
            selecting.as_secs_f64(),
            TIME_LIMIT.as_secs()
        ),
    );
    assert_eq!(result.indices.len(), 100_000);
    assert!(selecting <= TIME_LIMIT);
}

fn synthetic_sentence(rng: &mut ChaCha8Rng, prefix: &str, topic: usize, vocab: usize) -> String {
    let len = rng.random_range(4..=12);
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        // Half the words come from a topic-specific band, the rest are shared.
        let w = if rng.random_bool(0.5) {
            topic * 50 + rng.random_range(0..50)
        } else {
            let u: f64 = rng.random();
            (u * u * vocab as f64) as usize
        };
        words.push(format!("{prefix}{w}"));
    }
    words.join(" ")
}

// 6b. TF-IDF vectorization plus selection on one million short sentences.
#[test]
fn criterion_6_tfidf_throughput() {
    const TIME_LIMIT: Duration = Duration::from_secs(600);
    const N: usize = 1_000_000;
    const VALIDATION: usize = 10_000;
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sources = Vec::with_capacity(N);
    let mut targets = Vec::with_capacity(N);
    for _ in 0..N {
        let topic = rng.random_range(0..40);
        sources.push(synthetic_sentence(&mut rng, "s", topic, 20_000));
        targets.push(synthetic_sentence(&mut rng, "t", (topic * 7) % 40, 20_000));
    }

    let start = Instant::now();
    let mut sides = Vec::new();
    for docs in [&sources, &targets] {
        let vocab = fit_tfidf(docs.iter().map(String::as_str), DEFAULT_MAX_VOCAB).unwrap();
        let (val, pool) = docs.split_at(VALIDATION);
        sides.push((transform_tfidf(&vocab, val).vectors, transform_tfidf(&vocab, pool).vectors));
    }
    let vectorize = start.elapsed();
    let (val_tgt, pool_tgt) = sides.pop().unwrap();
    let (val_src, pool_src) = sides.pop().unwrap();
    let t = Instant::now();
    let out = pipeline::run(
        PipelineInputs {
            val_src: &val_src,
            val_tgt: &val_tgt,
            pool_src: &pool_src,
            pool_tgt: &pool_tgt,
        },
        &PipelineConfig::new(100, 100, 100_000, 1),
    )
    .unwrap();
    let select = t.elapsed();
    let total = vectorize + select;
    let pass = total <= TIME_LIMIT && out.result.indices.len() == 100_000;
    report(
        6,
        pass,
        &format!(
            "tf-idf 1M sentences: vectorize {:.1}s + select {:.1}s (limit {}s)",
            vectorize.as_secs_f64(),
            select.as_secs_f64(),
            TIME_LIMIT.as_secs()
        ),
    );
    assert!(total <= TIME_LIMIT);
}

// 7. Selection files do not depend on the worker count.
#[test]
fn criterion_7_determinism_across_threads() {
    const THREADS: [usize; 3] = [1, 4, 8];
    const INSTANCES: u64 = 10;
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    for seed in 0..INSTANCES {
        let data = generate(&instance_config(100 + seed)).unwrap();
        let mut files = Vec::new();
        for threads in THREADS {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let out = pool.install(|| pipeline::run(inputs(&data), &PipelineConfig::new(M, M, K, seed)).unwrap());
            let path = dir.path().join(format!("sel-{seed}-{threads}.txt"));
            save_selection(&out.result, &path).unwrap();
            let diag = craft_core::corpus_io::diagnostics_path(&path);
            files.push((std::fs::read(&path).unwrap(), std::fs::read(diag).unwrap()));
        }
        if files.windows(2).all(|w| w[0] == w[1]) {
            identical += 1;
        }
    }
    let pass = identical == INSTANCES;
    report(
        7,
        pass,
        &format!("{identical}/{INSTANCES} instances byte-identical across threads {THREADS:?}"),
    );
    assert_eq!(identical, INSTANCES);
}

// 8. Identities of the statistics.
#[test]
fn criterion_8_stats_identities() {
    const LINEARITY_TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let kl_zero = (0..100).all(|_| {
        let m = rng.random_range(1..=40);
        let p = random_simplex(&mut rng, m);
        discretized_kl(&p, &p, DEFAULT_KL_SMOOTHING) == 0.0
    });

    let symmetric = (0..100).all(|_| {
        let k = rng.random_range(1..=20);
        let dim = rng.random_range(1..=16);
        let c: Vec<f32> = (0..k * dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let d = centroid_distances(&KMeansModel::from_centroids(k, dim, c).unwrap());
        (0..k).all(|j| d.get(j, j) == 0.0 && (0..k).all(|l| d.get(j, l) == d.get(l, j)))
    });

    // Loss is linear in the selected target distribution: pooling two
    // equal-size selections averages their losses.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m_s = rng.random_range(1..=6);
        let m_t = rng.random_range(1..=6);
        let n = rng.random_range(1..=200);
        let vs: Vec<usize> = (0..n).map(|_| rng.random_range(0..m_s)).collect();
        let vt: Vec<usize> = (0..n).map(|_| rng.random_range(0..m_t)).collect();
        let dist = estimate_distribution(&vs, &vt, m_s, m_t).unwrap();
        let coords: Vec<(f64, f64)> = (0..m_t).map(|_| (rng.random(), rng.random())).collect();
        let d = line_distances(&coords);
        let size = rng.random_range(1..=30);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..m_s)
                .map(|_| (0..size).map(|_| rng.random_range(0..m_t)).collect())
                .collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let both: Vec<Vec<usize>> = a.iter().zip(&b).map(|(x, y)| [x.clone(), y.clone()].concat()).collect();
        let la = discrete_loss(&dist, &d, &a).unwrap();
        let lb = discrete_loss(&dist, &d, &b).unwrap();
        let lab = discrete_loss(&dist, &d, &both).unwrap();
        for (mix, x, y) in [
            (lab.weighted, la.weighted, lb.weighted),
            (lab.unweighted, la.unweighted, lb.unweighted),
        ] {
            let expect = 0.5 * (x + y);
            worst = worst.max((mix - expect).abs() / expect.abs().max(f64::MIN_POSITIVE));
        }
        for i in 0..m_s {
            let mix = bucket_loss(&dist, &d, i, &both[i]);
            let expect = 0.5 * (bucket_loss(&dist, &d, i, &a[i]) + bucket_loss(&dist, &d, i, &b[i]));
            if expect > 0.0 {
                worst = worst.max((mix - expect).abs() / expect);
            }
        }
    }
    let pass = kl_zero && symmetric && worst <= LINEARITY_TOL;
    report(
        8,
        pass,
        &format!("KL(p,p)=0: {kl_zero}, distance matrices symmetric: {symmetric}, linearity rel err {worst:.2e}"),
    );
    assert!(kl_zero);
    assert!(symmetric);
    assert!(worst <= LINEARITY_TOL);
}

// Random selection is a uniform subset, used above as a baseline.
#[test]
fn random_baseline_is_seeded() {
    let a = select_random(100_000, K, 3).unwrap();
    assert_eq!(a, select_random(100_000, K, 3).unwrap());
    let data = generate(&SyntheticConfig {
        n_validation: 500,
        n_pool: 5_000,
        ..instance_config(1)
    })
    .unwrap();
    let j = select_joint_ablation(
        &data.validation.vectors.source.concat_columns(&data.validation.vectors.target).unwrap(),
        &data.pool.vectors.source.concat_columns(&data.pool.vectors.target).unwrap(),
        M,
        200,
        1,
    )
    .unwrap();
    assert_eq!(j.indices.len(), 200);
}
