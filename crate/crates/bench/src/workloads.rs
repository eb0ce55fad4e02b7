use std::collections::{HashMap, HashSet};
use std::hint::black_box;
use std::sync::{Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanalloc::size_classes::MAX_CLASS_SIZE;
use spanalloc::Allocator;

use crate::config::{SizeSpec, Workload, WorkloadConfig};
use crate::error::BenchError;
use crate::memory::MemSampler;
use crate::observer::{NoObserver, Observer};
use crate::report::RunReport;

const CACHE_LINE: usize = 64;

/// Builds the configured allocator and runs the workload on it.
pub fn run(cfg: &WorkloadConfig) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    let alloc = Allocator::new(cfg.allocator_config())?;
    run_on(&alloc, cfg, &NoObserver)
}

/// Runs the workload on an existing allocator. Allocator-shaping fields of
/// `cfg` (provider, pool width, ablations) are ignored; the report echoes
/// the allocator's own configuration.
pub fn run_on(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    let sampler = MemSampler::start(alloc.vm().clone());
    let baseline = sampler.current();
    let before = alloc.stats().frontend;
    let start = Instant::now();
    let out = match cfg.workload {
        Workload::Threadtest => threadtest(alloc, cfg, obs)?,
        Workload::ShbenchLike => shbench_like(alloc, cfg, obs)?,
        Workload::LarsonLike => larson_like(alloc, cfg, obs)?,
        Workload::Prodcons => prodcons(alloc, cfg, obs, &sampler)?,
        Workload::Sizesweep => sizesweep(alloc, cfg, obs)?,
        Workload::FalseshareActive => falseshare_active(alloc, cfg, obs)?,
        Workload::FalsesharePassive => falseshare_passive(alloc, cfg, obs)?,
        Workload::Locality => locality(alloc, cfg, obs)?,
    };
    let seconds = start.elapsed().as_secs_f64();
    let peak = sampler.take_peak().max(out.epoch_peaks.iter().copied().max().unwrap_or(0));
    let final_bytes = sampler.current();
    let after = alloc.stats().frontend;

    let total = out.tallies.iter().fold(Tally::default(), |a, b| a.merge(b));
    let secs: Vec<f64> = out.tallies.iter().map(|t| t.secs).collect();
    let ac = alloc.config();
    Ok(RunReport {
        workload: cfg.workload.to_string(),
        provider: ac.provider.to_string(),
        threads: cfg.threads,
        rounds: cfg.rounds,
        objects_per_round: cfg.objects_per_round,
        size: cfg.size.to_string(),
        seed: cfg.seed,
        ablate: cfg.ablate.to_string(),
        pool_width: ac.pool_width,
        reuse_percent: ac.reuse_percent,
        ops: total.ops,
        seconds,
        ops_per_second: total.ops as f64 / seconds.max(1e-9),
        thread_seconds_mean: secs.iter().sum::<f64>() / secs.len().max(1) as f64,
        thread_seconds_max: secs.iter().copied().fold(0.0, f64::max),
        memory_exact: sampler.is_exact(),
        baseline_committed_bytes: baseline,
        peak_committed_bytes: peak.max(final_bytes),
        final_committed_bytes: final_bytes,
        frees: total.frees,
        remote_frees: total.remote_frees,
        remote_fraction: total.remote_frees as f64 / total.frees.max(1) as f64,
        huge_allocs: total.huge,
        pool_fetches: after.pool_fetches - before.pool_fetches,
        set_fetches: after.set_fetches - before.set_fetches,
        reclaimed: after.reclaimed - before.reclaimed,
        adoptions: after.adoptions - before.adoptions,
        terminations: after.terminations - before.terminations,
        shared_lines: out.shared_lines,
        handed_back: out.handed_back,
        locality_ratio: out.locality_ratio,
        thread_seconds: secs,
        epoch_peaks: out.epoch_peaks,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    ops: u64,
    frees: u64,
    remote_frees: u64,
    huge: u64,
    secs: f64,
}

impl Tally {
    fn merge(self, o: &Tally) -> Tally {
        Tally {
            ops: self.ops + o.ops,
            frees: self.frees + o.frees,
            remote_frees: self.remote_frees + o.remote_frees,
            huge: self.huge + o.huge,
            secs: self.secs + o.secs,
        }
    }
}

#[derive(Default)]
struct Outcome {
    tallies: Vec<Tally>,
    shared_lines: Option<u64>,
    handed_back: Option<u64>,
    locality_ratio: Option<f64>,
    epoch_peaks: Vec<usize>,
}

impl Outcome {
    fn from_tallies(tallies: Vec<Tally>) -> Outcome {
        Outcome { tallies, ..Outcome::default() }
    }
}

/// Per-thread view: allocator calls plus bookkeeping.
struct Worker<'a> {
    alloc: &'a Allocator,
    obs: &'a dyn Observer,
    id: usize,
    tally: Tally,
}

impl<'a> Worker<'a> {
    fn new(alloc: &'a Allocator, obs: &'a dyn Observer, id: usize) -> Self {
        Worker { alloc, obs, id, tally: Tally::default() }
    }

    fn alloc(&mut self, size: usize) -> Result<usize, BenchError> {
        let p = self.alloc.alloc(size);
        if p.is_null() {
            return Err(BenchError::OutOfMemory { size });
        }
        // SAFETY: at least one usable byte.
        unsafe { p.write(self.id as u8) };
        self.obs.on_alloc(self.alloc, p as usize, size);
        self.tally.ops += 1;
        if size > MAX_CLASS_SIZE {
            self.tally.huge += 1;
        }
        Ok(p as usize)
    }

    /// Frees `p`, allocated by worker `from`.
    fn free(&mut self, p: usize, from: usize) {
        self.obs.on_free(self.alloc, p);
        // SAFETY: workloads free each object exactly once.
        unsafe { self.alloc.dealloc(p as *mut u8) };
        self.tally.ops += 1;
        self.tally.frees += 1;
        if from != self.id {
            self.tally.remote_frees += 1;
        }
    }
}

fn rng_for(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Runs `body` on `threads` workers. Each worker gives its buffer back
/// before it is joined.
fn spawn_workers<F>(alloc: &Allocator, threads: usize, body: F) -> Result<Vec<Tally>, BenchError>
where
    F: Fn(usize) -> Result<Tally, BenchError> + Sync,
{
    thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let body = &body;
                s.spawn(move || {
                    let start = Instant::now();
                    let r = body(t).map(|mut tally| {
                        tally.secs = start.elapsed().as_secs_f64();
                        tally
                    });
                    alloc.detach_current_thread();
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn threadtest(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    let n = cfg.objects_per_round;
    let tallies = spawn_workers(alloc, cfg.threads, |t| {
        let mut w = Worker::new(alloc, obs, t);
        let mut rng = rng_for(cfg.seed, t);
        let mut live = Vec::with_capacity(n);
        for _ in 0..cfg.rounds {
            for _ in 0..n {
                live.push(w.alloc(cfg.size.sample(&mut rng))?);
            }
            for p in live.drain(..) {
                w.free(p, t);
            }
        }
        Ok(w.tally)
    })?;
    Ok(Outcome::from_tallies(tallies))
}

/// Each round allocates a batch of objects whose lifetimes end a random one
/// to four rounds later.
fn shbench_like(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    const SLOTS: usize = 5;
    let tallies = spawn_workers(alloc, cfg.threads, |t| {
        let mut w = Worker::new(alloc, obs, t);
        let mut rng = rng_for(cfg.seed, t);
        let mut ring: [Vec<usize>; SLOTS] = Default::default();
        for r in 0..cfg.rounds {
            for p in std::mem::take(&mut ring[r % SLOTS]) {
                w.free(p, t);
            }
            for _ in 0..cfg.objects_per_round {
                let size = cfg.size.sample(&mut rng);
                let life = rng.gen_range(1..=4);
                let p = w.alloc(size)?;
                ring[(r + life) % SLOTS].push(p);
            }
        }
        for slot in ring {
            for p in slot {
                w.free(p, t);
            }
        }
        Ok(w.tally)
    })?;
    Ok(Outcome::from_tallies(tallies))
}

/// (address, allocating worker) pairs.
type ObjectSet = Vec<(usize, usize)>;

/// Lanes of object sets. Every hand-off starts fresh threads that each take
/// the previous lane's set, replace random members, and exit. A final pass
/// frees everything.
fn larson_like(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    let lanes = cfg.threads;
    let n = cfg.objects_per_round;
    let ops_per_handoff = n * 4;
    let slice = cfg.duration.map(|d| d / cfg.rounds as u32);
    let mut sets: Vec<ObjectSet> = vec![Vec::new(); lanes];
    let mut per_lane = vec![Tally::default(); lanes];
    for h in 0..=cfg.rounds {
        let drain = h == cfg.rounds;
        sets.rotate_right(1);
        let taken = std::mem::take(&mut sets);
        let results: Vec<Result<(ObjectSet, Tally), BenchError>> = thread::scope(|s| {
            let handles: Vec<_> = taken
                .into_iter()
                .enumerate()
                .map(|(lane, mut set)| {
                    s.spawn(move || {
                        let id = h * lanes + lane;
                        let mut w = Worker::new(alloc, obs, id);
                        let mut rng = rng_for(cfg.seed, id);
                        let start = Instant::now();
                        let r = larson_handoff(&mut w, &mut rng, cfg.size, &mut set, n, ops_per_handoff, slice, drain);
                        w.tally.secs = start.elapsed().as_secs_f64();
                        alloc.detach_current_thread();
                        r.map(|()| (set, w.tally))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for (lane, r) in results.into_iter().enumerate() {
            let (set, tally) = r?;
            per_lane[lane] = per_lane[lane].merge(&tally);
            sets.push(set);
        }
        if !drain {
            obs.at_quiescence(alloc, h);
        }
    }
    Ok(Outcome::from_tallies(per_lane))
}

#[allow(clippy::too_many_arguments)]
fn larson_handoff(
    w: &mut Worker<'_>,
    rng: &mut ChaCha8Rng,
    size: SizeSpec,
    set: &mut ObjectSet,
    n: usize,
    ops: usize,
    slice: Option<Duration>,
    drain: bool,
) -> Result<(), BenchError> {
    if drain {
        for (p, from) in set.drain(..) {
            w.free(p, from);
        }
        return Ok(());
    }
    while set.len() < n {
        set.push((w.alloc(size.sample(rng))?, w.id));
    }
    let start = Instant::now();
    let mut done = 0usize;
    loop {
        match slice {
            None if done >= ops => break,
            Some(d) if done % 64 == 0 && start.elapsed() >= d => break,
            _ => {}
        }
        let i = rng.gen_range(0..set.len());
        let (p, from) = set[i];
        w.free(p, from);
        set[i] = (w.alloc(size.sample(rng))?, w.id);
        done += 1;
    }
    Ok(())
}

/// Producers allocate and send each object to a random consumer's inbox;
/// consumers free what they receive. Epochs are separated by barriers, and
/// the peak committed memory of each epoch is recorded.
fn prodcons(
    alloc: &Allocator,
    cfg: &WorkloadConfig,
    obs: &dyn Observer,
    sampler: &MemSampler,
) -> Result<Outcome, BenchError> {
    let n = cfg.threads;
    let (producers, consumers): (Vec<usize>, Vec<usize>) = match cfg.producers {
        Some(p) => ((0..p).collect(), (p..n).collect()),
        None => ((0..n).collect(), (0..n).collect()),
    };
    let inboxes: Vec<Mutex<Vec<(usize, usize)>>> = consumers.iter().map(|_| Mutex::new(Vec::new())).collect();
    let barrier = Barrier::new(n + 1);
    let mut peaks = Vec::with_capacity(cfg.rounds);
    let tallies = thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|t| {
                let (producers, consumers, inboxes, barrier) = (&producers, &consumers, &inboxes, &barrier);
                s.spawn(move || {
                    let mut w = Worker::new(alloc, obs, t);
                    let mut rng = rng_for(cfg.seed, t);
                    let mut err = None;
                    let start = Instant::now();
                    let my_inbox = consumers.iter().position(|&c| c == t);
                    for _ in 0..cfg.rounds {
                        if producers.contains(&t) && err.is_none() {
                            let mut outs = vec![Vec::new(); consumers.len()];
                            for _ in 0..cfg.objects_per_round {
                                match w.alloc(cfg.size.sample(&mut rng)) {
                                    Ok(p) => outs[rng.gen_range(0..consumers.len())].push((p, t)),
                                    Err(e) => {
                                        err = Some(e);
                                        break;
                                    }
                                }
                            }
                            for (inbox, out) in inboxes.iter().zip(outs) {
                                inbox.lock().unwrap().extend(out);
                            }
                        }
                        barrier.wait();
                        barrier.wait();
                        if let Some(c) = my_inbox {
                            let items = std::mem::take(&mut *inboxes[c].lock().unwrap());
                            for (p, from) in items {
                                w.free(p, from);
                            }
                        }
                        barrier.wait();
                        barrier.wait();
                    }
                    w.tally.secs = start.elapsed().as_secs_f64();
                    alloc.detach_current_thread();
                    match err {
                        Some(e) => Err(e),
                        None => Ok(w.tally),
                    }
                })
            })
            .collect();
        for e in 0..cfg.rounds {
            barrier.wait();
            obs.at_quiescence(alloc, e);
            barrier.wait();
            barrier.wait();
            peaks.push(sampler.take_peak());
            barrier.wait();
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(Outcome { epoch_peaks: peaks, ..Outcome::from_tallies(tallies) })
}

/// Size intervals `[2^x, 2^(x+2))` covering the configured range, smallest
/// first. Falls back to the range itself when it is too narrow.
pub fn sweep_intervals(size: SizeSpec) -> Vec<(usize, usize)> {
    let (lo, hi) = match size {
        SizeSpec::Fixed(n) => (n, n),
        SizeSpec::Range(lo, hi) => (lo, hi),
    };
    let mut x = lo.max(1).next_power_of_two().trailing_zeros();
    let mut out = Vec::new();
    while x + 2 < usize::BITS && (1usize << (x + 2)) <= hi {
        out.push((1 << x, 1 << (x + 2)));
        x += 1;
    }
    if out.is_empty() {
        out.push((lo, hi + 1));
    }
    out
}

fn sizesweep(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    let intervals = sweep_intervals(cfg.size);
    let tallies = spawn_workers(alloc, cfg.threads, |t| {
        let mut w = Worker::new(alloc, obs, t);
        let mut rng = rng_for(cfg.seed, t);
        let mut live = Vec::with_capacity(cfg.objects_per_round);
        for &(lo, hi) in &intervals {
            for _ in 0..cfg.rounds {
                for _ in 0..cfg.objects_per_round {
                    live.push(w.alloc(rng.gen_range(lo..hi))?);
                }
                for p in live.drain(..) {
                    w.free(p, t);
                }
            }
        }
        Ok(w.tally)
    })?;
    Ok(Outcome::from_tallies(tallies))
}

fn shared_lines(owned: &[(usize, usize)]) -> u64 {
    let mut by_line: HashMap<usize, HashSet<usize>> = HashMap::new();
    for &(p, t) in owned {
        by_line.entry(p / CACHE_LINE).or_default().insert(t);
    }
    by_line.values().filter(|ts| ts.len() > 1).count() as u64
}

fn hammer(w: &mut Worker<'_>, objs: &[usize], rounds: usize) {
    for r in 0..rounds {
        for &p in objs {
            // SAFETY: `p` is a live object owned by this worker.
            unsafe { std::ptr::write_volatile(p as *mut u8, r as u8) };
        }
    }
    w.tally.ops += (rounds * objs.len()) as u64;
}

/// Every thread allocates small objects at the same time and then writes to
/// them repeatedly.
fn falseshare_active(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    let owned = Mutex::new(Vec::new());
    let barrier = Barrier::new(cfg.threads);
    let tallies = spawn_workers(alloc, cfg.threads, |t| {
        let mut w = Worker::new(alloc, obs, t);
        let mut rng = rng_for(cfg.seed, t);
        let mut objs = Vec::with_capacity(cfg.objects_per_round);
        let mut res = Ok(());
        for _ in 0..cfg.objects_per_round {
            match w.alloc(cfg.size.sample(&mut rng)) {
                Ok(p) => objs.push(p),
                Err(e) => {
                    res = Err(e);
                    break;
                }
            }
        }
        owned.lock().unwrap().extend(objs.iter().map(|&p| (p, t)));
        barrier.wait();
        hammer(&mut w, &objs, cfg.rounds);
        for p in objs {
            w.free(p, t);
        }
        res.map(|()| w.tally)
    })?;
    let lines = shared_lines(&owned.into_inner().unwrap());
    Ok(Outcome { shared_lines: Some(lines), ..Outcome::from_tallies(tallies) })
}

/// Thread 0 allocates objects for everyone else. Each other thread frees
/// the objects it was given, allocates its own, and writes to them.
fn falseshare_passive(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    let n = cfg.objects_per_round;
    let handed: Vec<Mutex<Vec<usize>>> = (0..cfg.threads).map(|_| Mutex::new(Vec::new())).collect();
    let owned = Mutex::new(Vec::new());
    let handed_back = Mutex::new(0u64);
    let barrier = Barrier::new(cfg.threads);
    let tallies = spawn_workers(alloc, cfg.threads, |t| {
        let mut w = Worker::new(alloc, obs, t);
        let mut rng = rng_for(cfg.seed, t);
        let mut res = Ok(());
        if t == 0 {
            'outer: for slot in handed.iter().skip(1) {
                for _ in 0..n {
                    match w.alloc(cfg.size.sample(&mut rng)) {
                        Ok(p) => slot.lock().unwrap().push(p),
                        Err(e) => {
                            res = Err(e);
                            break 'outer;
                        }
                    }
                }
            }
        }
        barrier.wait();
        let mut objs = Vec::new();
        if t != 0 {
            let given = std::mem::take(&mut *handed[t].lock().unwrap());
            for &p in &given {
                w.free(p, 0);
            }
            let given: HashSet<usize> = given.into_iter().collect();
            for _ in 0..n {
                match w.alloc(cfg.size.sample(&mut rng)) {
                    Ok(p) => objs.push(p),
                    Err(e) => {
                        res = Err(e);
                        break;
                    }
                }
            }
            *handed_back.lock().unwrap() += objs.iter().filter(|p| given.contains(p)).count() as u64;
            owned.lock().unwrap().extend(objs.iter().map(|&p| (p, t)));
        }
        barrier.wait();
        hammer(&mut w, &objs, cfg.rounds);
        barrier.wait();
        for p in objs {
            w.free(p, t);
        }
        res.map(|()| w.tally)
    })?;
    Ok(Outcome {
        shared_lines: Some(shared_lines(&owned.into_inner().unwrap())),
        handed_back: Some(handed_back.into_inner().unwrap()),
        ..Outcome::from_tallies(tallies)
    })
}

const NEXT: usize = 0;
const LEFT: usize = 1;
const RIGHT: usize = 2;
const KEY: usize = 3;

unsafe fn field(node: usize, i: usize) -> *mut usize {
    (node as *mut usize).add(i)
}

/// Nodes linked both as a list in allocation order and as a binary search
/// tree over shuffled keys. The ratio compares in-order tree traversal with
/// list traversal over the same nodes.
fn locality(alloc: &Allocator, cfg: &WorkloadConfig, obs: &dyn Observer) -> Result<Outcome, BenchError> {
    let ratios = Mutex::new(Vec::new());
    let tallies = spawn_workers(alloc, cfg.threads, |t| {
        let mut w = Worker::new(alloc, obs, t);
        let mut rng = rng_for(cfg.seed, t);
        let n = cfg.objects_per_round;
        let mut nodes = Vec::with_capacity(n);
        let mut res = Ok(());
        for _ in 0..n {
            match w.alloc(cfg.size.sample(&mut rng).max(4 * std::mem::size_of::<usize>())) {
                Ok(p) => nodes.push(p),
                Err(e) => {
                    res = Err(e);
                    break;
                }
            }
        }
        let mut keys: Vec<usize> = (0..nodes.len()).collect();
        keys.shuffle(&mut rng);
        // SAFETY: every node is a live block of at least four words.
        unsafe {
            for (i, &p) in nodes.iter().enumerate() {
                *field(p, NEXT) = nodes.get(i + 1).copied().unwrap_or(0);
                *field(p, LEFT) = 0;
                *field(p, RIGHT) = 0;
                *field(p, KEY) = keys[i];
            }
            for &p in nodes.iter().skip(1) {
                let mut cur = nodes[0];
                loop {
                    let dir = if *field(p, KEY) < *field(cur, KEY) { LEFT } else { RIGHT };
                    match *field(cur, dir) {
                        0 => {
                            *field(cur, dir) = p;
                            break;
                        }
                        next => cur = next,
                    }
                }
            }
        }
        let head = nodes.first().copied().unwrap_or(0);
        let list_start = Instant::now();
        for _ in 0..cfg.rounds {
            black_box(unsafe { sum_list(head) });
        }
        let list_secs = list_start.elapsed().as_secs_f64();
        let tree_start = Instant::now();
        for _ in 0..cfg.rounds {
            black_box(unsafe { sum_tree(head) });
        }
        let tree_secs = tree_start.elapsed().as_secs_f64();
        ratios.lock().unwrap().push(tree_secs / list_secs.max(1e-12));
        for p in nodes {
            w.free(p, t);
        }
        res.map(|()| w.tally)
    })?;
    let ratios = ratios.into_inner().unwrap();
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    Ok(Outcome { locality_ratio: Some(mean), ..Outcome::from_tallies(tallies) })
}

unsafe fn sum_list(mut p: usize) -> usize {
    let mut sum = 0usize;
    while p != 0 {
        sum = sum.wrapping_add(*field(p, KEY));
        p = *field(p, NEXT);
    }
    sum
}

unsafe fn sum_tree(root: usize) -> usize {
    let mut sum = 0usize;
    let mut stack = Vec::new();
    let mut cur = root;
    while cur != 0 || !stack.is_empty() {
        while cur != 0 {
            stack.push(cur);
            cur = *field(cur, LEFT);
        }
        let p = stack.pop().unwrap();
        sum = sum.wrapping_add(*field(p, KEY));
        cur = *field(p, RIGHT);
    }
    sum
}
