//! Metrics against a cell-counting reference on a dyadic grid, where every
//! endpoint and length is exact in `f64` so the two must agree bit for bit.

use drft::metrics::{mean_tiou, recall_at, tiou, THRESHOLDS};
use drft::TimeInterval;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: u32 = 1024;

#[derive(Clone, Copy)]
struct Cells {
    start: u32,
    end: u32,
}

impl Cells {
    fn contains(self, cell: u32) -> bool {
        self.start <= cell && cell < self.end
    }

    fn interval(self) -> TimeInterval {
        TimeInterval::new(self.start as f64 / GRID as f64, self.end as f64 / GRID as f64).unwrap()
    }
}

fn random_cells(rng: &mut ChaCha8Rng) -> Cells {
    let a = rng.gen_range(0..=GRID);
    let b = if rng.gen_bool(0.05) { a } else { rng.gen_range(0..=GRID) };
    Cells { start: a.min(b), end: a.max(b) }
}

/// (intersection cells, union cells), counted one cell at a time.
fn count(a: Cells, b: Cells) -> (u32, u32) {
    let (mut inter, mut union) = (0, 0);
    for cell in 0..GRID {
        let (x, y) = (a.contains(cell), b.contains(cell));
        inter += (x && y) as u32;
        union += (x || y) as u32;
    }
    (inter, union)
}

fn reference_tiou(a: Cells, b: Cells) -> f64 {
    let (inter, union) = count(a, b);
    if union == 0 {
        return if a.start == b.start { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

/// Threshold test in integers: `inter / union ≥ num / den`.
fn reference_hit(a: Cells, b: Cells, num: u32, den: u32) -> bool {
    let (inter, union) = count(a, b);
    if union == 0 {
        return a.start == b.start;
    }
    inter * den >= num * union
}

fn pairs(n: usize, seed: u64) -> Vec<(Cells, Cells)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (random_cells(&mut rng), random_cells(&mut rng))).collect()
}

#[test]
fn tiou_matches_cell_counting_on_10k_pairs() {
    for (a, b) in pairs(10_000, 1) {
        assert_eq!(tiou(&a.interval(), &b.interval()), reference_tiou(a, b));
    }
}

#[test]
fn recall_and_mean_match_the_reference_exactly_on_10k_pairs() {
    let cells = pairs(10_000, 2);
    let intervals: Vec<(TimeInterval, TimeInterval)> = cells.iter().map(|&(a, b)| (a.interval(), b.interval())).collect();

    for (theta, (num, den)) in THRESHOLDS.iter().zip([(3, 10), (1, 2), (7, 10)]) {
        let hits = cells.iter().filter(|&&(a, b)| reference_hit(a, b, num, den)).count();
        assert_eq!(recall_at(&intervals, *theta).unwrap(), 100.0 * hits as f64 / cells.len() as f64);
    }

    let mut total = 0.0;
    for &(a, b) in &cells {
        total += reference_tiou(a, b);
    }
    assert_eq!(mean_tiou(&intervals).unwrap(), 100.0 * total / cells.len() as f64);
}

#[test]
fn recall_counts_every_pair_once_over_continuous_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let intervals: Vec<(TimeInterval, TimeInterval)> = (0..10_000)
        .map(|_| {
            let mut draw = || TimeInterval::repaired(rng.gen(), rng.gen());
            (draw(), draw())
        })
        .collect();
    for theta in THRESHOLDS {
        let mut hits = 0usize;
        for (p, g) in &intervals {
            let inter = (p.end.min(g.end) - p.start.max(g.start)).max(0.0);
            let union = p.length() + g.length() - inter;
            let iou = if union > 0.0 { inter / union } else { 1.0 };
            if iou >= theta + 1e-12 {
                hits += 1;
            } else if iou > theta - 1e-12 {
                hits += (tiou(p, g) >= theta) as usize;
            }
        }
        assert_eq!(recall_at(&intervals, theta).unwrap(), 100.0 * hits as f64 / intervals.len() as f64);
    }
}

#[test]
fn overlapping_example_scores_one_half() {
    let a = TimeInterval::new(0.2, 0.8).unwrap();
    let b = TimeInterval::new(0.4, 1.0).unwrap();
    assert_eq!(tiou(&a, &b), 0.5);
}
