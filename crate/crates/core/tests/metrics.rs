use mixsup::metrics::{dice, hd95, BinaryMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect()).unwrap()
}

fn oracle_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.values().len() {
        na += a.values()[i] as usize;
        nb += b.values()[i] as usize;
        inter += (a.values()[i] && b.values()[i]) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn oracle_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.values()[(y * w + x) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let mut border = false;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    // off-image neighbors count as background
                    border |= !at(y + dy, x + dx);
                }
            }
            if border {
                out.push((y, x));
            }
        }
    }
    out
}

fn oracle_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let (lo, frac) = (rank.floor() as usize, rank.fract());
    if lo + 1 < v.len() {
        v[lo] + (v[lo + 1] - v[lo]) * frac
    } else {
        v[lo]
    }
}

fn oracle_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() && bb.is_empty() {
        return 0.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return ((a.height() * a.height() + a.width() * a.width()) as f64).sqrt();
    }
    let all_pairs = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    oracle_percentile(all_pairs(&ba, &bb), 95.0).max(oracle_percentile(all_pairs(&bb, &ba), 95.0))
}

#[test]
fn dice_and_hd95_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let da = rng.gen_range(0.0..0.6);
        let a = random_mask(&mut rng, h, w, da);
        let db = rng.gen_range(0.0..0.6);
        let b = random_mask(&mut rng, h, w, db);
        assert_eq!(dice(&a, &b).unwrap(), oracle_dice(&a, &b));
        assert_eq!(hd95(&a, &b).unwrap(), oracle_hd95(&a, &b));
    }
}

#[test]
fn symmetry_and_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(2..=20), rng.gen_range(2..=20));
        let da = rng.gen_range(0.0..0.5);
        let a = random_mask(&mut rng, h, w, da);
        let db = rng.gen_range(0.0..0.5);
        let b = random_mask(&mut rng, h, w, db);
        let d = dice(&a, &b).unwrap();
        assert_eq!(d, dice(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&d));
        let hd = hd95(&a, &b).unwrap();
        assert_eq!(hd, hd95(&b, &a).unwrap());
        assert!(hd <= ((h * h + w * w) as f64).sqrt() + 1e-12);
    }
}

#[test]
fn hd95_worked_examples() {
    let point = |y: usize, x: usize| {
        let mut v = vec![false; 64];
        v[y * 8 + x] = true;
        BinaryMask::new(8, 8, v).unwrap()
    };
    assert!((hd95(&point(0, 0), &point(3, 4)).unwrap() - 5.0).abs() < 1e-6);
    let empty = BinaryMask::new(64, 64, vec![false; 4096]).unwrap();
    let mut v = vec![false; 4096];
    v[64 * 30 + 30] = true;
    let target = BinaryMask::new(64, 64, v).unwrap();
    assert!((hd95(&empty, &target).unwrap() - 90.50966799187809).abs() < 1e-6);
}
