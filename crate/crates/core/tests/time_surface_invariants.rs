use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evstereo::ingest::Event;
use evstereo::time_surface::{LastSpikeMap, SURFACE_SCALE};

const DECAY: f64 = 30_000.0;

fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32, n: usize) -> LastSpikeMap {
    let mut times: Vec<i64> = (0..n).map(|_| rng.random_range(0..1_000_000)).collect();
    times.sort_unstable();
    let mut map = LastSpikeMap::new(w, h);
    for t in times {
        let e = Event::new(t, rng.random_range(0..w), rng.random_range(0..h), 1);
        map.consume(&e).unwrap();
    }
    map
}

#[test]
fn rendered_values_stay_in_range_and_decay() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let map = random_map(&mut rng, 64, 48, 2000);
    let latest = map.latest().unwrap();
    for _ in 0..10_000 {
        let (u, v) = (rng.random_range(0..64), rng.random_range(0..48));
        let t1 = latest + rng.random_range(0..200_000);
        let t2 = t1 + rng.random_range(1..200_000);
        let (a, b) = (map.render(t1, DECAY).unwrap(), map.render(t2, DECAY).unwrap());
        let (va, vb) = (a.get(u, v), b.get(u, v));
        assert!((0.0..=SURFACE_SCALE).contains(&va) && (0.0..=SURFACE_SCALE).contains(&vb));
        // with no new events, a pixel can only fade
        assert!(vb <= va);
        match map.get(u, v) {
            Some(last) => {
                let expected = SURFACE_SCALE * (-((t1 - last) as f64) / DECAY).exp();
                assert!((va - expected).abs() < 1e-9);
            }
            None => assert_eq!(va, 0.0),
        }
    }
}

#[test]
fn value_one_decay_constant_after_the_spike() {
    let mut map = LastSpikeMap::new(4, 4);
    map.consume(&Event::new(1_000, 2, 1, -1)).unwrap();
    let s = map.render(1_000 + DECAY as i64, DECAY).unwrap();
    assert!((s.get(2, 1) - 255.0 * (-1.0f64).exp()).abs() < 1e-9);
    assert_eq!(map.render(1_000, DECAY).unwrap().get(2, 1), 255.0);
}

#[test]
fn more_recent_spikes_render_brighter() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let map = random_map(&mut rng, 32, 32, 5000);
    let s = map.render(map.latest().unwrap(), DECAY).unwrap();
    let mut set: Vec<(i64, f64)> = (0..32)
        .flat_map(|v| (0..32).map(move |u| (u, v)))
        .filter_map(|(u, v)| map.get(u, v).map(|t| (t, s.get(u, v))))
        .collect();
    set.sort_by_key(|(t, _)| *t);
    assert!(set.windows(2).all(|p| p[0].1 <= p[1].1));
}
