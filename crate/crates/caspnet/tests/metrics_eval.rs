//! Forecasting metrics against independent references: the miss test with
//! its inclusive 2 m radius, displacement errors, off-road detection on
//! axis-aligned rectangles, the straight-line baseline, and full-report
//! parity with a from-scratch re-implementation on randomized fixtures.

use caspnet::geom::Vec2;
use caspnet::metrics::{
    ade, aggregate, constant_velocity_baseline, fde, min_ade, min_fde, miss_per_step,
    mode_off_road, top_k, track_missed, EvalTrack, MetricsReport, ModeTraj, MISS_RADIUS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}

#[test]
fn miss_radius_is_inclusive() {
    assert_eq!(MISS_RADIUS, 2.0);
    let gt = v(0.0, 0.0);
    // A candidate at exactly the radius covers the point.
    assert!(!miss_per_step(gt, &[v(2.0, 0.0)], 2.0));
    assert!(miss_per_step(gt, &[v(2.0 + 1e-9, 0.0)], 2.0));
    // No candidates at all is a miss.
    assert!(miss_per_step(gt, &[], 2.0));
    // Any one covering candidate suffices.
    assert!(!miss_per_step(gt, &[v(9.0, 9.0), v(1.0, 1.0)], 2.0));
}

#[test]
fn track_miss_requires_an_in_roi_step() {
    let mode = ModeTraj {
        prob: 1.0,
        points: vec![v(0.0, 0.0), v(1.0, 0.0)],
    };
    let mut track = EvalTrack {
        gt: vec![v(0.0, 0.0), v(10.0, 0.0)],
        in_roi: vec![true, true],
        modes: vec![mode],
        step_points: vec![],
        drivable: vec![],
    };
    // Second step is 9 m off: missed.
    assert_eq!(track_missed(&track, 5, 2.0), Some(true));
    // Masking the bad step out of the ROI clears the miss.
    track.in_roi[1] = false;
    assert_eq!(track_missed(&track, 5, 2.0), Some(false));
    // No in-ROI steps: the track does not count at all.
    track.in_roi = vec![false, false];
    assert_eq!(track_missed(&track, 5, 2.0), None);
}

#[test]
fn displacement_errors_have_closed_forms() {
    let gt = vec![v(0.0, 0.0), v(1.0, 0.0), v(2.0, 0.0)];
    let pred = vec![v(0.0, 1.0), v(1.0, 2.0), v(2.0, 3.0)];
    assert!((ade(&pred, &gt).unwrap() - 2.0).abs() < 1e-12);
    assert!((fde(&pred, &gt).unwrap() - 3.0).abs() < 1e-12);
    // Equal non-empty lengths are required.
    assert!(ade(&pred[..2], &gt).is_err());
    assert!(fde(&[], &[]).is_err());
}

#[test]
fn min_errors_never_increase_with_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for _ in 0..20 {
        let gt: Vec<Vec2> = (0..12)
            .map(|k| v(k as f64, rng.gen_range(-1.0..1.0)))
            .collect();
        let modes: Vec<ModeTraj> = (0..6)
            .map(|_| ModeTraj {
                prob: (rng.gen_range(1..=10) as f64) / 10.0,
                points: (0..12)
                    .map(|k| v(k as f64 + rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                    .collect(),
            })
            .collect();
        let track = EvalTrack {
            gt,
            in_roi: vec![true; 12],
            modes,
            step_points: vec![],
            drivable: vec![],
        };
        let mut last_ade = f64::INFINITY;
        let mut last_fde = f64::INFINITY;
        for k in 1..=6 {
            let a = min_ade(&track, k).unwrap().unwrap();
            let f = min_fde(&track, k).unwrap().unwrap();
            assert!(a <= last_ade + 1e-15, "min ADE rose at K={k}");
            assert!(f <= last_fde + 1e-15, "min FDE rose at K={k}");
            last_ade = a;
            last_fde = f;
        }
        // K=6 sees every mode: equals the unrestricted minimum.
        let full: f64 = track
            .modes
            .iter()
            .map(|m| ade(&m.points, &track.gt).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((last_ade - full).abs() < 1e-12);
    }
}

#[test]
fn top_k_is_a_stable_descending_sort() {
    let modes = vec![
        ModeTraj { prob: 0.5, points: vec![v(1.0, 0.0)] },
        ModeTraj { prob: 0.9, points: vec![v(2.0, 0.0)] },
        ModeTraj { prob: 0.5, points: vec![v(3.0, 0.0)] },
    ];
    let top = top_k(&modes, 2);
    assert_eq!(top[0].points[0].x, 2.0);
    // Tie between the two 0.5 modes resolves to input order.
    assert_eq!(top[1].points[0].x, 1.0);
    assert_eq!(top_k(&modes, 10).len(), 3);
}

#[test]
fn off_road_uses_boundary_inclusive_union() {
    let rect = |x0: f64, y0: f64, x1: f64, y1: f64| vec![v(x0, y0), v(x1, y0), v(x1, y1), v(x0, y1)];
    let drivable = vec![rect(0.0, 0.0, 10.0, 4.0), rect(8.0, 0.0, 12.0, 10.0)];
    // Entirely inside the first rectangle.
    assert!(!mode_off_road(&[v(1.0, 1.0), v(5.0, 3.0)], &drivable));
    // Straddling the union is fine.
    assert!(!mode_off_road(&[v(5.0, 2.0), v(9.0, 8.0)], &drivable));
    // On the shared edge: boundaries count as inside.
    assert!(!mode_off_road(&[v(10.0, 4.0)], &drivable));
    // One point outside every polygon flags the mode.
    assert!(mode_off_road(&[v(1.0, 1.0), v(4.0, 9.0)], &drivable));
}

#[test]
fn constant_velocity_baseline_closed_form() {
    let m = constant_velocity_baseline(v(1.0, 2.0), v(3.0, -1.0), 4, 0.5);
    assert_eq!(m.prob, 1.0);
    assert_eq!(m.points.len(), 4);
    let want = [v(2.5, 1.5), v(4.0, 1.0), v(5.5, 0.5), v(7.0, 0.0)];
    for (p, w) in m.points.iter().zip(&want) {
        assert!(p.dist(*w) < 1e-12);
    }
}

/// Rectangle fixture: corners plus an independent containment test, so the
/// reference never leans on the production point-in-polygon routine.
#[derive(Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
    fn polygon(&self) -> Vec<Vec2> {
        vec![
            v(self.x0, self.y0),
            v(self.x1, self.y0),
            v(self.x1, self.y1),
            v(self.x0, self.y1),
        ]
    }
}

struct Fixture {
    tracks: Vec<EvalTrack>,
    rects: Vec<Vec<Rect>>,
}

fn random_fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let n_tracks = rng.gen_range(1..=10);
    let steps = 12;
    let mut tracks = Vec::new();
    let mut rects_all = Vec::new();
    for _ in 0..n_tracks {
        let gt: Vec<Vec2> = (0..steps)
            .map(|k| v(k as f64 * 1.5 + rng.gen_range(-1.0..1.0), rng.gen_range(-6.0..6.0)))
            .collect();
        // Bias toward mostly-visible tracks but keep fully-out ones in the mix.
        let in_roi: Vec<bool> = (0..steps).map(|_| rng.gen_range(0..10) < 8).collect();
        let use_modes = rng.gen_range(0..4) > 0;
        let (modes, step_points) = if use_modes {
            let n_modes = rng.gen_range(1..=7);
            let modes = (0..n_modes)
                .map(|_| ModeTraj {
                    prob: (rng.gen_range(1..=10) as f64) / 10.0,
                    points: gt
                        .iter()
                        .map(|g| v(g.x + rng.gen_range(-3.0..3.0), g.y + rng.gen_range(-3.0..3.0)))
                        .collect(),
                })
                .collect();
            (modes, vec![])
        } else {
            let pts = (0..steps)
                .map(|k| {
                    (0..rng.gen_range(0..5))
                        .map(|_| {
                            v(
                                gt[k].x + rng.gen_range(-3.0..3.0),
                                gt[k].y + rng.gen_range(-3.0..3.0),
                            )
                        })
                        .collect()
                })
                .collect();
            (vec![], pts)
        };
        let rects: Vec<Rect> = (0..rng.gen_range(1..=2))
            .map(|_| {
                let x0 = rng.gen_range(-5.0..5.0);
                let y0 = rng.gen_range(-8.0..0.0);
                Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(5.0..25.0),
                    y1: y0 + rng.gen_range(4.0..14.0),
                }
            })
            .collect();
        tracks.push(EvalTrack {
            gt,
            in_roi,
            modes,
            step_points,
            drivable: rects.iter().map(Rect::polygon).collect(),
        });
        rects_all.push(rects);
    }
    Fixture { tracks, rects: rects_all }
}

/// From-scratch re-computation of every report field, plain loops over the
/// metric definitions.
fn reference_report(fix: &Fixture, ks: &[usize], radius: f64) -> MetricsReport {
    let steps = 12usize;
    let max_k = ks.iter().copied().max().unwrap();
    let mut miss_cnt = vec![0usize; steps];
    let mut pop = vec![0usize; steps];
    let (mut n_tracks, mut n_missed, mut ade_tracks, mut mode_count, mut off_road) =
        (0, 0, 0, 0, 0);
    let mut ade_sums = vec![0.0; ks.len()];
    let mut fde_sums = vec![0.0; ks.len()];
    let mut any_modes = false;

    for (track, rects) in fix.tracks.iter().zip(&fix.rects) {
        if !track.in_roi.iter().any(|&f| f) {
            continue;
        }
        let cands = |step: usize| -> Vec<Vec2> {
            if track.modes.is_empty() {
                track.step_points[step].clone()
            } else {
                track.modes.iter().map(|m| m.points[step]).collect()
            }
        };
        let mut track_miss = false;
        for s in 0..steps {
            if !track.in_roi[s] {
                continue;
            }
            pop[s] += 1;
            let covered = cands(s).iter().any(|c| c.dist(track.gt[s]) <= radius);
            if !covered {
                miss_cnt[s] += 1;
                track_miss = true;
            }
        }
        n_tracks += 1;
        if track_miss {
            n_missed += 1;
        }
        if track.modes.is_empty() {
            continue;
        }
        any_modes = true;
        ade_tracks += 1;
        // Stable descending order by probability.
        let mut order: Vec<usize> = (0..track.modes.len()).collect();
        order.sort_by(|&a, &b| {
            track.modes[b]
                .prob
                .partial_cmp(&track.modes[a].prob)
                .unwrap()
        });
        for (i, &k) in ks.iter().enumerate() {
            let mut best_a = f64::INFINITY;
            let mut best_f = f64::INFINITY;
            for &mi in order.iter().take(k) {
                let pts = &track.modes[mi].points;
                let a: f64 = pts
                    .iter()
                    .zip(&track.gt)
                    .map(|(p, g)| p.dist(*g))
                    .sum::<f64>()
                    / steps as f64;
                best_a = best_a.min(a);
                best_f = best_f.min(pts[steps - 1].dist(track.gt[steps - 1]));
            }
            ade_sums[i] += best_a;
            fde_sums[i] += best_f;
        }
        for &mi in order.iter().take(max_k) {
            mode_count += 1;
            let out = track.modes[mi]
                .points
                .iter()
                .any(|p| !rects.iter().any(|r| r.contains(*p)));
            if out {
                off_road += 1;
            }
        }
    }

    MetricsReport {
        tracks: n_tracks,
        ade_tracks,
        mode_count,
        mr_per_step: miss_cnt
            .iter()
            .zip(&pop)
            .map(|(&m, &n)| if n == 0 { 0.0 } else { m as f64 / n as f64 })
            .collect(),
        mr_track: if n_tracks == 0 {
            0.0
        } else {
            n_missed as f64 / n_tracks as f64
        },
        ks: ks.to_vec(),
        min_ade: if ade_tracks == 0 {
            vec![0.0; ks.len()]
        } else {
            ade_sums.iter().map(|s| s / ade_tracks as f64).collect()
        },
        min_fde: if ade_tracks == 0 {
            vec![0.0; ks.len()]
        } else {
            fde_sums.iter().map(|s| s / ade_tracks as f64).collect()
        },
        off_road_rate: any_modes.then(|| off_road as f64 / mode_count as f64),
    }
}

#[test]
fn aggregate_matches_reference_on_randomized_fixtures() {
    let ks = [1usize, 2, 5];
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    for trial in 0..100 {
        let fix = random_fixture(&mut rng);
        let got = aggregate(&fix.tracks, &ks, 2.0).unwrap();
        let want = reference_report(&fix, &ks, 2.0);
        assert_eq!(got.tracks, want.tracks, "trial {trial}");
        assert_eq!(got.ade_tracks, want.ade_tracks, "trial {trial}");
        assert_eq!(got.mode_count, want.mode_count, "trial {trial}");
        assert!((got.mr_track - want.mr_track).abs() < 1e-12, "trial {trial}");
        assert_eq!(got.mr_per_step.len(), want.mr_per_step.len());
        for (g, w) in got.mr_per_step.iter().zip(&want.mr_per_step) {
            assert!((g - w).abs() < 1e-12, "trial {trial} per-step {g} vs {w}");
        }
        for (g, w) in got.min_ade.iter().zip(&want.min_ade) {
            assert!((g - w).abs() < 1e-9, "trial {trial} min_ade {g} vs {w}");
        }
        for (g, w) in got.min_fde.iter().zip(&want.min_fde) {
            assert!((g - w).abs() < 1e-9, "trial {trial} min_fde {g} vs {w}");
        }
        match (got.off_road_rate, want.off_road_rate) {
            (None, None) => {}
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "trial {trial} off-road"),
            other => panic!("trial {trial} off-road presence mismatch {other:?}"),
        }
    }
}

#[test]
fn aggregate_validates_and_handles_edge_cases() {
    // Mismatched ROI mask length is rejected.
    let bad = EvalTrack {
        gt: vec![v(0.0, 0.0), v(1.0, 0.0)],
        in_roi: vec![true],
        modes: vec![],
        step_points: vec![],
        drivable: vec![],
    };
    assert!(aggregate(&[bad], &[1], 2.0).is_err());

    // No tracks at all produces an all-zero report without modes.
    let r = aggregate(&[], &[1, 5], 2.0).unwrap();
    assert_eq!(r.tracks, 0);
    assert_eq!(r.mr_track, 0.0);
    assert_eq!(r.min_ade, vec![0.0, 0.0]);
    assert!(r.off_road_rate.is_none());

    // Grid-point evaluation: no modes anywhere, displacement columns stay
    // zero and the off-road rate is absent.
    let track = EvalTrack {
        gt: vec![v(0.0, 0.0), v(1.0, 0.0)],
        in_roi: vec![true, true],
        modes: vec![],
        step_points: vec![vec![v(0.5, 0.0)], vec![v(1.5, 0.0)]],
        drivable: vec![],
    };
    let r = aggregate(&[track], &[1], 2.0).unwrap();
    assert_eq!(r.tracks, 1);
    assert_eq!(r.ade_tracks, 0);
    assert_eq!(r.mr_track, 0.0);
    assert!(r.off_road_rate.is_none());
}

#[test]
fn csv_serialization_is_well_formed() {
    assert!(MetricsReport::csv_header().ends_with('\n'));
    let header_cols = MetricsReport::csv_header().trim_end().split(',').count();
    let report = MetricsReport {
        tracks: 3,
        ade_tracks: 2,
        mode_count: 6,
        mr_per_step: vec![0.0, 0.5],
        mr_track: 1.0 / 3.0,
        ks: vec![1, 5],
        min_ade: vec![1.25, 0.75],
        min_fde: vec![2.0, 1.0],
        off_road_rate: Some(0.5),
    };
    let row = report.csv_row();
    assert!(row.ends_with('\n'));
    let cols: Vec<&str> = row.trim_end().split(',').collect();
    assert_eq!(cols.len(), header_cols);
    assert_eq!(cols[0], "3");
    assert_eq!(cols[4], "1;5");
    assert_eq!(cols[5], "1.250000;0.750000");
    assert_eq!(cols[7], "0.500000");

    // Without modes the final column is empty but present.
    let no_modes = MetricsReport { off_road_rate: None, ..report };
    let cols2: Vec<String> = no_modes
        .csv_row()
        .trim_end()
        .split(',')
        .map(str::to_owned)
        .collect();
    assert_eq!(cols2.len(), header_cols);
    assert!(cols2[7].is_empty());
}
