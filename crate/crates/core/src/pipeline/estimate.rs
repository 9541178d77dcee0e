//! Motion recovery from rendered or generated frames: foreground centroid
//! track, least-squares fit of every motion family, and a normalised
//! parameter distance to a reference specification.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    foreground_centroid, Frames, MotionKind, MotionSpec, OscillationAxis, RenderDims,
    SamplingRanges,
};
use crate::error::{Error, Result};

/// A more complex family must beat a simpler one by this much mean squared
/// residual (px²) and by this factor to be preferred.
const PREFERENCE_MARGIN: f64 = 0.05;
const PREFERENCE_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionEstimate {
    pub spec: MotionSpec,
    /// Mean squared distance (px²) between the centroid track and the fit.
    pub residual: f64,
    /// Fitted position at frame 0.
    pub start: (f64, f64),
    /// Frames with foreground.
    pub tracked_frames: usize,
}

/// Centroid per frame; frames without foreground are skipped.
pub fn centroid_track(frames: &Frames) -> Vec<(f64, (f64, f64))> {
    (0..frames.dim().0)
        .filter_map(|t| foreground_centroid(frames, t).map(|c| (t as f64, c)))
        .collect()
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (x, &p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least squares over rows `(features, target)`; returns coefficients and
/// the residual sum of squares.
fn least_squares(rows: &[(Vec<f64>, f64)]) -> Option<(Vec<f64>, f64)> {
    let n = rows.first()?.0.len();
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    for (f, y) in rows {
        for i in 0..n {
            atb[i] += f[i] * y;
            for j in 0..n {
                ata[i][j] += f[i] * f[j];
            }
        }
    }
    let coef = solve(ata, atb)?;
    let rss = rows
        .iter()
        .map(|(f, y)| (f.iter().zip(&coef).map(|(a, c)| a * c).sum::<f64>() - y).powi(2))
        .sum();
    Some((coef, rss))
}

fn grid(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(move |i| lo + step * i as f64)
}

struct Fit {
    spec: MotionSpec,
    start: (f64, f64),
    rss: f64,
}

fn fit_linear(track: &[(f64, (f64, f64))]) -> Option<Fit> {
    let xs: Vec<_> = track
        .iter()
        .map(|(t, (x, _))| (vec![1.0, *t], *x))
        .collect();
    let ys: Vec<_> = track
        .iter()
        .map(|(t, (_, y))| (vec![1.0, *t], *y))
        .collect();
    let (cx, rx) = least_squares(&xs)?;
    let (cy, ry) = least_squares(&ys)?;
    Some(Fit {
        spec: MotionSpec::Linear {
            vx: cx[1],
            vy: cy[1],
        },
        start: (cx[0], cy[0]),
        rss: rx + ry,
    })
}

fn fit_oscillation(track: &[(f64, (f64, f64))]) -> Option<Fit> {
    let mut best: Option<Fit> = None;
    for axis in [OscillationAxis::Horizontal, OscillationAxis::Vertical] {
        let (moving, fixed): (Vec<_>, Vec<_>) = track
            .iter()
            .map(|(t, (x, y))| match axis {
                OscillationAxis::Horizontal => ((*t, *x), *y),
                OscillationAxis::Vertical => ((*t, *y), *x),
            })
            .unzip();
        let mean_fixed = fixed.iter().sum::<f64>() / fixed.len() as f64;
        let fixed_rss: f64 = fixed.iter().map(|v| (v - mean_fixed).powi(2)).sum();
        for freq in grid(0.02, 0.5, 0.001) {
            let rows: Vec<_> = moving
                .iter()
                .map(|(t, v)| (vec![1.0, (2.0 * PI * freq * t).sin()], *v))
                .collect();
            let Some((c, rss)) = least_squares(&rows) else {
                continue;
            };
            let rss = rss + fixed_rss;
            if best.as_ref().is_none_or(|b| rss < b.rss) {
                let (amplitude, freq) = if c[1] < 0.0 {
                    (-c[1], -freq)
                } else {
                    (c[1], freq)
                };
                let start = match axis {
                    OscillationAxis::Horizontal => (c[0], mean_fixed),
                    OscillationAxis::Vertical => (mean_fixed, c[0]),
                };
                best = Some(Fit {
                    spec: MotionSpec::Oscillation {
                        amplitude,
                        freq,
                        axis,
                    },
                    start,
                    rss,
                });
            }
        }
    }
    best
}

fn fit_circular(track: &[(f64, (f64, f64))]) -> Option<Fit> {
    let mut best: Option<Fit> = None;
    for omega in grid(-1.5, 1.5, 0.002).filter(|w| w.abs() >= 0.1) {
        // p_t = c + (A cos ωt − B sin ωt, A sin ωt + B cos ωt), A = r cos φ, B = r sin φ.
        let mut rows = Vec::with_capacity(2 * track.len());
        for (t, (x, y)) in track {
            let (s, c) = (omega * t).sin_cos();
            rows.push((vec![1.0, 0.0, c, -s], *x));
            rows.push((vec![0.0, 1.0, s, c], *y));
        }
        let Some((k, rss)) = least_squares(&rows) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| rss < b.rss) {
            let radius = k[2].hypot(k[3]);
            let phase = k[3].atan2(k[2]).rem_euclid(2.0 * PI);
            best = Some(Fit {
                spec: MotionSpec::Circular {
                    radius,
                    omega,
                    phase,
                },
                start: (k[0] + k[2], k[1] + k[3]),
                rss,
            });
        }
    }
    best
}

/// Fits all motion families to the centroid track and keeps the best, with
/// ties resolved toward the simpler family (linear, then oscillation, then
/// circular).
pub fn estimate_motion(frames: &Frames) -> Result<MotionEstimate> {
    let track = centroid_track(frames);
    if track.is_empty() {
        return Err(Error::NoForeground);
    }
    let n = track.len() as f64;
    if track.len() < 2 {
        let (_, start) = track[0];
        return Ok(MotionEstimate {
            spec: MotionSpec::Linear { vx: 0.0, vy: 0.0 },
            residual: 0.0,
            start,
            tracked_frames: 1,
        });
    }
    let mut chosen = fit_linear(&track).ok_or(Error::NoForeground)?;
    let candidates = if track.len() >= 4 {
        vec![fit_oscillation(&track), fit_circular(&track)]
    } else {
        vec![]
    };
    for fit in candidates.into_iter().flatten() {
        let (old, new) = (chosen.rss / n, fit.rss / n);
        if new < old * PREFERENCE_RATIO && old - new > PREFERENCE_MARGIN {
            chosen = fit;
        }
    }
    Ok(MotionEstimate {
        spec: chosen.spec,
        residual: chosen.rss / n,
        start: chosen.start,
        tracked_frames: track.len(),
    })
}

/// Largest motion-recovery error; also the score of a family mismatch.
pub const MAX_MOTION_ERROR: f64 = 1.0;

fn wrap_angle(a: f64) -> f64 {
    let a = a.rem_euclid(2.0 * PI);
    if a > PI {
        2.0 * PI - a
    } else {
        a
    }
}

/// Normalised parameter distance in `[0, 1]`: every parameter difference is
/// divided by the width of its sampling range, the root mean square is taken,
/// and the result is clamped. Family or axis mismatches score 1.
pub fn motion_error(estimate: &MotionSpec, truth: &MotionSpec, dims: RenderDims) -> f64 {
    let r = SamplingRanges::for_dims(dims);
    let width = |(lo, hi): (f64, f64)| (hi - lo).max(1e-9);
    let rms =
        |terms: &[f64]| (terms.iter().map(|x| x * x).sum::<f64>() / terms.len() as f64).sqrt();
    let e = match (*estimate, *truth) {
        (MotionSpec::Linear { vx, vy }, MotionSpec::Linear { vx: tx, vy: ty }) => {
            let s = r.linear_speed.1;
            rms(&[(vx - tx) / s, (vy - ty) / s])
        }
        (
            MotionSpec::Circular {
                radius,
                omega,
                phase,
            },
            MotionSpec::Circular {
                radius: tr,
                omega: tw,
                phase: tp,
            },
        ) => rms(&[
            (radius - tr) / width(r.radius),
            (omega - tw) / width(r.omega),
            wrap_angle(phase - tp) / PI,
        ]),
        (
            MotionSpec::Oscillation {
                amplitude,
                freq,
                axis,
            },
            MotionSpec::Oscillation {
                amplitude: ta,
                freq: tf,
                axis: tx,
            },
        ) if axis == tx => rms(&[
            (amplitude - ta) / width(r.amplitude),
            (freq - tf) / width(r.freq),
        ]),
        _ => MAX_MOTION_ERROR,
    };
    e.min(MAX_MOTION_ERROR)
}

pub fn family(spec: &MotionSpec) -> MotionKind {
    spec.kind()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_video, synthesize_video, AppearanceSpec, ShapeKind};

    #[test]
    fn static_video_is_linear_and_still() {
        let app = AppearanceSpec {
            shape: ShapeKind::Square,
            color: [0.9, 0.9, 0.9],
            size: 6.0,
            x0: 16.0,
            y0: 16.0,
        };
        let v = render_video(
            &app,
            &MotionSpec::Linear { vx: 0.0, vy: 0.0 },
            RenderDims::default(),
        )
        .unwrap();
        let e = estimate_motion(&v).unwrap();
        match e.spec {
            MotionSpec::Linear { vx, vy } => assert!(vx.abs() < 1e-9 && vy.abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dark_frames_have_no_foreground() {
        assert!(matches!(
            estimate_motion(&Frames::from_elem((8, 32, 32, 3), 0.05)),
            Err(Error::NoForeground)
        ));
    }

    #[test]
    fn first_corpus_items_are_recovered() {
        let dims = RenderDims::default();
        for i in 0..30 {
            let v = synthesize_video(11, i, dims).unwrap();
            let e = estimate_motion(&v.frames).unwrap();
            assert_eq!(
                e.spec.kind(),
                v.motion.kind(),
                "{} {:?} -> {:?}",
                v.id,
                v.motion,
                e.spec
            );
        }
    }

    #[test]
    fn error_is_zero_on_truth_and_one_on_family_mismatch() {
        let d = RenderDims::default();
        let c = MotionSpec::Circular {
            radius: 4.0,
            omega: 0.5,
            phase: 1.0,
        };
        assert_eq!(motion_error(&c, &c, d), 0.0);
        assert_eq!(
            motion_error(&MotionSpec::Linear { vx: 0.0, vy: 0.0 }, &c, d),
            1.0
        );
        let h = MotionSpec::Oscillation {
            amplitude: 4.0,
            freq: 0.2,
            axis: OscillationAxis::Horizontal,
        };
        let v = MotionSpec::Oscillation {
            amplitude: 4.0,
            freq: 0.2,
            axis: OscillationAxis::Vertical,
        };
        assert_eq!(motion_error(&h, &v, d), 1.0);
        let near = MotionSpec::Circular {
            radius: 4.4,
            omega: 0.5,
            phase: 1.0,
        };
        assert!(motion_error(&near, &c, d) > 0.0 && motion_error(&near, &c, d) < 0.1);
    }
}
