//! Forward models from rendered sharp frames to observations: averaged blur
//! and signed inter-frame event counts, plus binning of event streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::to_log;

/// The `p` virtual sharp frames of one view, in timestamp order.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedStack {
    pub timestamps: Vec<f64>,
    pub images: Vec<Image>,
}

impl RenderedStack {
    pub fn new(timestamps: Vec<f64>, images: Vec<Image>) -> Result<Self> {
        if images.is_empty() || images.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} frames with {} timestamps",
                images.len(),
                timestamps.len()
            )));
        }
        for img in &images[1..] {
            images[0].same_shape(img)?;
        }
        if timestamps.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("frame timestamps must be strictly increasing".into()));
        }
        Ok(Self { timestamps, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images[0].width
    }

    pub fn height(&self) -> usize {
        self.images[0].height
    }

    pub fn gray(&self, i: usize) -> Vec<f64> {
        self.images[i].gray()
    }

    pub fn log_intensity(&self, i: usize) -> Vec<f64> {
        self.gray(i).into_iter().map(to_log).collect()
    }
}

/// Signed per-pixel event counts for each pair of adjacent timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventBinGrid {
    pub width: usize,
    pub height: usize,
    /// `bins[i][y * width + x]` covers `[t_i, t_{i+1})`.
    pub bins: Vec<Vec<f64>>,
}

impl EventBinGrid {
    pub fn zeros(width: usize, height: usize, bins: usize) -> Self {
        Self { width, height, bins: vec![vec![0.0; width * height]; bins] }
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn at(&self, bin: usize, x: usize, y: usize) -> f64 {
        self.bins[bin][y * self.width + x]
    }

    pub fn same_shape(&self, other: &EventBinGrid) -> Result<()> {
        if (self.width, self.height, self.bins.len()) != (other.width, other.height, other.bins.len()) {
            return Err(Error::Shape(format!(
                "event grids {}x{}x{} vs {}x{}x{}",
                self.width,
                self.height,
                self.bins.len(),
                other.width,
                other.height,
                other.bins.len()
            )));
        }
        Ok(())
    }

    /// Per-pixel sum over all bins.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height];
        for bin in &self.bins {
            for (o, v) in out.iter_mut().zip(bin) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub x: usize,
    pub y: usize,
    /// `+1` brighter, `-1` darker.
    pub polarity: i8,
}

/// Blurry image as the per-channel mean of the sharp frames.
pub fn synthesize_blur(stack: &RenderedStack) -> Result<Image> {
    let first = &stack.images[0];
    let mut acc = vec![0.0; first.data.len()];
    for img in &stack.images {
        first.same_shape(img)?;
        for (a, v) in acc.iter_mut().zip(&img.data) {
            *a += v;
        }
    }
    let inv = 1.0 / stack.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Image::new(first.width, first.height, acc)
}

/// Predicted counts `(L_{i+1} − L_i) / Θ`. With `quantized` each count is
/// truncated toward zero, i.e. only whole threshold crossings are kept.
pub fn predict_events(stack: &RenderedStack, theta: f64, quantized: bool) -> Result<EventBinGrid> {
    if !(theta > 0.0) {
        return Err(Error::Invalid(format!("event threshold must be positive, got {theta}")));
    }
    if stack.len() < 2 {
        return Err(Error::Invalid("event prediction needs at least two frames".into()));
    }
    let logs: Vec<Vec<f64>> = (0..stack.len()).map(|i| stack.log_intensity(i)).collect();
    let bins = logs
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| {
                    let e = (b - a) / theta;
                    if quantized { e.trunc() } else { e }
                })
                .collect()
        })
        .collect();
    Ok(EventBinGrid { width: stack.width(), height: stack.height(), bins })
}

/// Result of [`bin_events`]; `dropped` counts events outside `[t_1, t_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedEvents {
    pub grid: EventBinGrid,
    pub dropped: usize,
}

/// Signed event sums over the half-open intervals `[t_i, t_{i+1})`; the last
/// interval is closed so an event at exactly `t_p` is kept.
pub fn bin_events(stream: &[EventRecord], timestamps: &[f64], width: usize, height: usize) -> Result<BinnedEvents> {
    if timestamps.len() < 2 {
        return Err(Error::Invalid("binning needs at least two timestamps".into()));
    }
    if timestamps.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid("bin timestamps must be strictly increasing".into()));
    }
    if let Some(e) = stream.iter().find(|e| e.x >= width || e.y >= height) {
        return Err(Error::Invalid(format!(
            "event at pixel ({}, {}) outside {width}x{height} sensor",
            e.x, e.y
        )));
    }
    let nb = timestamps.len() - 1;
    let mut sorted = stream.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut grid = EventBinGrid::zeros(width, height, nb);
    let (t0, t_end) = (timestamps[0], timestamps[nb]);
    let mut dropped = 0;
    for e in &sorted {
        if !(e.t >= t0 && e.t <= t_end) {
            dropped += 1;
            continue;
        }
        // Number of interior boundaries at or before t picks the bin.
        let bin = timestamps[1..nb].partition_point(|&b| b <= e.t);
        grid.bins[bin][e.y * width + e.x] += f64::from(e.polarity);
    }
    Ok(BinnedEvents { grid, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray_image(values: &[f64]) -> Image {
        Image::new(values.len(), 1, values.iter().flat_map(|&v| [v; 3]).collect()).unwrap()
    }

    #[test]
    fn blur_examples() {
        let a = gray_image(&[0.2, 0.9]);
        let single = RenderedStack::new(vec![0.0], vec![a.clone()]).unwrap();
        assert_eq!(synthesize_blur(&single).unwrap(), a);

        let same = RenderedStack::new(vec![0.0, 1.0, 2.0], vec![a.clone(); 3]).unwrap();
        assert_eq!(synthesize_blur(&same).unwrap(), a);

        let pair = RenderedStack::new(vec![0.0, 1.0], vec![gray_image(&[0.2]), gray_image(&[0.6])]).unwrap();
        assert_eq!(synthesize_blur(&pair).unwrap().data, vec![0.4; 3]);
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let r = RenderedStack::new(vec![0.0, 1.0], vec![gray_image(&[0.2]), gray_image(&[0.6, 0.1])]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn event_prediction_examples() {
        let a = gray_image(&[0.3, 0.7]);
        let still = RenderedStack::new(vec![0.0, 1.0], vec![a.clone(), a]).unwrap();
        let e = predict_events(&still, 0.3, false).unwrap();
        assert!(e.bins[0].iter().all(|&v| v == 0.0));

        // Gray g0, g1 with ln(g1 + ε) − ln(g0 + ε) = 0.9 exactly in real arithmetic.
        let g0 = 0.2;
        let g1 = (g0 + crate::render::LOG_EPS) * 0.9f64.exp() - crate::render::LOG_EPS;
        let s = RenderedStack::new(vec![0.0, 1.0], vec![gray_image(&[g0]), gray_image(&[g1])]).unwrap();
        let e = predict_events(&s, 0.3, false).unwrap();
        assert!((e.bins[0][0] - 3.0).abs() < 1e-12);
        let q = predict_events(&s, 0.3, true).unwrap();
        assert!(q.bins[0][0] == 3.0 || q.bins[0][0] == 2.0);

        assert!(predict_events(&s, 0.0, false).is_err());
    }

    #[test]
    fn quantized_counts_truncate_toward_zero() {
        let s = RenderedStack::new(vec![0.0, 1.0, 2.0], vec![gray_image(&[0.1]), gray_image(&[0.5]), gray_image(&[0.1])])
            .unwrap();
        let q = predict_events(&s, 0.3, true).unwrap();
        let c = predict_events(&s, 0.3, false).unwrap();
        assert_eq!(q.bins[0][0], c.bins[0][0].floor());
        assert_eq!(q.bins[1][0], c.bins[1][0].ceil());
    }

    fn ev(t: f64, x: usize, polarity: i8) -> EventRecord {
        EventRecord { t, x, y: 0, polarity }
    }

    #[test]
    fn binning_examples() {
        let ts = [0.0, 0.5, 1.0];
        let empty = bin_events(&[], &ts, 2, 1).unwrap();
        assert_eq!(empty.grid, EventBinGrid::zeros(2, 1, 2));

        let stream = [ev(0.1, 1, 1), ev(0.2, 1, 1), ev(0.3, 1, -1), ev(0.4, 1, 1)];
        let b = bin_events(&stream, &ts, 2, 1).unwrap();
        assert_eq!(b.grid.at(0, 1, 0), 2.0);
        assert_eq!(b.grid.at(1, 1, 0), 0.0);

        let edge = bin_events(&[ev(0.5, 0, 1)], &ts, 2, 1).unwrap();
        assert_eq!((edge.grid.at(0, 0, 0), edge.grid.at(1, 0, 0)), (0.0, 1.0));

        let end = bin_events(&[ev(1.0, 0, -1), ev(1.5, 0, 1), ev(-0.1, 0, 1)], &ts, 2, 1).unwrap();
        assert_eq!(end.grid.at(1, 0, 0), -1.0);
        assert_eq!(end.dropped, 2);

        assert!(bin_events(&[ev(0.1, 2, 1)], &ts, 2, 1).is_err());
    }

    #[test]
    fn unsorted_streams_bin_like_sorted_ones() {
        let ts = [0.0, 0.3, 0.6, 1.0];
        let stream = [ev(0.9, 0, 1), ev(0.1, 1, -1), ev(0.45, 0, 1), ev(0.3, 1, 1)];
        let mut sorted = stream;
        sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
        assert_eq!(bin_events(&stream, &ts, 2, 1).unwrap(), bin_events(&sorted, &ts, 2, 1).unwrap());
    }

    proptest! {
        #[test]
        fn predicted_events_telescope(
            frames in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 2..7),
            theta in 0.05f64..1.0,
        ) {
            let images: Vec<Image> = frames.iter().map(|f| gray_image(f)).collect();
            let ts = (0..images.len()).map(|i| i as f64).collect();
            let stack = RenderedStack::new(ts, images).unwrap();
            let grid = predict_events(&stack, theta, false).unwrap();
            let first = stack.log_intensity(0);
            let last = stack.log_intensity(stack.len() - 1);
            for (px, total) in grid.total().iter().enumerate() {
                let expect = (last[px] - first[px]) / theta;
                prop_assert!((total - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn blur_stays_in_unit_range(frames in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 12), 1..6)) {
            let images: Vec<Image> = frames.into_iter().map(|f| Image::new(2, 2, f).unwrap()).collect();
            let ts = (0..images.len()).map(|i| i as f64).collect();
            let b = synthesize_blur(&RenderedStack::new(ts, images).unwrap()).unwrap();
            prop_assert!(b.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn reversed_polarity_cancels(
            raw in prop::collection::vec((0.0f64..1.2, 0usize..3, 0usize..2, prop::bool::ANY), 0..40),
        ) {
            let stream: Vec<EventRecord> = raw
                .iter()
                .map(|&(t, x, y, up)| EventRecord { t, x, y, polarity: if up { 1 } else { -1 } })
                .collect();
            let flipped: Vec<EventRecord> = stream.iter().map(|e| EventRecord { polarity: -e.polarity, ..*e }).collect();
            let ts = [0.0, 0.25, 0.5, 1.0];
            let a = bin_events(&stream, &ts, 3, 2).unwrap().grid;
            let b = bin_events(&flipped, &ts, 3, 2).unwrap().grid;
            for (ba, bb) in a.bins.iter().zip(&b.bins) {
                prop_assert!(ba.iter().zip(bb).all(|(x, y)| x + y == 0.0));
            }
        }
    }
}
