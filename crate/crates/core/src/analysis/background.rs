use std::ops::Range;

use crate::decay::InstrumentResponse;
use crate::error::{domain, Result};
use crate::histogram::Histogram;

/// Flat accidental level measured in a window before the prompt peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundEstimate {
    /// Counts per channel.
    pub mean: f64,
    pub std_error: f64,
    pub n_channels: usize,
    /// No counts at all in the window; the error is not informative.
    pub degenerate: bool,
}

/// Mean counts per channel over `window`.
pub fn estimate_background(h: &Histogram, window: Range<usize>) -> Result<BackgroundEstimate> {
    if window.is_empty() {
        return Err(domain("background window is empty"));
    }
    if window.end > h.n_channels() {
        return Err(domain(format!(
            "background window {:?} exceeds {} channels",
            window,
            h.n_channels()
        )));
    }
    let xs = &h.counts[window.clone()];
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<u64>() as f64 / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        // a single channel carries its own Poisson variance
        mean
    };
    Ok(BackgroundEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_channels: xs.len(),
        degenerate: mean == 0.0,
    })
}

/// Channels lying entirely before `t0 − 5σ`.
pub fn pre_peak_window(h: &Histogram, irf: &InstrumentResponse) -> Range<usize> {
    let limit = irf.t0 - 5.0 * irf.sigma();
    let end = if limit <= 0.0 { 0 } else { (limit / h.geometry.channel_width).floor() as usize };
    0..end.min(h.n_channels())
}

/// Background from the pre-peak window, rejecting windows that reach into the peak.
pub fn estimate_background_before(
    h: &Histogram,
    window: Range<usize>,
    irf: &InstrumentResponse,
) -> Result<BackgroundEstimate> {
    let allowed = pre_peak_window(h, irf);
    if window.end > allowed.end {
        return Err(domain(format!(
            "background window must end before channel {} (t0 − 5σ)",
            allowed.end
        )));
    }
    estimate_background(h, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::ChannelGeometry;

    fn hist(counts: Vec<u64>) -> Histogram {
        let g = ChannelGeometry::new(0.5, counts.len()).unwrap();
        Histogram::from_counts(g, counts, 1.0).unwrap()
    }

    #[test]
    fn uniform_window() {
        let h = hist(vec![7; 100]);
        let b = estimate_background(&h, 0..40).unwrap();
        assert_eq!(b.mean, 7.0);
        assert_eq!(b.std_error, 0.0);
        assert!(!b.degenerate);
    }

    #[test]
    fn zero_window_is_degenerate() {
        let h = hist(vec![0; 10]);
        let b = estimate_background(&h, 2..8).unwrap();
        assert_eq!((b.mean, b.std_error, b.degenerate), (0.0, 0.0, true));
    }

    #[test]
    fn empty_or_oversized_window_rejected() {
        let h = hist(vec![1; 10]);
        assert!(estimate_background(&h, 3..3).is_err());
        assert!(estimate_background(&h, 0..11).is_err());
    }

    #[test]
    fn window_must_precede_peak() {
        let h = hist(vec![1; 200]);
        let irf = InstrumentResponse { fwhm: 1.7, t0: 50.0 };
        let w = pre_peak_window(&h, &irf);
        assert_eq!(w.end, ((50.0 - 5.0 * irf.sigma()) / 0.5) as usize);
        assert!(estimate_background_before(&h, 0..w.end, &irf).is_ok());
        assert!(estimate_background_before(&h, 0..w.end + 1, &irf).is_err());
    }
}
