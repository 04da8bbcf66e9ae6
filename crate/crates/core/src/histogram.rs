//! Channel geometry and the `pals-histogram v1` text format.
//!
//! ```text
//! # pals-histogram v1
//! # channel_width_ns=0.5
//! # n_channels=4096
//! # live_time_s=1000
//! # seed=1
//! # <any other key>=<value>
//! 0 12
//! 1 9
//! ...
//! ```
//!
//! Header lines start with `#`; those containing `=` are metadata. Body lines
//! are `<index> <count>` in channel order, LF-terminated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{domain, Error, Result};

pub const HISTOGRAM_MAGIC: &str = "pals-histogram v1";

/// Keys every histogram file must carry.
pub const REQUIRED_KEYS: [&str; 4] = ["channel_width_ns", "n_channels", "live_time_s", "seed"];

/// Channel `k` covers `[k·w, (k+1)·w)` ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelGeometry {
    pub channel_width: f64,
    pub n_channels: usize,
}

impl Default for ChannelGeometry {
    fn default() -> Self {
        Self { channel_width: 0.5, n_channels: 4096 }
    }
}

impl ChannelGeometry {
    pub fn new(channel_width: f64, n_channels: usize) -> Result<Self> {
        let g = Self { channel_width, n_channels };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(domain("geometry needs at least one channel"));
        }
        if !(self.channel_width.is_finite() && self.channel_width > 0.0) {
            return Err(domain(format!(
                "channel width must be positive and finite, got {}",
                self.channel_width
            )));
        }
        Ok(())
    }

    /// Lower edge of channel `k` (or upper edge of `k − 1`), ns.
    #[inline]
    pub fn edge(&self, k: usize) -> f64 {
        k as f64 * self.channel_width
    }

    /// Total time span, ns.
    pub fn span(&self) -> f64 {
        self.edge(self.n_channels)
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.channel_width
    }

    /// Channel containing time `t`, if inside the axis.
    pub fn channel_of(&self, t: f64) -> Option<usize> {
        if !(t >= 0.0) {
            return None;
        }
        let k = (t / self.channel_width) as usize;
        (k < self.n_channels).then_some(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub geometry: ChannelGeometry,
    pub counts: Vec<u64>,
    /// Live time, s.
    pub live_time: f64,
    pub metadata: BTreeMap<String, String>,
}

impl Histogram {
    pub fn zeros(geometry: ChannelGeometry, live_time: f64) -> Self {
        Self {
            geometry,
            counts: vec![0; geometry.n_channels],
            live_time,
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_counts(geometry: ChannelGeometry, counts: Vec<u64>, live_time: f64) -> Result<Self> {
        geometry.validate()?;
        if counts.len() != geometry.n_channels {
            return Err(Error::Geometry(format!(
                "{} counts for {} channels",
                counts.len(),
                geometry.n_channels
            )));
        }
        Ok(Self { geometry, counts, live_time, metadata: BTreeMap::new() })
    }

    pub fn n_channels(&self) -> usize {
        self.geometry.n_channels
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn seed(&self) -> Option<u64> {
        self.metadata.get("seed").and_then(|s| s.parse().ok())
    }

    /// Serializes to `pals-histogram v1`. Output is a pure function of the value.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 * self.counts.len() + 256);
        let _ = writeln!(s, "# {HISTOGRAM_MAGIC}");
        let _ = writeln!(s, "# channel_width_ns={}", self.geometry.channel_width);
        let _ = writeln!(s, "# n_channels={}", self.geometry.n_channels);
        let _ = writeln!(s, "# live_time_s={}", self.live_time);
        let _ = writeln!(s, "# seed={}", self.metadata.get("seed").map_or("none", |v| v.as_str()));
        for (k, v) in &self.metadata {
            if REQUIRED_KEYS.contains(&k.as_str()) {
                continue;
            }
            let _ = writeln!(s, "# {k}={}", sanitize(v));
        }
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{i} {c}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fail = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            if let Some(rest) = line.strip_prefix('#') {
                if !counts.is_empty() {
                    return Err(fail("header line after channel data"));
                }
                if let Some((k, v)) = rest.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(idx), Some(count), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(fail("expected `<index> <count>`"));
            };
            let idx: usize = idx.parse().map_err(|_| fail("bad channel index"))?;
            let count: u64 = count.parse().map_err(|_| fail("bad count"))?;
            if idx != counts.len() {
                return Err(fail(&format!("expected channel {}, found {idx}", counts.len())));
            }
            counts.push(count);
        }

        for key in REQUIRED_KEYS {
            if !header.contains_key(key) {
                return Err(Error::Format(format!("missing header key `{key}`")));
            }
        }
        let num = |key: &str| -> Result<f64> {
            header[key]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("header `{key}` is not a number")))
        };
        let n_channels: usize = header["n_channels"]
            .parse()
            .map_err(|_| Error::Format("header `n_channels` is not an integer".into()))?;
        let geometry = ChannelGeometry::new(num("channel_width_ns")?, n_channels)
            .map_err(|e| Error::Format(e.to_string()))?;
        let live_time = num("live_time_s")?;
        if counts.len() != n_channels {
            return Err(Error::Format(format!(
                "truncated histogram: {} of {n_channels} channels present",
                counts.len()
            )));
        }
        let metadata = header
            .into_iter()
            .filter(|(k, _)| k != "channel_width_ns" && k != "n_channels" && k != "live_time_s")
            .collect();
        Ok(Self { geometry, counts, live_time, metadata })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn sanitize(v: &str) -> String {
    v.replace(['\n', '\r'], " ")
}

/// Sums counts and live times. Metadata is kept from the first histogram when
/// all inputs agree on a key and dropped otherwise.
pub fn merge_histograms(hists: &[Histogram]) -> Result<Histogram> {
    let Some(first) = hists.first() else {
        return Err(domain("nothing to merge"));
    };
    let mut out = Histogram::zeros(first.geometry, 0.0);
    for h in hists {
        if h.geometry != first.geometry {
            return Err(Error::Geometry(format!(
                "cannot merge {}×{} ns with {}×{} ns",
                h.geometry.n_channels,
                h.geometry.channel_width,
                first.geometry.n_channels,
                first.geometry.channel_width
            )));
        }
        for (acc, c) in out.counts.iter_mut().zip(&h.counts) {
            *acc += c;
        }
        out.live_time += h.live_time;
    }
    out.metadata = first
        .metadata
        .iter()
        .filter(|(k, v)| hists.iter().all(|h| h.metadata.get(*k) == Some(v)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Histogram {
        let mut h = Histogram::from_counts(ChannelGeometry::new(0.5, 4).unwrap(), vec![3, 0, 7, 1], 12.5)
            .unwrap();
        h.metadata.insert("seed".into(), "9".into());
        h.metadata.insert("scenario.mode".into(), "resonance".into());
        h
    }

    #[test]
    fn text_layout() {
        let text = sample().to_text();
        assert!(text.starts_with("# pals-histogram v1\n# channel_width_ns=0.5\n# n_channels=4\n"));
        assert!(text.ends_with("2 7\n3 1\n"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn missing_key_rejected() {
        let text = sample().to_text().replace("# live_time_s=12.5\n", "");
        match Histogram::parse(&text) {
            Err(Error::Format(msg)) => assert!(msg.contains("live_time_s")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_body_rejected() {
        let text = sample().to_text().replace("3 1\n", "");
        assert!(matches!(Histogram::parse(&text), Err(Error::Format(_))));
        let garbled = sample().to_text().replace("2 7", "2 seven");
        assert!(Histogram::parse(&garbled).is_err());
        let reordered = sample().to_text().replace("2 7", "5 7");
        assert!(Histogram::parse(&reordered).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(ChannelGeometry::new(0.0, 10).is_err());
        assert!(ChannelGeometry::new(0.5, 0).is_err());
        assert!(ChannelGeometry::new(f64::NAN, 10).is_err());
        let g = ChannelGeometry::default();
        assert_eq!(g.span(), 2048.0);
        assert_eq!(g.channel_of(2047.9), Some(4095));
        assert_eq!(g.channel_of(2048.0), None);
        assert_eq!(g.channel_of(-1e-9), None);
    }

    #[test]
    fn merge_identity_and_mismatch() {
        let h = sample();
        let zero = Histogram { counts: vec![0; 4], live_time: 0.0, ..h.clone() };
        assert_eq!(merge_histograms(&[h.clone(), zero]).unwrap(), h);
        let other = Histogram::zeros(ChannelGeometry::new(1.0, 4).unwrap(), 1.0);
        assert!(matches!(merge_histograms(&[h, other]), Err(Error::Geometry(_))));
        assert!(merge_histograms(&[]).is_err());
    }

    fn arb_hist() -> impl Strategy<Value = Histogram> {
        (prop::collection::vec(0u64..1_000_000, 8), 0.0f64..1e4, any::<u64>()).prop_map(|(c, lt, seed)| {
            let mut h = Histogram::from_counts(ChannelGeometry::new(0.25, 8).unwrap(), c, lt).unwrap();
            h.metadata.insert("seed".into(), seed.to_string());
            h
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(h in arb_hist()) {
            prop_assert_eq!(Histogram::parse(&h.to_text()).unwrap(), h);
        }

        #[test]
        fn merge_commutes_and_associates(a in arb_hist(), b in arb_hist(), c in arb_hist()) {
            let ab = merge_histograms(&[a.clone(), b.clone()]).unwrap();
            let ba = merge_histograms(&[b.clone(), a.clone()]).unwrap();
            prop_assert_eq!(&ab.counts, &ba.counts);
            prop_assert_eq!(ab.live_time, ba.live_time);
            let left = merge_histograms(&[ab, c.clone()]).unwrap();
            let right = merge_histograms(&[a, merge_histograms(&[b, c]).unwrap()]).unwrap();
            prop_assert_eq!(left.counts, right.counts);
        }
    }
}
