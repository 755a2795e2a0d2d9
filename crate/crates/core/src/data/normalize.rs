use std::fmt;
use std::str::FromStr;

use super::Sample;
use crate::error::{Error, Result};

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over every pixel of `samples`, which must agree on
    /// channel count.
    pub fn compute(samples: &[Sample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::data("cannot compute statistics of an empty sample list"));
        };
        let c = first.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for s in samples {
            if s.channels() != c {
                return Err(Error::data(format!(
                    "{} has {} channels, expected {c}",
                    s.source_id,
                    s.channels()
                )));
            }
            for px in s.image.data().chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                }
            }
            n += s.height() * s.width();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for s in samples {
            for px in s.image.data().chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    sq[k] += (v as f64 - mean[k]).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl fmt::Display for ChannelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        write!(f, "{};{}", join(&self.mean), join(&self.std))
    }
}

impl FromStr for ChannelStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::data(format!("malformed channel statistics {s:?}"));
        let (m, d) = s.split_once(';').ok_or_else(bad)?;
        let parse = |p: &str| {
            p.split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()
        };
        let (mean, std) = (parse(m)?, parse(d)?);
        if mean.len() != std.len() || mean.is_empty() {
            return Err(bad());
        }
        Ok(Self { mean, std })
    }
}

/// `(x − mean) / std` per channel; the mask is untouched.
pub fn normalize(s: &Sample, stats: &ChannelStats) -> Result<Sample> {
    let c = s.channels();
    if stats.channels() != c {
        return Err(Error::dim(format!(
            "statistics cover {} channels but {} has {c}",
            stats.channels(),
            s.source_id
        )));
    }
    if let Some(k) = stats.std.iter().position(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::data(format!(
            "channel {k} has standard deviation {}; cannot normalize",
            stats.std[k]
        )));
    }
    let mut image = s.image.clone();
    for px in image.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[k]) / stats.std[k]) as f32;
        }
    }
    Ok(Sample {
        image,
        mask: s.mask.clone(),
        source_id: s.source_id.clone(),
        origin: s.origin,
    })
}
