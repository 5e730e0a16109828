use serde::{Deserialize, Serialize};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// `None` for an empty sample. Summation is sequential in input order so
    /// the result is reproducible bit for bit.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// Integer form used for corpus statistics, e.g. `184±77`.
    pub fn fmt_int(&self) -> String {
        format!("{}±{}", self.mean.round() as i64, self.std.round() as i64)
    }

    /// Two-decimal form used for metric reports, e.g. `.85±.16` style values as `0.85±0.16`.
    pub fn fmt_2(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let m = MeanStd::of(&[100.0, 300.0]).unwrap();
        assert_eq!((m.mean, m.std), (200.0, 100.0));
        assert_eq!(m.fmt_int(), "200±100");
        assert_eq!(MeanStd::of(&[7.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
        assert_eq!(MeanStd::of(&[0.5, 1.0]).unwrap().fmt_2(), "0.75±0.25");
    }
}
