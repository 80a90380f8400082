use super::TimeSeries;
use crate::error::{Error, Result};

/// Sliding windows and their capped contexts, one per timestamp.
///
/// Windows are `k × m` row-major matrices. Before the series has `k` rows of
/// history, the earliest row is repeated to fill the window. Contexts hold
/// the last `min(t + 1, l_ctx)` rows ending at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub k: usize,
    pub l_ctx: usize,
    pub m: usize,
    pub windows: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    /// Originating timestamp (0-based) of each window.
    pub indices: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn context_rows(&self, i: usize) -> usize {
        self.contexts[i].len() / self.m
    }

    fn empty_like(&self) -> Self {
        Self {
            k: self.k,
            l_ctx: self.l_ctx,
            m: self.m,
            windows: Vec::new(),
            contexts: Vec::new(),
            indices: Vec::new(),
        }
    }

    /// Keeps the windows at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut out = self.empty_like();
        for &p in positions {
            out.windows.push(self.windows[p].clone());
            out.contexts.push(self.contexts[p].clone());
            out.indices.push(self.indices[p]);
        }
        out
    }

    fn range(&self, start: usize, end: usize) -> Self {
        Self {
            windows: self.windows[start..end].to_vec(),
            contexts: self.contexts[start..end].to_vec(),
            indices: self.indices[start..end].to_vec(),
            ..self.empty_like()
        }
    }
}

/// Window of `k` rows ending at `t`, padded with the earliest row.
pub fn window_at(values: &[Vec<f64>], t: usize, k: usize) -> Vec<f64> {
    let m = values[0].len();
    let mut w = Vec::with_capacity(k * m);
    for j in 0..k {
        let src = (t + j + 1).saturating_sub(k);
        w.extend_from_slice(&values[src]);
    }
    w
}

/// Context of at most `l_ctx` rows ending at `t`.
pub fn context_at(values: &[Vec<f64>], t: usize, l_ctx: usize) -> Vec<f64> {
    let start = (t + 1).saturating_sub(l_ctx);
    values[start..=t].iter().flatten().copied().collect()
}

pub fn make_windows(series: &TimeSeries, k: usize, l_ctx: usize) -> Result<WindowBatch> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if k == 0 || l_ctx < k {
        return Err(Error::InvalidConfig(format!(
            "window size {k} and context cap {l_ctx} need 1 <= K <= L_ctx"
        )));
    }
    let v = &series.values;
    Ok(WindowBatch {
        k,
        l_ctx,
        m: series.dims(),
        windows: (0..v.len()).map(|t| window_at(v, t, k)).collect(),
        contexts: (0..v.len()).map(|t| context_at(v, t, l_ctx)).collect(),
        indices: (0..v.len()).collect(),
    })
}

/// Contiguous split: the first ⌈ratio·T⌉ windows train, the rest validate.
pub fn split_train_val(batch: &WindowBatch, ratio: f64) -> Result<(WindowBatch, WindowBatch)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio {ratio} not in (0, 1)"
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = batch.len();
    // The slack keeps exact products such as 0.7·10 from rounding up.
    let cut = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok((batch.range(0, cut), batch.range(cut, n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormStats;

    fn series(t: usize, m: usize) -> TimeSeries {
        TimeSeries {
            values: (0..t)
                .map(|r| (0..m).map(|c| (r * 10 + c) as f64).collect())
                .collect(),
            labels: None,
            stats: NormStats {
                min: vec![0.0; m],
                max: vec![1.0; m],
                eps: 1e-8,
            },
            out_of_range: 0,
        }
    }

    #[test]
    fn full_window_has_no_padding() {
        let b = make_windows(&series(5, 1), 3, 4).unwrap();
        // 1-based t=5 is index 4: rows 3, 4, 5
        assert_eq!(b.windows[4], vec![20.0, 30.0, 40.0]);
    }

    #[test]
    fn first_window_repeats_the_first_row() {
        let b = make_windows(&series(5, 2), 3, 4).unwrap();
        assert_eq!(b.windows[0], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // second window: earliest row fills the single missing slot
        assert_eq!(b.windows[1], vec![0.0, 1.0, 0.0, 1.0, 10.0, 11.0]);
    }

    #[test]
    fn context_is_capped() {
        let b = make_windows(&series(5, 1), 3, 4).unwrap();
        assert_eq!(b.contexts[4], vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!(b.contexts[0], vec![0.0]);
        assert_eq!(b.context_rows(2), 3);
    }

    #[test]
    fn one_window_per_timestamp() {
        for k in 1..6 {
            let b = make_windows(&series(7, 2), k, 6).unwrap();
            assert_eq!(b.len(), 7);
            for t in k - 1..7 {
                let expect: Vec<f64> = (t + 1 - k..=t)
                    .flat_map(|r| [(r * 10) as f64, (r * 10 + 1) as f64])
                    .collect();
                assert_eq!(b.windows[t], expect);
            }
        }
    }

    #[test]
    fn bad_sizes_are_rejected() {
        assert!(make_windows(&series(3, 1), 0, 4).is_err());
        assert!(make_windows(&series(3, 1), 5, 4).is_err());
    }

    #[test]
    fn split_uses_ceiling() {
        let b = make_windows(&series(10, 1), 2, 4).unwrap();
        let (tr, va) = split_train_val(&b, 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert_eq!(va.indices, vec![8, 9]);

        let b = make_windows(&series(5, 1), 2, 4).unwrap();
        let (tr, va) = split_train_val(&b, 0.5).unwrap();
        assert_eq!((tr.len(), va.len()), (3, 2));

        let b = make_windows(&series(1, 1), 1, 4).unwrap();
        let (tr, va) = split_train_val(&b, 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (1, 0));
    }
}
