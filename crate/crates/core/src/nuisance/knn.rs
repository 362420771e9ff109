/// k-nearest-neighbour regression on standardized features. Training weights
/// enter as weights in the neighbourhood average.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    k: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    points: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Knn {
    pub fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], k: usize) -> Self {
        let n = x.len() as f64;
        let p = x.first().map_or(0, Vec::len);
        let center: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - center[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let points = x
            .iter()
            .map(|r| (0..p).map(|j| (r[j] - center[j]) / scale[j]).collect())
            .collect();
        Self {
            k: k.clamp(1, x.len()),
            center,
            scale,
            points,
            y: y.to_vec(),
            w: w.to_vec(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let q: Vec<f64> = x
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect();
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        d.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (num, den) = d[..self.k]
            .iter()
            .fold((0.0, 0.0), |(n, s), &(_, i)| (n + self.w[i] * self.y[i], s + self.w[i]));
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_nearest_points() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = Knn::fit(&x, &y, &[1.0; 10], 3);
        assert!((m.predict(&[5.1]) - 5.0).abs() < 1e-12);
        assert!((m.predict(&[-4.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_capped_by_sample() {
        let x = vec![vec![0.0], vec![1.0]];
        let m = Knn::fit(&x, &[2.0, 4.0], &[1.0, 3.0], 10);
        assert!((m.predict(&[0.0]) - 3.5).abs() < 1e-12);
    }
}
