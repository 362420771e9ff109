#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Depth-limited CART regression tree with weighted squared-error splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    root: Node,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    w: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
}

impl Builder<'_> {
    fn mean(&self, idx: &[usize]) -> f64 {
        let (s, sw) = idx
            .iter()
            .fold((0.0, 0.0), |(s, sw), &i| (s + self.w[i] * self.y[i], sw + self.w[i]));
        s / sw
    }

    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let p = self.x[idx[0]].len();
        let tot_w: f64 = idx.iter().map(|&i| self.w[i]).sum();
        let tot_s: f64 = idx.iter().map(|&i| self.w[i] * self.y[i]).sum();
        let parent = -tot_s * tot_s / tot_w;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        for j in 0..p {
            order.sort_by(|&a, &b| self.x[a][j].total_cmp(&self.x[b][j]).then(a.cmp(&b)));
            let (mut lw, mut ls) = (0.0, 0.0);
            for pos in 0..order.len() - 1 {
                let i = order[pos];
                lw += self.w[i];
                ls += self.w[i] * self.y[i];
                let left_n = pos + 1;
                if left_n < self.min_leaf || order.len() - left_n < self.min_leaf {
                    continue;
                }
                let (xa, xb) = (self.x[i][j], self.x[order[pos + 1]][j]);
                if xa == xb {
                    continue;
                }
                let (rw, rs) = (tot_w - lw, tot_s - ls);
                // SSE up to the constant sum of w*y^2
                let crit = -ls * ls / lw - rs * rs / rw;
                if best.map_or(true, |b| crit < b.2) {
                    best = Some((j, 0.5 * (xa + xb), crit));
                }
            }
        }
        best.filter(|b| b.2 < parent - 1e-12 * parent.abs().max(1.0))
    }

    fn build(&self, idx: &[usize], depth: usize) -> Node {
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return Node::Leaf(self.mean(idx));
        }
        match self.best_split(idx) {
            None => Node::Leaf(self.mean(idx)),
            Some((feature, threshold, _)) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
                Node::Split {
                    feature,
                    threshold,
                    left: Box::new(self.build(&l, depth + 1)),
                    right: Box::new(self.build(&r, depth + 1)),
                }
            }
        }
    }
}

impl Tree {
    pub fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], max_depth: usize, min_leaf: usize) -> Self {
        let b = Builder {
            x,
            y,
            w,
            max_depth,
            min_leaf: min_leaf.max(1),
        };
        let idx: Vec<usize> = (0..x.len()).collect();
        Self {
            root: b.build(&idx, 0),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(left).max(go(right)),
            }
        }
        go(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_step_function() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| if i < 17 { -1.0 } else { 2.0 }).collect();
        let t = Tree::fit(&x, &y, &[1.0; 40], 4, 5);
        assert_eq!(t.depth(), 1);
        assert_eq!(t.predict(&[3.0, 0.0]), -1.0);
        assert_eq!(t.predict(&[30.0, 0.0]), 2.0);
    }

    #[test]
    fn respects_depth_and_leaf_size() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64).collect();
        let t = Tree::fit(&x, &y, &[1.0; 64], 4, 5);
        assert!(t.depth() <= 4);
        let t = Tree::fit(&x[..9], &y[..9], &[1.0; 9], 4, 5);
        assert_eq!(t.depth(), 0);
    }
}
