//! Reverse pass: topological walk of the recorded graph with per-op
//! vector-Jacobian products. Gradients accumulate additively into leaf
//! cells, so two backward calls without zeroing double every leaf grad.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::{Node, Op, Tensor, TensorError};

impl Tensor {
    /// Populate `grad` on every reachable leaf with d(self)/d(leaf).
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        let root = self.node().cloned().ok_or(TensorError::NoGraph)?;

        // Iterative post-order DFS; each node enters the order exactly once.
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Rc<Node>, usize)> = vec![(Rc::clone(&root), 0)];
        visited.insert(Rc::as_ptr(&root), ());
        while let Some((node, child_idx)) = stack.pop() {
            let mut next_child = None;
            for (k, input) in node.inputs.iter().enumerate().skip(child_idx) {
                if let Some(child) = &input.node {
                    if !visited.contains_key(&Rc::as_ptr(child)) {
                        visited.insert(Rc::as_ptr(child), ());
                        next_child = Some((k, Rc::clone(child)));
                        break;
                    }
                }
            }
            match next_child {
                Some((k, child)) => {
                    stack.push((node, k + 1));
                    stack.push((child, 0));
                }
                None => order.push(node),
            }
        }

        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&root), vec![1.0]);

        for node in order.iter().rev() {
            let dy = match grads.remove(&Rc::as_ptr(node)) {
                Some(g) => g,
                None => continue, // no path to the loss contributed grad
            };
            if let Op::Leaf = node.op {
                if let Some(cell) = &node.leaf_grad {
                    let mut acc = cell.borrow_mut();
                    for (a, d) in acc.iter_mut().zip(&dy) {
                        *a += d;
                    }
                }
                continue;
            }
            let input_grads = vjp(node, &dy);
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                if let (Some(child), Some(g)) = (&input.node, grad) {
                    match grads.entry(Rc::as_ptr(child)) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, d) in e.get_mut().iter_mut().zip(&g) {
                                *a += d;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn tracked(node: &Node, k: usize) -> bool {
    node.inputs[k].node.is_some()
}

/// Per-op vector-Jacobian product: grad of the loss w.r.t. each input,
/// `None` for inputs that are not on the graph.
fn vjp(node: &Node, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
    let ins = &node.inputs;
    let out = &node.out_data;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            tracked(node, 0).then(|| dy.to_vec()),
            tracked(node, 1).then(|| dy.to_vec()),
        ],
        Op::Sub => vec![
            tracked(node, 0).then(|| dy.to_vec()),
            tracked(node, 1).then(|| dy.iter().map(|v| -v).collect()),
        ],
        Op::Mul => vec![
            tracked(node, 0).then(|| dy.iter().zip(ins[1].data.iter()).map(|(d, b)| d * b).collect()),
            tracked(node, 1).then(|| dy.iter().zip(ins[0].data.iter()).map(|(d, a)| d * a).collect()),
        ],
        Op::AddScalar(_) => vec![tracked(node, 0).then(|| dy.to_vec())],
        Op::MulScalar(c) => {
            let c = *c;
            vec![tracked(node, 0).then(|| dy.iter().map(|v| v * c).collect())]
        }
        Op::Matmul => {
            let (m, k) = (ins[0].shape[0], ins[0].shape[1]);
            let n = ins[1].shape[1];
            vec![
                tracked(node, 0).then(|| kernels::matmul_bt(dy, &ins[1].data, m, n, k)),
                tracked(node, 1).then(|| kernels::matmul_at(&ins[0].data, dy, k, m, n)),
            ]
        }
        Op::Transpose => {
            let (r, c) = (ins[0].shape[0], ins[0].shape[1]);
            vec![tracked(node, 0).then(|| {
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = dy[i * r + j];
                    }
                }
                dx
            })]
        }
        Op::Conv2d { stride, pad } => {
            let (b, ci, h, w) = dims4(&ins[0].shape);
            let (co, _, kh, kw) = dims4(&ins[1].shape);
            vec![
                tracked(node, 0).then(|| {
                    kernels::conv2d_bwd_x(dy, &ins[1].data, b, ci, h, w, co, kh, kw, *stride, *pad)
                }),
                tracked(node, 1).then(|| {
                    kernels::conv2d_bwd_w(&ins[0].data, dy, b, ci, h, w, co, kh, kw, *stride, *pad)
                }),
            ]
        }
        Op::ConvT2d { stride, pad } => {
            let (b, ci, h, w) = dims4(&ins[0].shape);
            let (_, co, kh, kw) = dims4(&ins[1].shape);
            vec![
                tracked(node, 0).then(|| {
                    kernels::convt2d_bwd_x(dy, &ins[1].data, b, ci, h, w, co, kh, kw, *stride, *pad)
                }),
                tracked(node, 1).then(|| {
                    kernels::convt2d_bwd_w(&ins[0].data, dy, b, ci, h, w, co, kh, kw, *stride, *pad)
                }),
            ]
        }
        Op::Relu => vec![tracked(node, 0).then(|| {
            dy.iter()
                .zip(ins[0].data.iter())
                .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                .collect()
        })],
        Op::Sigmoid => vec![tracked(node, 0).then(|| {
            dy.iter().zip(out.iter()).map(|(d, &y)| d * y * (1.0 - y)).collect()
        })],
        Op::Exp => vec![tracked(node, 0).then(|| {
            dy.iter().zip(out.iter()).map(|(d, &y)| d * y).collect()
        })],
        Op::Log => vec![tracked(node, 0).then(|| {
            dy.iter().zip(ins[0].data.iter()).map(|(d, &x)| d / x).collect()
        })],
        Op::Sqrt => vec![tracked(node, 0).then(|| {
            dy.iter().zip(out.iter()).map(|(d, &y)| d * 0.5 / y).collect()
        })],
        Op::Square => vec![tracked(node, 0).then(|| {
            dy.iter().zip(ins[0].data.iter()).map(|(d, &x)| d * 2.0 * x).collect()
        })],
        Op::Recip => vec![tracked(node, 0).then(|| {
            dy.iter().zip(out.iter()).map(|(d, &y)| -d * y * y).collect()
        })],
        Op::Clamp { lo, hi } => vec![tracked(node, 0).then(|| {
            dy.iter()
                .zip(ins[0].data.iter())
                .map(|(d, &x)| if x > *lo && x < *hi { *d } else { 0.0 })
                .collect()
        })],
        Op::Reshape => vec![tracked(node, 0).then(|| dy.to_vec())],
        Op::Concat { axis } => {
            let outer: usize = node.out_shape[..*axis].iter().product();
            let inner: usize = node.out_shape[*axis + 1..].iter().product();
            let total_span = node.out_shape[*axis] * inner;
            let mut offsets = Vec::with_capacity(ins.len());
            let mut off = 0;
            for input in ins {
                offsets.push(off);
                off += input.shape[*axis] * inner;
            }
            ins.iter()
                .enumerate()
                .map(|(k, input)| {
                    tracked(node, k).then(|| {
                        let span = input.shape[*axis] * inner;
                        let mut dx = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            let start = o * total_span + offsets[k];
                            dx.extend_from_slice(&dy[start..start + span]);
                        }
                        dx
                    })
                })
                .collect()
        }
        Op::Sum => vec![tracked(node, 0).then(|| vec![dy[0]; ins[0].data.len()])],
        Op::Mean => {
            let n = ins[0].data.len().max(1) as f64;
            vec![tracked(node, 0).then(|| vec![dy[0] / n; ins[0].data.len()])]
        }
        Op::BatchedDot => {
            let (b, d) = (ins[0].shape[0], ins[0].shape[1]);
            let scale_by = |src: &[f64]| {
                let mut g = vec![0.0; b * d];
                for i in 0..b {
                    for j in 0..d {
                        g[i * d + j] = dy[i] * src[i * d + j];
                    }
                }
                g
            };
            vec![
                tracked(node, 0).then(|| scale_by(&ins[1].data)),
                tracked(node, 1).then(|| scale_by(&ins[0].data)),
            ]
        }
        Op::ScaleRows => {
            let (b, d) = (ins[0].shape[0], ins[0].shape[1]);
            vec![
                tracked(node, 0).then(|| {
                    let mut dx = vec![0.0; b * d];
                    for i in 0..b {
                        let s = ins[1].data[i];
                        for j in 0..d {
                            dx[i * d + j] = dy[i * d + j] * s;
                        }
                    }
                    dx
                }),
                tracked(node, 1).then(|| {
                    (0..b)
                        .map(|i| {
                            (0..d).map(|j| ins[0].data[i * d + j] * dy[i * d + j]).sum()
                        })
                        .collect()
                }),
            ]
        }
        Op::L2NormalizeRows => {
            let (b, d) = (ins[0].shape[0], ins[0].shape[1]);
            vec![tracked(node, 0).then(|| {
                let mut dx = vec![0.0; b * d];
                for i in 0..b {
                    let x = &ins[0].data[i * d..(i + 1) * d];
                    let y = &out[i * d..(i + 1) * d];
                    let g = &dy[i * d..(i + 1) * d];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (g[j] - gy * y[j]) / norm;
                    }
                }
                dx
            })]
        }
        Op::LogSumExpRows { exclude_diag } => {
            let (b, m) = (ins[0].shape[0], ins[0].shape[1]);
            vec![tracked(node, 0).then(|| {
                let mut dx = vec![0.0; b * m];
                for i in 0..b {
                    let lse = out[i];
                    for j in 0..m {
                        if *exclude_diag && j == i {
                            continue;
                        }
                        dx[i * m + j] = dy[i] * (ins[0].data[i * m + j] - lse).exp();
                    }
                }
                dx
            })]
        }
        Op::DiagPart => {
            let n = ins[0].shape[0];
            vec![tracked(node, 0).then(|| {
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    dx[i * n + i] = dy[i];
                }
                dx
            })]
        }
        Op::AddRowBias => {
            let (b, n) = (ins[0].shape[0], ins[0].shape[1]);
            vec![
                tracked(node, 0).then(|| dy.to_vec()),
                tracked(node, 1).then(|| {
                    let mut db = vec![0.0; n];
                    for i in 0..b {
                        for j in 0..n {
                            db[j] += dy[i * n + j];
                        }
                    }
                    db
                }),
            ]
        }
        Op::AddChannelBias => {
            let (b, c, h, w) = dims4(&ins[0].shape);
            let plane = h * w;
            vec![
                tracked(node, 0).then(|| dy.to_vec()),
                tracked(node, 1).then(|| {
                    let mut db = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            db[ci] += dy[off..off + plane].iter().sum::<f64>();
                        }
                    }
                    db
                }),
            ]
        }
        Op::MulChannel => {
            let (b, c, h, w) = dims4(&ins[0].shape);
            let plane = h * w;
            vec![
                tracked(node, 0).then(|| {
                    let mut dx = vec![0.0; b * c * plane];
                    for bi in 0..b {
                        for ci in 0..c {
                            let s = ins[1].data[ci];
                            let off = (bi * c + ci) * plane;
                            for p in 0..plane {
                                dx[off + p] = dy[off + p] * s;
                            }
                        }
                    }
                    dx
                }),
                tracked(node, 1).then(|| {
                    let mut ds = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            ds[ci] += ins[0].data[off..off + plane]
                                .iter()
                                .zip(&dy[off..off + plane])
                                .map(|(x, d)| x * d)
                                .sum::<f64>();
                        }
                    }
                    ds
                }),
            ]
        }
        Op::MeanPerChannel => {
            let (b, c, h, w) = dims4(&ins[0].shape);
            let plane = h * w;
            let scale = 1.0 / (b * plane) as f64;
            vec![tracked(node, 0).then(|| {
                let mut dx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    for ci in 0..c {
                        let g = dy[ci] * scale;
                        let off = (bi * c + ci) * plane;
                        for p in 0..plane {
                            dx[off + p] = g;
                        }
                    }
                }
                dx
            })]
        }
        Op::LookupRows { indices } => {
            let (n, d) = (ins[0].shape[0], ins[0].shape[1]);
            vec![tracked(node, 0).then(|| {
                let mut dt = vec![0.0; n * d];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += dy[r * d + j];
                    }
                }
                dt
            })]
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::leaf(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let x = Tensor::leaf(vec![3.0], &[1]).unwrap();
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        let first = x.grad().unwrap();
        loss.backward().unwrap();
        let second = x.grad().unwrap();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn grads_accumulate_across_multiple_uses() {
        // loss = sum(x * x_used_twice + x) -> d/dx = 2x + 1
        let x = Tensor::leaf(vec![3.0, -1.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn constant_branch_gets_no_grad() {
        let x = Tensor::leaf(vec![2.0], &[1]).unwrap();
        let c = Tensor::from_vec(vec![5.0], &[1]).unwrap();
        let loss = x.mul(&c).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn lookup_grad_is_one_hot_rows() {
        let table = Tensor::leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        table.lookup_rows(&[1]).unwrap().sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
