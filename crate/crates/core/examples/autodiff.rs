//! Build a small graph by hand, backpropagate, and compare one gradient entry
//! with a central difference.
//!
//! ```bash
//! cargo run --example autodiff
//! ```

use lowdose::tensor::{Graph, Tensor};

fn loss(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    target: &Tensor<f64>,
) -> lowdose::Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let wv = g.leaf(w.clone(), true);
    let tv = g.leaf(target.clone(), false);
    let y = g.conv2d(xv, wv, None, 1, 1)?;
    let y = g.relu(y);
    let l = g.l1_loss(y, tv)?;
    g.backward(l)?;
    Ok((
        g.value(l).data()[0],
        g.grad(wv).expect("weight gradient").to_vec(),
    ))
}

fn main() -> lowdose::Result<()> {
    let x = Tensor::new(
        vec![1, 1, 4, 4],
        (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
    )?;
    let w = Tensor::new(
        vec![2, 1, 3, 3],
        (0..18).map(|i| (i as f64 * 0.91).cos() * 0.5).collect(),
    )?;
    let target = Tensor::full(&[1, 2, 4, 4], 0.1);
    let (l, grad) = loss(&x, &w, &target)?;
    let h = 1e-6;
    let mut plus = w.clone();
    plus.data_mut()[4] += h;
    let mut minus = w.clone();
    minus.data_mut()[4] -= h;
    let fd = (loss(&x, &plus, &target)?.0 - loss(&x, &minus, &target)?.0) / (2.0 * h);
    println!("loss {l:.6}");
    println!(
        "dL/dw[4]: backprop {:.8}, central difference {fd:.8}",
        grad[4]
    );
    Ok(())
}
