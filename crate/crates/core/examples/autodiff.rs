//! The tensor tape on its own: a two-layer network, its gradients, and an
//! Adam step.

use sbat::numkit::{Adam, Graph, ParamStore, Tensor};

fn main() -> sbat::Result<()> {
    let mut store = ParamStore::<f64>::new();
    let w1 = store.add("w1", Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6])?);
    let w2 = store.add("w2", Tensor::new(&[3, 2], vec![0.2, 0.1, -0.3, 0.2, 0.5, -0.1])?);
    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, -1.0, 0.5])?;
    for step in 0..3 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = g.param(&store, w1);
        let b = g.param(&store, w2);
        let h = g.matmul(xv, a)?;
        let h = g.relu(h);
        let logits = g.matmul(h, b)?;
        let probs = g.softmax_rows(logits)?;
        let loss = g.nll(probs, &[Some(0), Some(1)])?;
        println!("step {step}: loss {:.6}", g.value(loss).data()[0]);
        g.backward_into(loss, &mut store)?;
        println!("  |grad| = {:.6}", store.grad_norm());
        Adam { lr: 0.1, ..Adam::default() }.step(&mut store)?;
    }
    Ok(())
}
