// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward-mode derivative of a small attention-like program, checked against
//! central differences.

use domainfit::autodiff::{jvp, Graph, NodeId};
use domainfit::rng::RngStream;
use domainfit::{Result, Tensor};

fn program(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = g.constant(w.clone());
    let h = g.matmul(x, w)?;
    let h = g.relu(h)?;
    let ht = g.transpose(h)?;
    let scores = g.matmul(h, ht)?;
    let p = g.softmax(scores, true)?;
    g.matmul(p, x)
}

fn main() -> Result<()> {
    let mut rng = RngStream::new(0);
    let x = rng.uniform(&[5, 8], -2.0, 2.0);
    let v = rng.uniform(&[5, 8], -1.0, 1.0);
    let w = rng.normal(&[8, 8], 0.4);

    let d = jvp(|g, id| program(g, id, &w), &x, &v)?;

    let h = 1e-2;
    let eval = |x: &Tensor| -> Result<Tensor> {
        Ok(jvp(|g, id| program(g, id, &w), x, &Tensor::zeros(x.shape()))?.primal)
    };
    let mut xp = x.clone();
    xp.axpy(h, &v)?;
    let mut xm = x.clone();
    xm.axpy(-h, &v)?;
    let fd = eval(&xp)?.sub(&eval(&xm)?)?.scale(0.5 / h);

    let err = d.tangent.sub(&fd)?.norm() / fd.norm();
    println!("output shape   {:?}", d.primal.shape());
    println!("|J v|          {:.5}", d.tangent.norm());
    println!("relative error {err:.2e} vs central differences");
    Ok(())
}
