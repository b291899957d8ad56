use super::{slope_constants, Multipliers, PBlocks};
use crate::error::{Error, Result};
use crate::matkit::DenseMatrix;
use crate::neuralfield::Mlp;

/// Offsets of the blocks `dz^0 .. dz^l` inside the stacked vector; the last
/// entry is the total size.
pub fn block_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for d in dims {
        acc += d;
        offs.push(acc);
    }
    offs
}

fn check_pblocks(pb: &PBlocks, dims: &[usize]) -> Result<()> {
    let (n0, nl) = (dims[0], *dims.last().unwrap());
    if pb.p11.shape() != (n0, n0)
        || pb.p22.shape() != (nl, nl)
        || pb.p12.shape() != (n0, nl)
        || pb.p21.shape() != (nl, n0)
    {
        return Err(Error::contract(format!(
            "P blocks do not match network dims n0 = {n0}, nl = {nl}"
        )));
    }
    Ok(())
}

/// Stacked slope constraint matrix `S_T`: layer `i` contributes
/// `lambda_i [[p_i W_i^T W_i, -m_i W_i^T], [-m_i W_i, I]]` on blocks
/// `(i-1, i)`.
pub fn build_st(net: &Mlp, mult: &Multipliers) -> Result<DenseMatrix> {
    mult.validate(net.num_layers())?;
    Ok(stack_layers(net, &mult.lambdas, 1.0))
}

fn stack_layers(net: &Mlp, lambdas: &[f64], scale: f64) -> DenseMatrix {
    let dims = net.layer_dims();
    let offs = block_offsets(&dims);
    let n = offs[dims.len()];
    let mut out = DenseMatrix::zeros(n, n);
    for (i, layer) in net.layers().iter().enumerate() {
        let li = lambdas[i] * scale;
        let (p, m) = slope_constants(&layer.activation);
        let w = &layer.weight;
        let (r_in, r_out) = (offs[i], offs[i + 1]);
        if p != 0.0 {
            out.add_block(r_in, r_in, &w.gram().scale(li * p));
        }
        for k in 0..dims[i + 1] {
            out.add_at(r_out + k, r_out + k, li);
        }
        let off = w.scale(-li * m);
        out.add_block(r_out, r_in, &off);
        out.add_block(r_in, r_out, &off.transpose());
    }
    out
}

/// `P_L`: `P11` at block `(0, 0)`, `P12`/`P21` in the corners, `P22` at
/// block `(l, l)`, zero elsewhere. For `l = 1` the corners are the
/// off-diagonal blocks.
pub fn build_pl(pb: &PBlocks, dims: &[usize]) -> Result<DenseMatrix> {
    if dims.len() < 2 {
        return Err(Error::contract("need at least one layer"));
    }
    check_pblocks(pb, dims)?;
    let offs = block_offsets(dims);
    let n = offs[dims.len()];
    let last = offs[dims.len() - 1];
    let mut out = DenseMatrix::zeros(n, n);
    out.add_block(0, 0, &pb.p11);
    out.add_block(0, last, &pb.p12);
    out.add_block(last, 0, &pb.p21);
    out.add_block(last, last, &pb.p22);
    Ok(out)
}

/// The certificate matrix
///
/// ```text
/// [ P11 + l1 p1 W1'W1   -l1 m1 W1'                            ...   P12        ]
/// [ -l1 m1 W1           l1 I + l2 p2 W2'W2   -l2 m2 W2'       ...   0          ]
/// [                      ...                                                   ]
/// [ P21                  0   ...             -ll ml Wl              P22 + ll I ]
/// ```
///
/// with every `l_i` standing for `lambda_i * lambda` and per-layer slope
/// constants. With a single layer the corner and the sub-diagonal block
/// coincide and are summed.
pub fn build_ml(net: &Mlp, pb: &PBlocks, mult: &Multipliers) -> Result<DenseMatrix> {
    mult.validate(net.num_layers())?;
    let dims = net.layer_dims();
    check_pblocks(pb, &dims)?;
    let offs = block_offsets(&dims);
    let last = offs[dims.len() - 1];
    let mut out = stack_layers(net, &mult.lambdas, mult.lambda);
    out.add_block(0, 0, &pb.p11);
    out.add_block(0, last, &pb.p12);
    out.add_block(last, 0, &pb.p21);
    out.add_block(last, last, &pb.p22);
    Ok(out)
}

/// `[dz^0; dz^l]^T [[P11, P12], [P21, P22]] [dz^0; dz^l]` for the input pair
/// `(z_a, z_b)` and the network outputs at those inputs.
pub fn lemma1_quadratic(net: &Mlp, z_a: &[f64], z_b: &[f64], pb: &PBlocks) -> Result<f64> {
    let dims = net.layer_dims();
    check_pblocks(pb, &dims)?;
    let out_a = net.forward(z_a)?;
    let out_b = net.forward(z_b)?;
    let dz0: Vec<f64> = z_b.iter().zip(z_a).map(|(b, a)| b - a).collect();
    let dzl: Vec<f64> = out_b.iter().zip(&out_a).map(|(b, a)| b - a).collect();
    let cross: f64 = dz0.iter().zip(pb.p12.mat_vec(&dzl)).map(|(a, b)| a * b).sum();
    let cross2: f64 = dzl.iter().zip(pb.p21.mat_vec(&dz0)).map(|(a, b)| a * b).sum();
    Ok(pb.p11.quad_form(&dz0) + cross + cross2 + pb.p22.quad_form(&dzl))
}
