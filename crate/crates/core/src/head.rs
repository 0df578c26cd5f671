//! Center-based localization head: classification, offset, and size maps over
//! the search-region grid, their training losses, and box decoding.

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Loss weighting (total = l1*L1 + giou*Lgiou + cls*Lcls) and focal exponents.
#[derive(Copy, Clone, Debug)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 5.0,
            giou: 2.0,
            cls: 1.0,
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

/// Decoded value-level head output for one sample.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    /// classification scores in [0,1], row-major [grid*grid]
    pub c: Tensor,
    /// sub-cell offsets in [0,1], [grid*grid, 2] as (ox, oy)
    pub o: Tensor,
    /// normalized sizes in [0,1], [grid*grid, 2] as (w, h)
    pub s: Tensor,
    pub grid: usize,
}

impl HeadMaps {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid * self.grid;
        if self.c.numel() != n || self.o.shape() != [n, 2] || self.s.shape() != [n, 2] {
            return Err(Error::dim(format!(
                "head maps do not share the {0}x{0} grid",
                self.grid
            )));
        }
        Ok(())
    }
}

/// Tape-level head output for a batch.
#[derive(Copy, Clone, Debug)]
pub struct HeadVars {
    /// [B, N, 1]
    pub c: Var,
    /// [B, N, 2]
    pub o: Var,
    /// [B, N, 2]
    pub s: Var,
    pub grid: usize,
}

/// One Conv-BN unit of the tower (weights staged, running stats by value).
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub w: Var,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// parameter-set prefix of the running-stat buffers
    pub buffer_prefix: String,
}

#[derive(Clone, Debug)]
pub struct BranchVars {
    pub convs: Vec<ConvBn>,
    pub out_w: Var,
    pub out_b: Var,
}

#[derive(Clone, Debug)]
pub struct HeadVarsSet {
    pub cls: BranchVars,
    pub off: BranchVars,
    pub size: BranchVars,
}

/// Batch statistics produced by training-mode batch norms, for running-average
/// updates outside the tape.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub buffer_prefix: String,
    pub stats: BatchStats,
}

fn branch_forward(
    tape: &mut Tape,
    branch: &BranchVars,
    mut x: Var,
    grid: usize,
    train: bool,
    bn_eps: f64,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    for cb in &branch.convs {
        let col = tape.im2col(x, grid, grid, 3)?;
        let y = tape.matmul(col, cb.w)?;
        let normed = if train {
            let (v, stats) = tape.batch_norm_train(y, cb.gamma, cb.beta, bn_eps)?;
            updates.push(BnUpdate {
                buffer_prefix: cb.buffer_prefix.clone(),
                stats,
            });
            v
        } else {
            tape.batch_norm_eval(y, cb.gamma, cb.beta, &cb.running_mean, &cb.running_var, bn_eps)?
        };
        x = tape.relu(normed);
    }
    let out = tape.matmul(x, branch.out_w)?;
    let out = tape.add_bias(out, branch.out_b)?;
    Ok(tape.sigmoid(out))
}

/// Run the three-branch tower over search features [B, N, D]. N must form a
/// square grid.
pub fn head_forward(
    tape: &mut Tape,
    head: &HeadVarsSet,
    sr_feat: Var,
    train: bool,
    bn_eps: f64,
) -> Result<(HeadVars, Vec<BnUpdate>)> {
    let sh = tape.value(sr_feat).shape().to_vec();
    if sh.len() != 3 {
        return Err(Error::dim("head expects [B, N, D] features"));
    }
    let n = sh[1];
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::geometry(format!(
            "search token count {n} does not form a square grid"
        )));
    }
    let mut updates = Vec::new();
    let c = branch_forward(tape, &head.cls, sr_feat, grid, train, bn_eps, &mut updates)?;
    let o = branch_forward(tape, &head.off, sr_feat, grid, train, bn_eps, &mut updates)?;
    let s = branch_forward(tape, &head.size, sr_feat, grid, train, bn_eps, &mut updates)?;
    Ok((HeadVars { c, o, s, grid }, updates))
}

/// Standard deviation adaptive to the object's size on the grid.
pub fn sigma_for(w_cells: f64, h_cells: f64, floor: f64, divisor: f64) -> f64 {
    floor.max((w_cells * h_cells).sqrt() / divisor)
}

/// Ground-truth heatmap: exp(-((x-cx)^2 + (y-cy)^2) / (2 sigma^2)) with peak
/// value exactly 1 at the integer center cell.
pub fn gaussian_target(
    center: (usize, usize),
    size_cells: (f64, f64),
    grid: usize,
    sigma_floor: f64,
    sigma_divisor: f64,
) -> Result<Tensor> {
    let (cx, cy) = center;
    if cx >= grid || cy >= grid {
        return Err(Error::contract(format!(
            "center cell ({cx},{cy}) outside {grid}x{grid} grid"
        )));
    }
    let sigma = sigma_for(size_cells.0, size_cells.1, sigma_floor, sigma_divisor);
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(grid * grid);
    for y in 0..grid {
        for x in 0..grid {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            data.push((-(dx * dx + dy * dy) / denom).exp());
        }
    }
    Tensor::new(vec![grid * grid], data)
}

const CLAMP_LO: f64 = 1e-6;
const CLAMP_HI: f64 = 1.0 - 1e-6;

/// Gaussian-weighted focal loss over one map (value level).
/// Positive branch at cells where the target is exactly 1; every other cell
/// contributes the (1-target)^beta weighted negative branch.
pub fn focal_loss(c: &Tensor, chat: &Tensor, w: &LossWeights) -> Result<f64> {
    if c.numel() != chat.numel() {
        return Err(Error::dim(format!(
            "focal maps differ: {:?} vs {:?}",
            c.shape(),
            chat.shape()
        )));
    }
    let mut loss = 0.0;
    for (&p_raw, &t) in c.data().iter().zip(chat.data()) {
        let p = p_raw.clamp(CLAMP_LO, CLAMP_HI);
        if t == 1.0 {
            loss -= (1.0 - p).powf(w.alpha) * p.ln();
        } else {
            loss -= (1.0 - t).powf(w.beta) * p.powf(w.alpha) * (1.0 - p).ln();
        }
    }
    Ok(loss)
}

fn corners(b: &BBox) -> (f64, f64, f64, f64) {
    b.corners()
}

/// 1 - GIoU for center-format boxes.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if pred.w <= 0.0 || pred.h <= 0.0 || gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::contract("giou_loss: degenerate box"));
    }
    let (ax1, ay1, ax2, ay2) = corners(pred);
    let (bx1, by1, bx2, by2) = corners(gt);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclose = ew * eh;
    let giou = inter / union - (enclose - union) / enclose;
    Ok(1.0 - giou)
}

/// Mean absolute difference over (cx, cy, w, h).
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    ((pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs()
        + (pred.h - gt.h).abs())
        / 4.0
}

/// Weighted total loss evaluated at the ground-truth center cell.
pub fn total_loss(maps: &HeadMaps, chat: &Tensor, gt: &BBox, w: &LossWeights) -> Result<f64> {
    maps.validate()?;
    let grid = maps.grid;
    let cx_cell = ((gt.cx * grid as f64) as usize).min(grid - 1);
    let cy_cell = ((gt.cy * grid as f64) as usize).min(grid - 1);
    let cell = cy_cell * grid + cx_cell;
    let pred = BBox {
        cx: (cx_cell as f64 + maps.o.at2(cell, 0)) / grid as f64,
        cy: (cy_cell as f64 + maps.o.at2(cell, 1)) / grid as f64,
        w: maps.s.at2(cell, 0).max(CLAMP_LO),
        h: maps.s.at2(cell, 1).max(CLAMP_LO),
    };
    let cls = focal_loss(&maps.c, chat, w)?;
    let gl = giou_loss(&pred, gt)?;
    let l1 = l1_loss(&pred, gt);
    Ok(w.l1 * l1 + w.giou * gl + w.cls * cls)
}

/// Tape-level focal loss for a batch: [B, N, 1] predictions against constant
/// targets [B, N]; sum over cells, mean over batch.
pub fn focal_loss_t(tape: &mut Tape, c: Var, chat: &Tensor, w: &LossWeights) -> Result<Var> {
    let sh = tape.value(c).shape().to_vec();
    if sh.len() != 3 || sh[2] != 1 {
        return Err(Error::dim("focal_loss_t expects [B, N, 1]"));
    }
    let (b, n) = (sh[0], sh[1]);
    if chat.shape() != [b, n] {
        return Err(Error::dim(format!(
            "focal target {:?} does not match predictions [{b}, {n}]",
            chat.shape()
        )));
    }
    let flat = tape.reshape(c, vec![b, n])?;
    let p = tape.clamp(flat, CLAMP_LO, CLAMP_HI);
    let pos_mask: Vec<f64> = chat.data().iter().map(|&t| if t == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg_w: Vec<f64> = chat
        .data()
        .iter()
        .map(|&t| if t == 1.0 { 0.0 } else { (1.0 - t).powf(w.beta) })
        .collect();
    let pos_mask = tape.constant(Tensor::new(vec![b, n], pos_mask)?);
    let neg_w = tape.constant(Tensor::new(vec![b, n], neg_w)?);

    let one_minus = tape.affine(p, -1.0, 1.0);
    let ln_p = tape.ln(p)?;
    let ln_q = tape.ln(one_minus)?;
    let pow_q = tape.pow_const(one_minus, w.alpha);
    let pos = {
        let t = tape.mul(pow_q, ln_p)?;
        tape.mul(t, pos_mask)?
    };
    let pow_p = tape.pow_const(p, w.alpha);
    let neg = {
        let t = tape.mul(pow_p, ln_q)?;
        tape.mul(t, neg_w)?
    };
    let both = tape.add(pos, neg)?;
    let total = tape.sum_all(both);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Tape-level box regression at the ground-truth center cells. `gt` supplies
/// one box per batch row; returns (l1_mean, giou_mean).
pub fn box_losses_t(
    tape: &mut Tape,
    o: Var,
    s: Var,
    grid: usize,
    gt: &[BBox],
) -> Result<(Var, Var)> {
    let sh = tape.value(o).shape().to_vec();
    if sh.len() != 3 || sh[2] != 2 {
        return Err(Error::dim("box_losses_t expects offsets [B, N, 2]"));
    }
    let b = sh[0];
    if gt.len() != b {
        return Err(Error::dim(format!("{} gt boxes for batch {b}", gt.len())));
    }
    for g in gt {
        g.validate()?;
    }
    let cells: Vec<usize> = gt
        .iter()
        .map(|g| {
            let cx = ((g.cx * grid as f64) as usize).min(grid - 1);
            let cy = ((g.cy * grid as f64) as usize).min(grid - 1);
            cy * grid + cx
        })
        .collect();
    let og = tape.gather_cell(o, &cells)?; // [B, 2]
    let sg = tape.gather_cell(s, &cells)?; // [B, 2]

    let xhat: Vec<f64> = cells.iter().map(|c| (c % grid) as f64).collect();
    let yhat: Vec<f64> = cells.iter().map(|c| (c / grid) as f64).collect();
    let xhat = tape.constant(Tensor::new(vec![b, 1], xhat)?);
    let yhat = tape.constant(Tensor::new(vec![b, 1], yhat)?);

    let ox = tape.slice_last(og, 0, 1)?;
    let oy = tape.slice_last(og, 1, 1)?;
    let sw = tape.slice_last(sg, 0, 1)?;
    let shh = tape.slice_last(sg, 1, 1)?;
    let gi = 1.0 / grid as f64;
    let cx = {
        let t = tape.add(xhat, ox)?;
        tape.scale(t, gi)
    };
    let cy = {
        let t = tape.add(yhat, oy)?;
        tape.scale(t, gi)
    };

    // ground-truth constants, one column each
    let col = |tape: &mut Tape, f: &dyn Fn(&BBox) -> f64| -> Result<Var> {
        let v: Vec<f64> = gt.iter().map(|g| f(g)).collect();
        Ok(tape.constant(Tensor::new(vec![b, 1], v)?))
    };
    let gx1 = col(tape, &|g| g.cx - g.w / 2.0)?;
    let gy1 = col(tape, &|g| g.cy - g.h / 2.0)?;
    let gx2 = col(tape, &|g| g.cx + g.w / 2.0)?;
    let gy2 = col(tape, &|g| g.cy + g.h / 2.0)?;
    let gcx = col(tape, &|g| g.cx)?;
    let gcy = col(tape, &|g| g.cy)?;
    let gw = col(tape, &|g| g.w)?;
    let gh = col(tape, &|g| g.h)?;

    // l1 over (cx, cy, w, h)
    let l1 = {
        let dx = tape.sub(cx, gcx)?;
        let dy = tape.sub(cy, gcy)?;
        let dw = tape.sub(sw, gw)?;
        let dh = tape.sub(shh, gh)?;
        let cat = tape.concat_last(&[dx, dy, dw, dh])?;
        let a = tape.abs(cat);
        tape.mean_all(a)
    };

    // giou from corners; predicted sizes are already in (0,1) via sigmoid
    let hw = tape.scale(sw, 0.5);
    let hh = tape.scale(shh, 0.5);
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let ix1 = tape.max_elem(px1, gx1)?;
    let iy1 = tape.max_elem(py1, gy1)?;
    let ix2 = tape.min_elem(px2, gx2)?;
    let iy2 = tape.min_elem(py2, gy2)?;
    let iw = {
        let d = tape.sub(ix2, ix1)?;
        tape.relu(d)
    };
    let ih = {
        let d = tape.sub(iy2, iy1)?;
        tape.relu(d)
    };
    let inter = tape.mul(iw, ih)?;
    let pa = tape.mul(sw, shh)?;
    let ga = tape.mul(gw, gh)?;
    let union = {
        let t = tape.add(pa, ga)?;
        tape.sub(t, inter)?
    };
    let ex1 = tape.min_elem(px1, gx1)?;
    let ey1 = tape.min_elem(py1, gy1)?;
    let ex2 = tape.max_elem(px2, gx2)?;
    let ey2 = tape.max_elem(py2, gy2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclose = tape.mul(ew, eh)?;
    let iou_term = tape.div(inter, union)?;
    let slack = {
        let d = tape.sub(enclose, union)?;
        tape.div(d, enclose)?
    };
    let giou = tape.sub(iou_term, slack)?;
    let one_minus = tape.affine(giou, -1.0, 1.0);
    let giou_mean = tape.mean_all(one_minus);

    Ok((l1, giou_mean))
}

/// Weighted batch total: w.l1 * L1 + w.giou * Lgiou + w.cls * Lcls.
pub fn total_loss_t(
    tape: &mut Tape,
    heads: &HeadVars,
    chat: &Tensor,
    gt: &[BBox],
    w: &LossWeights,
) -> Result<Var> {
    let cls = focal_loss_t(tape, heads.c, chat, w)?;
    let (l1, giou) = box_losses_t(tape, heads.o, heads.s, heads.grid, gt)?;
    let a = tape.scale(l1, w.l1);
    let b = tape.scale(giou, w.giou);
    let c = tape.scale(cls, w.cls);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Argmax decode: highest score in (window ⊙ C) picks the cell; the box comes
/// from O and S at that cell. Ties break toward the smallest row-major index.
/// The returned score is the raw classification value at the chosen cell.
pub fn decode_box(maps: &HeadMaps, window: Option<&Tensor>) -> Result<(BBox, f64)> {
    maps.validate()?;
    let grid = maps.grid;
    let n = grid * grid;
    if let Some(wd) = window {
        if wd.numel() != n {
            return Err(Error::dim(format!(
                "window has {} cells for a {n}-cell map",
                wd.numel()
            )));
        }
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..n {
        let mut v = maps.c.data()[i];
        if let Some(wd) = window {
            v *= wd.data()[i];
        }
        if v > best_score {
            best_score = v;
            best = i;
        }
    }
    let (x, y) = (best % grid, best / grid);
    let b = BBox {
        cx: (x as f64 + maps.o.at2(best, 0)) / grid as f64,
        cy: (y as f64 + maps.o.at2(best, 1)) / grid as f64,
        w: maps.s.at2(best, 0),
        h: maps.s.at2(best, 1),
    };
    Ok((b, maps.c.data()[best]))
}
