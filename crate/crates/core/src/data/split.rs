use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, OBS, RCT};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Train/validation/test sizes for `n` units: `floor(0.63 n)`,
/// `floor(0.27 n)`, remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = 63 * n / 100;
    let val = 27 * n / 100;
    (train, val, n - train - val)
}

pub fn split_indices(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_sizes(n);
    let test = perm.split_off(a + b);
    let val = perm.split_off(a);
    [perm, val, test]
}

pub fn split(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    let [tr, va, te] = split_indices(ds.len(), seed);
    Ok((ds.select(&tr), ds.select(&va), ds.select(&te)))
}

/// Redraws the treatment of row `i` by a fair coin and swaps in the matching
/// potential outcome: the factual one if the coin agrees, else the
/// counterfactual.
fn reassign(ds: &mut Dataset, i: usize, rng: &mut ChaCha8Rng) {
    let p = ds.potentials.as_ref().expect("checked by caller");
    let t_old = ds.t[i];
    let (y_f, y_cf) = if t_old == 1 {
        (p.y1[i], p.y0[i])
    } else {
        (p.y0[i], p.y1[i])
    };
    let t_new = u8::from(rng.random_bool(0.5));
    ds.t[i] = t_new;
    ds.y[i] = if t_new == t_old { y_f } else { y_cf };
}

/// Carves `floor(fraction · |train|)` random units out of `train` as the
/// trial sample, rerandomizing their treatments. Returns `(obs, rct)`.
pub fn make_rct(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!(
            "trial fraction must lie in (0, 1), got {fraction}"
        )));
    }
    train.potentials()?;
    let n = train.len();
    // The epsilon absorbs representation error in fractions like 200/2200.
    let m = ((fraction * n as f64) + 1e-9).floor() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let obs_idx = perm.split_off(m);
    let mut rct_idx = perm;
    rct_idx.sort_unstable();
    let mut obs_idx = obs_idx;
    obs_idx.sort_unstable();

    let mut obs = train.select(&obs_idx);
    obs.g.iter_mut().for_each(|g| *g = OBS);
    let mut rct = train.select(&rct_idx);
    let mut coin = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::RCT));
    for i in 0..rct.len() {
        reassign(&mut rct, i, &mut coin);
        rct.g[i] = RCT;
    }
    Ok((obs, rct))
}

/// Applies the fair-coin treatment replacement to every unit.
pub fn rerandomize_validation(val: &Dataset, seed: u64) -> Result<Dataset> {
    val.potentials()?;
    let mut out = val.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..out.len() {
        reassign(&mut out, i, &mut rng);
    }
    Ok(out)
}

/// Mini-batch index lists for one epoch; reshuffled per `(seed, epoch)`,
/// last short batch kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::contract(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(seed, stream::BATCHES),
        epoch as u64,
    ));
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
